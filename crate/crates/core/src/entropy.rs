//! Worst-case conditional min-entropy of discretized homodyne samples and
//! leftover-hash sizing of the extractor.
//!
//! The adversary is assumed to know the classical noise `E` exactly, with
//! `|E| ≤ e_max = factor · σ_E`. The guessing probability of the discretized
//! measurement is then the larger of
//!
//! * `c1 = ½[erf((e_max − R + 3δ/2) / (√2 σ_Q)) + 1]`, the mass piled into a
//!   rail bin, and
//! * `c2 = erf(δ / (2√2 σ_Q))`, the mass of the central bin,
//!
//! and `H_min = −log2 max(c1, c2)` bits per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homodyne::RawSampleStream;
use crate::special::{erf, erfc};

/// ADC description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcSpec {
    /// Sampling precision `n` in bits.
    pub precision: u8,
    /// Half the input voltage range `R`, in volts.
    pub half_range: f64,
    /// Samples per second `S`.
    pub sample_rate: f64,
}

impl AdcSpec {
    pub fn new(precision: u8, half_range: f64, sample_rate: f64) -> Result<Self> {
        if !(1..=16).contains(&precision) {
            return Err(Error::Config(format!("ADC precision {precision} outside 1..=16 bits")));
        }
        if !(half_range > 0.0) || !(sample_rate > 0.0) {
            return Err(Error::Config("ADC range and sample rate must be positive".into()));
        }
        Ok(AdcSpec {
            precision,
            half_range,
            sample_rate,
        })
    }

    /// Quantization step `δ = 2R / 2ⁿ`.
    pub fn delta(&self) -> f64 {
        2.0 * self.half_range / (1u64 << self.precision) as f64
    }

    pub fn max_code(&self) -> u16 {
        ((1u32 << self.precision) - 1) as u16
    }

    /// `(2ⁿ − 1) / 2`, the voltage zero in code units.
    pub fn mid_code(&self) -> f64 {
        self.max_code() as f64 / 2.0
    }

    pub fn code_to_volts(&self, code: u16) -> f64 {
        (code as f64 - self.mid_code()) * self.delta()
    }
}

/// How the ADC quantization-error variance is charged against `σ_M²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizationTerm {
    /// `(δ/12)²`, the value the reference operating point was computed with.
    #[default]
    Reference,
    /// `δ²/12`, the variance of a uniform error over one bin.
    Conventional,
}

impl QuantizationTerm {
    pub fn variance(self, adc: &AdcSpec) -> f64 {
        let d = adc.delta();
        match self {
            QuantizationTerm::Reference => (d / 12.0).powi(2),
            QuantizationTerm::Conventional => d * d / 12.0,
        }
    }
}

/// Variance bookkeeping for one calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    /// Total measured variance σ_M² (V²).
    pub sigma_m_sq: f64,
    /// Classical (electronic) variance σ_E² (V²).
    pub sigma_e_sq: f64,
    /// Quantum variance σ_Q² (V²).
    pub sigma_q_sq: f64,
    /// `e_max = e_bound_factor · σ_E`.
    pub e_bound_factor: f64,
}

pub const DEFAULT_E_BOUND_FACTOR: f64 = 5.0;

impl NoiseStats {
    pub fn new(sigma_m_sq: f64, sigma_e_sq: f64, sigma_q_sq: f64, e_bound_factor: f64) -> Result<Self> {
        if sigma_m_sq < 0.0 || sigma_e_sq < 0.0 || sigma_q_sq < 0.0 {
            return Err(Error::Calibration("variances must be non-negative".into()));
        }
        if sigma_q_sq > sigma_m_sq {
            return Err(Error::Calibration(format!(
                "quantum variance {sigma_q_sq:e} exceeds measured variance {sigma_m_sq:e}"
            )));
        }
        if !(e_bound_factor >= 0.0) {
            return Err(Error::Config("e_bound_factor must be non-negative".into()));
        }
        Ok(NoiseStats {
            sigma_m_sq,
            sigma_e_sq,
            sigma_q_sq,
            e_bound_factor,
        })
    }

    /// Derives σ_Q² from the measured and classical variances.
    pub fn calibrate(
        sigma_m_sq: f64,
        sigma_e_sq: f64,
        adc: &AdcSpec,
        form: QuantizationTerm,
        e_bound_factor: f64,
    ) -> Result<Self> {
        let q = sigma_q_squared(sigma_m_sq, sigma_e_sq, adc, form)?;
        Self::new(sigma_m_sq, sigma_e_sq, q, e_bound_factor)
    }

    pub fn e_max(&self) -> f64 {
        self.e_bound_factor * self.sigma_e_sq.sqrt()
    }
}

/// Min-entropy estimate plus extractor sizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    #[serde(rename = "sigma_M_sq")]
    pub sigma_m_sq: f64,
    #[serde(rename = "sigma_E_sq")]
    pub sigma_e_sq: f64,
    #[serde(rename = "sigma_Q_sq")]
    pub sigma_q_sq: f64,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub h_min_bits: f64,
    /// `c1 ≤ c2`, i.e. the central bin is the adversary's best guess.
    pub safe: bool,
    /// `log2 ε` for the configured `(j, k)`; absent until sized.
    pub epsilon_log2: Option<f64>,
    /// `j / k`; absent until sized.
    pub extraction_ratio: Option<f64>,
}

impl EntropyReport {
    /// Fraction of each sample's bits that is extractable, `h_min / n`.
    pub fn extractable_ratio(&self, precision: u8) -> f64 {
        self.h_min_bits / precision as f64
    }

    /// Attaches the security parameter for a `j x k` extractor.
    pub fn size_extractor(&mut self, j: usize, k: usize, precision: u8) -> Result<f64> {
        let eps = security_parameter(j, k, self.h_min_bits, precision)?;
        self.epsilon_log2 = Some(eps);
        self.extraction_ratio = Some(j as f64 / k as f64);
        Ok(eps)
    }
}

/// Unbiased sample variance of the stream in volts².
pub fn sample_variance(raw: &RawSampleStream) -> Result<f64> {
    code_variance(&raw.codes, &raw.adc)
}

/// Unbiased variance of ADC codes mapped to volts. Sums are exact integers,
/// so the result does not depend on sample order or stream length.
pub fn code_variance(codes: &[u16], adc: &AdcSpec) -> Result<f64> {
    if codes.len() < 2 {
        return Err(Error::InsufficientData {
            test: "sample variance",
            needed: 2,
            got: codes.len(),
        });
    }
    let (sum, sum_sq) = codes.iter().fold((0u128, 0u128), |(s, q), &c| {
        let c = c as u128;
        (s + c, q + c * c)
    });
    let n = codes.len() as u128;
    // N·Σc² − (Σc)² is exact; divide once at the end
    let scaled = n * sum_sq - sum * sum;
    let var_codes = scaled as f64 / (n as f64 * (n - 1) as f64);
    Ok(var_codes * adc.delta() * adc.delta())
}

/// Secure upper bound `σ_Q² = σ_M² − σ_E² − 2·q`, with `q` the quantization
/// variance charged once each for the `M` and `E` measurements.
pub fn sigma_q_squared(sigma_m_sq: f64, sigma_e_sq: f64, adc: &AdcSpec, form: QuantizationTerm) -> Result<f64> {
    let q = sigma_m_sq - sigma_e_sq - 2.0 * form.variance(adc);
    if !(q > 0.0) {
        return Err(Error::Calibration(format!(
            "no quantum variance left: σ_M² = {sigma_m_sq:e}, σ_E² = {sigma_e_sq:e} gives σ_Q² = {q:e}"
        )));
    }
    Ok(q)
}

/// The two guessing-probability candidates `(c1, c2)`.
pub fn guessing_candidates(noise: &NoiseStats, adc: &AdcSpec) -> Result<(f64, f64)> {
    if !(noise.sigma_q_sq > 0.0) {
        return Err(Error::Degenerate("σ_Q is zero; no quantum randomness".into()));
    }
    let sigma_q = noise.sigma_q_sq.sqrt();
    let delta = adc.delta();
    let arg1 = (noise.e_max() - adc.half_range + 1.5 * delta) / (std::f64::consts::SQRT_2 * sigma_q);
    // ½[erf(x) + 1] = ½ erfc(−x), without cancellation for very negative x
    let c1 = 0.5 * erfc(-arg1);
    let c2 = erf(delta / (2.0 * std::f64::consts::SQRT_2 * sigma_q));
    Ok((c1, c2))
}

/// `H_min = −log2 max(c1, c2)`, reported together with the safety flag.
/// Unsafe calibrations (c1 > c2) are reported, not rejected.
pub fn min_entropy(noise: &NoiseStats, adc: &AdcSpec) -> Result<EntropyReport> {
    let (c1, c2) = guessing_candidates(noise, adc)?;
    let guess = c1.max(c2);
    let h = if guess > 0.0 { -guess.log2() } else { f64::INFINITY };
    Ok(EntropyReport {
        sigma_m_sq: noise.sigma_m_sq,
        sigma_e_sq: noise.sigma_e_sq,
        sigma_q_sq: noise.sigma_q_sq,
        delta: adc.delta(),
        c1,
        c2,
        h_min_bits: h.clamp(0.0, adc.precision as f64),
        safe: c1 <= c2,
        epsilon_log2: None,
        extraction_ratio: None,
    })
}

/// `log2 ε` from the leftover hash lemma `j = k·H_min/n − 2·log2(1/ε)`.
pub fn security_parameter(j: usize, k: usize, h_min: f64, precision: u8) -> Result<f64> {
    let bound = k as f64 * h_min / precision as f64;
    if j as f64 > bound {
        return Err(Error::RatioTooAggressive { j, bound });
    }
    Ok(-(bound - j as f64) / 2.0)
}

/// Largest `j` for which a `j x k` extractor reaches `ε ≤ 2^epsilon_log2`.
pub fn max_output_length(k: usize, h_min: f64, precision: u8, epsilon_log2: f64) -> Result<usize> {
    if epsilon_log2 > 0.0 {
        return Err(Error::Config("ε must not exceed 1".into()));
    }
    let j = (k as f64 * h_min / precision as f64 + 2.0 * epsilon_log2).floor();
    if j < 1.0 {
        return Err(Error::RatioTooAggressive {
            j: 1,
            bound: k as f64 * h_min / precision as f64 + 2.0 * epsilon_log2,
        });
    }
    Ok(j as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_adc() -> AdcSpec {
        AdcSpec::new(12, 0.75, 1e9).unwrap()
    }

    fn reference_noise() -> NoiseStats {
        NoiseStats::new(3.16e-4, 3.13e-5, 2.8457e-4, DEFAULT_E_BOUND_FACTOR).unwrap()
    }

    #[test]
    fn delta_and_quantization_term() {
        let adc = reference_adc();
        assert_eq!(adc.delta(), 1.5 / 4096.0);
        let q = QuantizationTerm::Reference.variance(&adc);
        assert!((q - 9.3132e-10).abs() < 0.00005e-10, "{q:e}");
        let conventional = QuantizationTerm::Conventional.variance(&adc);
        assert!((conventional - 1.1176e-8).abs() < 0.0001e-8, "{conventional:e}");
    }

    #[test]
    fn variance_of_constant_and_two_point_data() {
        let adc = reference_adc();
        assert_eq!(code_variance(&[1000; 50], &adc).unwrap(), 0.0);
        let v = code_variance(&[2047, 2048], &adc).unwrap();
        assert!((v - adc.delta().powi(2) / 2.0).abs() < 1e-24);
        assert!(matches!(code_variance(&[], &adc), Err(Error::InsufficientData { .. })));
        assert!(matches!(code_variance(&[5], &adc), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn code_mapping_is_symmetric() {
        let adc = reference_adc();
        assert_eq!(adc.code_to_volts(0), -adc.code_to_volts(4095));
        assert_eq!(adc.code_to_volts(2048), adc.delta() / 2.0);
    }

    #[test]
    fn sigma_q_limits_and_errors() {
        let adc = AdcSpec::new(16, 1e-9, 1.0).unwrap();
        let q = sigma_q_squared(2e-4, 0.0, &adc, QuantizationTerm::Reference).unwrap();
        assert!((q - 2e-4).abs() < 1e-25);
        assert!(matches!(
            sigma_q_squared(1e-4, 1e-4, &reference_adc(), QuantizationTerm::Reference),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn reference_point_candidates() {
        let (c1, c2) = guessing_candidates(&reference_noise(), &reference_adc()).unwrap();
        assert!(c1 < 1e-100);
        assert!((c2 - 8.66e-3).abs() < 0.01e-3, "{c2}");
        // small-argument cross-check erf(x) ≈ 2x/√π
        let x = reference_adc().delta() / (2.0 * 2f64.sqrt() * 2.8457e-4f64.sqrt());
        assert!((x - 7.675e-3).abs() < 1e-6);
        assert!((c2 - 2.0 * x / std::f64::consts::PI.sqrt()).abs() / c2 < 1e-4);
    }

    #[test]
    fn candidate_limits() {
        let adc = reference_adc();
        let tiny = AdcSpec::new(16, 1e-6, 1.0).unwrap();
        let noise = reference_noise();
        assert!(guessing_candidates(&noise, &tiny).unwrap().1 < 1e-4);
        let wide = NoiseStats::new(1e12, 0.0, 1e12, 5.0).unwrap();
        let (c1, c2) = guessing_candidates(&wide, &adc).unwrap();
        assert!(c2 < 1e-9);
        assert!((c1 - 0.5).abs() < 1e-6);
        let zero = NoiseStats::new(1e-4, 1e-4, 0.0, 5.0).unwrap();
        assert!(matches!(guessing_candidates(&zero, &adc), Err(Error::Degenerate(_))));
    }

    #[test]
    fn inverse_construction_gives_eight_bits() {
        // choose σ_Q so that erf(δ/(2√2σ_Q)) = 2^-8
        let adc = reference_adc();
        let target = 2f64.powi(-8);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if erf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma_q = adc.delta() / (2.0 * 2f64.sqrt() * lo);
        let noise = NoiseStats::new(sigma_q * sigma_q, 0.0, sigma_q * sigma_q, 5.0).unwrap();
        let report = min_entropy(&noise, &adc).unwrap();
        assert!(report.safe);
        assert!((report.h_min_bits - 8.0).abs() < 1e-9);
    }

    #[test]
    fn reference_point_min_entropy() {
        let adc = reference_adc();
        let r = min_entropy(&reference_noise(), &adc).unwrap();
        assert!(r.safe);
        assert!((r.h_min_bits - 6.83).abs() <= 0.05, "{}", r.h_min_bits);
        assert!(r.extractable_ratio(12) >= 0.5692);
        assert_eq!(r.h_min_bits, -r.c2.log2());
    }

    #[test]
    fn monotone_in_delta_and_sigma_q() {
        let noise = NoiseStats::new(1e-3, 1e-6, 1e-3, 5.0).unwrap();
        let mut last = -1.0;
        for r in [0.5, 0.4, 0.3, 0.2, 0.15] {
            let h = min_entropy(&noise, &AdcSpec::new(12, r, 1.0).unwrap()).unwrap().h_min_bits;
            assert!(h > last, "R = {r}");
            last = h;
        }
        let adc = reference_adc();
        let mut last = -1.0;
        for q in [1e-5, 5e-5, 1e-4, 2e-4, 3e-4] {
            let noise = NoiseStats::new(q + 3.13e-5, 3.13e-5, q, 5.0).unwrap();
            let h = min_entropy(&noise, &adc).unwrap().h_min_bits;
            assert!(h > last, "σ_Q² = {q}");
            last = h;
        }
    }

    #[test]
    fn inflating_classical_noise_flips_safety() {
        let adc = reference_adc();
        let mut flipped = None;
        for i in 0..200 {
            let e = 3.13e-5 * 1.05f64.powi(i);
            let noise = NoiseStats::new(2.8457e-4 + e, e, 2.8457e-4, 5.0).unwrap();
            if !min_entropy(&noise, &adc).unwrap().safe {
                flipped = Some(e);
                break;
            }
        }
        let e = flipped.expect("safety flag never flipped");
        assert!(5.0 * e.sqrt() > 0.5, "flip at σ_E² = {e:e}");
    }

    #[test]
    fn security_parameter_values() {
        let eps = security_parameter(6144, 12288, 6.83, 12).unwrap();
        assert!((eps + 424.96).abs() < 1e-9);
        assert!((eps - 1.03e-128f64.log2()).abs() < 1.0);
        assert_eq!(security_parameter(5, 12, 12.0, 12).unwrap(), -3.5);
        assert_eq!(security_parameter(6, 12, 6.0, 12).unwrap(), 0.0);
        assert!(matches!(security_parameter(7, 12, 6.0, 12), Err(Error::RatioTooAggressive { .. })));
    }

    #[test]
    fn security_parameter_is_linear_in_k() {
        let pts: Vec<f64> = [384usize, 768, 1536, 3072, 6144, 12288]
            .iter()
            .map(|&k| security_parameter(k / 2, k, 6.83, 12).unwrap())
            .collect();
        let slope = (6.83 / 12.0 - 0.5) / 2.0;
        for (w, k) in pts.windows(2).zip([384usize, 768, 1536, 3072, 6144]) {
            assert!(w[1] < w[0]);
            assert!(((w[0] - w[1]) - slope * k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn max_output_length_values() {
        assert_eq!(max_output_length(12288, 6.83, 12, -256.0).unwrap(), 6481);
        for (k, target) in [(12288usize, -128.0), (3072, -40.0), (1000, -3.3)] {
            let j = max_output_length(k, 6.83, 12, target).unwrap();
            assert!(security_parameter(j, k, 6.83, 12).unwrap() <= target);
        }
    }

    #[test]
    fn report_json_field_names() {
        let mut r = min_entropy(&reference_noise(), &reference_adc()).unwrap();
        r.size_extractor(6144, 12288, 12).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "c1", "c2", "delta", "epsilon_log2", "extraction_ratio", "h_min_bits", "safe",
                "sigma_E_sq", "sigma_M_sq", "sigma_Q_sq"
            ]
        );
        assert_eq!(v["extraction_ratio"], 0.5);
    }
}
