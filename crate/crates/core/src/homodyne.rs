//! Synthetic homodyne output: Gaussian quantum plus classical noise, an
//! optional one-pole detector roll-off, and an n-bit ADC.
//!
//! Generation is chunked. Chunk `c` draws from its own RNG seeded with
//! [`chunk_seed`]`(rng_seed, c)`, so chunks can be produced on any number of
//! threads and still concatenate to the same stream. The low-pass filter is a
//! sequential recurrence and runs after the chunks are drawn.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::AdcSpec;
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"VRAW";
pub const RAW_HEADER_LEN: usize = 4 + 1 + 8 + 8;

/// Samples drawn per RNG chunk. Part of the stream definition: changing it
/// changes every generated stream.
pub const GEN_CHUNK: usize = 1 << 16;
const CHUNKS_PER_BATCH: usize = 64;

/// LO power where the variance-vs-power curve bends, in mW.
pub const DEFAULT_P_SAT_MW: f64 = 9.5;
/// Classical variance measured with the LO blocked, V².
pub const REFERENCE_SIGMA_E_SQ: f64 = 3.13e-5;
/// Total variance measured at 9.5 mW, V².
pub const REFERENCE_SIGMA_M_SQ: f64 = 3.16e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Classical-noise standard deviation, V.
    pub sigma_e: f64,
    /// Local-oscillator power, mW.
    pub lo_power_mw: f64,
    /// Variance gain below saturation, V²/mW.
    pub slope_linear: f64,
    /// Saturation power, mW.
    pub p_sat_mw: f64,
    /// Variance gain above saturation, V²/mW.
    pub slope_sat: f64,
    /// One-pole low-pass cutoff as a fraction of the sample rate.
    pub filter_cutoff: Option<f64>,
    pub rng_seed: u64,
}

impl Default for NoiseModel {
    /// The reference operating point: slopes fitted through (0 mW, σ_E²) and
    /// (9.5 mW, σ_M²), half the slope above saturation, LO at 9.5 mW.
    fn default() -> Self {
        let slope_linear = (REFERENCE_SIGMA_M_SQ - REFERENCE_SIGMA_E_SQ) / DEFAULT_P_SAT_MW;
        NoiseModel {
            sigma_e: REFERENCE_SIGMA_E_SQ.sqrt(),
            lo_power_mw: DEFAULT_P_SAT_MW,
            slope_linear,
            p_sat_mw: DEFAULT_P_SAT_MW,
            slope_sat: slope_linear / 2.0,
            filter_cutoff: None,
            rng_seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_e >= 0.0) || !(self.lo_power_mw >= 0.0) {
            return Err(Error::Config("σ_E and LO power must be non-negative".into()));
        }
        if !(self.p_sat_mw > 0.0) {
            return Err(Error::Config("saturation power must be positive".into()));
        }
        if !(self.slope_sat > 0.0 && self.slope_sat <= self.slope_linear) {
            return Err(Error::Config(format!(
                "need 0 < slope_sat ({}) ≤ slope_linear ({})",
                self.slope_sat, self.slope_linear
            )));
        }
        if let Some(fc) = self.filter_cutoff {
            if !(fc > 0.0) {
                return Err(Error::Config(format!("filter cutoff {fc} must be positive")));
            }
        }
        Ok(())
    }

    /// Lag-1 coefficient of the detector filter, `exp(−2π f_c)`.
    pub fn filter_pole(&self) -> Option<f64> {
        self.filter_cutoff
            .map(|fc| (-2.0 * std::f64::consts::PI * fc).exp())
    }
}

/// Total variance `σ_M²(P)`: linear up to `p_sat`, shallower beyond.
pub fn lo_power_to_variance(model: &NoiseModel) -> f64 {
    let p = model.lo_power_mw;
    model.sigma_e * model.sigma_e
        + model.slope_linear * p.min(model.p_sat_mw)
        + model.slope_sat * (p - model.p_sat_mw).max(0.0)
}

/// Quantized samples with their ADC description.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSampleStream {
    pub codes: Vec<u16>,
    pub adc: AdcSpec,
    /// Samples whose voltage fell outside the ADC range and were clamped.
    pub clip_count: u64,
}

impl RawSampleStream {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        RawHeader::from_adc(&self.adc, self.codes.len() as u64).write_to(&mut w)?;
        for chunk in self.codes.chunks(1 << 15) {
            let bytes: Vec<u8> = chunk.iter().flat_map(|c| c.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a raw file; the format does not carry the sample rate.
    pub fn read_from<R: Read>(mut r: R, sample_rate: f64) -> Result<Self> {
        let header = RawHeader::read_from(&mut r)?;
        let adc = AdcSpec::new(header.precision, header.half_range, sample_rate)?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() as u64 != 2 * header.count {
            return Err(Error::Format {
                what: "raw sample file",
                detail: format!("header announces {} samples, body holds {} bytes", header.count, body.len()),
            });
        }
        let max = adc.max_code();
        let mut codes = Vec::with_capacity(header.count as usize);
        let mut clip_count = 0;
        for pair in body.chunks_exact(2) {
            let code = u16::from_le_bytes([pair[0], pair[1]]) & max;
            clip_count += (code == 0 || code == max) as u64;
            codes.push(code);
        }
        // Clamping is not recorded in the file; rail hits are the best proxy.
        Ok(RawSampleStream {
            codes,
            adc,
            clip_count,
        })
    }
}

/// Header of a raw sample file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawHeader {
    pub precision: u8,
    pub half_range: f64,
    pub count: u64,
}

impl RawHeader {
    pub fn from_adc(adc: &AdcSpec, count: u64) -> Self {
        RawHeader {
            precision: adc.precision,
            half_range: adc.half_range,
            count,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(RAW_HEADER_LEN);
        buf.extend_from_slice(RAW_MAGIC);
        buf.push(self.precision);
        buf.extend_from_slice(&self.half_range.to_le_bytes());
        buf.extend_from_slice(&self.count.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; RAW_HEADER_LEN];
        r.read_exact(&mut buf).map_err(|e| Error::Format {
            what: "raw sample file",
            detail: format!("short header: {e}"),
        })?;
        if &buf[..4] != RAW_MAGIC {
            return Err(Error::Format {
                what: "raw sample file",
                detail: "missing VRAW magic".into(),
            });
        }
        Ok(RawHeader {
            precision: buf[4],
            half_range: f64::from_le_bytes(buf[5..13].try_into().unwrap()),
            count: u64::from_le_bytes(buf[13..21].try_into().unwrap()),
        })
    }
}

/// SplitMix64 finalizer applied to `rng_seed ^ (chunk + 1)·φ`, where φ is the
/// 64-bit golden-ratio constant.
pub fn chunk_seed(rng_seed: u64, chunk: u64) -> u64 {
    let mut z = rng_seed ^ chunk.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Produces a raw stream batch by batch so long runs need not fit in memory.
pub struct SampleGenerator {
    adc: AdcSpec,
    sigma_q: f64,
    sigma_e: f64,
    pole: Option<f64>,
    seed: u64,
    remaining: usize,
    next_chunk: u64,
    filter_state: Option<f64>,
    clip_count: u64,
}

impl SampleGenerator {
    pub fn new(model: &NoiseModel, adc: &AdcSpec, count: usize) -> Result<Self> {
        model.validate()?;
        let sigma_e_sq = model.sigma_e * model.sigma_e;
        let sigma_q_sq = (lo_power_to_variance(model) - sigma_e_sq).max(0.0);
        Ok(SampleGenerator {
            adc: *adc,
            sigma_q: sigma_q_sq.sqrt(),
            sigma_e: model.sigma_e,
            pole: model.filter_pole(),
            seed: model.rng_seed,
            remaining: count,
            next_chunk: 0,
            filter_state: None,
            clip_count: 0,
        })
    }

    pub fn clip_count(&self) -> u64 {
        self.clip_count
    }

    /// Up to `GEN_CHUNK · 64` codes; `None` once `count` samples were produced.
    pub fn next_batch(&mut self) -> Option<Vec<u16>> {
        if self.remaining == 0 {
            return None;
        }
        let n = self.remaining.min(GEN_CHUNK * CHUNKS_PER_BATCH);
        let first = self.next_chunk;
        let (sigma_q, sigma_e, seed) = (self.sigma_q, self.sigma_e, self.seed);
        let mut volts = vec![0f64; n];
        volts
            .par_chunks_mut(GEN_CHUNK)
            .enumerate()
            .for_each(|(i, out)| {
                let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(seed, first + i as u64));
                for v in out {
                    let q: f64 = StandardNormal.sample(&mut rng);
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = sigma_q * q + sigma_e * e;
                }
            });
        self.next_chunk += n.div_ceil(GEN_CHUNK) as u64;
        self.remaining -= n;

        if let Some(a) = self.pole {
            // unit-gain AR(1): keeps the variance, lag-1 correlation = a
            let gain = (1.0 - a * a).sqrt();
            let mut y = self.filter_state;
            for v in volts.iter_mut() {
                let next = match y {
                    None => *v,
                    Some(prev) => a * prev + gain * *v,
                };
                *v = next;
                y = Some(next);
            }
            self.filter_state = y;
        }

        let inv_delta = 1.0 / self.adc.delta();
        let mid = self.adc.mid_code();
        let max = self.adc.max_code() as f64;
        let mut clips = 0;
        let codes = volts
            .iter()
            .map(|&v| {
                // f64::round is half-away-from-zero
                let r = (v * inv_delta + mid).round();
                if r < 0.0 || r > max {
                    clips += 1;
                }
                r.clamp(0.0, max) as u16
            })
            .collect();
        self.clip_count += clips;
        Some(codes)
    }
}

/// Draws `count` samples of `M = Q + E` and quantizes them.
pub fn generate_raw(model: &NoiseModel, adc: &AdcSpec, count: usize) -> Result<RawSampleStream> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut generator = SampleGenerator::new(model, adc, count)?;
    let mut codes = Vec::with_capacity(count);
    while let Some(batch) = generator.next_batch() {
        codes.extend_from_slice(&batch);
    }
    Ok(RawSampleStream {
        codes,
        adc: *adc,
        clip_count: generator.clip_count(),
    })
}

/// Calibration stream: the same model with the LO blocked.
pub fn classical_only_stream(model: &NoiseModel, adc: &AdcSpec, count: usize) -> Result<RawSampleStream> {
    let blocked = NoiseModel {
        lo_power_mw: 0.0,
        ..model.clone()
    };
    generate_raw(&blocked, adc, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{code_variance, sample_variance};

    fn adc() -> AdcSpec {
        AdcSpec::new(12, 0.75, 1e9).unwrap()
    }

    #[test]
    fn variance_curve() {
        let m = NoiseModel::default();
        assert_eq!(lo_power_to_variance(&NoiseModel { lo_power_mw: 0.0, ..m.clone() }), m.sigma_e.powi(2));
        assert!((m.slope_linear - 2.997e-5).abs() < 0.001e-5);
        assert!((lo_power_to_variance(&m) - 3.16e-4).abs() < 1e-18);
        let at = |p| lo_power_to_variance(&NoiseModel { lo_power_mw: p, ..m.clone() });
        assert!(((at(12.5) - at(9.5)) - m.slope_sat * 3.0).abs() < 1e-18);
    }

    #[test]
    fn model_validation() {
        let m = NoiseModel::default();
        assert!(m.validate().is_ok());
        assert!(NoiseModel { slope_sat: m.slope_linear * 2.0, ..m.clone() }.validate().is_err());
        assert!(NoiseModel { sigma_e: -1.0, ..m.clone() }.validate().is_err());
        assert!(NoiseModel { filter_cutoff: Some(0.0), ..m }.validate().is_err());
    }

    #[test]
    fn silent_model_sits_on_mid_code() {
        let m = NoiseModel {
            sigma_e: 0.0,
            lo_power_mw: 0.0,
            ..NoiseModel::default()
        };
        let s = generate_raw(&m, &adc(), 1000).unwrap();
        assert!(s.codes.iter().all(|&c| c == 2048));
        assert_eq!(sample_variance(&s).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_and_chunk_stable() {
        let m = NoiseModel {
            rng_seed: 42,
            ..NoiseModel::default()
        };
        let n = GEN_CHUNK * 3 + 17;
        let a = generate_raw(&m, &adc(), n).unwrap();
        let b = generate_raw(&m, &adc(), n).unwrap();
        assert_eq!(a, b);
        // a shorter run is a prefix of a longer one
        let short = generate_raw(&m, &adc(), GEN_CHUNK + 5).unwrap();
        assert_eq!(&a.codes[..GEN_CHUNK + 5], &short.codes[..]);
        // worker count does not matter
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| generate_raw(&m, &adc(), n).unwrap());
        assert_eq!(a, c);
        let other = generate_raw(&NoiseModel { rng_seed: 43, ..m }, &adc(), n).unwrap();
        assert_ne!(a.codes, other.codes);
    }

    #[test]
    fn single_sample_has_no_variance() {
        let s = classical_only_stream(&NoiseModel::default(), &adc(), 1).unwrap();
        assert_eq!(s.len(), 1);
        assert!(sample_variance(&s).is_err());
    }

    #[test]
    fn classical_stream_matches_generate_at_zero_power() {
        let m = NoiseModel::default();
        let a = classical_only_stream(&m, &adc(), 5000).unwrap();
        let b = generate_raw(&NoiseModel { lo_power_mw: 0.0, ..m }, &adc(), 5000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moderate_sample_statistics() {
        let m = NoiseModel {
            rng_seed: 7,
            ..NoiseModel::default()
        };
        let s = generate_raw(&m, &adc(), 1_000_000).unwrap();
        let v = code_variance(&s.codes, &s.adc).unwrap();
        // sd of the estimate is √(2/N) ≈ 0.14 %
        assert!((v / 3.16e-4 - 1.0).abs() < 0.01, "{v:e}");
        assert_eq!(s.clip_count, 0);
    }

    #[test]
    fn clipping_matches_gaussian_tail() {
        let m = NoiseModel {
            rng_seed: 9,
            ..NoiseModel::default()
        };
        let sigma_m = lo_power_to_variance(&m).sqrt();
        let narrow = AdcSpec::new(12, 2.0 * sigma_m, 1e9).unwrap();
        let n = 1_000_000;
        let s = generate_raw(&m, &narrow, n).unwrap();
        let p = crate::special::erfc(2.0 / std::f64::consts::SQRT_2);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let frac = s.clip_count as f64 / n as f64;
        assert!((frac - p).abs() < 3.0 * se, "clip fraction {frac} vs {p}");
    }

    #[test]
    fn raw_file_layout() {
        let s = generate_raw(&NoiseModel::default(), &adc(), 10).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), RAW_HEADER_LEN + 20);
        assert_eq!(&buf[..4], b"VRAW");
        assert_eq!(buf[4], 12);
        assert_eq!(&buf[5..13], &0.75f64.to_le_bytes());
        assert_eq!(&buf[13..21], &10u64.to_le_bytes());
        assert_eq!(&buf[21..23], &s.codes[0].to_le_bytes());
        let back = RawSampleStream::read_from(&buf[..], 1e9).unwrap();
        assert_eq!(back.codes, s.codes);
        assert!(RawSampleStream::read_from(&buf[..buf.len() - 1], 1e9).is_err());
    }
}
