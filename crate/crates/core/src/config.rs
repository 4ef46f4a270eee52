//! Pipeline configuration.
//!
//! The file format is one `key = value` pair per line. Blank lines and text
//! after `#` are ignored, and keys may appear in any order. Every key is
//! optional; missing keys keep their defaults, which describe the reference
//! operating point:
//!
//! ```text
//! # ADC
//! precision = 12              # bits per sample, n
//! half_range = 0.75           # volts, R
//! sample_rate = 1000000000    # samples/s, S
//! # noise model
//! sigma_e = 0.005594640292279746
//! lo_power_mw = 9.5
//! slope_linear = 2.9968421052631578e-5   # V²/mW
//! p_sat_mw = 9.5
//! slope_sat = 1.4984210526315789e-5      # V²/mW above p_sat_mw
//! filter_cutoff = none        # cycles/sample, or none
//! samples = 16777216
//! calibration_samples = 1000000
//! rng_seed = 1
//! # extractor
//! j = 6144
//! k = 12288
//! group = 12                  # G
//! calc_rate = 125000000       # C, used when block_count = auto
//! block_count = auto
//! workers = auto              # machine parallelism
//! toeplitz_seed = 7
//! # entropy model
//! e_bound_factor = 5
//! quantization_term = reference  # (δ/12)², or conventional δ²/12
//! epsilon_log2 = none         # target for the recommended maximum j
//! # tests
//! subsequence_len = 1000000
//! subsequence_count = 100
//! block_len = 128
//! max_lag = 100
//! # output
//! out_dir = vqrng-out
//! unsafe_ratio_override = false
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::entropy::{AdcSpec, QuantizationTerm, DEFAULT_E_BOUND_FACTOR};
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::homodyne::NoiseModel;
use crate::stats::SuiteOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub precision: u8,
    pub half_range: f64,
    pub sample_rate: u64,
    pub noise: NoiseModel,
    pub samples: usize,
    pub calibration_samples: usize,
    pub j: usize,
    pub k: usize,
    pub group: usize,
    pub calc_rate: u64,
    /// `None` derives the count from the sample and calculation rates.
    pub block_count: Option<usize>,
    /// `None` uses the machine's parallelism.
    pub workers: Option<usize>,
    pub toeplitz_seed: u64,
    pub e_bound_factor: f64,
    pub quantization_term: QuantizationTerm,
    pub epsilon_log2: Option<f64>,
    pub suite: SuiteOptions,
    pub out_dir: PathBuf,
    pub unsafe_ratio_override: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            precision: 12,
            half_range: 0.75,
            sample_rate: 1_000_000_000,
            noise: NoiseModel {
                rng_seed: 1,
                ..NoiseModel::default()
            },
            // 2^24 samples fill exactly 16384 chunks of 12288 bits
            samples: 1 << 24,
            calibration_samples: 1_000_000,
            j: 6144,
            k: 12288,
            group: 12,
            calc_rate: 125_000_000,
            block_count: None,
            workers: None,
            toeplitz_seed: 7,
            e_bound_factor: DEFAULT_E_BOUND_FACTOR,
            quantization_term: QuantizationTerm::Reference,
            epsilon_log2: None,
            suite: SuiteOptions {
                subsequence_count: 100,
                ..SuiteOptions::default()
            },
            out_dir: PathBuf::from("vqrng-out"),
            unsafe_ratio_override: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case(none) {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_to_string<T: fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

impl PipelineConfig {
    /// Parses a config file body on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "precision" => self.precision = parse(key, v)?,
            "half_range" => self.half_range = parse(key, v)?,
            "sample_rate" => self.sample_rate = parse(key, v)?,
            "sigma_e" => self.noise.sigma_e = parse(key, v)?,
            "lo_power_mw" => self.noise.lo_power_mw = parse(key, v)?,
            "slope_linear" => self.noise.slope_linear = parse(key, v)?,
            "p_sat_mw" => self.noise.p_sat_mw = parse(key, v)?,
            "slope_sat" => self.noise.slope_sat = parse(key, v)?,
            "filter_cutoff" => self.noise.filter_cutoff = parse_opt(key, v, "none")?,
            "rng_seed" => self.noise.rng_seed = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "calibration_samples" => self.calibration_samples = parse(key, v)?,
            "j" => self.j = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "group" => self.group = parse(key, v)?,
            "calc_rate" => self.calc_rate = parse(key, v)?,
            "block_count" => self.block_count = parse_opt(key, v, "auto")?,
            "workers" => self.workers = parse_opt(key, v, "auto")?,
            "toeplitz_seed" => self.toeplitz_seed = parse(key, v)?,
            "e_bound_factor" => self.e_bound_factor = parse(key, v)?,
            "quantization_term" => {
                self.quantization_term = match v.to_ascii_lowercase().as_str() {
                    "reference" => QuantizationTerm::Reference,
                    "conventional" => QuantizationTerm::Conventional,
                    _ => return Err(Error::Config(format!("quantization_term must be reference or conventional, got `{v}`"))),
                }
            }
            "epsilon_log2" => self.epsilon_log2 = parse_opt(key, v, "none")?,
            "subsequence_len" => self.suite.subsequence_len = parse(key, v)?,
            "subsequence_count" => self.suite.subsequence_count = parse(key, v)?,
            "block_len" => self.suite.block_len = parse(key, v)?,
            "max_lag" => self.suite.max_lag = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "unsafe_ratio_override" => self.unsafe_ratio_override = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn adc(&self) -> Result<AdcSpec> {
        AdcSpec::new(self.precision, self.half_range, self.sample_rate as f64)
    }

    pub fn extractor(&self) -> Result<ExtractorConfig> {
        match self.block_count {
            Some(b) => ExtractorConfig::new(self.j, self.k, self.group, b),
            None => ExtractorConfig::from_rates(
                self.j,
                self.k,
                self.group,
                self.sample_rate,
                self.precision as u32,
                self.calc_rate,
            ),
        }
    }

    pub fn worker_count(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.adc()?;
        self.noise.validate()?;
        self.extractor()?;
        if self.samples == 0 || self.calibration_samples < 2 {
            return Err(Error::Config("need samples ≥ 1 and calibration_samples ≥ 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for PipelineConfig {
    /// Writes every key, so the output reloads to an identical config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = &self.noise;
        let q = match self.quantization_term {
            QuantizationTerm::Reference => "reference",
            QuantizationTerm::Conventional => "conventional",
        };
        let rows: [(&str, String); 31] = [
            ("precision", self.precision.to_string()),
            ("half_range", self.half_range.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("sigma_e", n.sigma_e.to_string()),
            ("lo_power_mw", n.lo_power_mw.to_string()),
            ("slope_linear", n.slope_linear.to_string()),
            ("p_sat_mw", n.p_sat_mw.to_string()),
            ("slope_sat", n.slope_sat.to_string()),
            ("filter_cutoff", opt_to_string(&n.filter_cutoff, "none")),
            ("rng_seed", n.rng_seed.to_string()),
            ("samples", self.samples.to_string()),
            ("calibration_samples", self.calibration_samples.to_string()),
            ("j", self.j.to_string()),
            ("k", self.k.to_string()),
            ("group", self.group.to_string()),
            ("calc_rate", self.calc_rate.to_string()),
            ("block_count", opt_to_string(&self.block_count, "auto")),
            ("workers", opt_to_string(&self.workers, "auto")),
            ("toeplitz_seed", self.toeplitz_seed.to_string()),
            ("e_bound_factor", self.e_bound_factor.to_string()),
            ("quantization_term", q.to_string()),
            ("epsilon_log2", opt_to_string(&self.epsilon_log2, "none")),
            ("subsequence_len", self.suite.subsequence_len.to_string()),
            ("subsequence_count", self.suite.subsequence_count.to_string()),
            ("block_len", self.suite.block_len.to_string()),
            ("max_lag", self.suite.max_lag.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("unsafe_ratio_override", self.unsafe_ratio_override.to_string()),
            // informational only, never read back
            ("# block_count_resolved", self.extractor().map_or("invalid".into(), |c| c.block_count.to_string())),
            ("# workers_resolved", self.worker_count().to_string()),
            ("# extraction_ratio", (self.j as f64 / self.k as f64).to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_point() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let ex = c.extractor().unwrap();
        assert_eq!((ex.j, ex.k, ex.group, ex.block_count), (6144, 12288, 12, 8));
        let m = &c.noise;
        let total = m.sigma_e * m.sigma_e + m.slope_linear * m.lo_power_mw;
        assert!((total - 3.16e-4).abs() < 1e-15);
        // whole chunks, and at least 10^8 output bits
        assert_eq!(c.samples * 12 % c.k, 0);
        assert!(c.samples * 12 / 2 >= 100_000_000);
    }

    #[test]
    fn roundtrip_through_text() {
        let mut c = PipelineConfig::default();
        c.noise.filter_cutoff = Some(0.1);
        c.block_count = Some(4);
        c.quantization_term = QuantizationTerm::Conventional;
        c.epsilon_log2 = Some(-256.0);
        let back = PipelineConfig::from_kv(&c.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = PipelineConfig::from_kv("\n# tiny\n j = 64 # out\nk=128\n\nsamples = 100000\n").unwrap();
        assert_eq!((c.j, c.k, c.samples), (64, 128, 100_000));
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in ["j 64", "nope = 1", "j = x", "quantization_term = exact", "block_count = -1"] {
            assert!(matches!(PipelineConfig::from_kv(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn explicit_block_count_overrides_rates() {
        let c = PipelineConfig::from_kv("calc_rate = 300000000").unwrap();
        assert!(c.extractor().is_err());
        let c = PipelineConfig::from_kv("calc_rate = 300000000\nblock_count = 8").unwrap();
        assert_eq!(c.extractor().unwrap().block_count, 8);
    }
}
