//! Randomness validation: autocorrelation, three frequency/oscillation tests
//! from the standard battery, and Kolmogorov–Smirnov aggregation of per
//! subsequence p-values.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::BitBlock;
use crate::error::{Error, Result};
use crate::special::{erfc, gamma_q, kolmogorov_survival};

/// Inclusive pass band for final p-values.
pub const PASS_BAND: (f64, f64) = (0.01, 0.99);
pub const MIN_KS_VALUES: usize = 10;
pub const MIN_MONOBIT_BITS: usize = 100;
pub const MIN_RUNS_BITS: usize = 100;

pub fn in_band(p: f64) -> bool {
    (PASS_BAND.0..=PASS_BAND.1).contains(&p)
}

/// Normalized sample autocorrelation
/// `r_ℓ = Σ (x_t − x̄)(x_{t+ℓ} − x̄) / Σ (x_t − x̄)²` for `ℓ = 1..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    check_lags(series.len(), max_lag)?;
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let denom: f64 = centered.iter().map(|x| x * x).sum();
    if denom == 0.0 {
        return Err(Error::Degenerate("autocorrelation of a constant series".into()));
    }
    Ok((1..=max_lag)
        .map(|lag| {
            centered
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect())
}

/// Same quantity as [`autocorrelation`] for a 0/1 sequence, computed with
/// word-wide AND and popcount.
pub fn bit_autocorrelation(bits: &BitBlock, max_lag: usize) -> Result<Vec<f64>> {
    let n = bits.len();
    check_lags(n, max_lag)?;
    let ones = bits.count_ones() as f64;
    let nf = n as f64;
    let mean = ones / nf;
    let denom = ones - nf * mean * mean;
    if denom <= 0.0 {
        return Err(Error::Degenerate("autocorrelation of a constant series".into()));
    }
    let words = bits.words();
    let ones_in = |start: usize, len: usize| bits.slice(start, len).count_ones() as f64;
    let lags: Vec<usize> = (1..=max_lag).collect();
    Ok(lags
        .par_iter()
        .map(|&lag| {
            let span = n - lag;
            let full = span / 64;
            let mut s: u64 = 0;
            for (q, &w) in words[..full].iter().enumerate() {
                s += (w & bits.read_word_at(64 * q + lag)).count_ones() as u64;
            }
            let rest = span % 64;
            if rest > 0 {
                let w = words[full] & bits.read_word_at(64 * full + lag);
                s += (w & crate::bits::low_mask(rest)).count_ones() as u64;
            }
            let head = ones - ones_in(n - lag, lag);
            let tail = ones - ones_in(0, lag);
            let num = s as f64 - mean * (head + tail) + span as f64 * mean * mean;
            num / denom
        })
        .collect())
}

fn check_lags(len: usize, max_lag: usize) -> Result<()> {
    if max_lag == 0 {
        return Err(Error::contract("max_lag must be at least 1"));
    }
    if len <= max_lag {
        return Err(Error::InsufficientData {
            test: "autocorrelation",
            needed: max_lag + 1,
            got: len,
        });
    }
    Ok(())
}

/// Frequency (monobit) test.
pub fn monobit_test(bits: &BitBlock) -> Result<f64> {
    let n = bits.len();
    if n < MIN_MONOBIT_BITS {
        return Err(Error::InsufficientData {
            test: "monobit",
            needed: MIN_MONOBIT_BITS,
            got: n,
        });
    }
    let s = 2.0 * bits.count_ones() as f64 - n as f64;
    let s_obs = s.abs() / (n as f64).sqrt();
    Ok(erfc(s_obs / std::f64::consts::SQRT_2))
}

/// Frequency test within blocks of `block_len` bits.
pub fn block_frequency_test(bits: &BitBlock, block_len: usize) -> Result<f64> {
    if block_len == 0 {
        return Err(Error::contract("block length must be positive"));
    }
    let needed = 20 * block_len;
    if bits.len() < needed {
        return Err(Error::InsufficientData {
            test: "block frequency",
            needed,
            got: bits.len(),
        });
    }
    let blocks = bits.len() / block_len;
    let chi_sq: f64 = (0..blocks)
        .map(|b| {
            let pi = bits.slice(b * block_len, block_len).count_ones() as f64 / block_len as f64;
            (pi - 0.5) * (pi - 0.5)
        })
        .sum::<f64>()
        * 4.0
        * block_len as f64;
    Ok(gamma_q(blocks as f64 / 2.0, chi_sq / 2.0))
}

/// Runs test. Returns 0 when the frequency prerequisite `|π − ½| < 2/√n`
/// already fails.
pub fn runs_test(bits: &BitBlock) -> Result<f64> {
    let n = bits.len();
    if n < MIN_RUNS_BITS {
        return Err(Error::InsufficientData {
            test: "runs",
            needed: MIN_RUNS_BITS,
            got: n,
        });
    }
    let nf = n as f64;
    let pi = bits.count_ones() as f64 / nf;
    if (pi - 0.5).abs() >= 2.0 / nf.sqrt() {
        return Ok(0.0);
    }
    let words = bits.words();
    let mut changes: u64 = 0;
    let span = n - 1;
    for q in 0..span.div_ceil(64) {
        let mut x = words[q] ^ bits.read_word_at(64 * q + 1);
        if 64 * (q + 1) > span {
            x &= crate::bits::low_mask(span - 64 * q);
        }
        changes += x.count_ones() as u64;
    }
    let v = (changes + 1) as f64;
    let spread = 2.0 * nf * pi * (1.0 - pi);
    Ok(erfc((v - spread).abs() / (2.0 * (2.0 * nf).sqrt() * pi * (1.0 - pi))))
}

/// One-sample KS statistic of `p_values` against Uniform(0, 1).
pub fn ks_statistic(p_values: &[f64]) -> f64 {
    let mut sorted = p_values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| ((i + 1) as f64 / n - p).max(p - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Final p-value for a set of p-values: `Q_KS(√n · D)`.
pub fn ks_combine(p_values: &[f64]) -> Result<f64> {
    if p_values.len() < MIN_KS_VALUES {
        return Err(Error::InsufficientData {
            test: "KS aggregation",
            needed: MIN_KS_VALUES,
            got: p_values.len(),
        });
    }
    if let Some(bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract(format!("p-value {bad} outside [0, 1]")));
    }
    let d = ks_statistic(p_values);
    Ok(kolmogorov_survival((p_values.len() as f64).sqrt() * d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub subsequence_len: usize,
    pub subsequence_count: usize,
    pub block_len: usize,
    pub max_lag: usize,
}

impl Default for SuiteOptions {
    /// 1000 subsequences of one megabit.
    fn default() -> Self {
        SuiteOptions {
            subsequence_len: 1_000_000,
            subsequence_count: 1000,
            block_len: 128,
            max_lag: 100,
        }
    }
}

impl SuiteOptions {
    pub fn required_bits(&self) -> usize {
        self.subsequence_len * self.subsequence_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// p-value of each subsequence, per test.
    pub per_test: BTreeMap<String, Vec<f64>>,
    /// KS-combined p-value per test; empty when there are too few
    /// subsequences to aggregate.
    pub combined: BTreeMap<String, f64>,
    /// `(lag, r_lag)` over the whole input.
    pub autocorrelation: Vec<(usize, f64)>,
    pub verdict: bool,
}

impl TestReport {
    pub fn max_abs_autocorrelation(&self) -> f64 {
        self.autocorrelation.iter().map(|(_, r)| r.abs()).fold(0.0, f64::max)
    }
}

type BitTest = fn(&BitBlock, &SuiteOptions) -> Result<f64>;

const TESTS: [(&str, BitTest); 3] = [
    ("monobit", |b, _| monobit_test(b)),
    ("block_frequency", |b, o| block_frequency_test(b, o.block_len)),
    ("runs", |b, _| runs_test(b)),
];

/// Splits `bits` into subsequences, runs every test on each, aggregates, and
/// applies the pass band.
pub fn run_suite(bits: &BitBlock, opts: &SuiteOptions) -> Result<TestReport> {
    if opts.subsequence_count == 0 || opts.subsequence_len == 0 {
        return Err(Error::Config("subsequence geometry must be positive".into()));
    }
    let needed = opts.required_bits();
    if bits.len() < needed {
        return Err(Error::InsufficientData {
            test: "test suite",
            needed,
            got: bits.len(),
        });
    }
    let subsequences: Vec<BitBlock> = (0..opts.subsequence_count)
        .map(|i| bits.slice(i * opts.subsequence_len, opts.subsequence_len))
        .collect();

    let mut per_test = BTreeMap::new();
    for (name, test) in TESTS {
        let ps: Vec<f64> = subsequences
            .par_iter()
            .map(|s| test(s, opts))
            .collect::<Result<_>>()?;
        per_test.insert(name.to_string(), ps);
    }

    let mut combined = BTreeMap::new();
    let verdict = if opts.subsequence_count >= MIN_KS_VALUES {
        for (name, ps) in &per_test {
            combined.insert(name.clone(), ks_combine(ps)?);
        }
        combined.values().all(|&p| in_band(p))
    } else {
        per_test.values().flatten().all(|&p| in_band(p))
    };

    let autocorrelation = bit_autocorrelation(bits, opts.max_lag)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| (i + 1, r))
        .collect();
    Ok(TestReport {
        per_test,
        combined,
        autocorrelation,
        verdict,
    })
}

/// Writes the bits as packed LSB-first bytes for external test batteries.
pub fn export_packed<W: Write>(bits: &BitBlock, mut w: W) -> Result<()> {
    w.write_all(&bits.to_bytes_lsb())?;
    w.flush()?;
    Ok(())
}
