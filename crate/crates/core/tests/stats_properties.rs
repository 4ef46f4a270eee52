//! Statistical properties of the test suite on its own pseudo-uniform input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqrng::bits::BitBlock;
use vqrng::stats::{in_band, run_suite, SuiteOptions, TestReport};

fn uniform_bits(seed: u64, n: usize) -> BitBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BitBlock::from_words((0..n.div_ceil(64)).map(|_| rng.random()).collect(), n)
}

fn reports(seeds: u64, opts: &SuiteOptions) -> Vec<TestReport> {
    (0..seeds)
        .map(|s| run_suite(&uniform_bits(0x5E1F_0000 + s, opts.required_bits()), opts).unwrap())
        .collect()
}

/// Under the null each KS-combined p-value lands in [0.01, 0.99] with
/// probability 0.98, so three tests pass together about 94.1% of the time.
/// Rates are checked against those values with a 4-sigma binomial margin.
#[test]
fn self_consistency_rate() {
    let opts = SuiteOptions {
        subsequence_len: 20_000,
        subsequence_count: 100,
        block_len: 128,
        max_lag: 10,
    };
    let seeds = 1000u64;
    let all = reports(seeds, &opts);
    let n = seeds as f64;
    let margin = |p: f64| 4.0 * (p * (1.0 - p) / n).sqrt();

    for name in ["monobit", "block_frequency", "runs"] {
        let inside = all.iter().filter(|r| in_band(r.combined[name])).count() as f64 / n;
        println!("{name}: combined p-value in band for {:.1}% of seeds", inside * 100.0);
        assert!((inside - 0.98).abs() <= margin(0.98), "{name}: {inside}");
    }

    let verdicts = all.iter().filter(|r| r.verdict).count() as f64 / n;
    let null = 0.98f64.powi(3);
    println!(
        "verdict true for {:.1}% of {seeds} seeds (null expectation {:.1}%, 95% target {})",
        verdicts * 100.0,
        null * 100.0,
        if verdicts >= 0.95 { "met" } else { "not met" }
    );
    assert!((verdicts - null).abs() <= margin(null), "{verdicts}");
}

#[test]
fn combined_p_values_are_uniform_under_the_null() {
    // the KS p-values themselves should look uniform across seeds
    let opts = SuiteOptions {
        subsequence_len: 10_000,
        subsequence_count: 50,
        block_len: 100,
        max_lag: 5,
    };
    let all = reports(200, &opts);
    for name in ["monobit", "block_frequency", "runs"] {
        let ps: Vec<f64> = all.iter().map(|r| r.combined[name]).collect();
        let p = vqrng::stats::ks_combine(&ps).unwrap();
        assert!(p > 1e-4, "{name}: second-level p = {p}");
    }
}

#[test]
fn correlated_input_fails() {
    // heavily smoothed bits: every bit repeated four times
    let base = uniform_bits(99, 250_000);
    let bits: BitBlock = base.iter().flat_map(|b| std::iter::repeat_n(b, 4)).collect();
    let opts = SuiteOptions {
        subsequence_len: 10_000,
        subsequence_count: 100,
        block_len: 128,
        max_lag: 10,
    };
    let r = run_suite(&bits, &opts).unwrap();
    assert!(!r.verdict);
    assert!(!in_band(r.combined["runs"]));
    assert!(r.max_abs_autocorrelation() > 0.5);
}
