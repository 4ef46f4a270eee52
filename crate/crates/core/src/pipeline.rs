//! Stage functions behind the command-line interface. Each stage reads and
//! writes files so it can run alone; `cmd_pipeline` chains them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::bits::{BitBlock, SampleBits};
use crate::config::PipelineConfig;
use crate::entropy::{max_output_length, min_entropy, sample_variance, EntropyReport, NoiseStats, QuantizationTerm};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, StreamExtractor};
use crate::homodyne::{generate_raw, lo_power_to_variance, NoiseModel, RawHeader, RawSampleStream};
use crate::stats::{run_suite, SuiteOptions, TestReport};
use crate::toeplitz::{generate_seed, ToeplitzSeed};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_UNSAFE: u8 = 3;
pub const EXIT_VERDICT: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Calibration(_) | Error::Degenerate(_) | Error::RatioTooAggressive { .. } => EXIT_UNSAFE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Contract(_)
        | Error::Config(_)
        | Error::InsufficientEntropy { .. }
        | Error::InsufficientData { .. } => EXIT_CONFIG,
    }
}

/// XOR-ed into `rng_seed` for the LO-blocked calibration run.
const CALIBRATION_SEED_MIX: u64 = 0xC0FF_EE00_CA1B_0000;

pub fn calibration_model(model: &NoiseModel) -> NoiseModel {
    NoiseModel {
        rng_seed: model.rng_seed ^ CALIBRATION_SEED_MIX,
        ..model.clone()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub lo_power_mw: f64,
    pub rng_seed: u64,
    pub clip_count: u64,
    pub variance: f64,
    pub model_variance: f64,
}

/// Generates a raw sample file.
pub fn cmd_simulate(cfg: &PipelineConfig, model: &NoiseModel, samples: usize, path: &Path) -> Result<SimulateSummary> {
    let adc = cfg.adc()?;
    let raw = generate_raw(model, &adc, samples)?;
    raw.write_to(create(path)?)?;
    Ok(SimulateSummary {
        path: path.to_path_buf(),
        samples,
        lo_power_mw: model.lo_power_mw,
        rng_seed: model.rng_seed,
        clip_count: raw.clip_count,
        variance: if samples >= 2 { sample_variance(&raw)? } else { f64::NAN },
        model_variance: lo_power_to_variance(model),
    })
}

/// The LO-blocked counterpart of [`cmd_simulate`].
pub fn cmd_simulate_classical(cfg: &PipelineConfig, samples: usize, path: &Path) -> Result<SimulateSummary> {
    let model = NoiseModel {
        lo_power_mw: 0.0,
        ..calibration_model(&cfg.noise)
    };
    cmd_simulate(cfg, &model, samples, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyOptions {
    pub e_bound_factor: f64,
    pub quantization_term: QuantizationTerm,
    /// Extractor to size, if any.
    pub shape: Option<(usize, usize)>,
    pub epsilon_log2: Option<f64>,
}

impl EntropyOptions {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        EntropyOptions {
            e_bound_factor: cfg.e_bound_factor,
            quantization_term: cfg.quantization_term,
            shape: Some((cfg.j, cfg.k)),
            epsilon_log2: cfg.epsilon_log2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyOutput {
    #[serde(flatten)]
    pub report: EntropyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_target_log2: Option<f64>,
    /// Largest `j` meeting the ε target at the configured `k`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recommended_max_j: Option<usize>,
}

/// Calibrates from a measured and an LO-blocked raw file. An unsafe
/// calibration (`c1 > c2`) is returned, not rejected; callers check
/// `report.safe`. A `j` above `k·h_min/n` is left unsized.
pub fn cmd_entropy(raw: &Path, classical: &Path, sample_rate: f64, opts: &EntropyOptions) -> Result<EntropyOutput> {
    let m = RawSampleStream::read_from(open(raw)?, sample_rate)?;
    let e = RawSampleStream::read_from(open(classical)?, sample_rate)?;
    if m.adc != e.adc {
        return Err(Error::Calibration("the two raw files use different ADC settings".into()));
    }
    let noise = NoiseStats::calibrate(
        sample_variance(&m)?,
        sample_variance(&e)?,
        &m.adc,
        opts.quantization_term,
        opts.e_bound_factor,
    )?;
    let mut report = min_entropy(&noise, &m.adc)?;
    let mut recommended_max_j = None;
    if let Some((j, k)) = opts.shape {
        match report.size_extractor(j, k, m.adc.precision) {
            Ok(_) | Err(Error::RatioTooAggressive { .. }) => {}
            Err(other) => return Err(other),
        }
        if let Some(eps) = opts.epsilon_log2 {
            recommended_max_j = max_output_length(k, report.h_min_bits, m.adc.precision, eps).ok();
        }
    }
    Ok(EntropyOutput {
        report,
        epsilon_target_log2: opts.epsilon_log2,
        recommended_max_j,
    })
}

/// Refuses `j/k ≥ h_min/n` unless overridden.
pub fn ratio_gate(j: usize, k: usize, h_min: f64, precision: u8, override_unsafe: bool) -> Result<()> {
    let bound = k as f64 * h_min / precision as f64;
    if (j as f64) < bound || override_unsafe {
        Ok(())
    } else {
        Err(Error::RatioTooAggressive { j, bound })
    }
}

/// Seed with `j + k − 1` bits drawn from ChaCha20 keyed by `seed`.
pub fn seedgen(j: usize, k: usize, seed: u64) -> Result<ToeplitzSeed> {
    let mut bytes = vec![0u8; ToeplitzSeed::packed_len(j, k)];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    generate_seed(j, k, &bytes[..])
}

pub fn cmd_seedgen(j: usize, k: usize, seed: u64, path: &Path) -> Result<ToeplitzSeed> {
    let s = seedgen(j, k, seed)?;
    s.write_to(create(path)?)?;
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub config: ExtractorConfig,
    pub workers: usize,
    /// Needed for the ratio check unless it is overridden.
    pub h_min: Option<f64>,
    pub unsafe_ratio_override: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub seconds: f64,
    pub input_bps: Option<f64>,
    pub output_bps: Option<f64>,
    pub block_utilization: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractReport {
    pub j: usize,
    pub k: usize,
    pub group: usize,
    pub block_count: usize,
    pub input_bits: u64,
    pub output_bits: u64,
    pub chunks: u64,
    pub discarded_bits: u64,
    pub extraction_ratio: f64,
    pub h_min_bits: Option<f64>,
    pub unsafe_ratio_override: bool,
    /// Timing varies run to run, so reproducible artifacts leave it out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<Throughput>,
}

/// Extracts a raw sample file through a stored seed.
pub fn cmd_extract(raw: &Path, seed: &Path, out: &Path, opts: &ExtractOptions) -> Result<ExtractReport> {
    let cfg = &opts.config;
    let seed = ToeplitzSeed::read_from(open(seed)?)?;
    if (seed.j(), seed.k()) != (cfg.j, cfg.k) {
        return Err(Error::Config(format!(
            "seed file is {}x{}, extractor expects j = {}, k = {}",
            seed.j(),
            seed.k(),
            cfg.j,
            cfg.k
        )));
    }
    let mut reader = open(raw)?;
    let header = RawHeader::read_from(&mut reader)?;
    match opts.h_min {
        Some(h) => ratio_gate(cfg.j, cfg.k, h, header.precision, opts.unsafe_ratio_override)?,
        None if !opts.unsafe_ratio_override => {
            return Err(Error::Config(
                "the ratio check needs a min-entropy estimate; pass one or override the check".into(),
            ))
        }
        None => {}
    }
    let mut source = SampleBits::new(reader.take(2 * header.count), header.precision);
    let ex = StreamExtractor::new(&seed, cfg, opts.workers)?;
    let (_, stats) = ex.extract_stream(&mut source, create(out)?)?;
    let seconds = stats.elapsed.as_secs_f64();
    let used = stats.input_bits - stats.discarded_bits;
    let rate = |bits: u64| (bits > 0 && seconds > 0.0).then(|| bits as f64 / seconds);
    Ok(ExtractReport {
        j: cfg.j,
        k: cfg.k,
        group: cfg.group,
        block_count: cfg.block_count,
        input_bits: stats.input_bits,
        output_bits: stats.output_bits,
        chunks: stats.chunks,
        discarded_bits: stats.discarded_bits,
        extraction_ratio: cfg.j as f64 / cfg.k as f64,
        h_min_bits: opts.h_min,
        unsafe_ratio_override: opts.unsafe_ratio_override,
        throughput: Some(Throughput {
            seconds,
            input_bps: rate(used),
            output_bps: rate(stats.output_bits),
            block_utilization: stats
                .blocks
                .iter()
                .map(|b| if seconds > 0.0 { b.busy.as_secs_f64() / seconds } else { 0.0 })
                .collect(),
        }),
    })
}

/// Loads a packed bit file, or the LSB-first expansion of a raw sample file.
pub fn load_bits(path: &Path, raw: bool, limit: Option<usize>) -> Result<BitBlock> {
    let bits = if raw {
        let s = RawSampleStream::read_from(open(path)?, 1.0)?;
        BitBlock::from_samples(&s.codes, s.adc.precision)
    } else {
        let bytes = fs::read(path)?;
        BitBlock::from_bytes_lsb(&bytes, bytes.len() * 8)?
    };
    Ok(match limit {
        Some(n) if n < bits.len() => bits.slice(0, n),
        _ => bits,
    })
}

pub fn cmd_test(path: &Path, raw: bool, limit: Option<usize>, suite: &SuiteOptions) -> Result<TestReport> {
    run_suite(&load_bits(path, raw, limit)?, suite)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSummary {
    pub combined: std::collections::BTreeMap<String, f64>,
    pub max_abs_autocorrelation: f64,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub simulate: SimulateSummary,
    pub calibration: SimulateSummary,
    pub entropy: EntropyOutput,
    pub extract: ExtractReport,
    pub test: TestSummary,
    pub unsafe_ratio_override: bool,
    pub verdict: bool,
}

/// Error from a named pipeline stage.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

trait InStage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> InStage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub const ARTIFACTS: [&str; 8] = [
    "config.txt",
    "raw.vraw",
    "classical.vraw",
    "entropy.json",
    "seed.tpsd",
    "extracted.bin",
    "test.json",
    "summary.json",
];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "JSON report",
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// simulate → entropy → extract → test, with every artifact in
/// `cfg.out_dir`. Returns the summary, which is also written to
/// `summary.json`; a failed verdict is reported, not raised.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> std::result::Result<PipelineSummary, StageError> {
    cfg.validate().stage("config")?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(Error::from).stage("config")?;
    fs::write(dir.join("config.txt"), cfg.to_string())
        .map_err(Error::from)
        .stage("config")?;
    let path = |name: &str| dir.join(name);
    let extractor = cfg.extractor().stage("config")?;

    let simulate = cmd_simulate(cfg, &cfg.noise, cfg.samples, &path("raw.vraw")).stage("simulate")?;
    let calibration =
        cmd_simulate_classical(cfg, cfg.calibration_samples, &path("classical.vraw")).stage("simulate")?;

    let entropy = cmd_entropy(
        &path("raw.vraw"),
        &path("classical.vraw"),
        cfg.sample_rate as f64,
        &EntropyOptions::from_config(cfg),
    )
    .stage("entropy")?;
    write_json(&path("entropy.json"), &entropy).stage("entropy")?;
    let report = &entropy.report;
    if !report.safe {
        return Err(Error::Calibration(format!(
            "rail bin dominates: c1 = {:e} > c2 = {:e}",
            report.c1, report.c2
        )))
        .stage("entropy");
    }
    ratio_gate(cfg.j, cfg.k, report.h_min_bits, cfg.precision, cfg.unsafe_ratio_override).stage("entropy")?;

    cmd_seedgen(cfg.j, cfg.k, cfg.toeplitz_seed, &path("seed.tpsd")).stage("seedgen")?;
    let mut extract = cmd_extract(
        &path("raw.vraw"),
        &path("seed.tpsd"),
        &path("extracted.bin"),
        &ExtractOptions {
            config: extractor,
            workers: cfg.worker_count(),
            h_min: Some(report.h_min_bits),
            unsafe_ratio_override: cfg.unsafe_ratio_override,
        },
    )
    .stage("extract")?;
    extract.throughput = None;

    let tested = cmd_test(
        &path("extracted.bin"),
        false,
        Some(extract.output_bits as usize),
        &cfg.suite,
    )
    .stage("test")?;
    write_json(&path("test.json"), &tested).stage("test")?;

    let summary = PipelineSummary {
        simulate: SimulateSummary {
            path: "raw.vraw".into(),
            ..simulate
        },
        calibration: SimulateSummary {
            path: "classical.vraw".into(),
            ..calibration
        },
        entropy,
        extract,
        test: TestSummary {
            max_abs_autocorrelation: tested.max_abs_autocorrelation(),
            combined: tested.combined.clone(),
            verdict: tested.verdict,
        },
        unsafe_ratio_override: cfg.unsafe_ratio_override,
        verdict: tested.verdict,
    };
    write_json(&path("summary.json"), &summary).stage("report")?;
    Ok(summary)
}
