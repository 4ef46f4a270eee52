use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vqrng::config::PipelineConfig;
use vqrng::extractor::throughput_benchmark;
use vqrng::pipeline::{
    cmd_entropy, cmd_extract, cmd_pipeline, cmd_seedgen, cmd_simulate, cmd_test, exit_code, EntropyOptions,
    ExtractOptions, EXIT_OK, EXIT_UNSAFE, EXIT_VERDICT,
};
use vqrng::{Error, Result};

/// Software post-processing chain of a vacuum-noise random number generator.
#[derive(Parser)]
#[command(name = "vqrng", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    cmd: Command,
}

/// Settings shared by every subcommand; each one overrides the config file.
#[derive(Args)]
struct Overrides {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    lo_power_mw: Option<f64>,
    /// Detector filter cutoff in cycles per sample.
    #[arg(long, global = true)]
    filter_cutoff: Option<f64>,
    #[arg(long, global = true)]
    j: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Bits consumed per step, G.
    #[arg(long, global = true)]
    g: Option<usize>,
    #[arg(long, global = true)]
    blocks: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Simulation RNG seed (seedgen: the Toeplitz seed key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target ε, as a probability (1e-77) or a power of two (2^-256).
    #[arg(long, global = true)]
    epsilon: Option<String>,
    /// Output path for the subcommand's artifact or report.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    unsafe_ratio_override: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a raw sample file (--out); prints a variance summary.
    Simulate,
    /// Estimate min-entropy from a measured and an LO-blocked raw file.
    Entropy { raw: PathBuf, classical: PathBuf },
    /// Extract a raw sample file through a seed file into packed bits (--out).
    Extract {
        raw: PathBuf,
        seed_file: PathBuf,
        /// JSON written by `entropy`; supplies h_min for the ratio check.
        #[arg(long, conflicts_with = "h_min")]
        entropy_report: Option<PathBuf>,
        #[arg(long)]
        h_min: Option<f64>,
    },
    /// Run the statistical suite on a packed bit file.
    Test {
        bits: PathBuf,
        /// Input is a raw sample file; test its bit expansion.
        #[arg(long)]
        raw: bool,
        /// Use only the first N bits.
        #[arg(long)]
        bits_limit: Option<usize>,
        #[arg(long)]
        subsequence_len: Option<usize>,
        #[arg(long)]
        subsequence_count: Option<usize>,
    },
    /// simulate, entropy, extract and test in one run.
    Pipeline {
        /// Artifact directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Measure extraction throughput on fixed pseudo-random input.
    Bench {
        #[arg(long, default_value_t = 12288 * 4096)]
        volume_bits: usize,
    },
    /// Write a Toeplitz seed file (--out) drawn from ChaCha20 keyed by --seed.
    Seedgen,
}

fn parse_epsilon(text: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot read ε from `{text}`"));
    if let Some(exp) = text.trim().strip_prefix("2^") {
        return exp.parse::<f64>().map_err(|_| bad());
    }
    let eps: f64 = text.trim().parse().map_err(|_| bad())?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(bad());
    }
    Ok(eps.log2())
}

fn load_config(o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(path) => PipelineConfig::from_kv(&fs::read_to_string(path)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = o.samples {
        cfg.samples = v;
    }
    if let Some(v) = o.lo_power_mw {
        cfg.noise.lo_power_mw = v;
    }
    if let Some(v) = o.filter_cutoff {
        cfg.noise.filter_cutoff = Some(v);
    }
    if let Some(v) = o.j {
        cfg.j = v;
    }
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = o.g {
        cfg.group = v;
    }
    if let Some(v) = o.blocks {
        cfg.block_count = Some(v);
    }
    if let Some(v) = o.workers {
        cfg.workers = Some(v);
    }
    if let Some(v) = o.seed {
        cfg.noise.rng_seed = v;
    }
    if let Some(text) = &o.epsilon {
        cfg.epsilon_log2 = Some(parse_epsilon(text)?);
    }
    cfg.unsafe_ratio_override |= o.unsafe_ratio_override;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "JSON report",
        detail: e.to_string(),
    })?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn require_out(o: &Overrides, what: &str) -> Result<PathBuf> {
    o.out
        .clone()
        .ok_or_else(|| Error::Config(format!("--out is required for the {what}")))
}

fn h_min_from_report(path: &Path) -> Result<f64> {
    let bad = |detail: String| Error::Format {
        what: "entropy report",
        detail,
    };
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| bad(e.to_string()))?;
    v.get("h_min_bits")
        .and_then(|h| h.as_f64())
        .ok_or_else(|| bad("no numeric h_min_bits field".into()))
}

fn run(cli: Cli) -> Result<u8> {
    let o = &cli.opts;
    let mut cfg = load_config(o)?;
    match cli.cmd {
        Command::Simulate => {
            cfg.validate()?;
            let summary = cmd_simulate(&cfg, &cfg.noise, cfg.samples, &require_out(o, "raw sample file")?)?;
            emit(&summary, None)?;
        }
        Command::Entropy { raw, classical } => {
            let out = cmd_entropy(&raw, &classical, cfg.sample_rate as f64, &EntropyOptions::from_config(&cfg))?;
            emit(&out, o.out.as_deref())?;
            if !out.report.safe {
                eprintln!("unsafe calibration: c1 = {:e} exceeds c2 = {:e}", out.report.c1, out.report.c2);
                return Ok(EXIT_UNSAFE);
            }
        }
        Command::Extract {
            raw,
            seed_file,
            entropy_report,
            h_min,
        } => {
            let h_min = match entropy_report {
                Some(path) => Some(h_min_from_report(&path)?),
                None => h_min,
            };
            let opts = ExtractOptions {
                config: cfg.extractor()?,
                workers: cfg.worker_count(),
                h_min,
                unsafe_ratio_override: cfg.unsafe_ratio_override,
            };
            let report = cmd_extract(&raw, &seed_file, &require_out(o, "extracted bit file")?, &opts)?;
            emit(&report, None)?;
        }
        Command::Test {
            bits,
            raw,
            bits_limit,
            subsequence_len,
            subsequence_count,
        } => {
            if let Some(v) = subsequence_len {
                cfg.suite.subsequence_len = v;
            }
            if let Some(v) = subsequence_count {
                cfg.suite.subsequence_count = v;
            }
            let report = cmd_test(&bits, raw, bits_limit, &cfg.suite)?;
            emit(&report, o.out.as_deref())?;
            if !report.verdict {
                return Ok(EXIT_VERDICT);
            }
        }
        Command::Pipeline { out_dir } => {
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            match cmd_pipeline(&cfg) {
                Ok(summary) => {
                    emit(&summary, o.out.as_deref())?;
                    if !summary.verdict {
                        return Ok(EXIT_VERDICT);
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(exit_code(&e.source));
                }
            }
        }
        Command::Bench { volume_bits } => {
            let config = cfg.extractor()?;
            let seed = vqrng::pipeline::seedgen(config.j, config.k, cfg.toeplitz_seed)?;
            let report = throughput_benchmark(&seed, &config, volume_bits, cfg.worker_count())?;
            emit(&report, o.out.as_deref())?;
        }
        Command::Seedgen => {
            let key = o.seed.unwrap_or(cfg.toeplitz_seed);
            let path = require_out(o, "seed file")?;
            let seed = cmd_seedgen(cfg.j, cfg.k, key, &path)?;
            emit(
                &serde_json::json!({
                    "j": seed.j(),
                    "k": seed.k(),
                    "seed": key,
                    "bits": seed.bits().len(),
                    "path": path,
                }),
                None,
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
