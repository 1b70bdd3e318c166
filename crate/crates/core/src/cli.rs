//! Command-line interface: `simulate`, `estimate`, `replicate` and `metrics`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::data::{load_dataset, save_dataset, simulate_case, CaseId, TrueMixing};
use crate::metrics::{evaluate, MetricsReport};
use crate::mixture::MixingDistribution;
use crate::study::{replicate, run_estimator, Estimator, EstimatorConfig, ReplicateConfig};

/// Prefix of environment variables that override configuration keys; nested
/// keys are separated by `__`, e.g. `NPMIX_ADAPT__GRID_TARGET=500`.
pub const ENV_PREFIX: &str = "NPMIX_";

#[derive(Debug, Parser)]
#[command(
    name = "npmix",
    version,
    about = "Nonparametric mixing-distribution estimation for discrete choice models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed, overriding the one in any config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset for one of the built-in cases.
    Simulate {
        #[arg(long)]
        case: CaseId,
        #[arg(long)]
        n: usize,
    },
    /// Estimate the mixing distribution of a dataset.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Case whose model specification (mixed coefficients, error covariance) is used.
        #[arg(long)]
        case: CaseId,
        /// GR, EM, EM-GR or BE.
        #[arg(long, default_value = "EM")]
        mode: Estimator,
        /// JSON estimator configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a Monte Carlo replication study.
    Replicate {
        /// JSON study configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate an estimate against the generating mixture of its case.
    Metrics {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mixing: PathBuf,
        #[arg(long)]
        case: CaseId,
    },
}

/// Parses the arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .context("building the thread pool")?;
    pool.install(|| dispatch(&cli))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let started = Instant::now();
    match &cli.command {
        Command::Simulate { case, n } => cmd_simulate(*case, *n, g.seed.unwrap_or(0), &g.out)?,
        Command::Estimate {
            data,
            case,
            mode,
            config,
        } => cmd_estimate(data, *case, *mode, config.as_deref(), g)?,
        Command::Replicate { config } => cmd_replicate(config, g)?,
        Command::Metrics { data, mixing, case } => cmd_metrics(data, mixing, *case, &g.out)?,
    }
    eprintln!("wall time {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn ensure_dir(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

#[derive(Serialize)]
struct TruthFile {
    case: CaseId,
    n: usize,
    seed: u64,
    labels: Vec<String>,
    mean: Vec<f64>,
    pct_negative: Vec<f64>,
}

fn cmd_simulate(case: CaseId, n: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let (data, truth) = simulate_case(case, n, seed)?;
    ensure_dir(out)?;
    save_dataset(&data, out.join("data.csv"))?;
    let desc = TruthFile {
        case,
        n,
        seed,
        labels: truth.labels(),
        mean: truth.mean(),
        pct_negative: (0..truth.dim()).map(|k| truth.pct_negative(k)).collect(),
    };
    fs::write(out.join("truth.json"), serde_json::to_string_pretty(&desc)? + "\n")?;
    println!("wrote {} observations of case {case} to {}", n, out.display());
    Ok(())
}

/// Reads a JSON config (or the defaults) and applies environment overrides.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Value>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => serde_json::to_value(T::default())?,
    };
    let mut vars: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, v) in vars {
        apply_override(&mut value, &k[ENV_PREFIX.len()..], &v)?;
    }
    serde_json::from_value(value).context("invalid configuration")
}

/// Sets the `__`-separated, case-insensitive key path to `raw`, parsed as
/// JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> anyhow::Result<()> {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("override {key}: `{part}` is not inside an object");
        };
        if i + 1 == parts.len() {
            map.insert(part.clone(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    mode: Estimator,
    winner: String,
    loglik: f64,
    n_components: usize,
    candidates: Vec<(String, f64)>,
}

fn cmd_estimate(
    data_path: &Path,
    case: CaseId,
    mode: Estimator,
    config: Option<&Path>,
    g: &Global,
) -> anyhow::Result<()> {
    let data = load_dataset(data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let mut cfg: EstimatorConfig = load_config(config)?;
    if let Some(s) = g.seed {
        cfg.adapt.seed = s;
    }
    cfg.validate()?;
    let kernel = case.kernel(case.error_cov())?;
    let out = run_estimator(&data, &kernel, &cfg, mode).context("estimation failed")?;
    ensure_dir(&g.out)?;
    fs::write(g.out.join("mixing.json"), out.q.to_json()? + "\n")?;
    out.trace.save(g.out.join("trace.csv"))?;
    let summary = Summary {
        mode,
        winner: out.winner.to_string(),
        loglik: out.loglik,
        n_components: out.q.len(),
        candidates: out.candidates.iter().map(|(m, ll)| (m.to_string(), *ll)).collect(),
    };
    fs::write(
        g.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let winner = if mode == Estimator::Be {
        format!(" (best: {})", out.winner)
    } else {
        String::new()
    };
    println!("mode {mode}{winner}: ll {:.10}, {} components", out.loglik, out.q.len());
    Ok(())
}

fn cmd_replicate(config: &Path, g: &Global) -> anyhow::Result<()> {
    let mut cfg: ReplicateConfig = load_config(Some(config))?;
    if let Some(s) = g.seed {
        cfg.master_seed = s;
    }
    let res = replicate(&cfg)?;
    ensure_dir(&g.out)?;
    let path = g.out.join("replicate.csv");
    res.write_csv(std::io::BufWriter::new(fs::File::create(&path)?))?;
    let failed = res.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "wrote {} rows to {}",
        res.rows.len() + res.aggregates.len(),
        path.display()
    );
    if failed > 0 {
        bail!("{failed} of {} estimations failed", res.rows.len());
    }
    Ok(())
}

fn write_metrics_row<W: std::io::Write>(r: &MetricsReport, out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.serialize(r)?;
    w.flush()?;
    Ok(())
}

fn cmd_metrics(data: &Path, mixing: &Path, case: CaseId, out: &Path) -> anyhow::Result<()> {
    let data = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let text = fs::read_to_string(mixing).with_context(|| format!("reading {}", mixing.display()))?;
    let q = MixingDistribution::from_json(&text)?;
    let report = evaluate(&data, &q, &TrueMixing::new(case))?;
    ensure_dir(out)?;
    write_metrics_row(
        &report,
        std::io::BufWriter::new(fs::File::create(out.join("metrics.csv"))?),
    )?;
    write_metrics_row(&report, std::io::stdout().lock())?;
    Ok(())
}
