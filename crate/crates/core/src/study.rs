//! Estimator menu (GR, EM, EM-GR and the best-of-three BE) and the Monte Carlo
//! replication harness.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{estimate, init_grid, AdaptConfig, Estimate, Mode, Trace};
use crate::data::{simulate_case, CaseId, Dataset};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::metrics::{evaluate, MetricsReport};
use crate::mixture::MixingDistribution;

/// A requested estimator: one of the three drivers or the best of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Gr,
    Em,
    EmGr,
    Be,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Gr => "GR",
            Estimator::Em => "EM",
            Estimator::EmGr => "EM-GR",
            Estimator::Be => "BE",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("BE") {
            return Ok(Estimator::Be);
        }
        Ok(match s.parse::<Mode>()? {
            Mode::Gr => Estimator::Gr,
            Mode::Em => Estimator::Em,
            Mode::EmGr => Estimator::EmGr,
        })
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub em: EmConfig,
    pub adapt: AdaptConfig,
    /// GR uses the probit error covariance `gr_error_scale * I`.
    pub gr_error_scale: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            adapt: AdaptConfig::default(),
            gr_error_scale: 0.1,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.adapt.validate()?;
        if !(self.gr_error_scale > 0.0) {
            return Err(Error::invalid("gr_error_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    pub estimator: Estimator,
    /// The driver whose result was returned (differs from `estimator` for BE).
    pub winner: Mode,
    pub q: MixingDistribution,
    pub loglik: f64,
    pub trace: Trace,
    /// Log-likelihood of every driver that ran.
    pub candidates: Vec<(Mode, f64)>,
}

fn initial_grid(kernel: &KernelSpec, cfg: &EstimatorConfig) -> Result<MixingDistribution> {
    let bounds = cfg.adapt.bounds_for(kernel.mixed_dim())?;
    init_grid(&bounds, cfg.adapt.grid_cov, cfg.adapt.grid_target, kernel)
}

/// Runs the requested estimators on one dataset, sharing the GR fit between
/// GR, EM-GR and BE. `kernel` is the model used by the EM drivers.
pub fn run_estimators(
    data: &Dataset,
    kernel: &KernelSpec,
    cfg: &EstimatorConfig,
    requested: &[Estimator],
) -> Vec<Result<EstimatorOutput>> {
    let needs = |m: Mode| {
        requested.iter().any(|&e| match e {
            Estimator::Be => true,
            Estimator::Gr => m == Mode::Gr,
            Estimator::Em => m == Mode::Em,
            Estimator::EmGr => m == Mode::EmGr || m == Mode::Gr,
        })
    };
    let gr = needs(Mode::Gr).then(|| run_gr(data, kernel, cfg));
    let em_gr = needs(Mode::EmGr).then(|| match &gr {
        Some(Ok(g)) => run_em_gr(data, kernel, cfg, g),
        Some(Err(e)) => Err(Error::invalid(format!("GR stage failed: {e}"))),
        None => unreachable!("EM-GR implies GR"),
    });
    let em = needs(Mode::Em).then(|| {
        let q0 = initial_grid(kernel, cfg)?;
        estimate(data, q0, &cfg.em, &cfg.adapt, Mode::Em)
    });

    let pick = |m: Mode| -> Option<&Result<Estimate>> {
        match m {
            Mode::Gr => gr.as_ref(),
            Mode::Em => em.as_ref(),
            Mode::EmGr => em_gr.as_ref(),
        }
    };
    let single = |e: Estimator, m: Mode| -> Result<EstimatorOutput> {
        match pick(m).expect("driver ran") {
            Ok(est) => Ok(EstimatorOutput {
                estimator: e,
                winner: m,
                q: est.q.clone(),
                loglik: est.loglik,
                trace: est.trace.clone(),
                candidates: vec![(m, est.loglik)],
            }),
            Err(err) => Err(Error::invalid(format!("{m} failed: {err}"))),
        }
    };

    requested
        .iter()
        .map(|&e| match e {
            Estimator::Gr => single(e, Mode::Gr),
            Estimator::Em => single(e, Mode::Em),
            Estimator::EmGr => single(e, Mode::EmGr),
            Estimator::Be => {
                let mut best: Option<(Mode, &Estimate)> = None;
                let mut candidates = Vec::new();
                for m in [Mode::Gr, Mode::EmGr, Mode::Em] {
                    if let Some(Ok(est)) = pick(m) {
                        candidates.push((m, est.loglik));
                        if best.is_none_or(|(_, b)| est.loglik > b.loglik) {
                            best = Some((m, est));
                        }
                    }
                }
                let (m, est) = best.ok_or_else(|| Error::invalid("every estimator failed"))?;
                Ok(EstimatorOutput {
                    estimator: e,
                    winner: m,
                    q: est.q.clone(),
                    loglik: est.loglik,
                    trace: est.trace.clone(),
                    candidates,
                })
            }
        })
        .collect()
}

/// Runs a single estimator.
pub fn run_estimator(
    data: &Dataset,
    kernel: &KernelSpec,
    cfg: &EstimatorConfig,
    e: Estimator,
) -> Result<EstimatorOutput> {
    cfg.validate()?;
    run_estimators(data, kernel, cfg, &[e]).pop().expect("one result")
}

fn run_gr(data: &Dataset, kernel: &KernelSpec, cfg: &EstimatorConfig) -> Result<Estimate> {
    let n_alt = kernel.n_alternatives();
    let gr_kernel = kernel.with_error_cov(DMatrix::identity(n_alt, n_alt) * cfg.gr_error_scale)?;
    let q0 = initial_grid(&gr_kernel, cfg)?;
    estimate(data, q0, &cfg.em, &cfg.adapt, Mode::Gr)
}

fn run_em_gr(data: &Dataset, kernel: &KernelSpec, cfg: &EstimatorConfig, gr: &Estimate) -> Result<Estimate> {
    let q0 = MixingDistribution::new(gr.q.components.clone(), kernel.clone())?;
    let mut est = estimate(data, q0, &cfg.em, &cfg.adapt, Mode::EmGr)?;
    let mut rows = gr.trace.rows.clone();
    for r in &mut rows {
        r.step = format!("gr-{}", r.step);
    }
    rows.append(&mut est.trace.rows);
    est.trace.rows = rows;
    Ok(est)
}

/// Per-replication seed: SHA-256 of the master seed, the case, the sample
/// size and the replication index.
pub fn replication_seed(master: u64, case: CaseId, n: usize, replication: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(case.as_str().as_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((replication as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicateConfig {
    pub case: CaseId,
    pub n: Vec<usize>,
    pub replications: usize,
    pub modes: Vec<Estimator>,
    pub master_seed: u64,
    pub estimator: EstimatorConfig,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        Self {
            case: CaseId::C2a,
            n: vec![250, 500, 1000],
            replications: 20,
            modes: vec![Estimator::Em],
            master_seed: 0,
            estimator: EstimatorConfig::default(),
        }
    }
}

impl ReplicateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("at least one mode is required"));
        }
        self.estimator.validate()
    }
}

/// One replication under one estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationRow {
    pub case: CaseId,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub mode: Estimator,
    pub winner: Option<Mode>,
    pub loglik: Option<f64>,
    pub n_components: Option<usize>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Mean of each measure over the successful rows of one `(n, mode)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub case: CaseId,
    pub n: usize,
    pub mode: Estimator,
    pub count: usize,
    pub loglik: f64,
    pub n_components: f64,
    pub ll_gap: f64,
    pub prob_mae: f64,
    pub cdf_dist: f64,
    pub cdf_ks: f64,
    pub pct_neg_err: Option<f64>,
    pub mean_err_norm: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplicationResult {
    pub rows: Vec<ReplicationRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Runs every `(n, replication)` job in order and evaluates each requested
/// estimator. Failures are recorded in the row and do not stop the study.
pub fn replicate(cfg: &ReplicateConfig) -> Result<ReplicationResult> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .n
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .collect();
    let per_job: Vec<Vec<ReplicationRow>> = jobs.par_iter().map(|&(n, r)| run_job(cfg, n, r)).collect();
    let rows: Vec<ReplicationRow> = per_job.into_iter().flatten().collect();
    let mut aggregates = Vec::new();
    for &n in &cfg.n {
        for &mode in &cfg.modes {
            let cell: Vec<&ReplicationRow> = rows
                .iter()
                .filter(|row| row.n == n && row.mode == mode && row.metrics.is_some())
                .collect();
            aggregates.push(aggregate(cfg.case, n, mode, &cell));
        }
    }
    Ok(ReplicationResult { rows, aggregates })
}

fn run_job(cfg: &ReplicateConfig, n: usize, r: usize) -> Vec<ReplicationRow> {
    let seed = replication_seed(cfg.master_seed, cfg.case, n, r);
    let base = |mode: Estimator| ReplicationRow {
        case: cfg.case,
        n,
        replication: r,
        seed,
        mode,
        winner: None,
        loglik: None,
        n_components: None,
        metrics: None,
        error: None,
    };
    let setup = simulate_case(cfg.case, n, seed)
        .and_then(|(data, truth)| Ok((data, truth, cfg.case.kernel(cfg.case.error_cov())?)));
    let (data, truth, kernel) = match setup {
        Ok(v) => v,
        Err(e) => {
            return cfg
                .modes
                .iter()
                .map(|&m| ReplicationRow {
                    error: Some(e.to_string()),
                    ..base(m)
                })
                .collect()
        }
    };
    let mut est_cfg = cfg.estimator.clone();
    est_cfg.adapt.seed = seed;
    let outputs = run_estimators(&data, &kernel, &est_cfg, &cfg.modes);
    cfg.modes
        .iter()
        .zip(outputs)
        .map(|(&m, out)| {
            let out = out.and_then(|o| evaluate(&data, &o.q, &truth).map(|rep| (o, rep)));
            match out {
                Ok((o, rep)) => ReplicationRow {
                    winner: Some(o.winner),
                    loglik: Some(o.loglik),
                    n_components: Some(o.q.len()),
                    metrics: Some(rep),
                    ..base(m)
                },
                Err(e) => {
                    log::warn!("n={n} replication {r} {m}: {e}");
                    ReplicationRow {
                        error: Some(e.to_string()),
                        ..base(m)
                    }
                }
            }
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn aggregate(case: CaseId, n: usize, mode: Estimator, cell: &[&ReplicationRow]) -> AggregateRow {
    let m = |f: &dyn Fn(&MetricsReport) -> f64| mean_of(cell.iter().map(|r| f(r.metrics.as_ref().expect("ok row"))));
    let opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let v: Vec<f64> = cell
            .iter()
            .filter_map(|r| f(r.metrics.as_ref().expect("ok row")))
            .collect();
        (!v.is_empty()).then(|| mean_of(v.into_iter()))
    };
    AggregateRow {
        case,
        n,
        mode,
        count: cell.len(),
        loglik: mean_of(cell.iter().filter_map(|r| r.loglik)),
        n_components: mean_of(cell.iter().filter_map(|r| r.n_components.map(|c| c as f64))),
        ll_gap: m(&|r| r.ll_gap),
        prob_mae: m(&|r| r.prob_mae),
        cdf_dist: m(&|r| r.cdf_dist),
        cdf_ks: m(&|r| r.cdf_ks),
        pct_neg_err: opt(&|r| r.pct_neg_err),
        mean_err_norm: opt(&|r| r.mean_err_norm),
    }
}

const HEADER: [&str; 18] = [
    "row",
    "case",
    "n",
    "replication",
    "seed",
    "mode",
    "winner",
    "count",
    "loglik",
    "n_components",
    "ll_gap",
    "prob_mae",
    "cdf_dist",
    "cdf_ks",
    "cdf_step",
    "pct_neg_err",
    "mean_err_norm",
    "error",
];

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

impl ReplicationResult {
    /// Detail rows in job order followed by one aggregate row per `(n, mode)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            let m = r.metrics.as_ref();
            w.write_record([
                "detail".to_string(),
                r.case.to_string(),
                r.n.to_string(),
                r.replication.to_string(),
                r.seed.to_string(),
                r.mode.to_string(),
                r.winner.map_or(String::new(), |m| m.to_string()),
                "1".to_string(),
                opt_num(r.loglik),
                r.n_components.map_or(String::new(), |c| c.to_string()),
                opt_num(m.map(|m| m.ll_gap)),
                opt_num(m.map(|m| m.prob_mae)),
                opt_num(m.map(|m| m.cdf_dist)),
                opt_num(m.map(|m| m.cdf_ks)),
                opt_num(m.map(|m| m.cdf_step)),
                opt_num(m.and_then(|m| m.pct_neg_err)),
                opt_num(m.and_then(|m| m.mean_err_norm)),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        for a in &self.aggregates {
            w.write_record([
                "aggregate".to_string(),
                a.case.to_string(),
                a.n.to_string(),
                String::new(),
                String::new(),
                a.mode.to_string(),
                String::new(),
                a.count.to_string(),
                num(a.loglik),
                num(a.n_components),
                num(a.ll_gap),
                num(a.prob_mae),
                num(a.cdf_dist),
                num(a.cdf_ks),
                String::new(),
                opt_num(a.pct_neg_err),
                opt_num(a.mean_err_norm),
                String::new(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
