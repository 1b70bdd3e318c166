//! Support-point management: the initial grid, Gaussian component splitting,
//! Metropolis-Hastings candidate sampling on the gradient function, candidate
//! grouping, and the GR / EM / EM-GR estimation drivers.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::em::{em_run_fit, EmConfig};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::mixture::{d_from_column, probability_column, Component, Fit, MixingDistribution};
use crate::weights::{line_search_alpha, optimize_weights, prune_weights, WeightSolution, WeightSolveConfig};

/// Hard cap on the number of initial grid points.
pub const GRID_CAP: usize = 100_000;

/// Candidates need at least this gradient to be considered for addition.
const MIN_GAIN: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// MH candidates per round.
    pub n_g: usize,
    pub grid_target: usize,
    /// Components split per refinement round.
    pub m_l: usize,
    pub split_offsets: [f64; 3],
    pub split_weights: [f64; 3],
    /// Child variance as a multiple of the parent variance.
    pub split_var_factor: f64,
    pub grid_iters: usize,
    pub outer_rounds: usize,
    /// Per-coordinate box `[lo, hi]` for the grid and the sampler; empty means
    /// `[-4, 4]` on every axis.
    pub bounds: Vec<[f64; 2]>,
    /// Variance of grid components and of components added by the sampler.
    pub grid_cov: f64,
    pub thinning: usize,
    pub eps_mh: f64,
    /// Probe points used to start the sampler.
    pub probe_points: usize,
    /// Random-walk standard deviation; defaults to half the probe spacing.
    pub proposal_scale: Option<f64>,
    pub early_stop_tol: f64,
    pub seed: u64,
    pub weights: WeightSolveConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n_g: 100,
            grid_target: 1000,
            m_l: 10,
            split_offsets: [-1.18, 0.0, 1.18],
            split_weights: [0.24, 0.52, 0.24],
            split_var_factor: 0.25,
            grid_iters: 15,
            outer_rounds: 5,
            bounds: Vec::new(),
            grid_cov: 0.1,
            thinning: 5,
            eps_mh: 1e-6,
            probe_points: 100,
            proposal_scale: None,
            early_stop_tol: 1e-8,
            seed: 0,
            weights: WeightSolveConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let wsum: f64 = self.split_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 || self.split_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("split weights must be nonnegative and sum to 1"));
        }
        let o = self.split_offsets;
        if (o[0] + o[2]).abs() > 1e-12 || o[1] != 0.0 {
            return Err(Error::invalid("split offsets must be symmetric around 0"));
        }
        if self.grid_iters == 0 || self.outer_rounds == 0 || self.thinning == 0 || self.probe_points == 0 {
            return Err(Error::invalid("iteration counts must be at least 1"));
        }
        if !(self.split_var_factor > 0.0) || !(self.grid_cov >= 0.0) || !(self.eps_mh > 0.0) {
            return Err(Error::invalid("variances and the sampler floor must be positive"));
        }
        if self.proposal_scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::invalid("proposal scale must be positive"));
        }
        if self
            .bounds
            .iter()
            .any(|b| !(b[0] < b[1]) || !b[0].is_finite() || !b[1].is_finite())
        {
            return Err(Error::invalid("bounds must be finite with lo < hi"));
        }
        self.weights.validate()
    }

    pub fn bounds_for(&self, d: usize) -> Result<Vec<[f64; 2]>> {
        if self.bounds.is_empty() {
            return Ok(vec![[-4.0, 4.0]; d]);
        }
        if self.bounds.len() != d {
            return Err(Error::invalid(format!(
                "{} bounds given for {d} mixed coefficients",
                self.bounds.len()
            )));
        }
        Ok(self.bounds.clone())
    }
}

/// Largest `x` with `x^d <= target`.
fn points_per_axis(target: usize, d: usize) -> usize {
    let mut x = (target as f64).powf(1.0 / d as f64).round() as usize;
    while x > 0 && x.checked_pow(d as u32).is_none_or(|p| p > target) {
        x -= 1;
    }
    while (x + 1).checked_pow(d as u32).is_some_and(|p| p <= target) {
        x += 1;
    }
    x
}

/// Tensor grid with `x` equispaced points per axis, endpoints included.
fn tensor_grid(bounds: &[[f64; 2]], x: usize) -> Vec<Vec<f64>> {
    let d = bounds.len();
    let axis = |k: usize, i: usize| -> f64 {
        let [lo, hi] = bounds[k];
        if x == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (x - 1) as f64
        }
    };
    let total = x.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; d];
            for k in (0..d).rev() {
                p[k] = axis(k, idx % x);
                idx /= x;
            }
            p
        })
        .collect()
}

/// Uniform grid of `x^d` Gaussian components, `x = floor(grid_target^(1/d))`.
pub fn init_grid(
    bounds: &[[f64; 2]],
    cov0: f64,
    grid_target: usize,
    kernel: &KernelSpec,
) -> Result<MixingDistribution> {
    let d = kernel.mixed_dim();
    if bounds.len() != d || d == 0 {
        return Err(Error::invalid("one bound pair per mixed coefficient required"));
    }
    if bounds.iter().any(|b| !(b[0] < b[1])) {
        return Err(Error::invalid("degenerate grid bounds"));
    }
    if !(cov0 >= 0.0) {
        return Err(Error::invalid("grid variance must be nonnegative"));
    }
    let x = points_per_axis(grid_target, d);
    if x < 2 {
        return Err(Error::invalid(format!(
            "grid target {grid_target} gives fewer than 2 points per axis"
        )));
    }
    let count = x.pow(d as u32);
    if count > GRID_CAP {
        return Err(Error::TooManyComponents { count, cap: GRID_CAP });
    }
    let w = 1.0 / count as f64;
    let comps = tensor_grid(bounds, x)
        .into_iter()
        .map(|p| Component::gaussian(p, vec![cov0; d], w))
        .collect();
    MixingDistribution::normalized(comps, kernel.clone())
}

/// Replaces a Gaussian component by `3^d` children: per coordinate, offsets
/// times the parent standard deviation, variance times `split_var_factor`,
/// weights the tensor product of `split_weights`.
pub fn split_component(c: &Component, cfg: &AdaptConfig) -> Result<Vec<Component>> {
    if c.cov_diag.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("only components with positive variance can be split"));
    }
    let d = c.dim();
    let sd: Vec<f64> = c.cov_diag.iter().map(|v| v.sqrt()).collect();
    let cov: Vec<f64> = c.cov_diag.iter().map(|v| v * cfg.split_var_factor).collect();
    let mut out = Vec::with_capacity(3usize.pow(d as u32));
    for mut idx in 0..3usize.pow(d as u32) {
        let mut loc = c.location.clone();
        let mut w = c.weight;
        for k in (0..d).rev() {
            let j = idx % 3;
            idx /= 3;
            loc[k] += cfg.split_offsets[j] * sd[k];
            w *= cfg.split_weights[j];
        }
        out.push(Component::gaussian(loc, cov.clone(), w));
    }
    Ok(out)
}

/// One row of the estimation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub step: String,
    pub ll: f64,
    pub n_components: usize,
    pub max_d: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    fn push(&mut self, round: usize, step: &str, fit: &Fit, max_d: Option<f64>) {
        log::debug!(
            "round {round} {step}: ll {:.10}, {} components{}",
            fit.loglik(),
            fit.len(),
            max_d.map_or(String::new(), |d| format!(", max D {d:.3e}"))
        );
        self.rows.push(TraceRow {
            round,
            step: step.to_string(),
            ll: fit.loglik(),
            n_components: fit.len(),
            max_d,
        });
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "step", "ll", "n_components", "max_D"])?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.step.clone(),
                format!("{:.16e}", r.ll),
                r.n_components.to_string(),
                r.max_d.map_or(String::new(), |d| format!("{d:.16e}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn optimize_fit(fit: &mut Fit, cfg: &WeightSolveConfig) -> Result<WeightSolution> {
    let sol = optimize_weights(fit.cache.columns(), fit.cache.weights(), cfg)?;
    fit.set_weights(&sol.weights);
    Ok(sol)
}

/// Prunes at `active_tol` and re-optimizes the survivors.
fn prune_fit(fit: &mut Fit, cfg: &WeightSolveConfig) -> Result<()> {
    let (keep, w) = prune_weights(&fit.q.weights(), cfg.active_tol);
    if keep.len() < fit.len() {
        fit.retain(&keep, &w);
        optimize_fit(fit, cfg)?;
    }
    Ok(())
}

/// Weight optimization, pruning and re-optimization. The prune is undone if
/// it would leave the log-likelihood below its value on entry.
fn settle_weights(fit: &mut Fit, cfg: &WeightSolveConfig) -> Result<()> {
    let floor = fit.loglik();
    optimize_fit(fit, cfg)?;
    let before = fit.clone();
    prune_fit(fit, cfg)?;
    if fit.loglik() < floor {
        log::debug!("pruning would lose ascent, keeping all components");
        *fit = before;
    }
    Ok(())
}

/// The adaptive grid estimator: repeated splitting of the heaviest components,
/// keeping children with positive gradient.
pub fn refine_grid(data: &Dataset, q: MixingDistribution, cfg: &AdaptConfig) -> Result<(MixingDistribution, Trace)> {
    cfg.validate()?;
    let mut fit = Fit::new(data, q)?;
    let mut trace = Trace::default();
    settle_weights(&mut fit, &cfg.weights)?;
    trace.push(0, "init", &fit, None);

    for round in 1..=cfg.grid_iters {
        let ll_prev = fit.loglik();
        optimize_fit(&mut fit, &cfg.weights)?;

        let mut order: Vec<usize> = (0..fit.len())
            .filter(|&s| fit.q.components[s].cov_diag.iter().all(|&v| v > 0.0))
            .collect();
        order.sort_by(|&a, &b| fit.q.components[b].weight.total_cmp(&fit.q.components[a].weight));
        order.truncate(cfg.m_l);
        let mut children = Vec::new();
        for &s in &order {
            children.extend(split_component(&fit.q.components[s], cfg)?);
        }
        let evaluated = children
            .par_iter()
            .map(|c| probability_column(data, &fit.q.kernel, &c.location, &c.cov_diag))
            .collect::<Result<Vec<_>>>()?;
        let mut kept = Vec::new();
        let mut cols = Vec::new();
        let mut max_d = f64::NEG_INFINITY;
        for (c, col) in children.into_iter().zip(evaluated) {
            let d = d_from_column(&col, fit.cache.mixed());
            max_d = max_d.max(d);
            if d > 0.0 {
                kept.push(c);
                cols.push(col);
            }
        }
        let n_kept = kept.len();
        if n_kept > 0 {
            fit.extend_zero(kept, cols);
            settle_weights(&mut fit, &cfg.weights)?;
        }
        fit.q.check_cap(data.len())?;
        trace.push(round, "split", &fit, max_d.is_finite().then_some(max_d));
        if n_kept == 0 && fit.loglik() - ll_prev < cfg.early_stop_tol {
            break;
        }
    }
    Ok((fit.q, trace))
}

/// A sampled candidate location with its kernel probabilities.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub location: Vec<f64>,
    pub probs: Vec<f64>,
    /// Gradient at the time of sampling.
    pub d: f64,
}

#[derive(Clone, Debug)]
pub struct MhSample {
    pub candidates: Vec<Candidate>,
    /// Largest gradient over the probe grid.
    pub probe_max_d: f64,
    pub acceptance_rate: f64,
}

/// Settings for one sampler run.
#[derive(Clone, Debug)]
pub struct MhSettings<'a> {
    pub n_g: usize,
    pub proposal_scale: &'a [f64],
    pub bounds: &'a [[f64; 2]],
    /// Variance of the candidate components.
    pub cov_diag: &'a [f64],
    pub eps_mh: f64,
    pub thinning: usize,
    pub probe_points: usize,
    pub seed: u64,
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    for _ in 0..64 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
    lo + (v - lo).rem_euclid(w)
}

/// Random-walk Metropolis-Hastings on `max(D, 0) + eps_mh`, started at the
/// best point of a probe grid. Returns no candidates when `D <= 0` on the
/// whole probe grid.
pub fn mh_sample_support(data: &Dataset, fit: &Fit, s: &MhSettings<'_>) -> Result<MhSample> {
    let d = fit.q.dim();
    if s.bounds.len() != d || s.proposal_scale.len() != d || s.cov_diag.len() != d {
        return Err(Error::invalid("sampler settings do not match the mixing dimension"));
    }
    let eval = |b: &[f64]| -> Result<(f64, Vec<f64>)> {
        let probs = probability_column(data, &fit.q.kernel, b, s.cov_diag)?;
        Ok((d_from_column(&probs, fit.cache.mixed()), probs))
    };

    let x = points_per_axis(s.probe_points, d).max(1);
    let probes = tensor_grid(s.bounds, x);
    let probe_eval = probes
        .par_iter()
        .map(|b| eval(b).map(|(dv, _)| dv))
        .collect::<Result<Vec<_>>>()?;
    let (start, probe_max_d) =
        probe_eval.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        );
    if !(probe_max_d > 0.0) {
        return Ok(MhSample {
            candidates: Vec::new(),
            probe_max_d,
            acceptance_rate: 0.0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut cur = probes[start].clone();
    let (mut cur_d, mut cur_p) = eval(&cur)?;
    let target = |dv: f64| dv.max(0.0) + s.eps_mh;
    let mut candidates: Vec<Candidate> = Vec::with_capacity(s.n_g);
    let mut accepted = 0usize;
    let steps = s.n_g * s.thinning;
    for step in 1..=steps {
        let prop: Vec<f64> = (0..d)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                reflect(cur[k] + s.proposal_scale[k] * z, s.bounds[k][0], s.bounds[k][1])
            })
            .collect();
        let (pd, pp) = eval(&prop)?;
        let u: f64 = rng.gen();
        if u * target(cur_d) < target(pd) {
            cur = prop;
            cur_d = pd;
            cur_p = pp;
            accepted += 1;
        }
        if step % s.thinning == 0 && candidates.last().is_none_or(|c| c.location != cur) {
            candidates.push(Candidate {
                location: cur.clone(),
                probs: cur_p.clone(),
                d: cur_d,
            });
        }
    }
    Ok(MhSample {
        candidates,
        probe_max_d,
        acceptance_rate: accepted as f64 / steps as f64,
    })
}

/// One component added by [`group_and_add`].
#[derive(Clone, Debug, PartialEq)]
pub struct Addition {
    pub group: usize,
    pub location: Vec<f64>,
    /// Gradient just before the addition.
    pub d: f64,
    pub alpha: f64,
}

/// Groups candidates by their nearest support point along one randomly drawn
/// coordinate, then adds the best candidate of each group by line search.
pub fn group_and_add(
    fit: &mut Fit,
    candidates: &[Candidate],
    cov_diag: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<Addition>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let dim = fit.q.dim();
    let k = rng.gen_range(0..dim);
    let support: Vec<f64> = fit.q.components.iter().map(|c| c.location[k]).collect();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); support.len()];
    for (i, c) in candidates.iter().enumerate() {
        let g = support
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - c.location[k]).abs().total_cmp(&(b.1 - c.location[k]).abs()))
            .map(|(s, _)| s)
            .expect("nonempty support");
        groups[g].push(i);
    }

    let mut added = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let best = members
            .iter()
            .map(|&i| (i, d_from_column(&candidates[i].probs, fit.cache.mixed())))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty group");
        if best.1 <= MIN_GAIN {
            continue;
        }
        let cand = &candidates[best.0];
        let alpha = line_search_alpha(fit.cache.mixed(), &cand.probs);
        if alpha <= 0.0 {
            continue;
        }
        fit.add(
            Component::gaussian(cand.location.clone(), cov_diag.to_vec(), alpha),
            cand.probs.clone(),
            alpha,
        );
        added.push(Addition {
            group: g,
            location: cand.location.clone(),
            d: best.1,
            alpha,
        });
    }
    Ok(added)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "GR")]
    Gr,
    #[serde(rename = "EM")]
    Em,
    #[serde(rename = "EM-GR")]
    EmGr,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Gr => "GR",
            Mode::Em => "EM",
            Mode::EmGr => "EM-GR",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "GR" => Ok(Mode::Gr),
            "EM" => Ok(Mode::Em),
            "EM-GR" => Ok(Mode::EmGr),
            _ => Err(Error::invalid(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub q: MixingDistribution,
    pub loglik: f64,
    pub trace: Trace,
}

fn round_seed(seed: u64, round: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64 + 1);
    rng.gen()
}

/// Runs one estimator from `q0`. GR refines the grid; EM and EM-GR (which
/// differ only in `q0`) alternate EM steps, sampler additions and weight
/// re-optimization for `outer_rounds` rounds.
pub fn estimate(
    data: &Dataset,
    q0: MixingDistribution,
    em: &EmConfig,
    cfg: &AdaptConfig,
    mode: Mode,
) -> Result<Estimate> {
    cfg.validate()?;
    em.validate()?;
    if mode == Mode::Gr {
        let (q, trace) = refine_grid(data, q0, cfg)?;
        let fit = Fit::new(data, q)?;
        return Ok(Estimate {
            loglik: fit.loglik(),
            q: fit.q,
            trace,
        });
    }

    let dim = q0.dim();
    let bounds = cfg.bounds_for(dim)?;
    let x = points_per_axis(cfg.probe_points, dim).max(2);
    let scale: Vec<f64> = bounds
        .iter()
        .map(|b| cfg.proposal_scale.unwrap_or(0.5 * (b[1] - b[0]) / x as f64))
        .collect();
    let cand_cov = vec![cfg.grid_cov; dim];

    let mut trace = Trace::default();
    let mut fit = Fit::new(data, q0)?;
    settle_weights(&mut fit, &cfg.weights)?;
    trace.push(0, "init", &fit, None);

    for round in 1..=cfg.outer_rounds {
        let ll_start = fit.loglik();
        let run = em_run_fit(data, fit, em)?;
        fit = run.fit;
        trace.push(round, "em", &fit, None);

        let seed = round_seed(cfg.seed, round);
        let sample = mh_sample_support(
            data,
            &fit,
            &MhSettings {
                n_g: cfg.n_g,
                proposal_scale: &scale,
                bounds: &bounds,
                cov_diag: &cand_cov,
                eps_mh: cfg.eps_mh,
                thinning: cfg.thinning,
                probe_points: cfg.probe_points,
                seed,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        group_and_add(&mut fit, &sample.candidates, &cand_cov, &mut rng)?;
        fit.q.check_cap(data.len())?;
        trace.push(round, "add", &fit, Some(sample.probe_max_d));

        settle_weights(&mut fit, &cfg.weights)?;
        trace.push(round, "weights", &fit, None);
        if fit.loglik() - ll_start < cfg.early_stop_tol {
            break;
        }
    }
    Ok(Estimate {
        loglik: fit.loglik(),
        q: fit.q,
        trace,
    })
}
