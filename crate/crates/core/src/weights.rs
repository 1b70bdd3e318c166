//! Weight optimization over the simplex for fixed components, the
//! one-dimensional line search used when adding a component, and pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{d_from_column, mean_log, mix_into, Component, MixingDistribution, PROB_FLOOR};

/// Weight-solver algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    /// Constrained Newton steps: a nonnegative least-squares fit of the
    /// quadratic model followed by a backtracking line search. Falls back to
    /// the first-order method if a step stalls.
    Newton,
    /// Multiplicative fixed-point updates interleaved with vertex exchange.
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightSolveConfig {
    pub method: WeightMethod,
    pub max_iters: usize,
    pub kkt_tol: f64,
    /// Components heavier than this must satisfy `|D_s| <= kkt_tol`; also the
    /// pruning threshold.
    pub active_tol: f64,
    /// Every this many first-order iterations a vertex-exchange step replaces
    /// the multiplicative update.
    pub exchange_every: usize,
}

impl Default for WeightSolveConfig {
    fn default() -> Self {
        Self {
            method: WeightMethod::Newton,
            max_iters: 2000,
            kkt_tol: 1e-6,
            active_tol: 1e-3,
            exchange_every: 20,
        }
    }
}

impl WeightSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tol > 0.0 && self.active_tol > 0.0) || self.exchange_every == 0 {
            return Err(Error::invalid("weight solver tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    pub loglik: f64,
    /// `D_s = n^-1 sum_i P[i,s] / mixed_i - 1` at the solution.
    pub gradient: Vec<f64>,
    pub iterations: usize,
    /// True when the KKT certificate holds; false when the iteration cap was
    /// hit first (the best iterate is still returned).
    pub converged: bool,
}

impl WeightSolution {
    pub fn max_d(&self) -> f64 {
        self.gradient.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn kkt_holds(grad: &[f64], w: &[f64], cfg: &WeightSolveConfig) -> bool {
    grad.iter()
        .zip(w)
        .all(|(&d, &wi)| d <= cfg.kkt_tol && (wi <= cfg.active_tol || d.abs() <= cfg.kkt_tol))
}

struct State<'a> {
    columns: &'a [Vec<f64>],
    w: Vec<f64>,
    mixed: Vec<f64>,
    ll: f64,
    grad: Vec<f64>,
}

impl State<'_> {
    fn refresh(&mut self) {
        mix_into(self.columns, &self.w, &mut self.mixed);
        self.ll = mean_log(&self.mixed);
        for (g, c) in self.grad.iter_mut().zip(self.columns) {
            *g = d_from_column(c, &self.mixed);
        }
    }
}

/// Maximizes `n^-1 sum_i log(sum_s pi_s P[i,s])` over the simplex.
///
/// `columns[s]` holds `P[., s]`. Every accepted step increases the objective.
pub fn optimize_weights(columns: &[Vec<f64>], pi0: &[f64], cfg: &WeightSolveConfig) -> Result<WeightSolution> {
    cfg.validate()?;
    let s_count = columns.len();
    if s_count == 0 || pi0.len() != s_count {
        return Err(Error::invalid("need one initial weight per column"));
    }
    let n = columns[0].len();
    if n == 0 || columns.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("probability columns must share a positive length"));
    }
    if columns.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("probability matrix"));
    }
    if columns.iter().flatten().any(|&p| p <= 0.0) {
        return Err(Error::invalid("probability matrix entries must be positive"));
    }
    let total: f64 = pi0.iter().sum();
    if pi0.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("initial weights must lie on the simplex"));
    }

    let mut st = State {
        columns,
        w: pi0.iter().map(|v| v / total).collect(),
        mixed: vec![0.0; n],
        ll: 0.0,
        grad: vec![0.0; s_count],
    };
    st.refresh();

    if s_count == 1 {
        return Ok(WeightSolution {
            weights: vec![1.0],
            loglik: st.ll,
            gradient: st.grad,
            iterations: 0,
            converged: true,
        });
    }

    let mut iterations = 0;
    let mut converged = kkt_holds(&st.grad, &st.w, cfg);
    if cfg.method == WeightMethod::Newton {
        while !converged && iterations < cfg.max_iters {
            iterations += 1;
            if !newton_step(&mut st) {
                let before = st.ll;
                first_order_step(&mut st, true);
                if !(st.ll > before) {
                    break;
                }
            }
            converged = kkt_holds(&st.grad, &st.w, cfg);
        }
    }
    let mut first_order = 0;
    while !converged && iterations < cfg.max_iters {
        first_order_step(&mut st, first_order % cfg.exchange_every == 0);
        first_order += 1;
        iterations += 1;
        converged = kkt_holds(&st.grad, &st.w, cfg);
    }
    if !converged {
        log::debug!(
            "weight solver hit {} iterations without a KKT certificate (max D = {:.3e})",
            cfg.max_iters,
            st.grad.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        );
    }
    Ok(WeightSolution {
        weights: st.w,
        loglik: st.ll,
        gradient: st.grad,
        iterations,
        converged,
    })
}

/// Zero-weight columns with the largest `D` offered to each Newton step.
const NEWTON_CANDIDATES: usize = 20;
/// Weight of the sum-to-one row in the Newton least-squares problem.
const SIMPLEX_PENALTY: f64 = 1e3;

/// One constrained Newton step. With `S[i,s] = P[i,s] / mixed_i`, the
/// quadratic model of the objective is maximized over the nonnegative orthant
/// by `min ||S w - 2||`; the normalized solution gives the search direction.
/// Returns false when no ascent was possible.
fn newton_step(st: &mut State<'_>) -> bool {
    let n = st.mixed.len();
    let mut by_d: Vec<usize> = (0..st.w.len())
        .filter(|&s| st.w[s] <= 0.0 && st.grad[s] > 0.0)
        .collect();
    by_d.sort_by(|&a, &b| st.grad[b].total_cmp(&st.grad[a]).then(a.cmp(&b)));
    by_d.truncate(NEWTON_CANDIDATES);
    let mut idx: Vec<usize> = (0..st.w.len()).filter(|&s| st.w[s] > 0.0).chain(by_d).collect();
    idx.sort_unstable();
    // the extra row enforces sum-to-one; without it `2 w` solves the system exactly
    let rho = SIMPLEX_PENALTY * (n as f64).sqrt();
    let scaled: Vec<Vec<f64>> = idx
        .iter()
        .map(|&s| {
            let mut c: Vec<f64> = st.columns[s]
                .iter()
                .zip(&st.mixed)
                .map(|(p, m)| p / m.max(PROB_FLOOR))
                .collect();
            c.push(rho);
            c
        })
        .collect();
    let mut b = vec![2.0; n];
    b.push(rho);
    let sol = nnls(&scaled, &b);
    let sum: f64 = sol.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return false;
    }
    let mut dir: Vec<f64> = st.w.iter().map(|w| -w).collect();
    for (&s, x) in idx.iter().zip(&sol) {
        dir[s] += x / sum;
    }
    let slope: f64 = dir.iter().zip(&st.grad).map(|(d, g)| d * g).sum();
    if !(slope > 0.0) {
        return false;
    }
    let mut trial_w = vec![0.0; st.w.len()];
    let mut trial_mixed = vec![0.0; st.mixed.len()];
    let mut t = 1.0;
    for _ in 0..50 {
        for ((tw, w), d) in trial_w.iter_mut().zip(&st.w).zip(&dir) {
            *tw = (w + t * d).max(0.0);
        }
        let tsum: f64 = trial_w.iter().sum();
        trial_w.iter_mut().for_each(|v| *v /= tsum);
        mix_into(st.columns, &trial_w, &mut trial_mixed);
        let trial_ll = mean_log(&trial_mixed);
        if trial_ll >= st.ll + t * slope / 3.0 {
            st.w = trial_w;
            st.refresh();
            return true;
        }
        t *= 0.5;
    }
    false
}

/// Multiplicative update `pi_s <- pi_s (1 + D_s)`, or a vertex exchange.
fn first_order_step(st: &mut State<'_>, exchange: bool) {
    if exchange {
        vertex_exchange(st.columns, &st.grad, &mut st.w, &mut st.mixed);
    } else {
        let mut cand: Vec<f64> = st.w.iter().zip(&st.grad).map(|(w, d)| w * (1.0 + d).max(0.0)).collect();
        let sum: f64 = cand.iter().sum();
        cand.iter_mut().for_each(|v| *v /= sum);
        let mut cand_mixed = vec![0.0; st.mixed.len()];
        mix_into(st.columns, &cand, &mut cand_mixed);
        // an EM step cannot decrease the objective beyond rounding
        if mean_log(&cand_mixed) >= st.ll - 1e-12 {
            st.w = cand;
        }
    }
    let before = st.ll;
    st.refresh();
    debug_assert!(st.ll >= before - 1e-12, "weight solver decreased the objective");
}

/// Lawson-Hanson nonnegative least squares `min ||A x - b||, x >= 0` with `A`
/// given by columns.
pub(crate) fn nnls(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let s = a.len();
    let n = b.len();
    let tol = 1e-10 * n as f64;
    let mut x = vec![0.0; s];
    let mut passive = vec![false; s];
    let mut blocked = vec![false; s];
    let mut resid = b.to_vec();
    let dot = |c: &[f64], r: &[f64]| c.iter().zip(r).map(|(p, q)| p * q).sum::<f64>();

    for _ in 0..3 * s {
        let pick = (0..s)
            .filter(|&j| !passive[j] && !blocked[j])
            .map(|j| (j, dot(&a[j], &resid)))
            .max_by(|p, q| p.1.total_cmp(&q.1));
        let Some((j, wj)) = pick else { break };
        if wj <= tol {
            break;
        }
        passive[j] = true;
        let mut first = true;
        for _ in 0..3 * s {
            let idx: Vec<usize> = (0..s).filter(|&k| passive[k]).collect();
            let Some(z) = least_squares(a, &idx, b) else {
                passive[j] = false;
                blocked[j] = true;
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                for (&k, &v) in idx.iter().zip(&z) {
                    x[k] = v;
                }
                break;
            }
            if first && z[idx.iter().position(|&k| k == j).expect("j passive")] <= 0.0 {
                // numerically dependent on the passive set
                passive[j] = false;
                blocked[j] = true;
                break;
            }
            first = false;
            let mut alpha = f64::INFINITY;
            for (&k, &v) in idx.iter().zip(&z) {
                if v <= 0.0 {
                    alpha = alpha.min(x[k] / (x[k] - v));
                }
            }
            for (&k, &v) in idx.iter().zip(&z) {
                x[k] += alpha * (v - x[k]);
                if x[k] <= 1e-15 {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        for (i, r) in resid.iter_mut().enumerate() {
            *r = b[i] - (0..s).filter(|&k| x[k] != 0.0).map(|k| a[k][i] * x[k]).sum::<f64>();
        }
    }
    x
}

fn least_squares(a: &[Vec<f64>], idx: &[usize], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let m = nalgebra::DMatrix::from_fn(n, idx.len(), |i, k| a[idx[k]][i]);
    let rhs = nalgebra::DVector::from_column_slice(b);
    let qr = m.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let z = if r.diagonal().iter().all(|d| d.abs() > 1e-12 * diag_max) {
        r.solve_upper_triangular(&(qr.q().transpose() * &rhs))?
    } else {
        m.svd(true, true).solve(&rhs, 1e-12 * diag_max).ok()?
    };
    z.iter().all(|v| v.is_finite()).then(|| z.iter().copied().collect())
}

fn vertex_exchange(columns: &[Vec<f64>], grad: &[f64], w: &mut [f64], mixed: &mut [f64]) {
    let best = (0..grad.len())
        .max_by(|&a, &b| grad[a].total_cmp(&grad[b]))
        .expect("nonempty");
    let worst = (0..grad.len())
        .filter(|&s| w[s] > 0.0 && s != best)
        .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
    let Some(worst) = worst else { return };
    if grad[best] <= grad[worst] {
        return;
    }
    let dir: Vec<f64> = columns[best].iter().zip(&columns[worst]).map(|(a, b)| a - b).collect();
    let t = concave_line_search(mixed, &dir, w[worst]);
    if t > 0.0 {
        w[best] += t;
        w[worst] -= t;
        if w[worst] < 0.0 {
            w[worst] = 0.0;
        }
        for (m, d) in mixed.iter_mut().zip(&dir) {
            *m += t * d;
        }
    }
}

/// Maximizes the concave `g(t) = n^-1 sum_i log(base_i + t dir_i)` over
/// `[0, t_max]`; returns 0 when `g'(0) <= 0`.
pub(crate) fn concave_line_search(base: &[f64], dir: &[f64], t_max: f64) -> f64 {
    let deriv = |t: f64| -> (f64, f64) {
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for (&b, &d) in base.iter().zip(dir) {
            let den = (b + t * d).max(PROB_FLOOR);
            let r = d / den;
            g1 += r;
            g2 -= r * r;
        }
        (g1, g2)
    };
    if !(t_max > 0.0) {
        return 0.0;
    }
    let (g0, _) = deriv(0.0);
    if !(g0 > 0.0) {
        return 0.0;
    }
    let (g_end, _) = deriv(t_max);
    if g_end >= 0.0 {
        return t_max;
    }
    let (mut lo, mut hi) = (0.0, t_max);
    let mut t = 0.5 * t_max;
    for _ in 0..200 {
        let (g1, g2) = deriv(t);
        if g1 > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if g1 == 0.0 || hi - lo <= 1e-15 * t_max.max(1.0) {
            break;
        }
        let newton = if g2 < 0.0 { t - g1 / g2 } else { f64::NAN };
        t = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) < 1e-13 && g1.abs() < 1e-13 {
            break;
        }
    }
    // stay on the ascent side of the root
    if deriv(t).0 < 0.0 {
        t = lo;
    }
    t
}

/// Mass `alpha` to give a candidate so that `(1 - alpha) Q + alpha delta`
/// maximizes the scaled log-likelihood. `mixed` are the current mixture
/// probabilities, `p_new` the candidate's.
pub fn line_search_alpha(mixed: &[f64], p_new: &[f64]) -> f64 {
    let dir: Vec<f64> = p_new.iter().zip(mixed).map(|(p, m)| p - m).collect();
    concave_line_search(mixed, &dir, 1.0)
}

/// Indices of components that survive pruning at `eps`, with their
/// renormalized weights. The heaviest component always survives.
pub fn prune_weights(weights: &[f64], eps: f64) -> (Vec<usize>, Vec<f64>) {
    let mut keep: Vec<usize> = (0..weights.len()).filter(|&s| weights[s] > eps).collect();
    if keep.is_empty() {
        let heaviest = (0..weights.len())
            .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
            .expect("nonempty weights");
        keep.push(heaviest);
    }
    let total: f64 = keep.iter().map(|&s| weights[s]).sum();
    let w = keep
        .iter()
        .map(|&s| {
            if total > 0.0 {
                weights[s] / total
            } else {
                1.0 / keep.len() as f64
            }
        })
        .collect();
    (keep, w)
}

/// Drops components with weight `<= eps` and renormalizes the rest.
pub fn prune(q: &MixingDistribution, eps: f64) -> MixingDistribution {
    let (keep, w) = prune_weights(&q.weights(), eps);
    let components: Vec<Component> = keep
        .iter()
        .zip(&w)
        .map(|(&s, &wi)| Component {
            weight: wi,
            ..q.components[s].clone()
        })
        .collect();
    MixingDistribution {
        components,
        kernel: q.kernel.clone(),
    }
}
