//! EM iterations for the component locations and weights. Component
//! variances are held fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::mixture::{Component, Fit, MixingDistribution, ProbCache, PROB_FLOOR};

/// Components whose total responsibility is below this keep their location.
pub const MIN_RESPONSIBILITY: f64 = 1e-8;

/// Slack allowed on the EM ascent check.
pub const ASCENT_SLACK: f64 = 1e-10;

/// Responsibilities below this are dropped from the M-step objective.
const GAMMA_CUTOFF: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub n_em: usize,
    pub mstep_max_evals: usize,
    pub mstep_tol: f64,
    /// Initial simplex edge of the M-step optimizer.
    pub mstep_initial_step: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_em: 5,
            mstep_max_evals: 200,
            mstep_tol: 1e-6,
            mstep_initial_step: 0.1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_em == 0 || self.mstep_max_evals == 0 || !(self.mstep_tol > 0.0) || !(self.mstep_initial_step > 0.0) {
            return Err(Error::invalid("EM settings must be positive"));
        }
        Ok(())
    }
}

/// `gamma[s][i] = pi_s P[i,s] / sum_r pi_r P[i,r]`, stored by component.
pub fn e_step(columns: &[Vec<f64>], weights: &[f64]) -> Vec<Vec<f64>> {
    let n = columns.first().map_or(0, Vec::len);
    let mut mixed = vec![0.0; n];
    crate::mixture::mix_into(columns, weights, &mut mixed);
    columns
        .iter()
        .zip(weights)
        .map(|(col, &w)| {
            col.iter()
                .zip(&mixed)
                .map(|(p, m)| if w == 0.0 { 0.0 } else { w * p / m.max(PROB_FLOOR) })
                .collect()
        })
        .collect()
}

/// Result of a bounded Nelder-Mead maximization.
#[derive(Clone, Debug)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Maximizes `f` by Nelder-Mead from `x0` with initial edge `step`, stopping
/// once every vertex is within `tol` (max norm) of the best or after
/// `max_evals` evaluations. The returned value is never below `f(x0)`.
pub fn nelder_mead_max<F>(mut f: F, x0: &[f64], step: f64, max_evals: usize, tol: f64) -> Maximum
where
    F: FnMut(&[f64]) -> f64,
{
    let d = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for k in 0..d {
        if evals >= max_evals {
            break;
        }
        let mut x = x0.to_vec();
        x[k] += step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    if d == 0 || simplex.len() < d + 1 {
        let best = simplex.into_iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("x0");
        return Maximum {
            x: best.0,
            value: best.1,
            evals,
            converged: d == 0,
        };
    }

    let mut converged = false;
    loop {
        // best first
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if size <= tol {
            converged = true;
            break;
        }
        if evals >= max_evals {
            break;
        }
        let worst = simplex[d].clone();
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(x, _)| x[k]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr > simplex[0].1 {
            let xe = along(2.0);
            let fe = if evals < max_evals {
                eval(&xe, &mut evals)
            } else {
                f64::NEG_INFINITY
            };
            simplex[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > simplex[d - 1].1 {
            simplex[d] = (xr, fr);
            continue;
        }
        if evals >= max_evals {
            break;
        }
        let (xc, fc) = if fr > worst.1 {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc > worst.1.max(fr) {
            simplex[d] = (xc, fc);
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            if evals >= max_evals {
                break;
            }
            let x: Vec<f64> = best.iter().zip(&v.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
            let fx = eval(&x, &mut evals);
            *v = (x, fx);
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (x, value) = simplex.swap_remove(0);
    Maximum {
        x,
        value,
        evals,
        converged,
    }
}

/// Weighted kernel log-likelihood `n^-1 sum_i w_i log P(y_i | X_i; b, cov)`
/// over the listed observations.
fn weighted_loglik(
    data: &Dataset,
    kernel: &KernelSpec,
    obs: &[(usize, f64)],
    location: &[f64],
    cov_diag: &[f64],
) -> Result<f64> {
    let terms = obs
        .par_iter()
        .map(|&(i, g)| {
            let o = data.obs(i);
            kernel
                .prob(o.x, o.choice, location, cov_diag)
                .map(|p| g * p.max(PROB_FLOOR).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() / data.len() as f64)
}

/// Updates every component's location to maximize its responsibility-weighted
/// log-likelihood; variances and weights are untouched.
pub fn m_step(
    data: &Dataset,
    gamma: &[Vec<f64>],
    q: &MixingDistribution,
    cfg: &EmConfig,
) -> Result<MixingDistribution> {
    if gamma.len() != q.len() {
        return Err(Error::invalid("one responsibility column per component required"));
    }
    let kernel = &q.kernel;
    let locations = q
        .components
        .par_iter()
        .zip(gamma)
        .map(|(c, g)| update_location(data, kernel, c, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut out = q.clone();
    for (c, loc) in out.components.iter_mut().zip(locations) {
        c.location = loc;
    }
    Ok(out)
}

fn update_location(
    data: &Dataset,
    kernel: &KernelSpec,
    c: &Component,
    gamma: &[f64],
    cfg: &EmConfig,
) -> Result<Vec<f64>> {
    if gamma.iter().sum::<f64>() < MIN_RESPONSIBILITY {
        return Ok(c.location.clone());
    }
    let obs: Vec<(usize, f64)> = gamma
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > GAMMA_CUTOFF)
        .map(|(i, &g)| (i, g))
        .collect();
    let mut failure = None;
    let best = nelder_mead_max(
        |b| match weighted_loglik(data, kernel, &obs, b, &c.cov_diag) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        },
        &c.location,
        cfg.mstep_initial_step,
        cfg.mstep_max_evals,
        cfg.mstep_tol,
    );
    if let Some(e) = failure {
        if !best.value.is_finite() {
            return Err(e);
        }
    }
    Ok(best.x)
}

/// Output of [`em_run`]: the final fit and the log-likelihood before and after
/// every iteration.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub fit: Fit,
    pub ll_trace: Vec<f64>,
}

/// Runs `cfg.n_em` EM iterations from `q0`.
pub fn em_run(data: &Dataset, q0: MixingDistribution, cfg: &EmConfig) -> Result<EmRun> {
    em_run_fit(data, Fit::new(data, q0)?, cfg)
}

/// [`em_run`] starting from a fit whose cache is already built.
pub fn em_run_fit(data: &Dataset, mut fit: Fit, cfg: &EmConfig) -> Result<EmRun> {
    cfg.validate()?;
    let mut ll = fit.loglik();
    let mut ll_trace = vec![ll];
    for it in 0..cfg.n_em {
        let gamma = e_step(fit.cache.columns(), fit.cache.weights());
        let mut q = m_step(data, &gamma, &fit.q, cfg)?;
        let n = data.len() as f64;
        let w: Vec<f64> = gamma.iter().map(|g| g.iter().sum::<f64>() / n).collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / total).collect();
        q.set_weights(&w);

        // only moved components need new columns
        let columns = q
            .components
            .par_iter()
            .enumerate()
            .map(|(s, c)| {
                if c.location == fit.q.components[s].location {
                    Ok(fit.cache.column(s).to_vec())
                } else {
                    crate::mixture::probability_column(data, &q.kernel, &c.location, &c.cov_diag)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = ProbCache::from_columns(columns, w);
        let next = Fit { q, cache };
        let new_ll = next.loglik();
        if new_ll < ll - ASCENT_SLACK {
            return Err(Error::AscentViolation {
                before: ll,
                after: new_ll,
            });
        }
        log::trace!("EM iteration {it}: ll {ll:.10} -> {new_ll:.10}");
        fit = next;
        ll = new_ll;
        ll_trace.push(ll);
    }
    Ok(EmRun { fit, ll_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate_case, CaseId};
    use crate::kernel::Coef;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn e_step_single_component() {
        let g = e_step(&[vec![0.2, 0.7, 0.1]], &[1.0]);
        assert_eq!(g, vec![vec![1.0; 3]]);
    }

    #[test]
    fn e_step_symmetric_columns() {
        let col = vec![0.3, 0.4];
        let g = e_step(&vec![col; 4], &[0.25; 4]);
        for gs in &g {
            for &v in gs {
                assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn e_step_hand_instance() {
        // P = [[0.2, 0.6], [0.5, 0.1]], pi = (0.3, 0.7)
        let g = e_step(&[vec![0.2, 0.5], vec![0.6, 0.1]], &[0.3, 0.7]);
        assert_abs_diff_eq!(g[0][0], 0.06 / 0.48, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1][0], 0.42 / 0.48, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0][1], 0.15 / 0.22, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1][1], 0.07 / 0.22, epsilon = 1e-15);
        for i in 0..2 {
            assert_abs_diff_eq!(g[0][i] + g[1][i], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nelder_mead_finds_quadratic_peak() {
        let c = [0.7, -1.3];
        let m = nelder_mead_max(
            |b| -(b[0] - c[0]).powi(2) - (b[1] - c[1]).powi(2),
            &[0.0, 0.0],
            0.1,
            1000,
            1e-6,
        );
        assert!(m.converged);
        assert!(
            (m.x[0] - c[0]).abs() < 1e-6 && (m.x[1] - c[1]).abs() < 1e-6,
            "{:?}",
            m.x
        );

        let m = nelder_mead_max(|b| -(b[0] - 2.5).powi(2), &[0.0], 0.1, 200, 1e-6);
        assert!((m.x[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_respects_budget_and_start() {
        let f = |b: &[f64]| -(b[0] - 50.0).abs();
        let m = nelder_mead_max(f, &[0.0], 0.1, 10, 1e-9);
        assert!(m.evals <= 10);
        assert!(m.value >= f(&[0.0]));
    }

    fn logit_data(n: usize, beta: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = crate::kernel::mnl_prob(&row.iter().map(|v| beta * v).collect::<Vec<_>>()).unwrap();
            let u: f64 = rng.gen();
            let choice = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            x.extend(row);
            y.push(choice);
        }
        Dataset::new(3, x, y, None).unwrap()
    }

    #[test]
    fn single_component_logit_matches_grid_mle() {
        let data = logit_data(100, 0.8, 3);
        let kernel = KernelSpec::logit(3, vec![Coef::Slope], vec![(Coef::Asc(1), 0.0), (Coef::Asc(2), 0.0)]).unwrap();
        let q = MixingDistribution::new(vec![Component::point(vec![0.0], 1.0)], kernel.clone()).unwrap();
        let gamma = vec![vec![1.0; 100]];
        let cfg = EmConfig::default();
        let updated = m_step(&data, &gamma, &q, &cfg).unwrap();

        let ll = |b: f64| {
            data.iter()
                .map(|o| kernel.prob(o.x, o.choice, &[b], &[0.0]).unwrap().ln())
                .sum::<f64>()
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=60_000 {
            let b = -3.0 + k as f64 * 1e-4;
            let v = ll(b);
            if v > best.0 {
                best = (v, b);
            }
        }
        assert!((updated.components[0].location[0] - best.1).abs() < 1e-3);
    }

    #[test]
    fn concentrated_responsibilities() {
        let data = logit_data(60, 1.0, 4);
        let kernel = KernelSpec::logit(3, vec![Coef::Slope], vec![(Coef::Asc(1), 0.0), (Coef::Asc(2), 0.0)]).unwrap();
        let q = MixingDistribution::new(
            vec![Component::point(vec![0.0], 0.5), Component::point(vec![-2.0], 0.5)],
            kernel,
        )
        .unwrap();
        let gamma = vec![vec![1.0; 60], vec![0.0; 60]];
        let updated = m_step(&data, &gamma, &q, &EmConfig::default()).unwrap();
        assert_eq!(updated.components[1].location, vec![-2.0]);
        assert!(updated.components[0].location[0] > 0.3);
    }

    #[test]
    fn fixed_point_is_stable() {
        let data = logit_data(100, 0.8, 5);
        let kernel = KernelSpec::logit(3, vec![Coef::Slope], vec![(Coef::Asc(1), 0.0), (Coef::Asc(2), 0.0)]).unwrap();
        let q = MixingDistribution::new(vec![Component::point(vec![0.0], 1.0)], kernel).unwrap();
        let first = em_run(
            &data,
            q,
            &EmConfig {
                n_em: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let b = first.fit.q.components[0].location[0];
        let again = em_run(
            &data,
            first.fit.q.clone(),
            &EmConfig {
                n_em: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((again.fit.q.components[0].location[0] - b).abs() < 1e-5);
        assert_eq!(again.fit.q.components[0].weight, 1.0);
    }

    #[test]
    fn case_1a_weights_recovered() {
        let (data, _) = simulate_case(CaseId::C1a, 500, 11).unwrap();
        let kernel = CaseId::C1a.kernel(CaseId::C1a.error_cov()).unwrap();
        let q0 = MixingDistribution::new(
            vec![Component::point(vec![0.8], 0.5), Component::point(vec![-1.2], 0.5)],
            kernel,
        )
        .unwrap();
        let run = em_run(&data, q0, &EmConfig::default()).unwrap();
        for w in run.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - ASCENT_SLACK);
        }
        let w = run.fit.q.weights();
        assert!((w[0] - 0.75).abs() <= 0.05 && (w[1] - 0.25).abs() <= 0.05, "{w:?}");
    }
}
