//! Performance measures of an estimated mixing distribution against the
//! generating one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrueMixing};
use crate::error::{Error, Result};
use crate::kernel::norm_cdf;
use crate::mixture::{mean_log, MixingDistribution, ProbCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `ll_n(Q_hat) - ll_n(Q0)`; negative values indicate an optimization problem.
    pub ll_gap: f64,
    pub prob_mae: f64,
    /// L1 distance between the mixing CDFs on the evaluation grid.
    pub cdf_dist: f64,
    /// Largest absolute CDF difference on the same grid.
    pub cdf_ks: f64,
    /// Grid step used for the CDF distances.
    pub cdf_step: f64,
    /// Error of the estimated probability of a negative slope (slope cases).
    pub pct_neg_err: Option<f64>,
    /// Norm of the error in the mixing mean (ASC cases).
    pub mean_err_norm: Option<f64>,
}

/// Generating probabilities of the observed choices: the stored ones when
/// present, otherwise recomputed from `truth`.
pub fn true_probs(data: &Dataset, truth: &TrueMixing) -> Result<Vec<f64>> {
    if let Some(p) = data.true_prob() {
        return Ok(p.to_vec());
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let o = data.obs(i);
            truth.choice_prob(o.x, o.choice)
        })
        .collect()
}

fn estimated_probs(data: &Dataset, q: &MixingDistribution) -> Result<Vec<f64>> {
    Ok(ProbCache::build(data, q)?.mixed().to_vec())
}

/// Scaled log-likelihood of `q` minus that of the generating process.
pub fn ll_gap(data: &Dataset, q: &MixingDistribution, truth: &TrueMixing) -> Result<f64> {
    let p0 = true_probs(data, truth)?;
    Ok(mean_log(&estimated_probs(data, q)?) - mean_log(&p0))
}

/// Mean absolute difference between estimated and generating probabilities
/// of the chosen alternatives.
pub fn prob_mae(data: &Dataset, q: &MixingDistribution, truth: &TrueMixing) -> Result<f64> {
    let p0 = true_probs(data, truth)?;
    Ok(prob_mae_from(&estimated_probs(data, q)?, &p0))
}

pub fn prob_mae_from(estimated: &[f64], truth: &[f64]) -> f64 {
    estimated.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64
}

/// Joint CDF of the mixture at `z`; diagonal Gaussian components factor per
/// coordinate, point masses are indicators.
pub fn mixture_cdf(q: &MixingDistribution, z: &[f64]) -> f64 {
    q.components
        .iter()
        .map(|c| {
            c.weight
                * c.location
                    .iter()
                    .zip(&c.cov_diag)
                    .zip(z)
                    .map(|((&b, &v), &zk)| {
                        if v == 0.0 {
                            if b <= zk {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            norm_cdf((zk - b) / v.sqrt())
                        }
                    })
                    .product::<f64>()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdfDistance {
    pub l1: f64,
    pub ks: f64,
    pub step: f64,
}

/// Grid over `[-4, 4]^d`: step 0.01 in one dimension, 0.05 otherwise.
fn cdf_grid(d: usize) -> (usize, f64) {
    if d == 1 {
        (100, 0.01)
    } else {
        (20, 0.05)
    }
}

/// L1 and sup distances between two CDFs on the evaluation grid, with the L1
/// sum weighted by the bin volume.
pub fn cdf_distance_fn<F, G>(d: usize, f: F, g: G) -> CdfDistance
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    let (per_unit, step) = cdf_grid(d);
    let half = 4 * per_unit;
    let side = 2 * half + 1;
    let coord = |k: usize| (k as f64 - half as f64) / per_unit as f64;
    // one task per value of the first coordinate; sums are combined in order
    let rows: Vec<(f64, f64)> = (0..side)
        .into_par_iter()
        .map(|k0| {
            let mut z = vec![coord(k0); d];
            let inner = side.pow(d as u32 - 1);
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for mut idx in 0..inner {
                for zk in z.iter_mut().skip(1).rev() {
                    *zk = coord(idx % side);
                    idx /= side;
                }
                let diff = (f(&z) - g(&z)).abs();
                sum += diff;
                max = max.max(diff);
            }
            (sum, max)
        })
        .collect();
    let volume = step.powi(d as i32);
    let l1 = rows.iter().map(|r| r.0).sum::<f64>() * volume;
    let ks = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    CdfDistance { l1, ks, step }
}

pub fn cdf_dist(q: &MixingDistribution, truth: &TrueMixing) -> Result<CdfDistance> {
    if q.dim() != truth.dim() {
        return Err(Error::invalid("estimate and truth have different dimensions"));
    }
    Ok(cdf_distance_fn(q.dim(), |z| mixture_cdf(q, z), |z| truth.cdf(z)))
}

/// Mass of `q` with coordinate `k` negative.
pub fn pct_negative(q: &MixingDistribution, k: usize) -> f64 {
    q.components
        .iter()
        .map(|c| {
            let (b, v) = (c.location[k], c.cov_diag[k]);
            let p = if v == 0.0 {
                if b < 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                norm_cdf(-b / v.sqrt())
            };
            c.weight * p
        })
        .sum()
}

/// Euclidean norm of the difference between the mixture mean and `mean`.
pub fn mean_err_norm(q: &MixingDistribution, mean: &[f64]) -> f64 {
    q.mean()
        .iter()
        .zip(mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// All measures for one estimate.
pub fn evaluate(data: &Dataset, q: &MixingDistribution, truth: &TrueMixing) -> Result<MetricsReport> {
    let p0 = true_probs(data, truth)?;
    let p_hat = estimated_probs(data, q)?;
    let cdf = cdf_dist(q, truth)?;
    let slope_case = truth.dim() == 1;
    Ok(MetricsReport {
        ll_gap: mean_log(&p_hat) - mean_log(&p0),
        prob_mae: prob_mae_from(&p_hat, &p0),
        cdf_dist: cdf.l1,
        cdf_ks: cdf.ks,
        cdf_step: cdf.step,
        pct_neg_err: slope_case.then(|| (pct_negative(q, 0) - truth.pct_negative(0)).abs()),
        mean_err_norm: (!slope_case).then(|| mean_err_norm(q, &truth.mean())),
    })
}
