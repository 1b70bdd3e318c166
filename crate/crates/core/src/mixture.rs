//! Mixing distributions, the per-observation probability cache, the scaled
//! log-likelihood and the directional derivative `D(beta; Q)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

/// Floor applied to probabilities inside logarithms and ratio denominators.
pub const PROB_FLOOR: f64 = 1e-300;

/// Weights must sum to one within this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// One mixture component: a point mass (all-zero `cov_diag`) or a normal
/// distribution with diagonal covariance over the mixed coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub location: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub weight: f64,
}

impl Component {
    pub fn point(location: Vec<f64>, weight: f64) -> Self {
        let d = location.len();
        Self {
            location,
            cov_diag: vec![0.0; d],
            weight,
        }
    }

    pub fn gaussian(location: Vec<f64>, cov_diag: Vec<f64>, weight: f64) -> Self {
        Self {
            location,
            cov_diag,
            weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn is_point_mass(&self) -> bool {
        self.cov_diag.iter().all(|&c| c == 0.0)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.location.len() != dim || self.cov_diag.len() != dim {
            return Err(Error::invalid(format!(
                "component dimension {} does not match {dim}",
                self.location.len()
            )));
        }
        if self.location.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("component location"));
        }
        if self.cov_diag.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::invalid("component variances must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::invalid(format!(
                "component weight {} outside [0, 1]",
                self.weight
            )));
        }
        Ok(())
    }
}

/// A finite mixture `Q` of components together with the choice kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixingRepr")]
pub struct MixingDistribution {
    pub components: Vec<Component>,
    pub kernel: KernelSpec,
}

#[derive(Deserialize)]
struct MixingRepr {
    components: Vec<Component>,
    kernel: KernelSpec,
}

impl TryFrom<MixingRepr> for MixingDistribution {
    type Error = Error;
    fn try_from(r: MixingRepr) -> Result<Self> {
        MixingDistribution::new(r.components, r.kernel)
    }
}

impl MixingDistribution {
    pub fn new(components: Vec<Component>, kernel: KernelSpec) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixing distribution needs at least one component"));
        }
        let d = kernel.mixed_dim();
        for c in &components {
            c.validate(d)?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { components, kernel })
    }

    /// Builds a distribution, rescaling weights to sum to one.
    pub fn normalized(mut components: Vec<Component>, kernel: KernelSpec) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("weights must have a positive finite sum"));
        }
        components.iter_mut().for_each(|c| c.weight /= total);
        Self::new(components, kernel)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kernel.mixed_dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        debug_assert_eq!(w.len(), self.components.len());
        for (c, &wi) in self.components.iter_mut().zip(w) {
            c.weight = wi;
        }
    }

    /// Mixture mean of the mixed coefficients.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (mk, bk) in m.iter_mut().zip(&c.location) {
                *mk += c.weight * bk;
            }
        }
        m
    }

    /// Component count against the `n + 1` support bound: warns above it and
    /// fails above twice that.
    pub fn check_cap(&self, n_obs: usize) -> Result<()> {
        let soft = n_obs + 1;
        if self.len() > 2 * soft {
            return Err(Error::TooManyComponents {
                count: self.len(),
                cap: 2 * soft,
            });
        }
        if self.len() > soft {
            log::warn!("{} components exceed the n + 1 = {soft} support bound", self.len());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Probability of each observed choice under a single component.
pub fn component_prob(data: &Dataset, i: usize, kernel: &KernelSpec, c: &Component) -> Result<f64> {
    let o = data.obs(i);
    kernel.prob(o.x, o.choice, &c.location, &c.cov_diag)
}

/// Column of probabilities `p(y_i | X_i; location, cov)` over all
/// observations, floored at [`PROB_FLOOR`].
pub fn probability_column(data: &Dataset, kernel: &KernelSpec, location: &[f64], cov_diag: &[f64]) -> Result<Vec<f64>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let o = data.obs(i);
            kernel
                .prob(o.x, o.choice, location, cov_diag)
                .map(|p| p.max(PROB_FLOOR))
                .map_err(|e| Error::Kernel {
                    obs: i,
                    component: 0,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Per-observation, per-component choice probabilities (stored by component)
/// and the mixed probabilities `sum_s pi_s P[i, s]`.
#[derive(Clone, Debug)]
pub struct ProbCache {
    columns: Vec<Vec<f64>>,
    weights: Vec<f64>,
    mixed: Vec<f64>,
    floored: usize,
}

impl ProbCache {
    pub fn build(data: &Dataset, q: &MixingDistribution) -> Result<Self> {
        let columns = q
            .components
            .par_iter()
            .enumerate()
            .map(|(s, c)| {
                probability_column(data, &q.kernel, &c.location, &c.cov_diag).map_err(|e| match e {
                    Error::Kernel { obs, source, .. } => Error::Kernel {
                        obs,
                        component: s,
                        source,
                    },
                    e => e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_columns(columns, q.weights()))
    }

    /// Cache from precomputed columns (each of length n, entries in (0, 1]).
    pub fn from_columns(columns: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        assert_eq!(columns.len(), weights.len());
        let n = columns.first().map_or(0, Vec::len);
        let floored = columns
            .iter()
            .flat_map(|c| c.iter())
            .filter(|&&p| p <= PROB_FLOOR)
            .count();
        let mut cache = Self {
            columns,
            weights,
            mixed: vec![0.0; n],
            floored,
        };
        cache.refresh_mixed();
        cache
    }

    fn refresh_mixed(&mut self) {
        mix_into(&self.columns, &self.weights, &mut self.mixed);
    }

    pub fn n_obs(&self) -> usize {
        self.mixed.len()
    }

    pub fn n_components(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, s: usize) -> &[f64] {
        &self.columns[s]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `p(y_i | X_i; Q)` for every observation.
    pub fn mixed(&self) -> &[f64] {
        &self.mixed
    }

    /// Number of kernel probabilities that hit the floor.
    pub fn floored(&self) -> usize {
        self.floored
    }

    /// Weight changes only need the mixed vector recomputed.
    pub fn set_weights(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.columns.len());
        self.weights.copy_from_slice(w);
        self.refresh_mixed();
    }

    pub fn replace_column(&mut self, s: usize, col: Vec<f64>) {
        assert_eq!(col.len(), self.n_obs());
        self.floored += col.iter().filter(|&&p| p <= PROB_FLOOR).count();
        self.columns[s] = col;
        self.refresh_mixed();
    }

    /// Appends a component with mass `alpha`, scaling existing weights by `1 - alpha`.
    pub fn push_scaled(&mut self, col: Vec<f64>, alpha: f64) {
        assert_eq!(col.len(), self.n_obs());
        self.floored += col.iter().filter(|&&p| p <= PROB_FLOOR).count();
        for w in &mut self.weights {
            *w *= 1.0 - alpha;
        }
        for (m, p) in self.mixed.iter_mut().zip(&col) {
            *m = (1.0 - alpha) * *m + alpha * p;
        }
        self.columns.push(col);
        self.weights.push(alpha);
    }

    /// Appends zero-weight columns.
    pub fn extend_zero(&mut self, cols: Vec<Vec<f64>>) {
        for col in cols {
            assert_eq!(col.len(), self.n_obs());
            self.columns.push(col);
            self.weights.push(0.0);
        }
    }

    /// Keeps only the listed components (in order) and sets their weights.
    pub fn retain(&mut self, keep: &[usize], weights: &[f64]) {
        assert_eq!(keep.len(), weights.len());
        let mut cols = std::mem::take(&mut self.columns);
        self.columns = keep.iter().map(|&s| std::mem::take(&mut cols[s])).collect();
        self.weights = weights.to_vec();
        self.refresh_mixed();
    }
}

/// `out[i] = sum_s w_s cols[s][i]`, summed in component order.
pub(crate) fn mix_into(cols: &[Vec<f64>], w: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|m| *m = 0.0);
    for (col, &ws) in cols.iter().zip(w) {
        if ws == 0.0 {
            continue;
        }
        for (m, p) in out.iter_mut().zip(col) {
            *m += ws * p;
        }
    }
}

/// `n^-1 sum_i log p_i` with the probability floor.
pub fn mean_log(p: &[f64]) -> f64 {
    p.iter().map(|&v| v.max(PROB_FLOOR).ln()).sum::<f64>() / p.len() as f64
}

/// Scaled log-likelihood `n^-1 sum_i log p(y_i | X_i; Q)`.
pub fn scaled_loglik(cache: &ProbCache) -> f64 {
    mean_log(cache.mixed())
}

/// `n^-1 sum_i (p_i / mixed_i - 1)`.
pub fn d_from_column(col: &[f64], mixed: &[f64]) -> f64 {
    let n = mixed.len() as f64;
    col.iter().zip(mixed).map(|(p, m)| p / m.max(PROB_FLOOR)).sum::<f64>() / n - 1.0
}

/// Directional derivative of the scaled log-likelihood at `Q` towards a
/// candidate component, with the candidate's probabilities for reuse.
#[derive(Clone, Debug)]
pub struct GradientEval {
    pub d: f64,
    pub probs: Vec<f64>,
}

/// `D(beta; Q) = n^-1 sum_i (p(y_i|X_i; beta) / p(y_i|X_i; Q) - 1)`, with the
/// candidate evaluated at its own `cov_diag` (zero for a point mass).
pub fn gradient_d(
    location: &[f64],
    cov_diag: &[f64],
    q: &MixingDistribution,
    cache: &ProbCache,
    data: &Dataset,
) -> Result<GradientEval> {
    let probs = probability_column(data, &q.kernel, location, cov_diag)?;
    let d = d_from_column(&probs, cache.mixed());
    Ok(GradientEval { d, probs })
}

/// First-order optimality summary of a fitted mixture.
#[derive(Clone, Debug, Serialize)]
pub struct OptimalityReport {
    /// Largest `D` over the probe points.
    pub max_d: f64,
    pub argmax: Vec<f64>,
    /// `D(beta_s; Q)` for every component.
    pub support_d: Vec<f64>,
    /// Largest `|D|` over components with weight above the activity threshold.
    pub max_abs_support_d: f64,
    pub tol: f64,
}

impl OptimalityReport {
    pub fn is_optimal(&self) -> bool {
        self.max_d <= self.tol && self.max_abs_support_d <= self.tol
    }
}

/// Checks `D(beta; Q) <= tol` on the probe points and `|D(beta_s; Q)| <= tol`
/// at every support point with weight above `active_tol`.
pub fn check_optimality(
    q: &MixingDistribution,
    data: &Dataset,
    probes: &[Vec<f64>],
    probe_cov: &[f64],
    active_tol: f64,
    tol: f64,
) -> Result<OptimalityReport> {
    let cache = ProbCache::build(data, q)?;
    let support_d: Vec<f64> = cache
        .columns()
        .iter()
        .map(|c| d_from_column(c, cache.mixed()))
        .collect();
    let max_abs_support_d = support_d
        .iter()
        .zip(&q.components)
        .filter(|(_, c)| c.weight > active_tol)
        .map(|(d, _)| d.abs())
        .fold(0.0, f64::max);
    let probe_d = probes
        .iter()
        .map(|b| gradient_d(b, probe_cov, q, &cache, data).map(|g| g.d))
        .collect::<Result<Vec<_>>>()?;
    let (max_d, argmax) = probe_d
        .iter()
        .zip(probes)
        .fold((f64::NEG_INFINITY, Vec::new()), |(best, arg), (&d, b)| {
            if d > best {
                (d, b.clone())
            } else {
                (best, arg)
            }
        });
    Ok(OptimalityReport {
        max_d,
        argmax,
        support_d,
        max_abs_support_d,
        tol,
    })
}

/// A mixture with its probability cache kept in sync.
#[derive(Clone, Debug)]
pub struct Fit {
    pub q: MixingDistribution,
    pub cache: ProbCache,
}

impl Fit {
    pub fn new(data: &Dataset, q: MixingDistribution) -> Result<Self> {
        let cache = ProbCache::build(data, &q)?;
        Ok(Self { q, cache })
    }

    pub fn loglik(&self) -> f64 {
        scaled_loglik(&self.cache)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        self.q.set_weights(w);
        self.cache.set_weights(w);
    }

    /// Adds a component with mass `alpha`, rescaling the others by `1 - alpha`.
    pub fn add(&mut self, mut c: Component, probs: Vec<f64>, alpha: f64) {
        for existing in &mut self.q.components {
            existing.weight *= 1.0 - alpha;
        }
        c.weight = alpha;
        self.q.components.push(c);
        self.cache.push_scaled(probs, alpha);
    }

    /// Appends zero-weight components whose columns are already known.
    pub fn extend_zero(&mut self, comps: Vec<Component>, cols: Vec<Vec<f64>>) {
        for mut c in comps {
            c.weight = 0.0;
            self.q.components.push(c);
        }
        self.cache.extend_zero(cols);
    }

    /// Keeps the listed components with the given weights.
    pub fn retain(&mut self, keep: &[usize], weights: &[f64]) {
        let mut comps = std::mem::take(&mut self.q.components);
        self.q.components = keep
            .iter()
            .zip(weights)
            .map(|(&s, &w)| {
                let mut c = std::mem::replace(&mut comps[s], Component::point(Vec::new(), 0.0));
                c.weight = w;
                c
            })
            .collect();
        self.cache.retain(keep, weights);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Coef, KernelSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn kernel() -> KernelSpec {
        KernelSpec::probit(
            DMatrix::identity(3, 3),
            vec![Coef::Slope],
            vec![(Coef::Asc(1), 0.0), (Coef::Asc(2), 0.0)],
        )
        .unwrap()
    }

    fn toy() -> Dataset {
        Dataset::new(
            3,
            vec![1.0, -0.5, 0.2, -2.0, 0.3, 1.1, 0.4, 0.4, -1.6],
            vec![0, 2, 1],
            None,
        )
        .unwrap()
    }

    #[test]
    fn weights_must_sum_to_one() {
        let k = kernel();
        assert!(MixingDistribution::new(vec![Component::point(vec![1.0], 0.6)], k.clone()).is_err());
        let q = MixingDistribution::normalized(
            vec![Component::point(vec![1.0], 3.0), Component::point(vec![0.0], 1.0)],
            k,
        )
        .unwrap();
        assert_abs_diff_eq!(q.components[0].weight, 0.75);
    }

    #[test]
    fn single_component_cache() {
        let d = toy();
        let q = MixingDistribution::new(vec![Component::point(vec![0.7], 1.0)], kernel()).unwrap();
        let cache = ProbCache::build(&d, &q).unwrap();
        for i in 0..d.len() {
            assert_eq!(cache.mixed()[i], cache.column(0)[i]);
        }
    }

    #[test]
    fn duplicate_components_collapse() {
        let d = toy();
        let one = MixingDistribution::new(vec![Component::point(vec![0.7], 1.0)], kernel()).unwrap();
        let two = MixingDistribution::new(
            vec![Component::point(vec![0.7], 0.3), Component::point(vec![0.7], 0.7)],
            kernel(),
        )
        .unwrap();
        let a = ProbCache::build(&d, &one).unwrap();
        let b = ProbCache::build(&d, &two).unwrap();
        for i in 0..d.len() {
            assert_abs_diff_eq!(a.mixed()[i], b.mixed()[i], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(scaled_loglik(&a), scaled_loglik(&b), epsilon = 1e-15);
    }

    #[test]
    fn toy_mixture_matches_hand_combination() {
        let d = toy();
        let q = MixingDistribution::new(
            vec![Component::point(vec![1.0], 0.25), Component::point(vec![-1.0], 0.75)],
            kernel(),
        )
        .unwrap();
        let cache = ProbCache::build(&d, &q).unwrap();
        let k = kernel();
        let mut ll = 0.0;
        for i in 0..3 {
            let o = d.obs(i);
            let p1 = k.prob(o.x, o.choice, &[1.0], &[0.0]).unwrap();
            let p2 = k.prob(o.x, o.choice, &[-1.0], &[0.0]).unwrap();
            let m = 0.25 * p1 + 0.75 * p2;
            assert_abs_diff_eq!(cache.mixed()[i], m, epsilon = 1e-15);
            ll += m.ln();
        }
        assert_abs_diff_eq!(scaled_loglik(&cache), ll / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_probabilities_give_log_third() {
        let cache = ProbCache::from_columns(vec![vec![1.0 / 3.0; 7]], vec![1.0]);
        assert_abs_diff_eq!(scaled_loglik(&cache), (1.0f64 / 3.0).ln(), epsilon = 1e-15);
        let cache = ProbCache::from_columns(vec![vec![0.5]], vec![1.0]);
        assert_abs_diff_eq!(scaled_loglik(&cache), 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn gradient_at_sole_support_point_is_zero() {
        let d = toy();
        let q = MixingDistribution::new(vec![Component::point(vec![0.4], 1.0)], kernel()).unwrap();
        let cache = ProbCache::build(&d, &q).unwrap();
        let g = gradient_d(&[0.4], &[0.0], &q, &cache, &d).unwrap();
        assert_abs_diff_eq!(g.d, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_two_obs_hand_value() {
        // P = [[0.2, 0.6], [0.5, 0.1]], uniform weights, candidate = column 0
        let cache = ProbCache::from_columns(vec![vec![0.2, 0.5], vec![0.6, 0.1]], vec![0.5, 0.5]);
        let d = d_from_column(cache.column(0), cache.mixed());
        let expected = 0.5 * (0.2 / 0.4 + 0.5 / 0.3) - 1.0;
        assert_abs_diff_eq!(d, expected, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let d = toy();
        let q = MixingDistribution::new(
            vec![Component::point(vec![1.2], 0.4), Component::point(vec![-0.8], 0.6)],
            kernel(),
        )
        .unwrap();
        let cache = ProbCache::build(&d, &q).unwrap();
        let g = gradient_d(&[0.1], &[0.0], &q, &cache, &d).unwrap();
        let ll = |a: f64| {
            let m: Vec<f64> = cache
                .mixed()
                .iter()
                .zip(&g.probs)
                .map(|(m, p)| (1.0 - a) * m + a * p)
                .collect();
            mean_log(&m)
        };
        let h = 1e-6;
        let fd = (ll(h) - ll(-h)) / (2.0 * h);
        assert!((fd - g.d).abs() <= 1e-4 * g.d.abs().max(1e-3), "{fd} vs {}", g.d);
    }

    #[test]
    fn optimality_flags_perturbed_weights() {
        let d = toy();
        let q = MixingDistribution::new(
            vec![Component::point(vec![2.0], 0.5), Component::point(vec![-2.0], 0.5)],
            kernel(),
        )
        .unwrap();
        let rep = check_optimality(&q, &d, &[vec![0.0]], &[0.0], 1e-3, 1e-6).unwrap();
        assert!(!rep.is_optimal());
        assert!(rep.max_abs_support_d > 1e-6);
    }

    #[test]
    fn mixing_json_round_trip() {
        let q = MixingDistribution::new(
            vec![
                Component::gaussian(vec![0.5], vec![0.1], 0.25),
                Component::point(vec![-1.0], 0.75),
            ],
            kernel(),
        )
        .unwrap();
        let back = MixingDistribution::from_json(&q.to_json().unwrap()).unwrap();
        assert_eq!(q, back);
        let bad = q.to_json().unwrap().replace("0.75", "0.5");
        assert!(MixingDistribution::from_json(&bad).is_err());
    }

    #[test]
    fn cap_is_enforced() {
        let comps = (0..9).map(|i| Component::point(vec![i as f64], 1.0 / 9.0)).collect();
        let q = MixingDistribution::new(comps, kernel()).unwrap();
        assert!(q.check_cap(5).is_ok());
        assert!(matches!(q.check_cap(3), Err(Error::TooManyComponents { .. })));
    }
}
