//! Choice-probability kernels.
//!
//! Utilities follow `U_j = x_j * beta + alpha_j + e_j` with `alpha_1 = 0`.
//! The multinomial logit kernel is closed form; the multinomial probit kernel
//! is evaluated exactly for two and three alternatives through the univariate
//! and bivariate normal CDF. A Gaussian mixing component over the utility
//! coefficients is absorbed into the probit error covariance, so a normal
//! component costs the same as a point mass.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Relative tolerance used when testing covariance matrices for definiteness.
const PD_TOL: f64 = 1e-10;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (TWO_PI).sqrt()
}

/// Softmax of the utilities.
pub fn mnl_prob(utilities: &[f64]) -> Result<Vec<f64>> {
    if utilities.is_empty() {
        return Err(Error::invalid("empty utility vector"));
    }
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite("utilities"));
    }
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = utilities.iter().map(|u| (u - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

// Gauss-Legendre half-rules on [-1, 1]: (weight, abscissa) for n = 6, 12, 20.
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, 0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, 0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, 0.238_619_186_083_197),
];

const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, 0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, 0.904_117_256_370_475),
    (0.160_078_328_543_346_4, 0.769_902_674_194_305),
    (0.203_167_426_723_065_9, 0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, 0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, 0.125_233_408_511_469_2),
];

const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, 0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, 0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, 0.912_234_428_251_326),
    (0.083_276_741_576_704_75, 0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, 0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, 0.636_053_680_726_515),
    (0.131_688_638_449_176_6, 0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, 0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, 0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, 0.076_526_521_133_497_33),
];

/// Twenty-point Gauss-Legendre rule on [-1, 1] as `(weight, node)` pairs.
pub(crate) fn gauss_legendre_20() -> impl Iterator<Item = (f64, f64)> {
    GL20.iter().flat_map(|&(w, x)| [(w, -x), (w, x)].into_iter())
}

/// `P(Z1 <= h, Z2 <= k)` for a standard bivariate normal with correlation `rho`.
///
/// Drezner-Wesolowsky with Genz's double-precision refinements; about 1e-15
/// absolute accuracy. Infinite limits and `rho = +-1` are handled exactly.
pub fn bvn_cdf(h: f64, k: f64, rho: f64) -> Result<f64> {
    if h.is_nan() || k.is_nan() || rho.is_nan() {
        return Err(Error::NonFinite("bvn_cdf arguments"));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("correlation {rho} outside [-1, 1]")));
    }
    Ok(bvn_cdf_unchecked(h, k, rho))
}

pub(crate) fn bvn_cdf_unchecked(h: f64, k: f64, rho: f64) -> f64 {
    if rho == 1.0 {
        return norm_cdf(h.min(k));
    }
    if rho == -1.0 {
        // P(-k <= Z <= h)
        return if h > -k {
            (norm_cdf(h) - norm_cdf(-k)).max(0.0)
        } else {
            0.0
        };
    }
    bvn_upper(-h, -k, rho)
}

/// Upper orthant `P(Z1 > dh, Z2 > dk)`, |r| < 1.
fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    if dh == f64::INFINITY || dk == f64::INFINITY {
        return 0.0;
    }
    if dh == f64::NEG_INFINITY {
        return if dk == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-dk) };
    }
    if dk == f64::NEG_INFINITY {
        return norm_cdf(-dh);
    }
    if r == 0.0 {
        return norm_cdf(-dh) * norm_cdf(-dk);
    }

    let rule: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin() / 2.0;
        for &(w, x) in rule {
            for node in [1.0 - x, 1.0 + x] {
                let sn = (asr * node).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / TWO_PI + norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        let a_sq = (1.0 - r) * (1.0 + r);
        let mut a = a_sq.sqrt();
        let b_sq = (h - k) * (h - k);
        let asr = -(b_sq / a_sq + hk) / 2.0;
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 80.0;
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (b_sq - a_sq) * (1.0 - d * b_sq) / 3.0 + c * d * a_sq * a_sq);
        }
        if hk > -100.0 {
            let b = b_sq.sqrt();
            let sp = TWO_PI.sqrt() * norm_cdf(-b / a);
            bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * b_sq * (1.0 - d * b_sq) / 3.0);
        }
        a /= 2.0;
        let mut sum = 0.0;
        for &(w, x) in rule {
            for node in [1.0 - x, 1.0 + x] {
                let xs = (a * node) * (a * node);
                let asr = -(b_sq / xs + hk) / 2.0;
                if asr > -100.0 {
                    let sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                    let rs = (1.0 - xs).sqrt();
                    let ep = (-(hk / 2.0) * xs / ((1.0 + rs) * (1.0 + rs))).exp() / rs;
                    sum += w * asr.exp() * (ep - sp);
                }
            }
        }
        bvn = -(a * sum + bvn) / TWO_PI;

        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let l = if h < 0.0 {
                norm_cdf(k) - norm_cdf(h)
            } else {
                norm_cdf(-h) - norm_cdf(-k)
            };
            bvn = l - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

fn check_square(sigma: &DMatrix<f64>, j: usize) -> Result<()> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::invalid("covariance matrix is not square"));
    }
    if j >= sigma.nrows() {
        return Err(Error::invalid(format!(
            "alternative {j} out of range for {} alternatives",
            sigma.nrows()
        )));
    }
    Ok(())
}

/// Symmetrizes and Cholesky-factors `sigma`, failing when it is not
/// positive definite.
pub(crate) fn check_positive_definite(sigma: &DMatrix<f64>) -> Result<()> {
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix"));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let scale = sym.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let chol = sym.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let min_pivot = chol.l().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min_pivot * min_pivot <= PD_TOL * scale.max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(())
}

/// Probit probability that alternative `j` (0-based) has the highest utility
/// when `U = v + e`, `e ~ N(0, sigma)`. Supports two and three alternatives.
pub fn mnp_prob(v: &[f64], sigma: &DMatrix<f64>, j: usize) -> Result<f64> {
    check_square(sigma, j)?;
    if v.len() != sigma.nrows() {
        return Err(Error::invalid("utility and covariance dimensions differ"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("systematic utilities"));
    }
    check_positive_definite(sigma)?;
    match v.len() {
        2 => {
            let s = [[sigma[(0, 0)], sigma[(0, 1)]], [sigma[(1, 0)], sigma[(1, 1)]]];
            mnp2(&[v[0], v[1]], &s, j)
        }
        3 => {
            let mut s = [[0.0; 3]; 3];
            for (r, row) in s.iter_mut().enumerate() {
                for (c, e) in row.iter_mut().enumerate() {
                    *e = sigma[(r, c)];
                }
            }
            mnp3(&[v[0], v[1], v[2]], &s, j)
        }
        1 => Ok(1.0),
        n => Err(Error::Unsupported(format!(
            "probit kernel with {n} alternatives (only 2 or 3 are evaluated exactly)"
        ))),
    }
}

fn mnp2(v: &[f64; 2], s: &[[f64; 2]; 2], j: usize) -> Result<f64> {
    let o = 1 - j;
    let var = s[o][o] + s[j][j] - s[o][j] - s[j][o];
    if var <= PD_TOL * (s[0][0].abs() + s[1][1].abs()).max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(norm_cdf((v[j] - v[o]) / var.sqrt()))
}

/// Three-alternative probit through the bivariate normal CDF of the two
/// utility differences `U_k - U_j`.
fn mnp3(v: &[f64; 3], s: &[[f64; 3]; 3], j: usize) -> Result<f64> {
    let sym = |p: usize, q: usize| 0.5 * (s[p][q] + s[q][p]);
    let (a, b) = match j {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let c11 = sym(a, a) - 2.0 * sym(a, j) + sym(j, j);
    let c22 = sym(b, b) - 2.0 * sym(b, j) + sym(j, j);
    let c12 = sym(a, b) - sym(a, j) - sym(b, j) + sym(j, j);
    if !(c11 > 0.0 && c22 > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let det = c11 * c22 - c12 * c12;
    if det <= PD_TOL * c11 * c22 {
        return Err(Error::NotPositiveDefinite);
    }
    let s1 = c11.sqrt();
    let s2 = c22.sqrt();
    let rho = (c12 / (s1 * s2)).clamp(-1.0, 1.0);
    let h = (v[j] - v[a]) / s1;
    let k = (v[j] - v[b]) / s2;
    Ok(bvn_cdf_unchecked(h, k, rho))
}

/// A utility coefficient that can be either fixed or supplied by the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Coef {
    /// Slope on the alternative-specific regressor.
    Slope,
    /// Alternative-specific constant of the given 0-based alternative (>= 1).
    Asc(usize),
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coef::Slope => write!(f, "beta"),
            Coef::Asc(j) => write!(f, "alpha{}", j + 1),
        }
    }
}

impl FromStr for Coef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "beta" {
            return Ok(Coef::Slope);
        }
        if let Some(idx) = s.strip_prefix("alpha") {
            let alt: usize = idx
                .parse()
                .map_err(|_| Error::invalid(format!("bad coefficient label `{s}`")))?;
            if alt < 2 {
                return Err(Error::invalid(format!(
                    "`{s}`: alpha1 is normalized to zero and cannot be estimated"
                )));
            }
            return Ok(Coef::Asc(alt - 1));
        }
        Err(Error::invalid(format!("bad coefficient label `{s}`")))
    }
}

impl TryFrom<String> for Coef {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Coef> for String {
    fn from(c: Coef) -> String {
        c.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MNL")]
    Mnl,
    #[serde(rename = "MNP")]
    Mnp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Source {
    Fixed(f64),
    Mixed(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct KernelSpecRepr {
    family: Family,
    n_alternatives: usize,
    #[serde(default)]
    error_cov: Option<Vec<Vec<f64>>>,
    mixed: Vec<Coef>,
    #[serde(default)]
    fixed: Vec<(Coef, f64)>,
}

/// Kernel family, probit error covariance and the split of utility
/// coefficients into fixed values and mixture-supplied ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecRepr", into = "KernelSpecRepr")]
pub struct KernelSpec {
    family: Family,
    n_alt: usize,
    /// Row-major `n_alt x n_alt`.
    error_cov: Vec<f64>,
    mixed: Vec<Coef>,
    fixed: Vec<(Coef, f64)>,
    slope: Source,
    asc: Vec<Source>,
}

impl KernelSpec {
    pub fn new(family: Family, error_cov: DMatrix<f64>, mixed: Vec<Coef>, fixed: Vec<(Coef, f64)>) -> Result<Self> {
        let n_alt = error_cov.nrows();
        if n_alt < 2 || error_cov.ncols() != n_alt {
            return Err(Error::invalid(
                "error covariance must be square with at least two alternatives",
            ));
        }
        if family == Family::Mnp {
            check_positive_definite(&error_cov)?;
        }
        let mut slope = None;
        let mut asc = vec![None; n_alt];
        asc[0] = Some(Source::Fixed(0.0));
        let mut assign = |c: Coef, src: Source| -> Result<()> {
            let slot = match c {
                Coef::Slope => &mut slope,
                Coef::Asc(j) if j >= 1 && j < n_alt => &mut asc[j],
                Coef::Asc(_) => return Err(Error::invalid(format!("{c} does not exist with {n_alt} alternatives"))),
            };
            if slot.is_some() {
                return Err(Error::invalid(format!("{c} is assigned more than once")));
            }
            *slot = Some(src);
            Ok(())
        };
        for (k, &c) in mixed.iter().enumerate() {
            assign(c, Source::Mixed(k))?;
        }
        for &(c, v) in &fixed {
            if !v.is_finite() {
                return Err(Error::NonFinite("fixed coefficient"));
            }
            assign(c, Source::Fixed(v))?;
        }
        let slope = slope.ok_or_else(|| Error::invalid("beta is neither fixed nor mixed"))?;
        let asc = asc
            .into_iter()
            .enumerate()
            .map(|(j, s)| s.ok_or_else(|| Error::invalid(format!("{} is neither fixed nor mixed", Coef::Asc(j)))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            family,
            n_alt,
            error_cov: error_cov.transpose().as_slice().to_vec(),
            mixed,
            fixed,
            slope,
            asc,
        })
    }

    /// Probit kernel with the given error covariance.
    pub fn probit(error_cov: DMatrix<f64>, mixed: Vec<Coef>, fixed: Vec<(Coef, f64)>) -> Result<Self> {
        Self::new(Family::Mnp, error_cov, mixed, fixed)
    }

    /// Logit kernel; the error covariance is unused.
    pub fn logit(n_alt: usize, mixed: Vec<Coef>, fixed: Vec<(Coef, f64)>) -> Result<Self> {
        Self::new(Family::Mnl, DMatrix::identity(n_alt, n_alt), mixed, fixed)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_alternatives(&self) -> usize {
        self.n_alt
    }

    /// Number of mixture-supplied coefficients (dimension of component locations).
    pub fn mixed_dim(&self) -> usize {
        self.mixed.len()
    }

    pub fn mixed(&self) -> &[Coef] {
        &self.mixed
    }

    pub fn fixed(&self) -> &[(Coef, f64)] {
        &self.fixed
    }

    pub fn error_cov(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_alt, self.n_alt, &self.error_cov)
    }

    /// Same coefficient layout with another probit error covariance.
    pub fn with_error_cov(&self, error_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(Family::Mnp, error_cov, self.mixed.clone(), self.fixed.clone())
    }

    fn value(src: Source, location: &[f64]) -> f64 {
        match src {
            Source::Fixed(v) => v,
            Source::Mixed(k) => location[k],
        }
    }

    /// Systematic utilities `x_j * beta + alpha_j` at the given mixed location.
    pub fn utilities(&self, x: &[f64], location: &[f64]) -> Vec<f64> {
        let beta = Self::value(self.slope, location);
        x.iter()
            .zip(&self.asc)
            .map(|(xj, &a)| xj * beta + Self::value(a, location))
            .collect()
    }

    /// Choice probability of `choice` for one observation under a component
    /// with the given location and diagonal covariance over mixed coefficients.
    pub fn prob(&self, x: &[f64], choice: usize, location: &[f64], cov_diag: &[f64]) -> Result<f64> {
        if x.len() != self.n_alt {
            return Err(Error::invalid(format!(
                "observation has {} regressors, kernel expects {}",
                x.len(),
                self.n_alt
            )));
        }
        if choice >= self.n_alt {
            return Err(Error::invalid(format!("choice {choice} out of range")));
        }
        if location.len() != self.mixed.len() || cov_diag.len() != self.mixed.len() {
            return Err(Error::invalid(format!(
                "component dimension {} does not match {} mixed coefficients",
                location.len(),
                self.mixed.len()
            )));
        }
        let gaussian = cov_diag.iter().any(|&c| c != 0.0);
        match self.family {
            Family::Mnl => {
                if gaussian {
                    return Err(Error::Unsupported(
                        "Gaussian mixing components with the logit kernel".into(),
                    ));
                }
                let u = self.utilities(x, location);
                Ok(mnl_prob(&u)?[choice])
            }
            Family::Mnp => self.probit_prob(x, choice, location, cov_diag, gaussian),
        }
    }

    fn probit_prob(&self, x: &[f64], choice: usize, location: &[f64], cov_diag: &[f64], gaussian: bool) -> Result<f64> {
        let beta = Self::value(self.slope, location);
        match self.n_alt {
            3 => {
                let mut v = [0.0; 3];
                for j in 0..3 {
                    v[j] = x[j] * beta + Self::value(self.asc[j], location);
                }
                let mut s = [[0.0; 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        s[r][c] = self.error_cov[3 * r + c];
                    }
                }
                if gaussian {
                    for (k, coef) in self.mixed.iter().enumerate() {
                        let var = cov_diag[k];
                        match *coef {
                            Coef::Slope => {
                                for r in 0..3 {
                                    for c in 0..3 {
                                        s[r][c] += var * x[r] * x[c];
                                    }
                                }
                            }
                            Coef::Asc(j) => s[j][j] += var,
                        }
                    }
                }
                mnp3(&v, &s, choice)
            }
            _ => {
                let v = self.utilities(x, location);
                let mut s = self.error_cov();
                if gaussian {
                    for (k, coef) in self.mixed.iter().enumerate() {
                        let var = cov_diag[k];
                        match *coef {
                            Coef::Slope => {
                                let col = DMatrix::from_column_slice(x.len(), 1, x);
                                s += &col * col.transpose() * var;
                            }
                            Coef::Asc(j) => s[(j, j)] += var,
                        }
                    }
                }
                mnp_prob(&v, &s, choice)
            }
        }
    }
}

impl TryFrom<KernelSpecRepr> for KernelSpec {
    type Error = Error;

    fn try_from(r: KernelSpecRepr) -> Result<Self> {
        let cov = match r.error_cov {
            Some(rows) => {
                if rows.len() != r.n_alternatives || rows.iter().any(|row| row.len() != r.n_alternatives) {
                    return Err(Error::invalid("error_cov shape does not match n_alternatives"));
                }
                DMatrix::from_row_iterator(r.n_alternatives, r.n_alternatives, rows.into_iter().flatten())
            }
            None => DMatrix::identity(r.n_alternatives, r.n_alternatives),
        };
        KernelSpec::new(r.family, cov, r.mixed, r.fixed)
    }
}

impl From<KernelSpec> for KernelSpecRepr {
    fn from(k: KernelSpec) -> Self {
        let rows = k.error_cov.chunks(k.n_alt).map(|c| c.to_vec()).collect();
        KernelSpecRepr {
            family: k.family,
            n_alternatives: k.n_alt,
            error_cov: Some(rows),
            mixed: k.mixed,
            fixed: k.fixed,
        }
    }
}
