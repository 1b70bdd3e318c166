//! Choice datasets, synthetic data for the built-in simulation cases, and the
//! CSV dataset format.
//!
//! The CSV layout is `id,choice,x1,..,xJ[,true_prob]` with 1-based choices and
//! floats written with 17 significant digits, so a save/load cycle is exact.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, Coef, KernelSpec};

/// One individual's row: regressors per alternative and the chosen
/// alternative (0-based).
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub x: &'a [f64],
    pub choice: usize,
}

/// Cross-sectional choice data, one choice per individual.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n_alt: usize,
    x: Vec<f64>,
    choice: Vec<usize>,
    true_prob: Option<Vec<f64>>,
}

impl Dataset {
    /// `x` is row-major `n x n_alt`; `choice` is 0-based.
    pub fn new(n_alt: usize, x: Vec<f64>, choice: Vec<usize>, true_prob: Option<Vec<f64>>) -> Result<Self> {
        if n_alt < 2 {
            return Err(Error::invalid("need at least two alternatives"));
        }
        if choice.is_empty() {
            return Err(Error::NoObservations);
        }
        if x.len() != choice.len() * n_alt {
            return Err(Error::invalid(format!(
                "{} regressor values for {} individuals and {} alternatives",
                x.len(),
                choice.len(),
                n_alt
            )));
        }
        if let Some(i) = x.chunks(n_alt).position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Format {
                row: i + 1,
                message: "non-finite regressor".into(),
            });
        }
        if let Some(i) = choice.iter().position(|&c| c >= n_alt) {
            return Err(Error::Format {
                row: i + 1,
                message: format!("choice {} outside 1..={n_alt}", choice[i] + 1),
            });
        }
        if let Some(tp) = &true_prob {
            if tp.len() != choice.len() {
                return Err(Error::invalid("true_prob length differs from observation count"));
            }
            if let Some(i) = tp.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(Error::Format {
                    row: i + 1,
                    message: format!("true_prob {} outside (0, 1)", tp[i]),
                });
            }
        }
        Ok(Self {
            n_alt,
            x,
            choice,
            true_prob,
        })
    }

    pub fn len(&self) -> usize {
        self.choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_empty()
    }

    pub fn n_alternatives(&self) -> usize {
        self.n_alt
    }

    pub fn obs(&self, i: usize) -> Observation<'_> {
        Observation {
            x: &self.x[i * self.n_alt..(i + 1) * self.n_alt],
            choice: self.choice[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Observation<'_>> + '_ {
        (0..self.len()).map(move |i| self.obs(i))
    }

    pub fn choices(&self) -> &[usize] {
        &self.choice
    }

    pub fn true_prob(&self) -> Option<&[f64]> {
        self.true_prob.as_deref()
    }

    /// First `n` individuals.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.n_alt,
            self.x[..n * self.n_alt].to_vec(),
            self.choice[..n].to_vec(),
            self.true_prob.as_ref().map(|t| t[..n].to_vec()),
        )
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(data, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "choice".to_string()];
    header.extend((1..=data.n_alt).map(|j| format!("x{j}")));
    if data.true_prob.is_some() {
        header.push("true_prob".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let o = data.obs(i);
        let mut rec = vec![(i + 1).to_string(), (o.choice + 1).to_string()];
        rec.extend(o.x.iter().map(|&v| fmt_float(v)));
        if let Some(tp) = &data.true_prob {
            rec.push(fmt_float(tp[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

pub fn read_dataset<R: std::io::Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::NoObservations);
    }
    if header.get(0) != Some("id") || header.get(1) != Some("choice") {
        return Err(Error::Format {
            row: 0,
            message: "header must start with `id,choice`".into(),
        });
    }
    let has_tp = header.iter().next_back() == Some("true_prob");
    let n_alt = header.len() - 2 - usize::from(has_tp);
    for j in 0..n_alt {
        let want = format!("x{}", j + 1);
        if header.get(2 + j) != Some(want.as_str()) {
            return Err(Error::Format {
                row: 0,
                message: format!("expected column `{want}`"),
            });
        }
    }
    if n_alt < 2 {
        return Err(Error::Format {
            row: 0,
            message: "need regressor columns x1..xJ with J >= 2".into(),
        });
    }

    let mut x = Vec::new();
    let mut choice = Vec::new();
    let mut tp = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Format {
                row,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Format {
                row,
                message: format!("cannot parse {what} `{s}`"),
            })
        };
        let c: usize = rec[1].parse().map_err(|_| Error::Format {
            row,
            message: format!("cannot parse choice `{}`", &rec[1]),
        })?;
        if c < 1 || c > n_alt {
            return Err(Error::Format {
                row,
                message: format!("choice {c} outside 1..={n_alt}"),
            });
        }
        choice.push(c - 1);
        for j in 0..n_alt {
            x.push(parse(&rec[2 + j], "regressor")?);
        }
        if has_tp {
            tp.push(parse(&rec[2 + n_alt], "true_prob")?);
        }
    }
    if choice.is_empty() {
        return Err(Error::NoObservations);
    }
    Dataset::new(n_alt, x, choice, has_tp.then_some(tp))
}

/// The five data-generating designs with three alternatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CaseId {
    /// beta = 1 w.p. 0.75, else -1.
    C1a,
    /// beta ~ N(1, 1).
    C1b,
    /// beta ~ LogNormal(0, 0.5^2).
    C1c,
    /// beta = 1, correlated probit errors.
    C2a,
    /// beta = 1, errors from a two-component normal mixture.
    C2b,
}

impl CaseId {
    pub const ALL: [CaseId; 5] = [CaseId::C1a, CaseId::C1b, CaseId::C1c, CaseId::C2a, CaseId::C2b];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseId::C1a => "1a",
            CaseId::C1b => "1b",
            CaseId::C1c => "1c",
            CaseId::C2a => "2a",
            CaseId::C2b => "2b",
        }
    }

    /// Coefficients that carry the random heterogeneity.
    pub fn mixed(self) -> Vec<Coef> {
        match self {
            CaseId::C1a | CaseId::C1b | CaseId::C1c => vec![Coef::Slope],
            CaseId::C2a | CaseId::C2b => vec![Coef::Asc(1), Coef::Asc(2)],
        }
    }

    pub fn fixed(self) -> Vec<(Coef, f64)> {
        match self {
            CaseId::C1a | CaseId::C1b | CaseId::C1c => vec![(Coef::Asc(1), 0.0), (Coef::Asc(2), 0.0)],
            CaseId::C2a | CaseId::C2b => vec![(Coef::Slope, 1.0)],
        }
    }

    pub fn mixed_dim(self) -> usize {
        self.mixed().len()
    }

    /// Probit error covariance of the (first) generating error distribution.
    pub fn error_cov(self) -> DMatrix<f64> {
        match self {
            CaseId::C1a | CaseId::C1b | CaseId::C1c => DMatrix::identity(3, 3),
            CaseId::C2a | CaseId::C2b => sigma_2a(),
        }
    }

    /// Probit kernel for this case's coefficient layout with the given error covariance.
    pub fn kernel(self, error_cov: DMatrix<f64>) -> Result<KernelSpec> {
        KernelSpec::probit(error_cov, self.mixed(), self.fixed())
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseId::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownCase(s.to_string()))
    }
}

impl TryFrom<String> for CaseId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CaseId> for String {
    fn from(c: CaseId) -> String {
        c.as_str().to_string()
    }
}

pub fn sigma_2a() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.25, 0.5, 0.0, 0.5, 1.25])
}

pub fn sigma_2b_second() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, -0.5, 0.0, -0.5, 1.25, -0.5, 0.0, -0.5, 1.25])
}

/// Error mean of the second 2b mixture component, as an ASC shift on (alpha2, alpha3).
const SHIFT_2B: [f64; 2] = [1.0, -1.0];

/// Regressor standard deviation (variance 9).
const X_SD: f64 = 3.0;

/// Ground-truth distribution of the mixed coefficients for one case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueMixing {
    pub case: CaseId,
}

impl TrueMixing {
    pub fn new(case: CaseId) -> Self {
        Self { case }
    }

    pub fn dim(&self) -> usize {
        self.case.mixed_dim()
    }

    pub fn labels(&self) -> Vec<String> {
        self.case.mixed().iter().map(|c| c.to_string()).collect()
    }

    /// Joint CDF of the mixed coefficients at `z`.
    pub fn cdf(&self, z: &[f64]) -> f64 {
        match self.case {
            CaseId::C1a => {
                let z = z[0];
                let mut c = 0.0;
                if z >= -1.0 {
                    c += 0.25;
                }
                if z >= 1.0 {
                    c += 0.75;
                }
                c
            }
            CaseId::C1b => kernel::norm_cdf(z[0] - 1.0),
            CaseId::C1c => {
                if z[0] <= 0.0 {
                    0.0
                } else {
                    kernel::norm_cdf(z[0].ln() / 0.5)
                }
            }
            CaseId::C2a => {
                if z[0] >= 0.0 && z[1] >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CaseId::C2b => {
                let mut c = 0.0;
                if z[0] >= 0.0 && z[1] >= 0.0 {
                    c += 0.5;
                }
                if z[0] >= SHIFT_2B[0] && z[1] >= SHIFT_2B[1] {
                    c += 0.5;
                }
                c
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self.case {
            CaseId::C1a => vec![0.75 - 0.25],
            CaseId::C1b => vec![1.0],
            CaseId::C1c => vec![(0.125f64).exp()],
            CaseId::C2a => vec![0.0, 0.0],
            CaseId::C2b => vec![0.5 * SHIFT_2B[0], 0.5 * SHIFT_2B[1]],
        }
    }

    /// True probability that mixed coordinate `k` is negative.
    pub fn pct_negative(&self, k: usize) -> f64 {
        match (self.case, k) {
            (CaseId::C1a, 0) => 0.25,
            (CaseId::C1b, 0) => kernel::norm_cdf(-1.0),
            (CaseId::C1c, 0) => 0.0,
            (CaseId::C2a, _) => 0.0,
            (CaseId::C2b, 1) => 0.5,
            (CaseId::C2b, _) => 0.0,
            _ => 0.0,
        }
    }

    /// Exact probability that the observed alternative is chosen under the
    /// generating process.
    pub fn choice_prob(&self, x: &[f64], choice: usize) -> Result<f64> {
        let k = self.case.kernel(self.case.error_cov())?;
        match self.case {
            CaseId::C1a => Ok(0.75 * k.prob(x, choice, &[1.0], &[0.0])? + 0.25 * k.prob(x, choice, &[-1.0], &[0.0])?),
            CaseId::C1b => k.prob(x, choice, &[1.0], &[1.0]),
            CaseId::C1c => {
                // integrate over z with beta = exp(z / 2), z ~ N(0, 1)
                let (lo, hi, panels) = (-9.0, 9.0, 60);
                let width = (hi - lo) / panels as f64;
                let mut total = 0.0;
                for p in 0..panels {
                    let mid = lo + (p as f64 + 0.5) * width;
                    for (w, node) in kernel::gauss_legendre_20() {
                        let z = mid + 0.5 * width * node;
                        let pr = k.prob(x, choice, &[(0.5 * z).exp()], &[0.0])?;
                        total += 0.5 * width * w * kernel::norm_pdf(z) * pr;
                    }
                }
                Ok(total)
            }
            CaseId::C2a => k.prob(x, choice, &[0.0, 0.0], &[0.0, 0.0]),
            CaseId::C2b => {
                let k2 = self.case.kernel(sigma_2b_second())?;
                Ok(0.5 * k.prob(x, choice, &[0.0, 0.0], &[0.0, 0.0])?
                    + 0.5 * k2.prob(x, choice, &SHIFT_2B, &[0.0, 0.0])?)
            }
        }
    }
}

/// Scenario descriptor `{case, n, seed}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub case: CaseId,
    pub n: usize,
    pub seed: u64,
}

/// Latent draws for one simulated individual.
#[derive(Clone, Debug, PartialEq)]
pub struct IndividualDraw {
    pub x: [f64; 3],
    pub beta: f64,
    pub eps: [f64; 3],
    pub choice: usize,
}

const STREAM_REGRESSORS: u64 = 1;
const STREAM_COEFFICIENTS: u64 = 2;
const STREAM_ERRORS: u64 = 3;
const STREAM_MIXTURE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn lower_cholesky(m: &DMatrix<f64>) -> Matrix3<f64> {
    let m3 = Matrix3::from_iterator(m.iter().copied());
    m3.cholesky().expect("generating covariance is positive definite").l()
}

/// Draws regressors, coefficients and errors. Each quantity has its own
/// random stream and is drawn in individual order, so the first `m`
/// individuals are identical for every `n >= m`.
pub fn simulate_draws(case: CaseId, n: usize, seed: u64) -> Result<Vec<IndividualDraw>> {
    if n < 1 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rx = stream(seed, STREAM_REGRESSORS);
    let mut rc = stream(seed, STREAM_COEFFICIENTS);
    let mut re = stream(seed, STREAM_ERRORS);
    let mut rm = stream(seed, STREAM_MIXTURE);
    let l_first = lower_cholesky(&case.error_cov());
    let l_second = lower_cholesky(&sigma_2b_second());
    let shift = Vector3::new(0.0, SHIFT_2B[0], SHIFT_2B[1]);

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = [0.0; 3];
        for v in &mut x {
            *v = X_SD * rx.sample::<f64, _>(StandardNormal);
        }
        let beta = match case {
            CaseId::C1a => {
                if rc.gen::<f64>() < 0.75 {
                    1.0
                } else {
                    -1.0
                }
            }
            CaseId::C1b => 1.0 + rc.sample::<f64, _>(StandardNormal),
            CaseId::C1c => (0.5 * rc.sample::<f64, _>(StandardNormal)).exp(),
            CaseId::C2a | CaseId::C2b => 1.0,
        };
        let z = Vector3::new(
            re.sample::<f64, _>(StandardNormal),
            re.sample::<f64, _>(StandardNormal),
            re.sample::<f64, _>(StandardNormal),
        );
        let e = match case {
            CaseId::C2b => {
                if rm.gen::<f64>() < 0.5 {
                    l_first * z
                } else {
                    shift + l_second * z
                }
            }
            _ => l_first * z,
        };
        let eps = [e[0], e[1], e[2]];
        let mut choice = 0;
        let mut best = f64::NEG_INFINITY;
        for j in 0..3 {
            let u = x[j] * beta + eps[j];
            if u > best {
                best = u;
                choice = j;
            }
        }
        out.push(IndividualDraw { x, beta, eps, choice });
    }
    Ok(out)
}

/// Nearest value inside (0, 1); exact probabilities can round to 0 or 1.
fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Simulates a dataset for one of the built-in cases, attaching the exact
/// generating probability of each observed choice.
pub fn simulate_case(case: CaseId, n: usize, seed: u64) -> Result<(Dataset, TrueMixing)> {
    use rayon::prelude::*;

    let draws = simulate_draws(case, n, seed)?;
    let truth = TrueMixing::new(case);
    let true_prob = draws
        .par_iter()
        .map(|d| truth.choice_prob(&d.x, d.choice).map(open_unit))
        .collect::<Result<Vec<_>>>()?;
    let x = draws.iter().flat_map(|d| d.x).collect();
    let choice = draws.iter().map(|d| d.choice).collect();
    Ok((Dataset::new(3, x, choice, Some(true_prob))?, truth))
}
