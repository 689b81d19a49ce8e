//! Gaussian-process regression of the log-likelihood over standardized inputs.
//!
//! The GP uses a constant prior mean placed below the training data, a fixed
//! nugget proportional to the output range and Matérn-3/2 covariances. Only
//! the signal variance and the length scales are trained, by maximizing the
//! log-marginal likelihood from several random starts.

use std::path::Path;

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parameter_space::ParameterBox;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// One length scale on the Euclidean distance.
    #[default]
    Isotropic,
    /// Product of one-dimensional factors, one length scale per dimension.
    Ard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub sigma_k2: f64,
    /// One entry for [`KernelKind::Isotropic`], one per dimension for [`KernelKind::Ard`].
    pub length_scales: Vec<f64>,
}

impl Hyperparameters {
    fn from_log(theta: &[f64]) -> Self {
        Hyperparameters {
            sigma_k2: theta[0].exp(),
            length_scales: theta[1..].iter().map(|t| t.exp()).collect(),
        }
    }

    fn validate(&self, kind: KernelKind, dim: usize) -> Result<()> {
        let expected = match kind {
            KernelKind::Isotropic => 1,
            KernelKind::Ard => dim,
        };
        if self.length_scales.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.length_scales.len(),
            });
        }
        if !(self.sigma_k2 > 0.0 && self.length_scales.iter().all(|l| *l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(format!("invalid GP hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// `sigma_k2 (1 + sqrt(3) r / l) exp(-sqrt(3) r / l)` with `r = |x - y|`.
pub fn matern32(x: &[f64], y: &[f64], sigma_k2: f64, l: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let a = SQRT3 * r2.sqrt() / l;
    sigma_k2 * (1.0 + a) * (-a).exp()
}

/// Product of one-dimensional Matérn-3/2 factors with a shared variance.
pub fn matern32_ard(x: &[f64], y: &[f64], sigma_k2: f64, l: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut prod = 1.0;
    for ((a, b), ld) in x.iter().zip(y).zip(l) {
        let t = SQRT3 * (a - b).abs() / ld;
        sum += t;
        prod *= 1.0 + t;
    }
    sigma_k2 * prod * (-sum).exp()
}

fn kernel(kind: KernelKind, hp: &Hyperparameters, x: &[f64], y: &[f64]) -> f64 {
    match kind {
        KernelKind::Isotropic => matern32(x, y, hp.sigma_k2, hp.length_scales[0]),
        KernelKind::Ard => matern32_ard(x, y, hp.sigma_k2, &hp.length_scales),
    }
}

fn range(log_liks: &[f64]) -> Result<(f64, f64)> {
    if log_liks.is_empty() {
        return Err(Error::Empty("training outputs"));
    }
    let lo = log_liks.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// Constant prior mean `min - (max - min)`, placed below every training value.
pub fn prior_mean_rule(log_liks: &[f64]) -> Result<f64> {
    let (lo, hi) = range(log_liks)?;
    Ok(lo - (hi - lo))
}

/// Nugget variance `1e-5 (max - min)`, floored at `1e-12`.
pub fn nugget_rule(log_liks: &[f64]) -> Result<f64> {
    let (lo, hi) = range(log_liks)?;
    Ok((1e-5 * (hi - lo)).max(1e-12))
}

/// Parameter points with their log-likelihood; `None` marks a failed forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<Vec<f64>>,
    log_liks: Vec<Option<f64>>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, log_liks: Vec<Option<f64>>) -> Result<Self> {
        if inputs.len() != log_liks.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: log_liks.len(),
            });
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|x| x.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    got: bad.len(),
                });
            }
        }
        if let Some(v) = log_liks.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite training log-likelihood {v}")));
        }
        Ok(TrainingSet { inputs, log_liks })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn log_liks(&self) -> &[Option<f64>] {
        &self.log_liks
    }

    pub fn failed_mask(&self) -> Vec<bool> {
        self.log_liks.iter().map(Option::is_none).collect()
    }

    /// Successful rows only.
    pub fn successful(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.inputs
            .iter()
            .zip(&self.log_liks)
            .filter_map(|(x, l)| l.map(|l| (x.clone(), l)))
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSettings {
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_restarts() -> usize {
    5
}

impl Default for GpSettings {
    fn default() -> Self {
        GpSettings {
            kernel: KernelKind::Isotropic,
            restarts: default_restarts(),
            seed: 0,
        }
    }
}

/// Standardized training data shared by the objective evaluations.
struct Data<'a> {
    u: &'a [f64],
    dim: usize,
    resid: &'a [f64],
    nugget: f64,
    kind: KernelKind,
}

impl Data<'_> {
    fn n(&self) -> usize {
        self.resid.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.u[i * self.dim..(i + 1) * self.dim]
    }

    fn covariance(&self, hp: &Hyperparameters) -> Mat<f64> {
        let n = self.n();
        let mut k = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let v = kernel(self.kind, hp, self.row(i), self.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] = hp.sigma_k2 + self.nugget;
        }
        k
    }

    /// Negative log-marginal likelihood and its gradient in log-hyperparameters.
    /// `None` when the covariance is not positive definite.
    fn objective(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let hp = Hyperparameters::from_log(theta);
        let n = self.n();
        let llt = self.covariance(&hp).llt(Side::Lower).ok()?;
        let rhs = Mat::<f64>::from_fn(n, 1, |i, _| self.resid[i]);
        let alpha = llt.solve(&rhs);
        let l = llt.L();
        let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let quad: f64 = (0..n).map(|i| self.resid[i] * alpha[(i, 0)]).sum();
        let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
        if !lml.is_finite() {
            return None;
        }

        // d lml / d theta = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta)
        let kinv = llt.inverse();
        let mut grad = vec![0.0; theta.len()];
        let mut t = vec![0.0; self.dim];
        for i in 0..n {
            let ai = alpha[(i, 0)];
            grad[0] += 0.5 * (ai * ai - kinv[(i, i)]) * hp.sigma_k2;
            for j in 0..i {
                let w = ai * alpha[(j, 0)] - kinv[(i, j)];
                let (xi, xj) = (self.row(i), self.row(j));
                match self.kind {
                    KernelKind::Isotropic => {
                        let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                        let a = SQRT3 * r2.sqrt() / hp.length_scales[0];
                        let e = (-a).exp();
                        grad[0] += w * hp.sigma_k2 * (1.0 + a) * e;
                        grad[1] += w * hp.sigma_k2 * a * a * e;
                    }
                    KernelKind::Ard => {
                        let mut sum = 0.0;
                        let mut prod = 1.0;
                        for d in 0..self.dim {
                            t[d] = SQRT3 * (xi[d] - xj[d]).abs() / hp.length_scales[d];
                            sum += t[d];
                            prod *= 1.0 + t[d];
                        }
                        let k = hp.sigma_k2 * prod * (-sum).exp();
                        grad[0] += w * k;
                        for d in 0..self.dim {
                            grad[1 + d] += w * k * t[d] * t[d] / (1.0 + t[d]);
                        }
                    }
                }
            }
        }
        Some((-lml, grad.into_iter().map(|g| -g).collect()))
    }
}

/// Limited-memory BFGS with backtracking on a box. Points outside the box or
/// where `f` returns `None` count as `+inf`.
type Objective<'a> = dyn Fn(&[f64]) -> Option<(f64, Vec<f64>)> + 'a;

fn lbfgs(
    f: &Objective<'_>,
    x0: Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    max_iter: usize,
) -> Option<(Vec<f64>, f64)> {
    const MEMORY: usize = 8;
    let inside = |x: &[f64]| x.iter().zip(lower).zip(upper).all(|((v, lo), hi)| v >= lo && v <= hi);
    let eval = |x: &[f64]| if inside(x) { f(x) } else { None };
    let (mut fx, mut g) = eval(&x0)?;
    let mut x = x0;
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

    for _ in 0..max_iter {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < 1e-7 * fx.abs().max(1.0) {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dotp(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .back()
            .map_or(1.0 / gnorm.max(1.0), |(s, y, _)| dotp(s, y) / dotp(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dotp(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dotp(&dir, &g) >= 0.0 {
            dir = g.iter().map(|v| -v / gnorm).collect();
            hist.clear();
        }
        // cap the step at 2 units in log space
        let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax > 2.0 {
            dir.iter_mut().for_each(|v| *v *= 2.0 / dmax);
        }
        let slope = dotp(&dir, &g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Some((fn_, gn)) = eval(&xn) {
                if fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dotp(&s, &y);
        if sy > 1e-12 {
            if hist.len() == MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let done = (fx - fn_).abs() <= 1e-12 * fx.abs().max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        if done {
            break;
        }
    }
    Some((x, fx))
}

/// Fitted GP surrogate. Immutable and safe to share between threads.
#[derive(Debug, Clone)]
pub struct GPModel {
    parameter_box: ParameterBox,
    kind: KernelKind,
    hp: Hyperparameters,
    prior_mean: f64,
    nugget: f64,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    dim: usize,
    /// Standardized inputs scaled by `sqrt(3) / l`, point-major.
    scaled: Vec<f64>,
    /// Lower Cholesky factor of `K + nugget I`, row-major.
    chol: Vec<f64>,
    /// `sigma_k2 (K + nugget I)^-1 (y - m)`.
    weights: Vec<f64>,
    lml: f64,
}

#[derive(Serialize, Deserialize)]
struct GpRecord {
    parameter_box: ParameterBox,
    kernel: KernelKind,
    hyperparameters: Hyperparameters,
    prior_mean: f64,
    nugget: f64,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<f64>,
}

impl GPModel {
    /// Builds a GP with given hyperparameters, prior mean and nugget (no training).
    pub fn with_hyperparameters(
        parameter_box: ParameterBox,
        inputs: Vec<Vec<f64>>,
        outputs: Vec<f64>,
        kind: KernelKind,
        hp: Hyperparameters,
        prior_mean: f64,
        nugget: f64,
    ) -> Result<Self> {
        let dim = parameter_box.dim();
        if inputs.is_empty() {
            return Err(Error::Empty("GP training inputs"));
        }
        if inputs.len() != outputs.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: outputs.len(),
            });
        }
        hp.validate(kind, dim)?;
        if !(nugget >= 0.0) {
            return Err(Error::InvalidConfig(format!("nugget must be >= 0, got {nugget}")));
        }
        let mut u = Vec::with_capacity(inputs.len() * dim);
        for x in &inputs {
            u.extend(parameter_box.standardize(x)?);
        }
        let resid: Vec<f64> = outputs.iter().map(|y| y - prior_mean).collect();
        let data = Data {
            u: &u,
            dim,
            resid: &resid,
            nugget,
            kind,
        };
        let n = inputs.len();
        let llt = data
            .covariance(&hp)
            .llt(Side::Lower)
            .map_err(|e| Error::NotPositiveDefinite(format!("{e:?}")))?;
        let rhs = Mat::<f64>::from_fn(n, 1, |i, _| resid[i]);
        let alpha = llt.solve(&rhs);
        let l = llt.L();
        let mut chol = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                chol[i * n + j] = l[(i, j)];
            }
        }
        let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let quad: f64 = (0..n).map(|i| resid[i] * alpha[(i, 0)]).sum();
        let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
        let scale: Vec<f64> = match kind {
            KernelKind::Isotropic => vec![SQRT3 / hp.length_scales[0]; dim],
            KernelKind::Ard => hp.length_scales.iter().map(|l| SQRT3 / l).collect(),
        };
        let scaled = u.iter().enumerate().map(|(k, v)| v * scale[k % dim]).collect();
        let weights = (0..n).map(|i| hp.sigma_k2 * alpha[(i, 0)]).collect();
        Ok(GPModel {
            parameter_box,
            kind,
            hp,
            prior_mean,
            nugget,
            inputs,
            outputs,
            dim,
            scaled,
            chol,
            weights,
            lml,
        })
    }

    pub fn parameter_box(&self) -> &ParameterBox {
        &self.parameter_box
    }

    pub fn kernel(&self) -> KernelKind {
        self.kind
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_train(&self) -> usize {
        self.outputs.len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// Gradient of the log-marginal likelihood with respect to
    /// `(ln sigma_k2, ln l_1, ...)` at the stored hyperparameters.
    pub fn log_marginal_likelihood_gradient(&self) -> Result<Vec<f64>> {
        let mut u = Vec::with_capacity(self.inputs.len() * self.dim);
        for x in &self.inputs {
            u.extend(self.parameter_box.standardize(x)?);
        }
        let resid: Vec<f64> = self.outputs.iter().map(|y| y - self.prior_mean).collect();
        let data = Data {
            u: &u,
            dim: self.dim,
            resid: &resid,
            nugget: self.nugget,
            kind: self.kind,
        };
        let theta: Vec<f64> = std::iter::once(self.hp.sigma_k2.ln())
            .chain(self.hp.length_scales.iter().map(|l| l.ln()))
            .collect();
        let (_, grad) = data
            .objective(&theta)
            .ok_or_else(|| Error::NotPositiveDefinite("stored GP covariance".into()))?;
        Ok(grad.into_iter().map(|g| -g).collect())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            })
        }
    }

    /// Query scaled like `self.scaled`.
    fn scale_query(&self, x: &[f64], out: &mut [f64]) {
        for (d, ((o, v), (lo, hi))) in out.iter_mut().zip(x).zip(self.parameter_box.bounds()).enumerate() {
            let s = match self.kind {
                KernelKind::Isotropic => SQRT3 / self.hp.length_scales[0],
                KernelKind::Ard => SQRT3 / self.hp.length_scales[d],
            };
            *o = (v - lo) / (hi - lo) * s;
        }
    }

    /// Unit-variance correlation between the scaled query and training point `j`.
    #[inline]
    fn correlation(&self, q: &[f64], j: usize) -> f64 {
        let xj = &self.scaled[j * self.dim..(j + 1) * self.dim];
        match self.kind {
            KernelKind::Isotropic => {
                let r2: f64 = q.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                let a = r2.sqrt();
                (1.0 + a) * (-a).exp()
            }
            KernelKind::Ard => {
                let mut sum = 0.0;
                let mut prod = 1.0;
                for (a, b) in q.iter().zip(xj) {
                    let t = (a - b).abs();
                    sum += t;
                    prod *= 1.0 + t;
                }
                prod * (-sum).exp()
            }
        }
    }

    /// Posterior mean at a raw parameter point.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut q = [0.0; 32];
        let q = if self.dim <= 32 {
            &mut q[..self.dim]
        } else {
            return Ok(self.predict(x)?.0);
        };
        self.scale_query(x, q);
        let mut acc = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w * self.correlation(q, j);
        }
        Ok(self.prior_mean + acc)
    }

    /// Posterior mean and latent variance at a raw parameter point.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_dim(x)?;
        let mut q = vec![0.0; self.dim];
        self.scale_query(x, &mut q);
        let n = self.n_train();
        let kstar: Vec<f64> = (0..n).map(|j| self.hp.sigma_k2 * self.correlation(&q, j)).collect();
        let mean = self.prior_mean
            + kstar
                .iter()
                .zip(&self.weights)
                .map(|(k, w)| k * w)
                .sum::<f64>()
                / self.hp.sigma_k2;
        // v = L^-1 k*
        let mut v = kstar;
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i];
            let s: f64 = row.iter().zip(&v[..i]).map(|(a, b)| a * b).sum();
            v[i] = (v[i] - s) / self.chol[i * n + i];
        }
        let var = self.hp.sigma_k2 - v.iter().map(|a| a * a).sum::<f64>();
        Ok((mean, var.max(0.0)))
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = GpRecord {
            parameter_box: self.parameter_box.clone(),
            kernel: self.kind,
            hyperparameters: self.hp.clone(),
            prior_mean: self.prior_mean,
            nugget: self.nugget,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: GpRecord = serde_json::from_str(text)?;
        Self::with_hyperparameters(
            rec.parameter_box,
            rec.inputs,
            rec.outputs,
            rec.kernel,
            rec.hyperparameters,
            rec.prior_mean,
            rec.nugget,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Malformed {
                path: path.to_path_buf(),
                reason: j.to_string(),
            },
            other => other,
        })
    }
}

/// Fits a GP to the successful rows of `train`.
///
/// Restarts run in parallel on the current rayon pool; each is a sequential
/// L-BFGS run, and the best objective wins with ties going to the lowest
/// restart index, so the result does not depend on the number of workers.
pub fn fit_gp(train: &TrainingSet, parameter_box: &ParameterBox, settings: &GpSettings) -> Result<GPModel> {
    let (inputs, outputs) = train.successful();
    if outputs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "GP fit needs at least 2 successful training points, got {}",
            outputs.len()
        )));
    }
    if settings.restarts == 0 {
        return Err(Error::InvalidConfig("GP fit needs at least one restart".into()));
    }
    let dim = parameter_box.dim();
    let prior_mean = prior_mean_rule(&outputs)?;
    let nugget = nugget_rule(&outputs)?;
    let mut u = Vec::with_capacity(inputs.len() * dim);
    for x in &inputs {
        u.extend(parameter_box.standardize(x)?);
    }
    let resid: Vec<f64> = outputs.iter().map(|y| y - prior_mean).collect();
    let mean_y = outputs.iter().sum::<f64>() / outputs.len() as f64;
    let var_y = outputs.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / outputs.len() as f64;
    let var_y = if var_y > 0.0 { var_y } else { 1.0 };

    let n_len = match settings.kernel {
        KernelKind::Isotropic => 1,
        KernelKind::Ard => dim,
    };
    let mut lower = vec![(1e-6 * var_y).ln()];
    let mut upper = vec![(1e6 * var_y).ln()];
    lower.extend(std::iter::repeat_n(1e-3f64.ln(), n_len));
    upper.extend(std::iter::repeat_n(1e3f64.ln(), n_len));

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let starts: Vec<Vec<f64>> = (0..settings.restarts)
        .map(|_| {
            let mut t = vec![var_y.ln() + rng.random_range(1e-2f64.ln()..1e2f64.ln())];
            t.extend((0..n_len).map(|_| rng.random_range(1e-2f64.ln()..10f64.ln())));
            t
        })
        .collect();

    let data = Data {
        u: &u,
        dim,
        resid: &resid,
        nugget,
        kind: settings.kernel,
    };
    let objective = |t: &[f64]| data.objective(t);
    let results: Vec<Option<(Vec<f64>, f64)>> = starts
        .into_par_iter()
        .map(|x0| lbfgs(&objective, x0, &lower, &upper, 200))
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (x, f) in results.into_iter().flatten() {
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    let (theta, _) = best.ok_or_else(|| {
        Error::NotPositiveDefinite(format!(
            "GP covariance could not be factorized at any of {} restarts",
            settings.restarts
        ))
    })?;
    GPModel::with_hyperparameters(
        parameter_box.clone(),
        inputs,
        outputs,
        settings.kernel,
        Hyperparameters::from_log(&theta),
        prior_mean,
        nugget,
    )
}

/// L2 norm of the prediction error over a test set.
pub fn test_error(model: &GPModel, inputs: &[Vec<f64>], log_liks: &[f64]) -> Result<f64> {
    if inputs.len() != log_liks.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: log_liks.len(),
        });
    }
    let mut s = 0.0;
    for (x, y) in inputs.iter().zip(log_liks) {
        let e = model.predict_mean(x)? - y;
        s += e * e;
    }
    Ok(s.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(dim: usize) -> ParameterBox {
        ParameterBox::new(vec![(0.0, 1.0); dim]).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    fn iso(s2: f64, l: f64) -> Hyperparameters {
        Hyperparameters { sigma_k2: s2, length_scales: vec![l] }
    }

    #[test]
    fn matern_values() {
        assert_eq!(matern32(&[0.3, 0.1], &[0.3, 0.1], 2.5, 0.7), 2.5);
        assert!(matern32(&[0.0], &[100.0], 1.0, 1.0) < 1e-60);
        assert!((matern32(&[0.0], &[1.0], 1.0, 1.0) - 0.483_357_724_596_507_65).abs() < 1e-15);
        // one-dimensional ARD and isotropic kernels agree
        assert_eq!(matern32_ard(&[0.2], &[0.9], 1.3, &[0.4]), matern32(&[0.2], &[0.9], 1.3, 0.4));
    }

    #[test]
    fn rules() {
        assert_eq!(prior_mean_rule(&[-10.0, -2.0]).unwrap(), -18.0);
        assert_eq!(prior_mean_rule(&[3.5]).unwrap(), 3.5);
        assert_eq!(prior_mean_rule(&[0.0, 1.0, 5.0]).unwrap(), -5.0);
        assert!(prior_mean_rule(&[]).is_err());
        assert!((nugget_rule(&[-4.0, 4.0]).unwrap() - 8e-5).abs() < 1e-20);
        assert_eq!(nugget_rule(&[2.0, 2.0]).unwrap(), 1e-12);
        assert!((nugget_rule(&[0.0, 1e4]).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn interpolates_without_nugget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_points(&mut rng, 8, 2);
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[1]).collect();
        for (kind, hp) in [
            (KernelKind::Isotropic, iso(1.5, 0.3)),
            (KernelKind::Ard, Hyperparameters { sigma_k2: 1.5, length_scales: vec![0.3, 0.5] }),
        ] {
            let gp = GPModel::with_hyperparameters(unit_box(2), x.clone(), y.clone(), kind, hp, -1.0, 0.0)
                .unwrap();
            for (p, v) in x.iter().zip(&y) {
                let (m, var) = gp.predict(p).unwrap();
                assert!((m - v).abs() <= 1e-8 * v.abs().max(1e-300), "{m} vs {v}");
                assert!(var <= 1e-8 * 1.5);
                assert!((gp.predict_mean(p).unwrap() - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let x = vec![vec![0.2], vec![0.5], vec![0.9]];
        let y = vec![-3.0, -1.0, -2.0];
        let gp = GPModel::with_hyperparameters(unit_box(1), x, y, KernelKind::Isotropic, iso(2.0, 0.1), -5.0, 1e-6)
            .unwrap();
        let (m, v) = gp.predict(&[0.9 + 60.0 * 0.1]).unwrap();
        assert!((m + 5.0).abs() < 1e-6 * 2.0);
        assert!((v - 2.0).abs() < 1e-6 * 2.0);
    }

    #[test]
    fn two_point_closed_form() {
        let x = vec![vec![0.1, 0.2], vec![0.6, 0.4]];
        let y = vec![1.0, -0.5];
        let (s2, l, nug, m) = (1.7, 0.45, 0.03, -2.0);
        let gp = GPModel::with_hyperparameters(unit_box(2), x.clone(), y.clone(), KernelKind::Isotropic, iso(s2, l), m, nug)
            .unwrap();
        let q = [0.35, 0.05];
        let k12 = matern32(&x[0], &x[1], s2, l);
        let (a, b, d) = (s2 + nug, k12, s2 + nug);
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let ks = [matern32(&q, &x[0], s2, l), matern32(&q, &x[1], s2, l)];
        let r = [y[0] - m, y[1] - m];
        let mean = m + ks[0] * (inv[0][0] * r[0] + inv[0][1] * r[1]) + ks[1] * (inv[1][0] * r[0] + inv[1][1] * r[1]);
        let var = s2
            - (ks[0] * (inv[0][0] * ks[0] + inv[0][1] * ks[1]) + ks[1] * (inv[1][0] * ks[0] + inv[1][1] * ks[1]));
        let (pm, pv) = gp.predict(&q).unwrap();
        assert!((pm - mean).abs() < 1e-12);
        assert!((pv - var).abs() < 1e-12);
    }

    /// Dense LU determinant and Gauss-Jordan solve, written independently of the GP code.
    fn dense_lml(k: &[Vec<f64>], r: &[f64]) -> f64 {
        let n = r.len();
        let mut a: Vec<Vec<f64>> = k.iter().zip(r).map(|(row, ri)| {
            let mut v = row.clone();
            v.push(*ri);
            v
        }).collect();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            det *= a[c][c];
            for i in 0..n {
                if i != c {
                    let f = a[i][c] / a[c][c];
                    for j in c..=n {
                        a[i][j] -= f * a[c][j];
                    }
                }
            }
        }
        let sol: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        let quad: f64 = r.iter().zip(&sol).map(|(x, y)| x * y).sum();
        -0.5 * quad - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn log_marginal_likelihood_oracles() {
        let gp = GPModel::with_hyperparameters(unit_box(1), vec![vec![0.3]], vec![2.0], KernelKind::Isotropic, iso(0.5, 1.0), 2.0, 0.5)
            .unwrap();
        assert!((gp.log_marginal_likelihood() - (-0.918_938_533_204_672_7)).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [KernelKind::Isotropic, KernelKind::Ard] {
            let x = random_points(&mut rng, 5, 3);
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..1.0)).collect();
            let hp = match kind {
                KernelKind::Isotropic => iso(1.2, 0.4),
                KernelKind::Ard => Hyperparameters { sigma_k2: 1.2, length_scales: vec![0.3, 0.7, 0.5] },
            };
            let (m, nug) = (-4.0, 1e-3);
            let gp = GPModel::with_hyperparameters(unit_box(3), x.clone(), y.clone(), kind, hp.clone(), m, nug).unwrap();
            let k: Vec<Vec<f64>> = (0..5)
                .map(|i| (0..5).map(|j| kernel(kind, &hp, &x[i], &x[j]) + if i == j { nug } else { 0.0 }).collect())
                .collect();
            let r: Vec<f64> = y.iter().map(|v| v - m).collect();
            let oracle = dense_lml(&k, &r);
            assert!((gp.log_marginal_likelihood() - oracle).abs() <= 1e-10 * oracle.abs());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (trial, kind) in [KernelKind::Isotropic, KernelKind::Ard, KernelKind::Isotropic, KernelKind::Ard]
            .into_iter()
            .enumerate()
        {
            let dim = 2 + trial % 2;
            let x = random_points(&mut rng, 5, dim);
            let u: Vec<f64> = x.concat();
            let resid: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let data = Data { u: &u, dim, resid: &resid, nugget: 1e-4, kind };
            let n_len = if kind == KernelKind::Ard { dim } else { 1 };
            let theta: Vec<f64> = (0..=n_len).map(|_| rng.random_range(-1.5..0.5)).collect();
            let (_, g) = data.objective(&theta).unwrap();
            for k in 0..theta.len() {
                let h = 1e-5;
                let mut tp = theta.clone();
                tp[k] += h;
                let mut tm = theta.clone();
                tm[k] -= h;
                let fd = (data.objective(&tp).unwrap().0 - data.objective(&tm).unwrap().0) / (2.0 * h);
                assert!((g[k] - fd).abs() <= 1e-5 * g[k].abs().max(1e-3), "{kind:?} {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn mean_is_linear_in_residuals() {
        let x = vec![vec![0.1], vec![0.4], vec![0.8]];
        let mk = |y: Vec<f64>| {
            GPModel::with_hyperparameters(unit_box(1), x.clone(), y, KernelKind::Isotropic, iso(1.0, 0.3), 0.0, 1e-4)
                .unwrap()
        };
        let a = mk(vec![1.0, 2.0, -1.0]);
        let b = mk(vec![0.5, -3.0, 2.0]);
        let ab = mk(vec![1.0 + 2.0 * 0.5, 2.0 - 6.0, -1.0 + 4.0]);
        let q = [0.63];
        let lhs = ab.predict_mean(&q).unwrap();
        let rhs = a.predict_mean(&q).unwrap() + 2.0 * b.predict_mean(&q).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn variance_shrinks_with_more_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_points(&mut rng, 9, 2);
        let queries = random_points(&mut rng, 20, 2);
        let mut prev: Option<Vec<f64>> = None;
        for n in 2..=9 {
            let gp = GPModel::with_hyperparameters(
                unit_box(2),
                x[..n].to_vec(),
                vec![0.0; n],
                KernelKind::Isotropic,
                iso(1.0, 0.2),
                0.0,
                0.0,
            )
            .unwrap();
            let vars: Vec<f64> = queries.iter().map(|q| gp.predict(q).unwrap().1).collect();
            if let Some(p) = &prev {
                for (a, b) in vars.iter().zip(p) {
                    assert!(*a <= b + 1e-10);
                }
            }
            prev = Some(vars);
        }
    }

    #[test]
    fn fit_recovers_at_least_generating_likelihood() {
        // sample y from a GP prior with known hyperparameters
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 30;
        let x = random_points(&mut rng, n, 2);
        let true_hp = iso(4.0, 0.35);
        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| kernel(KernelKind::Isotropic, &true_hp, &x[i], &x[j]) + if i == j { 1e-8 } else { 0.0 }).collect())
            .collect();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
                l[i][j] = if i == j { (k[i][i] - s).sqrt() } else { (k[i][j] - s) / l[j][j] };
            }
        }
        let z: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|i| (0..=i).map(|j| l[i][j] * z[j]).sum::<f64>() - 10.0).collect();
        let train = TrainingSet::new(x.clone(), y.iter().map(|v| Some(*v)).collect()).unwrap();
        let settings = GpSettings { kernel: KernelKind::Isotropic, restarts: 5, seed: 3 };
        let fitted = fit_gp(&train, &unit_box(2), &settings).unwrap();
        let generating = GPModel::with_hyperparameters(
            unit_box(2), x, y, KernelKind::Isotropic, true_hp, fitted.prior_mean(), fitted.nugget(),
        )
        .unwrap();
        assert!(fitted.log_marginal_likelihood() >= generating.log_marginal_likelihood() - 1e-6);
        assert_eq!(fitted.hyperparameters(), fit_gp(&train, &unit_box(2), &settings).unwrap().hyperparameters());
    }

    #[test]
    fn fit_handles_duplicates_and_failures() {
        let x = vec![vec![0.5], vec![0.5], vec![0.1], vec![0.9], vec![0.3]];
        let y = vec![Some(1.0), Some(1.2), Some(-2.0), None, Some(0.0)];
        let train = TrainingSet::new(x, y).unwrap();
        assert_eq!(train.failed_mask(), vec![false, false, false, true, false]);
        let gp = fit_gp(&train, &unit_box(1), &GpSettings::default()).unwrap();
        assert_eq!(gp.n_train(), 4);
        assert!(gp.predict_mean(&[0.5]).unwrap().is_finite());

        let few = TrainingSet::new(vec![vec![0.1], vec![0.2]], vec![Some(1.0), None]).unwrap();
        assert!(fit_gp(&few, &unit_box(1), &GpSettings::default()).is_err());
    }

    #[test]
    fn smooth_one_dimensional_fit() {
        let f = |x: f64| (2.0 * x).sin() + 0.5 * x;
        let bx = ParameterBox::new(vec![(0.0, 2.0)]).unwrap();
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.5]).collect();
        let train = TrainingSet::new(x.clone(), x.iter().map(|p| Some(f(p[0]))).collect()).unwrap();
        let gp = fit_gp(&train, &bx, &GpSettings::default()).unwrap();
        let test: Vec<Vec<f64>> = (0..20).map(|i| vec![0.05 + i as f64 * 0.095]).collect();
        let truth: Vec<f64> = test.iter().map(|p| f(p[0])).collect();
        let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let rms = test_error(&gp, &test, &truth).unwrap() / 20f64.sqrt();
        assert!(rms < 0.1 * (hi - lo), "rms {rms}");
    }

    #[test]
    fn test_error_examples() {
        let x = vec![vec![0.2], vec![0.7]];
        let gp = GPModel::with_hyperparameters(unit_box(1), x.clone(), vec![1.0, 2.0], KernelKind::Isotropic, iso(1.0, 0.3), 0.0, 0.0)
            .unwrap();
        assert!(test_error(&gp, &x, &[1.0, 2.0]).unwrap() < 1e-12);
        let off = test_error(&gp, &x, &[1.0 + 0.3, 2.0 + 0.3]).unwrap();
        assert!((off - 0.3 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_reproduces_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bx = ParameterBox::new(vec![(100.0, 800.0), (-0.8, 0.5)]).unwrap();
        let x: Vec<Vec<f64>> = random_points(&mut rng, 12, 2)
            .into_iter()
            .map(|u| bx.unstandardize(&u).unwrap())
            .collect();
        let y: Vec<f64> = x.iter().map(|p| -((p[0] - 400.0) / 100.0).powi(2) - p[1]).collect();
        let train = TrainingSet::new(x, y.into_iter().map(Some).collect()).unwrap();
        let gp = fit_gp(&train, &bx, &GpSettings { kernel: KernelKind::Ard, restarts: 2, seed: 1 }).unwrap();
        let back = GPModel::from_json(&gp.to_json().unwrap()).unwrap();
        for q in [[150.0, 0.0], [420.0, 0.3], [790.0, -0.7]] {
            let (a, b) = (gp.predict(&q).unwrap(), back.predict(&q).unwrap());
            assert!((a.0 - b.0).abs() <= 1e-10 * a.0.abs());
            assert!((a.1 - b.1).abs() <= 1e-10 * a.1.abs().max(1e-300));
        }
        assert!(gp.predict(&[1.0]).is_err());
    }
}
