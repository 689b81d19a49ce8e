//! Priors, parameter boxes and the Sobol space-filling design.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF};

use crate::error::{Error, Result};

/// One independent prior factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Uniform { lo: f64, hi: f64 },
    /// `ln(x) ~ Normal(mu_ln, sigma_ln^2)`.
    LogNormal { mu_ln: f64, sigma_ln: f64 },
    /// Standard beta rescaled to `[lo, hi]`.
    BetaOnInterval { a: f64, b: f64, lo: f64, hi: f64 },
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Marginal::Uniform { lo, hi } => lo < hi && lo.is_finite() && hi.is_finite(),
            Marginal::LogNormal { mu_ln, sigma_ln } => sigma_ln > 0.0 && mu_ln.is_finite(),
            Marginal::BetaOnInterval { a, b, lo, hi } => {
                a > 0.0 && b > 0.0 && lo < hi && lo.is_finite() && hi.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid prior {self:?}")))
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Marginal::LogNormal { mu_ln, sigma_ln } => {
                if x > 0.0 {
                    statrs::distribution::LogNormal::new(mu_ln, sigma_ln)
                        .expect("validated")
                        .ln_pdf(x)
                } else {
                    f64::NEG_INFINITY
                }
            }
            Marginal::BetaOnInterval { a, b, lo, hi } => {
                let u = (x - lo) / (hi - lo);
                if !(0.0..=1.0).contains(&u) {
                    return f64::NEG_INFINITY;
                }
                statrs::distribution::Beta::new(a, b).expect("validated").ln_pdf(u) - (hi - lo).ln()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Uniform { lo, hi } => 0.5 * (lo + hi),
            Marginal::LogNormal { mu_ln, sigma_ln } => (mu_ln + 0.5 * sigma_ln * sigma_ln).exp(),
            Marginal::BetaOnInterval { a, b, lo, hi } => lo + (hi - lo) * a / (a + b),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Marginal::LogNormal { mu_ln, sigma_ln } => {
                let s2 = sigma_ln * sigma_ln;
                (s2.exp() - 1.0) * (2.0 * mu_ln + s2).exp()
            }
            Marginal::BetaOnInterval { a, b, lo, hi } => {
                (hi - lo).powi(2) * a * b / ((a + b).powi(2) * (a + b + 1.0))
            }
        }
    }

    /// Finite interval covering the support; log-normal tails are cut at the
    /// 0.1 % and 99.9 % quantiles.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Marginal::Uniform { lo, hi } | Marginal::BetaOnInterval { lo, hi, .. } => (lo, hi),
            Marginal::LogNormal { mu_ln, sigma_ln } => {
                let d = statrs::distribution::LogNormal::new(mu_ln, sigma_ln).expect("validated");
                (d.inverse_cdf(0.001), d.inverse_cdf(0.999))
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Marginal::Uniform { lo, hi } => rand_distr::Uniform::new_inclusive(lo, hi)
                .expect("validated")
                .sample(rng),
            Marginal::LogNormal { mu_ln, sigma_ln } => rand_distr::LogNormal::new(mu_ln, sigma_ln)
                .expect("validated")
                .sample(rng),
            Marginal::BetaOnInterval { a, b, lo, hi } => {
                lo + (hi - lo) * rand_distr::Beta::new(a, b).expect("validated").sample(rng)
            }
        }
    }
}

/// Product of independent one-dimensional priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Marginal>", into = "Vec<Marginal>")]
pub struct Prior {
    marginals: Vec<Marginal>,
}

impl TryFrom<Vec<Marginal>> for Prior {
    type Error = Error;

    fn try_from(marginals: Vec<Marginal>) -> Result<Self> {
        Prior::new(marginals)
    }
}

impl From<Prior> for Vec<Marginal> {
    fn from(p: Prior) -> Self {
        p.marginals
    }
}

impl Prior {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::Empty("prior"));
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Prior { marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    /// Prior of the concatenated vector `(self, other)`.
    pub fn concat(&self, other: &Prior) -> Prior {
        Prior {
            marginals: self.marginals.iter().chain(&other.marginals).copied().collect(),
        }
    }

    /// Sum of per-dimension log densities; `-inf` off the support.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.log_pdf_unchecked(x))
    }

    pub(crate) fn log_pdf_unchecked(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (m, &v) in self.marginals.iter().zip(x) {
            total += m.ln_pdf(v);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }

    /// `n` independent draws, deterministic in `seed`.
    pub fn sample(&self, seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.marginals.iter().map(|m| m.sample(&mut rng)).collect())
            .collect()
    }

    /// Box covering the prior support.
    pub fn bounding_box(&self) -> ParameterBox {
        ParameterBox {
            bounds: self.marginals.iter().map(Marginal::bounds).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct ParameterBox {
    bounds: Vec<(f64, f64)>,
}

impl TryFrom<Vec<(f64, f64)>> for ParameterBox {
    type Error = Error;

    fn try_from(bounds: Vec<(f64, f64)>) -> Result<Self> {
        ParameterBox::new(bounds)
    }
}

impl From<ParameterBox> for Vec<(f64, f64)> {
    fn from(b: ParameterBox) -> Self {
        b.bounds
    }
}

impl ParameterBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Empty("parameter box"));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "box dimension {i}: need lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(ParameterBox { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn concat(&self, other: &ParameterBox) -> ParameterBox {
        ParameterBox {
            bounds: self.bounds.iter().chain(&other.bounds).copied().collect(),
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
            })
        }
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect())
    }

    pub fn unstandardize(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u.len())?;
        Ok(u.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect())
    }
}

/// Affine map of unit-cube points into `bx`.
pub fn design_to_box(points: &[Vec<f64>], bx: &ParameterBox) -> Result<Vec<Vec<f64>>> {
    points.iter().map(|u| bx.unstandardize(u)).collect()
}

/// Joe–Kuo (new-joe-kuo-6.21201) primitive polynomials for dimensions 2..=16:
/// degree `s`, coefficient bits `a` and initial direction integers `m`.
const JOE_KUO: [(u32, u32, &[u32]); 15] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

pub const SOBOL_MAX_DIM: usize = JOE_KUO.len() + 1;
const BITS: usize = 32;

fn direction_numbers(dim: usize) -> Vec<[u32; BITS]> {
    let mut out = Vec::with_capacity(dim);
    // first dimension: van der Corput
    let mut v = [0u32; BITS];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = 1 << (BITS - 1 - k);
    }
    out.push(v);
    for &(s, a, m) in JOE_KUO.iter().take(dim - 1) {
        let s = s as usize;
        let mut v = [0u32; BITS];
        for k in 0..s {
            v[k] = m[k] << (BITS - 1 - k);
        }
        for k in s..BITS {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for j in 1..s {
                if (a >> (s - 1 - j)) & 1 == 1 {
                    x ^= v[k - j];
                }
            }
            v[k] = x;
        }
        out.push(v);
    }
    out
}

/// Points `skip .. skip + n` of the unscrambled Sobol sequence in `[0, 1)^dim`.
///
/// Gray-code construction; point 0 is the origin, so the customary `skip = 1`
/// starts at `(0.5, ..., 0.5)`. Prefixes of longer designs equal shorter designs.
pub fn sobol_points(dim: usize, n: usize, skip: usize) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || n == 0 {
        return Err(Error::InvalidConfig("Sobol design needs dim >= 1 and n >= 1".into()));
    }
    if dim > SOBOL_MAX_DIM {
        return Err(Error::InvalidConfig(format!(
            "Sobol direction numbers available up to {SOBOL_MAX_DIM} dimensions, requested {dim}"
        )));
    }
    if (skip + n) as u64 > 1u64 << BITS {
        return Err(Error::InvalidConfig("Sobol index range exhausted".into()));
    }
    let v = direction_numbers(dim);
    let scale = 1.0 / (1u64 << BITS) as f64;
    // state for Gray-code index `skip`
    let gray = skip ^ (skip >> 1);
    let mut x: Vec<u32> = v
        .iter()
        .map(|vd| {
            (0..BITS)
                .filter(|&k| (gray >> k) & 1 == 1)
                .fold(0u32, |acc, k| acc ^ vd[k])
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in skip..skip + n {
        out.push(x.iter().map(|&xi| xi as f64 * scale).collect());
        let c = (!i).trailing_zeros() as usize;
        if c < BITS {
            for (xd, vd) in x.iter_mut().zip(&v) {
                *xd ^= vd[c];
            }
        }
    }
    Ok(out)
}

/// Writes a design as CSV with a header row naming each column.
pub fn write_design_csv(path: &Path, names: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", names.join(",")).expect("in-memory write");
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(buf, "{}", cells.join(",")).expect("in-memory write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
