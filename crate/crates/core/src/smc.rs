//! Adaptive-tempering sequential Monte Carlo.
//!
//! Particles move from the prior to the posterior through the tempered
//! targets `exp(gamma L(x)) p(x)`. Each step picks the next `gamma` so the
//! effective sample size drops by the factor `zeta`, resamples when the ESS
//! falls below a threshold and rejuvenates with random-walk Metropolis moves
//! whose covariance is the scaled particle covariance.
//!
//! Every particle draws from its own generator stream keyed by
//! `(seed, step, sweep, index)`, and all reductions run in index order, so
//! results do not depend on the number of worker threads.

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::weighted_moments;
use crate::error::{Error, Result};
use crate::parameter_space::Prior;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub zeta: f64,
    #[serde(default = "default_ess_min_fraction")]
    pub ess_min_fraction: f64,
    pub n_rejuvenation: usize,
    /// Initial proposal scale as a multiple of `2.38 / sqrt(dim)`.
    #[serde(default = "default_scale")]
    pub proposal_scale_init: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ess_min_fraction() -> f64 {
    0.5
}

fn default_scale() -> f64 {
    1.0
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            n_particles: 5000,
            zeta: 0.995,
            ess_min_fraction: default_ess_min_fraction(),
            n_rejuvenation: 20,
            proposal_scale_init: default_scale(),
            seed: 0,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_particles >= 2
            && self.zeta > 0.0
            && self.zeta < 1.0
            && self.ess_min_fraction > 0.0
            && self.ess_min_fraction < 1.0
            && self.n_rejuvenation >= 1
            && self.proposal_scale_init > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid SMC settings {self:?}")))
        }
    }
}

/// Weighted particles stored flat, `dim` coordinates per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    dim: usize,
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    gamma: f64,
}

impl ParticleSet {
    pub fn new(dim: usize, positions: Vec<f64>, log_weights: Vec<f64>, gamma: f64) -> Result<Self> {
        if dim == 0 || log_weights.is_empty() {
            return Err(Error::Empty("particle set"));
        }
        if positions.len() != dim * log_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * log_weights.len(),
                got: positions.len(),
            });
        }
        let mut ps = ParticleSet {
            dim,
            positions,
            log_weights,
            gamma,
        };
        ps.normalize()?;
        Ok(ps)
    }

    /// Equally weighted particles.
    pub fn uniform(dim: usize, positions: Vec<f64>) -> Result<Self> {
        let n = positions.len() / dim.max(1);
        Self::new(dim, positions, vec![0.0; n], 0.0)
    }

    pub fn from_rows(rows: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Self::new(dim, rows.concat(), log_weights, 1.0)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.log_weights.iter().map(|l| (2.0 * l).exp()).sum::<f64>()
    }

    /// Shifts log-weights so their exponentials sum to one.
    pub fn normalize(&mut self) -> Result<()> {
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            return Err(Error::Numerical("particle weights are all zero or not finite".into()));
        }
        self.log_weights.iter_mut().for_each(|l| *l -= lse);
        Ok(())
    }

    /// Keeps the listed coordinates; weights are unchanged.
    pub fn marginalize(&self, keep: &[usize]) -> Result<ParticleSet> {
        if keep.is_empty() {
            return Err(Error::Empty("kept dimensions"));
        }
        if let Some(&bad) = keep.iter().find(|&&d| d >= self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: bad + 1,
            });
        }
        let positions = (0..self.len())
            .flat_map(|i| keep.iter().map(move |&d| self.positions[i * self.dim + d]))
            .collect();
        Ok(ParticleSet {
            dim: keep.len(),
            positions,
            log_weights: self.log_weights.clone(),
            gamma: self.gamma,
        })
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `1 / sum(w_i^2)` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        Ok(1.0 / s2)
    } else {
        Err(Error::Numerical("all particle weights are zero".into()))
    }
}

/// ESS of the weights `log_weights + delta * log_liks`.
fn ess_after(log_weights: &[f64], log_liks: &[f64], delta: f64) -> f64 {
    let m = log_weights
        .iter()
        .zip(log_liks)
        .map(|(w, l)| w + delta * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for (w, l) in log_weights.iter().zip(log_liks) {
        let e = (w + delta * l - m).exp();
        s1 += e;
        s2 += e * e;
    }
    s1 * s1 / s2
}

/// Next tempering exponent so that `ESS(gamma) ≈ zeta ESS(gamma_prev)`.
///
/// Returns exactly 1 when the full step keeps enough ESS. Otherwise bisects on
/// the increment to a width of `1e-8` and returns the end of the bracket whose
/// ESS still meets the target, unless that would not advance at all.
pub fn find_gamma_step(log_weights: &[f64], log_liks: &[f64], gamma_prev: f64, zeta: f64) -> f64 {
    let target = zeta * ess_after(log_weights, log_liks, 0.0);
    let span = 1.0 - gamma_prev;
    if ess_after(log_weights, log_liks, span) >= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, span);
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if ess_after(log_weights, log_liks, mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let step = if lo > 0.0 { lo } else { hi };
    (gamma_prev + step).min(1.0)
}

/// Multiplies the weights by `exp((gamma_new - gamma) L)` and renormalizes.
pub fn reweight(particles: &mut ParticleSet, log_liks: &[f64], gamma_new: f64) -> Result<()> {
    let delta = gamma_new - particles.gamma;
    if delta < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tempering exponent cannot decrease ({} -> {gamma_new})",
            particles.gamma
        )));
    }
    if delta > 0.0 {
        particles
            .log_weights
            .iter_mut()
            .zip(log_liks)
            .for_each(|(w, l)| *w += delta * l);
    }
    particles.gamma = gamma_new;
    particles.normalize()
}

/// `n` offspring indices drawn by systematic resampling with offset `u in [0, 1)`.
pub fn systematic_indices(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let last = weights.len() - 1;
    let mut out = Vec::with_capacity(n);
    let total: f64 = weights.iter().sum();
    let mut cum = weights[0] / total;
    let mut j = 0;
    for k in 0..n {
        let pos = (u + k as f64) / n as f64;
        while pos >= cum && j < last {
            j += 1;
            cum += weights[j] / total;
        }
        out.push(j);
    }
    out
}

/// Systematic resampling; returns the chosen parent of each new particle.
pub fn systematic_resample(particles: &mut ParticleSet, rng: &mut impl Rng) -> Vec<usize> {
    let idx = systematic_indices(&particles.weights(), particles.len(), rng.random::<f64>());
    let d = particles.dim;
    particles.positions = idx
        .iter()
        .flat_map(|&i| particles.positions[i * d..(i + 1) * d].to_vec())
        .collect();
    let n = particles.len() as f64;
    particles.log_weights.iter_mut().for_each(|l| *l = -n.ln());
    idx
}

/// SplitMix64 finalizer used to derive independent generator seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, step: u64, sweep: u64, index: u64) -> ChaCha8Rng {
    let key = mix(mix(mix(seed) ^ step) ^ sweep);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Per-particle cached values of the current run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub log_liks: Vec<f64>,
    pub log_priors: Vec<f64>,
}

/// Acceptance statistics of one rejuvenation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejuvenationStats {
    pub acceptance_rates: Vec<f64>,
    pub final_scale: f64,
}

/// Random-walk Metropolis sweeps targeting `exp(gamma L) prior`.
///
/// The proposal covariance is `c^2 Sigma`, with `Sigma` the weighted particle
/// covariance plus `1e-10` on the diagonal. After each sweep
/// `c = (1/9 + 8/9 R) 2.38 / sqrt(dim)` where `R` is the sweep acceptance rate.
/// Weights are left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn rejuvenate(
    particles: &mut ParticleSet,
    state: &mut ParticleState,
    log_lik: &(dyn Fn(&[f64]) -> f64 + Sync),
    prior: &Prior,
    n_sweeps: usize,
    scale: f64,
    seed: u64,
    step: u64,
) -> Result<RejuvenationStats> {
    let d = particles.dim;
    let n = particles.len();
    let (_, mut cov) = weighted_moments(particles);
    for (k, row) in cov.iter_mut().enumerate() {
        row[k] += 1e-10;
    }
    let sigma = Mat::<f64>::from_fn(d, d, |i, j| cov[i][j]);
    let llt = sigma.llt(Side::Lower).map_err(|e| {
        Error::NotPositiveDefinite(format!("particle covariance at step {step}: {e:?}"))
    })?;
    let lf = llt.L();
    let chol: Vec<f64> = (0..d * d).map(|k| if k % d <= k / d { lf[(k / d, k % d)] } else { 0.0 }).collect();
    let c_unit = 2.38 / (d as f64).sqrt();
    let gamma = particles.gamma;
    let mut c = scale;
    let mut rates = Vec::with_capacity(n_sweeps);

    for sweep in 0..n_sweeps {
        let positions = &particles.positions;
        let moves: Vec<Option<(Vec<f64>, f64, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, step, sweep as u64, i as u64);
                let x = &positions[i * d..(i + 1) * d];
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let prop: Vec<f64> = (0..d)
                    .map(|a| x[a] + c * (0..=a).map(|b| chol[a * d + b] * z[b]).sum::<f64>())
                    .collect();
                let log_u: f64 = rng.random::<f64>().ln();
                let lp = prior.log_pdf_unchecked(&prop);
                if lp == f64::NEG_INFINITY {
                    return None;
                }
                let ll = log_lik(&prop);
                if !ll.is_finite() {
                    return None;
                }
                let log_ratio = gamma * (ll - state.log_liks[i]) + (lp - state.log_priors[i]);
                (log_u < log_ratio).then_some((prop, ll, lp))
            })
            .collect();
        let mut accepted = 0usize;
        for (i, m) in moves.into_iter().enumerate() {
            if let Some((prop, ll, lp)) = m {
                particles.positions[i * d..(i + 1) * d].copy_from_slice(&prop);
                state.log_liks[i] = ll;
                state.log_priors[i] = lp;
                accepted += 1;
            }
        }
        let rate = accepted as f64 / n as f64;
        rates.push(rate);
        c = (1.0 / 9.0 + 8.0 / 9.0 * rate) * c_unit;
    }
    Ok(RejuvenationStats {
        acceptance_rates: rates,
        final_scale: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub gamma: f64,
    pub ess: f64,
    pub resampled: bool,
    pub acceptance_rate: f64,
    pub proposal_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmcTrace {
    pub steps: Vec<StepRecord>,
}

impl SmcTrace {
    pub fn gammas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.gamma).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SmcOutput {
    pub particles: ParticleSet,
    pub state: ParticleState,
    pub trace: SmcTrace,
}

impl SmcOutput {
    /// Unnormalized log posterior `L + log p` of every particle.
    pub fn scores(&self) -> Vec<f64> {
        self.state
            .log_liks
            .iter()
            .zip(&self.state.log_priors)
            .map(|(l, p)| l + p)
            .collect()
    }
}

/// Runs the tempering loop from the prior to `exp(L) prior`.
pub fn run_smc(
    log_lik: &(dyn Fn(&[f64]) -> f64 + Sync),
    prior: &Prior,
    config: &SmcConfig,
) -> Result<SmcOutput> {
    config.validate()?;
    let d = prior.dim();
    let n = config.n_particles;
    let draws = prior.sample(mix(config.seed ^ 0x5EED), n);
    let lls: Vec<f64> = draws.par_iter().map(|x| log_lik(x)).collect();
    if let Some((index, value)) = lls.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLogLik {
            index,
            point: draws[index].clone(),
            value: *value,
        });
    }
    let mut state = ParticleState {
        log_priors: draws.iter().map(|x| prior.log_pdf_unchecked(x)).collect(),
        log_liks: lls,
    };
    let mut particles = ParticleSet::uniform(d, draws.concat())?;
    let c_unit = 2.38 / (d as f64).sqrt();
    let mut scale = config.proposal_scale_init * c_unit;
    let mut trace = SmcTrace::default();
    let ess_min = config.ess_min_fraction * n as f64;

    let mut step = 0u64;
    while particles.gamma < 1.0 {
        step += 1;
        let gamma = find_gamma_step(&particles.log_weights, &state.log_liks, particles.gamma, config.zeta);
        reweight(&mut particles, &state.log_liks, gamma)?;
        let ess = particles.ess();
        let resampled = ess < ess_min;
        if resampled {
            let mut rng = stream(config.seed, step, u64::MAX, 0);
            let idx = systematic_resample(&mut particles, &mut rng);
            state.log_liks = idx.iter().map(|&i| state.log_liks[i]).collect();
            state.log_priors = idx.iter().map(|&i| state.log_priors[i]).collect();
        }
        let stats = rejuvenate(
            &mut particles,
            &mut state,
            log_lik,
            prior,
            config.n_rejuvenation,
            scale,
            config.seed,
            step,
        )?;
        scale = stats.final_scale;
        let mean_rate =
            stats.acceptance_rates.iter().sum::<f64>() / stats.acceptance_rates.len() as f64;
        trace.steps.push(StepRecord {
            gamma,
            ess,
            resampled,
            acceptance_rate: mean_rate,
            proposal_scale: scale,
        });
    }
    particles.normalize()?;
    Ok(SmcOutput {
        particles,
        state,
        trace,
    })
}
