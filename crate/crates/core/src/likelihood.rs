//! Gaussian likelihood of a discrepancy and synthetic observation generation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ForwardResult, ModelParams, UncertainConditions};
use crate::geometry::InterfaceMesh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    /// Noise standard deviation in mm.
    pub sigma_n: f64,
    pub n_terms: usize,
}

impl LikelihoodConfig {
    pub fn new(sigma_n: f64, n_terms: usize) -> Result<Self> {
        if !(sigma_n > 0.0 && sigma_n.is_finite()) || n_terms == 0 {
            return Err(Error::InvalidConfig(format!(
                "likelihood needs sigma_n > 0 and n_terms >= 1, got {sigma_n} and {n_terms}"
            )));
        }
        Ok(LikelihoodConfig { sigma_n, n_terms })
    }
}

/// `-(n/2) log(2 pi sigma^2) - D^2 / (2 sigma^2)`.
pub fn log_likelihood(d: f64, config: &LikelihoodConfig) -> f64 {
    let s2 = config.sigma_n * config.sigma_n;
    -0.5 * config.n_terms as f64 * (2.0 * std::f64::consts::PI * s2).ln() - d * d / (2.0 * s2)
}

/// Ground truth and noise settings that produced an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub params: ModelParams,
    pub theta: UncertainConditions,
    pub sigma_obs: f64,
    pub seed: u64,
}

/// Runs the model at the ground truth and perturbs every node coordinate by
/// independent `N(0, sigma_obs^2)` noise drawn from a generator seeded with `seed`.
pub fn generate_observation(
    model: &dyn ForwardModel,
    params_gt: &ModelParams,
    theta_gt: &UncertainConditions,
    sigma_obs: f64,
    seed: u64,
) -> Result<InterfaceMesh> {
    if !(sigma_obs >= 0.0 && sigma_obs.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "observation noise must be non-negative, got {sigma_obs}"
        )));
    }
    let mesh = match model.run(params_gt, theta_gt)? {
        ForwardResult::Deformed(m) => m,
        ForwardResult::Failed(reason) => return Err(Error::GroundTruthFailed(reason)),
    };
    if sigma_obs == 0.0 {
        return Ok(mesh);
    }
    let noise = Normal::new(0.0, sigma_obs).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = mesh
        .nodes()
        .iter()
        .map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)])
        .collect();
    mesh.with_nodes(nodes)
}

/// Writes the observation mesh and a `<stem>.provenance.json` sidecar next to it.
pub fn write_observation(path: &Path, mesh: &InterfaceMesh, provenance: &Provenance) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(mesh)?).map_err(|e| Error::io(path, e))?;
    let sidecar = provenance_path(path);
    std::fs::write(&sidecar, serde_json::to_string_pretty(provenance)?)
        .map_err(|e| Error::io(&sidecar, e))
}

pub fn provenance_path(observation: &Path) -> std::path::PathBuf {
    let stem = observation
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    observation.with_file_name(format!("{stem}.provenance.json"))
}
