//! Forward models mapping material parameters and uncertain conditions to a
//! deformed interface.
//!
//! [`BendingBump`] is the built-in synthetic model: a semicircular bump on a
//! floor whose nodes bend downstream in proportion to the inflow and to a
//! cumulative, height-banded compliance. [`SubprocessModel`] wraps an
//! external solver through a file protocol.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::InterfaceMesh;

/// Young's modulus (Pa) and Poisson's ratio of one subdomain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub e: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Material>", into = "Vec<Material>")]
pub struct ModelParams {
    subdomains: Vec<Material>,
}

impl TryFrom<Vec<Material>> for ModelParams {
    type Error = Error;

    fn try_from(subdomains: Vec<Material>) -> Result<Self> {
        ModelParams::new(subdomains)
    }
}

impl From<ModelParams> for Vec<Material> {
    fn from(p: ModelParams) -> Self {
        p.subdomains
    }
}

impl ModelParams {
    pub fn new(subdomains: Vec<Material>) -> Result<Self> {
        if subdomains.is_empty() {
            return Err(Error::Empty("material subdomains"));
        }
        for (i, m) in subdomains.iter().enumerate() {
            if !(m.e > 0.0 && m.e.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "subdomain {i}: Young's modulus must be positive, got {}",
                    m.e
                )));
            }
            if !(m.nu > -1.0 && m.nu < 0.5) {
                return Err(Error::InvalidConfig(format!(
                    "subdomain {i}: Poisson's ratio must lie in (-1, 0.5), got {}",
                    m.nu
                )));
            }
        }
        Ok(ModelParams { subdomains })
    }

    pub fn homogeneous(e: f64, nu: f64) -> Result<Self> {
        Self::new(vec![Material { e, nu }])
    }

    /// Parses the flat layout `[E_1, nu_1, E_2, nu_2, ...]`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "parameter vector needs (E, nu) pairs, got {} values",
                values.len()
            )));
        }
        Self::new(
            values
                .chunks(2)
                .map(|c| Material { e: c[0], nu: c[1] })
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.subdomains.iter().flat_map(|m| [m.e, m.nu]).collect()
    }

    pub fn subdomains(&self) -> &[Material] {
        &self.subdomains
    }
}

/// Uncertain experimental conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainConditions {
    /// Inflow volume rate in mm²/s.
    pub v_in: f64,
}

impl UncertainConditions {
    pub fn new(v_in: f64) -> Result<Self> {
        if !(v_in >= 0.0 && v_in.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "inflow rate must be non-negative, got {v_in}"
            )));
        }
        Ok(UncertainConditions { v_in })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardResult {
    Deformed(InterfaceMesh),
    Failed(String),
}

impl ForwardResult {
    pub fn mesh(&self) -> Option<&InterfaceMesh> {
        match self {
            ForwardResult::Deformed(m) => Some(m),
            ForwardResult::Failed(_) => None,
        }
    }
}

/// A simulator producing a deformed interface from parameters and conditions.
///
/// Implementations must be safe to call concurrently.
pub trait ForwardModel: Send + Sync {
    /// The undeformed interface.
    fn reference(&self) -> &InterfaceMesh;

    /// Runs the model. A failed simulation is a [`ForwardResult::Failed`]
    /// value; `Err` is reserved for infrastructure problems.
    fn run(&self, params: &ModelParams, theta: &UncertainConditions) -> Result<ForwardResult>;
}

/// Semicircular arc of radius `radius` centered at `(1, 0)`, ordered left to right.
pub fn reference_bump(radius: f64, n_seg: usize) -> Result<InterfaceMesh> {
    if !(radius > 0.0) || n_seg < 4 {
        return Err(Error::InvalidConfig(format!(
            "reference bump needs R > 0 and at least 4 segments, got R = {radius}, n_seg = {n_seg}"
        )));
    }
    let nodes = (0..=n_seg)
        .map(|k| {
            if k == 0 {
                return [1.0 - radius, 0.0];
            }
            if k == n_seg {
                return [1.0 + radius, 0.0];
            }
            let phi = std::f64::consts::PI - k as f64 * std::f64::consts::PI / n_seg as f64;
            [1.0 + radius * phi.cos(), (radius * phi.sin()).max(0.0)]
        })
        .collect();
    InterfaceMesh::open(nodes)
}

/// Constants of the synthetic bending response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpConstants {
    /// Poisson coupling in the effective stiffness `E (1 + kappa nu)`.
    pub kappa: f64,
    /// Vertical contraction factor.
    pub beta: f64,
    /// Load amplitude in Pa·s/mm².
    pub amplitude: f64,
    /// Horizontal displacement (mm) beyond which the run fails.
    pub u_max: f64,
}

impl Default for BumpConstants {
    fn default() -> Self {
        BumpConstants {
            kappa: 0.5,
            beta: 0.3,
            amplitude: 0.92,
            u_max: 0.15,
        }
    }
}

/// Synthetic deformable-interface model.
#[derive(Debug, Clone)]
pub struct BendingBump {
    radius: f64,
    constants: BumpConstants,
    reference: InterfaceMesh,
}

impl BendingBump {
    pub fn new(radius: f64, n_seg: usize, constants: BumpConstants) -> Result<Self> {
        Ok(BendingBump {
            radius,
            constants,
            reference: reference_bump(radius, n_seg)?,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn constants(&self) -> &BumpConstants {
        &self.constants
    }

    /// Cumulative compliances `(s(y), s_nu(y))` at height `y`.
    ///
    /// The height range `[0, R]` is split into as many equal bands as there
    /// are subdomains, band 1 at the base. Each band contributes
    /// `∫ 2t/R² dt / E_eff` over the part of it below `y`.
    pub fn compliance(&self, params: &ModelParams, y: f64) -> (f64, f64) {
        let r = self.radius;
        let bands = params.subdomains();
        let k = bands.len() as f64;
        let y = y.clamp(0.0, r);
        let (mut s, mut s_nu) = (0.0, 0.0);
        for (i, m) in bands.iter().enumerate() {
            let lo = r * i as f64 / k;
            if y <= lo {
                break;
            }
            let hi = if i + 1 == bands.len() {
                r
            } else {
                r * (i + 1) as f64 / k
            };
            let top = y.min(hi);
            let e_eff = m.e * (1.0 + self.constants.kappa * m.nu);
            let piece = (top * top - lo * lo) / (r * r * e_eff);
            s += piece;
            s_nu += piece * m.nu;
        }
        (s, s_nu)
    }

    /// Node displacement `(u_x, u_y)` at reference height `y`.
    pub fn displacement(&self, params: &ModelParams, theta: &UncertainConditions, y: f64) -> [f64; 2] {
        let (s, s_nu) = self.compliance(params, y);
        let load = self.constants.amplitude * theta.v_in * self.radius;
        [load * s, -self.constants.beta * load * s_nu]
    }

    pub fn deform(&self, params: &ModelParams, theta: &UncertainConditions) -> ForwardResult {
        let mut nodes = Vec::with_capacity(self.reference.node_count());
        let mut max_ux = 0.0f64;
        for p in self.reference.nodes() {
            let u = self.displacement(params, theta, p[1]);
            max_ux = max_ux.max(u[0]);
            nodes.push([p[0] + u[0], p[1] + u[1]]);
        }
        if max_ux > self.constants.u_max {
            return ForwardResult::Failed("distortion".into());
        }
        match self.reference.with_nodes(nodes) {
            Ok(mesh) => ForwardResult::Deformed(mesh),
            Err(e) => ForwardResult::Failed(e.to_string()),
        }
    }
}

impl ForwardModel for BendingBump {
    fn reference(&self) -> &InterfaceMesh {
        &self.reference
    }

    fn run(&self, params: &ModelParams, theta: &UncertainConditions) -> Result<ForwardResult> {
        Ok(self.deform(params, theta))
    }
}

/// Input record written for an external solver.
#[derive(Debug, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub subdomains: Vec<Material>,
    pub v_in: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AdapterResponse {
    Failure { failed: String },
    Mesh(InterfaceMesh),
}

/// Wraps an external solver.
///
/// For each run the adapter writes `params.json` (an [`AdapterRequest`]) into a
/// fresh directory, invokes `program args... <params.json> <result.json>` and
/// reads back either a mesh document `{"nodes": [[x, y], ...], "closed": false}`
/// or a failure record `{"failed": "reason"}`.
#[derive(Debug, Clone)]
pub struct SubprocessModel {
    program: PathBuf,
    args: Vec<String>,
    workdir: PathBuf,
    reference: InterfaceMesh,
}

impl SubprocessModel {
    pub fn new(
        program: impl Into<PathBuf>,
        args: Vec<String>,
        workdir: impl Into<PathBuf>,
        reference: InterfaceMesh,
    ) -> Self {
        SubprocessModel {
            program: program.into(),
            args,
            workdir: workdir.into(),
            reference,
        }
    }

    fn run_dir(&self, params: &ModelParams, theta: &UncertainConditions) -> PathBuf {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in params.to_flat().iter().chain([theta.v_in].iter()) {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let tag: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        self.workdir.join(format!("run-{tag}"))
    }
}

impl ForwardModel for SubprocessModel {
    fn reference(&self) -> &InterfaceMesh {
        &self.reference
    }

    fn run(&self, params: &ModelParams, theta: &UncertainConditions) -> Result<ForwardResult> {
        let dir = self.run_dir(params, theta);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let input = dir.join("params.json");
        let output = dir.join("result.json");
        let request = AdapterRequest {
            subdomains: params.subdomains().to_vec(),
            v_in: theta.v_in,
        };
        std::fs::write(&input, serde_json::to_vec_pretty(&request)?)
            .map_err(|e| Error::io(&input, e))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::Adapter(format!("cannot start {}: {e}", self.program.display())))?;
        if !status.success() {
            return Ok(ForwardResult::Failed(format!("solver exited with {status}")));
        }
        let text = std::fs::read_to_string(&output).map_err(|e| Error::io(&output, e))?;
        let response: AdapterResponse = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: output.clone(),
            reason: e.to_string(),
        })?;
        Ok(match response {
            AdapterResponse::Failure { failed } => ForwardResult::Failed(failed),
            AdapterResponse::Mesh(mesh) => {
                if mesh.node_count() != self.reference.node_count() {
                    return Err(Error::Adapter(format!(
                        "solver returned {} nodes, reference has {}",
                        mesh.node_count(),
                        self.reference.node_count()
                    )));
                }
                ForwardResult::Deformed(mesh)
            }
        })
    }
}
