//! Scalar discrepancy measures between a simulated and an observed interface.
//!
//! Three measures are provided:
//!
//! * [`euclid_mp`]: L2 norm of ray-cast distances at fixed measurement points,
//! * [`cpp`]: L2 norm of closest-point distances of every model node,
//! * [`rkhs_sc`]: surface-currents norm of the difference of the two normal
//!   fields under an RBF kernel on segment centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    closest_point_distance, compute_frames, ray_cast_distance, InterfaceMesh, MeasurementSpec,
    Point, SegmentFrame,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    EuclidMp,
    Cpp,
    RkhsSc,
}

/// How segment normals are scaled before entering the surface-currents sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalWeighting {
    #[default]
    SegmentLength,
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyConfig {
    pub measure: Measure,
    /// RBF length scale in mm; required for `rkhs_sc`.
    #[serde(default)]
    pub sigma_w: Option<f64>,
    #[serde(default)]
    pub normal_weighting: NormalWeighting,
}

impl DiscrepancyConfig {
    pub fn rkhs(sigma_w: f64, normal_weighting: NormalWeighting) -> Self {
        DiscrepancyConfig {
            measure: Measure::RkhsSc,
            sigma_w: Some(sigma_w),
            normal_weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.measure == Measure::RkhsSc {
            match self.sigma_w {
                Some(s) if s > 0.0 && s.is_finite() => {}
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "rkhs_sc needs sigma_w > 0, got {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Number of independent measurements entering the Gaussian likelihood.
    pub fn n_terms(&self, model_nodes: usize, spec: Option<&MeasurementSpec>) -> usize {
        match self.measure {
            Measure::EuclidMp => spec.map_or(1, MeasurementSpec::len),
            Measure::Cpp => model_nodes,
            Measure::RkhsSc => 1,
        }
    }
}

/// Euclidean distance at measurement points.
pub fn euclid_mp(model: &InterfaceMesh, spec: &MeasurementSpec) -> Result<f64> {
    let mut sum = 0.0;
    for (index, (&p, &d)) in spec.points().iter().zip(spec.directions()).enumerate() {
        let dist = ray_cast_distance(model, p, d).map_err(|e| match e {
            Error::NoIntersection { point, .. } => Error::NoIntersection {
                point,
                index: Some(index),
            },
            other => other,
        })?;
        sum += dist * dist;
    }
    Ok(sum.sqrt())
}

/// Closest point projection distance of every model node onto the observed interface.
pub fn cpp(model: &InterfaceMesh, observed: &InterfaceMesh) -> f64 {
    model
        .nodes()
        .iter()
        .map(|&p| closest_point_distance(observed, p).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn weighted_normals(frames: &[SegmentFrame], weighting: NormalWeighting) -> Vec<(Point, Point)> {
    frames
        .iter()
        .map(|f| {
            let w = match weighting {
                NormalWeighting::SegmentLength => f.length,
                NormalWeighting::Unit => 1.0,
            };
            (f.center, [w * f.normal[0], w * f.normal[1]])
        })
        .collect()
}

/// `Σ_i Σ_j m_a,i · m_b,j · k(c_a,i, c_b,j)` with an RBF kernel.
fn current_product(a: &[(Point, Point)], b: &[(Point, Point)], inv_two_sigma2: f64) -> f64 {
    let mut total = 0.0;
    for &(ca, ma) in a {
        let mut row = 0.0;
        for &(cb, mb) in b {
            let dx = ca[0] - cb[0];
            let dy = ca[1] - cb[1];
            let k = (-(dx * dx + dy * dy) * inv_two_sigma2).exp();
            row += k * (ma[0] * mb[0] + ma[1] * mb[1]);
        }
        total += row;
    }
    total
}

/// Surface-currents discrepancy between two frame lists.
///
/// Returns `sqrt(S11 - 2 S12 + S22)`. Small negative values of the quadratic
/// form (roundoff) are clamped to zero; anything below `-1e-10 · max(S11, S22)`
/// is reported as a numerical fault.
pub fn rkhs_sc(
    model_frames: &[SegmentFrame],
    obs_frames: &[SegmentFrame],
    config: &DiscrepancyConfig,
) -> Result<f64> {
    if model_frames.is_empty() || obs_frames.is_empty() {
        return Err(Error::Empty("surface-currents frame list"));
    }
    let sigma_w = match config.sigma_w {
        Some(s) if s > 0.0 => s,
        other => {
            return Err(Error::InvalidConfig(format!(
                "rkhs_sc needs sigma_w > 0, got {other:?}"
            )))
        }
    };
    let inv = 1.0 / (2.0 * sigma_w * sigma_w);
    let a = weighted_normals(model_frames, config.normal_weighting);
    let b = weighted_normals(obs_frames, config.normal_weighting);
    let s11 = current_product(&a, &a, inv);
    let s12 = current_product(&a, &b, inv);
    let s22 = current_product(&b, &b, inv);
    let q = s11 - 2.0 * s12 + s22;
    if q >= 0.0 {
        Ok(q.sqrt())
    } else if q >= -1e-10 * s11.max(s22) {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "surface-currents quadratic form is negative: {q:e}"
        )))
    }
}

/// Combines per-snapshot discrepancies of a multi-time comparison.
pub fn combine_snapshots(discrepancies: &[f64]) -> f64 {
    discrepancies.iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Precomputed observed-side data so repeated evaluations against one
/// observation do not redo the frame computation.
#[derive(Debug, Clone)]
pub struct Comparator {
    config: DiscrepancyConfig,
    observed: InterfaceMesh,
    observed_frames: Vec<SegmentFrame>,
    spec: Option<MeasurementSpec>,
}

impl Comparator {
    pub fn new(
        config: DiscrepancyConfig,
        observed: InterfaceMesh,
        spec: Option<MeasurementSpec>,
    ) -> Result<Self> {
        config.validate()?;
        if config.measure == Measure::EuclidMp && spec.is_none() {
            return Err(Error::InvalidConfig(
                "euclid_mp needs a measurement spec".into(),
            ));
        }
        let observed_frames = compute_frames(&observed)?;
        Ok(Comparator {
            config,
            observed,
            observed_frames,
            spec,
        })
    }

    pub fn config(&self) -> &DiscrepancyConfig {
        &self.config
    }

    pub fn observed(&self) -> &InterfaceMesh {
        &self.observed
    }

    pub fn n_terms(&self, model_nodes: usize) -> usize {
        self.config.n_terms(model_nodes, self.spec.as_ref())
    }

    pub fn discrepancy(&self, model: &InterfaceMesh) -> Result<f64> {
        match self.config.measure {
            Measure::EuclidMp => euclid_mp(model, self.spec.as_ref().expect("checked in new")),
            Measure::Cpp => Ok(cpp(model, &self.observed)),
            Measure::RkhsSc => rkhs_sc(&compute_frames(model)?, &self.observed_frames, &self.config),
        }
    }
}
