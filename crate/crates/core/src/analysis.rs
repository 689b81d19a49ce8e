//! Post-processing of weighted particle sets: moments, point estimates,
//! marginal histograms, kernel density estimates, the Laplace approximation
//! and the exported tables.

use std::collections::BTreeMap;
use std::path::Path;

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smc::ParticleSet;

/// Weighted mean and covariance of the particle positions.
pub fn weighted_moments(particles: &ParticleSet) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = particles.dim();
    let w = particles.weights();
    let mut mean = vec![0.0; d];
    for (i, wi) in w.iter().enumerate() {
        for (m, x) in mean.iter_mut().zip(particles.position(i)) {
            *m += wi * x;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (i, wi) in w.iter().enumerate() {
        let x = particles.position(i);
        for a in 0..d {
            let da = x[a] - mean[a];
            for b in 0..=a {
                cov[a][b] += wi * da * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[b][a] = cov[a][b];
        }
    }
    (mean, cov)
}

pub fn marginalize(particles: &ParticleSet, keep: &[usize]) -> Result<ParticleSet> {
    particles.marginalize(keep)
}

/// Index of the highest score; ties go to the lowest index.
pub fn map_index(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("particle scores"));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn map_from_particles(particles: &ParticleSet, scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != particles.len() {
        return Err(Error::DimensionMismatch {
            expected: particles.len(),
            got: scores.len(),
        });
    }
    Ok(particles.position(map_index(scores)?).to_vec())
}

/// Rectangular bins over the particle bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub lo: Vec<f64>,
    pub width: Vec<f64>,
    pub bins: usize,
}

impl Binning {
    pub fn over(particles: &ParticleSet, bins: usize) -> Result<Binning> {
        if bins < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 bins per dimension, got {bins}")));
        }
        let d = particles.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..particles.len() {
            for (k, x) in particles.position(i).iter().enumerate() {
                lo[k] = lo[k].min(*x);
                hi[k] = hi[k].max(*x);
            }
        }
        let width = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| if b > a { (b - a) / bins as f64 } else { 1.0 })
            .collect();
        Ok(Binning { lo, width, bins })
    }

    pub fn index(&self, k: usize, x: f64) -> usize {
        let b = ((x - self.lo[k]) / self.width[k]).floor();
        (b.max(0.0) as usize).min(self.bins - 1)
    }

    pub fn center(&self, k: usize, b: usize) -> f64 {
        self.lo[k] + (b as f64 + 0.5) * self.width[k]
    }
}

/// Summed weight per occupied bin, keyed by the bin index vector.
fn bin_masses(particles: &ParticleSet, binning: &Binning, dims: &[usize]) -> BTreeMap<Vec<usize>, f64> {
    let w = particles.weights();
    let mut mass = BTreeMap::new();
    for (i, wi) in w.iter().enumerate() {
        let x = particles.position(i);
        let key: Vec<usize> = dims.iter().map(|&k| binning.index(k, x[k])).collect();
        *mass.entry(key).or_insert(0.0) += wi;
    }
    mass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedMap {
    pub center: Vec<f64>,
    pub bin: Vec<usize>,
    pub bins_per_dim: usize,
}

/// Center of the heaviest bin; ties go to the lexicographically smallest bin.
pub fn map_binned(particles: &ParticleSet, bins_per_dim: usize) -> Result<BinnedMap> {
    let binning = Binning::over(particles, bins_per_dim)?;
    let dims: Vec<usize> = (0..particles.dim()).collect();
    let mut best: Option<(&Vec<usize>, f64)> = None;
    let masses = bin_masses(particles, &binning, &dims);
    for (key, m) in &masses {
        if best.is_none_or(|(_, bm)| *m > bm) {
            best = Some((key, *m));
        }
    }
    let (bin, _) = best.ok_or(Error::Empty("particle set"))?;
    Ok(BinnedMap {
        center: bin.iter().enumerate().map(|(k, b)| binning.center(k, *b)).collect(),
        bin: bin.clone(),
        bins_per_dim,
    })
}

/// Marginal histogram over `dims`: one row of bin centers plus the bin mass
/// per occupied bin, in bin-index order.
pub fn histogram(particles: &ParticleSet, dims: &[usize], bins: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if let Some(&bad) = dims.iter().find(|&&d| d >= particles.dim()) {
        return Err(Error::DimensionMismatch {
            expected: particles.dim(),
            got: bad + 1,
        });
    }
    let binning = Binning::over(particles, bins)?;
    Ok(bin_masses(particles, &binning, dims)
        .into_iter()
        .map(|(key, m)| {
            let c = key.iter().zip(dims).map(|(b, &k)| binning.center(k, *b)).collect();
            (c, m)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    #[default]
    Silverman,
    LooGrid,
}

fn weighted_std(particles: &ParticleSet) -> Vec<f64> {
    let (_, cov) = weighted_moments(particles);
    (0..particles.dim()).map(|k| cov[k][k].sqrt()).collect()
}

/// Per-dimension Silverman bandwidth with the ESS as sample size.
pub fn silverman_bandwidth(particles: &ParticleSet) -> Vec<f64> {
    let d = particles.dim() as f64;
    let factor = (4.0 / ((d + 2.0) * particles.ess())).powf(1.0 / (d + 4.0));
    weighted_std(particles).into_iter().map(|s| s * factor).collect()
}

fn gauss_kernel(x: &[f64], y: &[f64], h: &[f64]) -> f64 {
    let mut e = 0.0;
    let mut norm = 1.0;
    for ((a, b), hk) in x.iter().zip(y).zip(h) {
        let z = (a - b) / hk;
        e += z * z;
        norm *= hk * (2.0 * std::f64::consts::PI).sqrt();
    }
    (-0.5 * e).exp() / norm
}

/// Gaussian product-kernel density estimate with explicit bandwidths.
pub fn kde_with_bandwidth(particles: &ParticleSet, queries: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
    let w = particles.weights();
    queries
        .iter()
        .map(|q| {
            w.iter()
                .enumerate()
                .map(|(i, wi)| wi * gauss_kernel(q, particles.position(i), h))
                .sum()
        })
        .collect()
}

/// Weighted leave-one-out log density of the particles themselves.
fn loo_score(particles: &ParticleSet, w: &[f64], h: &[f64]) -> f64 {
    let n = particles.len();
    let mut score = 0.0;
    for i in 0..n {
        if w[i] >= 1.0 {
            continue;
        }
        let mut dens = 0.0;
        for j in 0..n {
            if j != i {
                dens += w[j] * gauss_kernel(particles.position(i), particles.position(j), h);
            }
        }
        score += w[i] * (dens / (1.0 - w[i])).ln();
    }
    score
}

pub fn select_bandwidth(particles: &ParticleSet, mode: BandwidthMode) -> Result<Vec<f64>> {
    let first = particles.position(0);
    if (1..particles.len()).all(|i| particles.position(i) == first) {
        return Err(Error::InvalidConfig(
            "KDE needs at least two distinct particle positions".into(),
        ));
    }
    let base: Vec<f64> = silverman_bandwidth(particles)
        .into_iter()
        .map(|h| if h > 0.0 { h } else { f64::MIN_POSITIVE.sqrt() })
        .collect();
    match mode {
        BandwidthMode::Silverman => Ok(base),
        BandwidthMode::LooGrid => {
            let w = particles.weights();
            let mut best = (f64::NEG_INFINITY, base.clone());
            for k in 0..20 {
                let f = (0.2f64.ln() + (25f64).ln() * k as f64 / 19.0).exp();
                let h: Vec<f64> = base.iter().map(|b| b * f).collect();
                let s = loo_score(particles, &w, &h);
                if s > best.0 {
                    best = (s, h);
                }
            }
            Ok(best.1)
        }
    }
}

/// Weighted KDE at the query points with an automatically selected bandwidth.
pub fn weighted_kde(particles: &ParticleSet, queries: &[Vec<f64>], mode: BandwidthMode) -> Result<Vec<f64>> {
    let h = select_bandwidth(particles, mode)?;
    Ok(kde_with_bandwidth(particles, queries, &h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianApprox {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Gaussian fit from the curvature of `log_post` at `map_point`.
///
/// The Hessian uses central differences with absolute steps `steps`; the
/// covariance is the inverse of the negative Hessian.
pub fn laplace_approximation(
    log_post: &dyn Fn(&[f64]) -> f64,
    map_point: &[f64],
    steps: &[f64],
) -> Result<GaussianApprox> {
    let d = map_point.len();
    if steps.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: steps.len(),
        });
    }
    let f = |offsets: &[(usize, f64)]| {
        let mut x = map_point.to_vec();
        for &(k, s) in offsets {
            x[k] += s;
        }
        log_post(&x)
    };
    let f0 = log_post(map_point);
    let mut neg_h = Mat::<f64>::zeros(d, d);
    for a in 0..d {
        let ha = steps[a];
        let v = (f(&[(a, ha)]) - 2.0 * f0 + f(&[(a, -ha)])) / (ha * ha);
        neg_h[(a, a)] = -v;
        for b in 0..a {
            let hb = steps[b];
            let v = (f(&[(a, ha), (b, hb)]) - f(&[(a, ha), (b, -hb)]) - f(&[(a, -ha), (b, hb)])
                + f(&[(a, -ha), (b, -hb)]))
                / (4.0 * ha * hb);
            neg_h[(a, b)] = -v;
            neg_h[(b, a)] = -v;
        }
    }
    if (0..d).any(|a| (0..d).any(|b| !neg_h[(a, b)].is_finite())) {
        return Err(Error::NonPdHessian);
    }
    let llt = neg_h.llt(Side::Lower).map_err(|_| Error::NonPdHessian)?;
    let inv = llt.inverse();
    Ok(GaussianApprox {
        mean: map_point.to_vec(),
        cov: (0..d).map(|a| (0..d).map(|b| inv[(a, b)]).collect()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapParticle {
    pub index: usize,
    pub position: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_particles: usize,
    pub ess: f64,
    pub pm: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub map_particle: MapParticle,
    pub map_binned: BinnedMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laplace: Option<GaussianApprox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laplace_error: Option<String>,
}

pub fn summarize(particles: &ParticleSet, scores: &[f64], bins_per_dim: usize) -> Result<PosteriorSummary> {
    let (pm, cov) = weighted_moments(particles);
    let index = map_index(scores)?;
    Ok(PosteriorSummary {
        n_particles: particles.len(),
        ess: particles.ess(),
        pm,
        cov,
        map_particle: MapParticle {
            index,
            position: particles.position(index).to_vec(),
            score: scores[index],
        },
        map_binned: map_binned(particles, bins_per_dim)?,
        laplace: None,
        laplace_error: None,
    })
}

/// Particle table row as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleTable {
    pub n_params: usize,
    pub n_theta: usize,
    pub rows: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub log_liks: Vec<f64>,
    pub log_priors: Vec<f64>,
}

impl ParticleTable {
    pub fn particles(&self) -> Result<ParticleSet> {
        ParticleSet::from_rows(&self.rows, &self.weights)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.log_liks.iter().zip(&self.log_priors).map(|(l, p)| l + p).collect()
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn coord_names(n_params: usize, n_theta: usize) -> Vec<String> {
    (0..n_params)
        .map(|i| format!("param_{i}"))
        .chain((0..n_theta).map(|i| format!("theta_{i}")))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_particles_csv(
    path: &Path,
    particles: &ParticleSet,
    n_params: usize,
    log_liks: &[f64],
    log_priors: &[f64],
) -> Result<()> {
    let n_theta = particles.dim() - n_params;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = coord_names(n_params, n_theta);
    header.extend(["weight", "log_lik", "log_prior"].map(String::from));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let weights = particles.weights();
    for i in 0..particles.len() {
        let mut row: Vec<String> = particles.position(i).iter().map(|v| fmt(*v)).collect();
        row.extend([weights[i], log_liks[i], log_priors[i]].map(fmt));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_particles_csv(path: &Path) -> Result<ParticleTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n_params = header.iter().filter(|h| h.starts_with("param_")).count();
    let n_theta = header.iter().filter(|h| h.starts_with("theta_")).count();
    let d = n_params + n_theta;
    if header.len() != d + 3 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("unexpected particle header {header:?}"),
        });
    }
    let mut table = ParticleTable {
        n_params,
        n_theta,
        rows: vec![],
        weights: vec![],
        log_liks: vec![],
        log_priors: vec![],
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        table.rows.push(vals[..d].to_vec());
        table.weights.push(vals[d]);
        table.log_liks.push(vals[d + 1]);
        table.log_priors.push(vals[d + 2]);
    }
    Ok(table)
}

/// Writes `(bin_center_0[, bin_center_1], mass)` rows.
pub fn write_histogram_csv(path: &Path, rows: &[(Vec<f64>, f64)]) -> Result<()> {
    let dims = rows.first().map_or(1, |r| r.0.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..dims).map(|k| format!("bin_center_{k}")).collect();
    header.push("mass".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (c, m) in rows {
        let mut row: Vec<String> = c.iter().map(|v| fmt(*v)).collect();
        row.push(fmt(*m));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// All coordinates and the unnormalized log posterior of every particle.
pub fn write_parallel_axis_csv(path: &Path, particles: &ParticleSet, n_params: usize, scores: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = coord_names(n_params, particles.dim() - n_params);
    header.push("log_posterior".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, s) in scores.iter().enumerate() {
        let mut row: Vec<String> = particles.position(i).iter().map(|v| fmt(*v)).collect();
        row.push(fmt(*s));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    /// Bins per dimension for the binned MAP estimate.
    #[serde(default = "default_map_bins")]
    pub map_bins: usize,
    /// Bins per dimension for the exported histograms.
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    /// Dimension pairs for 2D histograms; all parameter pairs when absent.
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub kde: BandwidthMode,
    /// Points of the exported 1D KDE grids.
    #[serde(default = "default_kde_points")]
    pub kde_points: usize,
}

fn default_map_bins() -> usize {
    30
}

fn default_hist_bins() -> usize {
    30
}

fn default_kde_points() -> usize {
    100
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            map_bins: default_map_bins(),
            hist_bins: default_hist_bins(),
            pairs: None,
            kde: BandwidthMode::default(),
            kde_points: default_kde_points(),
        }
    }
}

/// Writes histograms, KDE grids and the parallel-axis table of the
/// parameter marginal (uncertain conditions dropped), and the summary JSON.
/// Returns the written file names.
pub fn export_tables(
    dir: &Path,
    particles: &ParticleSet,
    n_params: usize,
    scores: &[f64],
    summary: &PosteriorSummary,
    config: &ExportConfig,
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let params: Vec<usize> = (0..n_params).collect();
    let marginal = particles.marginalize(&params)?;
    for k in 0..n_params {
        let name = format!("hist_1d_{k}.csv");
        write_histogram_csv(&dir.join(&name), &histogram(&marginal, &[k], config.hist_bins)?)?;
        files.push(name);
    }
    let pairs = config.pairs.clone().unwrap_or_else(|| {
        (0..n_params)
            .flat_map(|a| (a + 1..n_params).map(move |b| (a, b)))
            .collect()
    });
    for (a, b) in pairs {
        let name = format!("hist_2d_{a}_{b}.csv");
        write_histogram_csv(&dir.join(&name), &histogram(&marginal, &[a, b], config.hist_bins)?)?;
        files.push(name);
    }
    for k in 0..n_params {
        let one = marginal.marginalize(&[k])?;
        let Ok(h) = select_bandwidth(&one, config.kde) else { continue };
        let bin = Binning::over(&one, 2)?;
        let (lo, hi) = (bin.lo[0] - 3.0 * h[0], bin.lo[0] + 2.0 * bin.width[0] + 3.0 * h[0]);
        let n = config.kde_points.max(2);
        let grid: Vec<Vec<f64>> = (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect();
        let dens = kde_with_bandwidth(&one, &grid, &h);
        let rows: Vec<(Vec<f64>, f64)> = grid.into_iter().zip(dens).collect();
        let name = format!("kde_1d_{k}.csv");
        let path = dir.join(&name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["x", "density"]).map_err(|e| csv_err(&path, e))?;
        for (x, v) in rows {
            w.write_record([fmt(x[0]), fmt(v)]).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    write_parallel_axis_csv(&dir.join("parallel_axis.csv"), particles, n_params, scores)?;
    files.push("parallel_axis.csv".into());
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(&path, e))?;
    files.push("summary.json".into());
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(dim: usize, pos: Vec<f64>, w: Vec<f64>) -> ParticleSet {
        let lw = w.iter().map(|v| v.ln()).collect();
        ParticleSet::new(dim, pos, lw, 1.0).unwrap()
    }

    fn random_set(seed: u64, n: usize, dim: usize) -> ParticleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n * dim).map(|_| rng.random_range(-2.0..3.0)).collect();
        let w = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        set(dim, pos, w)
    }

    #[test]
    fn moments_examples() {
        let (m, c) = weighted_moments(&set(1, vec![0.0, 2.0], vec![0.5, 0.5]));
        assert_eq!((m[0], c[0][0]), (1.0, 1.0));
        let ps = ParticleSet::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, f64::NEG_INFINITY], 1.0).unwrap();
        let (m, c) = weighted_moments(&ps);
        assert_eq!(m, vec![1.0, 2.0]);
        assert!(c.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let ps = random_set(1, 1000, 3);
        let w = ps.weights();
        let total: f64 = w.iter().sum();
        let mut mean = [0.0; 3];
        for k in 0..3 {
            mean[k] = (0..1000).map(|i| w[i] * ps.position(i)[k]).sum::<f64>() / total;
        }
        let (m, c) = weighted_moments(&ps);
        for a in 0..3 {
            assert!((m[a] - mean[a]).abs() < 1e-12);
            for b in 0..3 {
                let o = (0..1000)
                    .map(|i| w[i] * (ps.position(i)[a] - mean[a]) * (ps.position(i)[b] - mean[b]))
                    .sum::<f64>()
                    / total;
                assert!((c[a][b] - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_moments_are_sub_blocks() {
        let ps = random_set(2, 500, 4);
        let (m, c) = weighted_moments(&ps);
        let keep = [3, 1];
        let (mm, cm) = weighted_moments(&marginalize(&ps, &keep).unwrap());
        for (i, &a) in keep.iter().enumerate() {
            assert!((mm[i] - m[a]).abs() < 1e-12);
            for (j, &b) in keep.iter().enumerate() {
                assert!((cm[i][j] - c[a][b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_histogram_sums_dropped_axis() {
        let ps = random_set(3, 400, 3);
        let bins = 6;
        let full = histogram(&ps, &[0, 1, 2], bins).unwrap();
        let two = histogram(&marginalize(&ps, &[0, 2]).unwrap(), &[0, 1], bins).unwrap();
        let mut summed: BTreeMap<(i64, i64), f64> = BTreeMap::new();
        for (c, m) in &full {
            *summed.entry(((c[0] * 1e9) as i64, (c[2] * 1e9) as i64)).or_default() += m;
        }
        assert_eq!(summed.len(), two.len());
        for (c, m) in &two {
            let s = summed[&((c[0] * 1e9) as i64, (c[1] * 1e9) as i64)];
            assert!((s - m).abs() < 1e-12);
        }
        let total: f64 = histogram(&ps, &[1], bins).unwrap().iter().map(|r| r.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn map_particle_rules() {
        let ps = set(1, vec![10.0, 11.0, 12.0], vec![1.0; 3]);
        assert_eq!(map_from_particles(&ps, &[-3.0, -1.0, -2.0]).unwrap(), vec![11.0]);
        assert_eq!(map_from_particles(&ps, &[4.0; 3]).unwrap(), vec![10.0]);
        let scores = [-3.0, -1.0, -2.0];
        let affine: Vec<f64> = scores.iter().map(|s| 7.0 * s + 100.0).collect();
        let monotone: Vec<f64> = scores.iter().map(|s: &f64| s.exp()).collect();
        assert_eq!(map_index(&affine).unwrap(), 1);
        assert_eq!(map_index(&monotone).unwrap(), 1);
        assert!(map_index(&[]).is_err());
    }

    #[test]
    fn binned_map_examples() {
        // everything in one bin
        let ps = set(1, vec![0.0, 0.01, 0.02, 10.0], vec![0.3, 0.3, 0.3, 0.1]);
        let m = map_binned(&ps, 10).unwrap();
        assert_eq!(m.bin, vec![0]);
        assert!((m.center[0] - 0.5).abs() < 1e-12);
        // two clusters 0.6 / 0.4
        let ps = set(2, vec![1.0, 1.0, 1.1, 1.0, 5.0, 5.0], vec![0.3, 0.3, 0.4]);
        let m = map_binned(&ps, 4).unwrap();
        assert_eq!(m.bin, vec![0, 0]);
        // tie: lexicographically smallest bin
        let ps = set(1, vec![0.0, 1.0], vec![0.5, 0.5]);
        assert_eq!(map_binned(&ps, 2).unwrap().bin, vec![0]);
        assert!(map_binned(&ps, 1).is_err());
    }

    #[test]
    fn binned_map_refinement_approaches_mode() {
        // smooth unimodal weights around (0.3, -0.2) on a dense grid
        let mut pos = Vec::new();
        let mut w = Vec::new();
        for i in 0..120 {
            for j in 0..120 {
                let (x, y) = (-1.0 + 2.0 * i as f64 / 119.0, -1.0 + 2.0 * j as f64 / 119.0);
                pos.extend([x, y]);
                w.push((-((x - 0.3).powi(2) + (y + 0.2).powi(2)) / 0.1).exp());
            }
        }
        let ps = set(2, pos, w);
        let dist = |b| {
            let c = map_binned(&ps, b).unwrap().center;
            ((c[0] - 0.3).powi(2) + (c[1] + 0.2).powi(2)).sqrt()
        };
        assert!(dist(30) <= dist(10));
    }

    #[test]
    fn kde_examples() {
        let one = set(1, vec![0.5], vec![1.0]);
        assert!(weighted_kde(&one, &[vec![0.0]], BandwidthMode::Silverman).is_err());
        let same = set(1, vec![0.0, 0.0], vec![0.5, 0.5]);
        let h = 0.3;
        let d = kde_with_bandwidth(&same, &[vec![0.0]], &[h])[0];
        assert!((d - 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-14);
    }

    #[test]
    fn kde_integrates_to_one() {
        let ps1 = random_set(4, 300, 1);
        let ps2 = random_set(5, 200, 2);
        for mode in [BandwidthMode::Silverman, BandwidthMode::LooGrid] {
            let h = select_bandwidth(&ps1, mode).unwrap();
            let n = 4000;
            let (lo, hi) = (-2.0 - 10.0 * h[0], 3.0 + 10.0 * h[0]);
            let dx = (hi - lo) / n as f64;
            let grid: Vec<Vec<f64>> = (0..n).map(|i| vec![lo + (i as f64 + 0.5) * dx]).collect();
            let mass: f64 = kde_with_bandwidth(&ps1, &grid, &h).iter().sum::<f64>() * dx;
            assert!((mass - 1.0).abs() < 1e-3, "{mode:?} {mass}");

            let h = select_bandwidth(&ps2, mode).unwrap();
            let n = 160;
            let (lo0, hi0) = (-2.0 - 8.0 * h[0], 3.0 + 8.0 * h[0]);
            let (lo1, hi1) = (-2.0 - 8.0 * h[1], 3.0 + 8.0 * h[1]);
            let (d0, d1) = ((hi0 - lo0) / n as f64, (hi1 - lo1) / n as f64);
            let grid: Vec<Vec<f64>> = (0..n * n)
                .map(|k| vec![lo0 + ((k / n) as f64 + 0.5) * d0, lo1 + ((k % n) as f64 + 0.5) * d1])
                .collect();
            let mass: f64 = kde_with_bandwidth(&ps2, &grid, &h).iter().sum::<f64>() * d0 * d1;
            assert!((mass - 1.0).abs() < 1e-3, "{mode:?} 2d {mass}");
        }
    }

    #[test]
    fn laplace_quadratics() {
        let (a, s) = (2.5, 0.7);
        let g = laplace_approximation(&|x| -(x[0] - a).powi(2) / (2.0 * s * s), &[a], &[1e-3]).unwrap();
        assert_eq!(g.mean, vec![a]);
        assert!((g.cov[0][0] - s * s).abs() < 1e-6 * s * s);

        // log p = -0.5 x^T A x, covariance A^-1
        let m = [[2.0, 0.6], [0.6, 1.0]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let f = |x: &[f64]| {
            -0.5 * (m[0][0] * x[0] * x[0] + 2.0 * m[0][1] * x[0] * x[1] + m[1][1] * x[1] * x[1])
        };
        let g = laplace_approximation(&f, &[0.0, 0.0], &[1e-3, 1e-3]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.cov[i][j] - inv[i][j]).abs() < 1e-6 * inv[i][j].abs().max(1.0));
            }
        }

        let saddle = |x: &[f64]| x[0] * x[0] - x[1] * x[1];
        assert!(matches!(
            laplace_approximation(&saddle, &[0.0, 0.0], &[1e-3, 1e-3]),
            Err(Error::NonPdHessian)
        ));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ps = random_set(6, 300, 3);
        let lls: Vec<f64> = (0..300).map(|i| -(i as f64) * 0.01).collect();
        let lps = vec![-1.5; 300];
        let scores: Vec<f64> = lls.iter().zip(&lps).map(|(a, b)| a + b).collect();
        let path = dir.path().join("particles.csv");
        write_particles_csv(&path, &ps, 2, &lls, &lps).unwrap();
        let table = read_particles_csv(&path).unwrap();
        assert_eq!((table.n_params, table.n_theta), (2, 1));
        assert_eq!(table.log_liks, lls);
        let summary = summarize(&ps, &scores, 10).unwrap();
        let files = export_tables(dir.path(), &ps, 2, &scores, &summary, &ExportConfig::default()).unwrap();
        assert!(files.contains(&"hist_2d_0_1.csv".to_string()));

        let back: PosteriorSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        let (m, c) = weighted_moments(&table.particles().unwrap());
        for a in 0..3 {
            assert!((m[a] - back.pm[a]).abs() < 1e-10);
            for b in 0..3 {
                assert!((c[a][b] - back.cov[a][b]).abs() < 1e-10);
            }
        }
        let pa = std::fs::read_to_string(dir.path().join("parallel_axis.csv")).unwrap();
        assert_eq!(pa.lines().count(), 301);
        assert!(pa.starts_with("param_0,param_1,theta_0,log_posterior"));
        for k in 0..2 {
            let mut r = csv::Reader::from_path(dir.path().join(format!("hist_1d_{k}.csv"))).unwrap();
            let total: f64 = r.records().map(|x| x.unwrap()[1].parse::<f64>().unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
