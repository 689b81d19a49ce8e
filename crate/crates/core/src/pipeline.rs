//! Declarative calibration pipeline: configuration, persistent stage
//! artifacts and the run manifest.
//!
//! Every stage reads its upstream files from the output directory, writes its
//! own files there and records an input hash in `manifest.json`. A stage whose
//! hash matches the manifest and whose outputs still exist is skipped unless
//! forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, fmt, ExportConfig};
use crate::discrepancy::{Comparator, DiscrepancyConfig, Measure, NormalWeighting};
use crate::error::{Error, Result};
use crate::forward::{
    BendingBump, BumpConstants, ForwardModel, ForwardResult, Material, ModelParams, SubprocessModel,
    UncertainConditions,
};
use crate::geometry::{InterfaceMesh, MeasurementSpec};
use crate::likelihood::{self, LikelihoodConfig, Provenance};
use crate::parameter_space::{design_to_box, sobol_points, Marginal, ParameterBox, Prior, SOBOL_MAX_DIM};
use crate::smc::{self, SmcConfig, SmcTrace};
use crate::surrogate::{self, GPModel, GpSettings, TrainingSet};

pub const OBSERVATION_FILE: &str = "observation.json";
pub const TRAINING_FILE: &str = "training.csv";
pub const GP_FILE: &str = "gp.json";
pub const PARTICLES_FILE: &str = "particles.csv";
pub const TRACE_FILE: &str = "trace.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONVERGENCE_FILE: &str = "gp_convergence.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForwardConfig {
    BendingBump {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_n_seg")]
        n_seg: usize,
        #[serde(default)]
        constants: BumpConstants,
    },
    /// External solver driven through the file protocol of [`SubprocessModel`].
    Subprocess {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        workdir: PathBuf,
        /// Mesh JSON of the undeformed interface.
        reference: PathBuf,
    },
}

fn default_radius() -> f64 {
    0.25
}

fn default_n_seg() -> usize {
    64
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig::BendingBump {
            radius: default_radius(),
            n_seg: default_n_seg(),
            constants: BumpConstants::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub params: ModelParams,
    pub theta: UncertainConditions,
    #[serde(default)]
    pub sigma_obs: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            params: ModelParams::homogeneous(400.0, 0.3).expect("valid ground truth"),
            theta: UncertainConditions { v_in: 100.0 },
            sigma_obs: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyBlock {
    #[serde(flatten)]
    pub measure: DiscrepancyConfig,
    /// Measurement spec JSON for `euclid_mp`.
    #[serde(default)]
    pub measurement_spec: Option<PathBuf>,
    /// Without a spec file, `euclid_mp` places this many points along the
    /// observed interface normals.
    #[serde(default)]
    pub n_measurement_points: Option<usize>,
}

impl Default for DiscrepancyBlock {
    fn default() -> Self {
        DiscrepancyBlock {
            measure: DiscrepancyConfig::rkhs(0.005, NormalWeighting::SegmentLength),
            measurement_spec: None,
            n_measurement_points: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodBlock {
    /// Noise standard deviation in mm; 0.01 for point measures and
    /// `sqrt(0.0005)` for the surface-currents measure when absent.
    #[serde(default)]
    pub sigma_n: Option<f64>,
    /// Overrides the per-measure measurement count.
    #[serde(default)]
    pub n_terms: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub n_train: usize,
    #[serde(default)]
    pub skip: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig { n_train: 200, skip: 0 }
    }
}

/// Prior over the inflow rate; without this block it stays at the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub prior: Marginal,
    #[serde(default, rename = "box")]
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(flatten)]
    pub export: ExportConfig,
    #[serde(default = "yes")]
    pub laplace: bool,
}

fn yes() -> bool {
    true
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            export: ExportConfig::default(),
            laplace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub sizes: Vec<usize>,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

fn default_n_test() -> usize {
    100
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            sizes: vec![10, 20, 50, 100, 200, 900],
            n_test: default_n_test(),
        }
    }
}

fn default_priors() -> Prior {
    Prior::new(vec![
        Marginal::Uniform { lo: 100.0, hi: 800.0 },
        Marginal::Uniform { lo: -0.8, hi: 0.5 },
    ])
    .expect("valid default prior")
}

fn default_output() -> PathBuf {
    PathBuf::from("shapecal-out")
}

/// One JSON document fully determining a run. Every block has defaults
/// reproducing the homogeneous two-parameter study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub discrepancy: DiscrepancyBlock,
    #[serde(default)]
    pub likelihood: LikelihoodBlock,
    /// Priors over `(E_1, nu_1, ..., E_K, nu_K)`.
    #[serde(default = "default_priors")]
    pub priors: Prior,
    /// Design and surrogate box over the model parameters; the prior
    /// bounding box when absent.
    #[serde(default, rename = "box")]
    pub parameter_box: Option<ParameterBox>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub gp: GpSettings,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default)]
    pub uncertainty: Option<UncertaintyConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub gp_convergence: ConvergenceConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all blocks have defaults")
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Replaces every seed (observation noise, GP restarts, SMC) with `seed`.
    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.observation.seed = seed;
        self.gp.seed = seed;
        self.smc.seed = seed;
        self
    }

    pub fn n_params(&self) -> usize {
        2 * self.observation.params.subdomains().len()
    }

    pub fn n_theta(&self) -> usize {
        usize::from(self.uncertainty.is_some())
    }

    pub fn dim(&self) -> usize {
        self.n_params() + self.n_theta()
    }

    pub fn sigma_n(&self) -> f64 {
        self.likelihood.sigma_n.unwrap_or(match self.discrepancy.measure.measure {
            Measure::RkhsSc => 0.0005f64.sqrt(),
            Measure::EuclidMp | Measure::Cpp => 0.01,
        })
    }

    /// Joint prior over the model parameters and, if uncertain, the inflow rate.
    pub fn joint_prior(&self) -> Result<Prior> {
        Ok(match &self.uncertainty {
            Some(u) => self.priors.concat(&Prior::new(vec![u.prior])?),
            None => self.priors.clone(),
        })
    }

    /// Joint design/surrogate box.
    pub fn joint_box(&self) -> Result<ParameterBox> {
        let params = self
            .parameter_box
            .clone()
            .unwrap_or_else(|| self.priors.bounding_box());
        Ok(match &self.uncertainty {
            Some(u) => params.concat(&ParameterBox::new(vec![u.bounds.unwrap_or(u.prior.bounds())])?),
            None => params,
        })
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.n_params())
            .map(|i| format!("param_{i}"))
            .chain((0..self.n_theta()).map(|i| format!("theta_{i}")))
            .collect()
    }

    /// Checks every block against its module invariants and that referenced
    /// files exist.
    pub fn validate(&self) -> Result<()> {
        match &self.forward {
            ForwardConfig::BendingBump { radius, n_seg, .. } => {
                if !(*radius > 0.0) || *n_seg < 4 {
                    return Err(invalid(format!(
                        "bending bump needs radius > 0 and n_seg >= 4, got {radius} and {n_seg}"
                    )));
                }
            }
            ForwardConfig::Subprocess { program, reference, .. } => {
                for p in [program, reference] {
                    if !p.exists() {
                        return Err(invalid(format!("forward adapter path {} does not exist", p.display())));
                    }
                }
            }
        }
        let o = &self.observation;
        ModelParams::new(o.params.subdomains().to_vec())?;
        UncertainConditions::new(o.theta.v_in)?;
        if !(o.sigma_obs >= 0.0 && o.sigma_obs.is_finite()) {
            return Err(invalid(format!("sigma_obs must be >= 0, got {}", o.sigma_obs)));
        }
        self.discrepancy.measure.validate()?;
        if let Some(p) = &self.discrepancy.measurement_spec {
            if !p.exists() {
                return Err(invalid(format!("measurement spec {} does not exist", p.display())));
            }
        }
        LikelihoodConfig::new(self.sigma_n(), self.likelihood.n_terms.unwrap_or(1))?;
        if self.priors.dim() != self.n_params() {
            return Err(invalid(format!(
                "{} priors given for {} model parameters",
                self.priors.dim(),
                self.n_params()
            )));
        }
        if let Some(u) = &self.uncertainty {
            u.prior.validate()?;
        }
        let bx = self.joint_box()?;
        if bx.dim() != self.dim() {
            return Err(invalid(format!("box has {} dimensions, expected {}", bx.dim(), self.dim())));
        }
        if self.dim() > SOBOL_MAX_DIM {
            return Err(invalid(format!("at most {SOBOL_MAX_DIM} design dimensions supported")));
        }
        if self.design.n_train < 2 {
            return Err(invalid("design.n_train must be at least 2"));
        }
        if self.gp.restarts == 0 {
            return Err(invalid("gp.restarts must be at least 1"));
        }
        self.smc.validate()?;
        if self.analysis.export.map_bins < 2 || self.analysis.export.hist_bins < 2 {
            return Err(invalid("analysis bin counts must be at least 2"));
        }
        if let Some(pairs) = &self.analysis.export.pairs {
            if pairs.iter().any(|(a, b)| a.max(b) >= &self.n_params()) {
                return Err(invalid("analysis pair index out of range"));
            }
        }
        let c = &self.gp_convergence;
        if c.sizes.iter().any(|s| *s < 2) || c.n_test == 0 {
            return Err(invalid("gp_convergence sizes must be >= 2 and n_test >= 1"));
        }
        Ok(())
    }

    pub fn forward_model(&self) -> Result<Box<dyn ForwardModel>> {
        Ok(match &self.forward {
            ForwardConfig::BendingBump { radius, n_seg, constants } => {
                Box::new(BendingBump::new(*radius, *n_seg, *constants)?)
            }
            ForwardConfig::Subprocess { program, args, workdir, reference } => Box::new(SubprocessModel::new(
                program,
                args.clone(),
                workdir,
                InterfaceMesh::from_json_file(reference)?,
            )),
        })
    }
}

/// Record of one completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Outcome of one design point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub discrepancy: Option<f64>,
    pub log_lik: Option<f64>,
}

/// Everything needed to turn a design point into a log-likelihood value.
pub struct Evaluator {
    model: Box<dyn ForwardModel>,
    comparator: Comparator,
    sigma_n: f64,
    n_terms: Option<usize>,
    n_params: usize,
    fixed_theta: UncertainConditions,
}

impl Evaluator {
    pub fn new(config: &PipelineConfig, observed: InterfaceMesh) -> Result<Self> {
        let spec = match (&config.discrepancy.measurement_spec, config.discrepancy.n_measurement_points) {
            (Some(path), _) => Some(MeasurementSpec::from_json_file(path)?),
            (None, Some(count)) => Some(MeasurementSpec::along_normals(&observed, count)?),
            (None, None) => None,
        };
        Ok(Evaluator {
            model: config.forward_model()?,
            comparator: Comparator::new(config.discrepancy.measure.clone(), observed, spec)?,
            sigma_n: config.sigma_n(),
            n_terms: config.likelihood.n_terms,
            n_params: config.n_params(),
            fixed_theta: config.observation.theta,
        })
    }

    /// Forward run, discrepancy and log-likelihood at one joint point.
    /// Forward failures and parameters outside the model's validity range
    /// are failed evaluations rather than errors.
    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let failed = Evaluation {
            discrepancy: None,
            log_lik: None,
        };
        let (Ok(params), Ok(theta)) = (
            ModelParams::from_flat(&x[..self.n_params]),
            match x.get(self.n_params) {
                Some(v) => UncertainConditions::new(*v),
                None => Ok(self.fixed_theta),
            },
        ) else {
            return Ok(failed);
        };
        let mesh = match self.model.run(&params, &theta)? {
            ForwardResult::Deformed(m) => m,
            ForwardResult::Failed(_) => return Ok(failed),
        };
        let d = self.comparator.discrepancy(&mesh)?;
        let n = self.n_terms.unwrap_or_else(|| self.comparator.n_terms(mesh.node_count()));
        let cfg = LikelihoodConfig::new(self.sigma_n, n)?;
        Ok(Evaluation {
            discrepancy: Some(d),
            log_lik: Some(likelihood::log_likelihood(d, &cfg)),
        })
    }

    /// Evaluates all points concurrently; results are in input order.
    pub fn evaluate_all(&self, points: &[Vec<f64>]) -> Result<Vec<Evaluation>> {
        points.par_iter().map(|x| self.evaluate(x)).collect()
    }
}

fn malformed(path: &Path, reason: impl ToString) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes the evaluated design with one `failed` flag column.
pub fn write_training_csv(path: &Path, names: &[String], points: &[Vec<f64>], evals: &[Evaluation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| malformed(path, e))?;
    let mut header = names.to_vec();
    header.extend(["discrepancy", "log_lik", "failed"].map(String::from));
    w.write_record(&header).map_err(|e| malformed(path, e))?;
    for (x, e) in points.iter().zip(evals) {
        let mut row: Vec<String> = x.iter().map(|v| fmt(*v)).collect();
        row.push(e.discrepancy.map(fmt).unwrap_or_default());
        row.push(e.log_lik.map(fmt).unwrap_or_default());
        row.push(if e.log_lik.is_none() { "1" } else { "0" }.into());
        w.write_record(&row).map_err(|e| malformed(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a training CSV back into points and evaluations.
pub fn read_training_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Evaluation>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(path, e))?;
    let width = r.headers().map_err(|e| malformed(path, e))?.len();
    if width < 4 {
        return Err(malformed(path, "training table needs coordinates plus 3 columns"));
    }
    let d = width - 3;
    let parse = |s: &str| s.parse::<f64>().map_err(|e| malformed(path, e));
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { parse(s).map(Some) };
    let (mut points, mut evals) = (vec![], vec![]);
    for rec in r.records() {
        let rec = rec.map_err(|e| malformed(path, e))?;
        points.push((0..d).map(|k| parse(&rec[k])).collect::<Result<Vec<_>>>()?);
        evals.push(Evaluation {
            discrepancy: opt(&rec[d])?,
            log_lik: opt(&rec[d + 1])?,
        });
    }
    Ok((points, evals))
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stage driver bound to one config, output directory and worker pool.
pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    force: bool,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: Option<PathBuf>, workers: usize, force: bool) -> Result<Self> {
        config.validate()?;
        let out = out.unwrap_or_else(|| config.output.clone());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| invalid(format!("worker pool: {e}")))?;
        Ok(Pipeline { config, out, force, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn upstream(&self, file: &str, stage: &'static str) -> Result<Vec<u8>> {
        let path = self.out.join(file);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, stage });
        }
        std::fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    fn block<T: Serialize>(value: &T) -> Vec<u8> {
        serde_json::to_vec(value).expect("config blocks serialize")
    }

    /// Runs `body` unless the manifest already holds `name` with the same
    /// input hash and all its outputs exist.
    fn stage(
        &self,
        name: &str,
        inputs: &[&[u8]],
        seeds: &[(&str, u64)],
        body: impl FnOnce() -> Result<Vec<String>> + Send,
    ) -> Result<StageOutcome> {
        let mut parts: Vec<&[u8]> = vec![name.as_bytes()];
        parts.extend_from_slice(inputs);
        let hash = sha256_hex(&parts);
        let mut manifest = RunManifest::load(&self.out)?;
        if !self.force {
            if let Some(rec) = manifest.stages.get(name) {
                if rec.input_hash == hash && rec.outputs.iter().all(|f| self.out.join(f).exists()) {
                    return Ok(StageOutcome::Skipped);
                }
            }
        }
        let start = Instant::now();
        let outputs = self.pool.install(body)?;
        manifest.stages.insert(
            name.to_string(),
            StageRecord {
                input_hash: hash,
                outputs,
                wall_clock_s: start.elapsed().as_secs_f64(),
                seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            },
        );
        manifest.save(&self.out)?;
        Ok(StageOutcome::Ran)
    }

    pub fn generate_obs(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let inputs = [Self::block(&c.forward), Self::block(&c.observation)];
        let o = &c.observation;
        self.stage(
            "generate-obs",
            &inputs.each_ref().map(Vec::as_slice),
            &[("observation", o.seed)],
            || {
                let model = c.forward_model()?;
                let mesh = likelihood::generate_observation(model.as_ref(), &o.params, &o.theta, o.sigma_obs, o.seed)?;
                let prov = Provenance {
                    params: o.params.clone(),
                    theta: o.theta,
                    sigma_obs: o.sigma_obs,
                    seed: o.seed,
                };
                let path = self.out.join(OBSERVATION_FILE);
                likelihood::write_observation(&path, &mesh, &prov)?;
                let sidecar = likelihood::provenance_path(&path);
                Ok(vec![
                    OBSERVATION_FILE.into(),
                    sidecar.file_name().expect("file name").to_string_lossy().into_owned(),
                ])
            },
        )
    }

    fn evaluator_inputs(&self) -> Vec<Vec<u8>> {
        let c = &self.config;
        let mut v = vec![
            Self::block(&c.forward),
            Self::block(&c.discrepancy),
            Self::block(&c.likelihood),
            Self::block(&c.observation.theta),
            Self::block(&c.joint_box().ok()),
        ];
        if let Some(p) = &c.discrepancy.measurement_spec {
            v.push(std::fs::read(p).unwrap_or_default());
        }
        v
    }

    fn evaluator(&self) -> Result<Evaluator> {
        let path = self.out.join(OBSERVATION_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, stage: "generate-obs" });
        }
        Evaluator::new(&self.config, InterfaceMesh::from_json_file(&path)?)
    }

    /// Joint design points `skip..skip + n` of the Sobol sequence in the box.
    pub fn design_points(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        design_to_box(&sobol_points(c.dim(), n, c.design.skip)?, &c.joint_box()?)
    }

    pub fn design_eval(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let obs = self.upstream(OBSERVATION_FILE, "generate-obs")?;
        let mut inputs = self.evaluator_inputs();
        inputs.push(Self::block(&c.design));
        inputs.push(obs);
        let refs: Vec<&[u8]> = inputs.iter().map(Vec::as_slice).collect();
        self.stage("design-eval", &refs, &[], || {
            let eval = self.evaluator()?;
            let points = self.design_points(c.design.n_train)?;
            let evals = eval.evaluate_all(&points)?;
            if evals.iter().all(|e| e.log_lik.is_none()) {
                return Err(Error::AllRunsFailed(evals.len()));
            }
            write_training_csv(&self.out.join(TRAINING_FILE), &c.column_names(), &points, &evals)?;
            Ok(vec![TRAINING_FILE.into()])
        })
    }

    pub fn fit_gp(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let training = self.upstream(TRAINING_FILE, "design-eval")?;
        let inputs = [Self::block(&c.gp), Self::block(&c.joint_box()?), training];
        self.stage(
            "fit-gp",
            &inputs.each_ref().map(Vec::as_slice),
            &[("gp", c.gp.seed)],
            || {
                let (points, evals) = read_training_csv(&self.out.join(TRAINING_FILE))?;
                let train = TrainingSet::new(points, evals.iter().map(|e| e.log_lik).collect())?;
                let gp = surrogate::fit_gp(&train, &c.joint_box()?, &c.gp)?;
                gp.save(&self.out.join(GP_FILE))?;
                Ok(vec![GP_FILE.into()])
            },
        )
    }

    pub fn smc(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let gp_bytes = self.upstream(GP_FILE, "fit-gp")?;
        let inputs = [
            Self::block(&c.smc),
            Self::block(&c.priors),
            Self::block(&c.uncertainty),
            gp_bytes,
        ];
        self.stage(
            "smc",
            &inputs.each_ref().map(Vec::as_slice),
            &[("smc", c.smc.seed)],
            || {
                let gp = GPModel::load(&self.out.join(GP_FILE))?;
                let prior = c.joint_prior()?;
                let log_lik = |x: &[f64]| gp.predict_mean(x).unwrap_or(f64::NAN);
                let out = smc::run_smc(&log_lik, &prior, &c.smc)?;
                analysis::write_particles_csv(
                    &self.out.join(PARTICLES_FILE),
                    &out.particles,
                    c.n_params(),
                    &out.state.log_liks,
                    &out.state.log_priors,
                )?;
                let path = self.out.join(TRACE_FILE);
                std::fs::write(&path, serde_json::to_string_pretty(&out.trace)?).map_err(|e| Error::io(&path, e))?;
                Ok(vec![PARTICLES_FILE.into(), TRACE_FILE.into()])
            },
        )
    }

    pub fn analyze(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let particles = self.upstream(PARTICLES_FILE, "smc")?;
        let gp_bytes = self.upstream(GP_FILE, "fit-gp")?;
        let inputs = [
            Self::block(&c.analysis),
            Self::block(&c.priors),
            Self::block(&c.uncertainty),
            particles,
            gp_bytes,
        ];
        self.stage("analyze", &inputs.each_ref().map(Vec::as_slice), &[], || {
            let table = analysis::read_particles_csv(&self.out.join(PARTICLES_FILE))?;
            let joint = table.particles()?;
            let scores = table.scores();
            let n_params = c.n_params();
            let keep: Vec<usize> = (0..n_params).collect();
            let marginal = joint.marginalize(&keep)?;
            let mut summary = analysis::summarize(&marginal, &scores, c.analysis.export.map_bins)?;
            if c.analysis.laplace {
                let gp = GPModel::load(&self.out.join(GP_FILE))?;
                let prior = c.joint_prior()?;
                let log_post = |x: &[f64]| gp.predict_mean(x).unwrap_or(f64::NAN) + prior.log_pdf_unchecked(x);
                let map = joint.position(summary.map_particle.index).to_vec();
                let steps: Vec<f64> = c.joint_box()?.bounds().iter().map(|(lo, hi)| 1e-4 * (hi - lo)).collect();
                match analysis::laplace_approximation(&log_post, &map, &steps) {
                    Ok(g) => {
                        summary.laplace = Some(analysis::GaussianApprox {
                            mean: g.mean[..n_params].to_vec(),
                            cov: g.cov[..n_params].iter().map(|r| r[..n_params].to_vec()).collect(),
                        })
                    }
                    Err(e) => summary.laplace_error = Some(e.to_string()),
                }
            }
            analysis::export_tables(&self.out, &joint, n_params, &scores, &summary, &c.analysis.export)
        })
    }

    /// Fits the surrogate on growing prefixes of one Sobol design and scores
    /// each fit on the next `n_test` design points, skipping failed runs.
    pub fn gp_convergence(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let obs = self.upstream(OBSERVATION_FILE, "generate-obs")?;
        let mut inputs = self.evaluator_inputs();
        inputs.extend([
            Self::block(&c.design.skip),
            Self::block(&c.gp),
            Self::block(&c.gp_convergence),
            obs,
        ]);
        let refs: Vec<&[u8]> = inputs.iter().map(Vec::as_slice).collect();
        self.stage("gp-convergence", &refs, &[("gp", c.gp.seed)], || {
            let cc = &c.gp_convergence;
            let n_max = cc.sizes.iter().copied().max().unwrap_or(0);
            let eval = self.evaluator()?;
            let points = self.design_points(n_max + cc.n_test)?;
            let evals = eval.evaluate_all(&points)?;
            let (test_x, test_y): (Vec<Vec<f64>>, Vec<f64>) = points[n_max..]
                .iter()
                .zip(&evals[n_max..])
                .filter_map(|(x, e)| e.log_lik.map(|l| (x.clone(), l)))
                .unzip();
            let bx = c.joint_box()?;
            let path = self.out.join(CONVERGENCE_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| malformed(&path, e))?;
            w.write_record(["n_train", "n_successful", "n_test", "test_error"])
                .map_err(|e| malformed(&path, e))?;
            for &n in &cc.sizes {
                let train = TrainingSet::new(points[..n].to_vec(), evals[..n].iter().map(|e| e.log_lik).collect())?;
                let gp = surrogate::fit_gp(&train, &bx, &c.gp)?;
                let err = surrogate::test_error(&gp, &test_x, &test_y)?;
                let ok = evals[..n].iter().filter(|e| e.log_lik.is_some()).count();
                w.write_record([n.to_string(), ok.to_string(), test_x.len().to_string(), fmt(err)])
                    .map_err(|e| malformed(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(vec![CONVERGENCE_FILE.into()])
        })
    }

    /// All calibration stages in order; the convergence study is separate.
    pub fn run_all(&self) -> Result<Vec<(&'static str, StageOutcome)>> {
        Ok(vec![
            ("generate-obs", self.generate_obs()?),
            ("design-eval", self.design_eval()?),
            ("fit-gp", self.fit_gp()?),
            ("smc", self.smc()?),
            ("analyze", self.analyze()?),
        ])
    }
}

/// Reads `gp_convergence.csv` as `(n_train, test_error)` rows.
pub fn read_convergence_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(path, e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| malformed(path, e))?;
            Ok((
                rec[0].parse().map_err(|e| malformed(path, e))?,
                rec[3].parse().map_err(|e| malformed(path, e))?,
            ))
        })
        .collect()
}

/// Three-band ground truth helper for heterogeneous configs.
pub fn materials(pairs: &[(f64, f64)]) -> Result<ModelParams> {
    ModelParams::new(pairs.iter().map(|&(e, nu)| Material { e, nu }).collect())
}

/// Reads the summary JSON written by the analyze stage.
pub fn read_summary(path: &Path) -> Result<analysis::PosteriorSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e))
}

/// Reads the SMC trace JSON.
pub fn read_trace(path: &Path) -> Result<SmcTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e))
}
