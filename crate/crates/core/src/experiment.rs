//! Configuration-driven twin experiments: synthesize data from a known
//! coefficient, invert it, sample the Laplace posterior and write artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::caputo::TemporalGrid;
use crate::error::{Error, Result};
use crate::fem::{DiffusionTensor, FemSpace};
use crate::field::CoefficientField;
use crate::flux::FluxMethod;
use crate::forward::{
    add_noise, BasisKind, ForwardModel, MeasurementMatrix, ObservationKind, SourceSystem,
    TemporalProfile, WeightFunction,
};
use crate::inversion::{relative_error, run_cgm, CgmOptions, CgmResult, MuRule, ObjectiveConfig};
use crate::mesh::{build_mesh, Dimension, Segment};
use crate::uq::{
    assemble_jacobian, confidence_interval, sample_posterior_with, skewness, ConfidenceReport,
    EnsembleOptions, PosteriorEnsemble, PosteriorModel, SkewnessReport,
};

/// `git describe`-style version stamped into every artifact.
pub const VERSION: &str = env!("FLUXINV_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

impl<T> From<Vec<T>> for OneOrMany<T> {
    fn from(v: Vec<T>) -> Self {
        OneOrMany::Many(v)
    }
}

/// A single segment set (`["L1"]`) or a sweep over sets (`[["L0"], ["L1"]]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentSpec {
    Set(Vec<String>),
    Sets(Vec<Vec<String>>),
}

impl SegmentSpec {
    fn sets(&self) -> Vec<Vec<String>> {
        match self {
            SegmentSpec::Set(s) => vec![s.clone()],
            SegmentSpec::Sets(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Constant(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuSpec {
    Value(f64),
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub dimension: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub alpha: OneOrMany<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    pub count: OneOrMany<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub segments: SegmentSpec,
    #[serde(default = "default_weight")]
    pub weight: WeightSpec,
    #[serde(default = "default_data")]
    pub data: OneOrMany<ObservationKind>,
    /// Flux recovery used to synthesize the data (the inversion always uses
    /// the variational flux).
    #[serde(default)]
    pub flux: FluxMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub epsilon: OneOrMany<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub mu: OneOrMany<MuSpec>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Upper bound of the admissible box; `2 max q_exact` when absent.
    #[serde(default)]
    pub q_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub dump_samples: bool,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: default_samples(),
            confidence: default_confidence(),
            probes: Vec::new(),
            dump_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Selector of the exact coefficient, 1..=7.
    pub example: u8,
    pub seed: u64,
    /// Noise realizations per sweep point, seeds `seed, seed + 1, ...`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub sources: SourceConfig,
    pub observation: ObservationConfig,
    pub noise: NoiseConfig,
    pub inversion: InversionConfig,
    #[serde(default)]
    pub uq: UqConfig,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    100
}
fn default_basis() -> BasisKind {
    BasisKind::Trigonometric
}
fn default_weight() -> WeightSpec {
    WeightSpec::Named("one_minus_t".into())
}
fn default_data() -> OneOrMany<ObservationKind> {
    OneOrMany::One(ObservationKind::AverageFlux)
}
fn default_eps() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_samples() -> usize {
    10_000
}
fn default_confidence() -> f64 {
    0.95
}
fn default_repeats() -> usize {
    1
}

/// Exact coefficient of the shipped examples.
pub fn exact_coefficient(example: u8, p: [f64; 2]) -> Option<f64> {
    let [x, y] = p;
    let q = match example {
        1 => x * x * (1.0 - x * x),
        2 => x * (1.0 - x) * (1.0 - x),
        3 => x * (1.0 - x),
        4 => {
            if x <= 2.0 / 3.0 {
                x
            } else {
                2.0 - 2.0 * x
            }
        }
        5 => {
            if x > 0.5 && x <= 0.8 {
                0.4
            } else {
                0.0
            }
        }
        6 => x * x * (1.0 - x) * y * (1.0 - y) * (1.0 - y),
        7 => x * (1.0 - x) * y * (1.0 - y),
        _ => return None,
    };
    Some(q)
}

fn example_dimension(example: u8) -> usize {
    if example >= 6 {
        2
    } else {
        1
    }
}

impl ExperimentConfig {
    /// Default setup of example `n` (1..=7).
    pub fn example(n: u8) -> Result<Self> {
        if !(1..=7).contains(&n) {
            return Err(Error::config("example", format!("unknown example {n}, expected 1..=7")));
        }
        let two_d = example_dimension(n) == 2;
        let segments: Vec<&str> = match n {
            2 => vec!["L0"],
            3 => vec!["L0", "L1"],
            6 => vec!["L1", "L2"],
            7 => vec!["all"],
            _ => vec!["L1"],
        };
        let probes = if n == 7 {
            [0.2, 0.5, 0.8]
                .iter()
                .flat_map(|&y| [0.2, 0.5, 0.8].map(|x| vec![x, y]))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            name: format!("example{n}"),
            example: n,
            seed: 2024,
            repeats: 1,
            output: None,
            mesh: MeshConfig {
                dimension: example_dimension(n),
                elements: if two_d { 50 } else { 300 },
            },
            time: TimeConfig {
                horizon: 1.0,
                steps: 100,
                alpha: OneOrMany::One(0.3),
            },
            sources: SourceConfig {
                basis: BasisKind::Trigonometric,
                count: OneOrMany::One(5),
            },
            observation: ObservationConfig {
                segments: SegmentSpec::Set(segments.into_iter().map(String::from).collect()),
                weight: default_weight(),
                data: default_data(),
                flux: FluxMethod::Variational,
            },
            noise: NoiseConfig {
                epsilon: if two_d {
                    OneOrMany::One(1e-4)
                } else {
                    OneOrMany::Many(vec![1e-4, 5e-4, 1e-3])
                },
            },
            inversion: InversionConfig {
                mu: OneOrMany::One(MuSpec::Rule(if two_d { "delta^0.5" } else { "delta^1.5" }.into())),
                eps: default_eps(),
                max_iter: default_max_iter(),
                q_max: None,
            },
            uq: UqConfig {
                probes,
                ..UqConfig::default()
            },
        })
    }

    /// Parses TOML; syntax errors report `origin:line:column`, semantic errors
    /// the offending field.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let before = &text[..s.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("{origin}:{line}:{col}")
                })
                .unwrap_or_else(|| origin.to_string());
            Error::config(at, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dimension(&self) -> Result<Dimension> {
        Dimension::from_usize(self.mesh.dimension).map_err(|e| Error::config("mesh.dimension", e.to_string()))
    }

    /// SHA-256 of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn segment_sets(&self) -> Result<Vec<Vec<Segment>>> {
        let dim = self.dimension()?;
        self.observation
            .segments
            .sets()
            .iter()
            .map(|set| {
                if set.is_empty() {
                    return Err(Error::config("observation.segments", "empty segment set"));
                }
                let mut out = Vec::new();
                for label in set {
                    if label.eq_ignore_ascii_case("all") {
                        out.extend(Segment::all(dim));
                    } else {
                        out.push(
                            Segment::parse(label, dim)
                                .map_err(|e| Error::config("observation.segments", e.to_string()))?,
                        );
                    }
                }
                out.dedup();
                Ok(out)
            })
            .collect()
    }

    pub fn weight(&self) -> Result<WeightFunction> {
        match &self.observation.weight {
            WeightSpec::Constant(c) if *c > 0.0 && c.is_finite() => Ok(WeightFunction::Constant(*c)),
            WeightSpec::Constant(c) => Err(Error::config("observation.weight", format!("constant weight must be positive, got {c}"))),
            WeightSpec::Named(s) if s == "one_minus_t" => Ok(WeightFunction::OneMinusT),
            WeightSpec::Named(s) => Err(Error::config(
                "observation.weight",
                format!("unknown weight `{s}` (expected `one_minus_t` or a positive constant)"),
            )),
        }
    }

    pub fn mu_rules(&self) -> Result<Vec<MuRule>> {
        self.inversion
            .mu
            .to_vec()
            .iter()
            .map(|m| match m {
                MuSpec::Value(v) if *v >= 0.0 && v.is_finite() => Ok(MuRule::Explicit(*v)),
                MuSpec::Value(v) => Err(Error::config("inversion.mu", format!("explicit mu must be >= 0, got {v}"))),
                MuSpec::Rule(s) => MuRule::parse(s).map_err(|e| Error::config("inversion.mu", e.to_string())),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if exact_coefficient(self.example, [0.5, 0.5]).is_none() {
            return Err(Error::config("example", format!("unknown example {}, expected 1..=7", self.example)));
        }
        let dim = self.dimension()?;
        if dim.as_usize() != example_dimension(self.example) {
            return Err(Error::config(
                "mesh.dimension",
                format!("example {} is {}D", self.example, example_dimension(self.example)),
            ));
        }
        if self.mesh.elements < 2 {
            return Err(Error::config("mesh.elements", "need at least 2 elements per side"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        if !(self.time.horizon > 0.0) || self.time.steps == 0 {
            return Err(Error::config("time", "horizon and steps must be positive"));
        }
        let alphas = self.time.alpha.to_vec();
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::config("time.alpha", "every order must lie in (0, 1)"));
        }
        let counts = self.sources.count.to_vec();
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::config("sources.count", "basis sizes must be >= 1"));
        }
        let eps = self.noise.epsilon.to_vec();
        if eps.is_empty() || eps.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::config("noise.epsilon", "noise levels must be finite and >= 0"));
        }
        if self.observation.data.to_vec().is_empty() {
            return Err(Error::config("observation.data", "at least one data type"));
        }
        self.segment_sets()?;
        self.weight()?;
        if self.mu_rules()?.is_empty() {
            return Err(Error::config("inversion.mu", "at least one rule"));
        }
        if !(self.inversion.eps > 0.0) || self.inversion.max_iter == 0 {
            return Err(Error::config("inversion", "eps must be > 0 and max_iter >= 1"));
        }
        if let Some(qm) = self.inversion.q_max {
            if !(qm > 0.0) || !qm.is_finite() {
                return Err(Error::config("inversion.q_max", "must be positive"));
            }
        }
        if self.uq.enabled {
            if self.uq.samples < 2 {
                return Err(Error::config("uq.samples", "need at least 2 samples"));
            }
            if !(self.uq.confidence > 0.0 && self.uq.confidence < 1.0) {
                return Err(Error::config("uq.confidence", "must lie in (0, 1)"));
            }
        }
        for p in &self.uq.probes {
            if p.len() != dim.as_usize() || p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config("uq.probes", format!("probe {p:?} is not a point of the domain")));
            }
        }
        Ok(())
    }

    /// Sweep points in a fixed order: alpha, N, segments, data, epsilon, mu, repeat.
    pub fn jobs(&self) -> Result<Vec<JobSpec>> {
        let mut out = Vec::new();
        for alpha in self.time.alpha.to_vec() {
            for count in self.sources.count.to_vec() {
                for segments in self.segment_sets()? {
                    for data in self.observation.data.to_vec() {
                        for epsilon in self.noise.epsilon.to_vec() {
                            for mu in self.mu_rules()? {
                                for repeat in 0..self.repeats {
                                    out.push(JobSpec {
                                        alpha,
                                        count,
                                        segments: segments.clone(),
                                        data,
                                        epsilon,
                                        mu,
                                        repeat,
                                        seed: self.seed.wrapping_add(repeat as u64),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub alpha: f64,
    pub count: usize,
    pub segments: Vec<Segment>,
    pub data: ObservationKind,
    pub epsilon: f64,
    pub mu: MuRule,
    pub repeat: usize,
    pub seed: u64,
}

impl JobSpec {
    pub fn segment_label(&self, dim: Dimension) -> String {
        self.segments.iter().map(|s| s.label(dim)).collect::<Vec<_>>().join("+")
    }

    fn data_label(&self) -> &'static str {
        match self.data {
            ObservationKind::AverageFlux => "average",
            ObservationKind::DirectFlux => "direct",
        }
    }

    /// Directory name of the job.
    pub fn slug(&self, dim: Dimension) -> String {
        let mu = match self.mu {
            MuRule::Explicit(v) => format!("mu{v:e}"),
            rule => rule.label().replace("delta^", "d").replace("delta", "d1"),
        };
        format!(
            "a{}_N{}_{}_{}_e{:e}_{}_r{}",
            self.alpha,
            self.count,
            self.segment_label(dim),
            self.data_label(),
            self.epsilon,
            mu,
            self.repeat
        )
    }

    /// Key of the sweep point (everything but the repeat).
    fn point(&self, dim: Dimension) -> (String, usize, String, &'static str, String, String) {
        (
            format!("{}", self.alpha),
            self.count,
            self.segment_label(dim),
            self.data_label(),
            format!("{:e}", self.epsilon),
            self.mu.label(),
        )
    }
}

/// Artifact header shared by every output of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactMeta {
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl ArtifactMeta {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            version: VERSION.to_string(),
            config_sha256: cfg.hash(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!(
            "# fluxinv {} config_sha256={} seed={}\n",
            self.version, self.config_sha256, self.seed
        )
    }
}

/// Shared discretization for all jobs of a configuration.
pub struct Setup {
    pub space: Arc<FemSpace>,
    pub truth: Vec<f64>,
    pub q_max: f64,
    horizon: f64,
    steps: usize,
    basis: BasisKind,
    weight: WeightFunction,
    flux: FluxMethod,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = build_mesh(cfg.mesh.dimension, cfg.mesh.elements)?;
        let space = Arc::new(FemSpace::new(mesh, DiffusionTensor::identity())?);
        let truth: Vec<f64> = space
            .mesh()
            .coords()
            .iter()
            .map(|&c| exact_coefficient(cfg.example, c).expect("validated example"))
            .collect();
        let q_max = cfg
            .inversion
            .q_max
            .unwrap_or_else(|| 2.0 * truth.iter().cloned().fold(0.0, f64::max));
        Ok(Self {
            space,
            truth,
            q_max,
            horizon: cfg.time.horizon,
            steps: cfg.time.steps,
            basis: cfg.sources.basis,
            weight: cfg.weight()?,
            flux: cfg.observation.flux,
        })
    }

    pub fn model(&self, job: &JobSpec) -> Result<ForwardModel> {
        let grid = TemporalGrid::new(self.horizon, self.steps, job.alpha)?;
        let sources = SourceSystem::new(self.basis, job.count, self.space.mesh(), &grid, &TemporalProfile::Linear)?;
        let weight = match job.data {
            ObservationKind::AverageFlux => self.weight.clone(),
            ObservationKind::DirectFlux => WeightFunction::Constant(1.0),
        };
        ForwardModel::new(self.space.clone(), grid, sources, &weight, &job.segments, job.data)
    }
    /// Index of the mesh node closest to `p`.
    pub fn nearest_node(&self, p: &[f64]) -> usize {
        let coords = self.space.mesh().coords();
        (0..coords.len())
            .min_by(|&a, &b| {
                let da = (0..p.len()).map(|k| (coords[a][k] - p[k]).powi(2)).sum::<f64>();
                let db = (0..p.len()).map(|k| (coords[b][k] - p[k]).powi(2)).sum::<f64>();
                da.partial_cmp(&db).expect("finite coordinates")
            })
            .expect("nonempty mesh")
    }
}

/// Laplace posterior at the MAP point with its summaries.
pub struct PosteriorSummary {
    pub model: PosteriorModel,
    pub ensemble: PosteriorEnsemble,
    pub confidence: ConfidenceReport,
}

pub struct JobResult {
    pub spec: JobSpec,
    pub model: ForwardModel,
    pub clean: MeasurementMatrix,
    pub noisy: MeasurementMatrix,
    pub delta: f64,
    pub mu: f64,
    pub cgm: CgmResult,
    /// Relative L2 error of the MAP point.
    pub relative_error_map: f64,
    /// Relative L2 error of the posterior sample mean, or of the MAP point
    /// when no posterior was sampled.
    pub relative_error: f64,
    pub skewness: Option<SkewnessReport>,
    pub posterior: Option<PosteriorSummary>,
}

/// Data synthesis, inversion and (for noisy data) Laplace sampling of one job.
pub fn run_job(setup: &Setup, uq: &UqConfig, cgm: CgmOptions, job: &JobSpec) -> Result<JobResult> {
    let model = setup.model(job)?;
    let truth = CoefficientField::unbounded(setup.truth.clone());
    let clean = model.forward_map_with(&truth, setup.flux)?;
    let noisy = add_noise(&clean, job.epsilon, job.seed)?;
    let delta = noisy.noise().map_or(0.0, |n| n.delta);
    let mu = job.mu.resolve(delta);
    let q0 = CoefficientField::zeros(setup.space.node_count(), 0.0, setup.q_max)?;
    let result = run_cgm(&model, &q0, &noisy, &ObjectiveConfig::new(mu)?, &cgm)?;
    let relative_error_map = relative_error(&setup.space, result.q.values(), &setup.truth)?;
    let skew = skewness(&setup.space, result.q.values()).ok();
    let posterior = if uq.enabled && delta > 0.0 && mu > 0.0 {
        let p = assemble_jacobian(&model, &result.q)?;
        let pm = PosteriorModel::new(result.q.values(), p, mu, delta)?;
        let opts = EnsembleOptions {
            count: uq.samples,
            seed: job.seed,
            keep_samples: uq.dump_samples,
            track_covariance: false,
        };
        let ensemble = sample_posterior_with(&pm, &opts)?;
        let confidence = confidence_interval(&pm, uq.confidence, uq.samples)?;
        Some(PosteriorSummary {
            model: pm,
            ensemble,
            confidence,
        })
    } else {
        None
    };
    let relative_error = match &posterior {
        Some(p) => relative_error(&setup.space, p.ensemble.mean(), &setup.truth)?,
        None => relative_error_map,
    };
    Ok(JobResult {
        spec: job.clone(),
        model,
        clean,
        noisy,
        delta,
        mu,
        cgm: result,
        relative_error_map,
        relative_error,
        skewness: skew,
        posterior,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobOutcome {
    pub slug: String,
    pub alpha: f64,
    pub count: usize,
    pub segments: String,
    pub data: ObservationKind,
    pub epsilon: f64,
    pub mu_rule: String,
    pub repeat: usize,
    pub seed: u64,
    pub delta: f64,
    pub mu: f64,
    pub iterations: usize,
    pub converged: bool,
    pub relative_error_map: f64,
    pub relative_error: f64,
    pub skewness: Option<Vec<f64>>,
    /// Confidence half-widths at the configured probe points.
    pub probe_half_widths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Mean and sample standard deviation of `r_e` over repeats of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub count: usize,
    pub segments: String,
    pub data: ObservationKind,
    pub epsilon: f64,
    pub mu_rule: String,
    pub runs: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub directory: PathBuf,
    pub meta: ArtifactMeta,
    pub outcomes: Vec<JobOutcome>,
    pub summary: Vec<SweepPoint>,
    pub failures: Vec<(String, String)>,
    pub checks: Vec<TrendCheck>,
}

impl ExperimentReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn coord_header(dim: Dimension) -> &'static str {
    match dim {
        Dimension::One => "x",
        Dimension::Two => "x,y",
    }
}

fn coord_fields(c: [f64; 2], dim: Dimension) -> String {
    match dim {
        Dimension::One => format!("{:e}", c[0]),
        Dimension::Two => format!("{:e},{:e}", c[0], c[1]),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Writes the per-job artifacts into `dir`.
pub fn write_job_artifacts(setup: &Setup, cfg: &ExperimentConfig, res: &JobResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = ArtifactMeta::new(cfg, res.spec.seed);
    let dim = setup.space.mesh().dimension();
    let coords = setup.space.mesh().coords();
    let nodes = res.model.observation().nodes();

    for (name, m) in [("data_clean.csv", &res.clean), ("data_noisy.csv", &res.noisy)] {
        let mut w = create(&dir.join(name))?;
        w.write_all(meta.comment().as_bytes())?;
        m.write_csv(&mut w, nodes)?;
        w.flush()?;
    }

    let mut w = create(&dir.join("cgm_log.csv"))?;
    w.write_all(meta.comment().as_bytes())?;
    res.cgm.write_log(&mut w)?;
    w.flush()?;

    let mut w = create(&dir.join("reconstruction.csv"))?;
    w.write_all(meta.comment().as_bytes())?;
    writeln!(w, "node_index,{},q", coord_header(dim))?;
    for (i, q) in res.cgm.q.values().iter().enumerate() {
        writeln!(w, "{i},{},{q:e}", coord_fields(coords[i], dim))?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct SkewJson<'a> {
        #[serde(flatten)]
        meta: &'a ArtifactMeta,
        field: &'static str,
        axes: Vec<crate::uq::AxisMoments>,
        ensemble_mean_axes: Option<Vec<crate::uq::AxisMoments>>,
    }
    let ens_skew = res
        .posterior
        .as_ref()
        .and_then(|p| skewness(&setup.space, p.ensemble.mean()).ok())
        .map(|r| r.axes);
    write_json(
        &dir.join("skewness.json"),
        &SkewJson {
            meta: &meta,
            field: "q_map",
            axes: res.skewness.as_ref().map(|r| r.axes.clone()).unwrap_or_default(),
            ensemble_mean_axes: ens_skew,
        },
    )?;

    if let Some(post) = &res.posterior {
        let mean = post.ensemble.mean();
        let sd = post.ensemble.sd();
        let hw = &post.confidence.half_widths;
        let mut w = create(&dir.join("ensemble.csv"))?;
        w.write_all(meta.comment().as_bytes())?;
        writeln!(w, "node,{},mean,sd,ci_lo,ci_hi", coord_header(dim))?;
        for i in 0..mean.len() {
            writeln!(
                w,
                "{i},{},{:e},{:e},{:e},{:e}",
                coord_fields(coords[i], dim),
                mean[i],
                sd[i],
                mean[i] - hw[i],
                mean[i] + hw[i]
            )?;
        }
        w.flush()?;

        if !cfg.uq.probes.is_empty() {
            let mut w = create(&dir.join("probes.csv"))?;
            w.write_all(meta.comment().as_bytes())?;
            writeln!(w, "{},node,mean,ci_lo,ci_hi,half_width", coord_header(dim))?;
            for p in &cfg.uq.probes {
                let i = setup.nearest_node(p);
                writeln!(
                    w,
                    "{},{i},{:e},{:e},{:e},{:e}",
                    coord_fields(coords[i], dim),
                    mean[i],
                    mean[i] - hw[i],
                    mean[i] + hw[i],
                    hw[i]
                )?;
            }
            w.flush()?;
        }

        #[derive(Serialize)]
        struct ConfJson<'a> {
            #[serde(flatten)]
            meta: &'a ArtifactMeta,
            confidence: f64,
            samples: usize,
            chi2: f64,
            delta: f64,
            mu: f64,
            axes: &'a [f64],
        }
        write_json(
            &dir.join("confidence.json"),
            &ConfJson {
                meta: &meta,
                confidence: post.confidence.confidence,
                samples: post.confidence.samples,
                chi2: post.confidence.chi2,
                delta: res.delta,
                mu: res.mu,
                axes: &post.confidence.axes,
            },
        )?;

        if post.ensemble.samples().is_some() {
            let header = serde_json::to_string(&meta).map_err(|e| Error::Serialization(e.to_string()))?;
            let mut w = create(&dir.join("samples.bin"))?;
            post.ensemble.write_raw(&mut w, &header)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn outcome(setup: &Setup, cfg: &ExperimentConfig, res: &JobResult, dim: Dimension) -> JobOutcome {
    let probe_half_widths = res
        .posterior
        .as_ref()
        .map(|p| {
            cfg.uq
                .probes
                .iter()
                .map(|x| p.confidence.half_widths[setup.nearest_node(x)])
                .collect()
        })
        .unwrap_or_default();
    JobOutcome {
        slug: res.spec.slug(dim),
        alpha: res.spec.alpha,
        count: res.spec.count,
        segments: res.spec.segment_label(dim),
        data: res.spec.data,
        epsilon: res.spec.epsilon,
        mu_rule: res.spec.mu.label(),
        repeat: res.spec.repeat,
        seed: res.spec.seed,
        delta: res.delta,
        mu: res.mu,
        iterations: res.cgm.log.len(),
        converged: res.cgm.converged,
        relative_error_map: res.relative_error_map,
        relative_error: res.relative_error,
        skewness: res.skewness.as_ref().map(|s| s.axes.iter().map(|a| a.skewness).collect()),
        probe_half_widths,
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn summarize(outcomes: &[JobOutcome], jobs: &[JobSpec], dim: Dimension) -> Vec<SweepPoint> {
    let mut groups: Vec<(_, Vec<&JobOutcome>)> = Vec::new();
    for (o, j) in outcomes.iter().zip(jobs) {
        let key = j.point(dim);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(o),
            None => groups.push((key, vec![o])),
        }
    }
    groups
        .into_iter()
        .map(|(_, v)| {
            let re: Vec<f64> = v.iter().map(|o| o.relative_error).collect();
            let (mean, sd) = mean_sd(&re);
            SweepPoint {
                alpha: v[0].alpha,
                count: v[0].count,
                segments: v[0].segments.clone(),
                data: v[0].data,
                epsilon: v[0].epsilon,
                mu_rule: v[0].mu_rule.clone(),
                runs: v.len(),
                mean,
                sd,
            }
        })
        .collect()
}

/// Number of adjacent pairs that break the requested monotone order.
pub fn count_inversions(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

fn trend(
    summary: &[SweepPoint],
    name: &str,
    axis: impl Fn(&SweepPoint) -> f64,
    rest: impl Fn(&SweepPoint) -> String,
    filter: impl Fn(&SweepPoint) -> bool,
    increasing: bool,
    tolerated: usize,
) -> Vec<TrendCheck> {
    let mut lines: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in summary.iter().filter(|p| filter(p)) {
        lines.entry(rest(p)).or_default().push((axis(p), p.mean));
    }
    lines
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite axis"));
            let values: Vec<f64> = v.iter().map(|p| p.1).collect();
            let inv = count_inversions(&values, increasing);
            TrendCheck {
                name: format!("{name} [{k}]"),
                passed: inv <= tolerated,
                detail: format!(
                    "{} inversions (tolerated {tolerated}): {}",
                    inv,
                    v.iter().map(|(a, r)| format!("{a}:{r:.4}")).collect::<Vec<_>>().join(" ")
                ),
            }
        })
        .collect()
}

/// Trend assertions over the sweep: decreasing in N, increasing in epsilon,
/// increasing in alpha for epsilon >= 5e-4.
pub fn trend_checks(summary: &[SweepPoint]) -> Vec<TrendCheck> {
    let key = |p: &SweepPoint, skip: &str| {
        let mut parts = Vec::new();
        if skip != "alpha" {
            parts.push(format!("alpha={}", p.alpha));
        }
        if skip != "N" {
            parts.push(format!("N={}", p.count));
        }
        if skip != "eps" {
            parts.push(format!("eps={:e}", p.epsilon));
        }
        parts.push(format!("{} {:?} mu={}", p.segments, p.data, p.mu_rule));
        parts.join(" ")
    };
    let mut out = trend(summary, "r_e decreasing in N", |p| p.count as f64, |p| key(p, "N"), |_| true, false, 1);
    out.extend(trend(summary, "r_e increasing in epsilon", |p| p.epsilon, |p| key(p, "eps"), |p| p.epsilon > 0.0, true, 0));
    out.extend(trend(summary, "r_e increasing in alpha", |p| p.alpha, |p| key(p, "alpha"), |p| p.epsilon >= 5e-4, true, 1));
    out
}

fn write_summaries(dir: &Path, meta: &ArtifactMeta, report: &ExperimentReport) -> Result<()> {
    let mut w = create(&dir.join("runs.csv"))?;
    w.write_all(meta.comment().as_bytes())?;
    writeln!(w, "alpha,N,segments,data,epsilon,mu_rule,repeat,seed,delta,mu,iterations,converged,r_e_map,r_e")?;
    for o in &report.outcomes {
        writeln!(
            w,
            "{},{},{},{:?},{:e},{},{},{},{:e},{:e},{},{},{:e},{:e}",
            o.alpha, o.count, o.segments, o.data, o.epsilon, o.mu_rule, o.repeat, o.seed, o.delta, o.mu,
            o.iterations, o.converged, o.relative_error_map, o.relative_error
        )?;
    }
    w.flush()?;

    let mut w = create(&dir.join("re_summary.csv"))?;
    w.write_all(meta.comment().as_bytes())?;
    writeln!(w, "alpha,N,segments,data,epsilon,mu_rule,runs,r_e_mean,r_e_sd")?;
    for p in &report.summary {
        writeln!(
            w,
            "{},{},{},{:?},{:e},{},{},{:e},{:e}",
            p.alpha, p.count, p.segments, p.data, p.epsilon, p.mu_rule, p.runs, p.mean, p.sd
        )?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct Checks<'a> {
        #[serde(flatten)]
        meta: &'a ArtifactMeta,
        checks: &'a [TrendCheck],
        failures: &'a [(String, String)],
    }
    write_json(
        &dir.join("checks.json"),
        &Checks {
            meta,
            checks: &report.checks,
            failures: &report.failures,
        },
    )
}

/// Runs every sweep point of `cfg` (in parallel) and writes artifacts under
/// `out`. Failed jobs leave a `FAILED` marker next to their partial artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let setup = Setup::new(cfg)?;
    let jobs = cfg.jobs()?;
    run_jobs(cfg, &setup, &jobs, out, cfg.uq.clone())
}

fn run_jobs(cfg: &ExperimentConfig, setup: &Setup, jobs: &[JobSpec], out: &Path, uq: UqConfig) -> Result<ExperimentReport> {
    let dim = cfg.dimension()?;
    let opts = CgmOptions {
        eps: cfg.inversion.eps,
        max_iter: cfg.inversion.max_iter,
    };
    fs::create_dir_all(out)?;
    let meta = ArtifactMeta::new(cfg, cfg.seed);
    fs::write(out.join("config.toml"), format!("{}{}", meta.comment(), cfg.to_toml()?))?;

    let results: Vec<std::result::Result<JobOutcome, (String, String)>> = jobs
        .par_iter()
        .map(|job| {
            let slug = job.slug(dim);
            let dir = out.join("jobs").join(&slug);
            let run = || -> Result<JobOutcome> {
                let res = run_job(setup, &uq, opts, job)?;
                write_job_artifacts(setup, cfg, &res, &dir)?;
                Ok(outcome(setup, cfg, &res, dim))
            };
            run().map_err(|e| {
                let msg = e.to_string();
                let _ = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("FAILED"), format!("{msg}\n")));
                log::error!("job {slug} failed: {msg}");
                (slug, msg)
            })
        })
        .collect();

    let mut outcomes = Vec::new();
    let mut ok_jobs = Vec::new();
    let mut failures = Vec::new();
    for (r, j) in results.into_iter().zip(jobs) {
        match r {
            Ok(o) => {
                outcomes.push(o);
                ok_jobs.push(j.clone());
            }
            Err(f) => failures.push(f),
        }
    }
    let summary = summarize(&outcomes, &ok_jobs, dim);
    let checks = trend_checks(&summary);
    let report = ExperimentReport {
        directory: out.to_path_buf(),
        meta: meta.clone(),
        outcomes,
        summary,
        failures,
        checks,
    };
    write_summaries(out, &meta, &report)?;
    if !report.failures.is_empty() {
        fs::write(
            out.join("FAILED"),
            report
                .failures
                .iter()
                .map(|(s, m)| format!("{s}: {m}\n"))
                .collect::<String>(),
        )?;
    }
    Ok(report)
}

pub const COMPARISON_EPSILONS: [f64; 6] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub epsilon: f64,
    pub average: (f64, f64),
    pub direct: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub experiment: ExperimentReport,
    pub rows: Vec<ComparisonRow>,
}

/// Average-flux vs direct-flux reconstructions over a range of noise levels.
/// Uses the configured noise list when it has more than one level, otherwise
/// the default range `1e-4 .. 5e-2`; posterior sampling is skipped.
pub fn compare_data_types(cfg: &ExperimentConfig, out: &Path) -> Result<ComparisonReport> {
    let mut cfg = cfg.clone();
    cfg.observation.data = OneOrMany::Many(vec![ObservationKind::AverageFlux, ObservationKind::DirectFlux]);
    if cfg.noise.epsilon.to_vec().len() < 2 {
        cfg.noise.epsilon = OneOrMany::Many(COMPARISON_EPSILONS.to_vec());
    }
    cfg.uq.enabled = false;
    let setup = Setup::new(&cfg)?;
    let jobs = cfg.jobs()?;
    let experiment = run_jobs(&cfg, &setup, &jobs, out, cfg.uq.clone())?;
    let mut rows = Vec::new();
    for eps in cfg.noise.epsilon.to_vec() {
        let pick = |kind| {
            let v: Vec<f64> = experiment
                .summary
                .iter()
                .filter(|p| p.data == kind && p.epsilon == eps)
                .map(|p| p.mean)
                .collect();
            if v.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_sd(&v)
            }
        };
        let (av, dv) = (pick(ObservationKind::AverageFlux), pick(ObservationKind::DirectFlux));
        let sd_of = |kind| {
            experiment
                .summary
                .iter()
                .find(|p| p.data == kind && p.epsilon == eps)
                .map_or(f64::NAN, |p| p.sd)
        };
        rows.push(ComparisonRow {
            epsilon: eps,
            average: (av.0, sd_of(ObservationKind::AverageFlux)),
            direct: (dv.0, sd_of(ObservationKind::DirectFlux)),
        });
    }
    let mut w = create(&out.join("compare_data.csv"))?;
    w.write_all(experiment.meta.comment().as_bytes())?;
    writeln!(w, "epsilon,re_average_mean,re_average_sd,re_direct_mean,re_direct_sd")?;
    for r in &rows {
        writeln!(w, "{:e},{:e},{:e},{:e},{:e}", r.epsilon, r.average.0, r.average.1, r.direct.0, r.direct.1)?;
    }
    w.flush()?;
    Ok(ComparisonReport { experiment, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::example(1).unwrap();
        cfg.mesh.elements = 40;
        cfg.time.steps = 20;
        cfg.noise.epsilon = OneOrMany::Many(vec![0.0, 1e-3]);
        cfg.uq.samples = 200;
        cfg.inversion.max_iter = 30;
        cfg
    }

    #[test]
    fn examples_validate_and_round_trip() {
        for n in 1..=7 {
            let cfg = ExperimentConfig::example(n).unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml_str(&text, "mem").unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert!(ExperimentConfig::example(8).is_err());
        let sets = ExperimentConfig::example(7).unwrap().segment_sets().unwrap();
        assert_eq!(sets[0].len(), 4);
    }

    #[test]
    fn exact_coefficients() {
        assert_eq!(exact_coefficient(1, [0.5, 0.0]), Some(0.25 * 0.75));
        assert_eq!(exact_coefficient(4, [2.0 / 3.0, 0.0]), Some(2.0 / 3.0));
        assert!((exact_coefficient(4, [0.9, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(exact_coefficient(5, [0.5, 0.0]), Some(0.0));
        assert_eq!(exact_coefficient(5, [0.8, 0.0]), Some(0.4));
        assert_eq!(exact_coefficient(7, [0.5, 0.5]), Some(0.0625));
        assert_eq!(exact_coefficient(9, [0.5, 0.5]), None);
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let text = "name = \"x\"\nexample = 1\nseed = 1\n[mesh]\ndimension = 1\nelements = \"many\"\n";
        match ExperimentConfig::from_toml_str(text, "cfg.toml") {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("cfg.toml:6:"), "{field}"),
            other => panic!("{other:?}"),
        }
        let mut cfg = ExperimentConfig::example(1).unwrap();
        cfg.time.alpha = OneOrMany::One(1.5);
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "time.alpha"),
            other => panic!("{other:?}"),
        }
        cfg = ExperimentConfig::example(1).unwrap();
        cfg.observation.segments = SegmentSpec::Set(vec!["L3".into()]);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "observation.segments"));
        cfg = ExperimentConfig::example(1).unwrap();
        cfg.inversion.mu = OneOrMany::One(MuSpec::Rule("delta^7".into()));
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "inversion.mu"));
        let unknown = format!("{}\nbogus = 1\n", ExperimentConfig::example(1).unwrap().to_toml().unwrap());
        assert!(ExperimentConfig::from_toml_str(&unknown, "x").is_err());
    }

    #[test]
    fn sweep_order_and_seeds() {
        let mut cfg = small();
        cfg.repeats = 2;
        cfg.sources.count = OneOrMany::Many(vec![1, 2]);
        let jobs = cfg.jobs().unwrap();
        assert_eq!(jobs.len(), 2 * 2 * 2);
        assert_eq!(jobs[0].count, 1);
        assert_eq!(jobs[1].seed, cfg.seed + 1);
        assert_eq!(jobs[2].epsilon, 1e-3);
    }

    #[test]
    fn inversions_counted_on_adjacent_pairs() {
        assert_eq!(count_inversions(&[0.5, 0.4, 0.45, 0.1], false), 1);
        assert_eq!(count_inversions(&[0.1, 0.2, 0.3], true), 0);
        assert_eq!(count_inversions(&[0.3, 0.2, 0.1], true), 2);
    }

    #[test]
    fn run_writes_deterministic_artifacts() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        assert!(ra.failures.is_empty());
        assert_eq!(ra.outcomes.len(), 2);
        // noiseless run recovers the coefficient, noisy run gets a posterior
        assert!(ra.outcomes[0].relative_error < ra.outcomes[1].relative_error);
        let noisy = a.path().join("jobs").join(&ra.outcomes[1].slug);
        let quiet = a.path().join("jobs").join(&ra.outcomes[0].slug);
        assert!(noisy.join("ensemble.csv").exists());
        assert!(!quiet.join("ensemble.csv").exists());
        for f in ["data_clean.csv", "data_noisy.csv", "cgm_log.csv", "reconstruction.csv", "ensemble.csv", "skewness.json"] {
            let x = fs::read(noisy.join(f)).unwrap();
            let y = fs::read(b.path().join("jobs").join(&ra.outcomes[1].slug).join(f)).unwrap();
            assert_eq!(x, y, "{f}");
            let text = String::from_utf8(x).unwrap();
            assert!(text.contains(&cfg.hash()), "{f}");
            assert!(text.contains(&format!("{}", cfg.seed)), "{f}");
            assert!(!text.contains('\r'));
        }
        let rec = fs::read_to_string(noisy.join("reconstruction.csv")).unwrap();
        assert_eq!(rec.lines().nth(1), Some("node_index,x,q"));
        assert_eq!(rec.lines().count(), 2 + 41);
        let ens = fs::read_to_string(noisy.join("ensemble.csv")).unwrap();
        assert_eq!(ens.lines().nth(1), Some("node,x,mean,sd,ci_lo,ci_hi"));
        assert!(a.path().join("re_summary.csv").exists());
        assert!(!a.path().join("FAILED").exists());
    }

    #[test]
    fn failed_job_leaves_marker() {
        let mut cfg = small();
        cfg.noise.epsilon = OneOrMany::One(1e-3);
        let setup = Setup::new(&cfg).unwrap();
        let mut jobs = cfg.jobs().unwrap();
        jobs[0].segments.clear();
        let dir = tempfile::tempdir().unwrap();
        let rep = run_jobs(&cfg, &setup, &jobs, dir.path(), cfg.uq.clone()).unwrap();
        assert_eq!(rep.failures.len(), 1);
        assert!(dir.path().join("FAILED").exists());
        assert!(dir.path().join("jobs").join(&rep.failures[0].0).join("FAILED").exists());
    }
}
