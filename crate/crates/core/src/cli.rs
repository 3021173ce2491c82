//! `falconbc <command> --config <path> [--seed n] [--threads n] [--out dir]`

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::anatomy::{
    self, evaluate_embedding, procedural_corpus, train_embedding, AnatomyError, EmbedEval, EmbedHyper, EmbeddingModel,
    LabeledGeometry, Normalization, Phase, PointCloud, TubeShape, CORPUS_SEVERITIES,
};
use crate::cfm::{sample_posterior, CfmError, CfmHyper, CfmModel, Integrator, PriorBox, SampleOptions};
use crate::circuit::{summarize, CircuitError, SimSettings, StenosisLocation, TimeTraces, MMHG};
use crate::desk::{self, BcParam};
use crate::inflow::{fit_fourier, read_waveform_csv, reference_cohort, FourierInflow, InflowError, N_HARMONICS};
use crate::pipeline::{
    self, cfm_train, generate_dataset, group_kfold, mean_std, posterior_predictive, random_search, reconstruction_metrics,
    split_fractions, traces_for_values, DatasetTable, GenSpec, Geometry, InflowMode, PipelineError, SearchSpace, TrainSpec,
    Truth, DEFAULT_NOISE, OBS_NAMES,
};
use crate::plot::{self, PlotError};
use crate::tuning::{
    demc_oracle, diff_evolution, hard_constraints_ok, nelder_mead, DeOptions, DemcOptions, NmOptions, TuningError,
    TuningProblem, TuningTargets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    TuneNominal,
    TrainCfm,
    Sample,
    Evaluate,
    GenInflow,
    EmbedAnatomy,
    OracleMcmc,
}

#[derive(Debug, Parser)]
#[command(name = "falconbc", version, about = "Amortized boundary-condition inference for lumped hemodynamic models")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Schema { field: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("rejection sampling exhausted: {0}")]
    Exhausted(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Schema { .. } | CliError::Invalid(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Exhausted(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse_error",
            CliError::Schema { .. } => "schema_error",
            CliError::Invalid(_) => "invalid_config",
            CliError::Numerical(_) => "numerical_failure",
            CliError::Exhausted(_) => "rejection_exhausted",
            CliError::Io(_) => "io_error",
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Schema { field, .. } = self {
            v["field"] = json!(field);
        }
        v
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PlotError> for CliError {
    fn from(e: PlotError) -> Self {
        CliError::Io(format!("plot: {e}"))
    }
}

impl From<CircuitError> for CliError {
    fn from(e: CircuitError) -> Self {
        match e {
            CircuitError::InvalidTopology(_) | CircuitError::StepTooLarge { .. } | CircuitError::BadSettings(_) => {
                CliError::Invalid(e.to_string())
            }
            CircuitError::Csv(_) | CircuitError::Io(_) | CircuitError::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CfmError> for CliError {
    fn from(e: CfmError) -> Self {
        match e {
            CfmError::AllRejected { .. } | CfmError::Exhausted { .. } => CliError::Exhausted(e.to_string()),
            CfmError::BadBounds(_) | CfmError::BadHyper(_) | CfmError::DimMismatch { .. } => CliError::Invalid(e.to_string()),
            CfmError::Io(_) | CfmError::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Cfm(c) => c.into(),
            PipelineError::Circuit(c) => c.into(),
            PipelineError::ZeroVariance(_) | PipelineError::Simulation { .. } => CliError::Numerical(e.to_string()),
            PipelineError::Io(_) | PipelineError::Csv(_) | PipelineError::Json(_) => CliError::Io(e.to_string()),
            PipelineError::Inflow(i) => i.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TuningError> for CliError {
    fn from(e: TuningError) -> Self {
        match e {
            TuningError::Circuit(c) => c.into(),
            TuningError::Io(_) => CliError::Io(e.to_string()),
            TuningError::BadTargets(_) | TuningError::BadBounds(_) | TuningError::BadOptions(_) | TuningError::NonFiniteStart => {
                CliError::Invalid(e.to_string())
            }
            TuningError::NonPositiveResistance { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<AnatomyError> for CliError {
    fn from(e: AnatomyError) -> Self {
        match e {
            AnatomyError::Diverged(_) | AnatomyError::Nn(_) => CliError::Numerical(e.to_string()),
            AnatomyError::Io(_) | AnatomyError::Csv(_) | AnatomyError::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<InflowError> for CliError {
    fn from(e: InflowError) -> Self {
        match e {
            InflowError::Csv(_) | InflowError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

fn zero() -> u64 {
    0
}

fn default_rel_range() -> f64 {
    0.3
}

fn default_noise() -> Vec<f64> {
    DEFAULT_NOISE.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalBlock {
    pub param: BcParam,
    /// Defaults to the desk nominal of `param`.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default = "default_rel_range")]
    pub rel_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InflowSource {
    Nominal,
    Random,
    /// Feature rows (named columns a0, a1.., b1.., T) read from a CSV.
    FeaturesCsv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub n: usize,
    pub nominal: NominalBlock,
    #[serde(default = "default_noise")]
    pub noise: Vec<f64>,
    #[serde(default)]
    pub simulation: SimSettings,
    #[serde(default)]
    pub geometries: Vec<Geometry>,
    #[serde(default = "nominal_inflow_source")]
    pub inflow: InflowSource,
}

fn nominal_inflow_source() -> InflowSource {
    InflowSource::Nominal
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionBlock {
    pub location: StenosisLocation,
    pub severity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMethod {
    NelderMead,
    De,
}

fn default_bound_scale() -> (f64, f64) {
    (0.3, 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub method: TuneMethod,
    pub targets: TuningTargets,
    #[serde(default)]
    pub lesion: Option<LesionBlock>,
    /// RCR6 start point; defaults to the desk nominal.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    /// DE box as multiples of the start point.
    #[serde(default = "default_bound_scale")]
    pub bound_scale: (f64, f64),
    #[serde(default)]
    pub nelder_mead: NmOptions,
    #[serde(default)]
    pub de: DeOptions,
    #[serde(default)]
    pub simulation: SimSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBlock {
    pub trials: usize,
    #[serde(default)]
    pub space: Option<SearchSpace>,
    /// Epoch cap for each trial (defaults to the full budget).
    #[serde(default)]
    pub epochs: Option<usize>,
}

fn default_split() -> Vec<f64> {
    vec![0.9, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    /// Dataset sidecar JSON.
    pub dataset: PathBuf,
    pub x_columns: Vec<String>,
    pub y_columns: Vec<String>,
    /// Train/validation(/test) fractions.
    #[serde(default = "default_split")]
    pub split: Vec<f64>,
    #[serde(default)]
    pub hyper: CfmHyper,
    #[serde(default)]
    pub search: Option<SearchBlock>,
}

fn default_max_tries() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub model: PathBuf,
    pub n: usize,
    /// Conditioning rows in the model's y order.
    #[serde(default)]
    pub observations: Vec<Vec<f64>>,
    /// Alternatively a CSV with the model's y columns by name.
    #[serde(default)]
    pub observations_csv: Option<PathBuf>,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    #[serde(default)]
    pub integrator: Integrator,
    /// Overrides the model's prior box.
    #[serde(default)]
    pub bounds: Option<PriorBox>,
}

fn default_n_s() -> usize {
    100
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Explicit test rows; otherwise the `test` (or `val`) part of `split`,
    /// otherwise every row.
    #[serde(default)]
    pub rows: Option<Vec<usize>>,
    #[serde(default)]
    pub split: Option<PathBuf>,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default)]
    pub truth: Truth,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub simulation: SimSettings,
    /// Test rows for which full posterior-predictive traces are written.
    #[serde(default = "one")]
    pub trace_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InflowTask {
    /// Fit nine harmonics to a sampled waveform `t,q`.
    Fit {
        waveform: PathBuf,
        #[serde(default)]
        period: Option<f64>,
    },
    /// Perturbed reference waveforms.
    Cohort { count: usize },
    /// Flow matching on a reference cohort's features, then fresh draws.
    Generate {
        count: usize,
        #[serde(default = "default_cohort")]
        cohort: usize,
        #[serde(default)]
        hyper: CfmHyper,
    },
}

fn default_cohort() -> usize {
    16
}

fn default_points() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub task: InflowTask,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_folds() -> usize {
    6
}

fn default_severities() -> Vec<f64> {
    CORPUS_SEVERITIES.to_vec()
}

fn yes() -> bool {
    true
}

fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedTask {
    Train {
        #[serde(default = "default_severities")]
        severities: Vec<f64>,
        /// Grouped cross-validation folds (0 skips cross-validation).
        #[serde(default = "default_folds")]
        folds: usize,
        #[serde(default = "yes")]
        final_model: bool,
        #[serde(default = "default_repeats")]
        repeats: usize,
    },
    Apply {
        model: PathBuf,
        clouds: Vec<PathBuf>,
        /// Clouds are in raw units and get the model's normalization.
        #[serde(default)]
        raw: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub task: EmbedTask,
    #[serde(default)]
    pub shape: TubeShape,
    #[serde(default)]
    pub hyper: EmbedHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "zero")]
    pub seed: u64,
    pub nominal: NominalBlock,
    /// Observed values of `y_columns`.
    pub observation: Vec<f64>,
    #[serde(default = "default_oracle_columns")]
    pub y_columns: Vec<String>,
    /// Relative noise std per observed column.
    #[serde(default)]
    pub noise: Option<Vec<f64>>,
    #[serde(default)]
    pub lesion: Option<LesionBlock>,
    #[serde(default)]
    pub demc: DemcOptions,
    #[serde(default)]
    pub simulation: SimSettings,
}

fn default_oracle_columns() -> Vec<String> {
    vec!["P_dia".into(), "P_sys".into()]
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    GenData(GenDataConfig),
    TuneNominal(TuneConfig),
    TrainCfm(TrainConfig),
    Sample(SampleConfig),
    Evaluate(EvaluateConfig),
    GenInflow(InflowConfig),
    EmbedAnatomy(EmbedConfig),
    OracleMcmc(OracleConfig),
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::GenData(c) => c.seed,
            RunConfig::TuneNominal(c) => c.seed,
            RunConfig::TrainCfm(c) => c.seed,
            RunConfig::Sample(c) => c.seed,
            RunConfig::Evaluate(c) => c.seed,
            RunConfig::GenInflow(c) => c.seed,
            RunConfig::EmbedAnatomy(c) => c.seed,
            RunConfig::OracleMcmc(c) => c.seed,
        }
    }

    fn set_seed(&mut self, s: u64) {
        match self {
            RunConfig::GenData(c) => c.seed = s,
            RunConfig::TuneNominal(c) => c.seed = s,
            RunConfig::TrainCfm(c) => c.seed = s,
            RunConfig::Sample(c) => c.seed = s,
            RunConfig::Evaluate(c) => c.seed = s,
            RunConfig::GenInflow(c) => c.seed = s,
            RunConfig::EmbedAnatomy(c) => c.seed = s,
            RunConfig::OracleMcmc(c) => c.seed = s,
        }
    }
}

/// A parsed config with its provenance hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    /// SHA-256 of the canonical (key-sorted, whitespace-free) JSON.
    pub hash: String,
    /// Directory the config was read from; relative paths resolve against it.
    pub base: PathBuf,
}

fn typed<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let path = if path.is_empty() || path == "." { None } else { Some(path) };
        let message = e.into_inner().to_string();
        // serde reports a missing field at its parent; name the field itself
        let missing = message
            .strip_prefix("missing field `")
            .and_then(|r| r.split('`').next())
            .map(str::to_string);
        let field = match (path, missing) {
            (Some(p), Some(m)) => format!("{p}.{m}"),
            (None, Some(m)) => m,
            (Some(p), None) => p,
            (None, None) => "<root>".into(),
        };
        CliError::Schema { field, message }
    })
}

pub fn hash_value(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

pub fn parse_config_str(text: &str, command: Command, origin: &str) -> Result<(RunConfig, String)> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let hash = hash_value(&value);
    let cfg = match command {
        Command::GenData => RunConfig::GenData(typed(value)?),
        Command::TuneNominal => RunConfig::TuneNominal(typed(value)?),
        Command::TrainCfm => RunConfig::TrainCfm(typed(value)?),
        Command::Sample => RunConfig::Sample(typed(value)?),
        Command::Evaluate => RunConfig::Evaluate(typed(value)?),
        Command::GenInflow => RunConfig::GenInflow(typed(value)?),
        Command::EmbedAnatomy => RunConfig::EmbedAnatomy(typed(value)?),
        Command::OracleMcmc => RunConfig::OracleMcmc(typed(value)?),
    };
    validate(&cfg)?;
    Ok((cfg, hash))
}

pub fn parse_config(path: &Path, command: Command) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (config, hash) = parse_config_str(&text, command, &path.display().to_string())?;
    Ok(ParsedConfig {
        config,
        hash,
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

fn schema(field: &str, message: impl Into<String>) -> CliError {
    CliError::Schema {
        field: field.to_string(),
        message: message.into(),
    }
}

fn validate_nominal(b: &NominalBlock, field: &str) -> Result<()> {
    if let Some(v) = &b.values {
        if v.len() != b.param.dim() {
            return Err(schema(&format!("{field}.values"), format!("{:?} needs {} values", b.param, b.param.dim())));
        }
        if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(schema(&format!("{field}.values"), "values must be positive"));
        }
    }
    if !(b.rel_range > 0.0 && b.rel_range < 1.0) {
        return Err(schema(&format!("{field}.rel_range"), "must lie in (0, 1)"));
    }
    Ok(())
}

fn validate_sim(s: &SimSettings, field: &str) -> Result<()> {
    if !(s.dt > 0.0 && s.dt.is_finite()) || s.n_cycles == 0 || !(s.periodicity_tol > 0.0) {
        return Err(schema(field, "dt, n_cycles and periodicity_tol must be positive"));
    }
    Ok(())
}

fn validate(cfg: &RunConfig) -> Result<()> {
    match cfg {
        RunConfig::GenData(c) => {
            if c.n == 0 {
                return Err(schema("n", "must be at least 1"));
            }
            validate_nominal(&c.nominal, "nominal")?;
            if c.noise.len() != OBS_NAMES.len() {
                return Err(schema("noise", format!("needs {} entries ({})", OBS_NAMES.len(), OBS_NAMES.join(", "))));
            }
            validate_sim(&c.simulation, "simulation")?;
        }
        RunConfig::TuneNominal(c) => {
            c.targets.validate().map_err(|e| schema("targets", e.to_string()))?;
            if let Some(s) = &c.start {
                if s.len() != 6 {
                    return Err(schema("start", "needs six RCR values"));
                }
            }
            let (lo, hi) = c.bound_scale;
            if !(lo > 0.0 && hi > lo) {
                return Err(schema("bound_scale", "needs 0 < lo < hi"));
            }
            validate_sim(&c.simulation, "simulation")?;
        }
        RunConfig::TrainCfm(c) => {
            if c.x_columns.is_empty() {
                return Err(schema("x_columns", "must not be empty"));
            }
            if !(2..=3).contains(&c.split.len()) {
                return Err(schema("split", "needs train/val or train/val/test fractions"));
            }
        }
        RunConfig::Sample(c) => {
            if c.n == 0 {
                return Err(schema("n", "must be at least 1"));
            }
            if c.observations.is_empty() && c.observations_csv.is_none() {
                return Err(schema("observations", "give observations or observations_csv"));
            }
        }
        RunConfig::Evaluate(c) => {
            if c.n_s == 0 {
                return Err(schema("n_s", "must be at least 1"));
            }
            validate_sim(&c.simulation, "simulation")?;
        }
        RunConfig::GenInflow(c) => {
            if c.points < 2 * N_HARMONICS + 1 {
                return Err(schema("points", format!("needs at least {}", 2 * N_HARMONICS + 1)));
            }
        }
        RunConfig::EmbedAnatomy(c) => {
            if let EmbedTask::Train { severities, .. } = &c.task {
                if severities.is_empty() || severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(schema("task.severities", "severities must lie in [0, 1]"));
                }
            }
        }
        RunConfig::OracleMcmc(c) => {
            validate_nominal(&c.nominal, "nominal")?;
            if c.observation.len() != c.y_columns.len() {
                return Err(schema("observation", "one value per y column"));
            }
            if let Some(n) = &c.noise {
                if n.len() != c.y_columns.len() || n.iter().any(|s| !(*s > 0.0)) {
                    return Err(schema("noise", "one positive relative std per y column"));
                }
            }
            for (i, y) in c.y_columns.iter().enumerate() {
                if !OBS_NAMES.contains(&y.as_str()) {
                    return Err(schema(&format!("y_columns[{i}]"), format!("unknown column {y}")));
                }
            }
            validate_sim(&c.simulation, "simulation")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Output directory bookkeeping: every artifact carries the config hash and
/// seed, and the run ends with a manifest.
pub struct Run {
    pub out: PathBuf,
    pub hash: String,
    pub seed: u64,
    command: Command,
    artifacts: Vec<String>,
}

impl Run {
    pub fn new(out: &Path, hash: &str, seed: u64, command: Command) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            hash: hash.to_string(),
            seed,
            command,
            artifacts: vec![],
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn stamp(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.seed)
    }

    pub fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    /// JSON object with `config_hash` and `seed` added.
    pub fn json(&mut self, name: &str, value: Value) -> Result<()> {
        let mut v = value;
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), json!(self.hash));
            m.insert("seed".into(), json!(self.seed));
        }
        std::fs::write(self.path(name), serde_json::to_vec_pretty(&v)?)?;
        self.record(name);
        Ok(())
    }

    /// CSV with a leading `# config_hash=… seed=…` line.
    pub fn csv(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.path(name))?);
        writeln!(f, "# {}", self.stamp())?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn svg(&mut self, name: &str, body: String) -> Result<()> {
        std::fs::write(self.path(name), body)?;
        self.record(name);
        Ok(())
    }

    /// Prepends the stamp line to a CSV written by another module.
    pub fn stamp_csv(&mut self, name: &str) -> Result<()> {
        let p = self.path(name);
        let body = std::fs::read_to_string(&p)?;
        std::fs::write(&p, format!("# {}\n{body}", self.stamp()))?;
        self.record(name);
        Ok(())
    }

    /// One histogram per named column of a persisted CSV.
    pub fn histograms(&mut self, csv_name: &str, columns: &[String], prefix: &str) -> Result<()> {
        let (names, cols) = plot::read_columns(&self.path(csv_name))?;
        for c in columns {
            let v = plot::column(&names, &cols, c)?;
            let svg = plot::histogram_svg(c, v, 30, &self.stamp())?;
            self.svg(&format!("{prefix}{}.svg", sanitize(c)), svg)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<String>> {
        let manifest = json!({
            "command": self.command,
            "artifacts": self.artifacts,
        });
        self.json("manifest.json", manifest)?;
        Ok(self.artifacts)
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn run(command: Command, parsed: &ParsedConfig, out: &Path) -> Result<Vec<String>> {
    let mut run = Run::new(out, &parsed.hash, parsed.config.seed(), command)?;
    let base = parsed.base.as_path();
    match &parsed.config {
        RunConfig::GenData(c) => gen_data(c, base, &mut run)?,
        RunConfig::TuneNominal(c) => tune_nominal(c, &mut run)?,
        RunConfig::TrainCfm(c) => train_cfm(c, base, &mut run)?,
        RunConfig::Sample(c) => sample(c, base, &mut run)?,
        RunConfig::Evaluate(c) => evaluate(c, base, &mut run)?,
        RunConfig::GenInflow(c) => gen_inflow(c, base, &mut run)?,
        RunConfig::EmbedAnatomy(c) => embed_anatomy(c, base, &mut run)?,
        RunConfig::OracleMcmc(c) => oracle_mcmc(c, &mut run)?,
    }
    run.finish()
}

fn read_feature_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (names, cols) = plot::read_columns(path)?;
    let wanted = FourierInflow::feature_names();
    let picked: Vec<&[f64]> = wanted
        .iter()
        .map(|n| plot::column(&names, &cols, n))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let n = picked.first().map_or(0, |c| c.len());
    Ok((0..n).map(|i| picked.iter().map(|c| c[i]).collect()).collect())
}

fn gen_data(c: &GenDataConfig, base: &Path, run: &mut Run) -> Result<()> {
    let inflow = match &c.inflow {
        InflowSource::Nominal => InflowMode::Nominal,
        InflowSource::Random => InflowMode::Random,
        InflowSource::FeaturesCsv { path } => InflowMode::Features {
            rows: read_feature_rows(&resolve(base, path))?,
        },
    };
    let nominal = c.nominal.values.clone();
    let geometries = if nominal.is_some() && c.geometries.iter().all(|g| g.nominal.is_none()) && !c.geometries.is_empty() {
        c.geometries
            .iter()
            .map(|g| Geometry {
                nominal: nominal.clone(),
                ..g.clone()
            })
            .collect()
    } else if c.geometries.is_empty() && nominal.is_some() {
        vec![Geometry {
            location: None,
            severity: 0.0,
            nominal: nominal.clone(),
            latent: None,
        }]
    } else {
        c.geometries.clone()
    };
    let spec = GenSpec {
        param: c.nominal.param,
        n: c.n,
        rel_range: c.nominal.rel_range,
        seed: c.seed,
        noise: c.noise.clone(),
        geometries,
        inflow,
        settings: c.simulation,
    };
    let mut table = generate_dataset(&spec)?;
    // a single healthy geometry carries no latent information
    if c.geometries.is_empty() {
        table.z = None;
    }
    table.meta.config_hash = run.hash.clone();
    table.write(&run.out, "dataset")?;
    run.record("dataset.csv");
    run.record("dataset.json");
    if table.z.is_some() {
        run.record("dataset_latents.csv");
    }
    let mut cols = table.b_names.clone();
    cols.extend(OBS_NAMES.iter().map(|s| s.to_string()));
    run.histograms("dataset.csv", &cols, "hist_")?;
    Ok(())
}

fn tune_nominal(c: &TuneConfig, run: &mut Run) -> Result<()> {
    let problem = TuningProblem {
        topology: desk::topology(c.lesion.map(|l| (l.location, l.severity))),
        inflow: desk::nominal_inflow(),
        targets: c.targets.clone(),
        settings: c.simulation,
    };
    let start = c.start.clone().unwrap_or_else(|| desk::NOMINAL_RCR6.to_vec());
    let res = match c.method {
        TuneMethod::NelderMead => nelder_mead(|x| problem.objective(x), &start, &c.nelder_mead)?,
        TuneMethod::De => {
            let bounds: Vec<(f64, f64)> = start.iter().map(|v| (v * c.bound_scale.0, v * c.bound_scale.1)).collect();
            let opts = DeOptions { seed: c.seed, ..c.de };
            diff_evolution(|x| problem.objective(x), &bounds, Some(&start), &opts)?
        }
    };
    let traces = problem.simulate(&res.x)?;
    let s = summarize(&traces)?;
    let names = BcParam::Rcr6.names();
    run.json(
        "tune.json",
        json!({
            "method": c.method,
            "names": names,
            "x": res.x,
            "objective": res.f,
            "converged": res.converged,
            "iterations": res.iterations,
            "evaluations": res.evaluations,
            "p_sys": s.p_sys,
            "p_dia": s.p_dia,
            "flow_split_left": s.flow_split_left,
            "feasible": hard_constraints_ok(&res.x),
            "targets": c.targets,
        }),
    )?;
    let mut header = vec!["iteration".to_string(), "objective".to_string()];
    header.extend(names.iter().cloned());
    run.csv(
        "history.csv",
        &header,
        res.history.iter().map(|(i, f, x)| {
            let mut r = vec![*i as f64, *f];
            r.extend(x);
            r
        }),
    )?;
    let (hn, hc) = plot::read_columns(&run.path("history.csv"))?;
    let svg = plot::lines_svg(
        "tuning objective",
        plot::column(&hn, &hc, "iteration")?,
        &[("objective".into(), plot::column(&hn, &hc, "objective")?.to_vec())],
        "iteration",
        "objective",
        true,
        &run.stamp(),
    )?;
    run.svg("history.svg", svg)?;
    write_traces(run, "traces.csv", &traces)?;
    let (tn, tc) = plot::read_columns(&run.path("traces.csv"))?;
    let p = plot::column(&tn, &tc, "p_in_mmHg")?;
    let svg = plot::band_svg("inlet pressure", plot::column(&tn, &tc, "t")?, p, &vec![0.0; p.len()], "t [s]", "mmHg", &run.stamp())?;
    run.svg("pressure.svg", svg)?;
    Ok(())
}

fn write_traces(run: &mut Run, name: &str, tr: &TimeTraces) -> Result<()> {
    let mut header = vec!["t".to_string(), "p_in_mmHg".to_string()];
    header.extend(tr.outlet_names.iter().map(|n| format!("q_{n}")));
    let rows = (0..tr.t.len()).map(|i| {
        let mut r = vec![tr.t[i], tr.p_in[i] / MMHG];
        r.extend(tr.q_out.iter().map(|q| q[i]));
        r
    });
    run.csv(name, &header, rows)
}

fn train_cfm(c: &TrainConfig, base: &Path, run: &mut Run) -> Result<()> {
    let mut table = DatasetTable::read(&resolve(base, &c.dataset))?;
    table.meta.config_hash = run.hash.clone();
    let parts = split_fractions(table.n_rows(), &c.split, c.seed)?;
    let (train, val) = (&parts[0], &parts[1]);
    let mut split = json!({ "train": train, "val": val });
    if let Some(test) = parts.get(2) {
        split["test"] = json!(test);
    }
    run.json("split.json", split)?;
    let mut hyper = CfmHyper {
        seed: c.seed,
        ..c.hyper.clone()
    };
    if let Some(search) = &c.search {
        let space = search.space.clone().unwrap_or_else(|| SearchSpace::for_rows(table.n_rows()));
        let base_hyper = CfmHyper {
            epochs: search.epochs.unwrap_or(hyper.epochs),
            ..hyper.clone()
        };
        let res = random_search(
            &space,
            search.trials,
            |p| {
                let spec = TrainSpec {
                    x_columns: c.x_columns.clone(),
                    y_columns: c.y_columns.clone(),
                    hyper: p.apply(&base_hyper),
                };
                cfm_train(&table, train, val, &spec).map_or(f64::INFINITY, |(_, log)| log.best_val)
            },
            c.seed,
        )?;
        run.csv(
            "search.csv",
            &["trial", "layers", "width", "lr", "batch", "weight_decay", "best_val"].map(String::from),
            res.trials.iter().enumerate().map(|(i, (p, l))| {
                vec![
                    i as f64,
                    p.hidden.len() as f64,
                    p.hidden.first().copied().unwrap_or(0) as f64,
                    p.lr,
                    p.batch as f64,
                    p.weight_decay,
                    *l,
                ]
            }),
        )?;
        if !res.best_loss.is_finite() {
            return Err(CliError::Numerical("every search trial failed".into()));
        }
        hyper = res.best.apply(&hyper);
    }
    let spec = TrainSpec {
        x_columns: c.x_columns.clone(),
        y_columns: c.y_columns.clone(),
        hyper: hyper.clone(),
    };
    let (mut model, log) = cfm_train(&table, train, val, &spec)?;
    model.config_hash = run.hash.clone();
    model.seed = c.seed;
    model.save(&run.path("model.json"))?;
    run.record("model.json");
    run.csv(
        "train_log.csv",
        &["epoch", "train_loss", "val_loss"].map(String::from),
        log.train_loss.iter().zip(&log.val_loss).enumerate().map(|(e, (a, b))| vec![e as f64, *a, *b]),
    )?;
    run.json(
        "train.json",
        json!({
            "hyper": hyper,
            "best_epoch": log.best_epoch,
            "best_val": log.best_val,
            "stopped_early": log.stopped_early,
            "n_train": train.len(),
            "n_val": val.len(),
        }),
    )?;
    let (n, cols) = plot::read_columns(&run.path("train_log.csv"))?;
    let svg = plot::lines_svg(
        "flow matching loss",
        plot::column(&n, &cols, "epoch")?,
        &[
            ("train".into(), plot::column(&n, &cols, "train_loss")?.to_vec()),
            ("val".into(), plot::column(&n, &cols, "val_loss")?.to_vec()),
        ],
        "epoch",
        "loss",
        true,
        &run.stamp(),
    )?;
    run.svg("loss.svg", svg)?;
    Ok(())
}

fn observations_from(c: &SampleConfig, base: &Path, model: &CfmModel) -> Result<Vec<Vec<f64>>> {
    if let Some(p) = &c.observations_csv {
        let (names, cols) = plot::read_columns(&resolve(base, p))?;
        let picked: Vec<&[f64]> = model
            .y_names
            .iter()
            .map(|n| plot::column(&names, &cols, n))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        let n = picked.first().map_or(0, |c| c.len());
        return Ok((0..n).map(|i| picked.iter().map(|c| c[i]).collect()).collect());
    }
    for (i, o) in c.observations.iter().enumerate() {
        if o.len() != model.m() {
            return Err(schema(&format!("observations[{i}]"), format!("model expects {} values", model.m())));
        }
    }
    Ok(c.observations.clone())
}

fn sample(c: &SampleConfig, base: &Path, run: &mut Run) -> Result<()> {
    let model = CfmModel::load(&resolve(base, &c.model))?;
    let obs = observations_from(c, base, &model)?;
    let bounds = c.bounds.clone().unwrap_or_else(|| model.bounds.clone());
    let mut summary = Vec::new();
    for (k, y) in obs.iter().enumerate() {
        let opts = SampleOptions {
            seed: c.seed.wrapping_add(k as u64),
            max_tries: c.max_tries,
            integrator: c.integrator,
        };
        let post = sample_posterior(&model, y, c.n, &bounds, &opts)?;
        let name = format!("samples_{k}.csv");
        run.csv(&name, &model.x_names, post.samples.iter().cloned())?;
        run.histograms(&name, &model.x_names, &format!("hist_{k}_"))?;
        let cols: Vec<Vec<f64>> = (0..model.d()).map(|j| post.samples.iter().map(|s| s[j]).collect()).collect();
        let stats: Vec<(f64, f64)> = cols.iter().map(|v| mean_std(v)).collect();
        summary.push(json!({
            "row": k,
            "observation": y,
            "accepted": post.samples.len(),
            "tries": post.tries,
            "acceptance_rate": post.acceptance_rate,
            "fallbacks": post.fallbacks,
            "mean": stats.iter().map(|s| s.0).collect::<Vec<_>>(),
            "std": stats.iter().map(|s| s.1).collect::<Vec<_>>(),
        }));
    }
    run.json("sample.json", json!({ "x_names": model.x_names, "y_names": model.y_names, "rows": summary }))
}

fn eval_rows(c: &EvaluateConfig, base: &Path, n: usize) -> Result<Vec<usize>> {
    if let Some(r) = &c.rows {
        if let Some(bad) = r.iter().find(|&&i| i >= n) {
            return Err(schema("rows", format!("row {bad} out of range ({n} rows)")));
        }
        return Ok(r.clone());
    }
    if let Some(p) = &c.split {
        let v: Value = serde_json::from_slice(&std::fs::read(resolve(base, p))?)?;
        let part = v.get("test").or_else(|| v.get("val")).ok_or_else(|| schema("split", "file has no test or val part"))?;
        return Ok(serde_json::from_value(part.clone())?);
    }
    Ok((0..n).collect())
}

fn evaluate(c: &EvaluateConfig, base: &Path, run: &mut Run) -> Result<()> {
    let model = CfmModel::load(&resolve(base, &c.model))?;
    let table = DatasetTable::read(&resolve(base, &c.dataset))?;
    let rows = eval_rows(c, base, table.n_rows())?;
    if rows.is_empty() {
        return Err(schema("rows", "no test rows"));
    }
    let opts = SampleOptions {
        seed: c.seed,
        max_tries: c.max_tries,
        integrator: c.integrator,
    };
    let pred = posterior_predictive(&model, &table, &rows, c.n_s, &opts, c.truth, &c.simulation)?;
    let mut report = reconstruction_metrics(&pred.predicted, &pred.truth, &pred.names)?;
    report.config_hash = run.hash.clone();
    report.seed = run.seed;
    run.json("metrics.json", serde_json::to_value(&report)?)?;
    let mut header = vec!["row".to_string(), "draw".to_string()];
    header.extend(pred.names.iter().cloned());
    header.extend(model.x_names.iter().cloned());
    let mut flat = Vec::new();
    for (k, &r) in rows.iter().enumerate() {
        for (d, (p, x)) in pred.predicted[k].iter().zip(&pred.posterior[k]).enumerate() {
            let mut v = vec![r as f64, d as f64];
            v.extend(p);
            v.extend(x);
            flat.push(v);
        }
    }
    run.csv("predictive.csv", &header, flat)?;
    let mut th = vec!["row".to_string(), "acceptance_rate".to_string()];
    th.extend(pred.names.iter().cloned());
    run.csv(
        "truth.csv",
        &th,
        rows.iter().enumerate().map(|(k, &r)| {
            let mut v = vec![r as f64, pred.acceptance[k]];
            v.extend(&pred.truth[k]);
            v
        }),
    )?;
    let param = table.meta.param.ok_or_else(|| CliError::Invalid("dataset has no parameterization".into()))?;
    for (k, &r) in rows.iter().enumerate().take(c.trace_rows) {
        let base_vals = table.row_values(r);
        let traces: Vec<TimeTraces> = pred.posterior[k]
            .par_iter()
            .map(|x| {
                let mut v: HashMap<String, f64> = base_vals.clone();
                for (n, val) in model.x_names.iter().zip(x) {
                    v.insert(n.clone(), *val);
                }
                traces_for_values(param, &v, &c.simulation)
            })
            .collect::<std::result::Result<_, _>>()?;
        let len = traces.iter().map(|t| t.t.len()).min().unwrap_or(0);
        let n_out = traces[0].q_out.len();
        let stat = |f: &dyn Fn(&TimeTraces, usize) -> f64, i: usize| mean_std(&traces.iter().map(|t| f(t, i)).collect::<Vec<_>>());
        let mut header = vec!["t".to_string(), "p_mean".to_string(), "p_std".to_string()];
        for name in &traces[0].outlet_names {
            header.push(format!("q_{name}_mean"));
            header.push(format!("q_{name}_std"));
        }
        let rows_out = (0..len).map(|i| {
            let (pm, ps) = stat(&|t, i| t.p_in[i] / MMHG, i);
            let mut v = vec![traces[0].t[i], pm, ps];
            for o in 0..n_out {
                let (m, s) = stat(&|t, i| t.q_out[o][i], i);
                v.push(m);
                v.push(s);
            }
            v
        });
        let name = format!("trace_row{r}.csv");
        run.csv(&name, &header, rows_out.collect::<Vec<_>>())?;
        let (hn, hc) = plot::read_columns(&run.path(&name))?;
        let t = plot::column(&hn, &hc, "t")?;
        let svg = plot::band_svg(
            &format!("row {r}: inlet pressure, mean ± 1 std"),
            t,
            plot::column(&hn, &hc, "p_mean")?,
            plot::column(&hn, &hc, "p_std")?,
            "t [s]",
            "mmHg",
            &run.stamp(),
        )?;
        run.svg(&format!("trace_row{r}_pressure.svg"), svg)?;
        for name in &traces[0].outlet_names {
            let svg = plot::band_svg(
                &format!("row {r}: {name} flow, mean ± 1 std"),
                t,
                plot::column(&hn, &hc, &format!("q_{name}_mean"))?,
                plot::column(&hn, &hc, &format!("q_{name}_std"))?,
                "t [s]",
                "cm^3/s",
                &run.stamp(),
            )?;
            run.svg(&format!("trace_row{r}_q_{}.svg", sanitize(name)), svg)?;
        }
    }
    Ok(())
}

fn waveform_rows(run: &mut Run, name: &str, inflows: &[FourierInflow], points: usize) -> Result<()> {
    // each waveform on its own period, sampled at the same phases
    let mut header = vec!["phase".to_string()];
    header.extend((0..inflows.len()).map(|k| format!("q{k}")));
    let rows = (0..points).map(|i| {
        let ph = i as f64 / points as f64;
        let mut r = vec![ph];
        r.extend(inflows.iter().map(|f| f.eval(ph * f.period)));
        r
    });
    run.csv(name, &header, rows.collect::<Vec<_>>())?;
    let (n, cols) = plot::read_columns(&run.path(name))?;
    let x = plot::column(&n, &cols, "phase")?;
    let wf: Vec<&[f64]> = (0..inflows.len()).map(|k| plot::column(&n, &cols, &format!("q{k}"))).collect::<std::result::Result<_, _>>()?;
    let (mean, std): (Vec<f64>, Vec<f64>) = (0..x.len()).map(|i| mean_std(&wf.iter().map(|w| w[i]).collect::<Vec<_>>())).unzip();
    let svg = plot::band_svg("inflow waveforms, mean ± 1 std", x, &mean, &std, "phase", "cm^3/s", &run.stamp())?;
    run.svg(&name.replace(".csv", ".svg"), svg)
}

fn write_features(run: &mut Run, inflows: &[FourierInflow]) -> Result<()> {
    run.csv("features.csv", &FourierInflow::feature_names(), inflows.iter().map(|f| f.pack_features().to_vec()))
}

fn gen_inflow(c: &InflowConfig, base: &Path, run: &mut Run) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let inflows = match &c.task {
        InflowTask::Fit { waveform, period } => {
            let samples = read_waveform_csv(&resolve(base, waveform))?;
            let period = match period {
                Some(p) => *p,
                None => {
                    let n = samples.len();
                    if n < 2 {
                        return Err(CliError::Invalid("waveform needs at least two samples".into()));
                    }
                    samples[n - 1].0 + (samples[n - 1].0 - samples[0].0) / (n - 1) as f64
                }
            };
            let fit = fit_fourier(&samples, period, N_HARMONICS)?;
            let rms = (samples.iter().map(|(t, q)| (fit.eval(*t) - q).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
            run.json("fit.json", json!({ "period": period, "rms_residual": rms, "features": fit.pack_features().to_vec() }))?;
            vec![fit]
        }
        InflowTask::Cohort { count } => reference_cohort(&mut rng, *count),
        InflowTask::Generate { count, cohort, hyper } => {
            let refs = reference_cohort(&mut rng, *cohort);
            let x: Vec<Vec<f64>> = refs.iter().map(|f| f.pack_features().to_vec()).collect();
            let names = FourierInflow::feature_names();
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..names.len())
                .map(|j| {
                    let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                    let a = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let b = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w = (b - a).max(1e-6 * (1.0 + a.abs()));
                    (a - 0.5 * w, b + 0.5 * w)
                })
                .unzip();
            let bounds = PriorBox::new(lo, hi)?;
            let y: Vec<Vec<f64>> = vec![vec![]; x.len()];
            let h = CfmHyper {
                seed: c.seed,
                ..hyper.clone()
            };
            let (model, _) = CfmModel::fit(&x, &y, &x, &y, bounds.clone(), names, vec![], &h)?;
            let post = sample_posterior(
                &model,
                &[],
                *count,
                &bounds,
                &SampleOptions {
                    seed: c.seed,
                    ..Default::default()
                },
            )?;
            write_features_named(run, "cohort_features.csv", &refs)?;
            post.samples
                .iter()
                .map(|f| FourierInflow::unpack_features(f))
                .collect::<std::result::Result<Vec<_>, _>>()?
        }
    };
    write_features(run, &inflows)?;
    waveform_rows(run, "waveforms.csv", &inflows, c.points)
}

fn write_features_named(run: &mut Run, name: &str, inflows: &[FourierInflow]) -> Result<()> {
    run.csv(name, &FourierInflow::feature_names(), inflows.iter().map(|f| f.pack_features().to_vec()))
}

fn write_cloud(run: &mut Run, name: &str, cloud: &PointCloud) -> Result<()> {
    let header = ["x", "y", "z", "branch"].map(String::from);
    let rows = cloud.points.iter().enumerate().map(|(i, p)| {
        let b = cloud.labels.as_ref().map_or(f64::NAN, |l| l[i].index() as f64);
        vec![p[0], p[1], p[2], b]
    });
    run.csv(name, &header, rows.collect::<Vec<_>>())
}

fn embed_anatomy(c: &EmbedConfig, base: &Path, run: &mut Run) -> Result<()> {
    let hyper = EmbedHyper {
        seed: c.seed,
        ..c.hyper.clone()
    };
    match &c.task {
        EmbedTask::Train {
            severities,
            folds,
            final_model,
            repeats,
        } => {
            let (template, geoms) = procedural_corpus(&c.shape, severities)?;
            template.write_csv(&run.path("template.csv"))?;
            run.stamp_csv("template.csv")?;
            if *folds >= 2 {
                let groups: Vec<usize> = (0..geoms.len()).collect();
                let splits = group_kfold(&groups, *folds, c.seed)?;
                let mut all: Option<EmbedEval> = None;
                let mut fold_rows = Vec::new();
                let mut best_vals = Vec::new();
                for (k, (tr, va)) in splits.iter().enumerate() {
                    let pick = |idx: &[usize]| idx.iter().map(|&i| geoms[i].clone()).collect::<Vec<LabeledGeometry>>();
                    let (model, log) = train_embedding(&pick(tr), &pick(va), &template, &EmbedHyper { seed: c.seed + k as u64, ..hyper.clone() })?;
                    let e = evaluate_embedding(&model, &template, &pick(va), *repeats, c.seed + 1000 + k as u64)?;
                    best_vals.push(log.best_val);
                    fold_rows.push(json!({
                        "fold": k,
                        "val_geometries": va,
                        "best_step": log.best_step,
                        "best_val": log.best_val,
                        "mode_accuracy": e.mode_accuracy(),
                        "severity_mae": e.severity_mae(),
                        "chamfer": e.mean_chamfer(),
                        "noise_floor": e.mean_noise_floor(),
                    }));
                    match &mut all {
                        Some(a) => a.extend(e),
                        None => all = Some(e),
                    }
                }
                let all = all.expect("at least two folds");
                let (m, s) = mean_std(&best_vals);
                run.csv(
                    "cv_predictions.csv",
                    &["mode_true", "mode_pred", "severity_true", "severity_pred", "chamfer", "noise_floor"].map(String::from),
                    (0..all.mode_true.len()).map(|i| {
                        vec![
                            all.mode_true[i] as f64,
                            all.mode_pred[i] as f64,
                            all.severity_true[i],
                            all.severity_pred[i],
                            all.chamfer[i],
                            all.noise_floor[i],
                        ]
                    }),
                )?;
                run.json(
                    "cv.json",
                    json!({
                        "folds": fold_rows,
                        "best_val_mean": m,
                        "best_val_std": s,
                        "mode_accuracy": all.mode_accuracy(),
                        "severity_mae": all.severity_mae(),
                        "chamfer": all.mean_chamfer(),
                        "noise_floor": all.mean_noise_floor(),
                    }),
                )?;
            }
            if *final_model {
                let (mut model, log) = train_embedding(&geoms, &[], &template, &hyper)?;
                model.template_ref = format!("procedural:{}", serde_json::to_string(&c.shape)?);
                model.normalization = Some(Normalization::fit(&c.shape.generate(None)?)?);
                model.save(&run.path("model.json"))?;
                run.record("model.json");
                run.csv(
                    "embed_log.csv",
                    &["step", "train_loss", "val_loss"].map(String::from),
                    log.steps.iter().zip(log.train_loss.iter().zip(&log.val_loss)).map(|(s, (a, b))| vec![*s as f64, *a, *b]),
                )?;
            }
        }
        EmbedTask::Apply { model, clouds, raw } => {
            let model = EmbeddingModel::load(&resolve(base, model))?;
            let (template, _) = procedural_corpus(&c.shape, &[])?;
            let mut rows = Vec::new();
            for (k, p) in clouds.iter().enumerate() {
                let mut cloud = PointCloud::read_csv(&resolve(base, p))?;
                if *raw {
                    let norm = model
                        .normalization
                        .ok_or_else(|| CliError::Invalid("model carries no normalization".into()))?;
                    let labels = cloud.labels.clone().unwrap_or_else(|| c.shape.label(&cloud.points));
                    cloud = norm.apply(&cloud).with_labels(labels)?;
                }
                let enc = model.encode(&cloud)?;
                let z = anatomy::latent_from_encoder(&enc.logits, enc.severity, Phase::Evaluation);
                let decoded = model.decode_deform(&template, &z)?;
                write_cloud(run, &format!("decoded_{k}.csv"), &decoded)?;
                let mut r = z.to_vec();
                r.push(anatomy::argmax(&enc.logits) as f64);
                r.push(enc.severity);
                rows.push(r);
            }
            let mut header = pipeline::latent_names();
            header.push("mode".into());
            header.push("severity".into());
            run.csv("latents.csv", &header, rows)?;
        }
    }
    Ok(())
}

fn oracle_mcmc(c: &OracleConfig, run: &mut Run) -> Result<()> {
    let param = c.nominal.param;
    let nominal = c.nominal.values.clone().unwrap_or_else(|| param.nominal());
    let r = c.nominal.rel_range;
    let bounds: Vec<(f64, f64)> = nominal.iter().map(|v| (v * (1.0 - r), v * (1.0 + r))).collect();
    let names = param.names();
    let noise = c.noise.clone().unwrap_or_else(|| {
        c.y_columns
            .iter()
            .map(|y| DEFAULT_NOISE[OBS_NAMES.iter().position(|o| o == y).expect("validated")])
            .collect()
    });
    let cols: Vec<usize> = c.y_columns.iter().map(|y| OBS_NAMES.iter().position(|o| o == y).expect("validated")).collect();
    let lesion = c.lesion;
    let settings = c.simulation;
    let log_post = |x: &[f64]| {
        let mut v: HashMap<String, f64> = names.iter().cloned().zip(x.iter().copied()).collect();
        if let Some(l) = lesion {
            for (k, n) in pipeline::latent_names().into_iter().enumerate() {
                v.insert(n, if k == l.location.index() { l.severity } else { 0.0 });
            }
        }
        match pipeline::simulate_values(param, &v, &settings) {
            Ok(s) => {
                let total: f64 = s.q_mean.iter().sum();
                let left = s.flow_split_left / 100.0 * total;
                let m = [s.p_dia, s.p_sys, left, total - left];
                cols.iter()
                    .zip(&c.observation)
                    .zip(&noise)
                    .map(|((&j, y), rel)| {
                        let sd = rel * m[j].abs();
                        -0.5 * ((y - m[j]) / sd).powi(2) - sd.ln()
                    })
                    .sum()
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let opts = DemcOptions { seed: c.seed, ..c.demc };
    let res = demc_oracle(log_post, &bounds, &opts)?;
    crate::tuning::write_chains_csv(&run.path("chains.csv"), &res)?;
    run.stamp_csv("chains.csv")?;
    let samples = res.samples();
    run.csv("samples.csv", &names, samples.iter().cloned())?;
    run.histograms("samples.csv", &names, "hist_")?;
    let stats: Vec<(f64, f64)> = (0..names.len())
        .map(|j| mean_std(&samples.iter().map(|s| s[j]).collect::<Vec<_>>()))
        .collect();
    run.json(
        "oracle.json",
        json!({
            "names": names,
            "bounds": bounds,
            "acceptance_rate": res.acceptance_rate,
            "samples": samples.len(),
            "mean": stats.iter().map(|s| s.0).collect::<Vec<_>>(),
            "std": stats.iter().map(|s| s.1).collect::<Vec<_>>(),
        }),
    )
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with(args: Args) -> i32 {
    if let Some(n) = args.threads {
        // a second global pool in the same process is not an error worth failing on
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = parse_config(&args.config, args.command).and_then(|mut parsed| {
        if let Some(s) = args.seed {
            parsed.config.set_seed(s);
        }
        run(args.command, &parsed, &args.out).map(|a| (parsed, a))
    });
    match result {
        Ok((parsed, artifacts)) => {
            let line = json!({
                "status": "ok",
                "command": args.command,
                "out": args.out,
                "config_hash": parsed.hash,
                "seed": parsed.config.seed(),
                "artifacts": artifacts,
            });
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_gen_data_fills_defaults() {
        let (cfg, h1) = parse_config_str(r#"{"n": 10, "nominal": {"param": "rc2"}}"#, Command::GenData, "t").unwrap();
        let RunConfig::GenData(c) = cfg else { panic!() };
        assert_eq!(c.seed, 0);
        assert_eq!(c.simulation, SimSettings::default());
        assert_eq!(c.noise, DEFAULT_NOISE.to_vec());
        let (_, h2) = parse_config_str("{ \"nominal\": {\"param\": \"rc2\"},\n \"n\": 10 }", Command::GenData, "t").unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn missing_nominal_names_the_field() {
        let e = parse_config_str(r#"{"n": 10}"#, Command::GenData, "t").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(matches!(&e, CliError::Schema { field, .. } if field == "nominal"), "{e:?}");
        let e = parse_config_str(r#"{"n": 10, "nominal": {"param": "rc9"}}"#, Command::GenData, "t").unwrap_err();
        assert!(matches!(&e, CliError::Schema { field, .. } if field == "nominal.param"), "{e:?}");
        assert_eq!(parse_config_str("{", Command::GenData, "t").unwrap_err().kind(), "parse_error");
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let e: CliError = CfmError::Exhausted {
            accepted: 1,
            wanted: 5,
            tries: 10,
        }
        .into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = CfmError::DivergedLoss(3).into();
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.to_json()["error"], "numerical_failure");
    }
}
