//! Stage orchestration over a workspace directory: a linear stage DAG with
//! content-hash provenance sidecars (re-running a completed stage is a no-op),
//! a workspace lock, and JSON-lines stage logging.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{select_medoid_cohort, Cohort, CohortError};
use crate::datamodel::{
    load_dataset, save_dataset, subsample_split, DataError, Record, RecordKey,
    RepresentationKind, Split, TaskSpec,
};
use crate::embeddings::{embed_split, EmbedError, EmbeddingStore, EmbeddingVector};
use crate::evaluation::{bootstrap_ci, render_report, EvalError, Metric, RenderedReport, ReportEntry, ScoredSplit};
use crate::gateway::{Gateway, GatewayError, ProviderConfig, ProviderKind};
use crate::learners::{
    default_gbm_grid, default_lambda_grid, predict_gbm, predict_logreg, sweep_gbm, sweep_logreg,
    GbmHyperparams, LearnError,
};
use crate::rubric::{
    apply_rubric_split, generate_local_split, synthesize_blind_rubric, synthesize_global_rubric,
    LocalRubricMode, Rubric, RubricError, RubricifiedRecord,
};
use crate::synthbench::{generate_task, mock_rulebook, SynthConfig, SynthError};
use crate::transform::{
    generate_parser_program, generate_tabularizer_program, load_feature_matrix, load_rubricified,
    run_transform, save_feature_matrix, save_rubricified, validate_transform_output,
    FeatureMatrix, TransformError, TransformKind, TransformProgram, DEFAULT_TRANSFORM_TIMEOUT,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing upstream artifacts; run stage \"{0}\" first")]
    MissingUpstream(Stage),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("workspace is locked by another pipeline: {0}")]
    WorkspaceLocked(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Rubric(#[from] RubricError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// True when the failure originated at an external provider (maps to
    /// exit code 2 in the CLI).
    pub fn is_provider_failure(&self) -> bool {
        match self {
            PipelineError::Gateway(_) => true,
            PipelineError::Embed(EmbedError::Gateway(_))
            | PipelineError::Embed(EmbedError::Transport(_)) => true,
            PipelineError::Rubric(RubricError::Gateway(_)) => true,
            PipelineError::Transform(TransformError::Gateway(_)) => true,
            _ => false,
        }
    }
}

fn io_err<P: AsRef<Path>>(path: P) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.as_ref().display().to_string();
    move |source| PipelineError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Subsample,
    Embed,
    Cohort,
    Rubric,
    Apply,
    Parsegen,
    Tabularize,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 11] = [
        Stage::Ingest,
        Stage::Subsample,
        Stage::Embed,
        Stage::Cohort,
        Stage::Rubric,
        Stage::Apply,
        Stage::Parsegen,
        Stage::Tabularize,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Subsample => "subsample",
            Stage::Embed => "embed",
            Stage::Cohort => "cohort",
            Stage::Rubric => "rubric",
            Stage::Apply => "apply",
            Stage::Parsegen => "parsegen",
            Stage::Tabularize => "tabularize",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ORDER.iter().copied().find(|st| st.as_str() == s)
    }

    fn upstream(&self) -> Option<Stage> {
        let i = Stage::ORDER.iter().position(|s| s == self).unwrap();
        (i > 0).then(|| Stage::ORDER[i - 1])
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    N40,
    #[default]
    All,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::N40 => "n40",
            Regime::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "n40" => Some(Regime::N40),
            "all" => Some(Regime::All),
            _ => None,
        }
    }
}

fn default_methods() -> Vec<RepresentationKind> {
    RepresentationKind::ALL.to_vec()
}

fn default_embed_dim() -> usize {
    256
}

fn default_resamples() -> usize {
    1000
}

fn default_runtime() -> Vec<String> {
    vec!["python3".to_string()]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub workspace: PathBuf,
    /// Root of pre-existing datasets in the canonical layout; required when
    /// `tasks` is non-empty.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    /// Pre-existing tasks to ingest from `data_root`.
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    /// Synthetic tasks to generate at ingest time.
    #[serde(default)]
    pub synth: Vec<SynthConfig>,
    pub llm: ProviderConfig,
    pub embedding: ProviderConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<RepresentationKind>,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub gbm_grid: Option<Vec<GbmHyperparams>>,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Per-label cap applied to every split at the subsample stage; None
    /// keeps splits whole.
    #[serde(default)]
    pub subsample_cap: Option<usize>,
    #[serde(default = "default_runtime")]
    pub runtime_cmd: Vec<String>,
    /// Install the synthetic-benchmark rulebook on a mock LLM provider.
    #[serde(default = "default_true")]
    pub use_mock_rulebook: bool,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.workspace.as_os_str().is_empty() {
            return Err(PipelineError::ConfigError("workspace must be set".into()));
        }
        if self.tasks.is_empty() && self.synth.is_empty() {
            return Err(PipelineError::ConfigError("at least one task required".into()));
        }
        if !self.tasks.is_empty() && self.data_root.is_none() {
            return Err(PipelineError::ConfigError(
                "tasks listed but data_root missing".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(PipelineError::ConfigError(
                "at least one representation kind required".into(),
            ));
        }
        if self.embed_dim < 8 {
            return Err(PipelineError::ConfigError("embed_dim must be >= 8".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(PipelineError::ConfigError(
                "bootstrap_resamples must be positive".into(),
            ));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        for s in &self.synth {
            s.validate()?;
        }
        self.llm.validate()?;
        self.embedding.validate()?;
        Ok(())
    }

    /// Every task the pipeline runs, data-backed and synthetic.
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        let mut specs = self.tasks.clone();
        for s in &self.synth {
            specs.push(TaskSpec::new(
                &s.task_name,
                &s.task_query,
                crate::datamodel::TaskCategory::OperationalOutcome,
            ));
        }
        specs
    }

    fn needs_rubric(&self) -> bool {
        self.methods.iter().any(|m| {
            matches!(
                m,
                RepresentationKind::GlobalRubric
                    | RepresentationKind::GlobalRubricAuto
                    | RepresentationKind::GlobalRubricTabular
            )
        })
    }

    fn needs_parser(&self) -> bool {
        self.methods.iter().any(|m| {
            matches!(
                m,
                RepresentationKind::GlobalRubricAuto | RepresentationKind::GlobalRubricTabular
            )
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub executed: bool,
    pub provider_calls: usize,
    pub wall_ms: u128,
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn stage_seed(global: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    for p in parts {
        h.update([0x1f]);
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Workspace layout and provenance
// ---------------------------------------------------------------------------

struct Layout {
    ws: PathBuf,
}

impl Layout {
    fn data(&self, task: &str, split: Split) -> PathBuf {
        self.ws.join("data").join(task).join(format!("{split}.json"))
    }
    fn subsampled(&self, task: &str, split: Split) -> PathBuf {
        self.ws.join("subsampled").join(task).join(format!("{split}.json"))
    }
    fn features(&self, task: &str, method: RepresentationKind, split: Split) -> PathBuf {
        self.ws
            .join("features")
            .join(task)
            .join(method.as_str())
            .join(format!("{split}.features.json"))
    }
    fn cohort(&self, task: &str) -> PathBuf {
        self.ws.join("cohort").join(task).join("cohort.json")
    }
    fn rubric(&self, task: &str, blind: bool) -> PathBuf {
        let name = if blind { "global_rubric_blind.json" } else { "global_rubric.json" };
        self.ws.join("rubrics").join(task).join(name)
    }
    fn rubricified(&self, task: &str, method: RepresentationKind, split: Split) -> PathBuf {
        self.ws
            .join("rubricified")
            .join(task)
            .join(method.as_str())
            .join(format!("{split}.json"))
    }
    fn parser_output_root(&self) -> PathBuf {
        self.ws.join("rubricified_auto")
    }
    fn parser_output(&self, task: &str, split: Split) -> PathBuf {
        self.parser_output_root().join(task).join(format!("{split}.json"))
    }
    fn program(&self, task: &str, kind: TransformKind) -> PathBuf {
        let name = match kind {
            TransformKind::Parser => "parser_program.json",
            TransformKind::Tabularizer => "tabularizer_program.json",
        };
        self.ws.join("programs").join(task).join(name)
    }
    fn tabular_root(&self) -> PathBuf {
        self.ws.join("features_tabular")
    }
    fn tabular_features(&self, task: &str, split: Split) -> PathBuf {
        self.tabular_root().join(task).join(format!("{split}.features.json"))
    }
    fn scores(&self, task: &str, method: RepresentationKind) -> PathBuf {
        self.ws
            .join("scores")
            .join(task)
            .join(format!("{}.json", method.as_str()))
    }
    fn eval_entries(&self) -> PathBuf {
        self.ws.join("eval").join("entries.json")
    }
    fn report_table(&self) -> PathBuf {
        self.ws.join("report").join("report.txt")
    }
    fn report_json(&self) -> PathBuf {
        self.ws.join("report").join("report.json")
    }
    fn sidecar(&self, stage: Stage) -> PathBuf {
        self.ws.join(".provenance").join(format!("{stage}.json"))
    }
    fn lock(&self) -> PathBuf {
        self.ws.join(".lock")
    }
    fn cache(&self) -> PathBuf {
        self.ws.join("cache").join("llm")
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Sidecar {
    inputs_hash: String,
    config_hash: String,
    code_version: String,
}

fn hash_files(paths: &[PathBuf]) -> Result<String, PipelineError> {
    let mut sorted: Vec<&PathBuf> = paths.iter().collect();
    sorted.sort();
    let mut h = Sha256::new();
    for p in sorted {
        h.update(p.display().to_string().as_bytes());
        h.update([0x1f]);
        let bytes = std::fs::read(p).map_err(io_err(p))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        h.update([0x1e]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Guard held for the duration of a pipeline invocation; the lock file is
/// removed on drop.
struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    fn acquire(path: PathBuf) -> Result<Self, PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::WorkspaceLocked(path))
            }
            Err(e) => Err(PipelineError::Io {
                path: path.display().to_string(),
                source: e,
            }),
        }
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct Runner {
    cfg: PipelineConfig,
    layout: Layout,
    gateway: Gateway,
    specs: Vec<TaskSpec>,
}

impl Runner {
    fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let layout = Layout {
            ws: cfg.workspace.clone(),
        };
        std::fs::create_dir_all(&layout.ws).map_err(io_err(&layout.ws))?;
        let cache = layout.cache();
        let gateway = if cfg.llm.provider == ProviderKind::Mock && cfg.use_mock_rulebook {
            Gateway::with_rulebook(cfg.llm.clone(), Some(&cache), mock_rulebook())?
        } else {
            Gateway::new(cfg.llm.clone(), Some(&cache))?
        };
        let specs = cfg.task_specs();
        Ok(Self {
            cfg,
            layout,
            gateway,
            specs,
        })
    }

    fn config_hash(&self) -> String {
        let json = serde_json::to_string(&self.cfg).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    /// Returns true when the stage can be skipped: sidecar matches the
    /// current inputs+config and every expected output already exists.
    fn can_skip(
        &self,
        stage: Stage,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<bool, PipelineError> {
        if outputs.is_empty() || !outputs.iter().all(|p| p.exists()) {
            return Ok(false);
        }
        let sidecar_path = self.layout.sidecar(stage);
        if !sidecar_path.exists() {
            return Ok(false);
        }
        let text = std::fs::read_to_string(&sidecar_path).map_err(io_err(&sidecar_path))?;
        let stored: Sidecar = match serde_json::from_str(&text) {
            Ok(s) => s,
            Err(_) => return Ok(false),
        };
        let current = Sidecar {
            inputs_hash: hash_files(inputs)?,
            config_hash: self.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        Ok(stored == current)
    }

    fn write_sidecar(&self, stage: Stage, inputs: &[PathBuf]) -> Result<(), PipelineError> {
        let sidecar = Sidecar {
            inputs_hash: hash_files(inputs)?,
            config_hash: self.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = self.layout.sidecar(stage);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    fn require(&self, files: &[PathBuf], upstream: Stage) -> Result<(), PipelineError> {
        for f in files {
            if !f.exists() {
                return Err(PipelineError::MissingUpstream(upstream));
            }
        }
        Ok(())
    }

    fn textual_methods(&self) -> Vec<RepresentationKind> {
        self.cfg
            .methods
            .iter()
            .copied()
            .filter(|m| m.is_textual())
            .collect()
    }

    /// Textual methods whose rubricified text comes from the apply stage.
    fn applied_methods(&self) -> Vec<RepresentationKind> {
        self.textual_methods()
            .into_iter()
            .filter(|m| {
                matches!(
                    m,
                    RepresentationKind::GlobalRubric
                        | RepresentationKind::GlobalRubricBlind
                        | RepresentationKind::LocalRubric
                        | RepresentationKind::LocalRubricGeneric
                )
            })
            .collect()
    }

    fn load_split(&self, spec: &TaskSpec, split: Split) -> Result<Vec<Record>, PipelineError> {
        Ok(load_dataset(
            &self.layout.subsampled(&spec.name, split),
            spec,
            split,
        )?)
    }

    fn embed_records_to_matrix(
        &self,
        spec: &TaskSpec,
        records: &[Record],
        texts: &BTreeMap<RecordKey, String>,
        out: &Path,
    ) -> Result<(), PipelineError> {
        let store = embed_split(records, texts, spec, &self.cfg.embedding, self.cfg.embed_dim)?;
        let matrix = FeatureMatrix::from_embeddings(records, &store)?;
        save_feature_matrix(&matrix, out)?;
        Ok(())
    }

    fn store_from_matrix(&self, matrix: &FeatureMatrix) -> Result<EmbeddingStore, PipelineError> {
        let entries = (0..matrix.rows)
            .map(|i| {
                (
                    matrix.keys[i].clone(),
                    EmbeddingVector {
                        values: matrix.row(i).to_vec(),
                        dim: matrix.cols,
                        normalized: true,
                    },
                )
            })
            .collect();
        Ok(EmbeddingStore::from_entries(
            matrix.cols,
            &self.cfg.embedding.model_id,
            entries,
        )?)
    }

    // ---------------------------------------------------- stage bodies ----

    fn stage_ingest(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        for synth in &self.cfg.synth {
            let task = generate_task(synth)?;
            task.write_to(&self.layout.ws.join("data"))?;
            for split in SPLITS {
                outputs.push(self.layout.data(&synth.task_name, split));
            }
        }
        if let Some(root) = &self.cfg.data_root {
            for spec in &self.cfg.tasks {
                for split in SPLITS {
                    let src = root.join(&spec.name).join(format!("{split}.json"));
                    let records = load_dataset(&src, spec, split)?;
                    let dst = self.layout.data(&spec.name, split);
                    save_dataset(&records, &dst)?;
                    outputs.push(dst);
                }
            }
        }
        Ok(outputs)
    }

    fn stage_subsample(&self) -> Result<(), PipelineError> {
        for spec in &self.specs {
            for split in SPLITS {
                let records = load_dataset(&self.layout.data(&spec.name, split), spec, split)?;
                let kept = match self.cfg.subsample_cap {
                    Some(cap) => subsample_split(
                        &records,
                        cap,
                        stage_seed(self.cfg.seed, &["subsample", &spec.name, split.as_str()]),
                    )?,
                    None => records,
                };
                save_dataset(&kept, &self.layout.subsampled(&spec.name, split))?;
            }
        }
        Ok(())
    }

    fn stage_embed(&self) -> Result<(), PipelineError> {
        for spec in &self.specs {
            for split in SPLITS {
                let records = self.load_split(spec, split)?;
                let texts: BTreeMap<RecordKey, String> = records
                    .iter()
                    .map(|r| (r.key(), r.serialization.clone()))
                    .collect();
                self.embed_records_to_matrix(
                    spec,
                    &records,
                    &texts,
                    &self.layout.features(&spec.name, RepresentationKind::NaiveText, split),
                )?;
            }
        }
        Ok(())
    }

    fn stage_cohort(&self) -> Result<(), PipelineError> {
        for spec in &self.specs {
            let records = self.load_split(spec, Split::Train)?;
            let matrix = load_feature_matrix(
                &self.layout.features(&spec.name, RepresentationKind::NaiveText, Split::Train),
                None,
            )?;
            let store = self.store_from_matrix(&matrix)?;
            let cohort = select_medoid_cohort(
                &records,
                &store,
                spec.k_per_stratum,
                stage_seed(self.cfg.seed, &["cohort", &spec.name]),
            )?;
            let path = self.layout.cohort(&spec.name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let json = serde_json::to_string_pretty(&cohort).expect("cohort serializes");
            std::fs::write(&path, json).map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn load_cohort(&self, task: &str) -> Result<Cohort, PipelineError> {
        let path = self.layout.cohort(task);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::ConfigError(e.to_string()))
    }

    fn load_rubric(&self, task: &str, blind: bool) -> Result<Rubric, PipelineError> {
        let path = self.layout.rubric(task, blind);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::ConfigError(e.to_string()))
    }

    fn save_rubric(&self, rubric: &Rubric, task: &str, blind: bool) -> Result<(), PipelineError> {
        let path = self.layout.rubric(task, blind);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let json = serde_json::to_string_pretty(rubric).expect("rubric serializes");
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    fn stage_rubric(&self) -> Result<(), PipelineError> {
        for spec in &self.specs {
            if self.cfg.needs_rubric() {
                let cohort = self.load_cohort(&spec.name)?;
                let train = self.load_split(spec, Split::Train)?;
                let by_key: BTreeMap<RecordKey, Record> =
                    train.into_iter().map(|r| (r.key(), r)).collect();
                let rubric = synthesize_global_rubric(&cohort, &by_key, spec, &self.gateway)?;
                self.save_rubric(&rubric, &spec.name, false)?;
            }
            if self.cfg.methods.contains(&RepresentationKind::GlobalRubricBlind) {
                let rubric = synthesize_blind_rubric(spec, &self.gateway)?;
                self.save_rubric(&rubric, &spec.name, true)?;
            }
        }
        Ok(())
    }

    fn stage_apply(&self) -> Result<(), PipelineError> {
        for spec in &self.specs {
            for method in self.applied_methods() {
                for split in SPLITS {
                    let records = self.load_split(spec, split)?;
                    let rubricified = match method {
                        RepresentationKind::GlobalRubric => {
                            let rubric = self.load_rubric(&spec.name, false)?;
                            apply_rubric_split(&rubric, &records, &self.gateway)?
                        }
                        RepresentationKind::GlobalRubricBlind => {
                            let rubric = self.load_rubric(&spec.name, true)?;
                            apply_rubric_split(&rubric, &records, &self.gateway)?
                        }
                        RepresentationKind::LocalRubric => generate_local_split(
                            &records,
                            spec,
                            LocalRubricMode::TaskConditioned,
                            &self.gateway,
                        )?,
                        RepresentationKind::LocalRubricGeneric => generate_local_split(
                            &records,
                            spec,
                            LocalRubricMode::Generic,
                            &self.gateway,
                        )?,
                        _ => unreachable!("applied_methods filters the rest"),
                    };
                    save_rubricified(
                        &rubricified,
                        &self.layout.rubricified(&spec.name, method, split),
                    )?;
                    let texts: BTreeMap<RecordKey, String> = rubricified
                        .iter()
                        .map(|r| (r.key(), r.rubricified_text.clone()))
                        .collect();
                    self.embed_records_to_matrix(
                        spec,
                        &records,
                        &texts,
                        &self.layout.features(&spec.name, method, split),
                    )?;
                }
            }
        }
        Ok(())
    }

    fn load_program(&self, task: &str, kind: TransformKind) -> Result<TransformProgram, PipelineError> {
        let path = self.layout.program(task, kind);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::ConfigError(e.to_string()))
    }

    fn save_program(&self, task: &str, program: &TransformProgram) -> Result<(), PipelineError> {
        let path = self.layout.program(task, program.kind);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let json = serde_json::to_string_pretty(program).expect("program serializes");
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    fn stage_parsegen(&self) -> Result<(), PipelineError> {
        if !self.cfg.needs_parser() {
            return Ok(());
        }
        for spec in &self.specs {
            let rubric = self.load_rubric(&spec.name, false)?;
            let cohort = self.load_cohort(&spec.name)?;
            let train = self.load_split(spec, Split::Train)?;
            let by_key: BTreeMap<RecordKey, Record> =
                train.iter().cloned().map(|r| (r.key(), r)).collect();
            let applied = load_rubricified(&self.layout.rubricified(
                &spec.name,
                RepresentationKind::GlobalRubric,
                Split::Train,
            ))?;
            let applied_by_key: BTreeMap<RecordKey, RubricifiedRecord> =
                applied.into_iter().map(|r| (r.key(), r)).collect();
            let paired: Vec<(Record, RubricifiedRecord)> = cohort
                .members
                .iter()
                .filter_map(|m| {
                    let key = m.key();
                    Some((by_key.get(&key)?.clone(), applied_by_key.get(&key)?.clone()))
                })
                .collect();
            let program = generate_parser_program(&rubric, &paired, &self.gateway)?;
            self.save_program(&spec.name, &program)?;
            run_transform(
                &program,
                &self.cfg.runtime_cmd,
                &self.layout.ws.join("subsampled"),
                &self.layout.parser_output_root(),
                &spec.name,
                &SPLITS,
                DEFAULT_TRANSFORM_TIMEOUT,
            )?;
            for split in SPLITS {
                let records = self.load_split(spec, split)?;
                validate_transform_output(
                    &records,
                    &self.layout.parser_output_root(),
                    &spec.name,
                    split,
                    TransformKind::Parser,
                )?;
            }
            if self.cfg.methods.contains(&RepresentationKind::GlobalRubricAuto) {
                for split in SPLITS {
                    let records = self.load_split(spec, split)?;
                    let rubricified = load_rubricified(&self.layout.parser_output(&spec.name, split))?;
                    let texts: BTreeMap<RecordKey, String> = rubricified
                        .iter()
                        .map(|r| (r.key(), r.rubricified_text.clone()))
                        .collect();
                    self.embed_records_to_matrix(
                        spec,
                        &records,
                        &texts,
                        &self.layout.features(
                            &spec.name,
                            RepresentationKind::GlobalRubricAuto,
                            split,
                        ),
                    )?;
                }
            }
        }
        Ok(())
    }

    fn stage_tabularize(&self) -> Result<(), PipelineError> {
        if !self.cfg.methods.contains(&RepresentationKind::GlobalRubricTabular) {
            return Ok(());
        }
        for spec in &self.specs {
            let rubric = self.load_rubric(&spec.name, false)?;
            let parser = self.load_program(&spec.name, TransformKind::Parser)?;
            let examples = load_rubricified(&self.layout.parser_output(&spec.name, Split::Train))?;
            let sample: Vec<RubricifiedRecord> = examples.iter().take(5).cloned().collect();
            let program =
                generate_tabularizer_program(&rubric, &parser, &sample, &self.gateway)?;
            self.save_program(&spec.name, &program)?;
            run_transform(
                &program,
                &self.cfg.runtime_cmd,
                &self.layout.parser_output_root(),
                &self.layout.tabular_root(),
                &spec.name,
                &SPLITS,
                DEFAULT_TRANSFORM_TIMEOUT,
            )?;
            for split in SPLITS {
                let records = self.load_split(spec, split)?;
                validate_transform_output(
                    &records,
                    &self.layout.tabular_root(),
                    &spec.name,
                    split,
                    TransformKind::Tabularizer,
                )?;
            }
        }
        Ok(())
    }

    fn feature_matrix_path(&self, task: &str, method: RepresentationKind, split: Split) -> PathBuf {
        if method == RepresentationKind::GlobalRubricTabular {
            self.tabular_features_path(task, split)
        } else {
            self.layout.features(task, method, split)
        }
    }

    fn tabular_features_path(&self, task: &str, split: Split) -> PathBuf {
        self.layout.tabular_features(task, split)
    }

    fn load_matrix(
        &self,
        task: &str,
        method: RepresentationKind,
        split: Split,
    ) -> Result<FeatureMatrix, PipelineError> {
        let header = self.feature_matrix_path(task, method, split);
        let schema = (method == RepresentationKind::GlobalRubricTabular)
            .then(|| self.layout.tabular_root().join(task).join("feature_schema.json"));
        Ok(load_feature_matrix(&header, schema.as_deref())?)
    }

    /// Restricts a matrix to the rows whose keys are in `keys`, preserving
    /// row order.
    fn subset_matrix(matrix: &FeatureMatrix, keys: &BTreeSet<RecordKey>) -> FeatureMatrix {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut out_keys = Vec::new();
        for i in 0..matrix.rows {
            if keys.contains(&matrix.keys[i]) {
                values.extend_from_slice(matrix.row(i));
                labels.push(matrix.labels[i]);
                out_keys.push(matrix.keys[i].clone());
            }
        }
        FeatureMatrix {
            rows: labels.len(),
            cols: matrix.cols,
            values,
            labels,
            keys: out_keys,
            schema: matrix.schema.clone(),
        }
    }

    fn stage_train(&self) -> Result<(), PipelineError> {
        for spec in &self.specs {
            let cohort_keys: Option<BTreeSet<RecordKey>> = match self.cfg.regime {
                Regime::N40 => {
                    let cohort = self.load_cohort(&spec.name)?;
                    Some(cohort.members.iter().map(|m| m.key()).collect())
                }
                Regime::All => None,
            };
            for &method in &self.cfg.methods {
                let mut train = self.load_matrix(&spec.name, method, Split::Train)?;
                let val = self.load_matrix(&spec.name, method, Split::Val)?;
                let test = self.load_matrix(&spec.name, method, Split::Test)?;
                if let Some(keys) = &cohort_keys {
                    train = Self::subset_matrix(&train, keys);
                    if train.rows != 2 * spec.k_per_stratum {
                        return Err(PipelineError::ConfigError(format!(
                            "n40 regime expected {} cohort rows, found {}",
                            2 * spec.k_per_stratum,
                            train.rows
                        )));
                    }
                }
                let scores = if method.is_textual() {
                    let grid = self
                        .cfg
                        .lambda_grid
                        .clone()
                        .unwrap_or_else(default_lambda_grid);
                    let (_, model) = sweep_logreg(&train, &val, &grid, 1e-8)?;
                    predict_logreg(&model, &test)?
                } else {
                    let grid = self.cfg.gbm_grid.clone().unwrap_or_else(default_gbm_grid);
                    let (_, model) = sweep_gbm(
                        &train,
                        &val,
                        &grid,
                        stage_seed(self.cfg.seed, &["gbm", &spec.name]),
                    )?;
                    predict_gbm(&model, &test)?
                };
                let scored = ScoredSplit {
                    task: spec.name.clone(),
                    method: method.as_str().to_string(),
                    scores,
                    labels: test.labels.clone(),
                };
                let path = self.layout.scores(&spec.name, method);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                let json = serde_json::to_string_pretty(&scored).expect("scores serialize");
                std::fs::write(&path, json).map_err(io_err(&path))?;
            }
        }
        Ok(())
    }

    fn stage_evaluate(&self) -> Result<(), PipelineError> {
        let mut entries: Vec<ReportEntry> = Vec::new();
        for &method in &self.cfg.methods {
            let mut by_task: BTreeMap<String, ScoredSplit> = BTreeMap::new();
            for spec in &self.specs {
                let path = self.layout.scores(&spec.name, method);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                let scored: ScoredSplit = serde_json::from_str(&text)
                    .map_err(|e| PipelineError::ConfigError(e.to_string()))?;
                by_task.insert(spec.name.clone(), scored);
            }
            for metric in [Metric::Auroc, Metric::Auprc] {
                let overall = bootstrap_ci(
                    &by_task,
                    metric,
                    self.cfg.bootstrap_resamples,
                    self.cfg.seed,
                )?;
                entries.push(ReportEntry {
                    method: method.as_str().to_string(),
                    scope: "overall".to_string(),
                    metric,
                    point: overall.point,
                    ci_lo: overall.ci_lo,
                    ci_hi: overall.ci_hi,
                    n_resamples: overall.n_resamples,
                    seed: overall.seed,
                });
                if by_task.len() > 1 {
                    for (name, scored) in &by_task {
                        let solo: BTreeMap<String, ScoredSplit> =
                            [(name.clone(), scored.clone())].into();
                        let r = bootstrap_ci(
                            &solo,
                            metric,
                            self.cfg.bootstrap_resamples,
                            self.cfg.seed,
                        )?;
                        entries.push(ReportEntry {
                            method: method.as_str().to_string(),
                            scope: name.clone(),
                            metric,
                            point: r.point,
                            ci_lo: r.ci_lo,
                            ci_hi: r.ci_hi,
                            n_resamples: r.n_resamples,
                            seed: r.seed,
                        });
                    }
                }
            }
        }
        let path = self.layout.eval_entries();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let json = serde_json::to_string_pretty(&entries).expect("entries serialize");
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    fn stage_report(&self) -> Result<RenderedReport, PipelineError> {
        let path = self.layout.eval_entries();
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let entries: Vec<ReportEntry> =
            serde_json::from_str(&text).map_err(|e| PipelineError::ConfigError(e.to_string()))?;
        let rendered = render_report(&entries)?;
        let table_path = self.layout.report_table();
        if let Some(parent) = table_path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&table_path, &rendered.table).map_err(io_err(&table_path))?;
        let json = serde_json::to_string_pretty(&rendered.entries).expect("entries serialize");
        std::fs::write(self.layout.report_json(), json).map_err(io_err(self.layout.report_json()))?;
        Ok(rendered)
    }

    // ------------------------------------------------- stage plumbing ----

    fn data_inputs(&self) -> Vec<PathBuf> {
        // synthetic tasks have no file inputs; data-backed tasks hash the
        // source files
        let mut inputs = Vec::new();
        if let Some(root) = &self.cfg.data_root {
            for spec in &self.cfg.tasks {
                for split in SPLITS {
                    inputs.push(root.join(&spec.name).join(format!("{split}.json")));
                }
            }
        }
        inputs
    }

    fn all_task_files(&self, f: impl Fn(&str, Split) -> PathBuf) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for spec in &self.specs {
            for split in SPLITS {
                out.push(f(&spec.name, split));
            }
        }
        out
    }

    fn stage_io(&self, stage: Stage) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let l = &self.layout;
        match stage {
            Stage::Ingest => (
                self.data_inputs(),
                self.all_task_files(|t, s| l.data(t, s)),
            ),
            Stage::Subsample => (
                self.all_task_files(|t, s| l.data(t, s)),
                self.all_task_files(|t, s| l.subsampled(t, s)),
            ),
            Stage::Embed => (
                self.all_task_files(|t, s| l.subsampled(t, s)),
                self.all_task_files(|t, s| l.features(t, RepresentationKind::NaiveText, s)),
            ),
            Stage::Cohort => (
                {
                    let mut v = self.all_task_files(|t, s| l.subsampled(t, s));
                    v.extend(
                        self.specs
                            .iter()
                            .map(|sp| l.features(&sp.name, RepresentationKind::NaiveText, Split::Train)),
                    );
                    v
                },
                self.specs.iter().map(|sp| l.cohort(&sp.name)).collect(),
            ),
            Stage::Rubric => {
                let mut inputs = self.all_task_files(|t, s| l.subsampled(t, s));
                let mut outputs = Vec::new();
                for spec in &self.specs {
                    inputs.push(l.cohort(&spec.name));
                    if self.cfg.needs_rubric() {
                        outputs.push(l.rubric(&spec.name, false));
                    }
                    if self.cfg.methods.contains(&RepresentationKind::GlobalRubricBlind) {
                        outputs.push(l.rubric(&spec.name, true));
                    }
                }
                (inputs, outputs)
            }
            Stage::Apply => {
                let mut inputs = self.all_task_files(|t, s| l.subsampled(t, s));
                let mut outputs = Vec::new();
                for spec in &self.specs {
                    if self.cfg.needs_rubric() {
                        inputs.push(l.rubric(&spec.name, false));
                    }
                    if self.cfg.methods.contains(&RepresentationKind::GlobalRubricBlind) {
                        inputs.push(l.rubric(&spec.name, true));
                    }
                    for method in self.applied_methods() {
                        for split in SPLITS {
                            outputs.push(l.rubricified(&spec.name, method, split));
                            outputs.push(l.features(&spec.name, method, split));
                        }
                    }
                }
                (inputs, outputs)
            }
            Stage::Parsegen => {
                let mut inputs = self.all_task_files(|t, s| l.subsampled(t, s));
                let mut outputs = Vec::new();
                if self.cfg.needs_parser() {
                    for spec in &self.specs {
                        inputs.push(l.rubric(&spec.name, false));
                        inputs.push(l.cohort(&spec.name));
                        inputs.push(l.rubricified(
                            &spec.name,
                            RepresentationKind::GlobalRubric,
                            Split::Train,
                        ));
                        outputs.push(l.program(&spec.name, TransformKind::Parser));
                        for split in SPLITS {
                            outputs.push(l.parser_output(&spec.name, split));
                            if self.cfg.methods.contains(&RepresentationKind::GlobalRubricAuto) {
                                outputs.push(l.features(
                                    &spec.name,
                                    RepresentationKind::GlobalRubricAuto,
                                    split,
                                ));
                            }
                        }
                    }
                }
                (inputs, outputs)
            }
            Stage::Tabularize => {
                let mut inputs = Vec::new();
                let mut outputs = Vec::new();
                if self.cfg.methods.contains(&RepresentationKind::GlobalRubricTabular) {
                    for spec in &self.specs {
                        inputs.push(l.rubric(&spec.name, false));
                        inputs.push(l.program(&spec.name, TransformKind::Parser));
                        for split in SPLITS {
                            inputs.push(l.parser_output(&spec.name, split));
                            outputs.push(l.tabular_features(&spec.name, split));
                        }
                        outputs.push(l.program(&spec.name, TransformKind::Tabularizer));
                        outputs.push(l.tabular_root().join(&spec.name).join("feature_schema.json"));
                    }
                }
                (inputs, outputs)
            }
            Stage::Train => {
                let mut inputs = Vec::new();
                let mut outputs = Vec::new();
                for spec in &self.specs {
                    if self.cfg.regime == Regime::N40 {
                        inputs.push(l.cohort(&spec.name));
                    }
                    for &method in &self.cfg.methods {
                        for split in SPLITS {
                            inputs.push(self.feature_matrix_path(&spec.name, method, split));
                        }
                        outputs.push(l.scores(&spec.name, method));
                    }
                }
                (inputs, outputs)
            }
            Stage::Evaluate => {
                let mut inputs = Vec::new();
                for spec in &self.specs {
                    for &method in &self.cfg.methods {
                        inputs.push(l.scores(&spec.name, method));
                    }
                }
                (inputs, vec![l.eval_entries()])
            }
            Stage::Report => (
                vec![l.eval_entries()],
                vec![l.report_table(), l.report_json()],
            ),
        }
    }

    fn run_stage(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        let started = Instant::now();
        let calls_before = self.gateway.provider_calls();
        let (inputs, outputs) = self.stage_io(stage);
        if let Some(upstream) = stage.upstream() {
            self.require(&inputs, upstream)?;
        } else if stage == Stage::Ingest {
            // ingest's inputs are external; missing source data is a config
            // problem, not a missing upstream stage
            for f in &inputs {
                if !f.exists() {
                    return Err(PipelineError::ConfigError(format!(
                        "source dataset missing: {}",
                        f.display()
                    )));
                }
            }
        }
        let executed = if self.can_skip(stage, &inputs, &outputs)? {
            false
        } else {
            match stage {
                Stage::Ingest => {
                    self.stage_ingest()?;
                }
                Stage::Subsample => self.stage_subsample()?,
                Stage::Embed => self.stage_embed()?,
                Stage::Cohort => self.stage_cohort()?,
                Stage::Rubric => self.stage_rubric()?,
                Stage::Apply => self.stage_apply()?,
                Stage::Parsegen => self.stage_parsegen()?,
                Stage::Tabularize => self.stage_tabularize()?,
                Stage::Train => self.stage_train()?,
                Stage::Evaluate => self.stage_evaluate()?,
                Stage::Report => {
                    self.stage_report()?;
                }
            }
            self.write_sidecar(stage, &inputs)?;
            true
        };
        let report = StageReport {
            stage,
            executed,
            provider_calls: self.gateway.provider_calls() - calls_before,
            wall_ms: started.elapsed().as_millis(),
        };
        eprintln!(
            "{}",
            serde_json::json!({
                "stage": stage.as_str(),
                "executed": report.executed,
                "provider_calls": report.provider_calls,
                "wall_ms": report.wall_ms,
            })
        );
        Ok(report)
    }
}

/// Runs one stage; acquires the workspace lock for the duration.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let runner = Runner::new(cfg.clone())?;
    let _lock = WorkspaceLock::acquire(runner.layout.lock())?;
    runner.run_stage(stage)
}

/// Runs every stage in dependency order and returns the rendered report.
pub fn run_all(cfg: &PipelineConfig) -> Result<(Vec<StageReport>, RenderedReport), PipelineError> {
    let runner = Runner::new(cfg.clone())?;
    let _lock = WorkspaceLock::acquire(runner.layout.lock())?;
    let mut reports = Vec::new();
    for stage in Stage::ORDER {
        reports.push(runner.run_stage(stage)?);
    }
    let rendered = runner.stage_report()?;
    Ok((reports, rendered))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mock_config(ws: &Path, seed: u64) -> PipelineConfig {
        PipelineConfig {
            workspace: ws.to_path_buf(),
            data_root: None,
            tasks: vec![],
            synth: vec![SynthConfig::calibrated(seed)],
            llm: ProviderConfig::mock("mock-llm"),
            embedding: ProviderConfig::mock("mock-embed"),
            methods: default_methods(),
            regime: Regime::All,
            seed,
            embed_dim: 64,
            lambda_grid: Some(vec![1e-2, 1.0]),
            gbm_grid: Some(vec![
                GbmHyperparams {
                    n_estimators: 50,
                    max_depth: 2,
                    learning_rate: 0.2,
                    subsample: 1.0,
                },
                GbmHyperparams {
                    n_estimators: 200,
                    max_depth: 4,
                    learning_rate: 0.05,
                    subsample: 0.7,
                },
            ]),
            bootstrap_resamples: 50,
            subsample_cap: None,
            runtime_cmd: default_runtime(),
            use_mock_rulebook: true,
        }
    }

    #[test]
    fn config_validation_rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mock_config(dir.path(), 0);
        cfg.synth.clear();
        assert!(matches!(
            cfg.validate(),
            Err(PipelineError::ConfigError(_))
        ));
        let mut cfg = mock_config(dir.path(), 0);
        cfg.methods.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = mock_config(dir.path(), 0);
        cfg.tasks = vec![TaskSpec::new(
            "t",
            "q",
            crate::datamodel::TaskCategory::OperationalOutcome,
        )];
        cfg.data_root = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_order_round_trips() {
        for stage in Stage::ORDER {
            assert_eq!(Stage::parse(stage.as_str()), Some(stage));
        }
        assert_eq!(Stage::parse("bogus"), None);
        assert_eq!(Regime::parse("n40"), Some(Regime::N40));
        assert_eq!(Regime::parse("all"), Some(Regime::All));
    }

    #[test]
    fn evaluate_before_train_is_missing_upstream() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mock_config(dir.path(), 0);
        match run_stage(Stage::Evaluate, &cfg) {
            Err(PipelineError::MissingUpstream(stage)) => assert_eq!(stage, Stage::Train),
            other => panic!("expected MissingUpstream, got {other:?}"),
        }
    }

    #[test]
    fn lock_prevents_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mock_config(dir.path(), 0);
        let runner = Runner::new(cfg).unwrap();
        let lock = WorkspaceLock::acquire(runner.layout.lock()).unwrap();
        assert!(matches!(
            WorkspaceLock::acquire(runner.layout.lock()),
            Err(PipelineError::WorkspaceLocked(_))
        ));
        drop(lock);
        WorkspaceLock::acquire(runner.layout.lock()).unwrap();
    }

    #[test]
    fn ingest_and_subsample_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mock_config(dir.path(), 1);
        let r1 = run_stage(Stage::Ingest, &cfg).unwrap();
        assert!(r1.executed);
        let r2 = run_stage(Stage::Ingest, &cfg).unwrap();
        assert!(!r2.executed, "second ingest should be a no-op");
        let s1 = run_stage(Stage::Subsample, &cfg).unwrap();
        assert!(s1.executed);
        let data = dir.path().join("subsampled/synth_risk/train.json");
        let mtime = std::fs::metadata(&data).unwrap().modified().unwrap();
        let s2 = run_stage(Stage::Subsample, &cfg).unwrap();
        assert!(!s2.executed);
        assert_eq!(
            std::fs::metadata(&data).unwrap().modified().unwrap(),
            mtime,
            "rerun must not touch artifacts"
        );
    }
}
