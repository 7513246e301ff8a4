//! Run configuration file: what to optimize, how to score it, and which
//! proposer to use.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{fixed_task_evaluator, packing_evaluator, string_task_evaluator, PackingConfig, StringTask};
use crate::engine::{
    Acceptance, EngineConfig, DEFAULT_CHECKPOINT_EVERY, DEFAULT_DIGEST_TEXT_BYTES, DEFAULT_FRONTIER_DIGEST,
    DEFAULT_MAX_ITERATIONS, DEFAULT_MINIBATCH_SIZE,
};
use crate::eval::{
    EvaluationCache, EvaluationHost, Evaluator, EvaluatorIdentity, HostConfig, SubprocessEvaluator,
    DEFAULT_SIDE_INFO_CAP, DEFAULT_TIMEOUT,
};
use crate::model::{Example, SCHEMA_VERSION};
use crate::proposer::{HttpChatBackend, HttpChatConfig, Proposer, RecordingBackend, ReplayBackend};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot resolve evaluator: {0}")]
    Evaluator(String),
    #[error("cannot set up proposer: {0}")]
    Proposer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    /// External program speaking the line-delimited protocol.
    Subprocess {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        name: String,
        #[serde(default = "default_version")]
        version: String,
    },
    /// Prefix/char/edit scoring of string tasks; `task` is used when there
    /// is no dataset, otherwise each example payload is a task.
    StringTask {
        #[serde(default)]
        task: Option<StringTask>,
    },
    CirclePacking {
        #[serde(default)]
        packing: Option<PackingConfig>,
    },
}

fn default_version() -> String {
    "1".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposerSpec {
    /// OpenAI-compatible chat endpoint; the key comes from `api_key_env`.
    Http {
        #[serde(flatten)]
        http: HttpChatConfig,
    },
    /// Replays a log written with `--record-proposer`.
    Replay {
        path: PathBuf,
        #[serde(default)]
        lenient: bool,
    },
    /// Offline proposer for string tasks that repairs the first mismatch.
    MismatchFixer,
}

/// Examples inline or in a JSON-lines file of `{"id", "payload"}` objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExamplesSpec {
    Inline(Vec<ExampleSpec>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSpec {
    pub id: String,
    pub payload: serde_json::Value,
}

fn default_max_calls() -> u64 {
    100
}
fn default_minibatch() -> usize {
    DEFAULT_MINIBATCH_SIZE
}
fn default_max_iterations() -> u64 {
    DEFAULT_MAX_ITERATIONS
}
fn default_checkpoint_every() -> u64 {
    DEFAULT_CHECKPOINT_EVERY
}
fn default_digest() -> usize {
    DEFAULT_FRONTIER_DIGEST
}
fn default_digest_bytes() -> usize {
    DEFAULT_DIGEST_TEXT_BYTES
}
fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT.as_millis() as u64
}
fn default_floor() -> Option<f64> {
    Some(0.0)
}
fn default_cap() -> usize {
    DEFAULT_SIDE_INFO_CAP
}
fn default_parallelism() -> usize {
    1
}
fn default_retries() -> u32 {
    2
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("textopt-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default = "default_max_calls")]
    pub max_evaluator_calls: u64,
    #[serde(default = "default_minibatch")]
    pub minibatch_size: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_digest")]
    pub frontier_digest: usize,
    #[serde(default = "default_digest_bytes")]
    pub digest_text_bytes: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub capture_stdio: bool,
    /// `null` makes evaluation failures abort the run.
    #[serde(default = "default_floor")]
    pub failure_floor: Option<f64>,
    #[serde(default = "default_cap")]
    pub side_info_cap: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub proposer: ProposerSpec,
    #[serde(default = "default_retries")]
    pub proposer_retries: u32,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed_candidate: Option<String>,
    pub evaluator: EvaluatorSpec,
    #[serde(default)]
    pub dataset: Option<ExamplesSpec>,
    #[serde(default)]
    pub valset: Option<ExamplesSpec>,
    #[serde(default)]
    pub objective: Option<String>,
    #[serde(default)]
    pub background: Option<String>,
    pub config: RunSettings,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        config
            .engine_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if config.valset.is_some() && config.dataset.is_none() {
            return Err(ConfigError::Invalid("valset requires a dataset".into()));
        }
        if let EvaluatorSpec::StringTask { task: None } = &config.evaluator {
            if config.dataset.is_none() {
                return Err(ConfigError::Invalid(
                    "string_task evaluator without a dataset needs a task".into(),
                ));
            }
        }
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        let s = &self.config;
        EngineConfig {
            minibatch_size: s.minibatch_size,
            max_evaluator_calls: s.max_evaluator_calls,
            seed: self.seed_candidate.clone(),
            objective: self.objective.clone(),
            background: self.background.clone(),
            rng_seed: s.rng_seed,
            acceptance: Acceptance::StrictImprovement,
            checkpoint_every: s.checkpoint_every,
            max_iterations: s.max_iterations,
            frontier_digest: s.frontier_digest,
            digest_text_bytes: s.digest_text_bytes,
        }
    }

    pub fn host_config(&self) -> HostConfig {
        let s = &self.config;
        HostConfig {
            capture_stdio: s.capture_stdio,
            timeout_ms: s.timeout_ms,
            failure_floor: s.failure_floor,
            side_info_cap: s.side_info_cap,
            parallelism: s.parallelism,
        }
    }

    fn load_examples(&self, spec: &ExamplesSpec, val: bool) -> Result<Vec<Example>, ConfigError> {
        let specs: Vec<ExampleSpec> = match spec {
            ExamplesSpec::Inline(v) => v.clone(),
            ExamplesSpec::File(p) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                text.lines()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| {
                        serde_json::from_str(l)
                            .map_err(|e| ConfigError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        Ok(specs
            .into_iter()
            .map(|s| {
                if val {
                    Example::val(s.id, s.payload)
                } else {
                    Example::train(s.id, s.payload)
                }
            })
            .collect())
    }

    pub fn dataset(&self) -> Result<Option<Vec<Example>>, ConfigError> {
        self.dataset.as_ref().map(|d| self.load_examples(d, false)).transpose()
    }

    pub fn valset(&self) -> Result<Option<Vec<Example>>, ConfigError> {
        self.valset.as_ref().map(|d| self.load_examples(d, true)).transpose()
    }

    pub fn evaluator(&self) -> Result<Arc<dyn Evaluator>, ConfigError> {
        Ok(match &self.evaluator {
            EvaluatorSpec::Subprocess {
                program,
                args,
                name,
                version,
            } => {
                let resolved = resolve_program(&self.resolve_program_path(program))?;
                Arc::new(SubprocessEvaluator::new(
                    resolved,
                    args.clone(),
                    EvaluatorIdentity::new(name.clone(), version.clone()),
                ))
            }
            EvaluatorSpec::StringTask { task: Some(task) } => fixed_task_evaluator(task.clone()),
            EvaluatorSpec::StringTask { task: None } => string_task_evaluator(),
            EvaluatorSpec::CirclePacking { packing } => packing_evaluator(packing.clone().unwrap_or_default()),
        })
    }

    fn resolve_program_path(&self, program: &Path) -> PathBuf {
        // Bare names are looked up on PATH; anything with a separator is a path.
        if program.components().count() == 1 {
            program.to_path_buf()
        } else {
            self.resolve(program)
        }
    }

    pub fn host(&self) -> Result<EvaluationHost, ConfigError> {
        let cache = match &self.config.cache_dir {
            Some(dir) => EvaluationCache::on_disk(self.resolve(dir))
                .map_err(|e| ConfigError::Invalid(format!("cache_dir: {e}")))?,
            None => EvaluationCache::in_memory(),
        };
        Ok(EvaluationHost::new(self.evaluator()?, cache, self.host_config()))
    }

    /// Builds the proposer, optionally recording all traffic to `record`.
    pub fn proposer(&self, record: Option<&Path>) -> Result<Proposer, ConfigError> {
        let retries = self.config.proposer_retries;
        let backend: Box<dyn crate::proposer::ProposerBackend> = match &self.config.proposer {
            ProposerSpec::Http { http } => {
                Box::new(HttpChatBackend::from_env(http.clone()).map_err(ConfigError::Proposer)?)
            }
            ProposerSpec::Replay { path, lenient } => {
                let backend = ReplayBackend::load(&self.resolve(path))
                    .map_err(|e| ConfigError::Proposer(format!("{}: {e}", path.display())))?;
                Box::new(if *lenient { backend.lenient() } else { backend })
            }
            ProposerSpec::MismatchFixer => Box::new(crate::proposer::ScriptedBackend(crate::bench::mismatch_fixer())),
        };
        let backend = match record {
            Some(path) => Box::new(
                RecordingBackend::new(backend, path)
                    .map_err(|e| ConfigError::Proposer(format!("{}: {e}", path.display())))?,
            ),
            None => backend,
        };
        Ok(Proposer::new(backend, retries))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }
}

/// Finds an executable: paths are checked directly, bare names on `PATH`.
pub fn resolve_program(program: &Path) -> Result<PathBuf, ConfigError> {
    let is_exec = |p: &Path| {
        use std::os::unix::fs::PermissionsExt;
        fs::metadata(p).is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
    };
    if program.components().count() > 1 {
        return if is_exec(program) {
            Ok(program.to_path_buf())
        } else {
            Err(ConfigError::Evaluator(format!(
                "{} is not an executable file",
                program.display()
            )))
        };
    }
    let path = std::env::var_os("PATH").unwrap_or_default();
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|p| is_exec(p))
        .ok_or_else(|| ConfigError::Evaluator(format!("{} not found on PATH", program.display())))
}
