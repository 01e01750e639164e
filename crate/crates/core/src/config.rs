//! Run configuration file and the objects built from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{Evaluator, LlmBackendSpec, LlmClient, PerExampleEvaluator, SyntheticModel, SyntheticModelSpec};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::fairness::SensitiveDataset;
use crate::harness::{label_mismatches, FairnessSetup};
use crate::io::{read_demonstrations, read_examples};
use crate::types::{CandidatePool, LabeledExample, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Llm,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "llm" => Ok(Self::Llm),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Number of sampled prompts in the CondAcc/Influence log.
    #[serde(default = "default_m")]
    pub m: usize,
}

fn default_m() -> usize {
    1000
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { m: default_m() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default = "default_max_k")]
    pub max_k: usize,
    #[serde(default = "default_remove_base")]
    pub remove_base_size: usize,
    #[serde(default = "default_remove_keep")]
    pub remove_keep: usize,
    #[serde(default = "default_ood_k")]
    pub ood_k: Vec<usize>,
}

fn default_max_k() -> usize {
    10
}
fn default_remove_base() -> usize {
    10
}
fn default_remove_keep() -> usize {
    5
}
fn default_ood_k() -> Vec<usize> {
    vec![16, 32]
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            max_k: default_max_k(),
            remove_base_size: default_remove_base(),
            remove_keep: default_remove_keep(),
            ood_k: default_ood_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
}

fn default_rate() -> f64 {
    0.1
}
fn default_cutoffs() -> Vec<usize> {
    vec![10, 20]
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            rate: default_rate(),
            cutoffs: default_cutoffs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessConfig {
    /// Binary task for the fairness data; defaults to the main task.
    #[serde(default)]
    pub task: Option<TaskSpec>,
    pub context_source: PathBuf,
    pub test_source: PathBuf,
    /// Dev set used to value the context pool.
    pub dev: PathBuf,
    pub positive_label: String,
    #[serde(default = "default_bpc")]
    pub bpc: Vec<f64>,
    #[serde(default)]
    pub bpt: f64,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_context_size")]
    pub context_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_bpc() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}
fn default_shots() -> Vec<usize> {
    vec![16, 32]
}
fn default_context_size() -> usize {
    64
}
fn default_test_size() -> usize {
    200
}

/// Contents of the `--config` JSON file. Relative paths are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub pool: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub ood_test: Option<PathBuf>,
    #[serde(default)]
    pub fairness: Option<FairnessConfig>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default)]
    pub synthetic: Option<SyntheticModelSpec>,
    #[serde(default)]
    pub llm: Option<LlmBackendSpec>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.pool);
        fix(&mut self.dev);
        for p in [&mut self.test, &mut self.ood_test].into_iter().flatten() {
            fix(p);
        }
        if let Some(f) = &mut self.fairness {
            fix(&mut f.context_source);
            fix(&mut f.test_source);
            fix(&mut f.dev);
        }
        if let Some(p) = self.llm.as_mut().and_then(|l| l.cache_path.as_mut()) {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if let Some(t) = self.fairness.as_ref().and_then(|f| f.task.as_ref()) {
            t.validate()?;
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", self.noise.rate)));
        }
        if self.harness.remove_keep > self.harness.remove_base_size {
            return Err(Error::Config("harness.remove_keep exceeds harness.remove_base_size".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    /// Applies the global `--seed` override to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.engine.seed = seed;
    }

    pub fn load_pool(&self, override_path: Option<&Path>) -> Result<CandidatePool> {
        let path = override_path.unwrap_or(&self.pool);
        CandidatePool::for_task(read_demonstrations(path)?, &self.task)
    }

    pub fn load_dev(&self) -> Result<Vec<LabeledExample>> {
        self.load_labeled(&self.dev, "dev")
    }

    pub fn load_test(&self) -> Result<Vec<LabeledExample>> {
        let path = self
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `test` set".into()))?;
        self.load_labeled(path, "test")
    }

    /// Loads the OOD set; labels outside the task label set are a configuration error.
    pub fn load_ood(&self) -> Result<Vec<LabeledExample>> {
        let path = self
            .ood_test
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `ood_test` set".into()))?;
        self.load_labeled(path, "ood_test")
    }

    fn load_labeled(&self, path: &Path, what: &str) -> Result<Vec<LabeledExample>> {
        let examples = read_examples(path)?;
        if examples.is_empty() {
            return Err(Error::Config(format!("{what} set {} is empty", path.display())));
        }
        let bad = label_mismatches(&examples, &self.task.label_set);
        if let Some(id) = bad.first() {
            return Err(Error::Config(format!(
                "{what} example `{id}` has a label outside the task label set ({} such examples)",
                bad.len()
            )));
        }
        Ok(examples)
    }

    pub fn fairness(&self) -> Result<&FairnessConfig> {
        self.fairness
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `fairness` section".into()))
    }

    pub fn fairness_task(&self) -> Result<&TaskSpec> {
        Ok(self.fairness()?.task.as_ref().unwrap_or(&self.task))
    }

    pub fn fairness_setup(&self) -> Result<FairnessSetup> {
        let f = self.fairness()?;
        Ok(FairnessSetup {
            bpc: f.bpc.clone(),
            bpt: f.bpt,
            shots: f.shots.clone(),
            context_size: f.context_size,
            test_size: f.test_size,
            seed: self.seed,
        })
    }

    /// Context source, test source and valuation dev set of the fairness experiment.
    pub fn load_fairness_data(&self) -> Result<(SensitiveDataset, SensitiveDataset, Vec<LabeledExample>)> {
        let f = self.fairness()?;
        let context = SensitiveDataset::new(f.positive_label.clone(), read_examples(&f.context_source)?)?;
        let test = SensitiveDataset::new(f.positive_label.clone(), read_examples(&f.test_source)?)?;
        let dev = read_examples(&f.dev)?;
        Ok((context, test, dev))
    }

    pub fn synthetic_model(&self) -> Result<SyntheticModel> {
        let spec = self
            .synthetic
            .clone()
            .ok_or_else(|| Error::Config("backend `synthetic` needs a `synthetic` section".into()))?;
        SyntheticModel::new(spec)
    }

    /// LLM client; the API key comes from the environment only.
    pub fn llm_client(&self) -> Result<LlmClient> {
        let spec = self
            .llm
            .clone()
            .ok_or_else(|| Error::Config("backend `llm` needs an `llm` section".into()))?;
        LlmClient::from_env(spec)
    }

    /// Evaluator used for valuation and curves. The synthetic backend scores prompts directly.
    pub fn evaluator(&self, kind: BackendKind) -> Result<Box<dyn Evaluator>> {
        Ok(match kind {
            BackendKind::Synthetic => Box::new(self.synthetic_model()?),
            BackendKind::Llm => Box::new(PerExampleEvaluator::new(self.llm_client()?)),
        })
    }

    /// Evaluator that reports a prediction for every example (needed for fairness metrics).
    pub fn per_example_evaluator(&self, kind: BackendKind) -> Result<Box<dyn Evaluator>> {
        Ok(match kind {
            BackendKind::Synthetic => Box::new(PerExampleEvaluator::new(self.synthetic_model()?)),
            BackendKind::Llm => Box::new(PerExampleEvaluator::new(self.llm_client()?)),
        })
    }
}
