//! The evaluator contract and its implementations.
//!
//! An [`Evaluator`] scores an ordered demonstration sequence on a dev set. Backends come in two
//! flavours: direct-utility backends compute the score analytically from the sequence, while
//! per-example backends ([`PerExampleEvaluator`]) assemble one prompt per dev example, ask a
//! [`Predictor`] for a completion and count verbalizer matches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{assemble_prompt, match_label, Demonstration, LabeledExample, PromptSpec, TaskSpec};

pub mod cache;
pub mod llm;
pub mod synthetic;

pub use cache::{CacheEntry, CacheStats, ResponseCache};
pub use llm::{LlmBackendSpec, LlmClient};
pub use synthetic::{Interaction, LabelPrior, SyntheticModel, SyntheticModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub direct_utility: bool,
    pub per_example: bool,
}

/// What the model said about one dev example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub gold: String,
    pub raw: Option<String>,
    /// Index into the task label set; `None` for refusals and failures.
    pub predicted: Option<usize>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub score: f64,
    pub records: Vec<PredictionRecord>,
    pub failures: usize,
    /// Outputs that matched no verbalizer.
    pub refusals: usize,
    pub partial: bool,
}

impl EvalOutcome {
    pub fn direct(score: f64) -> Self {
        Self {
            score,
            records: Vec::new(),
            failures: 0,
            refusals: 0,
            partial: false,
        }
    }
}

/// Scores a prompt (instruction + ordered demos) against a dev set: the `V(P, f)` of the valuation.
pub trait Evaluator: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn model_id(&self) -> String;

    fn evaluate(
        &self,
        task: &TaskSpec,
        demos: &[Demonstration],
        dev: &[LabeledExample],
    ) -> Result<EvalOutcome>;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn evaluate(&self, task: &TaskSpec, demos: &[Demonstration], dev: &[LabeledExample]) -> Result<EvalOutcome> {
        (**self).evaluate(task, demos, dev)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn evaluate(&self, task: &TaskSpec, demos: &[Demonstration], dev: &[LabeledExample]) -> Result<EvalOutcome> {
        (**self).evaluate(task, demos, dev)
    }
}

/// Checked entry point: rejects an empty dev set, then delegates to the backend.
pub fn evaluate_prompt<E: Evaluator + ?Sized>(
    evaluator: &E,
    task: &TaskSpec,
    demos: &[Demonstration],
    dev: &[LabeledExample],
) -> Result<EvalOutcome> {
    if dev.is_empty() {
        return Err(Error::Config("dev set is empty".into()));
    }
    evaluator.evaluate(task, demos, dev)
}

/// Everything a predictor may look at for one query.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub task: &'a TaskSpec,
    pub demos: &'a [Demonstration],
    pub query: &'a LabeledExample,
    pub prompt: &'a str,
}

/// Produces a raw completion for one assembled prompt.
pub trait Predictor: Send + Sync {
    fn model_id(&self) -> String;

    fn predict(&self, request: &PredictRequest<'_>) -> Result<String>;
}

/// Adapts a closure into a [`Predictor`].
pub struct FnPredictor<F> {
    id: String,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(&PredictRequest<'_>) -> Result<String> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&PredictRequest<'_>) -> Result<String> + Send + Sync,
{
    fn model_id(&self) -> String {
        self.id.clone()
    }

    fn predict(&self, request: &PredictRequest<'_>) -> Result<String> {
        (self.f)(request)
    }
}

/// Validation metric over per-example records. Accuracy is the only one used so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
}

impl Metric {
    pub fn score(&self, records: &[PredictionRecord]) -> f64 {
        match self {
            Metric::Accuracy => {
                let answered: Vec<_> = records.iter().filter(|r| r.error.is_none()).collect();
                if answered.is_empty() {
                    return 0.0;
                }
                answered.iter().filter(|r| r.correct).count() as f64 / answered.len() as f64
            }
        }
    }
}

/// Per-example evaluation: one prompt per dev example, same demos, that example as the query.
pub struct PerExampleEvaluator<P> {
    predictor: P,
    metric: Metric,
    max_failure_fraction: f64,
    parallel: bool,
}

impl<P: Predictor> PerExampleEvaluator<P> {
    pub fn new(predictor: P) -> Self {
        Self {
            predictor,
            metric: Metric::Accuracy,
            max_failure_fraction: 0.2,
            parallel: true,
        }
    }

    /// Abort the evaluation when more than this fraction of examples fail.
    pub fn with_max_failure_fraction(mut self, fraction: f64) -> Self {
        self.max_failure_fraction = fraction;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn predictor(&self) -> &P {
        &self.predictor
    }

    fn evaluate_one(&self, task: &TaskSpec, demos: &[Demonstration], query: &LabeledExample) -> Result<PredictionRecord> {
        let prompt = assemble_prompt(&PromptSpec {
            task,
            demos,
            query: &query.input,
        })?;
        let gold = task.label_index(&query.label);
        let request = PredictRequest {
            task,
            demos,
            query,
            prompt: &prompt,
        };
        Ok(match self.predictor.predict(&request) {
            Ok(raw) => {
                let predicted = match_label(&raw, &task.label_set);
                PredictionRecord {
                    example_id: query.id.clone(),
                    gold: query.label.clone(),
                    correct: predicted.is_some() && predicted == gold,
                    raw: Some(raw),
                    predicted,
                    error: None,
                }
            }
            Err(e @ (Error::Template(_) | Error::Config(_))) => return Err(e),
            Err(e) => PredictionRecord {
                example_id: query.id.clone(),
                gold: query.label.clone(),
                raw: None,
                predicted: None,
                correct: false,
                error: Some(e.to_string()),
            },
        })
    }
}

impl<P: Predictor> Evaluator for PerExampleEvaluator<P> {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            direct_utility: false,
            per_example: true,
        }
    }

    fn model_id(&self) -> String {
        self.predictor.model_id()
    }

    fn evaluate(&self, task: &TaskSpec, demos: &[Demonstration], dev: &[LabeledExample]) -> Result<EvalOutcome> {
        let records: Vec<PredictionRecord> = if self.parallel {
            dev.par_iter()
                .map(|q| self.evaluate_one(task, demos, q))
                .collect::<Result<_>>()?
        } else {
            dev.iter()
                .map(|q| self.evaluate_one(task, demos, q))
                .collect::<Result<_>>()?
        };
        let failures = records.iter().filter(|r| r.error.is_some()).count();
        let refusals = records
            .iter()
            .filter(|r| r.error.is_none() && r.predicted.is_none())
            .count();
        if !dev.is_empty() && failures as f64 / dev.len() as f64 > self.max_failure_fraction {
            let first = records
                .iter()
                .find_map(|r| r.error.clone())
                .unwrap_or_default();
            return Err(Error::Backend(format!(
                "{failures} of {} dev examples failed (ceiling {}): {first}",
                dev.len(),
                self.max_failure_fraction
            )));
        }
        Ok(EvalOutcome {
            score: self.metric.score(&records),
            partial: failures > 0,
            failures,
            refusals,
            records,
        })
    }
}
