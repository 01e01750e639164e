//! Deterministic synthetic model with a closed-form utility.
//!
//! `V(seq) = clamp(v0 + sum_c gamma^(c-1) * w[seq_c] + sum_{i before j} inter(i, j), 0, 1)`
//!
//! It serves as a direct-utility evaluator (the analytic `V` above) and, through
//! [`Predictor`], as a per-example classifier whose expected accuracy is `V`: the query is
//! answered correctly iff a hash-derived uniform `u(query)` falls below `V`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Capabilities, EvalOutcome, Evaluator, PredictRequest, Predictor};
use crate::error::{Error, Result};
use crate::types::{Demonstration, LabeledExample, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub before: String,
    pub after: String,
    pub value: f64,
}

/// Replaces a demo's weight when its label disagrees with the gold label, so mislabeled
/// demonstrations hurt the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    pub gold: BTreeMap<String, String>,
    pub mismatch_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub v0: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    pub weights: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interactions: Vec<Interaction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_prior: Option<LabelPrior>,
}

fn one() -> f64 {
    1.0
}

impl SyntheticModelSpec {
    pub fn additive<I, S>(v0: f64, gamma: f64, weights: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            v0,
            gamma,
            weights: weights.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            interactions: Vec::new(),
            label_prior: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.v0) {
            return Err(Error::Config(format!("v0 = {} outside [0, 1]", self.v0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma = {} outside (0, 1]", self.gamma)));
        }
        for i in &self.interactions {
            for id in [&i.before, &i.after] {
                if !self.weights.contains_key(id) {
                    return Err(Error::UnknownId(id.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticModelSpec,
    interactions: HashMap<(String, String), f64>,
}

impl SyntheticModel {
    pub fn new(spec: SyntheticModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut interactions = HashMap::new();
        for i in &spec.interactions {
            *interactions
                .entry((i.before.clone(), i.after.clone()))
                .or_insert(0.0) += i.value;
        }
        Ok(Self { spec, interactions })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    /// Closed-form utility of an id sequence (label prior not applied).
    pub fn score_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<f64> {
        let weights = ids
            .iter()
            .map(|id| self.weight(id.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.combine(ids, &weights))
    }

    /// Utility of a demonstration sequence, with the label prior applied.
    pub fn score(&self, demos: &[Demonstration]) -> Result<f64> {
        let weights = demos
            .iter()
            .map(|d| self.demo_weight(d))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<&str> = demos.iter().map(|d| d.id.as_str()).collect();
        Ok(self.combine(&ids, &weights))
    }

    fn weight(&self, id: &str) -> Result<f64> {
        self.spec
            .weights
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    fn demo_weight(&self, demo: &Demonstration) -> Result<f64> {
        let w = self.weight(&demo.id)?;
        if let Some(prior) = &self.spec.label_prior {
            if let Some(gold) = prior.gold.get(&demo.id) {
                if crate::types::normalize_label(gold) != crate::types::normalize_label(&demo.label) {
                    return Ok(prior.mismatch_weight);
                }
            }
        }
        Ok(w)
    }

    fn combine<S: AsRef<str>>(&self, ids: &[S], weights: &[f64]) -> f64 {
        let mut v = self.spec.v0;
        let mut discount = 1.0;
        for w in weights {
            v += discount * w;
            discount *= self.spec.gamma;
        }
        if !self.interactions.is_empty() {
            for (p, a) in ids.iter().enumerate() {
                for b in &ids[p + 1..] {
                    if let Some(x) = self
                        .interactions
                        .get(&(a.as_ref().to_string(), b.as_ref().to_string()))
                    {
                        v += x;
                    }
                }
            }
        }
        v.clamp(0.0, 1.0)
    }
}

/// Free-function form of [`SyntheticModel::score_ids`].
pub fn synthetic_score<S: AsRef<str>>(spec: &SyntheticModelSpec, ids: &[S]) -> Result<f64> {
    SyntheticModel::new(spec.clone())?.score_ids(ids)
}

impl Evaluator for SyntheticModel {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            direct_utility: true,
            per_example: true,
        }
    }

    fn model_id(&self) -> String {
        "synthetic".to_string()
    }

    fn evaluate(&self, _task: &TaskSpec, demos: &[Demonstration], _dev: &[LabeledExample]) -> Result<EvalOutcome> {
        Ok(EvalOutcome::direct(self.score(demos)?))
    }
}

/// Uniform in [0, 1) derived from the example id.
fn query_uniform(id: &str) -> f64 {
    let digest = Sha256::digest(format!("synthetic-query:{id}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

impl Predictor for SyntheticModel {
    fn model_id(&self) -> String {
        "synthetic-classifier".to_string()
    }

    fn predict(&self, request: &PredictRequest<'_>) -> Result<String> {
        let v = self.score(request.demos)?;
        let labels = &request.task.label_set;
        let gold = request
            .task
            .label_index(&request.query.label)
            .ok_or_else(|| Error::Config(format!("query label `{}` outside label set", request.query.label)))?;
        let idx = if query_uniform(&request.query.id) < v {
            gold
        } else {
            (gold + 1) % labels.len()
        };
        Ok(labels[idx].clone())
    }
}
