//! Comparison scorers: conditional accuracy, influence, leave-one-out and random selection.
//!
//! CondAcc and Influence are both computed from one [`PromptLog`] of uniformly sampled,
//! scored prompts.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{evaluate_prompt, Evaluator};
use crate::engine::{pass_rng, sample_permutation};
use crate::error::{Error, Result};
use crate::table::{Score, ScoreTable};
use crate::types::{CandidatePool, Demonstration, LabeledExample, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLogEntry {
    pub demo_ids: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub index: usize,
    pub demo_ids: Vec<String>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    Skip,
}

/// Scored prompts sampled from the pool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptLog {
    pub entries: Vec<PromptLogEntry>,
    /// Prompts dropped under [`FailurePolicy::Skip`].
    pub skipped: Vec<SkippedPrompt>,
}

impl PromptLog {
    pub fn new(entries: Vec<PromptLogEntry>) -> Self {
        Self {
            entries,
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_score(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_jsonl(path, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(crate::io::read_jsonl(path)?))
    }

    /// Checks every referenced id against the pool.
    pub fn validate(&self, pool: &CandidatePool) -> Result<()> {
        for e in &self.entries {
            for id in &e.demo_ids {
                if pool.get(id).is_none() {
                    return Err(Error::UnknownId(id.clone()));
                }
            }
        }
        Ok(())
    }

    // (sum, count) of scores over entries containing each id
    fn inclusion_stats(&self) -> HashMap<&str, (f64, u64)> {
        let mut stats: HashMap<&str, (f64, u64)> = HashMap::new();
        for e in &self.entries {
            let distinct: HashSet<&str> = e.demo_ids.iter().map(String::as_str).collect();
            for id in distinct {
                let s = stats.entry(id).or_default();
                s.0 += e.score;
                s.1 += 1;
            }
        }
        stats
    }
}

/// Samples `m` ordered `k`-prompts (prompt `i` uses RNG stream `(seed, i)`) and scores each.
#[allow(clippy::too_many_arguments)]
pub fn build_prompt_log<E: Evaluator + ?Sized>(
    pool: &CandidatePool,
    k: usize,
    m: usize,
    task: &TaskSpec,
    dev: &[LabeledExample],
    evaluator: &E,
    seed: u64,
    policy: FailurePolicy,
) -> Result<PromptLog> {
    if m == 0 {
        return Err(Error::Config("M must be at least 1".into()));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::Config(format!("K = {k} must satisfy 1 <= K <= pool size {}", pool.len())));
    }
    let results: Vec<(Vec<String>, Result<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let ids = sample_permutation(pool, k, &mut pass_rng(seed, i as u64)).expect("k checked");
            let score = pool
                .resolve(&ids)
                .and_then(|demos| evaluate_prompt(evaluator, task, &demos, dev))
                .map(|o| o.score);
            (ids, score)
        })
        .collect();
    let mut log = PromptLog::default();
    for (index, (demo_ids, score)) in results.into_iter().enumerate() {
        match (score, policy) {
            (Ok(score), _) => log.entries.push(PromptLogEntry { demo_ids, score }),
            (Err(e), FailurePolicy::Abort) => return Err(e.context(format_args!("prompt {index}"))),
            (Err(e), FailurePolicy::Skip) => log.skipped.push(SkippedPrompt {
                index,
                demo_ids,
                error: e.to_string(),
            }),
        }
    }
    Ok(log)
}

/// Mean score of the prompts containing each demo. Demos never sampled are undefined.
pub fn condacc_scores<S: AsRef<str>>(log: &PromptLog, ids: &[S]) -> ScoreTable {
    let stats = log.inclusion_stats();
    ScoreTable {
        rows: ids
            .iter()
            .map(|id| {
                let id = id.as_ref();
                let score = match stats.get(id) {
                    Some(&(sum, n)) if n > 0 => Score {
                        value: Some(sum / n as f64),
                        count: n,
                    },
                    _ => Score { value: None, count: 0 },
                };
                (id.to_string(), score)
            })
            .collect(),
    }
}

/// Mean score with the demo minus mean score without it. Undefined when the demo appears in
/// none or all of the prompts.
pub fn influence_scores<S: AsRef<str>>(log: &PromptLog, ids: &[S]) -> ScoreTable {
    let stats = log.inclusion_stats();
    let m = log.len() as u64;
    ScoreTable {
        rows: ids
            .iter()
            .map(|id| {
                let id = id.as_ref();
                let (sum_in, n_in) = stats.get(id).copied().unwrap_or((0.0, 0));
                let value = if n_in == 0 || n_in == m {
                    None
                } else {
                    // sum over excluded prompts, computed directly to avoid cancellation
                    let sum_out: f64 = log
                        .entries
                        .iter()
                        .filter(|e| !e.demo_ids.iter().any(|d| d == id))
                        .map(|e| e.score)
                        .sum();
                    Some(sum_in / n_in as f64 - sum_out / (m - n_in) as f64)
                };
                (id.to_string(), Score { value, count: n_in })
            })
            .collect(),
    }
}

/// `V(full prompt) - V(prompt without x_i)` for each demo of a fixed prompt; the remaining
/// demos keep their order.
pub fn loo_scores<E: Evaluator + ?Sized>(
    prompt: &[Demonstration],
    task: &TaskSpec,
    dev: &[LabeledExample],
    evaluator: &E,
) -> Result<ScoreTable> {
    if prompt.len() < 2 {
        return Err(Error::Config("leave-one-out needs at least two demonstrations".into()));
    }
    let full = evaluate_prompt(evaluator, task, prompt, dev)
        .map_err(|e| e.context("full prompt"))?
        .score;
    let rows = (0..prompt.len())
        .into_par_iter()
        .map(|i| {
            let reduced: Vec<Demonstration> = prompt
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, d)| d.clone())
                .collect();
            let v = evaluate_prompt(evaluator, task, &reduced, dev)
                .map_err(|e| e.context(format_args!("prompt without {}", prompt[i].id)))?
                .score;
            Ok((
                prompt[i].id.clone(),
                Score {
                    value: Some(full - v),
                    count: 1,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { rows })
}

/// `k` distinct ids chosen uniformly without replacement.
pub fn random_select(pool: &CandidatePool, k: usize, seed: u64) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::Config(format!("k = {k} exceeds pool size {}", pool.len())));
    }
    let mut ids: Vec<&str> = pool.ids().collect();
    let mut rng = pass_rng(seed, u64::MAX);
    let (chosen, _) = ids.partial_shuffle(&mut rng, k);
    Ok(chosen.iter().map(|s| s.to_string()).collect())
}
