//! Monte Carlo demonstration valuation over sampled prompt permutations.
//!
//! Each pass draws `K` demonstrations without replacement in a uniformly random order, scores
//! every prefix of that sequence on the same dev set and credits each demonstration with the
//! change in score its addition caused. A marginal `v'` is folded into the demo's running mean
//! only when `|v'| >= mu`; the comparison baseline advances after every prefix either way, so
//! the marginals of one pass always telescope to `V(full) - V(empty)`.
//!
//! Pass `i` draws its permutation from its own ChaCha stream `(seed, i)`. Passes can therefore
//! be evaluated in any order (or concurrently) and folded afterwards in index order, and an
//! interrupted run resumes from a checkpoint with exactly the same result.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{evaluate_prompt, Evaluator};
use crate::error::{Error, Result};
use crate::table::ValueTable;
pub use crate::table::{merge_tables, update_running_mean};
use crate::types::{CandidatePool, Demonstration, LabeledExample, TaskSpec};

/// Default cap on ordered arrangements enumerated by [`exact_values`].
pub const DEFAULT_EXACT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Prompt size.
    pub k: usize,
    /// Number of permutation passes.
    pub n_passes: usize,
    /// Truncation threshold; marginals with `|v'| < mu` are not folded in.
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many passes (0 disables periodic checkpoints).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_passes: 1000,
            mu: 0.0,
            seed: 0,
            checkpoint_every: 0,
            parallel: true,
        }
    }
}

impl EngineConfig {
    pub fn new(k: usize, n_passes: usize, mu: f64, seed: u64) -> Self {
        Self {
            k,
            n_passes,
            mu,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.k == 0 || self.k > pool_size {
            return Err(Error::Config(format!(
                "K = {} must satisfy 1 <= K <= pool size {pool_size}",
                self.k
            )));
        }
        if self.n_passes == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(Error::Config(format!("mu = {} must be >= 0", self.mu)));
        }
        Ok(())
    }
}

/// One sampled permutation and the score of each of its prefixes (index 0 is zero-shot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPass {
    pub permutation: Vec<String>,
    pub prefix_scores: Vec<f64>,
}

impl PermutationPass {
    /// `v'_c = V_c - V_{c-1}` for c = 1..K.
    pub fn marginals(&self) -> Vec<f64> {
        self.prefix_scores.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Folds the gated marginals into `table`. Returns how many were accepted.
    pub fn apply(&self, table: &mut ValueTable, mu: f64) -> Result<usize> {
        let mut accepted = 0;
        for (id, v) in self.permutation.iter().zip(self.marginals()) {
            if v.abs() >= mu {
                table.record(id, v)?;
                accepted += 1;
            }
        }
        Ok(accepted)
    }
}

/// Score of the instruction-only prompt.
pub fn zero_shot_score<E: Evaluator + ?Sized>(task: &TaskSpec, dev: &[LabeledExample], evaluator: &E) -> Result<f64> {
    evaluate_prompt(evaluator, task, &[], dev)
        .map(|o| o.score)
        .map_err(|e| e.context("zero-shot evaluation"))
}

/// `K` distinct demo ids, uniformly chosen and uniformly ordered.
pub fn sample_permutation<R: rand::Rng + ?Sized>(pool: &CandidatePool, k: usize, rng: &mut R) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::Config(format!("K = {k} exceeds pool size {}", pool.len())));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, k);
    Ok(chosen
        .iter()
        .map(|&i| pool.demos()[i].id.clone())
        .collect())
}

/// The RNG for pass `pass_index` of a run seeded with `seed`.
pub fn pass_rng(seed: u64, pass_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass_index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub passes_completed: usize,
    pub mu: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

/// Checkpoint location: `<stem>.csv` holds the value table, `<stem>.json` the sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    stem: PathBuf,
}

impl Checkpoint {
    pub fn new(stem: impl Into<PathBuf>) -> Self {
        Self { stem: stem.into() }
    }

    pub fn table_path(&self) -> PathBuf {
        self.stem.with_extension("csv")
    }

    pub fn meta_path(&self) -> PathBuf {
        self.stem.with_extension("json")
    }

    pub fn exists(&self) -> bool {
        self.meta_path().exists() && self.table_path().exists()
    }

    pub fn save(&self, table: &ValueTable, meta: &CheckpointMeta) -> Result<()> {
        table.save(&self.table_path())?;
        let path = self.meta_path();
        let json = serde_json::to_vec_pretty(meta)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self) -> Result<(ValueTable, CheckpointMeta)> {
        let path = self.meta_path();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        Ok((ValueTable::load(&self.table_path())?, meta))
    }
}

/// Runs valuation passes for one pool, task, dev set and evaluator.
pub struct ShapleyEngine<'a, E: ?Sized> {
    pub config: EngineConfig,
    pub task: &'a TaskSpec,
    pub dev: &'a [LabeledExample],
    pub pool: &'a CandidatePool,
    pub evaluator: &'a E,
    checkpoint: Option<Checkpoint>,
    zero_shot: std::sync::OnceLock<f64>,
}

impl<'a, E: Evaluator + ?Sized> ShapleyEngine<'a, E> {
    pub fn new(
        config: EngineConfig,
        task: &'a TaskSpec,
        dev: &'a [LabeledExample],
        pool: &'a CandidatePool,
        evaluator: &'a E,
    ) -> Result<Self> {
        config.validate(pool.len())?;
        if dev.is_empty() {
            return Err(Error::Config("dev set is empty".into()));
        }
        Ok(Self {
            config,
            task,
            dev,
            pool,
            evaluator,
            checkpoint: None,
            zero_shot: std::sync::OnceLock::new(),
        })
    }

    /// Enables checkpointing (and resuming) at `stem`.
    pub fn with_checkpoint(mut self, stem: impl AsRef<Path>) -> Self {
        self.checkpoint = Some(Checkpoint::new(stem.as_ref()));
        self
    }

    /// Zero-shot score, computed once and then reused by every pass.
    pub fn zero_shot(&self) -> Result<f64> {
        if let Some(&v) = self.zero_shot.get() {
            return Ok(v);
        }
        let v = zero_shot_score(self.task, self.dev, self.evaluator)?;
        Ok(*self.zero_shot.get_or_init(|| v))
    }

    fn score(&self, demos: &[Demonstration]) -> Result<f64> {
        evaluate_prompt(self.evaluator, self.task, demos, self.dev).map(|o| o.score)
    }

    /// Samples a permutation from `rng` and scores each of its prefixes. No table is touched.
    pub fn evaluate_pass<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<PermutationPass> {
        let zero = self.zero_shot()?;
        let permutation = sample_permutation(self.pool, self.config.k, rng)?;
        let demos = self.pool.resolve(&permutation)?;
        let mut prefix_scores = Vec::with_capacity(demos.len() + 1);
        prefix_scores.push(zero);
        for c in 1..=demos.len() {
            let v = self
                .score(&demos[..c])
                .map_err(|e| e.context(format_args!("prefix of length {c}")))?;
            prefix_scores.push(v);
        }
        Ok(PermutationPass {
            permutation,
            prefix_scores,
        })
    }

    /// One full pass; `table` is only updated when every prefix evaluated successfully.
    pub fn run_pass<R: rand::Rng + ?Sized>(&self, rng: &mut R, table: &mut ValueTable) -> Result<PermutationPass> {
        let pass = self.evaluate_pass(rng)?;
        pass.apply(table, self.config.mu)?;
        Ok(pass)
    }

    fn fresh_table(&self) -> Result<ValueTable> {
        ValueTable::new(self.pool.ids())
    }

    fn meta(&self, passes_completed: usize) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.config.seed,
            passes_completed,
            mu: self.config.mu,
            k: self.config.k,
        }
    }

    fn resume_point(&self) -> Result<(ValueTable, usize)> {
        match &self.checkpoint {
            Some(cp) if cp.exists() => {
                let (table, meta) = cp.load()?;
                if meta.seed != self.config.seed || meta.mu != self.config.mu || meta.k != self.config.k {
                    return Err(Error::Config(format!(
                        "checkpoint {} was written with different seed/mu/K",
                        cp.meta_path().display()
                    )));
                }
                if table.ids().iter().map(String::as_str).ne(self.pool.ids()) {
                    return Err(Error::Config("checkpoint covers a different pool".into()));
                }
                log::info!("resuming from pass {}", meta.passes_completed);
                Ok((table, meta.passes_completed.min(self.config.n_passes)))
            }
            _ => Ok((self.fresh_table()?, 0)),
        }
    }

    /// Runs all `N` passes and returns the value table.
    ///
    /// On a backend failure every pass before the failing one is kept, checkpointed (when a
    /// checkpoint is configured) and the error is returned as [`Error::Partial`].
    pub fn compute_values(&self) -> Result<ValueTable> {
        self.zero_shot()?;
        let (mut table, mut done) = self.resume_point()?;
        let total = self.config.n_passes;
        let batch = match self.config.checkpoint_every {
            0 => total.max(1),
            n => n,
        };
        while done < total {
            let end = (done + batch).min(total);
            let eval = |i: usize| self.evaluate_pass(&mut pass_rng(self.config.seed, i as u64));
            let results: Vec<Result<PermutationPass>> = if self.config.parallel {
                (done..end).into_par_iter().map(eval).collect()
            } else {
                let mut out = Vec::with_capacity(end - done);
                for i in done..end {
                    let r = eval(i);
                    let failed = r.is_err();
                    out.push(r);
                    if failed {
                        break;
                    }
                }
                out
            };
            for result in results {
                match result {
                    Ok(pass) => {
                        pass.apply(&mut table, self.config.mu)?;
                        done += 1;
                    }
                    Err(cause) => {
                        if let Some(cp) = &self.checkpoint {
                            cp.save(&table, &self.meta(done))?;
                        }
                        return Err(Error::Partial {
                            completed: done,
                            requested: total,
                            cause: Box::new(cause),
                        });
                    }
                }
            }
            if let Some(cp) = &self.checkpoint {
                cp.save(&table, &self.meta(done))?;
            }
        }
        Ok(table)
    }
}

/// Convenience wrapper around [`ShapleyEngine::compute_values`].
pub fn compute_values<E: Evaluator + ?Sized>(
    config: &EngineConfig,
    task: &TaskSpec,
    dev: &[LabeledExample],
    pool: &CandidatePool,
    evaluator: &E,
) -> Result<ValueTable> {
    ShapleyEngine::new(config.clone(), task, dev, pool, evaluator)?.compute_values()
}

/// Number of ordered `k`-arrangements of `n` items.
pub fn arrangements(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    ((n - k + 1)..=n).fold(1u128, |acc, x| acc.saturating_mul(x as u128))
}

/// Exact expectation of the sampler: for each demo, the mean marginal contribution over every
/// ordered `k`-arrangement of the pool that contains it.
///
/// Enumerates prefixes depth-first; a prefix of length `c` stands for the
/// `arrangements(n - c, k - c)` full arrangements that extend it. Refuses (rather than samples)
/// when the arrangement count exceeds `budget`.
pub fn exact_values<E: Evaluator + ?Sized>(
    pool: &CandidatePool,
    k: usize,
    task: &TaskSpec,
    dev: &[LabeledExample],
    evaluator: &E,
    budget: u128,
) -> Result<ValueTable> {
    let n = pool.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("K = {k} must satisfy 1 <= K <= pool size {n}")));
    }
    let needed = arrangements(n, k);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    if dev.is_empty() {
        return Err(Error::Config("dev set is empty".into()));
    }
    let zero = zero_shot_score(task, dev, evaluator)?;
    let weights: Vec<f64> = (0..=k).map(|c| arrangements(n - c, k - c) as f64).collect();

    let ctx = ExactCtx {
        pool,
        k,
        task,
        dev,
        evaluator,
        weights: &weights,
    };
    // terms[i] collects weight * marginal for every prefix ending in demo i.
    let per_root: Vec<Result<Vec<Vec<f64>>>> = (0..n)
        .into_par_iter()
        .map(|root| {
            let mut terms = vec![Vec::new(); n];
            let mut used = vec![false; n];
            let mut seq = Vec::with_capacity(k);
            ctx.descend(root, zero, &mut seq, &mut used, &mut terms)?;
            Ok(terms)
        })
        .collect();
    let mut terms = vec![Vec::new(); n];
    for r in per_root {
        for (acc, t) in terms.iter_mut().zip(r?) {
            acc.extend(t);
        }
    }

    let occurrences = k as u128 * arrangements(n - 1, k - 1);
    let mut rows = Vec::with_capacity(n);
    for (i, mut t) in terms.into_iter().enumerate() {
        // summing in sorted order makes the result depend only on the multiset of terms
        t.sort_by(f64::total_cmp);
        let sum: f64 = t.iter().sum();
        rows.push((
            pool.demos()[i].id.clone(),
            crate::table::ValueRecord {
                value: sum / occurrences as f64,
                count: occurrences as u64,
            },
        ));
    }
    ValueTable::from_records(rows)
}

struct ExactCtx<'a, E: ?Sized> {
    pool: &'a CandidatePool,
    k: usize,
    task: &'a TaskSpec,
    dev: &'a [LabeledExample],
    evaluator: &'a E,
    weights: &'a [f64],
}

impl<E: Evaluator + ?Sized> ExactCtx<'_, E> {
    fn descend(
        &self,
        next: usize,
        prev_score: f64,
        seq: &mut Vec<Demonstration>,
        used: &mut [bool],
        terms: &mut [Vec<f64>],
    ) -> Result<()> {
        seq.push(self.pool.demos()[next].clone());
        used[next] = true;
        let score = evaluate_prompt(self.evaluator, self.task, seq, self.dev)?.score;
        let c = seq.len();
        terms[next].push(self.weights[c] * (score - prev_score));
        if c < self.k {
            for j in 0..used.len() {
                if !used[j] {
                    self.descend(j, score, seq, used, terms)?;
                }
            }
        }
        used[next] = false;
        seq.pop();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{SyntheticModel, SyntheticModelSpec};

    fn pool(n: usize) -> CandidatePool {
        CandidatePool::new(
            (1..=n)
                .map(|i| Demonstration::new(format!("d{i}"), format!("x{i}"), "POS"))
                .collect(),
        )
        .unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec::new("Classify:", vec!["POS".into(), "NEG".into()]).unwrap()
    }

    fn dev() -> Vec<LabeledExample> {
        vec![LabeledExample::new("q", "hello", "POS")]
    }

    fn additive(v0: f64, gamma: f64, w: &[f64]) -> SyntheticModel {
        SyntheticModel::new(SyntheticModelSpec::additive(
            v0,
            gamma,
            w.iter().enumerate().map(|(i, &w)| (format!("d{}", i + 1), w)),
        ))
        .unwrap()
    }

    /// Replays a fixed permutation instead of sampling one.
    fn pass_for(engine: &ShapleyEngine<'_, SyntheticModel>, perm: &[&str]) -> PermutationPass {
        let demos = engine.pool.resolve(perm).unwrap();
        let mut scores = vec![engine.zero_shot().unwrap()];
        for c in 1..=demos.len() {
            scores.push(engine.score(&demos[..c]).unwrap());
        }
        PermutationPass {
            permutation: perm.iter().map(|s| s.to_string()).collect(),
            prefix_scores: scores,
        }
    }

    #[test]
    fn zero_shot_returns_base() {
        let (t, d) = (task(), dev());
        assert_eq!(zero_shot_score(&t, &d, &additive(0.5, 1.0, &[0.1])).unwrap(), 0.5);
        assert_eq!(zero_shot_score(&t, &d, &additive(0.9, 1.0, &[])).unwrap(), 0.9);
    }

    #[test]
    fn pass_marginals_and_gate() {
        let (t, d, p) = (task(), dev(), pool(2));
        let m = additive(0.5, 1.0, &[0.1, -0.05]);
        let engine = ShapleyEngine::new(EngineConfig::new(2, 1, 0.0, 0), &t, &d, &p, &m).unwrap();
        let pass = pass_for(&engine, &["d1", "d2"]);
        let expect = [0.5, 0.6, 0.55];
        for (a, b) in pass.prefix_scores.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let v = pass.marginals();
        assert!((v[0] - 0.1).abs() < 1e-12 && (v[1] + 0.05).abs() < 1e-12);

        let mut table = ValueTable::new(p.ids()).unwrap();
        assert_eq!(pass.apply(&mut table, 0.0).unwrap(), 2);

        let mut gated = ValueTable::new(p.ids()).unwrap();
        assert_eq!(pass.apply(&mut gated, 0.08).unwrap(), 1);
        assert_eq!(gated.get("d1").unwrap().count, 1);
        assert_eq!(gated.get("d2").unwrap().count, 0);
        assert_eq!(gated.value("d2").unwrap(), 0.0);
    }

    #[test]
    fn gate_is_inclusive() {
        let (t, d, p) = (task(), dev(), pool(1));
        let m = additive(0.5, 1.0, &[0.25]);
        let engine = ShapleyEngine::new(EngineConfig::new(1, 1, 0.25, 0), &t, &d, &p, &m).unwrap();
        let mut table = ValueTable::new(p.ids()).unwrap();
        engine.run_pass(&mut pass_rng(0, 0), &mut table).unwrap();
        assert_eq!(table.get("d1").unwrap().count, 1);
    }

    #[test]
    fn dummy_demos_under_gate() {
        let (t, d, p) = (task(), dev(), pool(3));
        let m = additive(0.5, 1.0, &[0.0, 0.0, 0.0]);
        let gated = compute_values(&EngineConfig::new(2, 50, 0.01, 1), &t, &d, &p, &m).unwrap();
        assert!(gated.iter().all(|(_, r)| r.count == 0 && r.value == 0.0));
        let open = compute_values(&EngineConfig::new(2, 50, 0.0, 1), &t, &d, &p, &m).unwrap();
        assert!(open.iter().all(|(_, r)| r.value == 0.0));
        assert_eq!(open.iter().map(|(_, r)| r.count).sum::<u64>(), 100);
    }

    #[test]
    fn sample_permutation_contract() {
        let p = pool(5);
        let mut rng = pass_rng(3, 0);
        let mut all = sample_permutation(&p, 5, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec!["d1", "d2", "d3", "d4", "d5"]);

        let a = sample_permutation(&p, 3, &mut pass_rng(9, 0)).unwrap();
        let b = sample_permutation(&p, 3, &mut pass_rng(9, 0)).unwrap();
        assert_eq!(a, b);
        let mut rng = pass_rng(9, 0);
        let first = sample_permutation(&p, 3, &mut rng).unwrap();
        let second = sample_permutation(&p, 3, &mut rng).unwrap();
        assert_eq!(first, a);
        assert_ne!(first, second);

        assert!(matches!(sample_permutation(&p, 6, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let (t, d, p) = (task(), dev(), pool(3));
        let m = additive(0.5, 1.0, &[0.0; 3]);
        for cfg in [
            EngineConfig::new(0, 1, 0.0, 0),
            EngineConfig::new(4, 1, 0.0, 0),
            EngineConfig::new(2, 0, 0.0, 0),
            EngineConfig::new(2, 1, -0.1, 0),
        ] {
            assert!(matches!(compute_values(&cfg, &t, &d, &p, &m), Err(Error::Config(_))));
        }
        assert!(ShapleyEngine::new(EngineConfig::new(1, 1, 0.0, 0), &t, &[], &p, &m).is_err());
    }

    #[test]
    fn single_pass_single_demo_bookkeeping() {
        let (t, d, p) = (task(), dev(), pool(3));
        let m = additive(0.5, 1.0, &[0.1, -0.05, 0.0]);
        let table = compute_values(&EngineConfig::new(1, 1, 0.0, 11), &t, &d, &p, &m).unwrap();
        let counts: Vec<u64> = table.iter().map(|(_, r)| r.count).collect();
        assert_eq!(counts.iter().sum::<u64>(), 1);
        assert_eq!(counts.iter().filter(|&&c| c == 1).count(), 1);
    }

    #[test]
    fn exact_values_small_cases() {
        let (t, d, p) = (task(), dev(), pool(3));
        let flat = exact_values(&p, 2, &t, &d, &additive(0.5, 1.0, &[0.1, -0.05, 0.0]), DEFAULT_EXACT_BUDGET).unwrap();
        let disc = exact_values(&p, 2, &t, &d, &additive(0.5, 0.5, &[0.1, -0.05, 0.0]), DEFAULT_EXACT_BUDGET).unwrap();
        for (table, want) in [(&flat, [0.1, -0.05, 0.0]), (&disc, [0.075, -0.0375, 0.0])] {
            for (i, w) in want.iter().enumerate() {
                let r = table.get(&format!("d{}", i + 1)).unwrap();
                assert!((r.value - w).abs() < 1e-12, "{} vs {w}", r.value);
                assert_eq!(r.count, 4);
            }
        }
        assert_eq!(disc.value("d3").unwrap(), 0.0);
    }

    #[test]
    fn exact_values_refuses_over_budget() {
        let (t, d, p) = (task(), dev(), pool(10));
        let m = additive(0.5, 1.0, &[0.0; 10]);
        let err = exact_values(&p, 5, &t, &d, &m, 1000).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { needed: 30240, budget: 1000 }));
    }

    #[test]
    fn compute_values_converges_on_small_pool() {
        let (t, d, p) = (task(), dev(), pool(3));
        let m = additive(0.5, 0.5, &[0.1, -0.05, 0.0]);
        let table = compute_values(&EngineConfig::new(2, 4000, 0.0, 5), &t, &d, &p, &m).unwrap();
        for (id, want) in [("d1", 0.075), ("d2", -0.0375), ("d3", 0.0)] {
            assert!((table.value(id).unwrap() - want).abs() < 0.005, "{id}");
        }
        // gamma = 1: every marginal equals the weight exactly
        let m = additive(0.5, 1.0, &[0.1, -0.05, 0.0]);
        let table = compute_values(&EngineConfig::new(2, 30, 0.0, 5), &t, &d, &p, &m).unwrap();
        for (id, want) in [("d1", 0.1), ("d2", -0.05), ("d3", 0.0)] {
            assert!((table.value(id).unwrap() - want).abs() < 1e-12, "{id}");
        }
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let (t, d, p) = (task(), dev(), pool(6));
        let m = additive(0.4, 0.8, &[0.05, -0.02, 0.03, 0.0, 0.07, -0.04]);
        let mut cfg = EngineConfig::new(3, 300, 0.0, 21);
        let par = compute_values(&cfg, &t, &d, &p, &m).unwrap();
        cfg.parallel = false;
        cfg.checkpoint_every = 37;
        let seq = compute_values(&cfg, &t, &d, &p, &m).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let (t, d, p) = (task(), dev(), pool(5));
        let m = additive(0.5, 0.9, &[0.05, -0.02, 0.03, 0.0, 0.01]);
        let mut cfg = EngineConfig::new(3, 100, 0.0, 8);
        cfg.checkpoint_every = 10;
        let full = compute_values(&cfg, &t, &d, &p, &m).unwrap();

        let mut half = cfg.clone();
        half.n_passes = 40;
        ShapleyEngine::new(half, &t, &d, &p, &m)
            .unwrap()
            .with_checkpoint(&stem)
            .compute_values()
            .unwrap();
        let (_, meta) = Checkpoint::new(&stem).load().unwrap();
        assert_eq!(meta.passes_completed, 40);

        let resumed = ShapleyEngine::new(cfg.clone(), &t, &d, &p, &m)
            .unwrap()
            .with_checkpoint(&stem)
            .compute_values()
            .unwrap();
        assert_eq!(resumed, full);

        let mut other = cfg;
        other.seed = 9;
        let err = ShapleyEngine::new(other, &t, &d, &p, &m)
            .unwrap()
            .with_checkpoint(&stem)
            .compute_values()
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backend_failure_yields_partial_with_checkpoint() {
        use crate::backends::{Capabilities, EvalOutcome};
        use std::sync::atomic::{AtomicUsize, Ordering};

        struct Flaky {
            inner: SyntheticModel,
            calls: AtomicUsize,
            fail_after: usize,
        }
        impl Evaluator for Flaky {
            fn capabilities(&self) -> Capabilities {
                self.inner.capabilities()
            }
            fn model_id(&self) -> String {
                "flaky".into()
            }
            fn evaluate(&self, t: &TaskSpec, demos: &[Demonstration], d: &[LabeledExample]) -> Result<EvalOutcome> {
                if self.calls.fetch_add(1, Ordering::SeqCst) >= self.fail_after {
                    return Err(Error::Backend("down".into()));
                }
                self.inner.evaluate(t, demos, d)
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let (t, d, p) = (task(), dev(), pool(4));
        let flaky = Flaky {
            inner: additive(0.5, 1.0, &[0.1, 0.2, 0.3, 0.0]),
            calls: AtomicUsize::new(0),
            // zero-shot + 5 full passes of K = 2, then one more prefix
            fail_after: 1 + 5 * 2 + 1,
        };
        let mut cfg = EngineConfig::new(2, 10, 0.0, 0);
        cfg.parallel = false;
        let err = ShapleyEngine::new(cfg, &t, &d, &p, &flaky)
            .unwrap()
            .with_checkpoint(&stem)
            .compute_values()
            .unwrap_err();
        match err {
            Error::Partial { completed, requested, .. } => {
                assert_eq!((completed, requested), (5, 10));
            }
            other => panic!("unexpected {other}"),
        }
        let (table, meta) = Checkpoint::new(&stem).load().unwrap();
        assert_eq!(meta.passes_completed, 5);
        assert_eq!(table.iter().map(|(_, r)| r.count).sum::<u64>(), 10);
    }

    #[test]
    fn arrangement_counts() {
        assert_eq!(arrangements(3, 2), 6);
        assert_eq!(arrangements(8, 4), 1680);
        assert_eq!(arrangements(5, 0), 1);
        assert_eq!(arrangements(2, 3), 0);
    }
}
