//! Experiment protocols (add/remove curves, fairness, out-of-distribution) and result export.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{evaluate_prompt, Evaluator};
use crate::baselines::random_select;
use crate::error::{Error, Result};
use crate::fairness::{
    base_rate_parity, construct_parity_split, demographic_parity_difference, equalized_odds, BinaryPredictions,
    FairnessReport, PredictionRow, SensitiveDataset,
};
use crate::table::{ScoreTable, ValueTable};
use crate::types::{normalize_label, sha256_hex, CandidatePool, Demonstration, LabeledExample, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    High,
    Low,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Direction::High),
            "low" => Ok(Direction::Low),
            other => Err(Error::Config(format!("direction must be `high` or `low`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::High => "high",
            Direction::Low => "low",
        })
    }
}

/// Anything that assigns (possibly undefined) scores to demo ids.
pub trait DemoScores {
    fn scored_ids(&self) -> Vec<(String, Option<f64>)>;
}

impl DemoScores for ValueTable {
    fn scored_ids(&self) -> Vec<(String, Option<f64>)> {
        self.iter().map(|(id, r)| (id.to_string(), Some(r.value))).collect()
    }
}

impl DemoScores for ScoreTable {
    fn scored_ids(&self) -> Vec<(String, Option<f64>)> {
        self.rows.iter().map(|(id, s)| (id.clone(), s.value)).collect()
    }
}

/// All ids ordered by score: descending for `High`, ascending for `Low`, ties by id.
/// Undefined scores sit in the middle of the ranking, favoured by neither direction.
pub fn rank<S: DemoScores + ?Sized>(values: &S, direction: Direction) -> Vec<String> {
    let mut defined = Vec::new();
    let mut undefined = Vec::new();
    for (id, v) in values.scored_ids() {
        match v {
            Some(v) => defined.push((id, v)),
            None => undefined.push(id),
        }
    }
    defined.sort_by(|a, b| {
        let by_value = match direction {
            Direction::High => b.1.total_cmp(&a.1),
            Direction::Low => a.1.total_cmp(&b.1),
        };
        by_value.then_with(|| a.0.cmp(&b.0))
    });
    undefined.sort();
    let mut ids: Vec<String> = defined.into_iter().map(|(id, _)| id).collect();
    let mid = ids.len() / 2;
    ids.splice(mid..mid, undefined);
    ids
}

/// The first `k` ids of [`rank`], in rank order (most valuable first for `High`).
pub fn select<S: DemoScores + ?Sized>(values: &S, direction: Direction, k: usize) -> Result<Vec<String>> {
    let ranked = rank(values, direction);
    if k > ranked.len() {
        return Err(Error::Config(format!("cannot select {k} demos from {} scored", ranked.len())));
    }
    Ok(ranked.into_iter().take(k).collect())
}

/// Accuracy after each step of an add or remove experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub direction: Direction,
    /// Point `i` is the score after `i` steps.
    pub points: Vec<f64>,
    /// Demo added or removed at each step, in order.
    pub steps: Vec<String>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Curve {
    fn new(direction: Direction) -> Self {
        Self {
            direction,
            points: Vec::new(),
            steps: Vec::new(),
            truncated: false,
            error: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().copied()
    }

    /// Records a point, or marks the curve truncated on a backend failure.
    fn push(&mut self, score: Result<f64>) -> Result<bool> {
        match score {
            Ok(v) => {
                self.points.push(v);
                Ok(true)
            }
            Err(e @ (Error::Backend(_) | Error::Protocol(_) | Error::Partial { .. })) => {
                log::warn!("curve truncated after {} points: {e}", self.points.len());
                self.truncated = true;
                self.error = Some(e.to_string());
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "accuracy"])?;
        for (i, v) in self.points.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<curve>", e))?;
        Ok(())
    }
}

fn score<E: Evaluator + ?Sized>(evaluator: &E, task: &TaskSpec, demos: &[Demonstration], dev: &[LabeledExample]) -> Result<f64> {
    evaluate_prompt(evaluator, task, demos, dev).map(|o| o.score)
}

fn check_covered<S: DemoScores + ?Sized>(values: &S, pool: &CandidatePool) -> Result<()> {
    let scored = values.scored_ids();
    if let Some((id, _)) = scored.iter().find(|(id, _)| pool.get(id).is_none()) {
        return Err(Error::UnknownId(id.clone()));
    }
    if scored.len() != pool.len() {
        return Err(Error::Config(format!(
            "values cover {} of {} pool demos",
            scored.len(),
            pool.len()
        )));
    }
    Ok(())
}

/// Starts from the zero-shot prompt and appends demos one at a time in rank order.
/// The curve has `max_k + 1` points unless a backend failure truncates it.
pub fn run_add_experiment<S, E>(
    values: &S,
    direction: Direction,
    max_k: usize,
    pool: &CandidatePool,
    task: &TaskSpec,
    dev: &[LabeledExample],
    evaluator: &E,
) -> Result<Curve>
where
    S: DemoScores + ?Sized,
    E: Evaluator + ?Sized,
{
    check_covered(values, pool)?;
    let order = select(values, direction, max_k)?;
    let mut curve = Curve::new(direction);
    let mut prompt: Vec<Demonstration> = Vec::with_capacity(max_k);
    if !curve.push(score(evaluator, task, &prompt, dev))? {
        return Ok(curve);
    }
    for id in order {
        prompt.push(pool.get(&id).expect("covered").clone());
        if !curve.push(score(evaluator, task, &prompt, dev))? {
            break;
        }
        curve.steps.push(id);
    }
    Ok(curve)
}

/// Starts from `base_prompt` and removes one demo per step (highest value first for `High`,
/// lowest first for `Low`) until `keep` remain. Remaining demos keep their relative order.
#[allow(clippy::too_many_arguments)]
pub fn run_remove_experiment<S, E>(
    values: &S,
    base_prompt: &[String],
    direction: Direction,
    keep: usize,
    pool: &CandidatePool,
    task: &TaskSpec,
    dev: &[LabeledExample],
    evaluator: &E,
) -> Result<Curve>
where
    S: DemoScores + ?Sized,
    E: Evaluator + ?Sized,
{
    if keep > base_prompt.len() {
        return Err(Error::Config(format!(
            "cannot keep {keep} of a {}-demo base prompt",
            base_prompt.len()
        )));
    }
    let scored: BTreeMap<String, Option<f64>> = values.scored_ids().into_iter().collect();
    for id in base_prompt {
        match scored.get(id) {
            None => return Err(Error::UnknownId(id.clone())),
            Some(None) => return Err(Error::Undefined(format!("base prompt demo `{id}` has no score"))),
            Some(Some(_)) => {}
        }
    }
    let base_scores = ScoreTable {
        rows: base_prompt
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    crate::table::Score {
                        value: scored[id],
                        count: 1,
                    },
                )
            })
            .collect(),
    };
    let removal = select(&base_scores, direction, base_prompt.len() - keep)?;

    let mut current: Vec<Demonstration> = pool.resolve(base_prompt)?;
    let mut curve = Curve::new(direction);
    if !curve.push(score(evaluator, task, &current, dev))? {
        return Ok(curve);
    }
    for id in removal {
        current.retain(|d| d.id != id);
        if !curve.push(score(evaluator, task, &current, dev))? {
            break;
        }
        curve.steps.push(id);
    }
    Ok(curve)
}

/// The 10-demo (or `size`-demo) random base prompt of the remove experiment.
pub fn random_base_prompt(pool: &CandidatePool, size: usize, seed: u64) -> Result<Vec<String>> {
    random_select(pool, size, seed)
}

/// Evaluates `demos` on a binary sensitive test set and computes accuracy and group-fairness metrics.
/// Outputs matching no label count as negative predictions and as refusals; failed examples
/// are left out of the metrics.
pub fn fairness_report<E: Evaluator + ?Sized>(
    task: &TaskSpec,
    demos: &[Demonstration],
    test: &SensitiveDataset,
    evaluator: &E,
    bpc: f64,
    bpt: f64,
) -> Result<FairnessReport> {
    let positive = task.label_index(&test.positive_label).ok_or_else(|| {
        Error::Config(format!(
            "positive label `{}` is not in the task label set",
            test.positive_label
        ))
    })?;
    if !task.is_binary() {
        return Err(Error::Config("fairness metrics need a binary task".into()));
    }
    let outcome = evaluate_prompt(evaluator, task, demos, &test.examples)?;
    if outcome.records.len() != test.len() {
        return Err(Error::Config(format!(
            "backend `{}` does not report per-example predictions",
            evaluator.model_id()
        )));
    }
    let mut rows = Vec::with_capacity(test.len());
    let mut refusals = 0;
    let mut errors = Vec::new();
    for (record, example) in outcome.records.iter().zip(&test.examples) {
        if record.example_id != example.id {
            return Err(Error::Protocol(format!(
                "prediction for `{}` returned in place of `{}`",
                record.example_id, example.id
            )));
        }
        if record.error.is_some() {
            continue;
        }
        if record.predicted.is_none() {
            refusals += 1;
        }
        rows.push(PredictionRow {
            y_true: test.y(example),
            y_pred: (record.predicted == Some(positive)) as u8,
            a: example.sensitive.unwrap_or(0),
        });
    }
    if outcome.failures > 0 {
        errors.push(format!("{} test examples failed and were excluded", outcome.failures));
    }
    let preds = BinaryPredictions::new(rows)?;
    let m_dpd = match demographic_parity_difference(&preds) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };
    let m_eod = match equalized_odds(&preds) {
        Ok(v) => Some(v.m_eod),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };
    Ok(FairnessReport {
        acc: outcome.score,
        m_dpd,
        m_eod,
        bpc,
        bpt,
        shots: demos.len(),
        refusals,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessSetup {
    pub bpc: Vec<f64>,
    pub bpt: f64,
    pub shots: Vec<usize>,
    pub context_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for FairnessSetup {
    fn default() -> Self {
        Self {
            bpc: vec![0.0, 0.5, 1.0],
            bpt: 0.0,
            shots: vec![16, 32],
            context_size: 64,
            test_size: 200,
            seed: 0,
        }
    }
}

/// For each context parity, builds a parity-controlled context pool, values it with `value_fn`,
/// prompts with the top `shots` demos and evaluates on one test split of parity `bpt`.
pub fn run_fairness_experiment<E, V>(
    setup: &FairnessSetup,
    task: &TaskSpec,
    context_source: &SensitiveDataset,
    test_source: &SensitiveDataset,
    evaluator: &E,
    mut value_fn: V,
) -> Result<Vec<FairnessReport>>
where
    E: Evaluator + ?Sized,
    V: FnMut(&CandidatePool) -> Result<ValueTable>,
{
    if let Some(&s) = setup.shots.iter().find(|&&s| s > setup.context_size) {
        return Err(Error::Config(format!(
            "{s} shots exceed the context pool size {}",
            setup.context_size
        )));
    }
    let test = construct_parity_split(test_source, setup.test_size, setup.bpt, setup.seed.wrapping_add(1))?;
    let mut reports = Vec::new();
    for &bpc in &setup.bpc {
        let context = construct_parity_split(context_source, setup.context_size, bpc, setup.seed)?;
        log::info!("context pool for bpc={bpc} has measured parity {:.3}", base_rate_parity(&context)?);
        let pool = CandidatePool::for_task(context.examples.iter().map(LabeledExample::as_demonstration).collect(), task)?;
        let values = value_fn(&pool)?;
        check_covered(&values, &pool)?;
        for &shots in &setup.shots {
            let ids = select(&values, Direction::High, shots)?;
            let demos = pool.resolve(&ids)?;
            reports.push(fairness_report(task, &demos, &test, evaluator, bpc, setup.bpt)?);
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub k: usize,
    pub accuracy: f64,
    /// Accuracy of `k` uniformly drawn demos, for reference.
    pub random_accuracy: f64,
    pub demo_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub rows: Vec<OodRow>,
}

/// Prompts with the top-`k` source-valued demos and measures accuracy on an out-of-distribution set.
#[allow(clippy::too_many_arguments)]
pub fn run_ood_experiment<S, E>(
    values: &S,
    k_list: &[usize],
    pool: &CandidatePool,
    task: &TaskSpec,
    ood_test: &[LabeledExample],
    evaluator: &E,
    seed: u64,
) -> Result<OodReport>
where
    S: DemoScores + ?Sized,
    E: Evaluator + ?Sized,
{
    check_covered(values, pool)?;
    if let Some(e) = ood_test.iter().find(|e| task.label_index(&e.label).is_none()) {
        return Err(Error::Config(format!(
            "OOD example `{}` has label `{}` outside the task label set",
            e.id, e.label
        )));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let ids = select(values, Direction::High, k)?;
        let accuracy = score(evaluator, task, &pool.resolve(&ids)?, ood_test)?;
        let random = random_select(pool, k, seed)?;
        let random_accuracy = score(evaluator, task, &pool.resolve(&random)?, ood_test)?;
        rows.push(OodRow {
            k,
            accuracy,
            random_accuracy,
            demo_ids: ids,
        });
    }
    Ok(OodReport { rows })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".demoval.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    pub sha256: String,
    pub config_hash: String,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the configuration of the most recent run.
    pub config_hash: String,
    /// True when any listed artifact is partial.
    pub partial: bool,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })
    }
}

/// Writes run artifacts into an output directory and keeps its manifest current.
pub struct Exporter {
    dir: PathBuf,
    config_hash: String,
    entries: Vec<ManifestEntry>,
    partial: bool,
    _lock: RunLock,
}

impl Exporter {
    pub fn open(dir: impl Into<PathBuf>, config_hash: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        let lock = RunLock::acquire(&dir)?;
        Ok(Self {
            dir,
            config_hash: config_hash.into(),
            entries: Vec::new(),
            partial: false,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Flags every artifact written from now on as partial.
    pub fn mark_partial(&mut self) {
        self.partial = true;
    }

    /// Whether anything written by this exporter is partial.
    pub fn is_partial(&self) -> bool {
        self.partial
    }

    fn write_bytes(&mut self, name: &str, kind: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        File::create(&tmp)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            kind: kind.to_string(),
            sha256: sha256_hex(bytes),
            config_hash: self.config_hash.clone(),
            partial: self.partial,
        });
        Ok(path)
    }

    pub fn write_curve(&mut self, name: &str, curve: &Curve) -> Result<PathBuf> {
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        if curve.truncated {
            self.partial = true;
        }
        self.write_bytes(name, "curve", &buf)
    }

    pub fn write_values(&mut self, name: &str, values: &ValueTable) -> Result<PathBuf> {
        let mut buf = Vec::new();
        values.write_csv(&mut buf)?;
        self.write_bytes(name, "values", &buf)
    }

    pub fn write_scores(&mut self, name: &str, scores: &ScoreTable) -> Result<PathBuf> {
        let mut buf = Vec::new();
        scores.write_csv(&mut buf)?;
        self.write_bytes(name, "scores", &buf)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, kind: &str, value: &T) -> Result<PathBuf> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.write_bytes(name, kind, &buf)
    }

    pub fn write_text(&mut self, name: &str, kind: &str, text: &str) -> Result<PathBuf> {
        self.write_bytes(name, kind, text.as_bytes())
    }

    /// Lists a file written by other code (e.g. an engine checkpoint) in the manifest.
    pub fn register(&mut self, name: &str, kind: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            kind: kind.to_string(),
            sha256: sha256_hex(&bytes),
            config_hash: self.config_hash.clone(),
            partial: self.partial,
        });
        Ok(())
    }

    /// Merges this run's entries into `manifest.json` and returns the result.
    pub fn finish(mut self) -> Result<Manifest> {
        let mut manifest = Manifest::load(&self.dir)?.unwrap_or_default();
        for entry in self.entries.drain(..) {
            manifest.files.retain(|e| e.path != entry.path);
            manifest.files.push(entry);
        }
        manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.config_hash = self.config_hash.clone();
        manifest.partial = manifest.files.iter().any(|e| e.partial);
        let mut buf = serde_json::to_vec_pretty(&manifest)?;
        buf.push(b'\n');
        let path = self.dir.join(Manifest::FILE);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// One named output of a run.
#[derive(Debug, Clone)]
pub enum Artifact {
    Curve(Curve),
    Values(ValueTable),
    Scores(ScoreTable),
    Report(serde_json::Value),
}

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub items: Vec<(String, Artifact)>,
    pub partial: bool,
}

/// Writes curves as CSV, value and score tables as CSV, reports as JSON, and the manifest.
pub fn export_results(artifacts: &RunArtifacts, out_dir: &Path, config_hash: &str) -> Result<Manifest> {
    let mut ex = Exporter::open(out_dir, config_hash)?;
    if artifacts.partial {
        ex.mark_partial();
    }
    for (name, artifact) in &artifacts.items {
        match artifact {
            Artifact::Curve(c) => ex.write_curve(&format!("{name}.csv"), c)?,
            Artifact::Values(v) => ex.write_values(&format!("{name}.csv"), v)?,
            Artifact::Scores(s) => ex.write_scores(&format!("{name}.csv"), s)?,
            Artifact::Report(r) => ex.write_json(&format!("{name}.json"), "report", r)?,
        };
    }
    ex.finish()
}

/// Hash identifying a run configuration: sha256 of its canonical JSON.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

/// Ids whose label matches none of `labels`.
pub fn label_mismatches<'a>(examples: &'a [LabeledExample], labels: &[String]) -> Vec<&'a str> {
    let set: Vec<String> = labels.iter().map(|l| normalize_label(l)).collect();
    examples
        .iter()
        .filter(|e| !set.contains(&normalize_label(&e.label)))
        .map(|e| e.id.as_str())
        .collect()
}
