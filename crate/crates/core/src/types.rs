//! Shared domain types and deterministic prompt assembly.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One candidate input/label pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub input: String,
    pub label: String,
}

impl Demonstration {
    pub fn new(id: impl Into<String>, input: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            label: label.into(),
        }
    }
}

/// A labeled dev/test example. `sensitive` carries the binary group attribute for fairness runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub input: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive: Option<u8>,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, input: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            label: label.into(),
            sensitive: None,
        }
    }

    pub fn with_sensitive(mut self, a: u8) -> Self {
        self.sensitive = Some(a);
        self
    }

    pub fn as_demonstration(&self) -> Demonstration {
        Demonstration::new(self.id.clone(), self.input.clone(), self.label.clone())
    }
}

impl From<&Demonstration> for LabeledExample {
    fn from(d: &Demonstration) -> Self {
        LabeledExample::new(d.id.clone(), d.input.clone(), d.label.clone())
    }
}

pub const DEFAULT_DEMO_TEMPLATE: &str = "Input: {input}\nLabel: {label}\n";
pub const DEFAULT_QUERY_TEMPLATE: &str = "Input: {input}\nLabel:";

/// Per-task prompt configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub instruction: String,
    pub label_set: Vec<String>,
    #[serde(default = "default_demo_template")]
    pub demo_template: String,
    #[serde(default = "default_query_template")]
    pub query_template: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_demo_template() -> String {
    DEFAULT_DEMO_TEMPLATE.to_string()
}

fn default_query_template() -> String {
    DEFAULT_QUERY_TEMPLATE.to_string()
}

fn default_separator() -> String {
    "\n".to_string()
}

impl TaskSpec {
    /// A task using the default `Input:`/`Label:` templates.
    pub fn new(instruction: impl Into<String>, label_set: Vec<String>) -> Result<Self> {
        let task = Self {
            instruction: instruction.into(),
            label_set,
            demo_template: default_demo_template(),
            query_template: default_query_template(),
            separator: default_separator(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        check_placeholders("demo_template", &self.demo_template, &["input", "label"])?;
        check_placeholders("query_template", &self.query_template, &["input"])?;
        if self.label_set.is_empty() {
            return Err(Error::Config("label_set is empty".into()));
        }
        let mut seen = HashSet::new();
        for label in &self.label_set {
            let norm = normalize_label(label);
            if norm.is_empty() {
                return Err(Error::Config("label_set contains an empty label".into()));
            }
            if !seen.insert(norm) {
                return Err(Error::Config(format!(
                    "label `{label}` is not distinct after normalization"
                )));
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.label_set.len() == 2
    }

    /// Index of `label` in the label set, compared after normalization.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        let norm = normalize_label(label);
        self.label_set.iter().position(|l| normalize_label(l) == norm)
    }

    pub fn render_demo(&self, demo: &Demonstration) -> String {
        substitute(
            &self.demo_template,
            &[("input", &demo.input), ("label", &demo.label)],
        )
    }

    pub fn render_query(&self, input: &str) -> String {
        substitute(&self.query_template, &[("input", input)])
    }
}

/// A complete prompt: instruction, ordered demonstrations (possibly none) and one query.
#[derive(Debug, Clone, Copy)]
pub struct PromptSpec<'a> {
    pub task: &'a TaskSpec,
    pub demos: &'a [Demonstration],
    pub query: &'a str,
}

/// Renders `instruction, demo_1, .., demo_k, query` joined by the task separator.
pub fn assemble_prompt(spec: &PromptSpec<'_>) -> Result<String> {
    spec.task.validate()?;
    let task = spec.task;
    let mut parts = Vec::with_capacity(spec.demos.len() + 2);
    parts.push(task.instruction.clone());
    parts.extend(spec.demos.iter().map(|d| task.render_demo(d)));
    parts.push(task.render_query(spec.query));
    Ok(parts.join(&task.separator))
}

/// Trim + case-fold.
pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Maps raw model output onto the label set. The first verbalizer (in label-set order) that the
/// normalized output equals, or starts with at a word boundary, wins.
pub fn match_label(output: &str, label_set: &[String]) -> Option<usize> {
    let out = normalize_label(output);
    let out = out.trim_start_matches(|c: char| !c.is_alphanumeric());
    label_set.iter().position(|label| {
        let l = normalize_label(label);
        match out.strip_prefix(l.as_str()) {
            Some(rest) => rest.chars().next().is_none_or(|c| !c.is_alphanumeric()),
            None => false,
        }
    })
}

/// Deterministic digest over (prompt, model, decode params) used as the evaluation cache key.
pub fn canonical_key(prompt_text: &str, model_id: &str, decode_params: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"demoval-cache-v1");
    for field in [prompt_text, model_id, decode_params] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ordered candidate demonstrations with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    demos: Vec<Demonstration>,
    index: HashMap<String, usize>,
}

impl CandidatePool {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self> {
        let mut index = HashMap::with_capacity(demos.len());
        for (i, d) in demos.iter().enumerate() {
            if index.insert(d.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate demonstration id `{}`", d.id)));
            }
        }
        Ok(Self { demos, index })
    }

    /// Like [`CandidatePool::new`] but also checks every label against the task.
    pub fn for_task(demos: Vec<Demonstration>, task: &TaskSpec) -> Result<Self> {
        for d in &demos {
            if task.label_index(&d.label).is_none() {
                return Err(Error::Config(format!(
                    "demonstration `{}` has label `{}` outside the label set",
                    d.id, d.label
                )));
            }
        }
        Self::new(demos)
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.demos.iter().map(|d| d.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.index.get(id).map(|&i| &self.demos[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Resolves ids to demonstrations, preserving order.
    pub fn resolve<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<Demonstration>> {
        ids.iter()
            .map(|id| {
                self.get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| Error::UnknownId(id.as_ref().to_string()))
            })
            .collect()
    }

    pub fn into_demos(self) -> Vec<Demonstration> {
        self.demos
    }
}

fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

fn check_placeholders(which: &str, template: &str, expected: &[&str]) -> Result<()> {
    let found = placeholders(template);
    for name in expected {
        let n = found.iter().filter(|f| *f == name).count();
        if n != 1 {
            return Err(Error::Template(format!(
                "{which} must contain {{{name}}} exactly once (found {n})"
            )));
        }
    }
    if let Some(extra) = found.iter().find(|f| !expected.contains(f)) {
        return Err(Error::Template(format!(
            "{which} contains undeclared placeholder {{{extra}}}"
        )));
    }
    Ok(())
}

// Single left-to-right pass so substituted text is never re-scanned.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
