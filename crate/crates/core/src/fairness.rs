//! Group-fairness metrics and parity-controlled dataset construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_label, LabeledExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub y_true: u8,
    pub y_pred: u8,
    pub a: u8,
}

/// Binary labels, binary predictions and the binary sensitive attribute, per example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BinaryPredictions {
    rows: Vec<PredictionRow>,
}

impl BinaryPredictions {
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.y_true > 1 || r.y_pred > 1 || r.a > 1) {
            return Err(Error::Config(format!("non-binary prediction row {r:?}")));
        }
        Ok(Self { rows })
    }

    pub fn from_columns(y_true: &[u8], y_pred: &[u8], a: &[u8]) -> Result<Self> {
        if y_true.len() != y_pred.len() || y_true.len() != a.len() {
            return Err(Error::Config("prediction columns differ in length".into()));
        }
        Self::new(
            y_true
                .iter()
                .zip(y_pred)
                .zip(a)
                .map(|((&y_true, &y_pred), &a)| PredictionRow { y_true, y_pred, a })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn accuracy(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().filter(|r| r.y_true == r.y_pred).count() as f64 / self.rows.len() as f64)
    }

    /// P(f = 1 | rows matching `keep`), or an error naming `cell` when none match.
    fn positive_rate(&self, cell: &str, keep: impl Fn(&PredictionRow) -> bool) -> Result<f64> {
        let (pos, n) = self
            .rows
            .iter()
            .filter(|r| keep(r))
            .fold((0usize, 0usize), |(p, n), r| (p + r.y_pred as usize, n + 1));
        if n == 0 {
            return Err(Error::Undefined(format!("no examples with {cell}")));
        }
        Ok(pos as f64 / n as f64)
    }
}

/// Binary view of a dataset carrying the sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitiveDataset {
    pub positive_label: String,
    pub examples: Vec<LabeledExample>,
}

impl SensitiveDataset {
    pub fn new(positive_label: impl Into<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        for e in &examples {
            match e.sensitive {
                Some(0) | Some(1) => {}
                Some(v) => {
                    return Err(Error::Config(format!(
                        "example `{}` has non-binary sensitive attribute {v}",
                        e.id
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "example `{}` lacks the sensitive attribute",
                        e.id
                    )))
                }
            }
        }
        Ok(Self {
            positive_label: positive_label.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn y(&self, e: &LabeledExample) -> u8 {
        (normalize_label(&e.label) == normalize_label(&self.positive_label)) as u8
    }

    fn a(e: &LabeledExample) -> u8 {
        e.sensitive.unwrap_or(0)
    }

    /// Counts per (Y, A) cell, indexed `[y][a]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        let mut c = [[0; 2]; 2];
        for e in &self.examples {
            c[self.y(e) as usize][Self::a(e) as usize] += 1;
        }
        c
    }
}

/// `P(Y = 1 | A = 1) - P(Y = 1 | A = 0)`.
pub fn base_rate_parity(dataset: &SensitiveDataset) -> Result<f64> {
    let c = dataset.cell_counts();
    let rate = |a: usize| -> Result<f64> {
        let n = c[0][a] + c[1][a];
        if n == 0 {
            return Err(Error::Undefined(format!("sensitive group A={a} is empty")));
        }
        Ok(c[1][a] as f64 / n as f64)
    };
    Ok(rate(1)? - rate(0)?)
}

/// `|P(f = 1 | A = 1) - P(f = 1 | A = 0)|`.
pub fn demographic_parity_difference(preds: &BinaryPredictions) -> Result<f64> {
    let r1 = preds.positive_rate("A=1", |r| r.a == 1)?;
    let r0 = preds.positive_rate("A=0", |r| r.a == 0)?;
    Ok((r1 - r0).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualizedOdds {
    pub m_tp: f64,
    pub m_fp: f64,
    pub m_eod: f64,
}

/// True-positive and false-positive rate gaps between groups, and their maximum.
pub fn equalized_odds(preds: &BinaryPredictions) -> Result<EqualizedOdds> {
    let rate = |y: u8, a: u8| {
        preds.positive_rate(&format!("Y={y}, A={a}"), move |r| r.y_true == y && r.a == a)
    };
    let m_tp = (rate(1, 0)? - rate(1, 1)?).abs();
    let m_fp = (rate(0, 0)? - rate(0, 1)?).abs();
    Ok(EqualizedOdds {
        m_tp,
        m_fp,
        m_eod: m_tp.max(m_fp),
    })
}

pub fn equalized_odds_difference(preds: &BinaryPredictions) -> Result<f64> {
    equalized_odds(preds).map(|e| e.m_eod)
}

/// Per-group positive counts realizing base-rate parity `target_b` with `size / 2` examples
/// per group: `P(Y=1|A=1) = (1+b)/2`, `P(Y=1|A=0) = (1-b)/2`, rounded to whole examples.
/// Returned as `[y][a]` cell counts.
pub fn parity_cell_targets(size: usize, target_b: f64) -> Result<[[usize; 2]; 2]> {
    if size < 2 || !size.is_multiple_of(2) {
        return Err(Error::Config(format!("split size {size} must be even and >= 2")));
    }
    if !(-1.0..=1.0).contains(&target_b) {
        return Err(Error::Config(format!("target base rate parity {target_b} outside [-1, 1]")));
    }
    let half = size / 2;
    let pos1 = ((half as f64) * (1.0 + target_b) / 2.0).round() as usize;
    let pos0 = ((half as f64) * (1.0 - target_b) / 2.0).round() as usize;
    Ok([[half - pos0, half - pos1], [pos0, pos1]])
}

/// Samples a dataset with equal group sizes and the requested base-rate parity.
pub fn construct_parity_split(source: &SensitiveDataset, size: usize, target_b: f64, seed: u64) -> Result<SensitiveDataset> {
    let targets = parity_cell_targets(size, target_b)?;
    let mut cells: [[Vec<&LabeledExample>; 2]; 2] = Default::default();
    for e in &source.examples {
        cells[source.y(e) as usize][SensitiveDataset::a(e) as usize].push(e);
    }
    let mut shortages = Vec::new();
    for y in 0..2 {
        for a in 0..2 {
            if cells[y][a].len() < targets[y][a] {
                shortages.push(format!(
                    "(Y={y}, A={a}) needs {} but has {}",
                    targets[y][a],
                    cells[y][a].len()
                ));
            }
        }
    }
    if !shortages.is_empty() {
        return Err(Error::Shortage(shortages.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for y in 0..2 {
        for a in 0..2 {
            let cell = &mut cells[y][a];
            let (chosen, _) = cell.partial_shuffle(&mut rng, targets[y][a]);
            out.extend(chosen.iter().map(|e| (*e).clone()));
        }
    }
    out.shuffle(&mut rng);
    SensitiveDataset::new(source.positive_label.clone(), out)
}

/// One cell of the fairness experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub acc: f64,
    pub m_dpd: Option<f64>,
    pub m_eod: Option<f64>,
    pub bpc: f64,
    pub bpt: f64,
    pub shots: usize,
    pub refusals: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}
