//! Label-noise injection and rank-based detection reports.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::ValueTable;
use crate::types::{normalize_label, Demonstration};

/// Flips exactly `round(rate * n)` labels. Binary tasks flip to the other label; multi-class
/// tasks pick uniformly among the other labels. Returns the noisy pool and the flipped ids.
pub fn inject_label_noise(
    pool: &[Demonstration],
    label_set: &[String],
    rate: f64,
    seed: u64,
) -> Result<(Vec<Demonstration>, BTreeSet<String>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate {rate} outside [0, 1]")));
    }
    if label_set.len() < 2 {
        return Err(Error::Config("label noise needs at least two labels".into()));
    }
    let n_flip = (rate * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let (chosen, _) = order.partial_shuffle(&mut rng, n_flip);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();

    let mut noisy = pool.to_vec();
    let mut flipped = BTreeSet::new();
    for i in chosen {
        let current = normalize_label(&noisy[i].label);
        let others: Vec<&String> = label_set
            .iter()
            .filter(|l| normalize_label(l) != current)
            .collect();
        if others.len() == label_set.len() {
            return Err(Error::Config(format!(
                "demonstration `{}` has label `{}` outside the label set",
                noisy[i].id, noisy[i].label
            )));
        }
        let new_label = others.choose(&mut rng).expect("at least one other label");
        noisy[i].label = (*new_label).clone();
        flipped.insert(noisy[i].id.clone());
    }
    Ok((noisy, flipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Number of flipped ids among the `k` lowest-valued demos, per cutoff `k`.
    pub cutoffs: BTreeMap<usize, usize>,
    /// Mean 1-based ascending-value rank of the flipped ids; `None` when nothing was flipped.
    pub average_rank: Option<f64>,
    pub n: usize,
    pub n_flipped: usize,
}

/// Ranks demos by ascending value (ties broken by id) and reports where the flipped ones land.
pub fn detection_report(values: &ValueTable, flipped: &BTreeSet<String>, cutoffs: &[usize]) -> Result<DetectionReport> {
    if let Some(id) = flipped.iter().find(|id| !values.contains(id)) {
        return Err(Error::UnknownId(id.clone()));
    }
    let mut ranked: Vec<(&str, f64)> = values.iter().map(|(id, r)| (id, r.value)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let flipped_ranks: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, (id, _))| flipped.contains(*id))
        .map(|(i, _)| i + 1)
        .collect();
    let cutoffs = cutoffs
        .iter()
        .map(|&k| (k, flipped_ranks.iter().filter(|&&r| r <= k).count()))
        .collect();
    let average_rank = if flipped_ranks.is_empty() {
        None
    } else {
        Some(flipped_ranks.iter().sum::<usize>() as f64 / flipped_ranks.len() as f64)
    };
    Ok(DetectionReport {
        cutoffs,
        average_rank,
        n: ranked.len(),
        n_flipped: flipped_ranks.len(),
    })
}
