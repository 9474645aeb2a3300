use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedDialogue;
use crate::error::{read_to_string, write_string, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub assignments: BTreeMap<String, Part>,
}

impl Fold {
    pub fn ids(&self, part: Part) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, p)| **p == part)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Dialogues of `part`, in corpus order.
    pub fn select<'a>(&self, part: Part, dialogues: &'a [AnnotatedDialogue]) -> Vec<&'a AnnotatedDialogue> {
        dialogues
            .iter()
            .filter(|d| self.assignments.get(&d.id) == Some(&part))
            .collect()
    }

    pub fn count(&self, part: Part) -> usize {
        self.assignments.values().filter(|p| **p == part).count()
    }
}

/// Dialogue-level fold assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_count: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_to_string(path)?)?)
    }
}

fn take_validation(train: &mut Vec<String>, val_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    train.shuffle(rng);
    let mut n_val = (val_fraction * train.len() as f64).round() as usize;
    if n_val == 0 && train.len() > 1 {
        n_val = 1;
    }
    n_val = n_val.min(train.len().saturating_sub(1));
    let val = train.split_off(train.len() - n_val);
    train.sort();
    val
}

/// Builds a dialogue-level split plan.
///
/// With `fold_count >= 2` dialogues are shuffled and partitioned into that
/// many test folds (cross-validation). With `fold_count == 1` the published
/// `split` tag (`train`/`test`) in each dialogue's metadata is used. In both
/// cases `val_fraction` of each fold's training dialogues is held out for
/// validation. Only dialogues with at least one labeled pair are assigned.
pub fn make_splits(dialogues: &[AnnotatedDialogue], fold_count: usize, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if fold_count == 0 {
        return Err(Error::invalid("fold_count must be at least 1"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let mut ids: Vec<String> = dialogues.iter().filter(|d| d.has_labels()).map(|d| d.id.clone()).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("dialogue ids must be unique"));
    }
    if ids.len() < fold_count {
        return Err(Error::invalid(format!(
            "{} labeled dialogues cannot fill {} folds",
            ids.len(),
            fold_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let folds = if fold_count == 1 {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for d in dialogues.iter().filter(|d| d.has_labels()) {
            match d.split_tag() {
                Some("train") => train.push(d.id.clone()),
                Some("test") => test.push(d.id.clone()),
                other => {
                    return Err(Error::invalid(format!(
                        "fold_count 1 uses published splits, but dialogue {} has split tag {:?}",
                        d.id, other
                    )))
                }
            }
        }
        train.sort();
        let val = take_validation(&mut train, val_fraction, &mut rng);
        let mut assignments = BTreeMap::new();
        assignments.extend(train.into_iter().map(|id| (id, Part::Train)));
        assignments.extend(val.into_iter().map(|id| (id, Part::Val)));
        assignments.extend(test.into_iter().map(|id| (id, Part::Test)));
        vec![Fold { index: 0, assignments }]
    } else {
        ids.shuffle(&mut rng);
        let n = ids.len();
        let base = n / fold_count;
        let extra = n % fold_count;
        let mut bounds = Vec::with_capacity(fold_count + 1);
        bounds.push(0);
        for f in 0..fold_count {
            let size = base + usize::from(f < extra);
            bounds.push(bounds[f] + size);
        }
        (0..fold_count)
            .map(|f| {
                let test = &ids[bounds[f]..bounds[f + 1]];
                let mut train: Vec<String> = ids[..bounds[f]]
                    .iter()
                    .chain(&ids[bounds[f + 1]..])
                    .cloned()
                    .collect();
                train.sort();
                let mut fold_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1)));
                let val = take_validation(&mut train, val_fraction, &mut fold_rng);
                let mut assignments = BTreeMap::new();
                assignments.extend(train.into_iter().map(|id| (id, Part::Train)));
                assignments.extend(val.into_iter().map(|id| (id, Part::Val)));
                assignments.extend(test.iter().cloned().map(|id| (id, Part::Test)));
                Fold { index: f, assignments }
            })
            .collect()
    };
    Ok(SplitPlan {
        fold_count,
        val_fraction,
        seed,
        folds,
    })
}
