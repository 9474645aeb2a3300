use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::AnnotatedDialogue;

/// Corpus statistics over labeled pairs (correctness 0 or 1).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dialogues: usize,
    /// All turn pairs, labeled or not.
    pub turn_pairs: usize,
    pub labels: usize,
    /// Percentage of labeled pairs that are correct.
    pub pct_correct: f64,
    pub unique_kcs: usize,
    pub avg_kcs_per_dialogue: f64,
    pub avg_kcs_per_turn: f64,
    /// Percentage of labeled pairs with more than one KC.
    pub pct_multi_kc: f64,
}

pub fn dataset_statistics(dialogues: &[AnnotatedDialogue]) -> StatsReport {
    let mut report = StatsReport {
        dialogues: dialogues.len(),
        turn_pairs: dialogues.iter().map(|d| d.pairs.len()).sum(),
        ..Default::default()
    };
    let mut correct = 0usize;
    let mut kc_mentions = 0usize;
    let mut multi = 0usize;
    let mut per_dialogue_unique = 0usize;
    let mut all = BTreeSet::new();
    for d in dialogues {
        let mut seen = BTreeSet::new();
        for pair in d.labeled_pairs() {
            report.labels += 1;
            if pair.correctness.label() == Some(1) {
                correct += 1;
            }
            kc_mentions += pair.kcs.len();
            if pair.kcs.len() > 1 {
                multi += 1;
            }
            seen.extend(pair.kcs.iter().cloned());
        }
        per_dialogue_unique += seen.len();
        all.extend(seen);
    }
    report.unique_kcs = all.len();
    if report.labels > 0 {
        let labels = report.labels as f64;
        report.pct_correct = 100.0 * correct as f64 / labels;
        report.avg_kcs_per_turn = kc_mentions as f64 / labels;
        report.pct_multi_kc = 100.0 * multi as f64 / labels;
    }
    if report.dialogues > 0 {
        report.avg_kcs_per_dialogue = per_dialogue_unique as f64 / report.dialogues as f64;
    }
    report
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dialogues            {}", self.dialogues)?;
        writeln!(f, "turn pairs           {}", self.turn_pairs)?;
        writeln!(f, "labels               {}", self.labels)?;
        writeln!(f, "correct              {:.2}%", self.pct_correct)?;
        writeln!(f, "unique KCs           {}", self.unique_kcs)?;
        writeln!(f, "avg KCs / dialogue   {:.2}", self.avg_kcs_per_dialogue)?;
        writeln!(f, "avg KCs / turn       {:.2}", self.avg_kcs_per_turn)?;
        write!(f, "turns with >1 KC     {:.2}%", self.pct_multi_kc)
    }
}
