//! Synthetic tutoring dialogues whose correctness labels come from a
//! planted BKT student.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bkt::KcParams;
use crate::corpus::{AnnotatedDialogue, Correctness, TurnPair};
use crate::error::{Error, Result};

const SKILLS: [(&str, &str, &str); 6] = [
    ("3.OA.C.7", "Fluently multiply and divide within 100", "times"),
    ("4.NF.B.3", "Understand addition and subtraction of fractions with like denominators", "plus"),
    ("6.EE.A.2", "Write, read, and evaluate expressions in which letters stand for numbers", "for x equal to"),
    ("7.RP.A.2", "Recognize and represent proportional relationships between quantities", "per"),
    ("8.G.B.7", "Apply the Pythagorean Theorem to determine unknown side lengths in right triangles", "squared and added to"),
    ("5.NBT.B.7", "Add, subtract, multiply, and divide decimals to hundredths", "with decimals and"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dialogues: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    /// Distinct KCs practised in each dialogue.
    pub kcs_per_dialogue: usize,
    /// Chance that a pair exercises two KCs at once.
    pub multi_kc_rate: f64,
    /// Chance of an unlabeled small-talk pair.
    pub na_rate: f64,
    pub params: KcParams,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dialogues: 40,
            min_pairs: 8,
            max_pairs: 14,
            kcs_per_dialogue: 3,
            multi_kc_rate: 0.25,
            na_rate: 0.1,
            params: KcParams {
                init: 0.3,
                learn: 0.2,
                slip: 0.1,
                guess: 0.15,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dialogues: Vec<AnnotatedDialogue>,
    pub descriptions: BTreeMap<String, String>,
}

/// Each dialogue draws its KCs, then for every labeled pair the student
/// answers correctly with the mean of the per-KC emission probabilities,
/// after which every exercised KC may be learned.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.min_pairs == 0 || cfg.min_pairs > cfg.max_pairs {
        return Err(Error::Config("need 1 <= min_pairs <= max_pairs".into()));
    }
    if cfg.kcs_per_dialogue == 0 || cfg.kcs_per_dialogue > SKILLS.len() {
        return Err(Error::Config(format!("kcs_per_dialogue must be in 1..={}", SKILLS.len())));
    }
    let p = cfg.params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    for i in 0..cfg.dialogues {
        let skills: Vec<usize> = rand::seq::index::sample(&mut rng, SKILLS.len(), cfg.kcs_per_dialogue).into_vec();
        let mut mastered: Vec<bool> = skills.iter().map(|_| rng.random::<f64>() < p.init).collect();
        let n = rng.random_range(cfg.min_pairs..=cfg.max_pairs);
        let mut pairs = Vec::with_capacity(n);
        for j in 1..=n {
            if rng.random::<f64>() < cfg.na_rate {
                let (t, s) = *[("How are you feeling about today's lesson?", "Pretty good, thanks."), ("Take a short break if you need one.", "ok")]
                    .choose(&mut rng)
                    .unwrap();
                pairs.push(TurnPair::new(j, t, s));
                continue;
            }
            let mut used = vec![rng.random_range(0..skills.len())];
            if skills.len() > 1 && rng.random::<f64>() < cfg.multi_kc_rate {
                let other = (used[0] + rng.random_range(1..skills.len())) % skills.len();
                used.push(other);
            }
            let p_correct = used
                .iter()
                .map(|&u| if mastered[u] { 1.0 - p.slip } else { p.guess })
                .sum::<f64>()
                / used.len() as f64;
            let correct = rng.random::<f64>() < p_correct;
            for &u in &used {
                if !mastered[u] {
                    mastered[u] = rng.random::<f64>() < p.learn;
                }
            }
            let (a, b) = (rng.random_range(2..13), rng.random_range(2..13));
            let words: Vec<&str> = used.iter().map(|&u| SKILLS[skills[u]].2).collect();
            let tutor = format!("Let's try this one: what is {a} {} {b}?", words.join(" then "));
            let student = if correct {
                format!("I worked it out step by step and got {}.", a * b)
            } else {
                format!("Hmm, maybe {}? I'm not sure how to do it.", a + b + 1)
            };
            let ids: Vec<&str> = used.iter().map(|&u| SKILLS[skills[u]].0).collect();
            let label = if correct { Correctness::Correct } else { Correctness::Incorrect };
            pairs.push(TurnPair::new(j, tutor, student).labeled(label, &ids));
        }
        if !pairs.iter().any(TurnPair::is_labeled) {
            pairs[0] = TurnPair::new(1, "What is 2 times 3?", "6").labeled(Correctness::Correct, &[SKILLS[skills[0]].0]);
        }
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "synthetic".to_string());
        dialogues.push(AnnotatedDialogue {
            id: format!("syn-{i:04}"),
            opener: None,
            pairs,
            meta,
        });
    }
    for d in &dialogues {
        d.validate()?;
    }
    let descriptions = SKILLS.iter().map(|(id, desc, _)| (id.to_string(), desc.to_string())).collect();
    Ok(SyntheticCorpus { dialogues, descriptions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a.dialogues.len(), 40);
        let labeled: usize = a.dialogues.iter().map(|d| d.labeled_pairs().count()).sum();
        assert!(labeled > 200);
        let correct = a.dialogues.iter().flat_map(|d| d.labeled_pairs()).filter(|p| p.correctness == Correctness::Correct).count();
        let rate = correct as f64 / labeled as f64;
        assert!(rate > 0.3 && rate < 0.9, "{rate}");
        assert_ne!(a, generate(&SyntheticConfig { seed: 1, ..cfg }).unwrap());
    }
}
