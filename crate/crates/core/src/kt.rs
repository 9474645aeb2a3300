//! Shared knowledge-tracing contracts: the predictor interface, per-turn
//! aggregation of KC masteries, the BCE objective, pseudo-turn expansion
//! and prediction records.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDialogue, SkippedDialogue, TurnPair};
use crate::error::{Error, Result};

/// Probability clipping used by the BCE objective.
pub const BCE_EPS: f64 = 1e-7;

/// Everything a predictor may see when scoring turn pair `j`: the opener,
/// every earlier pair (texts, labels, KCs) and the current tutor turn.
#[derive(Debug, Clone, Copy)]
pub struct DialogueContext<'a> {
    pub dialogue_id: &'a str,
    pub j: usize,
    pub opener: Option<&'a str>,
    pub history: &'a [TurnPair],
    pub tutor_text: &'a str,
}

impl<'a> DialogueContext<'a> {
    /// Context for pair `j` (1-based) of `dialogue`.
    pub fn at(dialogue: &'a AnnotatedDialogue, j: usize) -> Self {
        assert!(j >= 1 && j <= dialogue.pairs.len(), "turn pair {j} out of range");
        DialogueContext {
            dialogue_id: &dialogue.id,
            j,
            opener: dialogue.opener.as_deref(),
            history: &dialogue.pairs[..j - 1],
            tutor_text: &dialogue.pairs[j - 1].tutor_text,
        }
    }
}

pub trait KtPredictor: Send + Sync {
    /// Mastery estimates for each KC in `kcs` at the context's turn pair.
    fn predict_masteries(&self, context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>>;
}

impl<P: KtPredictor + ?Sized> KtPredictor for &P {
    fn predict_masteries(&self, context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
        (**self).predict_masteries(context, kcs)
    }
}

impl<P: KtPredictor + ?Sized> KtPredictor for Box<P> {
    fn predict_masteries(&self, context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
        (**self).predict_masteries(context, kcs)
    }
}

/// Predicts the same mastery for every KC.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl KtPredictor for ConstantPredictor {
    fn predict_masteries(&self, _context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
        Ok(vec![self.0; kcs.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Compensatory: mean over KCs.
    #[default]
    Mean,
    /// Conjunctive: product over KCs.
    Product,
}

impl Aggregation {
    pub fn apply(self, masteries: &[f64]) -> Result<f64> {
        if masteries.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty mastery vector"));
        }
        if let Some(bad) = masteries.iter().find(|z| !(0.0..=1.0).contains(*z)) {
            return Err(Error::invalid(format!("mastery {bad} outside [0, 1]")));
        }
        Ok(match self {
            Aggregation::Mean => masteries.iter().sum::<f64>() / masteries.len() as f64,
            Aggregation::Product => masteries.iter().product(),
        })
    }
}

/// Turn-level correctness probability: the mean of the KC masteries.
pub fn aggregate_correctness(masteries: &[f64]) -> Result<f64> {
    Aggregation::Mean.apply(masteries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub j: usize,
    pub y: u8,
    pub y_hat: f64,
    pub z_hats: Vec<f64>,
    pub kcs: Vec<String>,
    /// First labeled pair of its dialogue; never scored.
    pub excluded: bool,
}

impl PredictionRecord {
    pub fn new(
        dialogue_id: impl Into<String>,
        j: usize,
        y: u8,
        z_hats: Vec<f64>,
        kcs: Vec<String>,
        aggregation: Aggregation,
    ) -> Result<Self> {
        if y > 1 {
            return Err(Error::invalid(format!("label {y} is not binary")));
        }
        if z_hats.len() != kcs.len() {
            return Err(Error::invalid(format!("{} masteries for {} KCs", z_hats.len(), kcs.len())));
        }
        let y_hat = aggregation.apply(&z_hats)?;
        Ok(PredictionRecord {
            dialogue_id: dialogue_id.into(),
            j,
            y,
            y_hat,
            z_hats,
            kcs,
            excluded: false,
        })
    }

    fn check(&self) -> Result<()> {
        let ok = self.y <= 1
            && self.z_hats.len() == self.kcs.len()
            && !self.z_hats.is_empty()
            && (0.0..=1.0).contains(&self.y_hat)
            && self.z_hats.iter().all(|z| (0.0..=1.0).contains(z));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent record {}#{}", self.dialogue_id, self.j)))
        }
    }
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line)?;
        r.check()?;
        records.push(r);
    }
    Ok(records)
}

/// Clipped binary cross entropy of one prediction.
pub fn bce_term(y: u8, y_hat: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// BCE summed within each dialogue, averaged over dialogues.
pub fn bce_loss(records: &[PredictionRecord]) -> f64 {
    let mut per_dialogue: BTreeMap<&str, f64> = BTreeMap::new();
    for r in records {
        *per_dialogue.entry(&r.dialogue_id).or_default() += bce_term(r.y, r.y_hat);
    }
    if per_dialogue.is_empty() {
        return 0.0;
    }
    per_dialogue.values().sum::<f64>() / per_dialogue.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoTurn {
    pub dialogue_id: String,
    pub j: usize,
    pub k: usize,
    pub kc: String,
    pub y: u8,
}

/// One record per (labeled pair, KC), in pair then KC order.
pub fn expand_pseudo_turns(dialogue: &AnnotatedDialogue) -> Vec<PseudoTurn> {
    dialogue
        .pairs
        .iter()
        .filter_map(|p| p.correctness.label().map(|y| (p, y)))
        .flat_map(|(p, y)| {
            p.kcs.iter().enumerate().map(move |(k, kc)| PseudoTurn {
                dialogue_id: dialogue.id.clone(),
                j: p.j,
                k,
                kc: kc.clone(),
                y,
            })
        })
        .collect()
}

fn predict_dialogue(predictor: &dyn KtPredictor, dialogue: &AnnotatedDialogue, aggregation: Aggregation) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for pair in &dialogue.pairs {
        let Some(y) = pair.correctness.label() else {
            continue;
        };
        let context = DialogueContext::at(dialogue, pair.j);
        let z = predictor.predict_masteries(&context, &pair.kcs)?;
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mastery {bad} at turn pair {}", pair.j)));
        }
        let mut record = PredictionRecord::new(&dialogue.id, pair.j, y, z, pair.kcs.clone(), aggregation)?;
        record.excluded = records.is_empty();
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub records: Vec<PredictionRecord>,
    pub failures: Vec<SkippedDialogue>,
}

/// Scores every labeled pair of every dialogue with a growing causal
/// context. A failing dialogue is dropped (and reported); the rest continue.
pub fn collect_predictions(predictor: &dyn KtPredictor, dialogues: &[AnnotatedDialogue], aggregation: Aggregation) -> Predictions {
    let per_dialogue: Vec<_> = dialogues
        .par_iter()
        .map(|d| (d, predict_dialogue(predictor, d, aggregation)))
        .collect();
    let mut out = Predictions::default();
    for (d, result) in per_dialogue {
        match result {
            Ok(records) => out.records.extend(records),
            Err(e) => {
                log::warn!("prediction failed for dialogue {}: {e}", d.id);
                out.failures.push(SkippedDialogue {
                    id: d.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Correctness;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dialogue(labels: &[Correctness]) -> AnnotatedDialogue {
        let pairs = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = TurnPair::new(i + 1, format!("t{}", i + 1), format!("s{}", i + 1));
                if c == Correctness::Na {
                    p
                } else {
                    p.labeled(c, &["a", "b"])
                }
            })
            .collect();
        AnnotatedDialogue {
            id: "d".into(),
            opener: None,
            pairs,
            meta: Default::default(),
        }
    }

    #[test]
    fn aggregation_examples() {
        assert_abs_diff_eq!(aggregate_correctness(&[0.4688, 0.4688, 0.5622, 0.6225]).unwrap(), 0.530575, epsilon = 1e-12);
        assert_eq!(aggregate_correctness(&[0.37]).unwrap(), 0.37);
        assert_eq!(aggregate_correctness(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(aggregate_correctness(&[]).is_err());
        assert!(aggregate_correctness(&[1.2]).is_err());
        assert_abs_diff_eq!(Aggregation::Product.apply(&[0.5, 0.4]).unwrap(), 0.2, epsilon = 1e-12);
    }

    fn rec(id: &str, y: u8, p: f64) -> PredictionRecord {
        PredictionRecord::new(id, 1, y, vec![p], vec!["k".into()], Aggregation::Mean).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(bce_loss(&[rec("a", 1, 0.5)]), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(bce_loss(&[rec("a", 1, 1.0)]) < 1e-6);
        let two = bce_loss(&[rec("a", 1, 0.8), rec("a", 0, 0.3)]);
        assert_abs_diff_eq!(two, -(0.8f64.ln()) - 0.7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(two, 0.57982, epsilon = 1e-5);
        // Two dialogues: mean of per-dialogue sums.
        let batch = bce_loss(&[rec("a", 1, 0.8), rec("a", 0, 0.3), rec("b", 1, 0.5)]);
        assert_abs_diff_eq!(batch, (two + std::f64::consts::LN_2) / 2.0, epsilon = 1e-12);
        assert_eq!(bce_loss(&[]), 0.0);
    }

    #[test]
    fn pseudo_turns() {
        let mut d = dialogue(&[Correctness::Na, Correctness::Correct]);
        d.pairs[1].kcs = vec!["a".into(), "b".into(), "c".into()];
        let pts = expand_pseudo_turns(&d);
        assert_eq!(pts.len(), 3);
        assert!(pts.iter().all(|p| p.y == 1 && p.j == 2));
        assert_eq!(pts.iter().map(|p| p.kc.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(expand_pseudo_turns(&dialogue(&[Correctness::Na; 3])).is_empty());
    }

    #[test]
    fn first_label_is_excluded() {
        let d = dialogue(&[Correctness::Correct, Correctness::Incorrect, Correctness::Correct, Correctness::Correct]);
        let out = collect_predictions(&ConstantPredictor(0.5), &[d], Aggregation::Mean);
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.records.iter().filter(|r| !r.excluded).count(), 3);
        assert!(out.records[0].excluded && out.records[0].j == 1);
        assert!(out.records.iter().all(|r| r.y_hat == 0.5));

        let single = dialogue(&[Correctness::Na, Correctness::Correct, Correctness::Na]);
        let out = collect_predictions(&ConstantPredictor(0.5), &[single], Aggregation::Mean);
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].excluded);
    }

    struct Failing;
    impl KtPredictor for Failing {
        fn predict_masteries(&self, c: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
            if c.dialogue_id == "bad" {
                Err(Error::invalid("boom"))
            } else {
                Ok(vec![0.5; kcs.len()])
            }
        }
    }

    #[test]
    fn failing_dialogue_is_dropped_not_fatal() {
        let good = dialogue(&[Correctness::Correct, Correctness::Correct]);
        let mut bad = good.clone();
        bad.id = "bad".into();
        let out = collect_predictions(&Failing, &[good, bad], Aggregation::Mean);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].id, "bad");
    }

    /// Hashes everything it is shown, so any leak of later content changes the output.
    struct Probe;
    impl KtPredictor for Probe {
        fn predict_masteries(&self, c: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            c.opener.hash(&mut h);
            c.tutor_text.hash(&mut h);
            for p in c.history {
                (&p.tutor_text, &p.student_text, p.correctness.as_str(), &p.kcs).hash(&mut h);
            }
            kcs.hash(&mut h);
            Ok(vec![(h.finish() % 1000) as f64 / 1000.0; kcs.len()])
        }
    }

    #[test]
    fn records_jsonl_round_trip() {
        let d = dialogue(&[Correctness::Correct, Correctness::Incorrect]);
        let out = collect_predictions(&Probe, &[d], Aggregation::Mean);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        write_records(&path, &out.records).unwrap();
        assert_eq!(read_records(&path).unwrap(), out.records);
    }

    proptest! {
        #[test]
        fn aggregation_is_bounded_and_permutation_invariant(mut z in prop::collection::vec(0.0f64..=1.0, 1..8), seed in any::<u64>()) {
            let m = aggregate_correctness(&z).unwrap();
            let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            use rand::{seq::SliceRandom, SeedableRng};
            z.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((aggregate_correctness(&z).unwrap() - m).abs() < 1e-12);
        }

        #[test]
        fn bce_decreases_toward_label(y in 0u8..=1, p in 0.01f64..0.99, step in 0.001f64..0.5, other in 0.01f64..0.99) {
            let toward = if y == 1 { (p + step).min(0.999) } else { (p - step).max(0.001) };
            prop_assume!((toward - p).abs() > 1e-9);
            let before = bce_loss(&[rec("a", y, p), rec("a", 1, other)]);
            let after = bce_loss(&[rec("a", y, toward), rec("a", 1, other)]);
            prop_assert!(after < before);
        }

        #[test]
        fn records_are_causal(labels in prop::collection::vec(0u8..3, 2..7), cut in 1usize..6, text in "[a-z]{1,8}") {
            let labels: Vec<Correctness> = labels.into_iter().map(|l| match l { 0 => Correctness::Incorrect, 1 => Correctness::Correct, _ => Correctness::Na }).collect();
            let d = dialogue(&labels);
            let cut = cut.min(d.pairs.len());
            let mut mutated = d.clone();
            for p in &mut mutated.pairs[cut..] {
                p.tutor_text.push_str(&text);
                p.student_text.push_str(&text);
            }
            // The current pair's own student text and label are also off limits.
            mutated.pairs[cut - 1].student_text.push_str(&text);
            let a = collect_predictions(&Probe, &[d], Aggregation::Mean).records;
            let b = collect_predictions(&Probe, &[mutated], Aggregation::Mean).records;
            for (ra, rb) in a.iter().zip(&b) {
                if ra.j <= cut {
                    prop_assert_eq!(ra, rb);
                }
            }
        }
    }
}
