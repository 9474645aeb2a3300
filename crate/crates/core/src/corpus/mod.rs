//! Dialogue data model, canonical corpus format, dataset adapters and splits.
//!
//! A dialogue is stored as `(s_0, t_1, s_1, ..., t_M, s_M)`: an optional
//! student opener followed by tutor/student turn pairs. Each pair carries a
//! correctness label and the set of standards (knowledge components) the
//! tutor turn exercises.

mod ingest;
mod splits;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use ingest::{ingest_dataset, ingest_str, DatasetFormat, IngestOptions, Ingested, SkippedDialogue};
pub use splits::{make_splits, Fold, Part, SplitPlan};
pub use stats::{dataset_statistics, StatsReport};

/// Version tag written into every canonical corpus document.
pub const CANONICAL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Tutor,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Tutor => f.write_str("Tutor"),
            Role::Student => f.write_str("Student"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub index: usize,
}

/// Correctness of a student reply. Serialized as `"1"`, `"0"` or `"na"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Correctness {
    Correct,
    Incorrect,
    #[default]
    Na,
}

impl Correctness {
    /// The binary label, or `None` for `na`.
    pub fn label(self) -> Option<u8> {
        match self {
            Correctness::Correct => Some(1),
            Correctness::Incorrect => Some(0),
            Correctness::Na => None,
        }
    }

    pub fn from_label(y: u8) -> Self {
        if y == 0 {
            Correctness::Incorrect
        } else {
            Correctness::Correct
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Correctness::Correct => "1",
            Correctness::Incorrect => "0",
            Correctness::Na => "na",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(Correctness::Correct),
            "0" => Some(Correctness::Incorrect),
            "na" => Some(Correctness::Na),
            _ => None,
        }
    }
}

impl Serialize for Correctness {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Correctness {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Correctness::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("correctness must be \"1\", \"0\" or \"na\", got {raw:?}")))
    }
}

/// One tutor turn and the student's reply: a single time step of tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnPair {
    /// 1-based pair index.
    pub j: usize,
    pub tutor_text: String,
    pub student_text: String,
    pub correctness: Correctness,
    /// Standard ids, unique, in annotation order.
    pub kcs: Vec<String>,
}

impl TurnPair {
    pub fn new(j: usize, tutor_text: impl Into<String>, student_text: impl Into<String>) -> Self {
        TurnPair {
            j,
            tutor_text: tutor_text.into(),
            student_text: student_text.into(),
            correctness: Correctness::Na,
            kcs: Vec::new(),
        }
    }

    pub fn labeled(mut self, correctness: Correctness, kcs: &[&str]) -> Self {
        self.correctness = correctness;
        self.kcs = kcs.iter().map(|k| k.to_string()).collect();
        self
    }

    /// True when the pair takes part in training and metrics.
    pub fn is_labeled(&self) -> bool {
        self.correctness.label().is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDialogue {
    pub id: String,
    /// Student-initiated opener `s_0`, never labeled.
    pub opener: Option<String>,
    pub pairs: Vec<TurnPair>,
    pub meta: BTreeMap<String, String>,
}

impl AnnotatedDialogue {
    /// Builds a dialogue from raw role-tagged messages.
    ///
    /// Blank messages are dropped and consecutive messages from the same role
    /// are joined with a newline. A leading student message becomes the
    /// opener; a trailing tutor message without a reply is dropped. All pairs
    /// start unlabeled.
    pub fn from_messages<S: AsRef<str>>(
        id: impl Into<String>,
        messages: &[(Role, S)],
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut merged: Vec<(Role, String)> = Vec::new();
        for (role, text) in messages {
            let text = text.as_ref().trim();
            if text.is_empty() {
                continue;
            }
            match merged.last_mut() {
                Some((last, acc)) if last == role => {
                    acc.push('\n');
                    acc.push_str(text);
                }
                _ => merged.push((*role, text.to_string())),
            }
        }
        let mut iter = merged.into_iter().peekable();
        let opener = match iter.peek() {
            Some((Role::Student, _)) => iter.next().map(|(_, t)| t),
            _ => None,
        };
        let mut pairs = Vec::new();
        while let Some((role, tutor)) = iter.next() {
            debug_assert_eq!(role, Role::Tutor);
            match iter.next() {
                Some((_, student)) => pairs.push(TurnPair::new(pairs.len() + 1, tutor, student)),
                None => break,
            }
        }
        let dialogue = AnnotatedDialogue {
            id: id.into(),
            opener,
            pairs,
            meta,
        };
        Ok(dialogue)
    }

    /// The alternating turn sequence `(s_0?, t_1, s_1, ...)`.
    pub fn turns(&self) -> Vec<Turn> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2 + 1);
        if let Some(opener) = &self.opener {
            out.push(Turn {
                role: Role::Student,
                text: opener.clone(),
                index: 0,
            });
        }
        for pair in &self.pairs {
            for (role, text) in [(Role::Tutor, &pair.tutor_text), (Role::Student, &pair.student_text)] {
                let index = out.len();
                out.push(Turn {
                    role,
                    text: text.clone(),
                    index,
                });
            }
        }
        out
    }

    pub fn labeled_pairs(&self) -> impl Iterator<Item = &TurnPair> {
        self.pairs.iter().filter(|p| p.is_labeled())
    }

    pub fn has_labels(&self) -> bool {
        self.pairs.iter().any(TurnPair::is_labeled)
    }

    /// Checks the pair invariants: consecutive indices, non-empty texts,
    /// unique KCs per pair, and `kcs = ∅ ⇒ na`.
    pub fn validate(&self) -> Result<()> {
        for (pos, pair) in self.pairs.iter().enumerate() {
            if pair.j != pos + 1 {
                return Err(Error::invalid(format!(
                    "dialogue {}: pair index {} at position {} (indices must be 1..M)",
                    self.id, pair.j, pos
                )));
            }
            if pair.tutor_text.trim().is_empty() || pair.student_text.trim().is_empty() {
                return Err(Error::invalid(format!("dialogue {}: pair {} has an empty turn", self.id, pair.j)));
            }
            if pair.kcs.is_empty() && pair.is_labeled() {
                return Err(Error::invalid(format!(
                    "dialogue {}: pair {} is labeled but has no KCs",
                    self.id, pair.j
                )));
            }
            let unique: BTreeSet<&String> = pair.kcs.iter().collect();
            if unique.len() != pair.kcs.len() {
                return Err(Error::invalid(format!("dialogue {}: pair {} repeats a KC", self.id, pair.j)));
            }
        }
        Ok(())
    }

    /// Hash of the dialogue text only (labels excluded), used as a cache key.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.id.as_bytes());
        hasher.update([0u8]);
        if let Some(opener) = &self.opener {
            hasher.update(b"S0:");
            hasher.update(opener.as_bytes());
        }
        for pair in &self.pairs {
            hasher.update([0u8]);
            hasher.update(b"T:");
            hasher.update(pair.tutor_text.as_bytes());
            hasher.update([0u8]);
            hasher.update(b"S:");
            hasher.update(pair.student_text.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn split_tag(&self) -> Option<&str> {
        self.meta.get("split").map(String::as_str)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalCorpus {
    version: u32,
    dialogues: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalDialogue {
    id: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    turns: Vec<CanonicalTurn>,
    #[serde(default)]
    pairs: Vec<CanonicalPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalTurn {
    role: Role,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalPair {
    j: usize,
    correctness: Correctness,
    #[serde(default)]
    kcs: Vec<String>,
}

impl CanonicalDialogue {
    fn from_dialogue(d: &AnnotatedDialogue) -> Self {
        CanonicalDialogue {
            id: d.id.clone(),
            meta: d.meta.clone(),
            turns: d
                .turns()
                .into_iter()
                .map(|t| CanonicalTurn { role: t.role, text: t.text })
                .collect(),
            pairs: d
                .pairs
                .iter()
                .map(|p| CanonicalPair {
                    j: p.j,
                    correctness: p.correctness,
                    kcs: p.kcs.clone(),
                })
                .collect(),
        }
    }

    fn into_dialogue(self) -> Result<AnnotatedDialogue> {
        let messages: Vec<(Role, String)> = self.turns.into_iter().map(|t| (t.role, t.text)).collect();
        let expected_turns = messages.len();
        let mut dialogue = AnnotatedDialogue::from_messages(self.id, &messages, self.meta)?;
        if dialogue.turns().len() != expected_turns {
            return Err(Error::invalid(format!(
                "dialogue {}: canonical turns must alternate and end with a student turn",
                dialogue.id
            )));
        }
        let m = dialogue.pairs.len();
        let mut seen = BTreeSet::new();
        for pair in self.pairs {
            if pair.j == 0 || pair.j > m {
                return Err(Error::invalid(format!(
                    "dialogue {}: pair index {} outside 1..={}",
                    dialogue.id, pair.j, m
                )));
            }
            if !seen.insert(pair.j) {
                return Err(Error::invalid(format!("dialogue {}: duplicate pair index {}", dialogue.id, pair.j)));
            }
            let slot = &mut dialogue.pairs[pair.j - 1];
            slot.correctness = pair.correctness;
            slot.kcs = pair.kcs;
        }
        dialogue.validate()?;
        Ok(dialogue)
    }
}

/// Serializes dialogues into the canonical corpus document.
pub fn to_canonical_json(dialogues: &[AnnotatedDialogue]) -> Result<String> {
    let corpus = CanonicalCorpus {
        version: CANONICAL_VERSION,
        dialogues: dialogues
            .iter()
            .map(|d| serde_json::to_value(CanonicalDialogue::from_dialogue(d)))
            .collect::<std::result::Result<_, _>>()?,
    };
    let mut out = serde_json::to_string_pretty(&corpus)?;
    out.push('\n');
    Ok(out)
}

pub fn write_canonical(path: &std::path::Path, dialogues: &[AnnotatedDialogue]) -> Result<()> {
    crate::error::write_string(path, &to_canonical_json(dialogues)?)
}

/// Reads a canonical corpus, failing on the first malformed dialogue.
///
/// Use [`ingest_dataset`] for lenient loading with per-dialogue skips.
pub fn read_canonical(path: &std::path::Path) -> Result<Vec<AnnotatedDialogue>> {
    let ingested = ingest_dataset(path, DatasetFormat::Canonical, &IngestOptions::default())?;
    if let Some(skip) = ingested.skipped.first() {
        return Err(Error::invalid(format!("dialogue {}: {}", skip.id, skip.reason)));
    }
    Ok(ingested.dialogues)
}

pub(crate) fn parse_canonical_dialogue(value: serde_json::Value) -> Result<AnnotatedDialogue> {
    let raw: CanonicalDialogue = serde_json::from_value(value)?;
    raw.into_dialogue()
}

pub(crate) fn parse_canonical_document(text: &str) -> Result<(u32, Vec<serde_json::Value>)> {
    let corpus: CanonicalCorpus = serde_json::from_str(text)?;
    if corpus.version != CANONICAL_VERSION {
        return Err(Error::invalid(format!(
            "unsupported canonical corpus version {} (expected {})",
            corpus.version, CANONICAL_VERSION
        )));
    }
    Ok((corpus.version, corpus.dialogues))
}
