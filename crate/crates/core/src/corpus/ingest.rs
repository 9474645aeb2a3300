use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{parse_canonical_dialogue, parse_canonical_document, AnnotatedDialogue, Role};
use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// CoMTA release: a JSON array of `{test_id, math_level, data: [{role, content}]}`.
    Comta,
    /// MathDial release: JSON lines (or an array) with a `|EOM|`-delimited `conversation`.
    Mathdial,
    /// This crate's own corpus document.
    Canonical,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "comta" => Ok(DatasetFormat::Comta),
            "mathdial" => Ok(DatasetFormat::Mathdial),
            "canonical" => Ok(DatasetFormat::Canonical),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    /// Subjects outside the standards taxonomy; matching dialogues are dropped.
    pub excluded_subjects: Vec<String>,
    /// Split tag applied to MathDial records lacking one (otherwise inferred
    /// from a `train`/`test` file stem).
    pub split_tag: Option<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            excluded_subjects: vec!["Calculus".to_string()],
            split_tag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDialogue {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub dialogues: Vec<AnnotatedDialogue>,
    /// Malformed records.
    pub skipped: Vec<SkippedDialogue>,
    /// Well-formed dialogues dropped by policy (e.g. unsupported subject).
    pub excluded: Vec<SkippedDialogue>,
}

pub fn ingest_dataset(path: &Path, format: DatasetFormat, options: &IngestOptions) -> Result<Ingested> {
    let text = read_to_string(path)?;
    let mut options = options.clone();
    if options.split_tag.is_none() && format == DatasetFormat::Mathdial {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_ascii_lowercase();
        if stem.contains("train") {
            options.split_tag = Some("train".into());
        } else if stem.contains("test") {
            options.split_tag = Some("test".into());
        }
    }
    ingest_str(&text, format, &options)
}

pub fn ingest_str(text: &str, format: DatasetFormat, options: &IngestOptions) -> Result<Ingested> {
    if text.trim().is_empty() {
        return Ok(Ingested::default());
    }
    let mut out = match format {
        DatasetFormat::Canonical => ingest_canonical(text)?,
        DatasetFormat::Comta => ingest_comta(text, options)?,
        DatasetFormat::Mathdial => ingest_mathdial(text, options)?,
    };
    for skip in &out.skipped {
        log::warn!("skipped dialogue {}: {}", skip.id, skip.reason);
    }
    out.dialogues.retain(|d| !d.pairs.is_empty() || {
        out.skipped.push(SkippedDialogue {
            id: d.id.clone(),
            reason: "no tutor/student turn pairs".into(),
        });
        false
    });
    Ok(out)
}

fn ingest_canonical(text: &str) -> Result<Ingested> {
    let (_, raw) = parse_canonical_document(text)?;
    let mut out = Ingested::default();
    for (pos, value) in raw.into_iter().enumerate() {
        let id = value
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{pos}"));
        match parse_canonical_dialogue(value) {
            Ok(d) => out.dialogues.push(d),
            Err(e) => out.skipped.push(SkippedDialogue { id, reason: e.to_string() }),
        }
    }
    Ok(out)
}

fn records(text: &str) -> Result<Vec<(usize, std::result::Result<Value, String>)>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let all: Vec<Value> = serde_json::from_str(trimmed)?;
        return Ok(all.into_iter().enumerate().map(|(i, v)| (i, Ok(v))).collect());
    }
    // A wrapped document `{"dialogues": [...]}`, otherwise JSON lines.
    if let Ok(Value::Object(mut map)) = serde_json::from_str::<Value>(trimmed) {
        if let Some(Value::Array(all)) = map.remove("dialogues") {
            return Ok(all.into_iter().enumerate().map(|(i, v)| (i, Ok(v))).collect());
        }
    }
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i, serde_json::from_str::<Value>(l).map_err(|e| e.to_string())))
        .collect())
}

fn role_of(raw: &str) -> Option<Role> {
    match raw.to_ascii_lowercase().as_str() {
        "user" | "student" => Some(Role::Student),
        "assistant" | "tutor" | "teacher" => Some(Role::Tutor),
        _ => None,
    }
}

fn string_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str))
}

fn ingest_comta(text: &str, options: &IngestOptions) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (pos, record) in records(text)? {
        let fallback_id = format!("comta-{pos}");
        let value = match record {
            Ok(v) => v,
            Err(e) => {
                out.skipped.push(SkippedDialogue { id: fallback_id, reason: e });
                continue;
            }
        };
        let id = match value.get("test_id").or_else(|| value.get("id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => fallback_id,
        };
        let Some(messages) = value.get("data").and_then(Value::as_array) else {
            out.skipped.push(SkippedDialogue {
                id,
                reason: "missing `data` message list".into(),
            });
            continue;
        };
        let subject = string_field(&value, &["math_level", "subject"]).unwrap_or("").to_string();
        if options
            .excluded_subjects
            .iter()
            .any(|s| s.eq_ignore_ascii_case(subject.trim()))
        {
            out.excluded.push(SkippedDialogue {
                id,
                reason: format!("subject `{subject}` not covered by the taxonomy"),
            });
            continue;
        }
        let mut parsed = Vec::with_capacity(messages.len());
        let mut bad = None;
        for m in messages {
            let role = string_field(m, &["role"]).and_then(role_of);
            let content = string_field(m, &["content", "text"]);
            match (role, content) {
                (Some(r), Some(c)) => parsed.push((r, c.to_string())),
                (None, _) if string_field(m, &["role"]) == Some("system") => {}
                _ => {
                    bad = Some("message without a recognised role/content");
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            out.skipped.push(SkippedDialogue { id, reason: reason.into() });
            continue;
        }
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "comta".to_string());
        if !subject.is_empty() {
            meta.insert("subject".to_string(), subject);
        }
        if let Some(result) = string_field(&value, &["expected_result"]) {
            meta.insert("expected_result".to_string(), result.to_string());
        }
        out.dialogues.push(AnnotatedDialogue::from_messages(id, &parsed, meta)?);
    }
    Ok(out)
}

/// Splits one MathDial `conversation` into role-tagged messages, removing
/// tutor move tags such as `(probing)`.
pub(crate) fn parse_mathdial_conversation(conversation: &str) -> std::result::Result<Vec<(Role, String)>, String> {
    let mut out = Vec::new();
    for chunk in conversation.split("|EOM|") {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let (role, rest) = if let Some(rest) = chunk.strip_prefix("Teacher:") {
            (Role::Tutor, rest)
        } else if let Some(rest) = chunk.strip_prefix("Student:") {
            (Role::Student, rest)
        } else {
            return Err(format!("utterance without speaker prefix: {:.40}", chunk));
        };
        let mut rest = rest.trim_start();
        if role == Role::Tutor && rest.starts_with('(') {
            if let Some(close) = rest.find(')') {
                rest = rest[close + 1..].trim_start();
            }
        }
        out.push((role, rest.to_string()));
    }
    Ok(out)
}

fn ingest_mathdial(text: &str, options: &IngestOptions) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (pos, record) in records(text)? {
        let value = match record {
            Ok(v) => v,
            Err(e) => {
                out.skipped.push(SkippedDialogue {
                    id: format!("mathdial-{pos}"),
                    reason: e,
                });
                continue;
            }
        };
        let split = string_field(&value, &["split"])
            .map(str::to_string)
            .or_else(|| options.split_tag.clone());
        let id = match &split {
            Some(s) => format!("mathdial-{s}-{pos}"),
            None => format!("mathdial-{pos}"),
        };
        let Some(conversation) = string_field(&value, &["conversation"]) else {
            out.skipped.push(SkippedDialogue {
                id,
                reason: "missing `conversation`".into(),
            });
            continue;
        };
        let messages = match parse_mathdial_conversation(conversation) {
            Ok(m) => m,
            Err(reason) => {
                out.skipped.push(SkippedDialogue { id, reason });
                continue;
            }
        };
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "mathdial".to_string());
        if let Some(s) = split {
            meta.insert("split".to_string(), s);
        }
        match value.get("qid") {
            Some(Value::String(s)) => {
                meta.insert("qid".into(), s.clone());
            }
            Some(Value::Number(n)) => {
                meta.insert("qid".into(), n.to_string());
            }
            _ => {}
        }
        for key in ["question", "ground_truth", "student_incorrect_solution"] {
            if let Some(v) = string_field(&value, &[key]) {
                meta.insert(key.to_string(), v.to_string());
            }
        }
        out.dialogues.push(AnnotatedDialogue::from_messages(id, &messages, meta)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{to_canonical_json, Correctness};

    fn comta_record(id: usize, subject: &str) -> Value {
        serde_json::json!({
            "test_id": id,
            "math_level": subject,
            "expected_result": "Answer Accepted",
            "data": [
                {"role": "user", "content": "Can you help me with this problem?"},
                {"role": "assistant", "content": "Sure. What do you notice first?"},
                {"role": "user", "content": "The numbers are even."},
                {"role": "assistant", "content": "Good. What is 4 divided by 2?"},
                {"role": "user", "content": "2"}
            ]
        })
    }

    #[test]
    fn comta_drops_calculus_dialogues() {
        // 188 raw dialogues, 35 of them Calculus.
        let subjects = ["Elementary", "Algebra", "Trigonometry", "Geometry"];
        let records: Vec<Value> = (0..188)
            .map(|i| {
                if i < 35 {
                    comta_record(i, "Calculus")
                } else {
                    comta_record(i, subjects[i % 4])
                }
            })
            .collect();
        let text = serde_json::to_string(&records).unwrap();
        let out = ingest_str(&text, DatasetFormat::Comta, &IngestOptions::default()).unwrap();
        assert_eq!(out.dialogues.len() + out.excluded.len(), 188);
        assert_eq!(out.dialogues.len(), 153);
        assert!(out.skipped.is_empty());
        let d = &out.dialogues[0];
        assert_eq!(d.opener.as_deref(), Some("Can you help me with this problem?"));
        assert_eq!(d.pairs.len(), 2);
        assert!(d.pairs.iter().all(|p| p.correctness == Correctness::Na && p.kcs.is_empty()));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        for format in [DatasetFormat::Comta, DatasetFormat::Mathdial, DatasetFormat::Canonical] {
            let out = ingest_str("  \n", format, &IngestOptions::default()).unwrap();
            assert!(out.dialogues.is_empty());
            assert!(out.skipped.is_empty());
        }
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!(matches!("pykt".parse::<DatasetFormat>(), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn malformed_comta_record_is_skipped_not_fatal() {
        let text = serde_json::to_string(&vec![
            comta_record(1, "Algebra"),
            serde_json::json!({"test_id": 2, "math_level": "Algebra"}),
        ])
        .unwrap();
        let out = ingest_str(&text, DatasetFormat::Comta, &IngestOptions::default()).unwrap();
        assert_eq!(out.dialogues.len(), 1);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].id, "2");
    }

    #[test]
    fn mathdial_conversation_parsing() {
        let conv = "Teacher: (probing)How did you get 5?|EOM|Student: I added 2 and 3.|EOM|Teacher: (focus)Check the question again.|EOM|Student: Oh, it is 6.";
        let line = serde_json::json!({"qid": 7, "conversation": conv, "question": "2*3?"}).to_string();
        let text = format!("{line}\n\n{line}\n");
        let opts = IngestOptions {
            split_tag: Some("train".into()),
            ..Default::default()
        };
        let out = ingest_str(&text, DatasetFormat::Mathdial, &opts).unwrap();
        assert_eq!(out.dialogues.len(), 2);
        let d = &out.dialogues[0];
        assert_eq!(d.pairs.len(), 2);
        assert_eq!(d.pairs[0].tutor_text, "How did you get 5?");
        assert_eq!(d.pairs[1].tutor_text, "Check the question again.");
        assert_eq!(d.split_tag(), Some("train"));
        assert_eq!(d.meta.get("qid").map(String::as_str), Some("7"));
        assert_ne!(out.dialogues[0].id, out.dialogues[1].id);
    }

    #[test]
    fn mathdial_without_speaker_prefix_is_skipped() {
        let line = serde_json::json!({"conversation": "hello|EOM|Student: hi"}).to_string();
        let out = ingest_str(&line, DatasetFormat::Mathdial, &IngestOptions::default()).unwrap();
        assert!(out.dialogues.is_empty());
        assert_eq!(out.skipped.len(), 1);
    }

    #[test]
    fn canonical_three_pair_dialogue_round_trips() {
        let text = r#"{
  "version": 1,
  "dialogues": [
    {
      "id": "d1",
      "meta": {"subject": "Algebra"},
      "turns": [
        {"role": "tutor", "text": "What is 2x when x=3?"},
        {"role": "student", "text": "6"},
        {"role": "tutor", "text": "And 3x?"},
        {"role": "student", "text": "8"},
        {"role": "tutor", "text": "How are you feeling?"},
        {"role": "student", "text": "Fine"}
      ],
      "pairs": [
        {"j": 1, "correctness": "1", "kcs": ["6.EE.A.2"]},
        {"j": 2, "correctness": "0", "kcs": ["6.EE.A.2", "6.EE.B.5"]},
        {"j": 3, "correctness": "na", "kcs": []}
      ]
    }
  ]
}
"#;
        let out = ingest_str(text, DatasetFormat::Canonical, &IngestOptions::default()).unwrap();
        assert_eq!(out.dialogues.len(), 1);
        assert_eq!(out.dialogues[0].pairs.len(), 3);
        let written = to_canonical_json(&out.dialogues).unwrap();
        let a: Value = serde_json::from_str(text).unwrap();
        let b: Value = serde_json::from_str(&written).unwrap();
        assert_eq!(a, b);
        // Serializing our own output again is byte-identical.
        let again = ingest_str(&written, DatasetFormat::Canonical, &IngestOptions::default()).unwrap();
        assert_eq!(to_canonical_json(&again.dialogues).unwrap(), written);
    }

    #[test]
    fn canonical_rejects_bad_pairs_per_dialogue() {
        let text = r#"{"version": 1, "dialogues": [
            {"id": "ok", "turns": [{"role": "tutor", "text": "q"}, {"role": "student", "text": "a"}], "pairs": []},
            {"id": "bad", "turns": [{"role": "tutor", "text": "q"}, {"role": "student", "text": "a"}],
             "pairs": [{"j": 1, "correctness": "1", "kcs": []}]},
            {"id": "oob", "turns": [{"role": "tutor", "text": "q"}, {"role": "student", "text": "a"}],
             "pairs": [{"j": 4, "correctness": "na"}]}
        ]}"#;
        let out = ingest_str(text, DatasetFormat::Canonical, &IngestOptions::default()).unwrap();
        assert_eq!(out.dialogues.len(), 1);
        let ids: Vec<_> = out.skipped.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["bad", "oob"]);
    }

    #[test]
    fn canonical_version_is_checked() {
        let text = r#"{"version": 99, "dialogues": []}"#;
        assert!(ingest_str(text, DatasetFormat::Canonical, &IngestOptions::default()).is_err());
    }
}
