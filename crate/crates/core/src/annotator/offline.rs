//! A deterministic offline annotator for dry runs and fixtures. It reads
//! the same prompts a live model would and answers by keyword overlap.

use std::collections::BTreeSet;

use serde_json::json;

use super::client::{ChatClient, ChatMessage, ClientError, Decoding};
use crate::encoder::words;

const HEDGES: [&str; 6] = ["not sure", "don't know", "dont know", "maybe", "i think it's", "confused"];

const STOP: [&str; 12] = ["the", "and", "for", "with", "that", "this", "what", "from", "into", "using", "understand", "apply"];

pub struct KeywordClient {
    model: String,
}

impl KeywordClient {
    pub fn new() -> Self {
        KeywordClient {
            model: "offline-keyword-v1".into(),
        }
    }
}

impl Default for KeywordClient {
    fn default() -> Self {
        Self::new()
    }
}

struct Pair {
    j: usize,
    tutor: String,
    student: String,
}

fn section<'a>(text: &'a str, header: &str) -> &'a str {
    let Some(start) = text.find(header) else { return "" };
    let rest = &text[start + header.len()..];
    rest.find("\n\nDialogue:").map_or(rest, |end| &rest[..end])
}

fn pairs(text: &str) -> Vec<Pair> {
    let dialogue = text.rsplit_once("Dialogue:\n").map_or("", |(_, d)| d);
    let mut out = Vec::new();
    for block in dialogue.split("[Turn pair ").skip(1) {
        let Some((num, body)) = block.split_once("]\n") else { continue };
        let Ok(j) = num.trim().parse() else { continue };
        let mut tutor = String::new();
        let mut student = String::new();
        for line in body.lines() {
            if let Some(t) = line.strip_prefix("Tutor: ") {
                tutor = t.to_string();
            } else if let Some(s) = line.strip_prefix("Student: ") {
                student = s.to_string();
            }
        }
        out.push(Pair { j, tutor, student });
    }
    out
}

fn keywords(text: &str) -> BTreeSet<String> {
    words(text).into_iter().filter(|w| w.len() > 3 && !STOP.contains(&w.as_str())).collect()
}

/// Candidate ids ordered by descending overlap with `text`; ties by id.
fn ranked(candidates: &str, text: &str) -> Vec<(String, usize)> {
    let bag = keywords(text);
    let mut out: Vec<(String, usize)> = candidates
        .lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(id, desc)| (id.to_string(), keywords(desc).intersection(&bag).count()))
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn top(candidates: &str, text: &str) -> Vec<String> {
    let r = ranked(candidates, text);
    let best = r.first().map_or(0, |c| c.1);
    if best == 0 {
        return r.into_iter().take(1).map(|c| c.0).collect();
    }
    r.into_iter().take_while(|c| c.1 == best).take(2).map(|c| c.0).collect()
}

fn label(p: &Pair) -> &'static str {
    let s = p.student.to_lowercase();
    if !p.tutor.contains('?') || s.trim().is_empty() {
        "na"
    } else if HEDGES.iter().any(|h| s.contains(h)) {
        "incorrect"
    } else {
        "correct"
    }
}

impl ChatClient for KeywordClient {
    fn complete(&self, messages: &[ChatMessage], _decoding: &Decoding) -> Result<String, ClientError> {
        let user = messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("");
        let ps = pairs(user);
        let all: String = ps.iter().map(|p| format!("{} {} ", p.tutor, p.student)).collect();
        let response = if user.contains("list of Common Core math domains") {
            json!({"summary": "offline", "domains": top(section(user, "Domains:\n"), &all)})
        } else if user.contains("list of Common Core math clusters") {
            json!({"turn_summaries": [], "clusters": top(section(user, "Clusters:\n"), &all)})
        } else if user.contains("list of Common Core math standards") {
            let candidates = section(user, "Standards:\n");
            let fallback = top(candidates, &all);
            let turns: Vec<_> = ps
                .iter()
                .map(|p| {
                    let standards = if !p.tutor.contains('?') {
                        Vec::new()
                    } else if ranked(candidates, &p.tutor).first().is_some_and(|c| c.1 > 0) {
                        top(candidates, &p.tutor)
                    } else {
                        fallback.clone()
                    };
                    json!({"j": p.j, "summary": "offline", "standards": standards})
                })
                .collect();
            json!({ "turns": turns })
        } else {
            let turns: Vec<_> = ps.iter().map(|p| json!({"j": p.j, "summary": "offline", "label": label(p)})).collect();
            json!({ "turns": turns })
        };
        Ok(response.to_string())
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::{annotate_dialogue, AnnotateOptions};
    use crate::corpus::{AnnotatedDialogue, Correctness, Role};
    use crate::taxonomy::Taxonomy;

    #[test]
    fn annotates_fixture_dialogue() {
        let tax = Taxonomy::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/taxonomy.json")).unwrap();
        let msgs = [
            (Role::Tutor, "What is 3/4 divided by 1/8? Think about the quotient of fractions."),
            (Role::Student, "It is 6."),
            (Role::Tutor, "Can you write an expression for 5 more than x?"),
            (Role::Student, "Maybe 5x? I'm not sure."),
            (Role::Tutor, "Good effort, keep going."),
            (Role::Student, "ok"),
        ];
        let d = AnnotatedDialogue::from_messages("d", &msgs, Default::default()).unwrap();
        let r = annotate_dialogue(&d, &KeywordClient::new(), Some(&tax), &AnnotateOptions::default());
        assert!(r.is_success(), "{:?}", r.failure);
        assert_eq!(r.labels.unwrap(), [Correctness::Correct, Correctness::Incorrect, Correctness::Na]);
        let standards = r.standards.unwrap();
        assert!(!standards[0].is_empty() && !standards[1].is_empty());
        assert!(standards[2].is_empty());
    }
}
