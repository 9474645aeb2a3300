//! LLM-driven dialogue annotation: per-pair correctness labels and a
//! three-stage (domain → cluster → standard) KC tagging flow.
//!
//! The two tasks run as independent prompt flows; disabling one leaves the
//! other's output untouched.

pub mod cache;
pub mod client;
pub mod offline;
pub mod parse;
pub mod prompts;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::ResultCache;
pub use client::{ChatClient, ChatMessage, ClientError, Decoding, FnClient, OpenAiClient, ReplayClient};
pub use offline::KeywordClient;

use crate::corpus::{AnnotatedDialogue, Correctness, SkippedDialogue};
use crate::error::{Error, Result};
use crate::taxonomy::{Level, Taxonomy};

/// Bumped whenever prompt text or response schema changes; part of cache keys.
pub const PROMPT_VERSION: &str = "kt-annotate-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tasks {
    pub correctness: bool,
    pub kcs: bool,
}

impl Default for Tasks {
    fn default() -> Self {
        Tasks {
            correctness: true,
            kcs: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// One prompt over the whole dialogue (later turns visible).
    #[default]
    FullDialogue,
    /// Pair `j` is annotated from the prefix `1..=j` only; M times the calls.
    Incremental,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateOptions {
    pub decoding: Decoding,
    pub retries: usize,
    pub backoff_ms: u64,
    pub max_description_chars: Option<usize>,
    pub tasks: Tasks,
    pub mode: AnnotationMode,
    pub parallelism: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            decoding: Decoding::default(),
            retries: 3,
            backoff_ms: 200,
            max_description_chars: Some(300),
            tasks: Tasks::default(),
            mode: AnnotationMode::FullDialogue,
            parallelism: 1,
        }
    }
}

/// One client exchange, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub attempt: usize,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub value: T,
    pub raw: Vec<StageRecord>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFailure {
    pub reason: String,
    pub raw: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KcAssignment {
    pub domains: Vec<String>,
    pub clusters: Vec<String>,
    pub standards: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub dialogue_id: String,
    pub labels: Option<Vec<Correctness>>,
    pub standards: Option<Vec<Vec<String>>>,
    pub domains: Vec<String>,
    pub clusters: Vec<String>,
    /// Labeled pairs that received no standard.
    pub low_coverage: Vec<usize>,
    pub raw: Vec<StageRecord>,
    pub notes: Vec<String>,
    pub failure: Option<String>,
}

impl AnnotationResult {
    pub fn is_success(&self) -> bool {
        self.failure.is_none()
    }
}

struct Exchange<'a> {
    client: &'a dyn ChatClient,
    options: &'a AnnotateOptions,
    raw: Vec<StageRecord>,
}

impl<'a> Exchange<'a> {
    fn new(client: &'a dyn ChatClient, options: &'a AnnotateOptions) -> Self {
        Exchange {
            client,
            options,
            raw: Vec::new(),
        }
    }

    /// Sends `messages`, retrying transport errors (with exponential backoff)
    /// and unparseable responses up to `retries` times.
    fn ask<T>(&mut self, stage: &str, messages: &[ChatMessage], parse: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<T, String> {
        let mut last = String::new();
        for attempt in 0..=self.options.retries {
            match self.client.complete(messages, &self.options.decoding) {
                Ok(text) => {
                    let parsed = parse(&text);
                    self.raw.push(StageRecord {
                        stage: stage.to_string(),
                        attempt,
                        response: Some(text),
                        error: parsed.as_ref().err().cloned(),
                    });
                    match parsed {
                        Ok(v) => return Ok(v),
                        Err(e) => last = e,
                    }
                }
                Err(e) => {
                    self.raw.push(StageRecord {
                        stage: stage.to_string(),
                        attempt,
                        response: None,
                        error: Some(e.to_string()),
                    });
                    last = e.to_string();
                    if attempt < self.options.retries && self.options.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(self.options.backoff_ms << attempt.min(10)));
                    }
                }
            }
        }
        Err(last)
    }

    fn fail<T>(self, reason: impl Into<String>) -> std::result::Result<T, AnnotationFailure> {
        Err(AnnotationFailure {
            reason: reason.into(),
            raw: self.raw,
        })
    }
}

fn prefix(dialogue: &AnnotatedDialogue, j: usize) -> AnnotatedDialogue {
    AnnotatedDialogue {
        pairs: dialogue.pairs[..j].to_vec(),
        ..dialogue.clone()
    }
}

/// Labels each turn pair `correct`, `incorrect` or `na`.
pub fn annotate_correctness(
    dialogue: &AnnotatedDialogue,
    client: &dyn ChatClient,
    options: &AnnotateOptions,
) -> std::result::Result<StageOutput<Vec<Correctness>>, AnnotationFailure> {
    let mut ex = Exchange::new(client, options);
    let m = dialogue.pairs.len();
    if m == 0 {
        return ex.fail("dialogue has no turn pairs");
    }
    let labels = match options.mode {
        AnnotationMode::FullDialogue => {
            match ex.ask("correctness", &prompts::correctness_prompt(dialogue), |t| parse::parse_correctness(t, m)) {
                Ok(l) => l,
                Err(e) => return ex.fail(e),
            }
        }
        AnnotationMode::Incremental => {
            let mut labels = Vec::with_capacity(m);
            for j in 1..=m {
                let view = prefix(dialogue, j);
                match ex.ask(&format!("correctness@{j}"), &prompts::correctness_prompt(&view), |t| parse::parse_correctness(t, j)) {
                    Ok(l) => labels.push(l[j - 1]),
                    Err(e) => return ex.fail(e),
                }
            }
            labels
        }
    };
    Ok(StageOutput {
        value: labels,
        raw: ex.raw,
        notes: Vec::new(),
    })
}

fn keep_candidates(selected: Vec<String>, candidates: &[String], stage: &str, notes: &mut Vec<String>) -> Vec<String> {
    let allowed: BTreeSet<&str> = candidates.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for id in selected {
        if !allowed.contains(id.as_str()) {
            log::warn!("{stage}: dropping id `{id}` outside the candidate set");
            notes.push(format!("{stage}: dropped `{id}` (not a candidate)"));
        } else if seen.insert(id.clone()) {
            out.push(id);
        }
    }
    out
}

fn kcs_once(
    ex: &mut Exchange<'_>,
    dialogue: &AnnotatedDialogue,
    taxonomy: &Taxonomy,
    notes: &mut Vec<String>,
    tag: &str,
) -> std::result::Result<KcAssignment, String> {
    let max = ex.options.max_description_chars;
    let m = dialogue.pairs.len();
    let all_domains = taxonomy.ids(Level::Domain);
    let listing = taxonomy
        .render_candidates(Level::Domain, all_domains.iter().map(String::as_str), max)
        .map_err(|e| e.to_string())?;
    let picked = ex.ask(&format!("domains{tag}"), &prompts::domain_prompt(dialogue, &listing), |t| parse::parse_selection(t, "domains"))?;
    let domains = keep_candidates(picked, &all_domains, "domains", notes);
    if domains.is_empty() {
        return Err("empty domain selection".into());
    }

    let cluster_candidates = taxonomy
        .children_union(Level::Domain, domains.iter().map(String::as_str))
        .map_err(|e| e.to_string())?;
    let listing = taxonomy
        .render_candidates(Level::Cluster, cluster_candidates.iter().map(String::as_str), max)
        .map_err(|e| e.to_string())?;
    let picked = ex.ask(&format!("clusters{tag}"), &prompts::cluster_prompt(dialogue, &listing), |t| parse::parse_selection(t, "clusters"))?;
    let clusters = keep_candidates(picked, &cluster_candidates, "clusters", notes);
    if clusters.is_empty() {
        return Err("empty cluster selection".into());
    }

    let standard_candidates = taxonomy
        .children_union(Level::Cluster, clusters.iter().map(String::as_str))
        .map_err(|e| e.to_string())?;
    let listing = taxonomy
        .render_candidates(Level::Standard, standard_candidates.iter().map(String::as_str), max)
        .map_err(|e| e.to_string())?;
    let per_turn = ex.ask(&format!("standards{tag}"), &prompts::standard_prompt(dialogue, &listing), |t| parse::parse_standards(t, m))?;
    let standards = per_turn
        .into_iter()
        .map(|ids| keep_candidates(ids, &standard_candidates, "standards", notes))
        .collect();
    Ok(KcAssignment {
        domains,
        clusters,
        standards,
    })
}

/// Assigns standards per turn pair through domain and cluster selection.
pub fn annotate_kcs(
    dialogue: &AnnotatedDialogue,
    client: &dyn ChatClient,
    taxonomy: &Taxonomy,
    options: &AnnotateOptions,
) -> std::result::Result<StageOutput<KcAssignment>, AnnotationFailure> {
    let mut ex = Exchange::new(client, options);
    let mut notes = Vec::new();
    let m = dialogue.pairs.len();
    if m == 0 {
        return ex.fail("dialogue has no turn pairs");
    }
    let assignment = match options.mode {
        AnnotationMode::FullDialogue => kcs_once(&mut ex, dialogue, taxonomy, &mut notes, ""),
        AnnotationMode::Incremental => {
            let mut domains = BTreeSet::new();
            let mut clusters = BTreeSet::new();
            let mut standards = Vec::with_capacity(m);
            let mut outcome = Ok(());
            for j in 1..=m {
                match kcs_once(&mut ex, &prefix(dialogue, j), taxonomy, &mut notes, &format!("@{j}")) {
                    Ok(mut a) => {
                        domains.extend(a.domains);
                        clusters.extend(a.clusters);
                        standards.push(a.standards.pop().unwrap_or_default());
                    }
                    Err(e) => {
                        outcome = Err(e);
                        break;
                    }
                }
            }
            outcome.map(|_| KcAssignment {
                domains: domains.into_iter().collect(),
                clusters: clusters.into_iter().collect(),
                standards,
            })
        }
    };
    match assignment {
        Ok(value) => Ok(StageOutput {
            value,
            raw: ex.raw,
            notes,
        }),
        Err(e) => ex.fail(e),
    }
}

/// Runs the enabled annotation tasks on one dialogue.
pub fn annotate_dialogue(
    dialogue: &AnnotatedDialogue,
    client: &dyn ChatClient,
    taxonomy: Option<&Taxonomy>,
    options: &AnnotateOptions,
) -> AnnotationResult {
    let mut result = AnnotationResult {
        dialogue_id: dialogue.id.clone(),
        ..Default::default()
    };
    let mut failures = Vec::new();
    if options.tasks.correctness {
        match annotate_correctness(dialogue, client, options) {
            Ok(out) => {
                result.labels = Some(out.value);
                result.raw.extend(out.raw);
                result.notes.extend(out.notes);
            }
            Err(f) => {
                result.raw.extend(f.raw);
                failures.push(format!("correctness: {}", f.reason));
            }
        }
    }
    if options.tasks.kcs {
        match taxonomy {
            None => failures.push("kcs: no taxonomy loaded".into()),
            Some(tax) => match annotate_kcs(dialogue, client, tax, options) {
                Ok(out) => {
                    result.domains = out.value.domains;
                    result.clusters = out.value.clusters;
                    result.standards = Some(out.value.standards);
                    result.raw.extend(out.raw);
                    result.notes.extend(out.notes);
                }
                Err(f) => {
                    result.raw.extend(f.raw);
                    failures.push(format!("kcs: {}", f.reason));
                }
            },
        }
    }
    if let (Some(labels), Some(standards)) = (&result.labels, &result.standards) {
        result.low_coverage = labels
            .iter()
            .zip(standards)
            .enumerate()
            .filter(|(_, (l, s))| l.label().is_some() && s.is_empty())
            .map(|(i, _)| i + 1)
            .collect();
    }
    if !failures.is_empty() {
        result.failure = Some(failures.join("; "));
    }
    result
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub cache_hits: usize,
    pub failures: Vec<SkippedDialogue>,
}

#[derive(Debug, Clone)]
pub struct CorpusAnnotation {
    pub results: Vec<AnnotationResult>,
    pub summary: AnnotationSummary,
}

/// Annotates a batch with up to `options.parallelism` concurrent dialogues.
///
/// Successful results are cached (when a cache is given) under
/// (dialogue content, prompt version, model id, tasks); cached dialogues issue
/// no client calls. Per-dialogue failures are collected, never raised.
pub fn annotate_corpus(
    dialogues: &[AnnotatedDialogue],
    client: &dyn ChatClient,
    taxonomy: Option<&Taxonomy>,
    options: &AnnotateOptions,
    cache: Option<&ResultCache>,
) -> Result<CorpusAnnotation> {
    if options.parallelism == 0 {
        return Err(Error::invalid("parallelism must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let hits = AtomicUsize::new(0);
    let results: Vec<Result<AnnotationResult>> = pool.install(|| {
        dialogues
            .par_iter()
            .map(|d| {
                let key = ResultCache::key(d, client.model_id(), options.tasks);
                if let Some(hit) = cache.and_then(|c| c.get(&key)) {
                    hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(hit);
                }
                let result = annotate_dialogue(d, client, taxonomy, options);
                if let (Some(c), true) = (cache, result.is_success()) {
                    c.put(&key, &result)?;
                }
                Ok(result)
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let failures: Vec<SkippedDialogue> = results
        .iter()
        .filter_map(|r| {
            r.failure.as_ref().map(|reason| SkippedDialogue {
                id: r.dialogue_id.clone(),
                reason: reason.clone(),
            })
        })
        .collect();
    let summary = AnnotationSummary {
        total: results.len(),
        succeeded: results.len() - failures.len(),
        failed: failures.len(),
        cache_hits: hits.into_inner(),
        failures,
    };
    Ok(CorpusAnnotation { results, summary })
}

/// Applies annotation results to their dialogues for tracing.
///
/// `na` pairs export with no KCs, and labeled pairs that received no
/// standard export as `na`. Fields of a disabled task keep the input values.
/// Every exported KC must resolve in `taxonomy` when one is given.
pub fn export_annotated(
    dialogues: &[AnnotatedDialogue],
    results: &[AnnotationResult],
    taxonomy: Option<&Taxonomy>,
    only_successful: bool,
) -> Result<Vec<AnnotatedDialogue>> {
    let by_id: HashMap<&str, &AnnotationResult> = results.iter().map(|r| (r.dialogue_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for d in dialogues {
        let result = by_id.get(d.id.as_str()).copied();
        let Some(result) = result.filter(|r| r.is_success()) else {
            if !only_successful {
                out.push(d.clone());
            }
            continue;
        };
        let mut d = d.clone();
        if let Some(labels) = &result.labels {
            if labels.len() != d.pairs.len() {
                return Err(Error::invalid(format!("result for {} has {} labels for {} pairs", d.id, labels.len(), d.pairs.len())));
            }
            for (pair, label) in d.pairs.iter_mut().zip(labels) {
                pair.correctness = *label;
            }
        }
        if let Some(standards) = &result.standards {
            if standards.len() != d.pairs.len() {
                return Err(Error::invalid(format!("result for {} has {} standard sets for {} pairs", d.id, standards.len(), d.pairs.len())));
            }
            for (pair, kcs) in d.pairs.iter_mut().zip(standards) {
                pair.kcs = kcs.clone();
            }
        }
        for pair in &mut d.pairs {
            if !pair.is_labeled() {
                pair.kcs.clear();
            } else if pair.kcs.is_empty() {
                pair.correctness = Correctness::Na;
            }
            if let Some(tax) = taxonomy {
                if let Some(bad) = pair.kcs.iter().find(|k| !tax.contains(Level::Standard, k)) {
                    return Err(Error::invalid(format!("dialogue {} pair {}: KC `{}` is not a taxonomy standard", d.id, pair.j, bad)));
                }
            }
        }
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}
