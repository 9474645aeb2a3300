use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dialogue_kt::annotator::prompts::{cluster_prompt, correctness_prompt, domain_prompt, standard_prompt};
use dialogue_kt::annotator::{annotate_corpus, export_annotated, AnnotateOptions, ChatClient, ChatMessage, ClientError, FnClient, KeywordClient, ResultCache};
use dialogue_kt::corpus::{ingest_dataset, AnnotatedDialogue, DatasetFormat, IngestOptions, Role};
use dialogue_kt::taxonomy::{Level, Taxonomy};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn taxonomy() -> Taxonomy {
    Taxonomy::load(&fixture("taxonomy.json")).unwrap()
}

fn sample_dialogue() -> AnnotatedDialogue {
    let msgs = [
        (Role::Student, "Can you help me with equations?"),
        (Role::Tutor, "Sure. Solve x + 4 = 10. What is x?"),
        (Role::Student, "x = 6"),
        (Role::Tutor, "Great. Now write an expression for 3 less than y."),
        (Role::Student, "3 - y?"),
    ];
    AnnotatedDialogue::from_messages("golden", &msgs, BTreeMap::new()).unwrap()
}

fn render(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| format!("### {}\n{}\n", m.role, m.content)).collect::<Vec<_>>().join("\n")
}

fn check_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "prompt drifted from {}", path.display());
}

#[test]
fn prompts_match_golden_files() {
    let d = sample_dialogue();
    let tax = taxonomy();
    let domains = tax.render_candidates(Level::Domain, tax.ids(Level::Domain).iter().map(String::as_str), Some(300)).unwrap();
    let clusters = tax.children_union(Level::Domain, ["EE"]).unwrap();
    let clusters = tax.render_candidates(Level::Cluster, clusters.iter().map(String::as_str), Some(300)).unwrap();
    let standards = tax.children_union(Level::Cluster, ["6.EE.A", "6.EE.B"]).unwrap();
    let standards = tax.render_candidates(Level::Standard, standards.iter().map(String::as_str), Some(60)).unwrap();
    check_golden("correctness.txt", &render(&correctness_prompt(&d)));
    check_golden("domains.txt", &render(&domain_prompt(&d, &domains)));
    check_golden("clusters.txt", &render(&cluster_prompt(&d, &clusters)));
    check_golden("standards.txt", &render(&standard_prompt(&d, &standards)));
}

fn synthetic_corpus(n: usize) -> Vec<AnnotatedDialogue> {
    (0..n)
        .map(|i| {
            let msgs = [
                (Role::Tutor, format!("Dialogue {i}: solve x + 2 = 5. What is x?")),
                (Role::Student, "x = 3".to_string()),
                (Role::Tutor, "What is the unit rate of 6 miles in 2 hours?".to_string()),
                (Role::Student, "Maybe 4? not sure".to_string()),
            ];
            AnnotatedDialogue::from_messages(format!("md-{i:04}"), &msgs, BTreeMap::new()).unwrap()
        })
        .collect()
}

#[test]
fn scripted_failures_are_removed_from_export() {
    let dialogues = synthetic_corpus(2848);
    let failing: Vec<usize> = (0..25).map(|k| k * 113 + 7).collect();
    let offline = KeywordClient::new();
    let client = FnClient::new("scripted", |messages: &[ChatMessage]| -> Result<String, ClientError> {
        let user = &messages[1].content;
        let broken = failing.iter().any(|i| user.contains(&format!("Dialogue {i}:")));
        if broken && !user.contains("Common Core math") {
            Ok("I could not follow this dialogue.".into())
        } else {
            offline.complete(messages, &Default::default())
        }
    });
    let options = AnnotateOptions {
        backoff_ms: 0,
        parallelism: 8,
        ..Default::default()
    };
    let tax = taxonomy();
    let out = annotate_corpus(&dialogues, &client, Some(&tax), &options, None).unwrap();
    assert_eq!(out.summary.total, 2848);
    assert_eq!(out.summary.failed, 25);
    let exported = export_annotated(&dialogues, &out.results, Some(&tax), true).unwrap();
    assert_eq!(exported.len(), 2823);
    for i in &failing {
        assert!(exported.iter().all(|d| d.id != format!("md-{i:04}")));
    }
    let kept_all = export_annotated(&dialogues, &out.results, Some(&tax), false).unwrap();
    assert_eq!(kept_all.len(), 2848);
}

#[test]
fn offline_annotation_of_fixture_corpus_is_cached_and_resolves() {
    let ingested = ingest_dataset(&fixture("comta_sample.json"), DatasetFormat::Comta, &IngestOptions::default()).unwrap();
    assert_eq!(ingested.dialogues.len(), 12);
    assert_eq!(ingested.excluded.len(), 2);
    let tax = taxonomy();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResultCache::new(dir.path());
    let client = FnClient::new("offline", |m: &[ChatMessage]| KeywordClient::new().complete(m, &Default::default()));
    let options = AnnotateOptions {
        backoff_ms: 0,
        ..Default::default()
    };
    let first = annotate_corpus(&ingested.dialogues, &client, Some(&tax), &options, Some(&cache)).unwrap();
    assert_eq!(first.summary.failed, 0);
    let calls = client.calls();
    let second = annotate_corpus(&ingested.dialogues, &client, Some(&tax), &options, Some(&cache)).unwrap();
    assert_eq!(client.calls(), calls);
    assert_eq!(second.summary.cache_hits, 12);
    let exported = export_annotated(&ingested.dialogues, &first.results, Some(&tax), true).unwrap();
    let standards = tax.ids(Level::Standard);
    for d in &exported {
        for p in &d.pairs {
            assert!(p.kcs.iter().all(|k| standards.contains(k)));
            assert_eq!(p.is_labeled(), !p.kcs.is_empty());
        }
    }
    assert!(exported.iter().all(AnnotatedDialogue::has_labels));
}
