//! Prompt assembly for the annotation flows. Every function here is pure in
//! (dialogue, candidate listing); golden files under `tests/golden` pin the text.

use super::client::ChatMessage;
use crate::corpus::AnnotatedDialogue;

pub const SYSTEM_PROMPT: &str = "You are an experienced math teacher who annotates tutoring dialogues between a tutor and a student. You always answer with a single JSON object and nothing else.";

/// Numbered transcript shared by every annotation prompt.
pub fn render_dialogue(dialogue: &AnnotatedDialogue) -> String {
    let mut out = String::new();
    if let Some(opener) = &dialogue.opener {
        out.push_str("[Opening]\nStudent: ");
        out.push_str(opener);
        out.push_str("\n\n");
    }
    for pair in &dialogue.pairs {
        out.push_str(&format!(
            "[Turn pair {}]\nTutor: {}\nStudent: {}\n\n",
            pair.j, pair.tutor_text, pair.student_text
        ));
    }
    out.trim_end().to_string()
}

fn messages(user: String) -> Vec<ChatMessage> {
    vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(user)]
}

pub fn correctness_prompt(dialogue: &AnnotatedDialogue) -> Vec<ChatMessage> {
    let m = dialogue.pairs.len();
    messages(format!(
        "Below is a tutoring dialogue split into {m} numbered turn pairs. Each turn pair is a tutor turn followed by the student's reply.\n\
\n\
For every turn pair, first summarize what the tutor asks and how the student responds. Then label the student's reply:\n\
- \"correct\": the student correctly responds to the task posed by the tutor.\n\
- \"incorrect\": the reply contains an error or a misconception.\n\
- \"na\": correctness is not well-defined, e.g. the turn is off-topic, the tutor offers emotional support, or no task is posed.\n\
\n\
Respond with JSON in exactly this format, with one entry per turn pair in order:\n\
{{\"turns\": [{{\"j\": 1, \"summary\": \"...\", \"label\": \"correct\"}}]}}\n\
\n\
Dialogue:\n\
{}",
        render_dialogue(dialogue)
    ))
}

pub fn domain_prompt(dialogue: &AnnotatedDialogue, candidates: &str) -> Vec<ChatMessage> {
    messages(format!(
        "Below is a tutoring dialogue and a list of Common Core math domains.\n\
\n\
First summarize the dialogue and its learning objectives. Then select every domain that is relevant to those learning objectives, using the ids from the list.\n\
\n\
Respond with JSON in exactly this format:\n\
{{\"summary\": \"...\", \"domains\": [\"<id>\"]}}\n\
\n\
Domains:\n\
{candidates}\n\
\n\
Dialogue:\n\
{}",
        render_dialogue(dialogue)
    ))
}

pub fn cluster_prompt(dialogue: &AnnotatedDialogue, candidates: &str) -> Vec<ChatMessage> {
    messages(format!(
        "Below is a tutoring dialogue and a list of Common Core math clusters.\n\
\n\
First summarize each turn pair of the dialogue. Then select every cluster that is relevant to the learning objectives of the dialogue as a whole, using the ids from the list.\n\
\n\
Respond with JSON in exactly this format:\n\
{{\"turn_summaries\": [{{\"j\": 1, \"summary\": \"...\"}}], \"clusters\": [\"<id>\"]}}\n\
\n\
Clusters:\n\
{candidates}\n\
\n\
Dialogue:\n\
{}",
        render_dialogue(dialogue)
    ))
}

pub fn standard_prompt(dialogue: &AnnotatedDialogue, candidates: &str) -> Vec<ChatMessage> {
    let m = dialogue.pairs.len();
    messages(format!(
        "Below is a tutoring dialogue split into {m} numbered turn pairs and a list of Common Core math standards.\n\
\n\
For every turn pair, first summarize the task the tutor poses. Then assign the standards, using the ids from the list, whose knowledge the student needs to respond correctly to that task. Use an empty list when the turn pair poses no math task.\n\
\n\
Respond with JSON in exactly this format, with one entry per turn pair in order:\n\
{{\"turns\": [{{\"j\": 1, \"summary\": \"...\", \"standards\": [\"<id>\"]}}]}}\n\
\n\
Standards:\n\
{candidates}\n\
\n\
Dialogue:\n\
{}",
        render_dialogue(dialogue)
    ))
}
