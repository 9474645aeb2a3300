//! Response parsing: strict JSON first, then a fenced block, then the
//! outermost brace span.

use serde_json::Value;

use crate::corpus::Correctness;

pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str(body[..end].trim()) {
                return Some(v);
            }
        }
    }
    let (start, end) = (trimmed.find('{')?, trimmed.rfind('}')?);
    if start < end {
        if let Ok(v @ Value::Object(_)) = serde_json::from_str(&trimmed[start..=end]) {
            return Some(v);
        }
    }
    None
}

fn parse_label(raw: &Value) -> Option<Correctness> {
    let s = match raw {
        Value::String(s) => s.trim().to_ascii_lowercase(),
        Value::Number(n) => n.to_string(),
        Value::Null => "na".into(),
        _ => return None,
    };
    match s.as_str() {
        "correct" | "1" | "true" => Some(Correctness::Correct),
        "incorrect" | "0" | "false" => Some(Correctness::Incorrect),
        "na" | "n/a" | "none" => Some(Correctness::Na),
        _ => None,
    }
}

fn per_turn_entries(value: &Value, m: usize, what: &str) -> Result<Vec<Value>, String> {
    let turns = value
        .get("turns")
        .and_then(Value::as_array)
        .ok_or_else(|| "response has no `turns` list".to_string())?;
    if turns.len() != m {
        return Err(format!("{what} count mismatch: expected {m}, got {}", turns.len()));
    }
    let mut slots: Vec<Option<Value>> = vec![None; m];
    for (pos, entry) in turns.iter().enumerate() {
        let j = entry.get("j").and_then(Value::as_u64).map(|j| j as usize).unwrap_or(pos + 1);
        if j == 0 || j > m || slots[j - 1].is_some() {
            return Err(format!("{what} index mismatch at turn pair {j}"));
        }
        slots[j - 1] = Some(entry.clone());
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

pub fn parse_correctness(text: &str, m: usize) -> Result<Vec<Correctness>, String> {
    let value = extract_json(text).ok_or_else(|| "no JSON object in response".to_string())?;
    per_turn_entries(&value, m, "label")?
        .iter()
        .map(|e| {
            let raw = e.get("label").unwrap_or(&Value::Null);
            parse_label(raw).ok_or_else(|| format!("unknown label {raw}"))
        })
        .collect()
}

fn string_list(value: &Value, key: &str) -> Result<Vec<String>, String> {
    let list = value
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("response has no `{key}` list"))?;
    Ok(list
        .iter()
        .filter_map(|v| v.as_str().map(|s| s.trim().to_string()))
        .collect())
}

pub fn parse_selection(text: &str, key: &str) -> Result<Vec<String>, String> {
    let value = extract_json(text).ok_or_else(|| "no JSON object in response".to_string())?;
    string_list(&value, key)
}

pub fn parse_standards(text: &str, m: usize) -> Result<Vec<Vec<String>>, String> {
    let value = extract_json(text).ok_or_else(|| "no JSON object in response".to_string())?;
    per_turn_entries(&value, m, "standard")?
        .iter()
        .map(|e| match e.get("standards") {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(_) => string_list(e, "standards"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_fenced_and_embedded_json() {
        assert!(extract_json(r#"{"a": 1}"#).is_some());
        assert!(extract_json("Here you go:\n```json\n{\"a\": 1}\n```\nthanks").is_some());
        assert!(extract_json("prefix {\"a\": {\"b\": 2}} suffix").is_some());
        assert!(extract_json("no json here").is_none());
        assert!(extract_json("[1, 2]").is_none());
    }

    #[test]
    fn correctness_counts_and_indices() {
        let ok = r#"{"turns": [{"j": 2, "label": "incorrect"}, {"j": 1, "label": "Correct"}]}"#;
        assert_eq!(parse_correctness(ok, 2).unwrap(), vec![Correctness::Correct, Correctness::Incorrect]);
        let short = r#"{"turns": [{"j": 1, "label": "correct"}]}"#;
        assert!(parse_correctness(short, 2).unwrap_err().contains("label count mismatch"));
        let dup = r#"{"turns": [{"j": 1, "label": "correct"}, {"j": 1, "label": "na"}]}"#;
        assert!(parse_correctness(dup, 2).unwrap_err().contains("index mismatch"));
        let bad = r#"{"turns": [{"j": 1, "label": "maybe"}]}"#;
        assert!(parse_correctness(bad, 1).is_err());
    }

    #[test]
    fn standards_per_turn() {
        let text = r#"{"turns": [{"j": 1, "summary": "s", "standards": ["8.EE.A.1"]}, {"j": 2, "standards": []}]}"#;
        assert_eq!(parse_standards(text, 2).unwrap(), vec![vec!["8.EE.A.1".to_string()], vec![]]);
        assert_eq!(parse_selection(r#"{"domains": ["EE", " G "]}"#, "domains").unwrap(), vec!["EE", "G"]);
    }
}
