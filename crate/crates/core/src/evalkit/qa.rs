use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Lowercases, drops ASCII punctuation and the articles `a`, `an`, `the`,
/// and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn best_over<'a>(golds: &'a [String], f: impl Fn(&str) -> f64) -> f64 {
    if golds.is_empty() {
        return f("");
    }
    golds.iter().map(|g| f(g)).fold(0.0, f64::max)
}

/// Best token-overlap F1 of `pred` against any gold answer. No gold answers
/// (or only empty ones) marks the question unanswerable: an empty
/// prediction then scores 1, anything else 0.
pub fn qa_f1(pred: &str, golds: &[String]) -> f64 {
    best_over(golds, |g| f1_single(pred, g))
}

/// 1 when `pred` equals some gold answer after normalization.
pub fn qa_exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    best_over(golds, |g| if normalize_answer(g) == p { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub context: String,
    pub question: String,
    /// Empty for unanswerable questions.
    pub answers: Vec<String>,
}

#[derive(Deserialize)]
struct RawAnswer {
    text: String,
    #[serde(default)]
    #[allow(dead_code)]
    answer_start: Option<usize>,
}

#[derive(Deserialize)]
struct RawExample {
    context: String,
    question: String,
    #[serde(default)]
    answers: Vec<RawAnswer>,
}

/// Reads a JSON list of `{context, question, answers: [{text, answer_start}]}`.
/// Every non-empty answer must occur in its context.
pub fn read_qa_json(path: impl AsRef<Path>) -> Result<Vec<QaExample>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let raw: Vec<RawExample> = serde_json::from_str(&text).map_err(|e| EvalError::Format {
        line: e.line(),
        message: e.to_string(),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let answers: Vec<String> = r.answers.into_iter().map(|a| a.text).filter(|t| !t.is_empty()).collect();
            if let Some(a) = answers.iter().find(|a| !r.context.contains(a.as_str())) {
                return Err(EvalError::Misaligned {
                    doc: i,
                    message: format!("answer `{a}` does not occur in the context"),
                });
            }
            Ok(QaExample {
                context: r.context,
                question: r.question,
                answers,
            })
        })
        .collect()
}
