use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        if s == "O" {
            return Some(Tag::Outside);
        }
        let (prefix, kind) = s.split_once('-')?;
        if kind.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Tag::Begin(kind.to_string())),
            "I" => Some(Tag::Inside(kind.to_string())),
            _ => None,
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(k) => write!(f, "B-{k}"),
            Tag::Inside(k) => write!(f, "I-{k}"),
        }
    }
}

/// One tagged document. Construction through [`IobDocument::new`] or the
/// readers guarantees the tag grammar: `I-T` only continues `B-T`/`I-T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IobDocument {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

/// An entity: token range `start..end` of one document, with its type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Position of the first grammar violation, if any.
fn grammar_violation(tags: &[Tag]) -> Option<(usize, String)> {
    let mut open: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => open = None,
            Tag::Begin(k) => open = Some(k),
            Tag::Inside(k) => {
                if open != Some(k.as_str()) {
                    let msg = match open {
                        None => format!("`I-{k}` does not continue an entity"),
                        Some(o) => format!("`I-{k}` continues an entity of type `{o}`"),
                    };
                    return Some((i, msg));
                }
            }
        }
    }
    None
}

impl IobDocument {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self, EvalError> {
        if tokens.len() != tags.len() {
            return Err(EvalError::Misaligned {
                doc: 0,
                message: format!("{} tokens but {} tags", tokens.len(), tags.len()),
            });
        }
        if let Some((i, message)) = grammar_violation(&tags) {
            return Err(EvalError::Format {
                line: i + 1,
                message,
            });
        }
        Ok(Self { tokens, tags })
    }

    /// Entity spans in order of appearance.
    pub fn spans(&self) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut current: Option<Span> = None;
        for (i, tag) in self.tags.iter().enumerate() {
            match tag {
                Tag::Inside(_) => {
                    if let Some(s) = current.as_mut() {
                        s.end = i + 1;
                    }
                }
                other => {
                    spans.extend(current.take());
                    if let Tag::Begin(k) = other {
                        current = Some(Span {
                            start: i,
                            end: i + 1,
                            kind: k.clone(),
                        });
                    }
                }
            }
        }
        spans.extend(current);
        spans
    }
}

/// Parses `token<TAB>tag` lines with blank lines between documents.
/// Errors carry 1-based line numbers.
pub fn parse_iob(text: &str) -> Result<Vec<IobDocument>, EvalError> {
    let mut docs = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut lines_of_doc = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, lines: &mut Vec<usize>| -> Result<(), EvalError> {
        if tokens.is_empty() {
            return Ok(());
        }
        if let Some((i, message)) = grammar_violation(tags) {
            return Err(EvalError::Format { line: lines[i], message });
        }
        docs.push(IobDocument {
            tokens: std::mem::take(tokens),
            tags: std::mem::take(tags),
        });
        lines.clear();
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut lines_of_doc)?;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [token, tag] = fields[..] else {
            return Err(EvalError::Format {
                line: line_no,
                message: format!("expected `token<TAB>tag`, found {} field(s)", fields.len()),
            });
        };
        let tag = Tag::parse(tag.trim()).ok_or_else(|| EvalError::Format {
            line: line_no,
            message: format!("`{tag}` is not an IOB tag"),
        })?;
        tokens.push(token.to_string());
        tags.push(tag);
        lines_of_doc.push(line_no);
    }
    flush(&mut tokens, &mut tags, &mut lines_of_doc)?;
    Ok(docs)
}

pub fn read_iob(path: impl AsRef<Path>) -> Result<Vec<IobDocument>, EvalError> {
    parse_iob(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Strict span F1, micro-averaged over all spans of all documents: a
/// predicted entity counts only if its boundaries and type both match.
pub fn entity_f1(pred: &[IobDocument], gold: &[IobDocument]) -> Result<EntityScores, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (d, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.tokens != g.tokens {
            return Err(EvalError::Misaligned {
                doc: d,
                message: "predicted and gold tokens differ".into(),
            });
        }
        let mut gold_spans: HashMap<Span, usize> = HashMap::new();
        for s in g.spans() {
            *gold_spans.entry(s).or_default() += 1;
            n_gold += 1;
        }
        for s in p.spans() {
            n_pred += 1;
            if let Some(c) = gold_spans.get_mut(&s).filter(|c| **c > 0) {
                *c -= 1;
                tp += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EntityScores {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: n_pred,
        gold: n_gold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(pairs: &[(&str, &str)]) -> IobDocument {
        IobDocument::new(
            pairs.iter().map(|(t, _)| t.to_string()).collect(),
            pairs.iter().map(|(_, g)| Tag::parse(g).unwrap()).collect(),
        )
        .unwrap()
    }

    const FIXTURE: &str = "Sea\tB-hazard\nlevel\tI-hazard\nrise\tI-hazard\n.\tO\n\nCMIP6\tB-model\nruns\tO\n";

    #[test]
    fn parses_documents() {
        assert!(parse_iob("").unwrap().is_empty());
        let docs = parse_iob(FIXTURE).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].spans(), vec![Span { start: 0, end: 3, kind: "hazard".into() }]);
        assert_eq!(docs[1].tokens, ["CMIP6", "runs"]);
    }

    #[test]
    fn grammar_errors_carry_line_numbers() {
        assert_eq!(
            parse_iob("a\tO\n\nb\tI-x\n"),
            Err(EvalError::Format {
                line: 3,
                message: "`I-x` does not continue an entity".into()
            })
        );
        assert!(matches!(parse_iob("a\tB-x\nb\tI-y\n"), Err(EvalError::Format { line: 2, .. })));
        assert!(matches!(parse_iob("a\tO\nb\n"), Err(EvalError::Format { line: 2, .. })));
        assert!(matches!(parse_iob("a\tX-y\n"), Err(EvalError::Format { line: 1, .. })));
    }

    #[test]
    fn identical_tags_score_one_and_empty_prediction_zero() {
        let gold = parse_iob(FIXTURE).unwrap();
        assert_eq!(entity_f1(&gold, &gold).unwrap().f1, 1.0);
        let none: Vec<IobDocument> = gold
            .iter()
            .map(|d| IobDocument::new(d.tokens.clone(), vec![Tag::Outside; d.tokens.len()]).unwrap())
            .collect();
        let s = entity_f1(&none, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn spurious_span_halves_precision() {
        let gold = vec![doc(&[("a", "B-x"), ("b", "I-x"), ("c", "O"), ("d", "O")])];
        let pred = vec![doc(&[("a", "B-x"), ("b", "I-x"), ("c", "O"), ("d", "B-y")])];
        let s = entity_f1(&pred, &gold).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn boundaries_and_types_must_match() {
        let gold = vec![doc(&[("a", "B-x"), ("b", "I-x"), ("c", "B-x")])];
        let shorter = vec![doc(&[("a", "B-x"), ("b", "O"), ("c", "B-y")])];
        assert_eq!(entity_f1(&shorter, &gold).unwrap().true_positives, 0);
        let misaligned = vec![doc(&[("a", "O"), ("z", "O"), ("c", "O")])];
        assert!(matches!(entity_f1(&misaligned, &gold), Err(EvalError::Misaligned { doc: 0, .. })));
    }
}
