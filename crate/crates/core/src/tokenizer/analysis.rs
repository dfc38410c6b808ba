use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{TokenizerError, TokenizerModel};

/// Set comparison of two vocabularies by token string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub common_count: usize,
    pub only_a: usize,
    pub only_b: usize,
    /// `common_count / |vocab_a|`.
    pub common_fraction: f64,
}

/// Overlap of two token-string sets. The fraction is relative to `a`; an
/// empty `a` gives a fraction of 0.
pub fn vocab_overlap_sets<'a, A, B>(a: A, b: B) -> OverlapReport
where
    A: IntoIterator<Item = &'a str>,
    B: IntoIterator<Item = &'a str>,
{
    let a: BTreeSet<&str> = a.into_iter().collect();
    let b: BTreeSet<&str> = b.into_iter().collect();
    let common_count = a.intersection(&b).count();
    OverlapReport {
        common_count,
        only_a: a.len() - common_count,
        only_b: b.len() - common_count,
        common_fraction: if a.is_empty() {
            0.0
        } else {
            common_count as f64 / a.len() as f64
        },
    }
}

/// Exact intersection of two models' token strings (specials and the byte
/// alphabet included, so two byte-level models always share at least those).
pub fn vocab_overlap(a: &TokenizerModel, b: &TokenizerModel) -> OverlapReport {
    vocab_overlap_sets(
        a.tokens().iter().map(String::as_str),
        b.tokens().iter().map(String::as_str),
    )
}

/// One text sample, tagged with the source it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSample {
    pub source: String,
    pub text: String,
}

impl TokenSample {
    pub fn new(source: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            text: text.into(),
        }
    }
}

/// Token counts of one model over a shared sample list. Specials are not
/// counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTokenCounts {
    pub name: String,
    pub total: u64,
    pub per_source: BTreeMap<String, u64>,
    pub per_sample: Vec<u64>,
    /// Percentage change of `total` relative to the first model.
    pub delta_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCountReport {
    pub samples: usize,
    pub samples_per_source: BTreeMap<String, usize>,
    pub models: Vec<ModelTokenCounts>,
}

/// Counts the non-special tokens every model produces on the same samples.
pub fn corpus_token_stats(
    models: &[(&str, &TokenizerModel)],
    samples: &[TokenSample],
) -> Result<TokenCountReport, TokenizerError> {
    if samples.is_empty() {
        return Err(TokenizerError::NoSamples);
    }
    let mut samples_per_source = BTreeMap::new();
    for s in samples {
        *samples_per_source.entry(s.source.clone()).or_insert(0) += 1;
    }
    let mut counts: Vec<ModelTokenCounts> = models
        .iter()
        .map(|(name, model)| {
            let per_sample: Vec<u64> = samples
                .iter()
                .map(|s| model.encode_raw(&s.text).len() as u64)
                .collect();
            let mut per_source = BTreeMap::new();
            for (s, &n) in samples.iter().zip(&per_sample) {
                *per_source.entry(s.source.clone()).or_insert(0) += n;
            }
            ModelTokenCounts {
                name: name.to_string(),
                total: per_sample.iter().sum(),
                per_source,
                per_sample,
                delta_pct: 0.0,
            }
        })
        .collect();
    if let Some(base) = counts.first().map(|c| c.total) {
        for c in &mut counts {
            c.delta_pct = if base == 0 {
                0.0
            } else {
                100.0 * (c.total as f64 - base as f64) / base as f64
            };
        }
    }
    Ok(TokenCountReport {
        samples: samples.len(),
        samples_per_source,
        models: counts,
    })
}

impl TokenCountReport {
    /// Aligned text table: one row per source plus a total row, one column
    /// per model, and a final delta row.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["source".to_string(), "samples".to_string()];
        header.extend(self.models.iter().map(|m| m.name.clone()));
        rows.push(header);
        for (source, n) in &self.samples_per_source {
            let mut row = vec![source.clone(), n.to_string()];
            row.extend(self.models.iter().map(|m| m.per_source[source].to_string()));
            rows.push(row);
        }
        let mut total = vec!["total".to_string(), self.samples.to_string()];
        total.extend(self.models.iter().map(|m| m.total.to_string()));
        rows.push(total);
        let mut delta = vec!["delta".to_string(), String::new()];
        delta.extend(self.models.iter().map(|m| format!("{:+.2}%", m.delta_pct)));
        rows.push(delta);
        render_rows(&rows)
    }
}

impl OverlapReport {
    pub fn render_table(&self) -> String {
        render_rows(&[
            vec!["common".into(), self.common_count.to_string()],
            vec!["only_a".into(), self.only_a.to_string()],
            vec!["only_b".into(), self.only_b.to_string()],
            vec!["common_fraction".into(), format!("{:.4}", self.common_fraction)],
        ])
    }
}

fn render_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
