//! BEIR-layout files: `corpus.jsonl`, `queries.jsonl`, `qrels/*.tsv`, plus
//! a tab-separated run format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hit, Qrels, RankedList, RetrievalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Text that gets encoded for a document: title and body joined by a space.
pub fn document_text(doc: &CorpusDoc) -> String {
    if doc.title.is_empty() {
        doc.text.clone()
    } else {
        format!("{} {}", doc.title, doc.text)
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> RetrievalError {
    RetrievalError::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RetrievalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn check_unique<'a>(path: &Path, ids: impl Iterator<Item = &'a String>) -> Result<(), RetrievalError> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(RetrievalError::DuplicateId(format!("{id} (in {})", path.display())));
        }
    }
    Ok(())
}

/// Reads `{"_id", "title", "text"}` records, one per line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusDoc>, RetrievalError> {
    let path = path.as_ref();
    let docs: Vec<CorpusDoc> = read_jsonl(path)?;
    check_unique(path, docs.iter().map(|d| &d.id))?;
    Ok(docs)
}

/// Reads `{"_id", "text"}` records, one per line.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, RetrievalError> {
    let path = path.as_ref();
    let queries: Vec<QueryRecord> = read_jsonl(path)?;
    check_unique(path, queries.iter().map(|q| &q.id))?;
    Ok(queries)
}

/// Reads `query-id<TAB>corpus-id<TAB>score` lines after one header line.
pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels, RetrievalError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut qrels = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [q, d, g] = fields[..] else {
            return Err(parse_error(path, i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let grade: u32 = g
            .trim()
            .parse()
            .map_err(|_| parse_error(path, i + 1, format!("grade `{g}` is not a non-negative integer")))?;
        qrels.insert(q, d, grade);
    }
    Ok(qrels)
}

pub fn write_qrels<W: Write>(qrels: &Qrels, mut w: W) -> Result<(), RetrievalError> {
    writeln!(w, "query-id\tcorpus-id\tscore")?;
    for (q, d, g) in qrels.iter() {
        writeln!(w, "{q}\t{d}\t{g}")?;
    }
    Ok(())
}

/// Writes `query-id<TAB>doc-id<TAB>rank<TAB>score` lines, ranks from 1.
pub fn write_run<W: Write>(runs: &[RankedList], mut w: W) -> Result<(), RetrievalError> {
    for run in runs {
        for (r, hit) in run.hits.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", run.query_id, hit.doc_id, r + 1, hit.score)?;
        }
    }
    Ok(())
}

/// Reads a run written by [`write_run`]. Hits are ordered by rank; queries
/// come back sorted by id.
pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RankedList>, RetrievalError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut by_query: BTreeMap<String, Vec<(usize, Hit)>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [q, d, r, s] = fields[..] else {
            return Err(parse_error(path, i + 1, format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let rank: usize = r.parse().map_err(|_| parse_error(path, i + 1, format!("bad rank `{r}`")))?;
        let score: f64 = s.parse().map_err(|_| parse_error(path, i + 1, format!("bad score `{s}`")))?;
        by_query.entry(q.to_string()).or_default().push((
            rank,
            Hit {
                doc_id: d.to_string(),
                score,
            },
        ));
    }
    Ok(by_query
        .into_iter()
        .map(|(query_id, mut hits)| {
            hits.sort_by_key(|(r, _)| *r);
            RankedList {
                query_id,
                hits: hits.into_iter().map(|(_, h)| h).collect(),
            }
        })
        .collect())
}
