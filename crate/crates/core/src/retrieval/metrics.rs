use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{RankedList, RetrievalError};

/// Graded relevance judgments: query id → doc id → grade.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, grade: u32) {
        self.judgments.entry(query.into()).or_default().insert(doc.into(), grade);
    }

    pub fn get(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.judgments.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, &g)| (q, d, g)))
    }

    /// Number of judged queries.
    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

impl<Q: Into<String>, D: Into<String>> FromIterator<(Q, D, u32)> for Qrels {
    fn from_iter<I: IntoIterator<Item = (Q, D, u32)>>(iter: I) -> Self {
        let mut q = Qrels::new();
        for (query, doc, grade) in iter {
            q.insert(query, doc, grade);
        }
        q
    }
}

/// Mean of a per-query ranking metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingScore {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Queries that contributed to the mean.
    pub evaluated: usize,
    /// Queries skipped because no judged document is relevant.
    pub excluded: usize,
}

/// Applies `metric(judgments, run)` to every run whose query has at least
/// one relevant (grade > 0) document.
fn evaluate(
    runs: &[RankedList],
    qrels: &Qrels,
    k: usize,
    metric: impl Fn(&BTreeMap<String, u32>, &RankedList) -> f64,
) -> Result<RankingScore, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if runs.is_empty() {
        return Err(RetrievalError::NoRuns);
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    let mut seen = HashSet::new();
    for run in runs {
        if !seen.insert(run.query_id.as_str()) {
            return Err(RetrievalError::DuplicateQuery(run.query_id.clone()));
        }
        let judged = qrels
            .get(&run.query_id)
            .ok_or_else(|| RetrievalError::MissingQrels(run.query_id.clone()))?;
        if judged.values().all(|&g| g == 0) {
            excluded += 1;
            continue;
        }
        per_query.insert(run.query_id.clone(), metric(judged, run));
    }
    if per_query.is_empty() {
        return Err(RetrievalError::NoRelevant);
    }
    // Summing in id order makes the mean independent of run order.
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(RankingScore {
        mean,
        evaluated: per_query.len(),
        per_query,
        excluded,
    })
}

/// Mean over queries of `|relevant ∩ top-k| / |relevant|`.
pub fn recall_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<RankingScore, RetrievalError> {
    evaluate(runs, qrels, k, |judged, run| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let found = run
            .hits
            .iter()
            .take(k)
            .filter(|h| judged.get(&h.doc_id).is_some_and(|&g| g > 0))
            .count();
        found as f64 / relevant as f64
    })
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Mean nDCG@k with gain `2^grade − 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<RankingScore, RetrievalError> {
    evaluate(runs, qrels, k, |judged, run| {
        let actual = dcg(run.hits.iter().take(k).map(|h| judged.get(&h.doc_id).copied().unwrap_or(0)));
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        actual / dcg(ideal.into_iter().take(k))
    })
}
