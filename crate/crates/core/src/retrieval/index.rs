use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::tensor::{dot, l2_norm, Tensor};

use super::RetrievalError;

const KIND: &str = "index";

/// Unit-normalized document embeddings with their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Index {
    ids: Vec<String>,
    /// `len × dim`, every row of unit norm.
    vectors: Tensor,
    dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Hits of one query in descending score order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

fn check_vector(id: &str, v: &[f64]) -> Result<f64, RetrievalError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RetrievalError::NonFinite(id.to_string()));
    }
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(RetrievalError::ZeroVector(id.to_string()));
    }
    Ok(n)
}

/// Builds an index, normalizing every vector on insert.
pub fn build_index<I, S, V>(embeddings: I) -> Result<Index, RetrievalError>
where
    I: IntoIterator<Item = (S, V)>,
    S: Into<String>,
    V: AsRef<[f64]>,
{
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (id, v) in embeddings {
        let id = id.into();
        let v = v.as_ref();
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(RetrievalError::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                })
            }
            _ => {}
        }
        if !seen.insert(id.clone()) {
            return Err(RetrievalError::DuplicateId(id));
        }
        let n = check_vector(&id, v)?;
        data.extend(v.iter().map(|x| x / n));
        ids.push(id);
    }
    let rows = ids.len();
    Ok(Index {
        ids,
        vectors: Tensor::from_vec(rows, dim.unwrap_or(0), data),
        dim,
    })
}

impl Index {
    /// Index over the rows of `embeddings`, named by `ids`.
    pub fn from_rows(ids: Vec<String>, embeddings: &Tensor) -> Result<Self, RetrievalError> {
        if ids.len() != embeddings.rows() {
            return Err(RetrievalError::DimensionMismatch {
                expected: embeddings.rows(),
                found: ids.len(),
            });
        }
        build_index(ids.into_iter().zip(embeddings.iter_rows()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Embedding width, unknown for an index built from nothing.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), RetrievalError> {
        Container {
            kind: KIND.into(),
            meta: serde_json::json!({ "ids": self.ids, "dim": self.dim }),
            tensors: vec![("embeddings".into(), self.vectors.clone())],
        }
        .write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, RetrievalError> {
        let c = Container::read_from(r)?;
        c.expect_kind(KIND)?;
        let bad = |m: &str| crate::container::ContainerError::Header(m.to_string());
        let ids: Vec<String> = serde_json::from_value(c.meta["ids"].clone()).map_err(|_| bad("index ids"))?;
        let dim: Option<usize> = serde_json::from_value(c.meta["dim"].clone()).map_err(|_| bad("index dim"))?;
        let [(name, vectors)] = <[(String, Tensor); 1]>::try_from(c.tensors).map_err(|_| bad("one tensor expected"))?;
        if name != "embeddings" || vectors.rows() != ids.len() || dim.is_some_and(|d| d != vectors.cols()) {
            return Err(bad("embedding table does not match ids").into());
        }
        // Files may come from elsewhere; hold them to the build invariants.
        let mut seen = HashSet::new();
        for (id, row) in ids.iter().zip(vectors.iter_rows()) {
            if !seen.insert(id) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
            if (check_vector(id, row)? - 1.0).abs() > 1e-6 {
                return Err(bad(&format!("vector `{id}` is not unit-normalized")).into());
            }
        }
        Ok(Index { ids, vectors, dim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact cosine top-`k` (capped at the index size).
pub fn search(index: &Index, query_id: &str, query: &[f64], k: usize) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if index.is_empty() {
        return Ok(RankedList {
            query_id: query_id.to_string(),
            hits: Vec::new(),
        });
    }
    let dim = index.dim.expect("non-empty index has a dimension");
    if query.len() != dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            found: query.len(),
        });
    }
    let n = check_vector(query_id, query)?;
    let mut scored: Vec<(f64, &str)> = (0..index.len())
        .map(|i| (dot(index.vector(i), query) / n, index.ids[i].as_str()))
        .collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(RankedList {
        query_id: query_id.to_string(),
        hits: scored
            .into_iter()
            .map(|(score, id)| Hit {
                doc_id: id.to_string(),
                score,
            })
            .collect(),
    })
}

/// [`search`] for many queries, run in parallel on the current rayon pool.
/// The output order follows `queries`.
pub fn search_batch(
    index: &Index,
    queries: &[(String, Vec<f64>)],
    k: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    queries
        .par_iter()
        .map(|(id, v)| search(index, id, v, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Index {
        build_index((0..n).map(|i| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (format!("d{i:04}"), v)
        }))
        .unwrap()
    }

    #[test]
    fn empty_index_returns_empty_lists() {
        let index = build_index(Vec::<(String, Vec<f64>)>::new()).unwrap();
        assert!(index.is_empty());
        assert!(search(&index, "q", &[1.0, 2.0], 5).unwrap().hits.is_empty());
    }

    #[test]
    fn stored_vectors_are_unit_and_rank_themselves_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let index = random_index(&mut rng, 50, 6);
        for i in 0..index.len() {
            assert!((l2_norm(index.vector(i)) - 1.0).abs() < 1e-12);
            let hits = search(&index, "q", index.vector(i), 3).unwrap().hits;
            assert_eq!(hits[0].doc_id, index.ids()[i]);
            assert!((hits[0].score - 1.0).abs() < 1e-12);
        }
        let again = build_index((0..index.len()).map(|i| (index.ids()[i].clone(), index.vector(i).to_vec()))).unwrap();
        assert!(again.vectors.max_abs_diff(&index.vectors) < 1e-15);
    }

    #[test]
    fn ties_go_to_lower_id_regardless_of_insertion() {
        let a = build_index([("b", vec![1.0, 0.0]), ("a", vec![2.0, 0.0]), ("c", vec![0.0, 1.0])]).unwrap();
        let b = build_index([("c", vec![0.0, 1.0]), ("a", vec![2.0, 0.0]), ("b", vec![1.0, 0.0])]).unwrap();
        for index in [&a, &b] {
            let ids: Vec<String> = search(index, "q", &[1.0, 0.5], 10).unwrap().hits.into_iter().map(|h| h.doc_id).collect();
            assert_eq!(ids, ["a", "b", "c"]);
        }
    }

    #[test]
    fn k_capped_and_errors() {
        let index = build_index([("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        assert_eq!(search(&index, "q", &[1.0, 1.0], 10).unwrap().hits.len(), 2);
        assert!(matches!(search(&index, "q", &[1.0], 1), Err(RetrievalError::DimensionMismatch { .. })));
        assert!(matches!(search(&index, "q", &[1.0, 1.0], 0), Err(RetrievalError::ZeroK)));
        assert!(matches!(
            build_index([("a", vec![1.0]), ("a", vec![2.0])]),
            Err(RetrievalError::DuplicateId(_))
        ));
        assert!(matches!(
            build_index([("a", vec![1.0]), ("b", vec![2.0, 1.0])]),
            Err(RetrievalError::DimensionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(build_index([("z", vec![0.0, 0.0])]), Err(RetrievalError::ZeroVector(_))));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let index = random_index(&mut rng, 1000, 8);
        for q in 0..50 {
            let query: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = 1 + q * 7;
            let got = search(&index, "q", &query, k).unwrap();
            let qn = l2_norm(&query);
            let mut all: Vec<(f64, String)> = (0..index.len())
                .map(|i| (dot(index.vector(i), &query) / qn, index.ids()[i].clone()))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<(f64, String)> = all.into_iter().take(k).collect();
            let got: Vec<(f64, String)> = got.hits.into_iter().map(|h| (h.score, h.doc_id)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn batch_search_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let index = random_index(&mut rng, 100, 4);
        let queries: Vec<(String, Vec<f64>)> = (0..20)
            .map(|i| (format!("q{i}"), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let batch = search_batch(&index, &queries, 5).unwrap();
        for ((id, v), got) in queries.iter().zip(&batch) {
            assert_eq!(got, &search(&index, id, v, 5).unwrap());
        }
    }

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let index = random_index(&mut rng, 10, 3);
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        assert_eq!(Index::read_from(buf.as_slice()).unwrap(), index);
    }
}
