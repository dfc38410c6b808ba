use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerModel;

use super::{build_index, search, CorpusDoc, QueryRecord, RankedList, RetrievalError};

/// Wall-clock breakdown of one retrieval run, in seconds.
///
/// Query-side figures are means over queries, each query being encoded on
/// its own and then searched. Corpus encoding is reported both as a total
/// and amortized over the queries; `end_to_end_amortized_per_query` folds
/// it into the per-query figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub workers: usize,
    pub corpus_size: usize,
    pub queries: usize,
    pub k: usize,
    pub corpus_encode_total: f64,
    pub corpus_encode_per_query: f64,
    pub query_encode_per_query: f64,
    pub search_per_query: f64,
    /// Encode plus search of one query, timed as a whole.
    pub end_to_end_per_query: f64,
    pub end_to_end_amortized_per_query: f64,
}

const CORPUS_CHUNK: usize = 64;

fn run<C, Q, F>(
    encoder: &Encoder,
    corpus: &[(String, C)],
    queries: &[(String, Q)],
    k: usize,
    workers: usize,
    to_ids: F,
) -> Result<(Vec<RankedList>, TimingReport), RetrievalError>
where
    C: Sync,
    Q: Sync,
    F: Fn(Either<&C, &Q>) -> Vec<u32> + Sync,
{
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyInput { input: "corpus" });
    }
    if queries.is_empty() {
        return Err(RetrievalError::EmptyInput { input: "query set" });
    }
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;

    pool.install(|| {
        let started = Instant::now();
        let chunks: Vec<Tensor> = corpus
            .par_chunks(CORPUS_CHUNK)
            .map(|chunk| {
                let ids: Vec<Vec<u32>> = chunk.iter().map(|(_, c)| to_ids(Either::Left(c))).collect();
                encoder.embed(&ids)
            })
            .collect::<Result<_, _>>()?;
        let rows = chunks.iter().flat_map(|t| t.iter_rows());
        let index = build_index(corpus.iter().map(|(id, _)| id.clone()).zip(rows))?;
        let corpus_encode_total = started.elapsed().as_secs_f64();

        let per_query: Vec<(f64, f64, f64, RankedList)> = queries
            .par_iter()
            .map(|(id, q)| {
                let start = Instant::now();
                let emb = encoder.embed(&[to_ids(Either::Right(q))])?;
                let encode = start.elapsed().as_secs_f64();
                let searched = Instant::now();
                let ranked = search(&index, id, emb.row(0), k)?;
                let search_time = searched.elapsed().as_secs_f64();
                let total = start.elapsed().as_secs_f64();
                Ok((encode, search_time, total, ranked))
            })
            .collect::<Result<_, RetrievalError>>()?;

        let n = queries.len() as f64;
        let mean = |f: fn(&(f64, f64, f64, RankedList)) -> f64| per_query.iter().map(f).sum::<f64>() / n;
        let query_encode_per_query = mean(|r| r.0);
        let search_per_query = mean(|r| r.1);
        // Each total encloses its parts; the max only absorbs float rounding.
        let end_to_end_per_query = mean(|r| r.2).max(query_encode_per_query + search_per_query);
        let report = TimingReport {
            workers,
            corpus_size: corpus.len(),
            queries: queries.len(),
            k,
            corpus_encode_total,
            corpus_encode_per_query: corpus_encode_total / n,
            query_encode_per_query,
            search_per_query,
            end_to_end_per_query,
            end_to_end_amortized_per_query: end_to_end_per_query + corpus_encode_total / n,
        };
        Ok((per_query.into_iter().map(|r| r.3).collect(), report))
    })
}

/// Either a corpus item or a query item, for the shared id-extraction hook.
enum Either<L, R> {
    Left(L),
    Right(R),
}

/// Encodes the corpus, builds an index, then encodes and searches each
/// query on its own, all on a dedicated pool of `workers` threads.
/// Rankings are identical to running [`search`] on the same embeddings.
pub fn timed_run(
    encoder: &Encoder,
    corpus: &[(String, Vec<u32>)],
    queries: &[(String, Vec<u32>)],
    k: usize,
    workers: usize,
) -> Result<(Vec<RankedList>, TimingReport), RetrievalError> {
    run(encoder, corpus, queries, k, workers, |item| match item {
        Either::Left(ids) | Either::Right(ids) => ids.clone(),
    })
}

/// [`timed_run`] over raw text; tokenization is inside the timed regions.
pub fn timed_run_text(
    encoder: &Encoder,
    tokenizer: &TokenizerModel,
    corpus: &[CorpusDoc],
    queries: &[QueryRecord],
    k: usize,
    workers: usize,
) -> Result<(Vec<RankedList>, TimingReport), RetrievalError> {
    let max_len = encoder.config.max_seq_len;
    let corpus: Vec<(String, &CorpusDoc)> = corpus.iter().map(|d| (d.id.clone(), d)).collect();
    let queries: Vec<(String, &QueryRecord)> = queries.iter().map(|q| (q.id.clone(), q)).collect();
    run(encoder, &corpus, &queries, k, workers, |item| match item {
        Either::Left(doc) => tokenizer.encode_truncated(&super::document_text(doc), max_len),
        Either::Right(q) => tokenizer.encode_truncated(&q.text, max_len),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Pooling};

    fn encoder(layers: usize) -> Encoder {
        Encoder::new(
            EncoderConfig {
                num_layers: layers,
                num_heads: 2,
                model_dim: 8,
                ff_dim: 16,
                max_seq_len: 10,
                vocab_size: 30,
                pooling: Pooling::Mean,
            },
            1,
        )
        .unwrap()
    }

    fn data() -> (Vec<(String, Vec<u32>)>, Vec<(String, Vec<u32>)>) {
        let corpus = (0..150u32).map(|i| (format!("d{i}"), vec![0, 5 + i % 25, 5 + (i * 7) % 25, 1])).collect();
        let queries = (0..12u32).map(|i| (format!("q{i}"), vec![0, 5 + i, 1])).collect();
        (corpus, queries)
    }

    #[test]
    fn rankings_match_untimed_path_and_times_are_consistent() {
        let enc = encoder(2);
        let (corpus, queries) = data();
        for workers in [1, 3] {
            let (runs, report) = timed_run(&enc, &corpus, &queries, 5, workers).unwrap();
            let docs: Vec<Vec<u32>> = corpus.iter().map(|c| c.1.clone()).collect();
            let index = crate::retrieval::Index::from_rows(
                corpus.iter().map(|c| c.0.clone()).collect(),
                &enc.embed(&docs).unwrap(),
            )
            .unwrap();
            for ((id, q), got) in queries.iter().zip(&runs) {
                let want = search(&index, id, enc.embed(&[q]).unwrap().row(0), 5).unwrap();
                assert_eq!(got, &want);
            }
            assert_eq!(report.workers, workers);
            assert!(report.corpus_encode_total > 0.0);
            assert!(report.query_encode_per_query > 0.0 && report.search_per_query > 0.0);
            assert!(report.end_to_end_per_query >= report.query_encode_per_query + report.search_per_query);
            assert!(report.end_to_end_amortized_per_query >= report.end_to_end_per_query);
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let enc = encoder(1);
        let (corpus, queries) = data();
        assert!(matches!(timed_run(&enc, &[], &queries, 5, 1), Err(RetrievalError::EmptyInput { .. })));
        assert!(matches!(timed_run(&enc, &corpus, &[], 5, 1), Err(RetrievalError::EmptyInput { .. })));
    }
}
