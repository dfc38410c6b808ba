//! Synthetic topic-clustered retrieval data.
//!
//! The vocabulary is `specials | topic blocks | query topics | query aspects |
//! filler`. Every passage belongs to one topic (`passage % topics`) and draws
//! its tokens from that topic's block of aspect tokens with passage-specific
//! Dirichlet weights, plus occasional filler.
//!
//! Queries speak a separate vocabulary: a topic marker followed by aspect
//! tokens that are shared across topics. A query for a passage names the
//! passage's topic and re-reads a few of its non-filler positions, writing
//! aspect `k` of any topic as the query aspect token `k`. No query token ever
//! occurs in a passage, so an untrained encoder ranks passages essentially at
//! random; retrieval only works once training has aligned the two
//! vocabularies. Queries and passages are wrapped in start (0) and end (1) ids.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::training::PairRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub num_special: usize,
    pub topics: usize,
    /// Aspect tokens in each topic block (and query aspect tokens).
    pub tokens_per_topic: usize,
    pub passages: usize,
    pub passage_len: usize,
    pub query_len: usize,
    pub train_queries_per_passage: usize,
    pub heldout_queries: usize,
    pub filler_prob: f64,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_special: 5,
            topics: 8,
            tokens_per_topic: 5,
            passages: 256,
            passage_len: 16,
            query_len: 6,
            train_queries_per_passage: 8,
            heldout_queries: 100,
            filler_prob: 0.15,
            dirichlet_alpha: 0.5,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn query_base(&self) -> usize {
        self.num_special + self.topics * self.tokens_per_topic
    }

    fn filler_base(&self) -> usize {
        self.query_base() + self.topics + self.tokens_per_topic
    }

    pub fn filler_tokens(&self) -> usize {
        self.vocab_size - self.filler_base()
    }

    fn validate(&self) {
        assert!(self.num_special >= 2, "need start and end ids");
        assert!(
            self.filler_base() < self.vocab_size,
            "vocabulary too small for the topic blocks, query tokens, and at least one filler token"
        );
        assert!(self.query_len <= self.passage_len);
        assert!(self.passages >= self.topics && self.topics > 0);
    }

    pub fn topic_token(&self, topic: usize, k: usize) -> u32 {
        (self.num_special + topic * self.tokens_per_topic + k) as u32
    }

    /// Query marker naming `topic`.
    pub fn query_topic_token(&self, topic: usize) -> u32 {
        (self.query_base() + topic) as u32
    }

    /// Query token for aspect `k`, shared by every topic.
    pub fn query_aspect_token(&self, k: usize) -> u32 {
        (self.query_base() + self.topics + k) as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub config: ToyConfig,
    /// Wrapped passage token ids.
    pub passages: Vec<Vec<u32>>,
    pub passage_topics: Vec<usize>,
    /// Training queries paired with their source passage.
    pub train: Vec<PairRecord>,
    /// Held-out queries and the index of their single relevant passage.
    pub heldout: Vec<(Vec<u32>, usize)>,
}

impl ToyData {
    pub fn generate(config: &ToyConfig) -> Self {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gamma = Gamma::new(config.dirichlet_alpha, 1.0).expect("positive alpha");
        let fillers = config.filler_tokens();
        let filler_base = config.filler_base();

        let mut bodies = Vec::with_capacity(config.passages);
        // Aspect index of every non-filler position, per passage.
        let mut aspects: Vec<Vec<usize>> = Vec::with_capacity(config.passages);
        let mut passage_topics = Vec::with_capacity(config.passages);
        for p in 0..config.passages {
            let topic = p % config.topics;
            let weights: Vec<f64> = (0..config.tokens_per_topic)
                .map(|_| gamma.sample(&mut rng).max(1e-12))
                .collect();
            let pick = WeightedIndex::new(&weights).expect("positive weights");
            let mut body = Vec::with_capacity(config.passage_len);
            let mut seen = Vec::new();
            for _ in 0..config.passage_len {
                if rng.random_bool(config.filler_prob) {
                    body.push((filler_base + rng.random_range(0..fillers)) as u32);
                } else {
                    let k = pick.sample(&mut rng);
                    body.push(config.topic_token(topic, k));
                    seen.push(k);
                }
            }
            if seen.is_empty() {
                // All filler: overwrite the first position so the passage has content.
                let k = pick.sample(&mut rng);
                body[0] = config.topic_token(topic, k);
                seen.push(k);
            }
            bodies.push(body);
            aspects.push(seen);
            passage_topics.push(topic);
        }

        let query_for = |rng: &mut ChaCha8Rng, p: usize| {
            let seen = &aspects[p];
            let marker = config.query_topic_token(passage_topics[p]);
            let words: Vec<u32> = if seen.len() >= config.query_len {
                rand::seq::index::sample(rng, seen.len(), config.query_len)
                    .iter()
                    .map(|i| config.query_aspect_token(seen[i]))
                    .collect()
            } else {
                (0..config.query_len)
                    .map(|_| config.query_aspect_token(seen[rng.random_range(0..seen.len())]))
                    .collect()
            };
            wrap(std::iter::once(marker).chain(words))
        };

        let mut train = Vec::with_capacity(config.passages * config.train_queries_per_passage);
        for _ in 0..config.train_queries_per_passage {
            for (p, body) in bodies.iter().enumerate() {
                train.push(PairRecord {
                    query: query_for(&mut rng, p),
                    positive: wrap(body.iter().copied()),
                    negatives: Vec::new(),
                });
            }
        }
        let heldout = (0..config.heldout_queries)
            .map(|_| {
                let p = rng.random_range(0..config.passages);
                (query_for(&mut rng, p), p)
            })
            .collect();

        Self {
            config: config.clone(),
            passages: bodies.iter().map(|b| wrap(b.iter().copied())).collect(),
            passage_topics,
            train,
            heldout,
        }
    }
}

fn wrap(body: impl Iterator<Item = u32>) -> Vec<u32> {
    let mut out = vec![0];
    out.extend(body);
    out.push(1);
    out
}
