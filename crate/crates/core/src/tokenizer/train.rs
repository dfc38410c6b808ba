use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{pretokenize, TokenizerError, TokenizerModel, DEFAULT_SPECIAL_TOKENS, REFERENCE_VOCAB_SIZE};
use super::bytes::byte_to_char;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub vocab_size: usize,
    pub lowercase: bool,
    pub special_tokens: Vec<String>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            vocab_size: REFERENCE_VOCAB_SIZE,
            lowercase: true,
            special_tokens: DEFAULT_SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TrainerConfig {
    pub fn min_vocab_size(&self) -> usize {
        256 + self.special_tokens.len()
    }
}

type Pair = (u32, u32);

/// Learns merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair is left to merge.
///
/// Each round merges the most frequent adjacent pair (counted within
/// pre-tokens, weighted by pre-token frequency). Ties go to the pair whose
/// `(left, right)` token strings sort first. A pair whose concatenation is
/// already a vocabulary entry is never selected, so every merge adds exactly
/// one token. The result depends only on the corpus contents and the config.
pub fn train_bpe<I, S>(corpus: I, config: &TrainerConfig) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let minimum = config.min_vocab_size();
    if config.vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: config.vocab_size,
            minimum,
        });
    }
    if config.special_tokens.len() < 2 {
        return Err(TokenizerError::MissingSpecialTokens);
    }

    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut documents = 0usize;
    for doc in corpus {
        documents += 1;
        let text = if config.lowercase {
            doc.as_ref().to_lowercase()
        } else {
            doc.as_ref().to_string()
        };
        for piece in pretokenize(&text) {
            *word_counts.entry(piece.to_string()).or_default() += 1;
        }
    }
    if documents == 0 {
        return Err(TokenizerError::EmptyCorpus);
    }

    let specials = config.special_tokens.len() as u32;
    let mut tokens: Vec<String> = config.special_tokens.clone();
    tokens.extend((0..=255u8).map(|b| byte_to_char(b).to_string()));
    let mut known: HashSet<String> = HashSet::with_capacity(tokens.len());
    for t in &tokens {
        if !known.insert(t.clone()) {
            return Err(TokenizerError::DuplicateSpecial(t.clone()));
        }
    }

    let mut words: Vec<(Vec<u32>, i64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(|b| specials + b as u32).collect(), c as i64))
        .collect();

    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut locations: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (symbols, freq)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += freq;
            locations.entry((w[0], w[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while tokens.len() < config.vocab_size {
        let mut best: Option<(Pair, i64)> = None;
        for (&(l, r), &c) in &counts {
            if c <= 0 {
                continue;
            }
            if let Some(((bl, br), bc)) = best {
                let key = (&tokens[l as usize], &tokens[r as usize]);
                let best_key = (&tokens[bl as usize], &tokens[br as usize]);
                if c < bc || (c == bc && key >= best_key) {
                    continue;
                }
            }
            if known.contains(&format!("{}{}", tokens[l as usize], tokens[r as usize])) {
                continue;
            }
            best = Some(((l, r), c));
        }
        let Some((pair, _)) = best else { break };

        let new_id = tokens.len() as u32;
        let merged = format!("{}{}", tokens[pair.0 as usize], tokens[pair.1 as usize]);
        merges.push((tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone()));
        known.insert(merged.clone());
        tokens.push(merged);

        let mut affected: Vec<usize> = locations.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (symbols, freq) = &mut words[wi];
            if !symbols.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                if let Some(c) = counts.get_mut(&p) {
                    *c -= *freq;
                    if *c == 0 {
                        counts.remove(&p);
                    }
                }
            }
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = next;
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += *freq;
                if p != pair {
                    locations.entry(p).or_default().insert(wi);
                }
            }
        }
        counts.remove(&pair);
    }

    TokenizerModel::from_merges(config.special_tokens.clone(), merges, config.lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(vocab_size: usize) -> TrainerConfig {
        TrainerConfig {
            vocab_size,
            lowercase: false,
            special_tokens: vec!["<s>".into(), "</s>".into()],
        }
    }

    /// Recounts every adjacent pair from scratch each round.
    fn oracle(corpus: &[String], cfg: &TrainerConfig) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = Vec::new();
        for doc in corpus {
            for piece in pretokenize(doc) {
                words.push(piece.bytes().map(|b| byte_to_char(b).to_string()).collect());
            }
        }
        let mut vocab: HashSet<String> = cfg.special_tokens.iter().cloned().collect();
        vocab.extend((0..=255u8).map(|b| byte_to_char(b).to_string()));
        let mut merges = Vec::new();
        while vocab.len() < cfg.vocab_size {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0].clone(), p[1].clone())).or_default() += 1;
                }
            }
            // BTreeMap iterates in string order, so the first max is the tie winner.
            let mut best: Option<((String, String), usize)> = None;
            for (p, c) in counts {
                if vocab.contains(&format!("{}{}", p.0, p.1)) {
                    continue;
                }
                if best.as_ref().is_none_or(|(_, bc)| c > *bc) {
                    best = Some((p, c));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let merged = format!("{l}{r}");
            for w in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = out;
            }
            vocab.insert(merged);
            merges.push((l, r));
        }
        merges
    }

    #[test]
    fn abab_example() {
        let m = train_bpe(["abab", "abab"], &config(258 + 2)).unwrap();
        assert_eq!(
            m.merges(),
            &[("a".to_string(), "b".to_string()), ("ab".to_string(), "ab".to_string())]
        );
        assert_eq!(m.vocab_size(), 260);
    }

    #[test]
    fn minimum_vocab_means_no_merges() {
        let m = train_bpe(["hello world"], &config(258)).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab_size(), 258);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_bpe(Vec::<String>::new(), &config(300)),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(["x"], &config(257)),
            Err(TokenizerError::VocabTooSmall { requested: 257, minimum: 258 })
        ));
    }

    #[test]
    fn stops_when_pairs_run_out() {
        let m = train_bpe(["aaaa"], &config(1000)).unwrap();
        // a+a -> aa, aa+aa -> aaaa
        assert_eq!(m.merges().len(), 2);
        assert_eq!(m.vocab_size(), 260);
    }

    #[test]
    fn matches_recounting_oracle_on_random_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let alphabet: Vec<char> = "abcab c.d'sé".chars().collect();
        for _ in 0..25 {
            let docs: Vec<String> = (0..rng.random_range(1..6))
                .map(|_| {
                    (0..rng.random_range(0..40))
                        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                        .collect()
                })
                .collect();
            let cfg = config(258 + rng.random_range(0..40));
            let model = train_bpe(&docs, &cfg).unwrap();
            assert_eq!(model.merges(), oracle(&docs, &cfg).as_slice());
        }
    }

    #[test]
    fn retraining_is_byte_identical() {
        let docs = ["the cat sat on the mat", "the dog sat on the log", "cats and dogs"];
        let cfg = config(290);
        let a = train_bpe(docs, &cfg).unwrap().to_json();
        let b = train_bpe(docs, &cfg).unwrap().to_json();
        assert_eq!(a, b);
    }
}
