//! Byte-level BPE tokenizer.
//!
//! Ids are laid out as: special tokens first (in the order given at
//! training time), then the 256 byte symbols in byte order, then one id per
//! merge in the order merges were learned. Hence
//! `vocab_size = specials + 256 + merges` always holds.
//!
//! Special tokens are positional: index 0 is the sequence start, index 1
//! the sequence end, and the optional indices 2, 3, 4 are mask, pad and
//! unknown. Unknown is never produced for valid UTF-8.

mod analysis;
mod bytes;
mod corpus;
mod pretokenize;
mod train;

pub use analysis::{corpus_token_stats, vocab_overlap, vocab_overlap_sets, ModelTokenCounts, OverlapReport, TokenCountReport, TokenSample};
pub use bytes::{byte_to_char, bytes_to_token, char_to_byte, token_to_bytes};
pub use corpus::{read_documents, read_samples};
pub use pretokenize::pretokenize;
pub use train::{train_bpe, TrainerConfig};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SPECIAL_TOKENS: [&str; 5] = ["<s>", "</s>", "<mask>", "<pad>", "<unk>"];

/// Vocabulary size used by the large general-purpose tokenizers this crate
/// is typically compared against.
pub const REFERENCE_VOCAB_SIZE: usize = 50_265;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab_size {requested} is below the minimum {minimum} (256 bytes + special tokens)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("at least two special tokens (sequence start and end) are required")]
    MissingSpecialTokens,
    #[error("duplicate special token `{0}`")]
    DuplicateSpecial(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("no samples to count")]
    NoSamples,
    #[error("malformed tokenizer model: {0}")]
    Malformed(String),
    #[error("malformed corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A trained byte-level BPE tokenizer.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    id_to_token: Vec<String>,
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    special_tokens: Vec<String>,
    lowercase: bool,
    /// (left id, right id) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token
            && self.merges == other.merges
            && self.special_tokens == other.special_tokens
            && self.lowercase == other.lowercase
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    lowercase: bool,
    special_tokens: Vec<String>,
    vocab: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
}

impl TokenizerModel {
    /// Builds a model from specials and an ordered merge list, validating
    /// that every merge only uses tokens that already exist.
    pub fn from_merges(
        special_tokens: Vec<String>,
        merges: Vec<(String, String)>,
        lowercase: bool,
    ) -> Result<Self, TokenizerError> {
        if special_tokens.len() < 2 {
            return Err(TokenizerError::MissingSpecialTokens);
        }
        let mut id_to_token: Vec<String> = special_tokens.clone();
        id_to_token.extend((0..=255u8).map(|b| byte_to_char(b).to_string()));
        let mut vocab = HashMap::with_capacity(id_to_token.len() + merges.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if vocab.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateSpecial(t.clone()));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                vocab.get(t).copied().ok_or_else(|| {
                    TokenizerError::Malformed(format!("merge {rank} uses unknown token `{t}`"))
                })
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            if li < special_tokens.len() as u32 || ri < special_tokens.len() as u32 {
                return Err(TokenizerError::Malformed(format!("merge {rank} uses a special token")));
            }
            let merged = format!("{l}{r}");
            let id = id_to_token.len() as u32;
            if vocab.insert(merged.clone(), id).is_some() {
                return Err(TokenizerError::Malformed(format!(
                    "merge {rank} produces existing token `{merged}`"
                )));
            }
            id_to_token.push(merged);
            if ranks.insert((li, ri), (rank, id)).is_some() {
                return Err(TokenizerError::Malformed(format!("merge {rank} is repeated")));
            }
        }
        Ok(Self {
            id_to_token,
            vocab,
            merges,
            special_tokens,
            lowercase,
            ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn special_tokens(&self) -> &[String] {
        &self.special_tokens
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    /// Token strings in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.special_tokens.len()
    }

    pub fn start_id(&self) -> u32 {
        0
    }

    pub fn end_id(&self) -> u32 {
        1
    }

    fn role(&self, index: usize) -> Option<u32> {
        (index < self.special_tokens.len()).then_some(index as u32)
    }

    pub fn mask_id(&self) -> Option<u32> {
        self.role(2)
    }

    pub fn pad_id(&self) -> Option<u32> {
        self.role(3)
    }

    pub fn unknown_id(&self) -> Option<u32> {
        self.role(4)
    }

    fn byte_id(&self, b: u8) -> u32 {
        (self.special_tokens.len() + b as usize) as u32
    }

    /// The same model restricted to its first `k` merges.
    pub fn truncated(&self, k: usize) -> Self {
        Self::from_merges(
            self.special_tokens.clone(),
            self.merges[..k.min(self.merges.len())].to_vec(),
            self.lowercase,
        )
        .expect("a prefix of a valid merge list is valid")
    }

    pub fn normalize(&self, text: &str) -> String {
        if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        }
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = piece.bytes().map(|b| self.byte_id(b)).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            let Some((_, l, r, id)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = merged;
        }
        out.extend(symbols);
    }

    /// Token ids without the start/end wrapper.
    pub fn encode_raw(&self, text: &str) -> Vec<u32> {
        let text = self.normalize(text);
        let mut out = Vec::with_capacity(text.len());
        for piece in pretokenize(&text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    /// Normalizes, pre-tokenizes, applies merges in learned order and wraps
    /// the result in start/end ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![self.start_id()];
        out.extend(self.encode_raw(text));
        out.push(self.end_id());
        out
    }

    /// [`encode`](Self::encode) capped at `max_len` ids: overflowing tokens
    /// are dropped just before the end id, which is always kept.
    pub fn encode_truncated(&self, text: &str, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 2, "room for the start and end ids is required");
        let mut ids = self.encode(text);
        if ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(self.end_id());
        }
        ids
    }

    /// Inverse of [`encode`](Self::encode) up to normalization. Special
    /// tokens are dropped; byte sequences that are not valid UTF-8 are
    /// replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(ids.len() * 4);
        for &id in ids {
            let token = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.vocab_size(),
            })?;
            if self.is_special(id) {
                continue;
            }
            bytes.extend(token_to_bytes(token).expect("non-special tokens are byte-mapped"));
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            lowercase: self.lowercase,
            special_tokens: self.special_tokens.clone(),
            vocab: self
                .id_to_token
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    /// Parses and validates a model document.
    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: ModelFile = serde_json::from_str(json)?;
        let model = Self::from_merges(file.special_tokens, file.merges, file.lowercase)?;
        if file.vocab.len() != model.vocab_size() {
            return Err(TokenizerError::Malformed(format!(
                "vocab has {} entries, expected {}",
                file.vocab.len(),
                model.vocab_size()
            )));
        }
        for (token, id) in &file.vocab {
            if model.id(token) != Some(*id) {
                return Err(TokenizerError::Malformed(format!(
                    "token `{token}` has id {id}, expected {:?}",
                    model.id(token)
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specials() -> Vec<String> {
        DEFAULT_SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()
    }

    fn small_model(lowercase: bool) -> TokenizerModel {
        let corpus = [
            "Alzheimer disease and tau biomarkers",
            "phosphorylated tau rises in alzheimer continuum",
            "the quick brown fox, the lazy dog's bone 123",
        ];
        train_bpe(
            corpus.iter(),
            &TrainerConfig {
                vocab_size: 330,
                lowercase,
                special_tokens: specials(),
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_text_is_just_the_wrapper() {
        let m = small_model(true);
        assert_eq!(m.encode(""), vec![0, 1]);
        assert_eq!(m.decode(&[0, 1]).unwrap(), "");
    }

    #[test]
    fn lowercase_flag_normalizes() {
        let m = small_model(true);
        assert_eq!(m.decode(&m.encode("Alzheimer")).unwrap(), "alzheimer");
        let cased = small_model(false);
        assert_eq!(cased.decode(&cased.encode("Alzheimer")).unwrap(), "Alzheimer");
    }

    #[test]
    fn truncation_keeps_the_wrapper() {
        let m = small_model(true);
        let text = "phosphorylated tau biomarkers in the alzheimer continuum";
        let full = m.encode(text);
        assert_eq!(m.encode_truncated(text, 1000), full);
        let cut = m.encode_truncated(text, 5);
        assert_eq!(cut.len(), 5);
        assert_eq!(&cut[..4], &full[..4]);
        assert_eq!(cut[4], m.end_id());
    }

    #[test]
    fn decode_rejects_unknown_ids() {
        let m = small_model(true);
        assert!(matches!(
            m.decode(&[0, 9999]),
            Err(TokenizerError::IdOutOfRange { id: 9999, .. })
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = small_model(true);
        let back = TokenizerModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), m.to_json());
        let mut doc: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        doc["merges"][0][0] = "nonexistent".into();
        assert!(matches!(
            TokenizerModel::from_json(&doc.to_string()),
            Err(TokenizerError::Malformed(_))
        ));
    }

    #[test]
    fn more_merges_never_add_tokens() {
        let m = small_model(true);
        let text = "Phosphorylated tau biomarkers in the alzheimer's continuum";
        let mut prev = usize::MAX;
        for k in 0..=m.merges().len() {
            let n = m.truncated(k).encode(text).len();
            assert!(n <= prev);
            prev = n;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn round_trip_up_to_normalization(s in "\\PC{0,40}") {
            for lowercase in [false, true] {
                let m = small_model(lowercase);
                let ids = m.encode(&s);
                prop_assert_eq!(m.decode(&ids).unwrap(), m.normalize(&s));
                prop_assert!(ids[1..ids.len() - 1].iter().all(|&id| !m.is_special(id)));
            }
        }
    }
}
