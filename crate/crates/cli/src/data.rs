//! Loading artifacts and training data for the commands.

use std::path::Path;

use densekit::encoder::{load_checkpoint, Encoder};
use densekit::tokenizer::{read_documents, TokenizerModel};
use densekit::training::{DataSource, PairRecord};
use serde::Deserialize;

use crate::error::{input_err, runtime_err, CliError, CliResult};
use crate::run::Run;

/// Sequences embedded per forward pass when encoding corpora and queries.
pub const EMBED_CHUNK: usize = 32;

pub fn load_tokenizer(run: &mut Run, path: &Path) -> CliResult<TokenizerModel> {
    run.input(path)?;
    TokenizerModel::load(path).map_err(|e| input_err(path, e))
}

pub fn load_encoder(run: &mut Run, path: &Path) -> CliResult<Encoder> {
    run.input(path)?;
    load_checkpoint(path).map_err(|e| input_err(path, e))
}

pub fn check_vocab(what: &str, encoder: &Encoder, tok: &TokenizerModel) -> CliResult<()> {
    if encoder.config.vocab_size != tok.vocab_size() {
        return Err(CliError::Validation(format!(
            "{what} has a vocabulary of {} but the tokenizer has {}",
            encoder.config.vocab_size,
            tok.vocab_size()
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    query: String,
    positive: String,
    #[serde(default)]
    negatives: Vec<String>,
}

fn is_pair_file(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("query").is_some())
}

/// Reads one training source. Files whose first record has a `query` field
/// hold `{query, positive, negatives?}` pairs; anything else is documents
/// (plain lines or `{"text": …}` objects). Text is tokenized and truncated
/// to `max_len`.
pub fn load_source(run: &mut Run, name: &str, path: &Path, tok: &TokenizerModel, max_len: usize) -> CliResult<DataSource> {
    run.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    let encode = |s: &str| tok.encode_truncated(s, max_len);
    let source = if is_pair_file(&text) {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: PairLine =
                serde_json::from_str(line).map_err(|e| input_err(path, format!("line {}: {e}", i + 1)))?;
            pairs.push(PairRecord {
                query: encode(&p.query),
                positive: encode(&p.positive),
                negatives: p.negatives.iter().map(|n| encode(n)).collect(),
            });
        }
        DataSource::pairs(name, pairs)
    } else {
        let docs = read_documents(path).map_err(|e| input_err(path, e))?;
        DataSource::documents(name, docs.iter().map(|d| encode(d)).collect())
    };
    source.map_err(|e| input_err(path, e))
}

/// Token strings of a vocabulary file: a tokenizer model, a JSON
/// `{token: id}` map, a JSON list of tokens, or one token per line.
pub fn read_vocab(run: &mut Run, path: &Path) -> CliResult<Vec<String>> {
    run.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    if let Ok(model) = TokenizerModel::from_json(&text) {
        return Ok(model.tokens().to_vec());
    }
    match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(serde_json::Value::Object(map)) => Ok(map.keys().cloned().collect()),
        Ok(serde_json::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                serde_json::Value::String(s) => Ok(s),
                other => Err(input_err(path, format!("vocabulary entry {other} is not a string"))),
            })
            .collect(),
        Ok(_) => Err(input_err(path, "not a vocabulary")),
        Err(_) => Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect()),
    }
}

/// Pooled embeddings of `texts`, tokenized with truncation to the encoder's
/// maximum length.
pub fn embed_texts(encoder: &Encoder, tok: &TokenizerModel, texts: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let max_len = encoder.config.max_seq_len;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|t| tok.encode_truncated(t, max_len)).collect();
        let emb = encoder.embed(&ids).map_err(runtime_err)?;
        out.extend(emb.iter_rows().map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use densekit::tokenizer::{train_bpe, TrainerConfig};
    use densekit::training::SourceData;

    fn tokenizer() -> TokenizerModel {
        let cfg = TrainerConfig {
            vocab_size: 270,
            ..TrainerConfig::default()
        };
        train_bpe(["the solar wind", "the sea level"], &cfg).unwrap()
    }

    #[test]
    fn sniffs_pairs_and_documents() {
        let dir = tempfile::tempdir().unwrap();
        let tok = tokenizer();
        let mut run = Run::new("test", RunConfig::default());
        let pairs = dir.path().join("pairs.jsonl");
        std::fs::write(&pairs, "{\"query\": \"wind\", \"positive\": \"the solar wind\"}\n").unwrap();
        let docs = dir.path().join("docs.txt");
        std::fs::write(&docs, "the sea level\n\n{\"text\": \"solar\"}\n").unwrap();
        let p = load_source(&mut run, "p", &pairs, &tok, 8).unwrap();
        assert!(matches!(p.data(), SourceData::Pairs(v) if v.len() == 1));
        let d = load_source(&mut run, "d", &docs, &tok, 4).unwrap();
        let SourceData::Documents(seqs) = d.data() else { panic!() };
        assert_eq!(seqs.len(), 2);
        assert!(seqs.iter().all(|s| s.len() <= 4 && s[0] == tok.start_id()));
    }

    #[test]
    fn vocab_file_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new("test", RunConfig::default());
        let map = dir.path().join("vocab.json");
        std::fs::write(&map, r#"{"a": 0, "b": 1}"#).unwrap();
        let list = dir.path().join("list.txt");
        std::fs::write(&list, "a\nc\n").unwrap();
        let model = dir.path().join("tok.json");
        tokenizer().save(&model).unwrap();
        assert_eq!(read_vocab(&mut run, &map).unwrap(), ["a", "b"]);
        assert_eq!(read_vocab(&mut run, &list).unwrap(), ["a", "c"]);
        assert_eq!(read_vocab(&mut run, &model).unwrap().len(), 270);
    }
}
