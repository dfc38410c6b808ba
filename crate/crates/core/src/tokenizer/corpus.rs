use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{TokenSample, TokenizerError};

/// One parsed corpus line: plain text, or a JSON object with a `text`
/// field and an optional `source` field.
fn parse_line(line: &str, number: usize) -> Result<(Option<String>, String), TokenizerError> {
    let trimmed = line.trim_start();
    if !trimmed.starts_with('{') {
        return Ok((None, line.to_string()));
    }
    let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| TokenizerError::Corpus {
        line: number,
        message: e.to_string(),
    })?;
    let text = value
        .get("text")
        .and_then(|t| t.as_str())
        .ok_or_else(|| TokenizerError::Corpus {
            line: number,
            message: "missing string field `text`".into(),
        })?;
    let source = value.get("source").and_then(|s| s.as_str()).map(str::to_string);
    Ok((source, text.to_string()))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, TokenizerError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

/// Reads one document per non-blank line. Lines starting with `{` are
/// parsed as JSON objects carrying a `text` field.
pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<String>, TokenizerError> {
    read_lines(path.as_ref())?
        .into_iter()
        .map(|(n, line)| parse_line(&line, n).map(|(_, text)| text))
        .collect()
}

/// Like [`read_documents`], keeping each line's `source` field. Lines
/// without one are attributed to the file stem.
pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<TokenSample>, TokenizerError> {
    let path = path.as_ref();
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            parse_line(&line, n).map(|(source, text)| TokenSample {
                source: source.unwrap_or_else(|| fallback.clone()),
                text,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn plain_and_jsonl_lines() {
        let mut f = tempfile::Builder::new().suffix(".txt").tempfile().unwrap();
        writeln!(f, "first document").unwrap();
        writeln!(f).unwrap();
        writeln!(f, r#"{{"text": "second", "source": "ads"}}"#).unwrap();
        writeln!(f, r#"{{"text": "third"}}"#).unwrap();
        let docs = read_documents(f.path()).unwrap();
        assert_eq!(docs, vec!["first document", "second", "third"]);
        let samples = read_samples(f.path()).unwrap();
        assert_eq!(samples[1].source, "ads");
        assert_eq!(samples[2].source, f.path().file_stem().unwrap().to_string_lossy());
    }

    #[test]
    fn reports_line_of_bad_json() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "ok").unwrap();
        writeln!(f, r#"{{"body": "no text"}}"#).unwrap();
        match read_documents(f.path()) {
            Err(TokenizerError::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
