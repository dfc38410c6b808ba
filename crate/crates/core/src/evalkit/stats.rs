use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch {
            pred: x.len(),
            gold: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(EvalError::TooFew { needed: 2, found: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("pearson input"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(EvalError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(EvalError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::TooFew { needed: 1, found: 0 });
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean and sample standard deviation (`n − 1` denominator); the deviation
/// is `None` for a single value.
pub fn mean_sd(values: &[f64]) -> Result<(f64, Option<f64>), EvalError> {
    if values.is_empty() {
        return Err(EvalError::TooFew { needed: 1, found: 0 });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Ok((mean, sd))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub sentence1: String,
    pub sentence2: String,
    pub score: f64,
}

/// Reads `sentence1<TAB>sentence2<TAB>score` lines. A first line whose score
/// field is not a number is taken as a header.
pub fn read_sts_tsv(path: impl AsRef<Path>) -> Result<Vec<StsPair>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [s1, s2, score] = fields[..] else {
            return Err(EvalError::Format {
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        match score.trim().parse::<f64>() {
            Ok(score) if score.is_finite() => out.push(StsPair {
                sentence1: s1.to_string(),
                sentence2: s2.to_string(),
                score,
            }),
            _ if i == 0 => {}
            _ => {
                return Err(EvalError::Format {
                    line: i + 1,
                    message: format!("score `{score}` is not a finite number"),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_correlations() {
        let x = [1.0, 2.0, 3.5, 7.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_pair_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
        // r = (n Σxy − Σx Σy) / sqrt((n Σx² − (Σx)²)(n Σy² − (Σy)²))
        let n = x.len() as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        assert!((pearson(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance("x")));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(EvalError::TooFew { needed: 2, found: 1 }));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(EvalError::TooFew { .. })));
    }

    #[test]
    fn mean_and_sample_sd() {
        let (m, sd) = mean_sd(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!((sd.unwrap() - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[3.0]).unwrap(), (3.0, None));
    }

    #[test]
    fn sts_reader_skips_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sts.tsv");
        std::fs::write(&p, "sentence1\tsentence2\tscore\na\tb\t3.5\nc\td\t1\n").unwrap();
        let pairs = read_sts_tsv(&p).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].score, 3.5);
        std::fs::write(&p, "a\tb\t3.5\nc\td\tx\n").unwrap();
        assert!(matches!(read_sts_tsv(&p), Err(EvalError::Format { line: 2, .. })));
    }
}
