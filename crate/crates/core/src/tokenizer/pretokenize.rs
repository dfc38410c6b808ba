//! Byte-level BPE pre-tokenization.
//!
//! Splits text the way the GPT-2 pattern
//! `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
//! does: English contractions, letter runs, digit runs and symbol runs
//! each absorb one leading space, and a whitespace run followed by a word
//! leaves its last space for that word. Merges never cross these pieces.
//! The pieces always concatenate back to the input.

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Other
    }
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let run_end = |from: usize, cls: Class| {
        let mut j = from;
        while j < n && class(chars[j].1) == cls {
            j += 1;
        }
        j
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let rest = &text[byte_at(i)..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            let end = i + c.chars().count();
            out.push(&text[byte_at(i)..byte_at(end)]);
            i = end;
            continue;
        }
        let c = chars[i].1;
        let end = match class(c) {
            Class::Space => {
                if c == ' ' && i + 1 < n && class(chars[i + 1].1) != Class::Space {
                    // ` ?X+`: the space leads the following run.
                    run_end(i + 1, class(chars[i + 1].1))
                } else {
                    let j = run_end(i, Class::Space);
                    if j < n && j - i > 1 {
                        // `\s+(?!\S)`: leave the last whitespace for the next word.
                        j - 1
                    } else {
                        j
                    }
                }
            }
            cls => run_end(i, cls),
        };
        out.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    out
}
