//! Reversible byte → printable-character mapping used for token strings.
//!
//! Printable Latin-1 bytes map to themselves; the remaining 68 bytes map to
//! consecutive code points from U+0100, so the space byte becomes `Ġ`.

use std::collections::HashMap;
use std::sync::OnceLock;

struct Tables {
    to_char: [char; 256],
    to_byte: HashMap<char, u8>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let printable = |b: u8| matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        let mut to_char = ['\0'; 256];
        let mut next = 0u32;
        for b in 0..=255u8 {
            to_char[b as usize] = if printable(b) {
                char::from(b)
            } else {
                let c = char::from_u32(256 + next).expect("valid code point");
                next += 1;
                c
            };
        }
        let to_byte = to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Tables { to_char, to_byte }
    })
}

pub fn byte_to_char(b: u8) -> char {
    tables().to_char[b as usize]
}

pub fn char_to_byte(c: char) -> Option<u8> {
    tables().to_byte.get(&c).copied()
}

/// Token string for a byte sequence.
pub fn bytes_to_token(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_to_char(b)).collect()
}

/// Raw bytes of a token string; `None` if it contains unmapped characters.
pub fn token_to_bytes(token: &str) -> Option<Vec<u8>> {
    token.chars().map(char_to_byte).collect()
}
