//! The output symbol set: `a`–`z`, `0`–`9`, then the END stop symbol.

use crate::error::{Error, Result};

const SYMBOLS: &[u8; 36] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Number of symbols including END.
pub const ALPHABET_SIZE: usize = 37;
/// Index of the stop symbol.
pub const END: usize = 36;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Alphabet;

impl Alphabet {
    pub fn len(&self) -> usize {
        ALPHABET_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn end(&self) -> usize {
        END
    }

    /// Index of a character symbol; END has no character form.
    pub fn index_of(&self, c: char) -> Option<usize> {
        match c {
            'a'..='z' => Some(c as usize - 'a' as usize),
            '0'..='9' => Some(26 + c as usize - '0' as usize),
            _ => None,
        }
    }

    pub fn char_of(&self, index: usize) -> Option<char> {
        SYMBOLS.get(index).map(|&b| b as char)
    }

    /// Display label, `END` for the stop symbol.
    pub fn label(&self, index: usize) -> String {
        match self.char_of(index) {
            Some(c) => c.to_string(),
            None if index == END => "END".to_string(),
            None => format!("#{index}"),
        }
    }

    pub fn encode(&self, word: &str) -> Result<Vec<usize>> {
        word.chars()
            .map(|c| {
                self.index_of(c).ok_or_else(|| {
                    Error::input(format!("character {c:?} in {word:?} is not in the alphabet"))
                })
            })
            .collect()
    }

    /// Decodes symbol indices, skipping END.
    pub fn decode(&self, symbols: &[usize]) -> String {
        symbols.iter().filter_map(|&s| self.char_of(s)).collect()
    }

    /// All symbols in index order as a string (END omitted).
    pub fn symbols(&self) -> &'static str {
        std::str::from_utf8(SYMBOLS).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_indices_with_end_last() {
        let a = Alphabet;
        assert_eq!(a.len(), 37);
        for (i, c) in a.symbols().chars().enumerate() {
            assert_eq!(a.index_of(c), Some(i));
            assert_eq!(a.char_of(i), Some(c));
        }
        assert_eq!(a.char_of(END), None);
        assert_eq!(a.label(END), "END");
    }

    #[test]
    fn encode_rejects_foreign_characters() {
        let err = Alphabet.encode("abC").unwrap_err().to_string();
        assert!(err.contains("'C'"), "{err}");
        assert_eq!(Alphabet.encode("a9").unwrap(), vec![0, 35]);
        assert_eq!(Alphabet.decode(&[0, 35, END]), "a9");
    }
}
