use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Closed whitespace vocabulary. Ids are positions in this table.
pub const VOCAB: [&str; 64] = [
    "<pad>", "<unk>", "a", "an", "the", "on", "in", "of", "at", "with", "and", "is",
    // palette colours first, then extra colour words
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    "white", "black", "gray", "pink", "brown",
    "circle", "square", "triangle", "star", "heart", "hexagon", "ring", "diamond",
    "left", "right", "top", "bottom", "center", "middle", "corner", "upper", "lower",
    "one", "two", "three", "four", "big", "small", "large", "tiny", "many", "single",
    "background", "dark", "light", "bright", "near", "side", "edge", "object", "shapes",
    "above", "below", "image",
];

pub fn word_id(word: &str) -> u32 {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u32)
        .unwrap_or(UNK_ID)
}

/// Token ids padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenIds {
    ids: Vec<u32>,
    /// Number of leading non-pad positions.
    len: usize,
}

impl TokenIds {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Number of prompt words kept (before padding).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_pad(&self, position: usize) -> bool {
        position >= self.len
    }

    /// `true` for every position carrying a real word.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Lowercases, splits on whitespace and maps through [`VOCAB`], padding or
/// truncating to `max_tokens`.
pub fn tokenize(prompt: &str, max_tokens: usize) -> Result<TokenIds> {
    let words: Vec<String> = prompt
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut ids: Vec<u32> = words.iter().take(max_tokens).map(|w| word_id(w)).collect();
    let len = ids.len();
    ids.resize(max_tokens, PAD_ID);
    Ok(TokenIds { ids, len })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_unique() {
        let mut v = VOCAB.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), VOCAB.len());
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("a red circle", 8).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(&t.ids()[..3], &[word_id("a"), word_id("red"), word_id("circle")]);
        assert!(t.ids()[3..].iter().all(|&i| i == PAD_ID));
        assert_eq!(tokenize("a RED circle", 8).unwrap(), t);
        assert!(matches!(tokenize("", 8), Err(Error::EmptyPrompt)));
        assert!(matches!(tokenize("   \t ", 8), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn unknown_words_and_truncation() {
        let t = tokenize("a zebra on the left", 8).unwrap();
        assert_eq!(t.ids()[1], UNK_ID);
        let t = tokenize("one two three four one two three four one", 8).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(t.max_len(), 8);
    }
}
