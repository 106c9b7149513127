use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Text ↔ token-id mapping used by the decoder.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<usize>;
    /// Concatenates the pieces of `ids`, skipping special tokens other than
    /// unknown pieces.
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
}

/// Splits text into word pieces that carry their leading space, so that
/// concatenating the pieces restores the text exactly.
///
/// `"It's a test."` → `["It", "'", "s", " a", " test", "."]`
pub fn split_pieces(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        if chars[i].is_whitespace() {
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            // a single trailing space glues onto the following word
            if i < chars.len() && chars[i - 1] == ' ' {
                if i - 1 > start {
                    pieces.push(chars[start..i - 1].iter().collect());
                }
                let word_start = i - 1;
                i = word_end(&chars, i);
                pieces.push(chars[word_start..i].iter().collect());
            } else {
                pieces.push(chars[start..i].iter().collect());
            }
        } else {
            i = word_end(&chars, i);
            pieces.push(chars[start..i].iter().collect());
        }
    }
    pieces
}

fn word_end(chars: &[char], start: usize) -> usize {
    if chars[start].is_alphanumeric() {
        let mut i = start;
        while i < chars.len() && chars[i].is_alphanumeric() {
            i += 1;
        }
        i
    } else {
        start + 1
    }
}

/// Closed word-level vocabulary built from a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordTokenizer {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordTokenizer {
    fn from(pieces: Vec<String>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { pieces, index }
    }
}

impl From<WordTokenizer> for Vec<String> {
    fn from(t: WordTokenizer) -> Self {
        t.pieces
    }
}

impl WordTokenizer {
    /// Specials first, then every distinct piece of `texts` in sorted order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<String> = texts.into_iter().flat_map(split_pieces).collect();
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend(distinct.into_iter().filter(|p| !SPECIALS.contains(&p.as_str())));
        pieces.into()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        split_pieces(text)
            .iter()
            .map(|p| self.index.get(p).copied().unwrap_or(UNK))
            .collect()
    }

    fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id == UNK || id >= SPECIALS.len())
            .map(|&id| self.pieces.get(id).map_or("<unk>", String::as_str))
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pieces_keep_leading_spaces() {
        assert_eq!(split_pieces("It's a test."), ["It", "'", "s", " a", " test", "."]);
        assert_eq!(split_pieces("  two\nlines "), [" ", " two", "\n", "lines", " "]);
        assert!(split_pieces("").is_empty());
    }

    #[test]
    fn specials_have_fixed_ids() {
        let t = WordTokenizer::from_corpus(["Yes.", "No."]);
        assert_eq!(t.piece(PAD), "<pad>");
        assert_eq!(t.piece(EOS), "<eos>");
        assert_eq!(t.piece(SEP), "<sep>");
        assert_eq!(t.vocab_size(), 5 + 3);
    }

    #[test]
    fn unknown_pieces_map_to_unk() {
        let t = WordTokenizer::from_corpus(["Is the case normal?"]);
        assert_eq!(t.encode("Is the brain"), vec![t.id("Is").unwrap(), t.id(" the").unwrap(), UNK]);
    }

    #[test]
    fn serde_round_trip() {
        let t = WordTokenizer::from_corpus(["Yes, the anomaly is marked."]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<WordTokenizer>(&json).unwrap(), t);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(text in "[a-zA-Z ,.?'\n]{0,40}") {
            let t = WordTokenizer::from_corpus([text.as_str()]);
            prop_assert_eq!(t.decode(&t.encode(&text)), text);
        }
    }
}
