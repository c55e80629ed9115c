//! Whitespace tokenizer with a closed vocabulary.
//!
//! Text is lowercased and split on whitespace; the punctuation characters
//! `. , ; : ! ? ( ) "` become tokens of their own. Ids 0 to 3 are reserved
//! for `<pad>`, `<bos>`, `<eos>` and `<unk>`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')', '"'];

/// Splits `text` into lowercase word and punctuation strings.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    /// Specials followed by every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(distinct.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from(vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Word ids without specials; unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Space-joined tokens up to the first [`EOS`], skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= UNK)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            words("A close-up, with Yellowish discharge."),
            ["a", "close-up", ",", "with", "yellowish", "discharge", "."]
        );
        assert!(words("   ").is_empty());
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Tokenizer::build(["the wound with reddened edges .", "a foot wound ."]);
        assert_eq!(&t.vocab()[..4], &SPECIALS);
        let ids = t.encode("The wound with reddened edges .");
        assert!(ids.iter().all(|&i| i > UNK));
        assert_eq!(t.decode(&ids), "the wound with reddened edges .");
        assert_eq!(t.encode("purple wound"), vec![UNK, t.id("wound").unwrap()]);
        let mut with_eos = ids.clone();
        with_eos.push(EOS);
        with_eos.push(t.id("foot").unwrap());
        assert_eq!(t.decode(&with_eos), "the wound with reddened edges .");
    }

    #[test]
    fn serde_as_word_list() {
        let t = Tokenizer::build(["b a"]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"["<pad>","<bos>","<eos>","<unk>","a","b"]"#);
        assert_eq!(serde_json::from_str::<Tokenizer>(&json).unwrap(), t);
    }
}
