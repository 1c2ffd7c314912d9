use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

/// Word-level vocabulary. Ids 0..4 are reserved for BOS, EOS, PAD and UNK;
/// ordinary words follow densely from 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from words in first-seen order, skipping repeats.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            words: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || vocab.token_to_id.contains_key(&w) {
                continue;
            }
            let id = NUM_SPECIAL + vocab.words.len() as u32;
            vocab.token_to_id.insert(w.clone(), id);
            vocab.words.push(w);
        }
        vocab
    }

    /// Sorted, deduplicated vocabulary over the whitespace-split words of `texts`.
    pub fn from_corpus<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        NUM_SPECIAL as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.token_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        match id {
            BOS => "<bos>",
            EOS => "<eos>",
            PAD => "<pad>",
            UNK => "<unk>",
            _ => self
                .words
                .get((id - NUM_SPECIAL) as usize)
                .map(String::as_str)
                .unwrap_or("<unk>"),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line; the word on line `n` (0-based) has id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(invalid(format!("vocab line {}: invalid word {line:?}", n + 1)));
            }
            if !seen.insert(w.to_string()) {
                return Err(invalid(format!("vocab line {}: duplicate word {w:?}", n + 1)));
            }
            words.push(w.to_string());
        }
        Ok(Self::from_words(words))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

/// `BOS w1 .. wn EOS PAD ..`, padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    content_len: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Number of non-PAD tokens (including BOS and EOS).
    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Ids up to and including EOS.
    pub fn content(&self) -> &[u32] {
        &self.ids[..self.content_len]
    }

    /// The caption's word tokens, without BOS/EOS.
    pub fn words(&self) -> &[u32] {
        &self.ids[1..self.content_len - 1]
    }

    pub fn num_words(&self) -> usize {
        self.content_len - 2
    }

    pub fn eos_index(&self) -> usize {
        self.content_len - 1
    }
}

/// Lowercases, splits on whitespace, maps out-of-vocabulary words to UNK and
/// wraps the result in BOS/EOS, padding to `max_len`. Words beyond
/// `max_len - 2` are dropped.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(
        text.split_whitespace()
            .take(max_len - 2)
            .map(|w| vocab.id(&w.to_lowercase())),
    );
    ids.push(EOS);
    let content_len = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence { ids, content_len }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocab {
        Vocab::from_words(["a", "red", "cat"])
    }

    #[test]
    fn empty_text() {
        let seq = tokenize("", &abc(), 6);
        assert_eq!(seq.ids(), &[BOS, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(seq.content_len(), 2);
        assert_eq!(seq.num_words(), 0);
    }

    #[test]
    fn known_words() {
        let v = abc();
        assert_eq!((v.id("a"), v.id("red"), v.id("cat")), (4, 5, 6));
        let seq = tokenize("a red cat", &v, 8);
        assert_eq!(seq.ids(), &[0, 4, 5, 6, 1, 2, 2, 2]);
        assert_eq!(seq.words(), &[4, 5, 6]);
        assert_eq!(seq.eos_index(), 4);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let seq = tokenize("a zorp cat", &abc(), 8);
        assert_eq!(seq.ids(), &[0, 4, 3, 6, 1, 2, 2, 2]);
    }

    #[test]
    fn lowercases_and_truncates() {
        let seq = tokenize("A RED cat a red", &abc(), 5);
        assert_eq!(seq.ids(), &[0, 4, 5, 6, 1]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_corpus(["b a", "c a"]);
        assert_eq!(v.to_file_string(), "a\nb\nc\n");
        let parsed = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(parsed, v);
        assert_eq!(parsed.id("c"), 6);
        assert!(Vocab::parse("a\na\n").is_err());
    }
}
