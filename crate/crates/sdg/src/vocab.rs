//! Word-level vocabulary with a static part-of-speech lexicon.
//!
//! The vocabulary file is UTF-8 text with one `token<TAB>POS` per line; the
//! first three lines must declare `<bos>`, `<eos>` and `<pad>` in that order.
//! Unknown words map to `<unk>` (tagged OTHER), so lookup is total.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Result, SdgError};

/// Fixed encoder sequence length.
pub const SEQ_LEN: usize = 77;
/// Maximum number of content tokens (bos and eos take the other two slots).
pub const MAX_CONTENT: usize = 75;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pos {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Conj,
    Other,
}

impl Pos {
    pub fn parse(s: &str) -> Result<Pos> {
        Ok(match s {
            "DET" => Pos::Det,
            "ADJ" => Pos::Adj,
            "NOUN" => Pos::Noun,
            "VERB" => Pos::Verb,
            "PREP" => Pos::Prep,
            "CONJ" => Pos::Conj,
            "OTHER" => Pos::Other,
            other => {
                return Err(SdgError::Vocabulary(format!("unknown POS tag '{other}'")));
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Pos::Det => "DET",
            Pos::Adj => "ADJ",
            Pos::Noun => "NOUN",
            Pos::Verb => "VERB",
            Pos::Prep => "PREP",
            Pos::Conj => "CONJ",
            Pos::Other => "OTHER",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    pos: Vec<Pos>,
    index: HashMap<String, u32>,
    bos: u32,
    eos: u32,
    pad: u32,
    unk: u32,
}

impl Vocabulary {
    pub fn from_entries(entries: &[(&str, Pos)]) -> Result<Vocabulary> {
        if entries.len() < 3
            || entries[0].0 != BOS_TOKEN
            || entries[1].0 != EOS_TOKEN
            || entries[2].0 != PAD_TOKEN
        {
            return Err(SdgError::Vocabulary(format!(
                "first three entries must be {BOS_TOKEN}, {EOS_TOKEN}, {PAD_TOKEN}"
            )));
        }
        let mut tokens = Vec::with_capacity(entries.len());
        let mut pos = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (word, tag) in entries {
            if index.contains_key(*word) {
                return Err(SdgError::Vocabulary(format!("duplicate token '{word}'")));
            }
            index.insert((*word).to_string(), tokens.len() as u32);
            tokens.push((*word).to_string());
            pos.push(*tag);
        }
        let unk = match index.get(UNK_TOKEN) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(UNK_TOKEN.to_string(), id);
                tokens.push(UNK_TOKEN.to_string());
                pos.push(Pos::Other);
                id
            }
        };
        Ok(Vocabulary { tokens, pos, index, bos: 0, eos: 1, pad: 2, unk })
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Vocabulary> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let word = parts.next().unwrap();
            let tag = match parts.next() {
                Some(t) => Pos::parse(t.trim())?,
                None => {
                    return Err(SdgError::Vocabulary(format!(
                        "line {}: expected token<TAB>POS",
                        lineno + 1
                    )));
                }
            };
            entries.push((word, tag));
        }
        let owned: Vec<(&str, Pos)> = entries;
        Self::from_entries(&owned)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (word, tag) in self.tokens.iter().zip(self.pos.iter()) {
            out.push_str(word);
            out.push('\t');
            out.push_str(tag.as_str());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    /// Total lookup: unknown words map to `<unk>`.
    pub fn id_of(&self, word: &str) -> u32 {
        *self.index.get(word).unwrap_or(&self.unk)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn pos_of(&self, id: u32) -> Pos {
        self.pos[id as usize]
    }
}

/// Normalized word list: lowercase, split on whitespace and punctuation.
pub fn normalize_words(prompt: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in prompt.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Fixed-length token-id sequence: `[bos, content.., eos, pad..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    content_len: usize,
}

impl TokenSequence {
    pub fn from_content(content: &[u32], vocab: &Vocabulary) -> Result<TokenSequence> {
        if content.len() > MAX_CONTENT {
            return Err(SdgError::PromptTooLong(content.len()));
        }
        let mut ids = Vec::with_capacity(SEQ_LEN);
        ids.push(vocab.bos());
        ids.extend_from_slice(content);
        ids.push(vocab.eos());
        ids.resize(SEQ_LEN, vocab.pad());
        Ok(TokenSequence { ids, content_len: content.len() })
    }

    /// The `[bos, eos, pad..]` sequence used as the unconditional input.
    pub fn empty(vocab: &Vocabulary) -> TokenSequence {
        Self::from_content(&[], vocab).expect("empty content fits")
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Content token ids, i.e. positions `1..content_len+1`.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..1 + self.content_len]
    }
}

/// The vocabulary bundled with the crate.
pub fn default_vocab() -> Vocabulary {
    Vocabulary::parse(include_str!("../data/vocab.tsv")).expect("bundled vocabulary is valid")
}

/// Deterministic word-level tokenization into the fixed 77-slot layout.
pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let words = normalize_words(prompt);
    if words.is_empty() {
        return Err(SdgError::PromptTooShort);
    }
    let content: Vec<u32> = words.iter().map(|w| vocab.id_of(w)).collect();
    TokenSequence::from_content(&content, vocab)
}

#[cfg(test)]
pub(crate) fn test_vocab() -> Vocabulary {
    let entries: Vec<(&str, Pos)> = vec![
        (BOS_TOKEN, Pos::Other),
        (EOS_TOKEN, Pos::Other),
        (PAD_TOKEN, Pos::Other),
        (UNK_TOKEN, Pos::Other),
        ("a", Pos::Det),
        ("the", Pos::Det),
        ("and", Pos::Conj),
        ("of", Pos::Prep),
        ("in", Pos::Prep),
        ("on", Pos::Prep),
        ("with", Pos::Prep),
        ("red", Pos::Adj),
        ("yellow", Pos::Adj),
        ("green", Pos::Adj),
        ("white", Pos::Adj),
        ("brown", Pos::Adj),
        ("black", Pos::Adj),
        ("silver", Pos::Adj),
        ("blue", Pos::Adj),
        ("apple", Pos::Noun),
        ("banana", Pos::Noun),
        ("sheep", Pos::Noun),
        ("car", Pos::Noun),
        ("cat", Pos::Noun),
        ("dog", Pos::Noun),
        ("bench", Pos::Noun),
        ("building", Pos::Noun),
        ("front", Pos::Noun),
        ("top", Pos::Noun),
        ("it", Pos::Other),
        ("bag", Pos::Noun),
        ("running", Pos::Verb),
        ("sleeping", Pos::Verb),
        ("quickly", Pos::Other),
        ("square", Pos::Noun),
        ("circle", Pos::Noun),
        ("triangle", Pos::Noun),
    ];
    Vocabulary::from_entries(&entries).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_simple_layout() {
        let v = test_vocab();
        let t = tokenize("a red apple", &v).unwrap();
        assert_eq!(t.content_len(), 3);
        assert_eq!(t.ids().len(), SEQ_LEN);
        assert_eq!(t.ids()[0], v.bos());
        assert_eq!(t.ids()[1], v.id_of("a"));
        assert_eq!(t.ids()[2], v.id_of("red"));
        assert_eq!(t.ids()[3], v.id_of("apple"));
        assert_eq!(t.ids()[4], v.eos());
        assert!(t.ids()[5..].iter().all(|&id| id == v.pad()));
    }

    #[test]
    fn tokenize_empty_prompt_errors() {
        let v = test_vocab();
        assert!(matches!(tokenize("  ,. ", &v), Err(SdgError::PromptTooShort)));
    }

    #[test]
    fn tokenize_lowercases_sheep_and_car() {
        let v = test_vocab();
        let t = tokenize("A white sheep and a red car", &v).unwrap();
        assert_eq!(t.content_len(), 7);
        assert_eq!(t.ids()[1], v.id_of("a"));
        assert_eq!(t.ids()[2], v.id_of("white"));
        assert_eq!(t.ids()[3], v.id_of("sheep"));
        assert_eq!(t.ids()[4], v.id_of("and"));
        assert_eq!(t.ids()[7], v.id_of("car"));
    }

    #[test]
    fn tokenize_too_long_errors() {
        let v = test_vocab();
        let long: String = vec!["apple"; 76].join(" ");
        assert!(matches!(tokenize(&long, &v), Err(SdgError::PromptTooLong(76))));
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = test_vocab();
        let t = tokenize("a zebra", &v).unwrap();
        assert_eq!(t.ids()[2], v.unk());
        assert_eq!(v.pos_of(v.unk()), Pos::Other);
    }

    #[test]
    fn special_ids_pairwise_distinct() {
        let v = test_vocab();
        assert_ne!(v.bos(), v.eos());
        assert_ne!(v.eos(), v.pad());
        assert_ne!(v.bos(), v.pad());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = test_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let reloaded = Vocabulary::load(&path).unwrap();
        assert_eq!(reloaded.len(), v.len());
        assert_eq!(reloaded.id_of("apple"), v.id_of("apple"));
        assert_eq!(reloaded.pos_of(reloaded.id_of("red")), Pos::Adj);
    }

    #[test]
    fn rejects_bad_header() {
        let err = Vocabulary::parse("a\tDET\nb\tNOUN\nc\tNOUN\n");
        assert!(err.is_err());
    }
}
