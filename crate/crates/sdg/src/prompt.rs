//! Concept spans: extraction from POS patterns and location of span text in
//! the full-prompt token sequence.

use std::collections::BTreeSet;

use crate::error::{Result, SdgError};
use crate::parse_tree::{extract_noun_phrases, ParseTree};
use crate::scene_graph::{extract_scene_graph_spans, SceneGraph};
use crate::vocab::{normalize_words, Pos, TokenSequence, Vocabulary};
#[cfg(test)]
use crate::vocab::tokenize;

/// Hard cap on the number of concepts fed into fusion; extras are dropped.
pub const MAX_CONCEPTS: usize = 8;

/// A text span located in the full prompt's token sequence. Token indices
/// address the full 77-slot layout (content region, end exclusive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptSpan {
    pub text: String,
    pub token_start: usize,
    pub token_end: usize,
}

impl ConceptSpan {
    pub fn len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        self.token_start == self.token_end
    }
}

/// Maximal matches of `DET? ADJ* NOUN+` over the POS tags of the content
/// tokens, left to right, non-overlapping.
pub fn chunk_noun_phrases(tokens: &TokenSequence, vocab: &Vocabulary) -> Vec<ConceptSpan> {
    let content = tokens.content();
    let tags: Vec<Pos> = content.iter().map(|&id| vocab.pos_of(id)).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < content.len() {
        let start = i;
        let mut j = i;
        if j < tags.len() && tags[j] == Pos::Det {
            j += 1;
        }
        while j < tags.len() && tags[j] == Pos::Adj {
            j += 1;
        }
        let noun_start = j;
        while j < tags.len() && tags[j] == Pos::Noun {
            j += 1;
        }
        if j > noun_start {
            let words: Vec<&str> = content[start..j].iter().map(|&id| vocab.token(id)).collect();
            spans.push(ConceptSpan {
                text: words.join(" "),
                token_start: start + 1,
                token_end: j + 1,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    spans
}

/// Leftmost occurrence of `span_text` in the content tokens whose start index
/// is not in `used`; the chosen start is added to `used`.
pub fn locate_span(
    span_text: &str,
    full: &TokenSequence,
    used: &mut BTreeSet<usize>,
    vocab: &Vocabulary,
) -> Result<ConceptSpan> {
    let words = normalize_words(span_text);
    if words.is_empty() {
        return Err(SdgError::SpanNotFound(span_text.to_string()));
    }
    let needle: Vec<u32> = words.iter().map(|w| vocab.id_of(w)).collect();
    let content = full.content();
    if needle.len() > content.len() {
        return Err(SdgError::SpanNotFound(span_text.to_string()));
    }
    for start in 0..=content.len() - needle.len() {
        let token_start = start + 1;
        if used.contains(&token_start) {
            continue;
        }
        if content[start..start + needle.len()] == needle[..] {
            used.insert(token_start);
            return Ok(ConceptSpan {
                text: span_text.to_string(),
                token_start,
                token_end: token_start + needle.len(),
            });
        }
    }
    Err(SdgError::SpanNotFound(span_text.to_string()))
}

/// Where the concept set comes from.
#[derive(Debug, Clone)]
pub enum ParserSource {
    /// Built-in rule-based chunker over the POS lexicon.
    Chunker,
    /// Externally supplied constituency tree.
    Tree(ParseTree),
    /// Externally supplied scene graph.
    SceneGraph(SceneGraph),
}

/// Extracted concepts plus how many were dropped by the [`MAX_CONCEPTS`] cap.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub spans: Vec<ConceptSpan>,
    pub dropped: usize,
}

/// Retrieves the concept set for a prompt, locating each span in the full
/// token sequence. Spans are ordered by start index so downstream summation
/// order is fixed.
pub fn concept_set(
    prompt: &str,
    source: &ParserSource,
    tokens: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<ConceptSet> {
    let mut spans = match source {
        ParserSource::Chunker => chunk_noun_phrases(tokens, vocab),
        ParserSource::Tree(tree) => {
            crate::parse_tree::check_leaves_match(tree, prompt)?;
            let texts = extract_noun_phrases(tree)?;
            locate_all(&texts, tokens, vocab)?
        }
        ParserSource::SceneGraph(graph) => {
            let texts = extract_scene_graph_spans(graph)?;
            locate_all(&texts, tokens, vocab)?
        }
    };
    spans.sort_by_key(|s| (s.token_start, s.token_end));
    let dropped = spans.len().saturating_sub(MAX_CONCEPTS);
    spans.truncate(MAX_CONCEPTS);
    Ok(ConceptSet { spans, dropped })
}

fn locate_all(
    texts: &[String],
    tokens: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<Vec<ConceptSpan>> {
    let mut used = BTreeSet::new();
    texts
        .iter()
        .map(|t| locate_span(t, tokens, &mut used, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::test_vocab;

    #[test]
    fn chunker_two_nps() {
        let v = test_vocab();
        let t = tokenize("a red apple and a yellow banana", &v).unwrap();
        let spans = chunk_noun_phrases(&t, &v);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].text, "a red apple");
        assert_eq!((spans[0].token_start, spans[0].token_end), (1, 4));
        assert_eq!(spans[1].text, "a yellow banana");
        assert_eq!((spans[1].token_start, spans[1].token_end), (5, 8));
    }

    #[test]
    fn chunker_no_nouns() {
        let v = test_vocab();
        let t = tokenize("running quickly", &v).unwrap();
        assert!(chunk_noun_phrases(&t, &v).is_empty());
    }

    #[test]
    fn chunker_bare_noun_matches() {
        let v = test_vocab();
        let t = tokenize("a brown bench in front of a white building", &v).unwrap();
        let spans = chunk_noun_phrases(&t, &v);
        let texts: Vec<&str> = spans.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["a brown bench", "front", "a white building"]);
    }

    #[test]
    fn chunker_spans_never_overlap() {
        let v = test_vocab();
        for prompt in [
            "a red apple and a yellow banana",
            "a brown bench in front of a white building",
            "a silver car with a black cat sleeping on top of it",
            "apple banana car",
        ] {
            let t = tokenize(prompt, &v).unwrap();
            let spans = chunk_noun_phrases(&t, &v);
            for w in spans.windows(2) {
                assert!(w[0].token_end <= w[1].token_start);
            }
            for s in &spans {
                assert!(s.token_start >= 1);
                assert!(s.token_start < s.token_end);
                assert!(s.token_end <= t.content_len() + 1);
            }
        }
    }

    #[test]
    fn locate_basic() {
        let v = test_vocab();
        let t = tokenize("a white sheep and a red car", &v).unwrap();
        let mut used = BTreeSet::new();
        let s = locate_span("a red car", &t, &mut used, &v).unwrap();
        assert_eq!((s.token_start, s.token_end), (5, 8));
    }

    #[test]
    fn locate_whole_content() {
        let v = test_vocab();
        let t = tokenize("a red apple", &v).unwrap();
        let mut used = BTreeSet::new();
        let s = locate_span("a red apple", &t, &mut used, &v).unwrap();
        assert_eq!((s.token_start, s.token_end), (1, t.content_len() + 1));
    }

    #[test]
    fn locate_duplicate_takes_next_occurrence() {
        let v = test_vocab();
        let t = tokenize("a dog and a dog", &v).unwrap();
        let mut used = BTreeSet::new();
        let first = locate_span("a dog", &t, &mut used, &v).unwrap();
        let second = locate_span("a dog", &t, &mut used, &v).unwrap();
        assert_eq!((first.token_start, first.token_end), (1, 3));
        assert_eq!((second.token_start, second.token_end), (4, 6));
        assert!(matches!(
            locate_span("a dog", &t, &mut used, &v),
            Err(SdgError::SpanNotFound(_))
        ));
    }

    #[test]
    fn concept_set_caps_at_eight() {
        let v = test_vocab();
        let prompt = vec!["apple banana"; 9].join(" and ");
        let t = tokenize(&prompt, &v).unwrap();
        let set = concept_set(&prompt, &ParserSource::Chunker, &t, &v).unwrap();
        assert_eq!(set.spans.len(), MAX_CONCEPTS);
        assert_eq!(set.dropped, 1);
    }

    #[test]
    fn concept_set_from_tree_matches_library_extraction() {
        let v = test_vocab();
        let prompt = "A white sheep and a red car";
        let tree = crate::parse_tree::parse_sexpr(
            "(S (NP (DT A) (JJ white) (NN sheep)) (CC and) (NP (DT a) (JJ red) (NN car)))",
        )
        .unwrap();
        let t = tokenize(prompt, &v).unwrap();
        let set = concept_set(prompt, &ParserSource::Tree(tree), &t, &v).unwrap();
        assert_eq!(set.spans.len(), 2);
        assert_eq!((set.spans[0].token_start, set.spans[0].token_end), (1, 4));
        assert_eq!((set.spans[1].token_start, set.spans[1].token_end), (5, 8));
    }
}
