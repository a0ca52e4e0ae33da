//! Constituency trees in bracketed s-expression form, plus NP extraction.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SdgError};
use crate::vocab::normalize_words;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseTree {
    Leaf(String),
    Node { label: String, children: Vec<ParseTree> },
}

impl ParseTree {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ParseTree::Leaf(w) => out.push(w),
            ParseTree::Node { children, .. } => {
                for c in children {
                    c.collect_leaves(out);
                }
            }
        }
    }

    /// Surface text of this subtree (leaves joined by spaces).
    pub fn text(&self) -> String {
        self.leaves().join(" ")
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        self.write_sexpr(&mut s);
        s
    }

    fn write_sexpr(&self, out: &mut String) {
        match self {
            ParseTree::Leaf(w) => out.push_str(w),
            ParseTree::Node { label, children } => {
                let _ = write!(out, "({label}");
                for c in children {
                    out.push(' ');
                    c.write_sexpr(out);
                }
                out.push(')');
            }
        }
    }

    /// Errors with `MalformedTree` if any non-leaf node has zero children.
    pub fn validate(&self) -> Result<()> {
        match self {
            ParseTree::Leaf(_) => Ok(()),
            ParseTree::Node { label, children } => {
                if children.is_empty() {
                    return Err(SdgError::MalformedTree(label.clone()));
                }
                for c in children {
                    c.validate()?;
                }
                Ok(())
            }
        }
    }
}

/// Text of every NP-labeled node, children before parents, left to right.
/// Nested NPs yield both the inner and the enclosing span; duplicates are
/// preserved.
pub fn extract_noun_phrases(tree: &ParseTree) -> Result<Vec<String>> {
    tree.validate()?;
    let mut out = Vec::new();
    collect_nps(tree, &mut out);
    Ok(out)
}

fn collect_nps(tree: &ParseTree, out: &mut Vec<String>) {
    if let ParseTree::Node { label, children } = tree {
        for c in children {
            collect_nps(c, out);
        }
        if label == "NP" {
            out.push(tree.text());
        }
    }
}

struct SexprParser<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
    _src: &'a str,
}

impl<'a> SexprParser<'a> {
    fn new(src: &'a str) -> Self {
        SexprParser { chars: src.chars().collect(), pos: 0, line: 1, col: 1, _src: src }
    }

    fn err(&self, msg: &str) -> SdgError {
        SdgError::SyntaxError { line: self.line, col: self.col, msg: msg.to_string() }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn atom(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            s.push(c);
            self.bump();
        }
        s
    }

    fn node(&mut self) -> Result<ParseTree> {
        self.skip_ws();
        match self.peek() {
            Some('(') => {
                self.bump();
                self.skip_ws();
                let label = self.atom();
                if label.is_empty() {
                    return Err(self.err("expected constituent label after '('"));
                }
                if !label.chars().all(|c| c.is_ascii_uppercase() || c == '$' || c == '-') {
                    return Err(self.err(&format!("label '{label}' is not uppercase ASCII")));
                }
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(')') => {
                            self.bump();
                            break;
                        }
                        Some(_) => children.push(self.node()?),
                        None => return Err(self.err("unexpected end of input, missing ')'")),
                    }
                }
                Ok(ParseTree::Node { label, children })
            }
            Some(_) => {
                let word = self.atom();
                if word.is_empty() {
                    return Err(self.err("expected word or '('"));
                }
                Ok(ParseTree::Leaf(word))
            }
            None => Err(self.err("unexpected end of input")),
        }
    }
}

pub fn parse_sexpr(src: &str) -> Result<ParseTree> {
    let mut p = SexprParser::new(src);
    let tree = p.node()?;
    p.skip_ws();
    if p.peek().is_some() {
        return Err(p.err("trailing content after tree"));
    }
    tree.validate()?;
    Ok(tree)
}

pub fn load_parse_tree(path: &Path) -> Result<ParseTree> {
    let text = std::fs::read_to_string(path)?;
    parse_sexpr(&text)
}

/// Checks that the tree's leaves normalize to the same word sequence as the
/// prompt.
pub fn check_leaves_match(tree: &ParseTree, prompt: &str) -> Result<()> {
    let tree_words: Vec<String> =
        tree.leaves().iter().flat_map(|w| normalize_words(w)).collect();
    let prompt_words = normalize_words(prompt);
    if tree_words != prompt_words {
        return Err(SdgError::LeafMismatch(format!(
            "tree reads '{}', prompt reads '{}'",
            tree_words.join(" "),
            prompt_words.join(" ")
        )));
    }
    Ok(())
}
