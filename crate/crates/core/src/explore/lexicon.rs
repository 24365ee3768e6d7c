//! Broader/narrower label relations used to steer out-of-distribution labels
//! back to classes the model knows.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{normalize_label, Label};

const LEXICON_JSON: &str = include_str!("../../data/lexicon.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LexiconError {
    #[error("lexicon file is malformed: {0}")]
    Malformed(String),
    #[error("lexicon relation {0:?} -> {1:?} has an empty label")]
    EmptyLabel(String, String),
    #[error("lexicon relations contain a cycle through {0:?}")]
    Cycle(String),
}

#[derive(Deserialize)]
struct LexiconFile {
    #[allow(dead_code)]
    lexicon_version: u32,
    pairs: Vec<Pair>,
}

#[derive(Deserialize)]
struct Pair {
    narrower: String,
    broader: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    hypernyms: BTreeMap<Label, Vec<Label>>,
    hyponyms: BTreeMap<Label, Vec<Label>>,
}

impl Lexicon {
    /// The lexicon shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(LEXICON_JSON).expect("bundled lexicon is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = serde_json::from_str(text).map_err(|e| LexiconError::Malformed(e.to_string()))?;
        Self::from_pairs(file.pairs.iter().map(|p| (p.narrower.as_str(), p.broader.as_str())))
    }

    /// Builds from `(narrower, broader)` pairs, rejecting cycles.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, LexiconError> {
        let mut lex = Lexicon::default();
        for (narrow, broad) in pairs {
            let (n, b) = match (Label::new(narrow), Label::new(broad)) {
                (Ok(n), Ok(b)) => (n, b),
                _ => return Err(LexiconError::EmptyLabel(narrow.into(), broad.into())),
            };
            let up = lex.hypernyms.entry(n.clone()).or_default();
            if !up.contains(&b) {
                up.push(b.clone());
            }
            let down = lex.hyponyms.entry(b).or_default();
            if !down.contains(&n) {
                down.push(n);
            }
        }
        lex.check_acyclic()?;
        Ok(lex)
    }

    fn check_acyclic(&self) -> Result<(), LexiconError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<&Label, u8> = BTreeMap::new();
        fn visit<'a>(lex: &'a Lexicon, node: &'a Label, state: &mut BTreeMap<&'a Label, u8>) -> Result<(), LexiconError> {
            match state.get(node) {
                Some(1) => return Err(LexiconError::Cycle(node.to_string())),
                Some(2) => return Ok(()),
                _ => {}
            }
            state.insert(node, 1);
            for next in lex.hypernyms.get(node).into_iter().flatten() {
                visit(lex, next, state)?;
            }
            state.insert(node, 2);
            Ok(())
        }
        for node in self.hypernyms.keys() {
            visit(self, node, &mut state)?;
        }
        Ok(())
    }

    pub fn hypernyms(&self, label: &str) -> &[Label] {
        Label::new(&normalize_label(label))
            .ok()
            .and_then(|l| self.hypernyms.get(&l))
            .map_or(&[], Vec::as_slice)
    }

    pub fn hyponyms(&self, label: &str) -> &[Label] {
        Label::new(&normalize_label(label))
            .ok()
            .and_then(|l| self.hyponyms.get(&l))
            .map_or(&[], Vec::as_slice)
    }

    /// Number of distinct (narrower, broader) relations.
    pub fn relation_count(&self) -> usize {
        self.hypernyms.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> BTreeSet<&Label> {
        self.hypernyms.keys().chain(self.hyponyms.keys()).collect()
    }
}
