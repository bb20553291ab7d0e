use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::{Element, Molecule};
use crate::error::{Error, Result};

pub const BOS_SYMBOL: &str = "[BOS]";
pub const STOP_SYMBOL: &str = "[STOP]";

/// A token id. Element ids come first, followed by BOS and STOP.
pub type TokenId = usize;

/// Bijection between elements and dense token ids, plus the two reserved
/// tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    elements: Vec<Element>,
}

impl Vocabulary {
    /// Elements are ordered by symbol so the table only depends on the set
    /// of elements present.
    pub fn new(elements: impl IntoIterator<Item = Element>) -> Self {
        let set: BTreeSet<Element> = elements.into_iter().collect();
        let mut elements: Vec<Element> = set.into_iter().collect();
        elements.sort_by_key(|e| e.symbol());
        Vocabulary { elements }
    }

    pub fn build(mols: &[Molecule]) -> Self {
        Self::new(mols.iter().flat_map(|m| m.elements.iter().copied()))
    }

    pub fn len(&self) -> usize {
        self.elements.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bos(&self) -> TokenId {
        self.elements.len()
    }

    pub fn stop(&self) -> TokenId {
        self.elements.len() + 1
    }

    /// Tokens the type head may emit: every element and STOP.
    pub fn emittable(&self) -> usize {
        self.elements.len() + 1
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn id(&self, element: Element) -> Result<TokenId> {
        self.elements
            .iter()
            .position(|&e| e == element)
            .ok_or_else(|| Error::UnknownType(element.symbol().to_string()))
    }

    pub fn element(&self, id: TokenId) -> Option<Element> {
        self.elements.get(id).copied()
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        match self.element(id) {
            Some(e) => e.symbol(),
            None if id == self.bos() => BOS_SYMBOL,
            None if id == self.stop() => STOP_SYMBOL,
            None => "?",
        }
    }

    pub fn encode(&self, mol: &Molecule) -> Result<Vec<TokenId>> {
        mol.elements.iter().map(|&e| self.id(e)).collect()
    }

    /// `id symbol` table, one token per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() {
            let _ = writeln!(out, "{id} {}", self.symbol(id));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut elements = Vec::new();
        let mut saw_bos = false;
        let mut saw_stop = false;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("expected token id".into()))?;
            let symbol = fields.next().ok_or_else(|| bad("expected symbol".into()))?;
            match symbol {
                BOS_SYMBOL => saw_bos = true,
                STOP_SYMBOL => saw_stop = true,
                _ => {
                    if id != elements.len() {
                        return Err(bad(format!("element ids must be dense, got {id}")));
                    }
                    elements.push(symbol.parse::<Element>()?);
                }
            }
        }
        if !(saw_bos && saw_stop) {
            return Err(Error::VocabularyMismatch("missing reserved tokens".into()));
        }
        let vocab = Vocabulary::new(elements.iter().copied());
        if vocab.elements != elements {
            return Err(Error::VocabularyMismatch(
                "element ids are not in canonical order".into(),
            ));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mol(symbols: &[&str]) -> Molecule {
        Molecule::new(
            symbols.iter().map(|s| s.parse().unwrap()).collect(),
            vec![[0.0; 3]; symbols.len()],
        )
        .unwrap()
    }

    #[test]
    fn qm9_like_corpus() {
        let corpus = vec![mol(&["C", "H", "H", "H", "H"]), mol(&["O", "N", "F"])];
        let v = Vocabulary::build(&corpus);
        assert_eq!(v.len(), 7);
        let symbols: Vec<&str> = (0..v.len()).map(|i| v.symbol(i)).collect();
        assert_eq!(symbols, ["C", "F", "H", "N", "O", BOS_SYMBOL, STOP_SYMBOL]);
        assert_eq!(Vocabulary::build(&corpus), v);
        let reversed: Vec<Molecule> = corpus.into_iter().rev().collect();
        assert_eq!(Vocabulary::build(&reversed), v);
    }

    #[test]
    fn empty_corpus_has_reserved_tokens_only() {
        let v = Vocabulary::build(&[]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.bos(), 0);
        assert_eq!(v.stop(), 1);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(&[mol(&["Cl", "C", "H"])]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("0 C\n").is_err());
    }

    #[test]
    fn unknown_element_is_an_error() {
        let v = Vocabulary::build(&[mol(&["C"])]);
        assert!(v.encode(&mol(&["N"])).is_err());
    }
}
