use serde::{Deserialize, Serialize};

use super::SmilesError;

/// Organic-subset symbols the tokenizer understands, aliphatic then aromatic.
pub const SUPPORTED_SYMBOLS: [&str; 16] = [
    "C", "N", "O", "F", "S", "Cl", "Br", "I", "P", "B", "c", "n", "o", "s", "p", "b",
];

/// Ordered atom categories; the index of a symbol is its node category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomAlphabet {
    symbols: Vec<String>,
}

impl Default for AtomAlphabet {
    fn default() -> Self {
        Self {
            symbols: SUPPORTED_SYMBOLS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AtomAlphabet {
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self, SmilesError> {
        if symbols.is_empty() {
            return Err(SmilesError::InvalidAlphabet(
                "atom alphabet is empty".into(),
            ));
        }
        let mut out: Vec<String> = Vec::with_capacity(symbols.len());
        for s in symbols {
            let s = s.as_ref();
            if !SUPPORTED_SYMBOLS.contains(&s) {
                return Err(SmilesError::InvalidAlphabet(format!(
                    "unsupported atom symbol `{s}`"
                )));
            }
            if out.iter().any(|o| o == s) {
                return Err(SmilesError::InvalidAlphabet(format!(
                    "duplicate atom symbol `{s}`"
                )));
            }
            out.push(s.to_string());
        }
        Ok(Self { symbols: out })
    }

    /// Number of atom categories (K).
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn is_aromatic(&self, index: usize) -> bool {
        self.symbols[index].starts_with(|c: char| c.is_ascii_lowercase())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondKind {
    None,
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondKind {
    /// Bond order used for valence bookkeeping.
    pub fn order(self) -> f64 {
        match self {
            BondKind::None => 0.0,
            BondKind::Single => 1.0,
            BondKind::Double => 2.0,
            BondKind::Triple => 3.0,
            BondKind::Aromatic => 1.5,
        }
    }
}

/// Ordered bond categories; index 0 is always [`BondKind::None`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BondAlphabet {
    kinds: Vec<BondKind>,
}

impl Default for BondAlphabet {
    fn default() -> Self {
        Self {
            kinds: vec![
                BondKind::None,
                BondKind::Single,
                BondKind::Double,
                BondKind::Triple,
                BondKind::Aromatic,
            ],
        }
    }
}

impl BondAlphabet {
    pub fn new(kinds: Vec<BondKind>) -> Result<Self, SmilesError> {
        if kinds.len() < 2 {
            return Err(SmilesError::InvalidAlphabet(
                "bond alphabet needs at least 2 kinds".into(),
            ));
        }
        if kinds[0] != BondKind::None {
            return Err(SmilesError::InvalidAlphabet(
                "bond category 0 must be `none`".into(),
            ));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(SmilesError::InvalidAlphabet(format!(
                    "duplicate bond kind {k:?}"
                )));
            }
        }
        Ok(Self { kinds })
    }

    /// Number of bond categories (L), including "none".
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[BondKind] {
        &self.kinds
    }

    pub fn index_of(&self, kind: BondKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    pub fn kind(&self, index: usize) -> BondKind {
        self.kinds[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        assert_eq!(AtomAlphabet::default().len(), 16);
        assert_eq!(BondAlphabet::default().len(), 5);
        assert_eq!(BondAlphabet::default().kind(0), BondKind::None);
    }

    #[test]
    fn rejects_bad_alphabets() {
        assert!(AtomAlphabet::new::<&str>(&[]).is_err());
        assert!(AtomAlphabet::new(&["C", "C"]).is_err());
        assert!(AtomAlphabet::new(&["Xe"]).is_err());
        assert!(BondAlphabet::new(vec![BondKind::Single, BondKind::None]).is_err());
        assert!(BondAlphabet::new(vec![BondKind::None]).is_err());
        let small = BondAlphabet::new(vec![BondKind::None, BondKind::Single]).unwrap();
        assert_eq!(small.index_of(BondKind::Double), None);
    }

    #[test]
    fn aromatic_flag() {
        let a = AtomAlphabet::default();
        assert!(a.is_aromatic(a.index_of("c").unwrap()));
        assert!(!a.is_aromatic(a.index_of("Cl").unwrap()));
    }
}
