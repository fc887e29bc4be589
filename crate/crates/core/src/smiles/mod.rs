//! SMILES front end for the organic subset.
//!
//! Supported: `B C N O P S F Cl Br I`, aromatic `b c n o p s`, bonds
//! `- = # :`, branches, ring closures `0-9` and `%nn`, `.` component
//! separators, and bracket atoms that carry nothing beyond an element and
//! a hydrogen count. Hydrogens stay implicit.

mod alphabet;
mod parser;
mod tokenizer;
mod writer;

use thiserror::Error;

pub use alphabet::{AtomAlphabet, BondAlphabet, BondKind, SUPPORTED_SYMBOLS};
pub use parser::{parse_tokens, parse_with};
pub use tokenizer::{tokenize, AtomToken, BondSymbol, BracketAtom, SmilesToken, TokenKind};
pub use writer::write_with;

use crate::molgraph::MolecularGraph;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES")]
    EmptyInput,
    #[error("unknown symbol at position {position}")]
    UnknownSymbol { position: usize },
    #[error("unterminated bracket atom starting at position {position}")]
    UnterminatedBracketAtom { position: usize },
    #[error("ring bond {index} is never closed")]
    UnmatchedRingBond { index: u8 },
    #[error("branch closed without an opening atom at position {position}")]
    BranchUnderflow { position: usize },
    #[error("branch opened at position {position} is never closed")]
    BranchOverflow { position: usize },
    #[error("unsupported {feature} at position {position}")]
    UnsupportedFeature {
        position: usize,
        feature: &'static str,
    },
    #[error("bond symbol at position {position} has no atom to attach to")]
    MisplacedBond { position: usize },
    #[error("ring closure at position {position} has conflicting bond symbols")]
    RingBondConflict { position: usize },
    #[error("atoms bonded twice (or to themselves) at position {position}")]
    DuplicateBond { position: usize },
    #[error("atom `{symbol}` at position {position} is not in the configured alphabet")]
    AtomNotInAlphabet { position: usize, symbol: String },
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("graph cannot be written as SMILES: {0}")]
    UnserializableGraph(String),
}

/// Parses with the default alphabets.
pub fn parse(text: &str) -> Result<MolecularGraph, SmilesError> {
    parse_with(text, &AtomAlphabet::default(), &BondAlphabet::default())
}

/// Writes with the default alphabets.
pub fn write_smiles(graph: &MolecularGraph) -> Result<String, SmilesError> {
    write_with(graph, &AtomAlphabet::default(), &BondAlphabet::default())
}

/// An atom and bond vocabulary pair; the graph categories are indices into it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SmilesCodec {
    pub atoms: AtomAlphabet,
    pub bonds: BondAlphabet,
}

impl SmilesCodec {
    pub fn new(atoms: AtomAlphabet, bonds: BondAlphabet) -> Self {
        Self { atoms, bonds }
    }

    pub fn parse(&self, text: &str) -> Result<MolecularGraph, SmilesError> {
        parse_with(text, &self.atoms, &self.bonds)
    }

    pub fn write(&self, graph: &MolecularGraph) -> Result<String, SmilesError> {
        write_with(graph, &self.atoms, &self.bonds)
    }

    /// Atom category count (K).
    pub fn num_atom_types(&self) -> usize {
        self.atoms.len()
    }

    /// Bond category count (L).
    pub fn num_bond_types(&self) -> usize {
        self.bonds.len()
    }
}
