use std::collections::BTreeMap;

use super::alphabet::{AtomAlphabet, BondAlphabet, BondKind};
use super::tokenizer::{tokenize, BondSymbol, SmilesToken, TokenKind};
use super::SmilesError;
use crate::molgraph::MolecularGraph;

struct OpenRing {
    atom: usize,
    bond: Option<BondSymbol>,
}

struct Builder<'a> {
    atoms: &'a AtomAlphabet,
    bonds: &'a BondAlphabet,
    node_types: Vec<usize>,
    aromatic: Vec<bool>,
    edges: BTreeMap<(usize, usize), BondKind>,
}

impl Builder<'_> {
    fn add_bond(
        &mut self,
        a: usize,
        b: usize,
        symbol: Option<BondSymbol>,
        position: usize,
    ) -> Result<(), SmilesError> {
        if a == b {
            return Err(SmilesError::DuplicateBond { position });
        }
        let kind = match symbol {
            None if self.aromatic[a] && self.aromatic[b] => BondKind::Aromatic,
            None | Some(BondSymbol::Single) => BondKind::Single,
            Some(BondSymbol::Double) => BondKind::Double,
            Some(BondSymbol::Triple) => BondKind::Triple,
            Some(BondSymbol::Aromatic) => BondKind::Aromatic,
            Some(BondSymbol::Up | BondSymbol::Down) => {
                return Err(SmilesError::UnsupportedFeature {
                    position,
                    feature: "directional bond",
                })
            }
            Some(BondSymbol::Dot) => unreachable!("dot handled by caller"),
        };
        if self.bonds.index_of(kind).is_none() {
            return Err(SmilesError::UnsupportedFeature {
                position,
                feature: "bond kind outside the configured alphabet",
            });
        }
        let key = (a.min(b), a.max(b));
        if self.edges.insert(key, kind).is_some() {
            return Err(SmilesError::DuplicateBond { position });
        }
        Ok(())
    }
}

/// Builds a graph from a token stream. Atom order follows token order.
pub fn parse_tokens(
    tokens: &[SmilesToken],
    atoms: &AtomAlphabet,
    bonds: &BondAlphabet,
) -> Result<MolecularGraph, SmilesError> {
    let mut b = Builder {
        atoms,
        bonds,
        node_types: Vec::new(),
        aromatic: Vec::new(),
        edges: BTreeMap::new(),
    };
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondSymbol, usize)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut rings: BTreeMap<u8, OpenRing> = BTreeMap::new();

    for tok in tokens {
        let pos = tok.position;
        match &tok.kind {
            TokenKind::Atom(a) => {
                if let Some(detail) = &a.bracket {
                    let feature = if detail.isotope.is_some() {
                        Some("isotope")
                    } else if detail.chirality.is_some() {
                        Some("stereo marker")
                    } else if detail.charge != 0 {
                        Some("formal charge")
                    } else if detail.class.is_some() {
                        Some("atom class")
                    } else {
                        None
                    };
                    if let Some(feature) = feature {
                        return Err(SmilesError::UnsupportedFeature {
                            position: pos,
                            feature,
                        });
                    }
                }
                let category =
                    b.atoms
                        .index_of(a.symbol)
                        .ok_or_else(|| SmilesError::AtomNotInAlphabet {
                            position: pos,
                            symbol: a.symbol.to_string(),
                        })?;
                let idx = b.node_types.len();
                b.node_types.push(category);
                b.aromatic
                    .push(a.symbol.starts_with(|c: char| c.is_ascii_lowercase()));
                match pending.take() {
                    Some((BondSymbol::Dot, _)) => {}
                    Some((sym, bpos)) => {
                        let from = prev.ok_or(SmilesError::MisplacedBond { position: bpos })?;
                        b.add_bond(from, idx, Some(sym), bpos)?;
                    }
                    None => {
                        if let Some(from) = prev {
                            b.add_bond(from, idx, None, pos)?;
                        }
                    }
                }
                prev = Some(idx);
            }
            TokenKind::Bond(sym) => {
                if pending.is_some() || prev.is_none() {
                    return Err(SmilesError::MisplacedBond { position: pos });
                }
                pending = Some((*sym, pos));
            }
            TokenKind::BranchOpen => {
                let anchor = prev.ok_or(SmilesError::BranchUnderflow { position: pos })?;
                if pending.is_some() {
                    return Err(SmilesError::MisplacedBond { position: pos });
                }
                branches.push((anchor, pos));
            }
            TokenKind::BranchClose => {
                let (anchor, _) = branches
                    .pop()
                    .ok_or(SmilesError::BranchUnderflow { position: pos })?;
                if let Some((_, bpos)) = pending {
                    return Err(SmilesError::MisplacedBond { position: bpos });
                }
                prev = Some(anchor);
            }
            TokenKind::RingBond(label) => {
                let here = prev.ok_or(SmilesError::MisplacedBond { position: pos })?;
                let symbol = match pending.take() {
                    Some((BondSymbol::Dot, bpos)) => {
                        return Err(SmilesError::MisplacedBond { position: bpos })
                    }
                    Some((sym, _)) => Some(sym),
                    None => None,
                };
                match rings.remove(label) {
                    Some(open) => {
                        let symbol = match (open.bond, symbol) {
                            (Some(x), Some(y)) if x != y => {
                                return Err(SmilesError::RingBondConflict { position: pos })
                            }
                            (x, y) => x.or(y),
                        };
                        b.add_bond(open.atom, here, symbol, pos)?;
                    }
                    None => {
                        rings.insert(
                            *label,
                            OpenRing {
                                atom: here,
                                bond: symbol,
                            },
                        );
                    }
                }
            }
        }
    }

    if let Some((_, bpos)) = pending {
        return Err(SmilesError::MisplacedBond { position: bpos });
    }
    if let Some((&label, _)) = rings.iter().next() {
        return Err(SmilesError::UnmatchedRingBond { index: label });
    }
    if let Some(&(_, pos)) = branches.last() {
        return Err(SmilesError::BranchOverflow { position: pos });
    }
    if b.node_types.is_empty() {
        return Err(SmilesError::EmptyInput);
    }

    let n = b.node_types.len();
    let mut matrix = vec![0usize; n * n];
    for (&(i, j), &kind) in &b.edges {
        let cat = b.bonds.index_of(kind).expect("checked in add_bond");
        matrix[i * n + j] = cat;
        matrix[j * n + i] = cat;
    }
    let graph = MolecularGraph::new(b.node_types, matrix)
        .expect("parser always builds symmetric zero-diagonal matrices");
    warn_on_valence(&graph, atoms, bonds);
    Ok(graph)
}

pub fn parse_with(
    text: &str,
    atoms: &AtomAlphabet,
    bonds: &BondAlphabet,
) -> Result<MolecularGraph, SmilesError> {
    parse_tokens(&tokenize(text)?, atoms, bonds)
}

fn max_valence(symbol: &str) -> f64 {
    match symbol {
        "B" | "b" => 3.0,
        "C" | "c" => 4.0,
        "N" | "n" => 3.0,
        "O" | "o" => 2.0,
        "P" | "p" => 5.0,
        "S" | "s" => 6.0,
        _ => 1.0,
    }
}

fn warn_on_valence(graph: &MolecularGraph, atoms: &AtomAlphabet, bonds: &BondAlphabet) {
    for i in 0..graph.num_nodes() {
        let symbol = atoms.symbol(graph.node_type(i));
        let total: f64 = graph
            .neighbors(i)
            .map(|(_, cat)| bonds.kind(cat).order())
            .sum();
        // Aromatic orders are fractional; allow half a unit of slack.
        if total > max_valence(symbol) + 0.5 {
            log::warn!("atom {i} ({symbol}) has bond-order sum {total}, above its usual valence");
        }
    }
}
