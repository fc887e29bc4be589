use std::collections::BTreeSet;

use moldiff::smiles::{BondKind, SmilesCodec};

fn codec() -> SmilesCodec {
    SmilesCodec::default()
}

fn kind_name(k: BondKind) -> &'static str {
    match k {
        BondKind::None => "none",
        BondKind::Single => "single",
        BondKind::Double => "double",
        BondKind::Triple => "triple",
        BondKind::Aromatic => "aromatic",
    }
}

struct Expected {
    smiles: String,
    atoms: Vec<String>,
    bonds: BTreeSet<(usize, usize, String)>,
}

fn reference() -> Vec<Expected> {
    include_str!("data/rdkit_graphs.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split('|');
            let smiles = parts.next().unwrap().to_string();
            let atoms = parts
                .next()
                .unwrap()
                .split_whitespace()
                .map(str::to_string)
                .collect();
            let bonds = parts
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(|b| {
                    let (pair, kind) = b.split_once(':').unwrap();
                    let (i, j) = pair.split_once('-').unwrap();
                    let (i, j): (usize, usize) = (i.parse().unwrap(), j.parse().unwrap());
                    (i.min(j), i.max(j), kind.to_string())
                })
                .collect();
            Expected {
                smiles,
                atoms,
                bonds,
            }
        })
        .collect()
}

#[test]
fn graphs_match_reference_toolkit() {
    let codec = codec();
    let cases = reference();
    assert_eq!(cases.len(), 100);
    for case in cases {
        let g = codec
            .parse(&case.smiles)
            .unwrap_or_else(|e| panic!("{}: {e}", case.smiles));
        let atoms: Vec<String> = g
            .node_types()
            .iter()
            .map(|&t| codec.atoms.symbol(t).to_string())
            .collect();
        assert_eq!(atoms, case.atoms, "{}", case.smiles);
        let bonds: BTreeSet<_> = g
            .edges()
            .map(|(i, j, c)| (i, j, kind_name(codec.bonds.kind(c)).to_string()))
            .collect();
        assert_eq!(bonds, case.bonds, "{}", case.smiles);
    }
}

#[test]
fn corpus_round_trips() {
    let codec = codec();
    let text = include_str!("../../../fixtures/corpus100.csv");
    let mut count = 0;
    for line in text.lines().skip(1) {
        let smiles = line.split(',').next().unwrap();
        let g = codec.parse(smiles).unwrap();
        let written = codec.write(&g).unwrap();
        let again = codec.parse(&written).unwrap();
        assert!(g.is_isomorphic(&again), "{smiles} -> {written}");
        count += 1;
    }
    assert_eq!(count, 100);
}

#[test]
fn malformed_inputs_are_rejected() {
    let codec = codec();
    for bad in [
        "",
        "C1CC",
        "C(C",
        "CC)",
        "C%",
        "[C",
        "Xx",
        "C==C",
        "C[C@H](N)O",
        "C1CC1.1",
    ] {
        assert!(codec.parse(bad).is_err(), "{bad:?} should fail");
    }
}
