use std::collections::BTreeSet;

use super::alphabet::{AtomAlphabet, BondAlphabet, BondKind};
use super::SmilesError;
use crate::molgraph::MolecularGraph;

const MAX_RING_LABEL: u8 = 99;

/// DFS layout: tree children and ring-closure partners per node.
struct Layout {
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    rings: Vec<Vec<usize>>,
}

fn layout(graph: &MolecularGraph) -> Layout {
    let n = graph.num_nodes();
    let mut visited = vec![false; n];
    let mut children = vec![Vec::new(); n];
    let mut rings = vec![Vec::new(); n];
    let mut ring_pairs = BTreeSet::new();
    let mut order = Vec::with_capacity(n);

    for root in 0..n {
        if visited[root] {
            continue;
        }
        order.push(root);
        // (node, parent, next neighbor cursor)
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        visited[root] = true;
        while let Some(top) = stack.last_mut() {
            let (u, parent) = (top.0, top.1);
            let next = (top.2..n).find(|&v| v != u && graph.bond(u, v) != 0);
            let Some(v) = next else {
                stack.pop();
                continue;
            };
            top.2 = v + 1;
            if Some(v) == parent {
                continue;
            }
            if visited[v] {
                let key = (u.min(v), u.max(v));
                let is_tree = children[u].contains(&v) || children[v].contains(&u);
                if !is_tree && ring_pairs.insert(key) {
                    rings[u].push(v);
                    rings[v].push(u);
                }
            } else {
                visited[v] = true;
                children[u].push(v);
                stack.push((v, Some(u), 0));
            }
        }
    }
    Layout {
        order,
        children,
        rings,
    }
}

fn bond_text(kind: BondKind, both_aromatic: bool) -> Result<&'static str, SmilesError> {
    Ok(match kind {
        BondKind::Single if both_aromatic => "-",
        BondKind::Single => "",
        BondKind::Double => "=",
        BondKind::Triple => "#",
        BondKind::Aromatic if both_aromatic => "",
        BondKind::Aromatic => ":",
        BondKind::None => {
            return Err(SmilesError::UnserializableGraph(
                "edge with bond kind `none`".into(),
            ))
        }
    })
}

fn ring_label_text(label: u8) -> String {
    if label < 10 {
        label.to_string()
    } else {
        format!("%{label:02}")
    }
}

struct Emitter<'a> {
    graph: &'a MolecularGraph,
    atoms: &'a AtomAlphabet,
    bonds: &'a BondAlphabet,
    layout: Layout,
    out: String,
    emitted: Vec<bool>,
    /// Open ring labels: label -> (opening atom, closing atom).
    open: Vec<Option<(usize, usize)>>,
}

impl Emitter<'_> {
    fn both_aromatic(&self, a: usize, b: usize) -> bool {
        self.atoms.is_aromatic(self.graph.node_type(a))
            && self.atoms.is_aromatic(self.graph.node_type(b))
    }

    fn bond_between(&self, a: usize, b: usize) -> Result<&'static str, SmilesError> {
        bond_text(
            self.bonds.kind(self.graph.bond(a, b)),
            self.both_aromatic(a, b),
        )
    }

    fn emit(&mut self, u: usize) -> Result<(), SmilesError> {
        self.out
            .push_str(self.atoms.symbol(self.graph.node_type(u)));
        self.emitted[u] = true;

        let partners = self.layout.rings[u].clone();
        // Close rings whose other end is already written, in label order.
        let mut closing: Vec<(u8, usize)> = self
            .open
            .iter()
            .enumerate()
            .filter_map(|(label, slot)| match slot {
                Some((from, to)) if *to == u => Some((label as u8, *from)),
                _ => None,
            })
            .collect();
        closing.sort_unstable();
        for (label, _) in closing {
            self.out.push_str(&ring_label_text(label));
            self.open[label as usize] = None;
        }
        for v in partners {
            if self.emitted[v] {
                continue;
            }
            let label = (1..=MAX_RING_LABEL)
                .find(|&l| self.open[l as usize].is_none())
                .ok_or_else(|| {
                    SmilesError::UnserializableGraph(format!(
                        "more than {MAX_RING_LABEL} simultaneously open ring closures"
                    ))
                })?;
            self.out.push_str(self.bond_between(u, v)?);
            self.out.push_str(&ring_label_text(label));
            self.open[label as usize] = Some((u, v));
        }

        let children = self.layout.children[u].clone();
        let last = children.len().saturating_sub(1);
        for (k, v) in children.into_iter().enumerate() {
            let branch = k < last;
            if branch {
                self.out.push('(');
            }
            self.out.push_str(self.bond_between(u, v)?);
            self.emit(v)?;
            if branch {
                self.out.push(')');
            }
        }
        Ok(())
    }
}

/// Serializes a graph by depth-first traversal from the lowest-index atom,
/// visiting neighbors in index order. Disconnected components are joined
/// with `.`.
pub fn write_with(
    graph: &MolecularGraph,
    atoms: &AtomAlphabet,
    bonds: &BondAlphabet,
) -> Result<String, SmilesError> {
    let n = graph.num_nodes();
    if let Some(bad) = (0..n).find(|&i| graph.node_type(i) >= atoms.len()) {
        return Err(SmilesError::UnserializableGraph(format!(
            "atom {bad} has category {} outside the alphabet",
            graph.node_type(bad)
        )));
    }
    if graph.max_bond_category() >= bonds.len() {
        return Err(SmilesError::UnserializableGraph(
            "bond category outside the alphabet".into(),
        ));
    }
    let layout = layout(graph);
    let roots = layout.order.clone();
    let mut e = Emitter {
        graph,
        atoms,
        bonds,
        layout,
        out: String::new(),
        emitted: vec![false; n],
        open: vec![None; MAX_RING_LABEL as usize + 1],
    };
    for (k, root) in roots.into_iter().enumerate() {
        if k > 0 {
            e.out.push('.');
        }
        e.emit(root)?;
    }
    Ok(e.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::{parse, write_smiles};

    #[test]
    fn single_carbon() {
        let g = MolecularGraph::new(vec![0], vec![0]).unwrap();
        assert_eq!(write_smiles(&g).unwrap(), "C");
    }

    #[test]
    fn canonical_spellings() {
        for (input, expected) in [
            ("CCO", "CCO"),
            ("c1ccccc1", "c1ccccc1"),
            ("C1CC1C", "C1CC1C"),
            ("CC(=O)O", "CC(=O)O"),
            ("c1ccccc1-c1ccccc1", "c1ccccc1-c1ccccc1"),
            ("CC.O", "CC.O"),
            ("C:C", "C:C"),
            ("C#N", "C#N"),
        ] {
            let g = parse(input).unwrap();
            let written = write_smiles(&g).unwrap();
            let again = parse(&written).unwrap();
            assert!(g.is_isomorphic(&again), "{input} -> {written}");
            assert_eq!(written, expected, "{input}");
        }
    }

    #[test]
    fn ring_bond_order_survives() {
        let g = parse("C1=CCCC=C1").unwrap();
        let s = write_smiles(&g).unwrap();
        assert!(g.is_isomorphic(&parse(&s).unwrap()), "{s}");
    }

    #[test]
    fn bond_outside_alphabet_is_unserializable() {
        let g = MolecularGraph::new(vec![0, 0], vec![0, 7, 7, 0]).unwrap();
        assert!(matches!(
            write_smiles(&g),
            Err(SmilesError::UnserializableGraph(_))
        ));
    }
}
