//! Categorical molecular graphs, fixed-size batching, and reconstruction
//! metrics.
//!
//! Edges are stored densely: every unordered atom pair has a bond category,
//! with category 0 meaning "no bond". In a batch the pairs `i < j` of a
//! `v_max`-slot graph are laid out row-major as `v_max (v_max - 1) / 2`
//! edge slots.

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("graph has {nodes} atoms but the batch holds at most {v_max}")]
    GraphTooLarge { nodes: usize, v_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("category {index} outside 0..{limit}")]
    CategoryOutOfRange { index: usize, limit: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MolecularGraph {
    node_types: Vec<usize>,
    bonds: Vec<usize>,
}

impl MolecularGraph {
    /// `bond_matrix` is `n x n` row-major, symmetric with a zero diagonal.
    pub fn new(node_types: Vec<usize>, bond_matrix: Vec<usize>) -> Result<Self, GraphError> {
        let n = node_types.len();
        if n == 0 {
            return Err(GraphError::Invalid("graph has no atoms".into()));
        }
        if bond_matrix.len() != n * n {
            return Err(GraphError::ShapeMismatch(format!(
                "bond matrix has {} entries, expected {}",
                bond_matrix.len(),
                n * n
            )));
        }
        for i in 0..n {
            if bond_matrix[i * n + i] != 0 {
                return Err(GraphError::Invalid(format!("atom {i} is bonded to itself")));
            }
            for j in i + 1..n {
                if bond_matrix[i * n + j] != bond_matrix[j * n + i] {
                    return Err(GraphError::Invalid(format!(
                        "bond ({i},{j}) is not symmetric"
                    )));
                }
            }
        }
        Ok(Self {
            node_types,
            bonds: bond_matrix,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.len()
    }

    pub fn node_types(&self) -> &[usize] {
        &self.node_types
    }

    pub fn node_type(&self, i: usize) -> usize {
        self.node_types[i]
    }

    pub fn bond_matrix(&self) -> &[usize] {
        &self.bonds
    }

    pub fn bond(&self, i: usize, j: usize) -> usize {
        self.bonds[i * self.num_nodes() + j]
    }

    /// Bonded neighbors of `i` in index order, with their bond category.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.num_nodes();
        self.bonds[i * n..(i + 1) * n]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(j, &c)| (j, c))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Bonds `(i, j, category)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.num_nodes();
        (0..n).flat_map(move |i| {
            (i + 1..n).filter_map(move |j| {
                let c = self.bond(i, j);
                (c != 0).then_some((i, j, c))
            })
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges().count()
    }

    pub fn max_bond_category(&self) -> usize {
        self.bonds.iter().copied().max().unwrap_or(0)
    }

    pub fn check_categories(&self, k: usize, l: usize) -> Result<(), GraphError> {
        if let Some(&t) = self.node_types.iter().find(|&&t| t >= k) {
            return Err(GraphError::CategoryOutOfRange { index: t, limit: k });
        }
        let b = self.max_bond_category();
        if b >= l {
            return Err(GraphError::CategoryOutOfRange { index: b, limit: l });
        }
        Ok(())
    }

    /// Labelled-graph isomorphism by backtracking over atom bijections,
    /// pruned by atom type, degree and bond profile.
    pub fn is_isomorphic(&self, other: &MolecularGraph) -> bool {
        let n = self.num_nodes();
        if n != other.num_nodes() {
            return false;
        }
        let profile = |g: &MolecularGraph, i: usize| {
            let mut p: Vec<usize> = g.neighbors(i).map(|(_, c)| c).collect();
            p.sort_unstable();
            (g.node_type(i), p)
        };
        let mine: Vec<_> = (0..n).map(|i| profile(self, i)).collect();
        let theirs: Vec<_> = (0..n).map(|i| profile(other, i)).collect();
        let mut a = mine.clone();
        let mut b = theirs.clone();
        a.sort();
        b.sort();
        if a != b {
            return false;
        }
        let mut mapping = vec![usize::MAX; n];
        let mut used = vec![false; n];
        self.extend_mapping(other, &mine, &theirs, 0, &mut mapping, &mut used)
    }

    fn extend_mapping(
        &self,
        other: &MolecularGraph,
        mine: &[(usize, Vec<usize>)],
        theirs: &[(usize, Vec<usize>)],
        i: usize,
        mapping: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if i == mapping.len() {
            return true;
        }
        for cand in 0..mapping.len() {
            if used[cand] || mine[i] != theirs[cand] {
                continue;
            }
            if (0..i).any(|j| self.bond(i, j) != other.bond(cand, mapping[j])) {
                continue;
            }
            mapping[i] = cand;
            used[cand] = true;
            if self.extend_mapping(other, mine, theirs, i + 1, mapping, used) {
                return true;
            }
            used[cand] = false;
        }
        mapping[i] = usize::MAX;
        false
    }
}

/// Number of upper-triangular pair slots for `v_max` nodes.
pub fn edge_slot_count(v_max: usize) -> usize {
    v_max * v_max.saturating_sub(1) / 2
}

/// Slot of pair `(i, j)`, `i < j < v_max`.
pub fn edge_slot(v_max: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < v_max);
    i * (2 * v_max - i - 1) / 2 + (j - i - 1)
}

/// One-hot padded encoding of a list of graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    v_max: usize,
    k: usize,
    l: usize,
    node_onehot: Vec<f64>,
    edge_onehot: Vec<f64>,
    node_mask: Vec<bool>,
    edge_mask: Vec<bool>,
    graphs: Vec<MolecularGraph>,
}

impl GraphBatch {
    /// Encodes `graphs` into `v_max` node slots with `k` atom and `l` bond
    /// categories.
    pub fn new(
        graphs: &[MolecularGraph],
        v_max: usize,
        k: usize,
        l: usize,
    ) -> Result<Self, GraphError> {
        let e_max = edge_slot_count(v_max);
        let b = graphs.len();
        let mut node_onehot = vec![0.0; b * v_max * k];
        let mut edge_onehot = vec![0.0; b * e_max * l];
        let mut node_mask = vec![false; b * v_max];
        let mut edge_mask = vec![false; b * e_max];
        for (gi, g) in graphs.iter().enumerate() {
            let n = g.num_nodes();
            if n > v_max {
                return Err(GraphError::GraphTooLarge { nodes: n, v_max });
            }
            g.check_categories(k, l)?;
            for i in 0..n {
                node_mask[gi * v_max + i] = true;
                node_onehot[(gi * v_max + i) * k + g.node_type(i)] = 1.0;
                for j in i + 1..n {
                    let s = gi * e_max + edge_slot(v_max, i, j);
                    edge_mask[s] = true;
                    edge_onehot[s * l + g.bond(i, j)] = 1.0;
                }
            }
        }
        Ok(Self {
            v_max,
            k,
            l,
            node_onehot,
            edge_onehot,
            node_mask,
            edge_mask,
            graphs: graphs.to_vec(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.graphs.len()
    }

    pub fn v_max(&self) -> usize {
        self.v_max
    }

    pub fn e_max(&self) -> usize {
        edge_slot_count(self.v_max)
    }

    pub fn num_atom_types(&self) -> usize {
        self.k
    }

    pub fn num_bond_types(&self) -> usize {
        self.l
    }

    /// `B x v_max x K`, row-major.
    pub fn node_onehot(&self) -> &[f64] {
        &self.node_onehot
    }

    /// `B x e_max x L`, row-major.
    pub fn edge_onehot(&self) -> &[f64] {
        &self.edge_onehot
    }

    pub fn node_mask(&self) -> &[bool] {
        &self.node_mask
    }

    pub fn edge_mask(&self) -> &[bool] {
        &self.edge_mask
    }

    pub fn node_mask_of(&self, b: usize) -> &[bool] {
        &self.node_mask[b * self.v_max..(b + 1) * self.v_max]
    }

    pub fn graphs(&self) -> &[MolecularGraph] {
        &self.graphs
    }

    pub fn graph(&self, b: usize) -> &MolecularGraph {
        &self.graphs[b]
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.graphs.iter().map(MolecularGraph::num_nodes).collect()
    }

    /// Index of the hot entry in each unmasked node row of graph `b`.
    pub fn node_categories(&self, b: usize) -> Vec<Option<usize>> {
        (0..self.v_max)
            .map(|i| {
                let row = b * self.v_max + i;
                self.node_mask[row]
                    .then(|| argmax(&self.node_onehot[row * self.k..(row + 1) * self.k]))
            })
            .collect()
    }

    pub fn edge_categories(&self, b: usize) -> Vec<Option<usize>> {
        let e_max = self.e_max();
        (0..e_max)
            .map(|s| {
                let row = b * e_max + s;
                self.edge_mask[row]
                    .then(|| argmax(&self.edge_onehot[row * self.l..(row + 1) * self.l]))
            })
            .collect()
    }
}

/// Convenience wrapper over [`GraphBatch::new`].
pub fn to_batch(
    graphs: &[MolecularGraph],
    v_max: usize,
    k: usize,
    l: usize,
) -> Result<GraphBatch, GraphError> {
    GraphBatch::new(graphs, v_max, k, l)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rebuilds a graph from per-slot category indices, dropping masked nodes
/// (and every edge slot touching one).
pub fn from_categorical(
    node_categories: &[usize],
    edge_categories: &[usize],
    node_mask: &[bool],
) -> Result<MolecularGraph, GraphError> {
    let v_max = node_categories.len();
    if node_mask.len() != v_max || edge_categories.len() != edge_slot_count(v_max) {
        return Err(GraphError::ShapeMismatch(format!(
            "{} node slots, {} mask entries, {} edge slots",
            v_max,
            node_mask.len(),
            edge_categories.len()
        )));
    }
    let kept: Vec<usize> = (0..v_max).filter(|&i| node_mask[i]).collect();
    let n = kept.len();
    let node_types = kept.iter().map(|&i| node_categories[i]).collect();
    let mut bonds = vec![0; n * n];
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate().skip(a + 1) {
            let c = edge_categories[edge_slot(v_max, i, j)];
            bonds[a * n + b] = c;
            bonds[b * n + a] = c;
        }
    }
    MolecularGraph::new(node_types, bonds)
}

/// Unnormalized decoder scores for a batch: `B x v_max x K` node logits
/// and `B x e_max x L` edge logits.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLogits {
    pub batch: usize,
    pub v_max: usize,
    pub k: usize,
    pub l: usize,
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
}

impl BatchLogits {
    pub fn zeros(batch: usize, v_max: usize, k: usize, l: usize) -> Self {
        Self {
            batch,
            v_max,
            k,
            l,
            node: vec![0.0; batch * v_max * k],
            edge: vec![0.0; batch * edge_slot_count(v_max) * l],
        }
    }

    pub fn e_max(&self) -> usize {
        edge_slot_count(self.v_max)
    }

    pub fn node_row(&self, b: usize, i: usize) -> &[f64] {
        let r = b * self.v_max + i;
        &self.node[r * self.k..(r + 1) * self.k]
    }

    pub fn node_row_mut(&mut self, b: usize, i: usize) -> &mut [f64] {
        let r = b * self.v_max + i;
        &mut self.node[r * self.k..(r + 1) * self.k]
    }

    pub fn edge_row(&self, b: usize, s: usize) -> &[f64] {
        let r = b * self.e_max() + s;
        &self.edge[r * self.l..(r + 1) * self.l]
    }

    pub fn edge_row_mut(&mut self, b: usize, s: usize) -> &mut [f64] {
        let r = b * self.e_max() + s;
        let l = self.l;
        &mut self.edge[r * l..(r + 1) * l]
    }

    /// Builds logits that put a large margin on the batch's true categories.
    pub fn from_truth(truth: &GraphBatch, margin: f64) -> Self {
        Self {
            batch: truth.batch_size(),
            v_max: truth.v_max(),
            k: truth.num_atom_types(),
            l: truth.num_bond_types(),
            node: truth.node_onehot().iter().map(|x| x * margin).collect(),
            edge: truth.edge_onehot().iter().map(|x| x * margin).collect(),
        }
    }

    pub fn check_shape(&self, truth: &GraphBatch) -> Result<(), GraphError> {
        if self.batch != truth.batch_size()
            || self.v_max != truth.v_max()
            || self.k != truth.num_atom_types()
            || self.l != truth.num_bond_types()
        {
            return Err(GraphError::ShapeMismatch(format!(
                "logits B={} V={} K={} L={} vs truth B={} V={} K={} L={}",
                self.batch,
                self.v_max,
                self.k,
                self.l,
                truth.batch_size(),
                truth.v_max(),
                truth.num_atom_types(),
                truth.num_bond_types()
            )));
        }
        Ok(())
    }
}

/// Fraction of unmasked node and edge slots whose argmax matches the truth.
/// An empty denominator counts as perfect accuracy.
pub fn reconstruction_accuracy(
    predicted: &BatchLogits,
    truth: &GraphBatch,
) -> Result<(f64, f64), GraphError> {
    predicted.check_shape(truth)?;
    let (mut node_hit, mut node_total) = (0usize, 0usize);
    let (mut edge_hit, mut edge_total) = (0usize, 0usize);
    for b in 0..truth.batch_size() {
        for (i, cat) in truth.node_categories(b).into_iter().enumerate() {
            if let Some(c) = cat {
                node_total += 1;
                node_hit += usize::from(argmax(predicted.node_row(b, i)) == c);
            }
        }
        for (s, cat) in truth.edge_categories(b).into_iter().enumerate() {
            if let Some(c) = cat {
                edge_total += 1;
                edge_hit += usize::from(argmax(predicted.edge_row(b, s)) == c);
            }
        }
    }
    let frac = |hit: usize, total: usize| {
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    };
    Ok((frac(node_hit, node_total), frac(edge_hit, edge_total)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::{parse, AtomAlphabet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 16;
    const L: usize = 5;

    #[test]
    fn single_carbon_padding() {
        let g = parse("C").unwrap();
        let b = to_batch(&[g], 2, K, L).unwrap();
        let c = AtomAlphabet::default().index_of("C").unwrap();
        let row0 = &b.node_onehot()[0..K];
        assert_eq!(row0.iter().sum::<f64>(), 1.0);
        assert_eq!(row0[c], 1.0);
        assert!(b.node_onehot()[K..2 * K].iter().all(|&x| x == 0.0));
        assert_eq!(b.edge_mask(), &[false]);
        assert!(b.edge_onehot().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ethanol_edge_slots() {
        let g = parse("CCO").unwrap();
        let b = to_batch(&[g], 3, K, L).unwrap();
        assert_eq!(b.e_max(), 3);
        assert_eq!(b.node_mask(), &[true, true, true]);
        let edges = b.edge_categories(0);
        assert_eq!(edge_slot(3, 0, 1), 0);
        assert_eq!(edge_slot(3, 0, 2), 1);
        assert_eq!(edge_slot(3, 1, 2), 2);
        assert_eq!(edges, vec![Some(1), Some(0), Some(1)]);
    }

    #[test]
    fn mixed_sizes_masks() {
        let gs = [parse("C").unwrap(), parse("CCO").unwrap()];
        let b = to_batch(&gs, 3, K, L).unwrap();
        assert_eq!(b.node_mask(), &[true, false, false, true, true, true]);
        assert_eq!(b.edge_mask(), &[false, false, false, true, true, true]);
    }

    #[test]
    fn too_large() {
        let g = parse("CCCC").unwrap();
        assert_eq!(
            to_batch(&[g], 3, K, L),
            Err(GraphError::GraphTooLarge { nodes: 4, v_max: 3 })
        );
    }

    #[test]
    fn isolated_atom_from_all_none_edges() {
        let g = from_categorical(&[0, 3], &[0], &[true, false]).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn encode_decode_identity_on_fixture() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/corpus100.csv"
        ))
        .unwrap();
        for line in text.lines().skip(1) {
            let smiles = line.split(',').next().unwrap();
            let g = parse(smiles).unwrap();
            let b = to_batch(std::slice::from_ref(&g), 32, K, L).unwrap();
            let nodes: Vec<usize> = b
                .node_categories(0)
                .into_iter()
                .map(|c| c.unwrap_or(0))
                .collect();
            let edges: Vec<usize> = b
                .edge_categories(0)
                .into_iter()
                .map(|c| c.unwrap_or(0))
                .collect();
            let back = from_categorical(&nodes, &edges, b.node_mask_of(0)).unwrap();
            assert_eq!(back, g, "{smiles}");
            let unmasked = b.edge_mask().iter().filter(|&&m| m).count();
            assert_eq!(unmasked, g.num_nodes() * (g.num_nodes() - 1) / 2);
        }
    }

    #[test]
    fn random_categorical_draws_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v_max = rng.random_range(1..8);
            let nodes: Vec<usize> = (0..v_max).map(|_| rng.random_range(0..K)).collect();
            let edges: Vec<usize> = (0..edge_slot_count(v_max))
                .map(|_| rng.random_range(0..L))
                .collect();
            let mut mask: Vec<bool> = (0..v_max).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let g = from_categorical(&nodes, &edges, &mask).unwrap();
            let n = g.num_nodes();
            for i in 0..n {
                assert_eq!(g.bond(i, i), 0);
                for j in 0..n {
                    assert_eq!(g.bond(i, j), g.bond(j, i));
                }
            }
        }
    }

    #[test]
    fn accuracy_perfect_and_vacuous() {
        let gs = [parse("CC(=O)O").unwrap(), parse("c1ccccc1").unwrap()];
        let b = to_batch(&gs, 8, K, L).unwrap();
        let logits = BatchLogits::from_truth(&b, 1e6);
        assert_eq!(reconstruction_accuracy(&logits, &b).unwrap(), (1.0, 1.0));
        let empty = to_batch(&[], 4, K, L).unwrap();
        let logits = BatchLogits::zeros(0, 4, K, L);
        assert_eq!(
            reconstruction_accuracy(&logits, &empty).unwrap(),
            (1.0, 1.0)
        );
        let wrong = BatchLogits::zeros(2, 4, K, L);
        assert!(matches!(
            reconstruction_accuracy(&wrong, &b),
            Err(GraphError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn uniform_logits_hit_one_in_k() {
        // Uniform logits always predict category 0, so over random truths the
        // hit rate converges to 1/K.
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let graphs: Vec<MolecularGraph> = (0..1000)
            .map(|_| {
                let types = (0..10).map(|_| rng.random_range(0..k)).collect();
                MolecularGraph::new(types, vec![0; 100]).unwrap()
            })
            .collect();
        let b = to_batch(&graphs, 10, k, 2).unwrap();
        let logits = BatchLogits::zeros(1000, 10, k, 2);
        let (node_acc, _) = reconstruction_accuracy(&logits, &b).unwrap();
        assert!((node_acc - 0.25).abs() <= 0.02, "{node_acc}");
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        assert!(MolecularGraph::new(vec![0, 0], vec![0, 1, 0, 0]).is_err());
        assert!(MolecularGraph::new(vec![0, 0], vec![1, 0, 0, 0]).is_err());
        assert!(MolecularGraph::new(vec![], vec![]).is_err());
    }

    #[test]
    fn isomorphism_detects_relabeling() {
        let a = parse("OCC").unwrap();
        let b = parse("CCO").unwrap();
        let c = parse("COC").unwrap();
        assert!(a.is_isomorphic(&b));
        assert!(!a.is_isomorphic(&c));
    }

    proptest! {
        #[test]
        fn to_batch_onehot_rows_are_valid(sizes in proptest::collection::vec(1usize..7, 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let graphs: Vec<MolecularGraph> = sizes.iter().map(|&n| {
                let types = (0..n).map(|_| rng.random_range(0..K)).collect();
                let mut m = vec![0; n * n];
                for i in 0..n { for j in i + 1..n {
                    let c = rng.random_range(0..L);
                    m[i * n + j] = c; m[j * n + i] = c;
                }}
                MolecularGraph::new(types, m).unwrap()
            }).collect();
            let b = to_batch(&graphs, 6, K, L).unwrap();
            for (r, &m) in b.node_mask().iter().enumerate() {
                let s: f64 = b.node_onehot()[r * K..(r + 1) * K].iter().sum();
                prop_assert_eq!(s, if m { 1.0 } else { 0.0 });
            }
            for (r, &m) in b.edge_mask().iter().enumerate() {
                let s: f64 = b.edge_onehot()[r * L..(r + 1) * L].iter().sum();
                prop_assert_eq!(s, if m { 1.0 } else { 0.0 });
            }
            for gi in 0..graphs.len() {
                let nodes: Vec<usize> = b.node_categories(gi).into_iter().map(|c| c.unwrap_or(0)).collect();
                let edges: Vec<usize> = b.edge_categories(gi).into_iter().map(|c| c.unwrap_or(0)).collect();
                prop_assert_eq!(&from_categorical(&nodes, &edges, b.node_mask_of(gi)).unwrap(), &graphs[gi]);
            }
        }
    }
}
