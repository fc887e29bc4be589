//! Graph decoder: z₁ → categorical distributions over node and edge slots.
//!
//! z₁ is projected once and broadcast to one token per node slot, each
//! token offset by a learned slot embedding. The number of slots that take
//! part is supplied by the caller (the true atom count during training, a
//! draw from the size histogram when sampling). Slots beyond that count
//! receive all-zero logits and are masked out of the likelihood.
//!
//! Edge logits for slot pair (i, j) come from `h_i + h_j`, so the pair
//! order cannot matter.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::molgraph::{
    argmax, edge_slot, from_categorical, BatchLogits, GraphBatch, GraphError, MolecularGraph,
};
use crate::nn::{ensure_finite, LayerNorm, Linear, TransformerBlock, TransformerConfig};
use crate::par::{self, Execution};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub type DecoderConfig = TransformerConfig;

#[derive(Clone, Debug)]
pub struct Decoder {
    max_nodes: usize,
    num_atom_types: usize,
    num_bond_types: usize,
    latent_in: Linear,
    slot_embed: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    node_head: Linear,
    edge_hidden: Linear,
    edge_head: Linear,
}

/// Logits for the first `n` slots of one graph: `n x K` node rows and
/// `n(n−1)/2 x L` edge rows in upper-triangular pair order.
pub struct GraphLogits {
    pub nodes: Var,
    pub edges: Var,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        latent_dim: usize,
        num_atom_types: usize,
        num_bond_types: usize,
        max_nodes: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Decoder;
        let dm = cfg.d_model;
        Self {
            max_nodes,
            num_atom_types,
            num_bond_types,
            latent_in: Linear::new(store, "decoder.latent_in", g, latent_dim, dm, rng),
            slot_embed: store.add_embedding("decoder.slot_embed", g, max_nodes, dm, rng),
            blocks: (0..cfg.n_layers)
                .map(|i| TransformerBlock::new(store, &format!("decoder.block{i}"), g, cfg, rng))
                .collect(),
            final_norm: LayerNorm::new(store, "decoder.final_norm", g, dm),
            node_head: Linear::new(store, "decoder.node_head", g, dm, num_atom_types, rng),
            edge_hidden: Linear::new(store, "decoder.edge_hidden", g, dm, dm, rng),
            edge_head: Linear::new(store, "decoder.edge_head", g, dm, num_bond_types, rng),
        }
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn node_head(&self) -> &Linear {
        &self.node_head
    }

    pub fn edge_head(&self) -> &Linear {
        &self.edge_head
    }

    /// Logits for one latent row `z1` (`1 x d`) over `n` node slots.
    pub fn forward(&self, tape: &mut Tape<'_>, z1: Var, n: usize) -> Result<GraphLogits> {
        if n == 0 || n > self.max_nodes {
            return Err(GraphError::GraphTooLarge {
                nodes: n,
                v_max: self.max_nodes,
            }
            .into());
        }
        let base = self.latent_in.forward(tape, z1);
        let base = tape.broadcast_rows(base, n);
        let table = tape.param(self.slot_embed);
        let slots: Vec<usize> = (0..n).collect();
        let slots = tape.gather_rows(table, &slots);
        let mut x = tape.add(base, slots);
        let mut no_dropout = None;
        for block in &self.blocks {
            x = block.forward(tape, x, &mut |_, _| None, &mut no_dropout);
        }
        let h = self.final_norm.forward(tape, x);
        let nodes = self.node_head.forward(tape, h);
        let edges = if n > 1 {
            let pairs = tape.pair_sum(h);
            let pairs = self.edge_hidden.forward(tape, pairs);
            let pairs = tape.silu(pairs);
            self.edge_head.forward(tape, pairs)
        } else {
            tape.constant(Tensor::zeros(0, self.num_bond_types))
        };
        Ok(GraphLogits { nodes, edges })
    }

    /// Padded logits for a batch: row `b` decodes `node_counts[b]` slots.
    pub fn decode_logits(
        &self,
        store: &ParamStore,
        z1: &Tensor,
        node_counts: &[usize],
        exec: Execution,
    ) -> Result<BatchLogits> {
        if z1.rows() != node_counts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} latent rows but {} node counts",
                z1.rows(),
                node_counts.len()
            )));
        }
        let parts = par::try_map_range(exec, z1.rows(), |b| {
            let mut tape = Tape::new(store);
            let z = tape.constant(z1.row_tensor(b));
            let out = self.forward(&mut tape, z, node_counts[b])?;
            Ok::<_, Error>((tape.value(out.nodes).clone(), tape.value(out.edges).clone()))
        })?;
        let (k, l, v) = (self.num_atom_types, self.num_bond_types, self.max_nodes);
        let mut logits = BatchLogits::zeros(z1.rows(), v, k, l);
        for (b, (nodes, edges)) in parts.iter().enumerate() {
            ensure_finite(nodes, "decoder")?;
            ensure_finite(edges, "decoder")?;
            let n = node_counts[b];
            for i in 0..n {
                logits.node_row_mut(b, i).copy_from_slice(nodes.row(i));
            }
            let mut p = 0;
            for i in 0..n {
                for j in i + 1..n {
                    logits
                        .edge_row_mut(b, edge_slot(v, i, j))
                        .copy_from_slice(edges.row(p));
                    p += 1;
                }
            }
        }
        Ok(logits)
    }

    /// Mode of every categorical, as graphs.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        z1: &Tensor,
        node_counts: &[usize],
        exec: Execution,
    ) -> Result<Vec<MolecularGraph>> {
        let logits = self.decode_logits(store, z1, node_counts, exec)?;
        (0..z1.rows())
            .map(|b| {
                let mask: Vec<bool> = (0..self.max_nodes).map(|i| i < node_counts[b]).collect();
                Ok(greedy_graph(&logits, b, &mask)?)
            })
            .collect()
    }
}

/// Log-probability of `graph` under logits from [`Decoder::forward`],
/// as a `1 x 1` node.
pub fn log_likelihood_on_tape(
    tape: &mut Tape<'_>,
    logits: &GraphLogits,
    graph: &MolecularGraph,
) -> Var {
    let n = graph.num_nodes();
    let node_lp = tape.log_softmax(logits.nodes);
    let picked = tape.pick_cols(node_lp, graph.node_types());
    let mut total = tape.sum_all(picked);
    if n > 1 {
        let cats: Vec<usize> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| graph.bond(i, j))
            .collect();
        let edge_lp = tape.log_softmax(logits.edges);
        let picked = tape.pick_cols(edge_lp, &cats);
        let s = tape.sum_all(picked);
        total = tape.add(total, s);
    }
    total
}

fn log_prob(row: &[f64], cat: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[cat] - lse
}

/// Per-graph log-probability of `truth`, summed over unmasked node and
/// edge slots.
pub fn log_likelihood(logits: &BatchLogits, truth: &GraphBatch) -> Result<Vec<f64>> {
    logits.check_shape(truth)?;
    Ok((0..truth.batch_size())
        .map(|b| {
            let nodes: f64 = truth
                .node_categories(b)
                .into_iter()
                .enumerate()
                .filter_map(|(i, c)| c.map(|c| log_prob(logits.node_row(b, i), c)))
                .sum();
            let edges: f64 = truth
                .edge_categories(b)
                .into_iter()
                .enumerate()
                .filter_map(|(s, c)| c.map(|c| log_prob(logits.edge_row(b, s), c)))
                .sum();
            nodes + edges
        })
        .collect())
}

/// Argmax readout of graph `b`, keeping the slots selected by `node_mask`.
pub fn greedy_graph(
    logits: &BatchLogits,
    b: usize,
    node_mask: &[bool],
) -> Result<MolecularGraph, GraphError> {
    let nodes: Vec<usize> = (0..logits.v_max)
        .map(|i| argmax(logits.node_row(b, i)))
        .collect();
    let edges: Vec<usize> = (0..logits.e_max())
        .map(|s| argmax(logits.edge_row(b, s)))
        .collect();
    from_categorical(&nodes, &edges, node_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, v_max: usize, k: usize, l: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DecoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            ff_width: 8,
            dropout: 0.0,
        };
        let dec = Decoder::new(&mut store, &cfg, 3, k, l, v_max, &mut rng);
        (store, dec)
    }

    #[test]
    fn uniform_logits_likelihood() {
        let g = parse("CCO").unwrap();
        let k = 16;
        let truth = GraphBatch::new(&[g], 5, k, 5).unwrap();
        let logits = BatchLogits::zeros(1, 5, k, 5);
        let ll = log_likelihood(&logits, &truth).unwrap();
        let expect = 3.0 * (1.0 / k as f64).ln() + 3.0 * (0.2f64).ln();
        assert!((ll[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let gs = vec![parse("C=CO").unwrap(), parse("c1ccccc1").unwrap()];
        let truth = GraphBatch::new(&gs, 8, 16, 5).unwrap();
        let ll = log_likelihood(&BatchLogits::from_truth(&truth, 50.0), &truth).unwrap();
        assert!(ll.iter().all(|&v| v <= 0.0 && v > -1e-15 * 100.0));
    }

    #[test]
    fn masked_slots_do_not_matter() {
        let truth = GraphBatch::new(&[parse("CO").unwrap()], 4, 16, 5).unwrap();
        let mut logits = BatchLogits::from_truth(&truth, 1.0);
        let before = log_likelihood(&logits, &truth).unwrap();
        logits.node_row_mut(0, 3)[2] = 123.0;
        logits.edge_row_mut(0, edge_slot(4, 1, 3))[0] = -77.0;
        assert_eq!(before, log_likelihood(&logits, &truth).unwrap());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let truth = GraphBatch::new(&[parse("CO").unwrap()], 4, 16, 5).unwrap();
        assert!(log_likelihood(&BatchLogits::zeros(1, 3, 16, 5), &truth).is_err());
    }

    #[test]
    fn uniform_logits_decode_to_category_zero() {
        let logits = BatchLogits::zeros(1, 3, 16, 5);
        let g = greedy_graph(&logits, 0, &[true, true, false]).unwrap();
        assert_eq!(g.node_types(), &[0, 0]);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn truth_logits_decode_to_truth() {
        let g = parse("OCC(O)CO").unwrap();
        let truth = GraphBatch::new(std::slice::from_ref(&g), 8, 16, 5).unwrap();
        let out = greedy_graph(
            &BatchLogits::from_truth(&truth, 3.0),
            0,
            truth.node_mask_of(0),
        )
        .unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn identical_latents_identical_rows_and_normalized() {
        let (store, dec) = tiny(3, 4, 3, 3);
        let z = Tensor::from_vec(2, 3, vec![0.2, -0.1, 0.5, 0.2, -0.1, 0.5]);
        let logits = dec
            .decode_logits(&store, &z, &[3, 3], Execution::Parallel)
            .unwrap();
        for i in 0..4 {
            assert_eq!(logits.node_row(0, i), logits.node_row(1, i));
        }
        for s in 0..logits.e_max() {
            assert_eq!(logits.edge_row(0, s), logits.edge_row(1, s));
        }
    }

    #[test]
    fn zero_heads_give_uniform_categoricals() {
        let (mut store, dec) = tiny(4, 4, 3, 3);
        for lin in [dec.node_head(), dec.edge_head()] {
            store.get_mut(lin.weight).data_mut().fill(0.0);
            store.get_mut(lin.bias).data_mut().fill(0.0);
        }
        let z = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let logits = dec
            .decode_logits(&store, &z, &[4], Execution::Sequential)
            .unwrap();
        assert!(logits.node.iter().chain(&logits.edge).all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_batch_likelihoods_agree() {
        let (store, dec) = tiny(5, 5, 16, 5);
        let g = parse("CC=O").unwrap();
        let z = Tensor::from_vec(1, 3, vec![0.3, 0.1, -0.9]);
        let mut tape = Tape::new(&store);
        let zv = tape.constant(z.clone());
        let out = dec.forward(&mut tape, zv, 3).unwrap();
        let ll = log_likelihood_on_tape(&mut tape, &out, &g);
        let truth = GraphBatch::new(&[g], 5, 16, 5).unwrap();
        let logits = dec
            .decode_logits(&store, &z, &[3], Execution::Sequential)
            .unwrap();
        let batch_ll = log_likelihood(&logits, &truth).unwrap()[0];
        assert!((tape.scalar(ll) - batch_ll).abs() < 1e-12);
    }

    #[test]
    fn too_many_nodes_is_rejected() {
        let (store, dec) = tiny(6, 3, 3, 3);
        let z = Tensor::zeros(1, 3);
        assert!(dec
            .decode_logits(&store, &z, &[4], Execution::Sequential)
            .is_err());
        assert!(dec
            .decode_logits(&store, &z, &[0], Execution::Sequential)
            .is_err());
        assert!(dec
            .decode_logits(&store, &z, &[1, 2], Execution::Sequential)
            .is_err());
    }
}
