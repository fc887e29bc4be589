//! Graph transformer mapping a molecule to its deterministic latent z₀, and
//! the reparameterized draw of the first chain latent z₁.
//!
//! Atoms are tokens (category embedding plus slot embedding). Bond
//! categories enter every attention head as a learned additive bias, with a
//! dedicated extra category on the diagonal. The token states are
//! mean-pooled over real atoms and projected to the latent dimension.
//! Padding slots never become tokens, so a batch's padding width cannot
//! influence z₀.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::molgraph::{GraphBatch, GraphError, MolecularGraph};
use crate::nn::{ensure_finite, Dropout, LayerNorm, Linear, TransformerBlock, TransformerConfig};
use crate::par::{self, Execution};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub type EncoderConfig = TransformerConfig;

#[derive(Clone, Debug)]
pub struct Encoder {
    n_heads: usize,
    num_bond_types: usize,
    max_nodes: usize,
    node_embed: ParamId,
    slot_embed: ParamId,
    edge_bias: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    project: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        latent_dim: usize,
        num_atom_types: usize,
        num_bond_types: usize,
        max_nodes: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Encoder;
        let dm = cfg.d_model;
        let node_embed = store.add_embedding("encoder.node_embed", g, num_atom_types, dm, rng);
        let slot_embed = store.add_embedding("encoder.slot_embed", g, max_nodes, dm, rng);
        let edge_bias = store.add_zeros("encoder.edge_bias", g, num_bond_types + 1, cfg.n_heads);
        let blocks = (0..cfg.n_layers)
            .map(|i| TransformerBlock::new(store, &format!("encoder.block{i}"), g, cfg, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "encoder.final_norm", g, dm);
        let project = Linear::new(store, "encoder.project", g, dm, latent_dim, rng);
        Self {
            n_heads: cfg.n_heads,
            num_bond_types,
            max_nodes,
            node_embed,
            slot_embed,
            edge_bias,
            blocks,
            final_norm,
            project,
        }
    }

    pub fn project(&self) -> &Linear {
        &self.project
    }

    /// z₀ for one graph as a `1 x d` node.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        graph: &MolecularGraph,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let n = graph.num_nodes();
        if n > self.max_nodes {
            return Err(GraphError::GraphTooLarge {
                nodes: n,
                v_max: self.max_nodes,
            }
            .into());
        }
        let node_table = tape.param(self.node_embed);
        let slot_table = tape.param(self.slot_embed);
        let atoms = tape.gather_rows(node_table, graph.node_types());
        let slots: Vec<usize> = (0..n).collect();
        let slots = tape.gather_rows(slot_table, &slots);
        let mut x = tape.add(atoms, slots);

        // Flat indices into the (L + 1) x heads bias table, one n x n map per head.
        let self_cat = self.num_bond_types;
        let cats: Vec<usize> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                if i == j {
                    self_cat
                } else {
                    graph.bond(i, j)
                }
            })
            .collect();
        let bias_table = tape.param(self.edge_bias);
        let heads = self.n_heads;
        let per_head: Vec<Var> = (0..heads)
            .map(|h| {
                let flat = cats.iter().map(|&c| c * heads + h).collect();
                tape.gather_entries(bias_table, flat, n, n)
            })
            .collect();

        for block in &self.blocks {
            x = block.forward(tape, x, &mut |_, h| Some(per_head[h]), &mut dropout);
        }
        let x = self.final_norm.forward(tape, x);
        let pooled = tape.mean_rows(x);
        Ok(self.project.forward(tape, pooled))
    }

    /// z₀ for every graph in the batch, `B x d`.
    pub fn encode(
        &self,
        store: &ParamStore,
        batch: &GraphBatch,
        exec: Execution,
    ) -> Result<Tensor> {
        self.encode_graphs(store, batch.graphs(), exec)
    }

    pub fn encode_graphs(
        &self,
        store: &ParamStore,
        graphs: &[MolecularGraph],
        exec: Execution,
    ) -> Result<Tensor> {
        let rows = par::try_map_range(exec, graphs.len(), |b| {
            let mut tape = Tape::new(store);
            let z = self.forward(&mut tape, &graphs[b], None)?;
            Ok::<_, Error>(tape.value(z).data().to_vec())
        })?;
        let width = store.get(self.project.bias).cols();
        let out = if rows.is_empty() {
            Tensor::zeros(0, width)
        } else {
            Tensor::from_rows(&rows)
        };
        ensure_finite(&out, "encoder")?;
        Ok(out)
    }
}

/// z₁ = √(1−β₁)·z₀ + √β₁·noise, elementwise.
pub fn sample_z1(z0: &Tensor, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    if z0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch(format!(
            "z0 {:?} vs noise {:?}",
            z0.shape(),
            noise.shape()
        )));
    }
    let beta = schedule.beta(1);
    let (a, s) = ((1.0 - beta).sqrt(), beta.sqrt());
    let data = z0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(z, e)| a * z + s * e)
        .collect();
    Ok(Tensor::from_vec(z0.rows(), z0.cols(), data))
}

/// The noise-free z₁ used for evaluation and export: √(1−β₁)·z₀.
pub fn mean_z1(z0: &Tensor, schedule: &NoiseSchedule) -> Tensor {
    z0.scale((1.0 - schedule.beta(1)).sqrt())
}
