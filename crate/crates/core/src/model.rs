//! The full model: encoder φ, decoder θ, denoiser w and regression head,
//! sharing one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::diffusion::{ancestral_sample, Denoiser, DenoiserConfig};
use crate::encoder::{mean_z1, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::molgraph::{GraphBatch, MolecularGraph};
use crate::par::Execution;
use crate::params::ParamStore;
use crate::property_head::{HeadConfig, RegressionHead};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::smiles::{AtomAlphabet, BondAlphabet, SmilesCodec, SUPPORTED_SYMBOLS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Largest molecule (heavy atoms) the model can encode or decode.
    pub max_nodes: usize,
    pub latent_dim: usize,
    /// Atom categories, in index order.
    pub atom_symbols: Vec<String>,
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub denoiser: DenoiserConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_nodes: 32,
            latent_dim: 16,
            atom_symbols: SUPPORTED_SYMBOLS.iter().map(|s| s.to_string()).collect(),
            schedule: ScheduleConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_nodes == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig(
                "max_nodes and latent_dim must be positive".into(),
            ));
        }
        self.encoder.validate("encoder")?;
        self.decoder.validate("decoder")?;
        self.denoiser.validate()?;
        if self.head.hidden == 0 {
            return Err(Error::InvalidConfig("head: hidden must be positive".into()));
        }
        self.schedule.build()?;
        self.codec()?;
        Ok(())
    }

    pub fn codec(&self) -> Result<SmilesCodec> {
        Ok(SmilesCodec::new(
            AtomAlphabet::new(&self.atom_symbols)?,
            BondAlphabet::default(),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub denoiser: Denoiser,
    pub head: RegressionHead,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub codec: SmilesCodec,
    pub schedule: NoiseSchedule,
    pub nets: Networks,
    pub store: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let codec = config.codec()?;
        let schedule = config.schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (k, l, v, d) = (
            codec.num_atom_types(),
            codec.num_bond_types(),
            config.max_nodes,
            config.latent_dim,
        );
        let nets = Networks {
            encoder: Encoder::new(&mut store, &config.encoder, d, k, l, v, &mut rng),
            decoder: Decoder::new(&mut store, &config.decoder, d, k, l, v, &mut rng),
            denoiser: Denoiser::new(&mut store, &config.denoiser, d, schedule.steps(), &mut rng),
            head: RegressionHead::new(&mut store, &config.head, d, &mut rng),
        };
        Ok(Self {
            config,
            codec,
            schedule,
            nets,
            store,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn batch(&self, graphs: &[MolecularGraph]) -> Result<GraphBatch> {
        Ok(GraphBatch::new(
            graphs,
            self.config.max_nodes,
            self.codec.num_atom_types(),
            self.codec.num_bond_types(),
        )?)
    }

    pub fn encode(&self, graphs: &[MolecularGraph], exec: Execution) -> Result<Tensor> {
        self.nets.encoder.encode_graphs(&self.store, graphs, exec)
    }

    /// Noise-free z₁ for each graph.
    pub fn encode_mean_z1(&self, graphs: &[MolecularGraph], exec: Execution) -> Result<Tensor> {
        Ok(mean_z1(&self.encode(graphs, exec)?, &self.schedule))
    }

    /// Node and edge accuracy of decoding the noise-free z₁ of each graph.
    pub fn reconstruction_accuracy(
        &self,
        graphs: &[MolecularGraph],
        exec: Execution,
    ) -> Result<(f64, f64)> {
        let z1 = self.encode_mean_z1(graphs, exec)?;
        let counts: Vec<usize> = graphs.iter().map(MolecularGraph::num_nodes).collect();
        let logits = self
            .nets
            .decoder
            .decode_logits(&self.store, &z1, &counts, exec)?;
        Ok(crate::molgraph::reconstruction_accuracy(
            &logits,
            &self.batch(graphs)?,
        )?)
    }

    pub fn predict(&self, z1: &Tensor) -> Result<Vec<f64>> {
        self.nets.head.predict(&self.store, z1)
    }

    /// Draws `count` graphs: sizes from `size_weights` (index = atom count),
    /// latents from the reverse chain, structure by greedy decoding.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        size_weights: &[f64],
        rng: &mut R,
        exec: Execution,
    ) -> Result<Vec<MolecularGraph>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let sizes = SizeHistogram::new(size_weights.to_vec())?;
        let counts: Vec<usize> = (0..count).map(|_| sizes.draw(rng)).collect();
        let bound = self.nets.denoiser.bind(&self.store);
        let z1 = ancestral_sample(&self.schedule, &bound, count, self.latent_dim(), rng)?;
        self.nets
            .decoder
            .greedy_decode(&self.store, &z1, &counts, exec)
    }
}

/// Distribution over molecule sizes; entry `n` weights size `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeHistogram {
    weights: Vec<f64>,
}

impl SizeHistogram {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().skip(1).sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || total <= 0.0 {
            return Err(Error::InvalidConfig(
                "size histogram needs positive weight on some size >= 1".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn from_graphs(graphs: &[MolecularGraph], max_nodes: usize) -> Result<Self> {
        let mut weights = vec![0.0; max_nodes + 1];
        for g in graphs {
            let n = g.num_nodes();
            if n > max_nodes {
                return Err(crate::molgraph::GraphError::GraphTooLarge {
                    nodes: n,
                    v_max: max_nodes,
                }
                .into());
            }
            weights[n] += 1.0;
        }
        Self::new(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.weights.iter().skip(1).sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = 1;
        for (n, &w) in self.weights.iter().enumerate().skip(1) {
            if w <= 0.0 {
                continue;
            }
            last = n;
            if u < w {
                return n;
            }
            u -= w;
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse;

    fn small_config() -> ModelConfig {
        let t = crate::nn::TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            ff_width: 16,
            dropout: 0.0,
        };
        ModelConfig {
            max_nodes: 8,
            latent_dim: 4,
            encoder: t.clone(),
            decoder: t,
            denoiser: DenoiserConfig {
                hidden: 8,
                time_embed_dim: 8,
            },
            head: HeadConfig { hidden: 4 },
            schedule: ScheduleConfig {
                steps: 5,
                ..ScheduleConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(small_config(), 3).unwrap();
        let b = Model::new(small_config(), 3).unwrap();
        let c = Model::new(small_config(), 4).unwrap();
        let flat = |m: &Model| {
            m.store
                .entries()
                .iter()
                .flat_map(|e| e.tensor.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config();
        cfg.encoder.n_heads = 3;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = small_config();
        cfg.atom_symbols = vec!["C".into(), "C".into()];
        assert!(Model::new(cfg, 0).is_err());
    }

    #[test]
    fn sampling_respects_size_histogram() {
        let m = Model::new(small_config(), 1).unwrap();
        let graphs = vec![parse("CCO").unwrap(), parse("CCCO").unwrap()];
        let hist = SizeHistogram::from_graphs(&graphs, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .sample(20, hist.weights(), &mut rng, Execution::Parallel)
            .unwrap();
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|g| g.num_nodes() == 3 || g.num_nodes() == 4));
        assert!(m
            .sample(0, hist.weights(), &mut rng, Execution::Parallel)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn empty_histogram_is_rejected() {
        assert!(SizeHistogram::new(vec![5.0, 0.0]).is_err());
        assert!(SizeHistogram::new(vec![0.0, f64::NAN]).is_err());
    }
}
