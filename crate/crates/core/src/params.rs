//! Named parameter storage shared by every network in the model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Graph encoder (φ).
    Encoder,
    /// Graph decoder (θ).
    Decoder,
    /// Noise predictor of the latent chain (w).
    Denoiser,
    /// Property regression head.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Denoiser,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Denoiser => "denoiser",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix `fan_in x fan_out` drawn from N(0, 1/fan_in).
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        self.add(name, group, Tensor::from_vec(fan_in, fan_out, data))
    }

    /// Lookup table `rows x cols` with unit-variance entries (fan-in of a
    /// one-hot input is 1).
    pub fn add_embedding<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        self.add(name, group, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        self.add(name, group, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn scalar_count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Sets every parameter in `group` to zero.
    pub fn zero_group(&mut self, group: ParamGroup) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.tensor.data_mut().fill(0.0);
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; absent entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub(crate) fn from_parts(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(t) = theirs else { continue };
            match mine {
                Some(m) => m.axpy(scale, t),
                None => *mine = Some(t.scale(scale)),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Gradient flattened in store order for one group (zeros where absent).
    pub fn flatten_group(&self, store: &ParamStore, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        for id in store.ids() {
            let e = store.entry(id);
            if e.group != group {
                continue;
            }
            match &self.grads[id.0] {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, e.tensor.len())),
            }
        }
        out
    }
}
