//! Parameter storage and the basic trainable layers.

mod optim;

pub use optim::{AdamW, AdamWConfig};

use std::ops::Index;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Tape variables of a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a tape leaf. Frozen stores become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients aligned with the store; parameters without a gradient get zeros.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|((_, t), &v)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()
    }

    /// Splits a flat vector back into tensors shaped like this store.
    pub fn unflatten(&self, flat: &[f32]) -> Vec<Tensor> {
        assert_eq!(flat.len(), self.num_scalars(), "flat gradient length");
        let mut offset = 0;
        self.entries
            .iter()
            .map(|(_, t)| {
                let n = t.numel();
                let part = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
                part
            })
            .collect()
    }

    /// Copies values for every name present in both stores. Returns the names
    /// of this store that had no counterpart.
    pub fn load_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut missing = Vec::new();
        for (name, t) in &mut self.entries {
            match other.entries.iter().find(|(n, _)| n == name) {
                Some((_, src)) if src.shape() == t.shape() => *t = src.clone(),
                _ => missing.push(name.clone()),
            }
        }
        missing
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Concatenates per-parameter tensors into one flat vector.
pub fn flatten(tensors: &[Tensor]) -> Vec<f32> {
    let mut out = Vec::with_capacity(tensors.iter().map(Tensor::numel).sum());
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

/// Uniform(−1/√fan_in, 1/√fan_in), the usual default for conv and linear layers.
fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in as f32).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let weight = store.add(format!("{prefix}.weight"), w);
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), fan_in_uniform(&[out_channels], fan_in, rng)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub(crate) fn transfer(&self, from: &ParamStore, to: &mut ParamStore) -> Self {
        let mut copy = self.clone();
        copy.weight = to.add(from.name(self.weight), from.get(self.weight).clone());
        copy.bias = self.bias.map(|b| to.add(from.name(b), from.get(b).clone()));
        copy
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            fan_in_uniform(&[out_features, in_features], in_features, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), fan_in_uniform(&[out_features], in_features, rng));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    pub groups: usize,
    eps: f32,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::full([channels], 1.0));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros([channels]));
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.group_norm(x, p[self.gamma], p[self.beta], self.groups, self.eps)
    }

    pub(crate) fn transfer(&self, from: &ParamStore, to: &mut ParamStore) -> Self {
        let mut copy = self.clone();
        copy.gamma = to.add(from.name(self.gamma), from.get(self.gamma).clone());
        copy.beta = to.add(from.name(self.beta), from.get(self.beta).clone());
        copy
    }
}

/// Largest group count ≤ 8 that divides `channels` and keeps ≥ 4 channels per group
/// when possible.
pub fn norm_groups(channels: usize) -> usize {
    let cap = (channels / 4).clamp(1, 8);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_groups_divides_channels() {
        for c in 1..=130 {
            let g = norm_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 8);
        }
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(16), 4);
        assert_eq!(norm_groups(3), 1);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", 3, 2, &mut rng);
        Conv2d::new(&mut store, "conv", 2, 4, 3, 1, true, &mut rng);
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let flat = flatten(&tensors);
        assert_eq!(flat.len(), store.num_scalars());
        assert_eq!(store.unflatten(&flat), tensors);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", 3, 2, &mut rng);
        let before = store.fingerprint();
        assert_eq!(before, store.clone().fingerprint());
        store.tensors_mut().next().unwrap().data_mut()[0] += 1.0;
        assert_ne!(before, store.fingerprint());
    }
}
