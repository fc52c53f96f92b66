//! Named parameter storage with deterministic initialization.

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::tape::{NodeId, TapeGraph};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// FNV-1a over a byte string; stable across builds so seed derivation
/// never drifts.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // splitmix64 finalizer over the xor keeps labels well separated.
    let mut z = base ^ fnv1a64(label.as_bytes());
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// All learnable tensors, keyed by a unique name. Iteration order is
/// the sorted name order, which keeps every consumer deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
}

/// Parameters registered as leaves on one graph.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::contract(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k, v))
    }
}

fn uniform_fan_in(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_rng(shape, rng, |r| r.gen_range(-bound..bound)).expect("finite init")
}

impl ParameterStore {
    /// Initialize every parameter of the ordering head for `cfg`.
    /// Weight matrices are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    /// with a per-name seed stream; biases start at zero and norm
    /// gains at one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feat_dim;
        let ff = cfg.ff_dim;
        let mut entries = BTreeMap::new();

        let weight = |name: String, shape: Vec<usize>, fan_in: usize, entries: &mut BTreeMap<String, Tensor>| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
            entries.insert(name, uniform_fan_in(shape, fan_in, &mut rng));
        };

        for l in 0..cfg.layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                weight(format!("enc.{l}.attn.{proj}"), vec![d, d], d, &mut entries);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                entries.insert(format!("enc.{l}.attn.{bias}"), Tensor::zeros(vec![d]));
            }
            for ln in ["ln1", "ln2"] {
                entries.insert(format!("enc.{l}.{ln}.gamma"), Tensor::filled(vec![d], 1.0)?);
                entries.insert(format!("enc.{l}.{ln}.beta"), Tensor::zeros(vec![d]));
            }
            weight(format!("enc.{l}.ffn.w1"), vec![d, ff], d, &mut entries);
            entries.insert(format!("enc.{l}.ffn.b1"), Tensor::zeros(vec![ff]));
            weight(format!("enc.{l}.ffn.w2"), vec![ff, d], ff, &mut entries);
            entries.insert(format!("enc.{l}.ffn.b2"), Tensor::zeros(vec![d]));
        }

        weight("att.w1".to_string(), vec![d, d], d, &mut entries);
        weight("att.w2".to_string(), vec![d, d], d, &mut entries);
        weight("att.v".to_string(), vec![d], d, &mut entries);

        if cfg.use_frame_embedding {
            weight("frame_embed".to_string(), vec![cfg.seq_len, d], d, &mut entries);
        }

        Ok(ParameterStore { entries })
    }

    pub fn from_entries(entries: BTreeMap<String, Tensor>) -> Self {
        ParameterStore { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(CoreError::shape("param set", slot.shape(), value.shape()));
                }
                *slot = value;
                Ok(())
            }
            None => Err(CoreError::contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }

    /// Register every parameter as a leaf on `graph`.
    pub fn bind(&self, graph: &mut TapeGraph) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone())))
            .collect();
        BoundParams { ids }
    }

    /// Like [`ParameterStore::bind`], but one parameter is backed by an
    /// existing node instead of a fresh leaf. Lets verification code
    /// differentiate with respect to a single named parameter.
    pub fn bind_with_override(&self, graph: &mut TapeGraph, name: &str, node: NodeId) -> Result<BoundParams> {
        if !self.entries.contains_key(name) {
            return Err(CoreError::contract(format!("unknown parameter {name}")));
        }
        let ids = self
            .entries
            .iter()
            .map(|(n, tensor)| {
                let id = if n == name { node } else { graph.leaf(tensor.clone()) };
                (n.clone(), id)
            })
            .collect();
        Ok(BoundParams { ids })
    }
}
