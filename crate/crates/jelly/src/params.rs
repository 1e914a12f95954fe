//! Named parameter tensors: deterministic initialization, content digests,
//! and the AdamW update used by every training stage.
//!
//! Tensors live in a `BTreeMap`, so every iteration (checkpoint layout,
//! digest tables, optimizer sweeps) has one canonical order.

use crate::tape::Elem;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone)]
pub struct ParamStore<F: Elem> {
    tensors: BTreeMap<String, Array2<F>>,
}

impl<F: Elem> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Array2<F>) {
        let prev = self.tensors.insert(name.to_string(), tensor);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Replaces an existing tensor without changing its shape.
    pub fn set(&mut self, name: &str, tensor: Array2<F>) {
        let slot = self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.dim(), tensor.dim(), "shape change for {name}");
        *slot = tensor;
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn value_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// SHA-256 of each tensor's row-major little-endian f32 image.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.tensors.iter().map(|(k, v)| (k.clone(), tensor_digest(v))).collect()
    }
}

/// Row-major little-endian f32 byte image of a tensor. Training runs in f32,
/// so for them this image is lossless.
pub fn tensor_f32_bytes<F: Elem>(t: &Array2<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        out.extend_from_slice(&(Elem::to_f64(*v) as f32).to_le_bytes());
    }
    out
}

pub fn tensor_digest<F: Elem>(t: &Array2<F>) -> String {
    let mut h = Sha256::new();
    h.update(tensor_f32_bytes(t));
    hex::encode(h.finalize())
}

/// Tensor names whose digests differ between two tables, including names
/// present on only one side.
pub fn digest_diff(
    before: &BTreeMap<String, String>,
    after: &BTreeMap<String, String>,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (name, d) in after {
        if before.get(name) != Some(d) {
            out.insert(name.clone());
        }
    }
    for name in before.keys() {
        if !after.contains_key(name) {
            out.insert(name.clone());
        }
    }
    out
}

/// Stream seeded by (seed, label), so tensor initialization is independent of
/// creation order and stable under refactors that shuffle it.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let bytes: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(bytes)
}

/// Gaussian-initialized tensor. Samples are drawn in f64 and narrowed, so a
/// seed produces the same f32 tensor on every run.
pub fn gaussian<F: Elem>(seed: u64, label: &str, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let mut rng = seeded_rng(seed, label);
    let dist = Normal::new(0.0, std).expect("std must be finite");
    Array2::from_shape_fn((rows, cols), |_| F::from_f64(dist.sample(&mut rng)))
}

pub fn zeros<F: Elem>(rows: usize, cols: usize) -> Array2<F> {
    Array2::zeros((rows, cols))
}

pub fn ones<F: Elem>(rows: usize, cols: usize) -> Array2<F> {
    Array2::ones((rows, cols))
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
/// Moment tensors exist only for trainable parameters and are part of the
/// checkpoint, which is what makes mid-run resume exact.
#[derive(Clone)]
pub struct AdamW<F: Elem> {
    pub m: BTreeMap<String, Array2<F>>,
    pub v: BTreeMap<String, Array2<F>>,
    pub step: u64,
}

impl<F: Elem> Default for AdamW<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> AdamW<F> {
    pub fn new() -> Self {
        AdamW { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    /// Applies one update over the trainable set; missing grads count as
    /// zero. Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, Array2<F>>,
        trainable: &BTreeSet<String>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> f64 {
        let mut sq_sum = 0.0;
        for name in trainable {
            if let Some(g) = grads.get(name) {
                sq_sum += g.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
            }
        }
        let norm = sq_sum.sqrt();
        let clip_scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let t = self.step;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - cfg.beta1.powi(t as i32));
        let bc2 = F::from_f64(1.0 - cfg.beta2.powi(t as i32));
        let eps = F::from_f64(cfg.eps);
        let lr_f = F::from_f64(lr);
        let wd = F::from_f64(cfg.weight_decay);
        let scale = F::from_f64(clip_scale);

        for name in trainable {
            let w = store.get_mut(name);
            let dim = w.dim();
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(dim));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(dim));
            let zero_grad = Array2::zeros(dim);
            let g = grads.get(name).unwrap_or(&zero_grad);
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr_f * (mhat / (vhat.sqrt() + eps) + wd * *w);
            });
        }
        norm
    }
}
