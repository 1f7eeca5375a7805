//! Parameter storage: path-addressable leaves with gradient buffers, plus
//! checkpoint serialization (JSON manifest + one binary blob per leaf).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, FormatError, Result};

/// Handle to one leaf inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// One learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamLeaf<T: Real> {
    pub path: String,
    pub value: Tensor2<T>,
    pub grad: Tensor2<T>,
}

/// All learnable weights of a model, addressable by path.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    leaves: Vec<ParamLeaf<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            leaves: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, path: impl Into<String>, value: Tensor2<T>) -> ParamId {
        let path = path.into();
        assert!(
            !self.index.contains_key(&path),
            "duplicate parameter path {path}"
        );
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.index.insert(path.clone(), self.leaves.len());
        self.leaves.push(ParamLeaf { path, value, grad });
        ParamId(self.leaves.len() - 1)
    }

    /// Add a `[rows × cols]` leaf initialized uniform(−1/√fan_in, 1/√fan_in).
    pub fn add_uniform(
        &mut self,
        path: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor2::from_fn(rows, cols, |_, _| {
            T::from_f64(rng.gen_range(-bound..bound))
        });
        self.add(path, value)
    }

    pub fn add_constant(&mut self, path: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(path, Tensor2::from_fn(rows, cols, |_, _| T::from_f64(v)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.leaves.iter().map(|l| l.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn leaf(&self, id: ParamId) -> &ParamLeaf<T> {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut ParamLeaf<T> {
        &mut self.leaves[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2<T> {
        &self.leaves[id.0].value
    }

    pub fn by_path(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.fill(T::zero());
        }
    }

    /// Register every leaf value on a tape; the returned binding maps
    /// [`ParamId`]s to tape variables.
    pub fn bind(&self, tape: &Tape<T>) -> ParamBinding {
        let vars = self.leaves.iter().map(|l| tape.leaf(l.value.clone())).collect();
        ParamBinding { vars }
    }

    /// Accumulate tape gradients into each leaf's grad buffer.
    pub fn accumulate(&mut self, binding: &ParamBinding, grads: &Grads<T>) {
        for (leaf, &var) in self.leaves.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.get_ref(var) {
                leaf.grad.add_scaled(g, T::one());
            }
        }
    }

    /// Cast every leaf into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for leaf in &self.leaves {
            let value = Tensor2::from_f64_slice(
                leaf.value.rows(),
                leaf.value.cols(),
                &leaf.value.to_f64_vec(),
            );
            out.add(leaf.path.clone(), value);
        }
        out
    }
}

/// Tape variables for every leaf of a store, in store order.
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LeafEntry {
    path: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    dtype: String,
    seed: Option<u64>,
    leaves: Vec<LeafEntry>,
    /// Caller-defined metadata (model config, normalization stats, ...).
    extra: serde_json::Value,
}

/// Write a checkpoint: `params.json` plus one little-endian blob per leaf.
pub fn save_params<T: Real>(
    store: &ParamStore<T>,
    dir: &Path,
    seed: Option<u64>,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut leaves = Vec::new();
    for (i, leaf) in store.leaves.iter().enumerate() {
        let file = format!("p{i:04}.bin");
        let mut bytes = Vec::with_capacity(leaf.value.len() * T::BYTES);
        for &v in leaf.value.data() {
            T::append_le(&mut bytes, v);
        }
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        leaves.push(LeafEntry {
            path: leaf.path.clone(),
            rows: leaf.value.rows(),
            cols: leaf.value.cols(),
            file,
        });
    }
    let manifest = ParamsManifest {
        dtype: T::DTYPE.to_string(),
        seed,
        leaves,
        extra,
    };
    let manifest_path = dir.join("params.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Load a checkpoint saved by [`save_params`]. The stored dtype must equal
/// `T::DTYPE` unless `allow_convert` is set.
pub fn load_params<T: Real>(dir: &Path, allow_convert: bool) -> Result<(ParamStore<T>, serde_json::Value)> {
    let manifest_path = dir.join("params.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ParamsManifest = serde_json::from_str(&text)?;
    if manifest.dtype != T::DTYPE && !allow_convert {
        return Err(FormatError::DtypeNeedsConversion {
            stored: manifest.dtype,
            requested: T::DTYPE.to_string(),
        }
        .into());
    }
    let stored_f64 = manifest.dtype == f64::DTYPE;
    let stored_bytes = if stored_f64 { 8 } else { 4 };
    if !stored_f64 && manifest.dtype != f32::DTYPE {
        return Err(FormatError::UnknownDtype {
            path: manifest_path,
            tag: manifest.dtype,
        }
        .into());
    }

    let mut store = ParamStore::new();
    for entry in &manifest.leaves {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = entry.rows * entry.cols * stored_bytes;
        if bytes.len() != expected {
            return Err(FormatError::TruncatedPayload {
                path,
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        let values: Vec<T> = bytes
            .chunks_exact(stored_bytes)
            .map(|c| {
                if stored_f64 {
                    T::from_f64(f64::from_le(c))
                } else {
                    T::from_f64(f32::from_le(c).as_f64())
                }
            })
            .collect();
        store.add(
            entry.path.clone(),
            Tensor2::from_vec(entry.rows, entry.cols, values),
        );
    }
    Ok((store, manifest.extra))
}
