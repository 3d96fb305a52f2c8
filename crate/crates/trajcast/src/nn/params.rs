//! Named parameter storage, initialization, Adam updates, and the versioned
//! parameter file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::NnError;

pub const PARAM_FILE_VERSION: u32 = 1;

/// Layer-name -> tensor map with deterministic (sorted) iteration order.
/// Shapes are fixed at insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Replace an entry's values; the shape must be unchanged.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), NnError> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(NnError::ShapeMismatch {
                op: "ParamStore::set".into(),
                detail: format!("{name}: {:?} -> {:?}", slot.shape(), tensor.shape()),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Put a leaf copy of `name` on the tape with gradients enabled.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var, NnError> {
        Ok(tape.param(self.get(name)?.clone()))
    }

    /// Concatenate the named entries row-major, in the order given.
    pub fn flatten_subset(&self, names: &[String]) -> Result<Vec<f64>, NnError> {
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(self.get(n)?.data());
        }
        Ok(out)
    }

    /// Scatter a flat vector back into the named entries (inverse of
    /// [`flatten_subset`](Self::flatten_subset)).
    pub fn set_from_flat(&mut self, names: &[String], flat: &[f64]) -> Result<(), NnError> {
        let expected: usize = names
            .iter()
            .map(|n| self.get(n).map(|t| t.len()))
            .sum::<Result<usize, _>>()?;
        if flat.len() != expected {
            return Err(NnError::ShapeMismatch {
                op: "set_from_flat".into(),
                detail: format!("flat length {} != subset size {expected}", flat.len()),
            });
        }
        let mut at = 0;
        for n in names {
            let t = self.entries.get_mut(n).expect("checked above");
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }
}

/// All parameters of a store bound onto one tape, by name.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind_all(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut map = BTreeMap::new();
        for (name, tensor) in store.iter() {
            map.insert(name.to_string(), tape.param(tensor.clone()));
        }
        BoundParams { map }
    }

    pub fn var(&self, name: &str) -> Result<Var, NnError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn dense(&self, prefix: &str) -> Result<super::layers::DenseVars, NnError> {
        Ok(super::layers::DenseVars {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn gru(&self, prefix: &str) -> Result<super::layers::GruVars, NnError> {
        Ok(super::layers::GruVars {
            w_ih: self.var(&format!("{prefix}.w_ih"))?,
            w_hh: self.var(&format!("{prefix}.w_hh"))?,
            b_ih: self.var(&format!("{prefix}.b_ih"))?,
            b_hh: self.var(&format!("{prefix}.b_hh"))?,
        })
    }

    /// Collect gradients per parameter name after a backward sweep.
    /// Parameters the loss never touched report zero gradients.
    pub fn gather(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .map(|(name, var)| (name.clone(), grads.get(tape, *var)))
            .collect()
    }
}

/// Uniform `(-1/sqrt(fan_in), +1/sqrt(fan_in))` initialization.
fn uniform_init(rng: &mut impl RngExt, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// Insert a dense layer `prefix.{w,b}` with shapes `in_dim x out_dim` / `1 x out_dim`.
pub fn init_dense(
    store: &mut ParamStore,
    rng: &mut impl RngExt,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    store.insert(&format!("{prefix}.w"), uniform_init(rng, in_dim, out_dim, in_dim));
    store.insert(&format!("{prefix}.b"), uniform_init(rng, 1, out_dim, in_dim));
}

/// Insert a GRU cell `prefix.{w_ih,w_hh,b_ih,b_hh}` with stacked `[z|r|n]` gates.
pub fn init_gru(
    store: &mut ParamStore,
    rng: &mut impl RngExt,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
) {
    store.insert(
        &format!("{prefix}.w_ih"),
        uniform_init(rng, in_dim, 3 * hidden, in_dim),
    );
    store.insert(
        &format!("{prefix}.w_hh"),
        uniform_init(rng, hidden, 3 * hidden, hidden),
    );
    store.insert(&format!("{prefix}.b_ih"), uniform_init(rng, 1, 3 * hidden, in_dim));
    store.insert(&format!("{prefix}.b_hh"), uniform_init(rng, 1, 3 * hidden, hidden));
}

/// Adam with per-entry first/second moment state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let Ok(current) = store.get(name) else { continue };
            let [r, c] = current.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
            let mut updated = current.clone();
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                updated.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(name, updated).expect("shape preserved");
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LayerData {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Versioned on-disk parameter container.
#[derive(Serialize, Deserialize)]
pub struct ParamFile {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    layers: BTreeMap<String, LayerData>,
}

impl ParamFile {
    pub fn from_store(store: &ParamStore, config_hash: &str, seed: u64) -> Self {
        let layers = store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    LayerData {
                        shape: t.shape(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        ParamFile {
            version: PARAM_FILE_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            layers,
        }
    }

    pub fn into_store(self) -> Result<ParamStore, NnError> {
        let mut store = ParamStore::new();
        for (name, layer) in self.layers {
            if layer.shape[0] * layer.shape[1] != layer.data.len() {
                return Err(NnError::ParamFile(format!(
                    "layer {name}: shape {:?} does not match data length {}",
                    layer.shape,
                    layer.data.len()
                )));
            }
            store.insert(&name, Tensor::new(layer.shape[0], layer.shape[1], layer.data));
        }
        Ok(store)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), NnError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| NnError::ParamFile(e.to_string()))?;
        w.write_all(json.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| NnError::ParamFile(e.to_string()))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, NnError> {
        let mut buf = String::new();
        r.read_to_string(&mut buf)
            .map_err(|e| NnError::ParamFile(e.to_string()))?;
        let file: ParamFile =
            serde_json::from_str(&buf).map_err(|e| NnError::ParamFile(e.to_string()))?;
        if file.version != PARAM_FILE_VERSION {
            return Err(NnError::ParamFile(format!(
                "unsupported version {} (expected {PARAM_FILE_VERSION})",
                file.version
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let f = std::fs::File::create(path).map_err(|e| NnError::ParamFile(e.to_string()))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let f = std::fs::File::open(path)
            .map_err(|e| NnError::ParamFile(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
