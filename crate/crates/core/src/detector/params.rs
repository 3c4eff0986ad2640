//! Named parameter tensors, their graph bindings and the checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Union of two stores; names in `other` replace names in `self`.
    pub fn merged(&self, other: &ParamStore) -> ParamStore {
        let mut out = self.clone();
        for (n, t) in other.iter() {
            out.insert(n, t.clone());
        }
        out
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Loads every tensor onto `g`, as trainable leaves or frozen constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let t = t.clone();
                let v = if trainable { g.param(t) } else { g.constant(t) };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Names and shapes must agree exactly.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (n, t) in self.iter() {
            match other.get(n) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::ModelMismatch(format!(
                        "{n}: shape {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::ModelMismatch(format!("missing parameter {n}"))),
            }
        }
        if self.len() != other.len() {
            return Err(Error::ModelMismatch(format!(
                "{} vs {} parameters",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.entries.len() as u64);
        for (name, t) in &self.entries {
            w.str(name);
            w.u32(t.shape().len() as u32);
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            w.f64s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.len(20, "tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let at = r.offset();
            let data = r.f64s("tensor data")?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Parse {
                offset: at,
                message: e.to_string(),
            })?;
            store.insert(name, t);
        }
        if !r.is_at_end() {
            return Err(r.error("trailing bytes in checkpoint"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Graph handles for a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Rebinds `name` to `v`, returning the previous handle.
    pub fn replace(&mut self, name: &str, v: Var) -> Option<Var> {
        self.vars
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, old)| std::mem::replace(old, v))
    }

    /// Gradients after backward, zero-filled for unreached parameters.
    pub fn grads(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let grad = g
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(*v).numel()]);
                (n.clone(), grad)
            })
            .collect()
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Linear map plus rectifier that aligns student features with the teacher's
/// feature space before a consistency loss. Applied per active voxel, it is
/// also exactly a kernel-1 submanifold convolution.
#[derive(Debug, Clone, Copy)]
pub struct AdaptationLayer<'a> {
    pub prefix: &'a str,
}

impl AdaptationLayer<'_> {
    /// Identity initialization: on non-negative inputs the layer starts as
    /// the identity map, so identical branches start with zero distillation loss.
    pub fn init(&self, store: &mut ParamStore, in_dim: usize, out_dim: usize) {
        let mut w = vec![0.0; in_dim * out_dim];
        for i in 0..in_dim.min(out_dim) {
            w[i * out_dim + i] = 1.0;
        }
        store.insert(
            format!("{}.weight", self.prefix),
            Tensor::matrix(in_dim, out_dim, w).expect("shape"),
        );
        store.insert(format!("{}.bias", self.prefix), Tensor::zeros(&[out_dim]));
    }

    pub fn apply(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        let w = params.var(&format!("{}.weight", self.prefix));
        let b = params.var(&format!("{}.bias", self.prefix));
        let y = g.linear(x, w, b)?;
        Ok(g.relu(y))
    }
}
