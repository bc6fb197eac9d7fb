//! Named parameter registry backing every trainable module.
//!
//! Parameters are created through [`Scope`] handles so each one gets a unique
//! dotted path (`soft.bap5.head0.embed.conv.weight`). The optimizer walks the
//! registry in name order, checkpoints serialize it as a flat tensor map, and
//! tests use the paths to probe gradient ownership.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

struct Entry {
    var: Var,
    trainable: bool,
}

/// Registry of named parameters plus the RNG that initializes them.
///
/// Initialization draws happen in construction order, so building the same
/// model twice from the same seed yields bit-identical parameters.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    inner: RefCell<Inner>,
}

struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        Self {
            device,
            dtype,
            inner: RefCell::new(Inner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Root scope; modules derive their own sub-scopes from it.
    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            path: String::new(),
        }
    }

    fn insert(&self, name: String, data: Vec<f64>, shape: Shape, trainable: bool) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut inner = self.inner.borrow_mut();
        if inner.entries.contains_key(&name) {
            return Err(Error::shape(format!("duplicate parameter name {name}")));
        }
        inner.entries.insert(name, Entry { var: var.clone(), trainable });
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.borrow().entries.get(name).map(|e| e.var.clone())
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.inner
            .borrow()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// All parameters (including batch-norm running statistics) in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        self.inner
            .borrow()
            .entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Snapshot of every parameter as plain tensors, for serialization.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.inner
            .borrow()
            .entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().copy().expect("copy param")))
            .collect()
    }

    /// Load a snapshot produced by [`ParamStore::tensors`]. Names must match
    /// the registry exactly in both directions.
    pub fn load_tensors(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.borrow();
        for (name, entry) in inner.entries.iter() {
            let t = map.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {name} in checkpoint"))
            })?;
            entry.var.set(&t.to_dtype(self.dtype)?)?;
        }
        for name in map.keys() {
            if !inner.entries.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {name} has no matching slot in the model"
                )));
            }
        }
        Ok(())
    }
}

/// A dotted-path handle into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a ParamStore,
    path: String,
}

impl<'a> Scope<'a> {
    pub fn child(&self, name: &str) -> Scope<'a> {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Scope { store: self.store, path }
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn full(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    /// Trainable parameter drawn uniformly from `[-bound, bound]`.
    pub fn uniform<S: Into<Shape>>(&self, name: &str, shape: S, bound: f64) -> Result<Var> {
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let data = {
            let mut inner = self.store.inner.borrow_mut();
            (0..n)
                .map(|_| inner.rng.random::<f64>() * 2.0 * bound - bound)
                .collect::<Vec<f64>>()
        };
        self.store.insert(self.full(name), data, shape, true)
    }

    /// Constant-initialized parameter; `trainable = false` is used for
    /// batch-norm running statistics.
    pub fn constant<S: Into<Shape>>(
        &self,
        name: &str,
        shape: S,
        value: f64,
        trainable: bool,
    ) -> Result<Var> {
        let shape: Shape = shape.into();
        let data = vec![value; shape.elem_count()];
        self.store.insert(self.full(name), data, shape, trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::new(Device::Cpu, DType::F32, 7);
        let b = ParamStore::new(Device::Cpu, DType::F32, 7);
        let va = a.root().child("m").uniform("w", (3, 4), 0.5).unwrap();
        let vb = b.root().child("m").uniform("w", (3, 4), 0.5).unwrap();
        let xa = va.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let xb = vb.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(xa, xb);
        assert!(xa.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(Device::Cpu, DType::F32, 0);
        s.root().uniform("w", 2, 1.0).unwrap();
        assert!(s.root().uniform("w", 2, 1.0).is_err());
    }

    #[test]
    fn trainable_filter_excludes_constants() {
        let s = ParamStore::new(Device::Cpu, DType::F32, 0);
        s.root().uniform("a", 2, 1.0).unwrap();
        s.root().constant("running_mean", 2, 0.0, false).unwrap();
        let names: Vec<String> = s.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a".to_string()]);
        assert_eq!(s.all().len(), 2);
    }
}
