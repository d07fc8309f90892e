use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Named trainable variables, initialised from a seeded stream in creation
/// order so that the same construction sequence always yields the same
/// parameters.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> HashMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrite every variable from `tensors`; all names must be present
    /// with matching shapes.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Version(format!("checkpoint lacks parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Version(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let mut vars = self.vars.borrow_mut();
        if vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(out)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = {
            let mut rng = self.store.rng.borrow_mut();
            (0..n).map(|_| dist.sample(&mut *rng)).collect()
        };
        self.store.create(self.full(name), data, shape)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = {
            let mut rng = self.store.rng.borrow_mut();
            (0..n).map(|_| dist.sample(&mut *rng)).collect()
        };
        self.store.create(self.full(name), data, shape)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.store.create(self.full(name), vec![value; n], shape)
    }
}
