//! Named parameter storage with seeded initialization.
//!
//! candle's CPU device cannot be seeded, so fresh parameters are sampled here
//! from a ChaCha stream instead. Creation order is deterministic for a given
//! model config, which makes initialization reproducible from a seed.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Snapshot of every parameter value, detached from the graph.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrite an existing parameter in place. Shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        let value = value.to_dtype(var.dtype())?.to_device(var.device())?;
        var.set(&value)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| {
            (0..n)
                .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| {
            (0..n).map(|_| rng.random_range(lo..up)).collect::<Vec<_>>()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => normal(rng, mean, stdev),
            Init::Uniform { lo, up } => uniform(rng, lo, up),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan.for_shape(shape).max(1);
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(rng, 0.0, std),
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        init: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle::Result<Tensor> {
        let mut inner = self.lock();
        if let Some(var) = inner.vars.get(name) {
            if var.shape() != &s {
                candle::bail!(
                    "parameter {name} registered with shape {:?}, requested {:?}",
                    var.dims(),
                    s.dims()
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.sample(&mut inner.rng, &s, init);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle::Result<Tensor> {
        match self.lock().vars.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle::bail!("parameter {name} does not exist"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.lock().vars.contains_key(name)
    }
}
