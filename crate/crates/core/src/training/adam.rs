//! Adam with named parameter groups and exportable moment estimates.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::{Tensor, Var};

use crate::model::{USam, IMAGE_ENCODER, MASK_DECODER};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<(String, Var)>,
}

/// Step count plus first and second moments keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug)]
pub struct Adam {
    groups: Vec<ParamGroup>,
    cfg: AdamConfig,
    state: AdamState,
}

/// Encoder group (CNN pyramid, ViT, neck) and decoder group (two-way
/// transformer, mask tokens, token MLPs, upsampling). The prompt encoder is
/// left out and therefore never updated.
pub fn model_groups(model: &USam, lr_encoder: f64, lr_decoder: f64) -> Result<Vec<ParamGroup>> {
    let mut encoder = Vec::new();
    let mut decoder = Vec::new();
    for name in model.trainable_names() {
        let var = model.params().get(&name).expect("listed parameter");
        if name.starts_with(&format!("{IMAGE_ENCODER}.")) {
            encoder.push((name, var));
        } else if name.starts_with(&format!("{MASK_DECODER}.")) {
            decoder.push((name, var));
        } else {
            return Err(Error::Config(format!("parameter {name} belongs to no optimizer group")));
        }
    }
    Ok(vec![
        ParamGroup {
            name: "encoder".into(),
            lr: lr_encoder,
            params: encoder,
        },
        ParamGroup {
            name: "decoder".into(),
            lr: lr_decoder,
            params: decoder,
        },
    ])
}

impl Adam {
    pub fn new(groups: Vec<ParamGroup>, cfg: AdamConfig) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            if !(g.lr >= 0.0 && g.lr.is_finite()) {
                return Err(Error::Config(format!("group {} has learning rate {}", g.name, g.lr)));
            }
            for (name, _) in &g.params {
                if !seen.insert(name.clone()) {
                    return Err(Error::Config(format!("parameter {name} appears in two groups")));
                }
            }
        }
        Ok(Self {
            groups,
            cfg,
            state: AdamState::default(),
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn set_lr(&mut self, group: usize, lr: f64) {
        self.groups[group].lr = lr;
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Restore moments saved from an optimizer over the same parameters.
    pub fn load_state(&mut self, state: AdamState) -> Result<()> {
        for g in &self.groups {
            for (name, var) in &g.params {
                for (which, table) in [("m", &state.m), ("v", &state.v)] {
                    if let Some(t) = table.get(name) {
                        if t.dims() != var.dims() {
                            return Err(Error::IncompatibleCheckpoint(vec![format!(
                                "optimizer {which} for {name} is {:?}, parameter is {:?}",
                                t.dims(),
                                var.dims()
                            )]));
                        }
                    }
                }
            }
        }
        self.state = state;
        Ok(())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for g in &self.groups {
            for (name, var) in &g.params {
                let Some(grad) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let grad = grad.detach();
                let grad = &grad;
                let m = match self.state.m.get(name) {
                    Some(m) => ((m * beta1)? + (grad * (1.0 - beta1))?)?,
                    None => (grad * (1.0 - beta1))?,
                };
                let v = match self.state.v.get(name) {
                    Some(v) => ((v * beta2)? + (grad.sqr()? * (1.0 - beta2))?)?,
                    None => (grad.sqr()? * (1.0 - beta2))?,
                };
                if g.lr > 0.0 {
                    let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
                    var.set(&(var.as_tensor() - (update * g.lr)?)?)?;
                }
                self.state.m.insert(name.clone(), m.detach());
                self.state.v.insert(name.clone(), v.detach());
            }
        }
        Ok(())
    }
}
