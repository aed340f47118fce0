//! Checkpoints: one safetensors file holding every model parameter, optional
//! optimizer moments under `optim.m.<name>` / `optim.v.<name>`, and a JSON
//! metadata record stored in the safetensors header under the key `usam`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::write_atomic;
use crate::model::USam;
use crate::training::{AdamState, TrainConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const FORMAT_VERSION: u32 = 1;
/// Model input side assumed when a checkpoint carries no training config.
pub const DEFAULT_INPUT_SIZE: usize = 224;
const META_KEY: &str = "usam";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub step: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub config_tag: String,
}

impl CheckpointMeta {
    pub fn new(model: &ModelConfig, class_names: &[String], step: u64, train: Option<TrainConfig>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.clone(),
            class_names: class_names.to_vec(),
            step,
            train,
            config_tag: model.tag(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported",
                self.format_version
            )));
        }
        self.model.validate()?;
        if self.class_names.len() != self.model.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.model.num_classes
            )));
        }
        if self.config_tag != self.model.tag() {
            return Err(Error::Checkpoint(format!(
                "config tag {} does not describe the stored model",
                self.config_tag
            )));
        }
        Ok(())
    }

    /// Square side the model was trained at.
    pub fn input_size(&self) -> usize {
        self.train.as_ref().map_or(DEFAULT_INPUT_SIZE, |t| t.input_size)
    }
}

pub fn save_checkpoint(path: &Path, model: &USam, meta: &CheckpointMeta, optimizer: Option<&AdamState>) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model.params().snapshot();
    if let Some(state) = optimizer {
        for (name, t) in &state.m {
            tensors.insert(format!("{OPTIM_M}{name}"), t.clone());
        }
        for (name, t) in &state.v {
            tensors.insert(format!("{OPTIM_V}{name}"), t.clone());
        }
    }
    let tensors: Vec<(String, Tensor)> = tensors
        .into_iter()
        .map(|(k, t)| Ok((k, t.to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<_>>()?;
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: HashMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
}

/// Parse and validate a checkpoint held in memory.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("missing `{META_KEY}` metadata record")))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    meta.validate()?;
    let all = candle::safetensors::load_buffer(bytes, &Device::Cpu)?;
    let mut params = HashMap::new();
    let mut state = AdamState {
        step: meta.step,
        ..Default::default()
    };
    for (name, t) in all {
        if let Some(n) = name.strip_prefix(OPTIM_M) {
            state.m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(OPTIM_V) {
            state.v.insert(n.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    let optimizer = (!state.m.is_empty() || !state.v.is_empty()).then_some(state);
    Ok(Checkpoint { meta, params, optimizer })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

impl Checkpoint {
    /// Copy the stored parameters into `model`; every parameter must be
    /// present with the right shape. Nothing is written on failure.
    pub fn restore_into(&self, model: &USam) -> Result<()> {
        let mut problems = Vec::new();
        let vars = model.params().vars();
        for (name, var) in &vars {
            match self.params.get(name) {
                None => problems.push(format!("missing: {name}")),
                Some(t) if t.dims() != var.dims() => {
                    problems.push(format!("shape: {name} is {:?}, model needs {:?}", t.dims(), var.dims()))
                }
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if model.params().get(name).is_none() {
                problems.push(format!("unexpected: {name}"));
            }
        }
        if !problems.is_empty() {
            problems.sort();
            return Err(Error::IncompatibleCheckpoint(problems));
        }
        for (name, _) in vars {
            let t = self.params[&name].to_device(model.device())?.to_dtype(model.dtype())?;
            model.params().assign(&name, &t)?;
        }
        Ok(())
    }

    pub fn build_model(&self, dtype: DType, device: &Device) -> Result<USam> {
        let model = USam::new(self.meta.model.clone(), 0, dtype, device)?;
        self.restore_into(&model)?;
        Ok(model)
    }
}

pub fn load_model(path: &Path, dtype: DType, device: &Device) -> Result<(USam, CheckpointMeta)> {
    let ckpt = read_checkpoint(path)?;
    let model = ckpt.build_model(dtype, device)?;
    Ok((model, ckpt.meta))
}
