//! Import of published SAM ViT-B weights from a safetensors file.
//!
//! Transformer blocks, neck, prompt encoder and two-way transformer keep their
//! published names. The CNN pyramid and the upsampling blocks have no
//! counterpart and stay freshly initialized. SAM carries four mask tokens and
//! four output MLPs; the first N are used. Class `c` takes the point
//! embedding `c`, so class 1 starts from SAM's positive-click embedding.

use std::collections::HashMap;
use std::path::Path;

use candle::{Device, Tensor};
use serde::Serialize;

use crate::model::USam;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
    /// Checkpoint entries with no counterpart in the model.
    pub ignored: Vec<String>,
}

const MASK_TOKENS: &str = "mask_decoder.mask_tokens.weight";

fn has_no_counterpart(name: &str) -> bool {
    name.starts_with("image_encoder.cnn.")
        || ["up4.", "up3.", "up2.", "up1."]
            .iter()
            .any(|p| name.starts_with(&format!("mask_decoder.{p}")))
}

/// Parameters that may be absent from the checkpoint because the model has
/// more classes than SAM has point embeddings or output MLPs.
fn optional_extra(name: &str) -> bool {
    let index_after = |prefix: &str| {
        name.strip_prefix(prefix)
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
    };
    matches!(index_after("prompt_encoder.point_embeddings."), Some(i) if i >= 4)
        || matches!(index_after("mask_decoder.output_hypernetworks_mlps."), Some(i) if i >= 4)
}

pub fn load_pretrained(path: &Path, model: &USam) -> Result<LoadReport> {
    let tensors = candle::safetensors::load(path, &Device::Cpu)?;
    load_pretrained_tensors(&tensors, model)
}

/// Copy matching tensors into `model`. Nothing is written unless every
/// expected parameter is present with a compatible shape.
pub fn load_pretrained_tensors(tensors: &HashMap<String, Tensor>, model: &USam) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut problems = Vec::new();
    let mut plan = Vec::new();
    let mut used = std::collections::HashSet::new();
    for (name, var) in model.params().vars() {
        if has_no_counterpart(&name) {
            report.fresh.push(name);
            continue;
        }
        let want = var.dims().to_vec();
        let Some(src) = tensors.get(&name) else {
            if optional_extra(&name) {
                report.fresh.push(name);
            } else {
                problems.push(format!("missing: {name}"));
            }
            continue;
        };
        used.insert(name.clone());
        let src = if name == MASK_TOKENS {
            match src.dims() {
                [rows, d] if *rows >= want[0] && *d == want[1] => src.narrow(0, 0, want[0])?,
                other => {
                    problems.push(format!("shape: {name} is {other:?}, model needs {want:?}"));
                    continue;
                }
            }
        } else if src.dims() != want.as_slice() {
            problems.push(format!("shape: {name} is {:?}, model needs {want:?}", src.dims()));
            continue;
        } else {
            src.clone()
        };
        plan.push((name, src));
    }
    if !problems.is_empty() {
        problems.sort();
        return Err(Error::IncompatibleCheckpoint(problems));
    }
    let device = model.device();
    for (name, src) in plan {
        let value = src.to_device(device)?.to_dtype(model.dtype())?;
        model.params().assign(&name, &value)?;
        report.loaded.push(name);
    }
    report.ignored = tensors.keys().filter(|k| !used.contains(*k)).cloned().collect();
    report.ignored.sort();
    report.loaded.sort();
    report.fresh.sort();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use candle::DType;

    /// A checkpoint laid out like SAM's, built from another model's weights.
    fn sam_like(donor: &USam) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, t) in donor.params().snapshot() {
            if has_no_counterpart(&name) {
                continue;
            }
            let t = if name == MASK_TOKENS {
                let extra = Tensor::ones((4 - t.dim(0).unwrap(), t.dim(1).unwrap()), t.dtype(), t.device()).unwrap();
                Tensor::cat(&[&t, &extra], 0).unwrap()
            } else {
                t
            };
            out.insert(name, t);
        }
        let d = donor.config().latent_dim();
        let z = |shape: &[usize]| Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap();
        out.insert("image_encoder.patch_embed.proj.weight".into(), z(&[192, 3, 16, 16]));
        out.insert("mask_decoder.iou_token.weight".into(), z(&[1, d]));
        out.insert("prompt_encoder.no_mask_embed.weight".into(), z(&[1, d]));
        out.insert("prompt_encoder.point_embeddings.3.weight".into(), z(&[1, d]));
        out.insert("mask_decoder.output_hypernetworks_mlps.3.layers.0.weight".into(), z(&[d, d]));
        out
    }

    #[test]
    fn loads_matching_names_and_reports_fresh() {
        let donor = USam::new(ModelConfig::tiny(3), 1, DType::F32, &Device::Cpu).unwrap();
        let model = USam::new(ModelConfig::tiny(3), 2, DType::F32, &Device::Cpu).unwrap();
        let ckpt = sam_like(&donor);
        let report = load_pretrained_tensors(&ckpt, &model).unwrap();
        assert!(report.fresh.iter().any(|n| n.starts_with("mask_decoder.up1.")));
        let all: Vec<String> = model.params().names();
        let ups: Vec<&String> = all.iter().filter(|n| n.starts_with("mask_decoder.up")).collect();
        assert!(!ups.is_empty());
        for n in ups {
            assert!(report.fresh.contains(n), "{n} should be fresh");
        }
        assert_eq!(report.loaded.len() + report.fresh.len(), all.len());
        assert!(report.ignored.contains(&"mask_decoder.iou_token.weight".to_string()));
        let got = model.params().get(MASK_TOKENS).unwrap().to_vec2::<f32>().unwrap();
        let want = donor.params().get(MASK_TOKENS).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(got, want);
        let blk = "image_encoder.blocks.0.attn.qkv.weight";
        assert_eq!(
            model.params().get(blk).unwrap().to_vec2::<f32>().unwrap(),
            donor.params().get(blk).unwrap().to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn mismatch_lists_names_and_leaves_model_untouched() {
        let donor = USam::new(ModelConfig::tiny(3), 1, DType::F32, &Device::Cpu).unwrap();
        let model = USam::new(ModelConfig::tiny(3), 2, DType::F32, &Device::Cpu).unwrap();
        let before = model.params().snapshot();
        let mut ckpt = sam_like(&donor);
        ckpt.remove("image_encoder.neck.0.weight");
        ckpt.insert(
            "image_encoder.blocks.1.norm1.weight".into(),
            Tensor::zeros(768, DType::F32, &Device::Cpu).unwrap(),
        );
        match load_pretrained_tensors(&ckpt, &model) {
            Err(Error::IncompatibleCheckpoint(list)) => {
                assert_eq!(list.len(), 2);
                assert!(list.iter().any(|l| l.contains("image_encoder.neck.0.weight")));
                assert!(list.iter().any(|l| l.contains("blocks.1.norm1.weight")));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
        let after = model.params().snapshot();
        for (name, t) in before {
            let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = after[&name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{name} changed");
        }
    }

    #[test]
    fn extra_classes_beyond_sam_stay_fresh() {
        let donor = USam::new(ModelConfig::tiny(3), 1, DType::F32, &Device::Cpu).unwrap();
        let model = USam::new(ModelConfig::tiny(6), 2, DType::F32, &Device::Cpu).unwrap();
        let mut ckpt = sam_like(&donor);
        // SAM holds four tokens and MLPs 0..3
        let d = donor.config().latent_dim();
        ckpt.insert(MASK_TOKENS.into(), Tensor::zeros((4, d), DType::F32, &Device::Cpu).unwrap());
        let err = load_pretrained_tensors(&ckpt, &model).unwrap_err();
        let Error::IncompatibleCheckpoint(list) = err else { panic!() };
        assert!(list.iter().any(|l| l.contains(MASK_TOKENS)));
        assert!(list.iter().all(|l| !l.contains("output_hypernetworks_mlps.4")));
    }
}
