use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{model_groups, Adam, AdamConfig};
use super::loss::{segmentation_loss, LossWeights};
use crate::checkpoint::{read_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FILE};
use crate::config::{Architecture, BackboneVariant, ModelConfig};
use crate::data::{augment, SlicePair};
use crate::encoder::load_pretrained;
use crate::model::USam;
use crate::prompting::{sample_points, PromptSet};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Training run settings, read from TOML. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub steps: u64,
    pub seed: u64,
    /// Prompt points sampled per present class.
    pub k_points: usize,
    pub skips: u8,
    pub backbone: BackboneVariant,
    pub architecture: Architecture,
    /// Square model input side; pairs are resized from their stored size.
    pub input_size: usize,
    pub w_ce: f64,
    pub w_dice: f64,
    pub augment: bool,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            lr_encoder: 1e-3,
            lr_decoder: 1e-4,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Constant,
            steps: 1000,
            seed: 0,
            k_points: 3,
            skips: 4,
            backbone: BackboneVariant::VitBFull,
            architecture: Architecture::USam,
            input_size: 224,
            w_ce: 1.0,
            w_dice: 1.0,
            augment: true,
            checkpoint_every: 500,
            pretrained: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_decoder", self.lr_decoder)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.skips > 4 {
            return Err(Error::Config(format!("skips must be in 0..=4, got {}", self.skips)));
        }
        if self.input_size < 32 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 16 and at least 32, got {}",
                self.input_size
            )));
        }
        if !(self.w_ce >= 0.0 && self.w_dice >= 0.0 && self.w_ce + self.w_dice > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut cfg = match self.backbone {
            BackboneVariant::VitBFull => ModelConfig::vit_b(num_classes),
            BackboneVariant::Tiny => ModelConfig::tiny(num_classes),
        };
        cfg.skips = self.skips;
        cfg.architecture = self.architecture;
        cfg
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ce: self.w_ce,
            dice: self.w_dice,
        }
    }

    /// (encoder, decoder) learning rates before step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> (f64, f64) {
        let f = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if self.steps > 0 => 0.5 * (1.0 + (PI * step as f64 / self.steps as f64).cos()),
            LrSchedule::Cosine => 1.0,
        };
        (self.lr_encoder * f, self.lr_decoder * f)
    }

    /// Equality for resumption: the step budget may grow between runs.
    fn same_run(&self, other: &TrainConfig) -> bool {
        let mut a = self.clone();
        a.steps = other.steps;
        a.checkpoint_every = other.checkpoint_every;
        &a == other
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// (B, 3, S, S)
    pub images: Tensor,
    /// (B, S, S) class ids
    pub labels: Tensor,
    pub prompts: Vec<PromptSet>,
    pub ids: Vec<String>,
}

/// Resize (and optionally augment) pairs to `input_size` and sample prompts
/// from each resized label.
pub fn make_batch<R: rand::Rng + ?Sized>(
    model: &USam,
    pairs: &[&SlicePair],
    input_size: usize,
    k_points: usize,
    augment_pairs: bool,
    rng: &mut R,
) -> Result<Batch> {
    let n = model.config().num_classes;
    let mut views: Vec<SlicePair> = Vec::with_capacity(pairs.len());
    let mut prompts = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len() * input_size * input_size);
    for pair in pairs {
        let p = if augment_pairs { augment(pair, rng) } else { (*pair).clone() };
        let p = p.resized(input_size);
        prompts.push(sample_points(&p.label, k_points, n, rng));
        labels.extend(p.label.iter().map(|&v| v as u32));
        views.push(p);
    }
    let images = model.image_tensor(&views.iter().map(|p| p.image.view()).collect::<Vec<_>>())?;
    let labels = Tensor::from_vec(labels, (pairs.len(), input_size, input_size), model.device())?;
    Ok(Batch {
        images,
        labels,
        prompts,
        ids: pairs.iter().map(|p| p.source.stem()).collect(),
    })
}

/// One forward/backward pass and optimizer update. Returns the loss before
/// the update.
pub fn train_step(model: &USam, adam: &mut Adam, batch: &Batch, weights: LossWeights) -> Result<f64> {
    let non_finite = || Error::NonFiniteLoss {
        batch_ids: batch.ids.clone(),
    };
    let logits = model.forward(&batch.images, &batch.prompts)?;
    let parts = match segmentation_loss(&logits, &batch.labels, weights) {
        Err(Error::NonFinite { .. }) => return Err(non_finite()),
        other => other?,
    };
    let loss = parts.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !loss.is_finite() {
        return Err(non_finite());
    }
    let grads = parts.total.backward()?;
    adam.step(&grads)?;
    Ok(loss)
}

/// Indices visited at `step`: consecutive windows over a fresh seeded
/// permutation per epoch, so any step can be reproduced without replay.
fn batch_indices(len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let bs = batch_size.min(len);
    let start = step as usize * bs;
    let mut out = Vec::with_capacity(bs);
    let mut epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();
    for pos in start..start + bs {
        let e = pos / len;
        if e != epoch {
            epoch = e;
            order = (0..len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 << 40 | e as u64);
            order.shuffle(&mut rng);
        }
        out.push(order[pos % len]);
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: USam,
    pub optimizer: Adam,
    /// (step, loss) for every step run in this call, 1-based.
    pub losses: Vec<(u64, f64)>,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `checkpoint.safetensors` and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `out_dir` when one exists.
    pub resume: bool,
}

fn write_log(path: &Path, rows: &[(u64, f64, f64, f64)]) -> Result<()> {
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if !exists {
        w.write_record(["step", "loss", "lr_encoder", "lr_decoder"]).map_err(io)?;
    }
    for (step, loss, le, ld) in rows {
        w.serialize((step, loss, le, ld)).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn train(cfg: &TrainConfig, pairs: &[SlicePair], class_names: &[String], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let model_cfg = cfg.model_config(class_names.len());
    let device = Device::Cpu;
    let model = USam::new(model_cfg.clone(), cfg.seed, DType::F32, &device)?;
    let mut adam = Adam::new(
        model_groups(&model, cfg.lr_encoder, cfg.lr_decoder)?,
        AdamConfig::default(),
    )?;
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut start = 0;
    match &ckpt_path {
        Some(path) if opts.resume && path.exists() => {
            let ckpt = read_checkpoint(path)?;
            match &ckpt.meta.train {
                Some(prev) if prev.same_run(cfg) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{} was written by a different training config",
                        path.display()
                    )))
                }
            }
            if ckpt.meta.model != model_cfg || ckpt.meta.class_names != class_names {
                return Err(Error::Config("checkpoint model or classes differ from this run".into()));
            }
            ckpt.restore_into(&model)?;
            if let Some(state) = ckpt.optimizer {
                adam.load_state(state)?;
            }
            start = ckpt.meta.step;
        }
        _ => {
            if let Some(p) = &cfg.pretrained {
                let report = load_pretrained(p, &model)?;
                tracing::info!(loaded = report.loaded.len(), fresh = report.fresh.len(), "pretrained weights");
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_path = opts.out_dir.as_ref().map(|d| d.join(LOG_FILE));
    let save = |model: &USam, adam: &Adam, step: u64| -> Result<()> {
        if let Some(path) = &ckpt_path {
            let meta = CheckpointMeta::new(model.config(), class_names, step, Some(cfg.clone()));
            save_checkpoint(path, model, &meta, Some(adam.state()))?;
        }
        Ok(())
    };

    let mut losses = Vec::new();
    let mut pending = Vec::new();
    for step in start..cfg.steps {
        let (le, ld) = cfg.lr_at(step);
        adam.set_lr(0, le);
        adam.set_lr(1, ld);
        let idx = batch_indices(pairs.len(), cfg.batch_size, cfg.seed, step);
        let chosen: Vec<&SlicePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let batch = make_batch(&model, &chosen, cfg.input_size, cfg.k_points, cfg.augment, &mut rng)?;
        let loss = train_step(&model, &mut adam, &batch, cfg.loss_weights())?;
        tracing::debug!(step = step + 1, loss, "train step");
        losses.push((step + 1, loss));
        pending.push((step + 1, loss, le, ld));
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(p) = &log_path {
                write_log(p, &pending)?;
                pending.clear();
            }
            save(&model, &adam, step + 1)?;
        }
    }
    if let Some(p) = &log_path {
        write_log(p, &pending)?;
    }
    let step = cfg.steps.max(start);
    save(&model, &adam, step)?;
    Ok(TrainOutcome {
        model,
        optimizer: adam,
        losses,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_pairs, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps: 3,
            backbone: BackboneVariant::Tiny,
            input_size: 32,
            checkpoint_every: 2,
            lr_encoder: 1e-3,
            lr_decoder: 1e-3,
            ..Default::default()
        }
    }

    fn pairs() -> Vec<SlicePair> {
        let spec = SyntheticSpec {
            n_volumes: 1,
            slices_per_volume: 4,
            ..Default::default()
        };
        synthesize_pairs(&spec).unwrap()
    }

    fn names() -> Vec<String> {
        crate::data::synthetic_class_names()
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = TrainConfig::from_toml("steps = 10\nbackbone = \"tiny\"\nlr_schedule = \"cosine\"\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.batch_size, 24);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("lr_encoder = 0.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("input_size = 40").is_err());
        let (a, _) = cfg.lr_at(5);
        assert!((a - 0.5e-3).abs() < 1e-15);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(6, 2, 4, s)).collect();
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 8, 0, 0).len(), 3);
        assert_eq!(batch_indices(6, 2, 4, 1), batch_indices(6, 2, 4, 1));
    }

    #[test]
    fn zero_steps_saves_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 0, ..tiny_cfg() };
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: false,
        };
        let out = train(&cfg, &pairs(), &names(), &opts).unwrap();
        assert!(out.losses.is_empty());
        let fresh = USam::new(cfg.model_config(3), cfg.seed, DType::F32, &Device::Cpu).unwrap();
        let ckpt = read_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        for (name, t) in fresh.params().snapshot() {
            assert_eq!(
                t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                ckpt.params[&name].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn resume_continues_and_rejects_other_configs() {
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: true,
        };
        let data = pairs();
        let full = train(&tiny_cfg(), &data, &names(), &TrainOptions::default()).unwrap();
        let first = train(&TrainConfig { steps: 2, ..tiny_cfg() }, &data, &names(), &opts).unwrap();
        assert_eq!(first.step, 2);
        let second = train(&tiny_cfg(), &data, &names(), &opts).unwrap();
        assert_eq!(second.losses.len(), 1);
        assert_eq!(second.losses[0].0, 3);
        assert!((second.losses[0].1 - full.losses[2].1).abs() < 1e-5);
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.starts_with("step,loss,lr_encoder,lr_decoder"));
        let other = TrainConfig { seed: 9, ..tiny_cfg() };
        assert!(matches!(train(&other, &data, &names(), &opts), Err(Error::Config(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train(&tiny_cfg(), &[], &names(), &TrainOptions::default()),
            Err(Error::EmptyDataset(_))
        ));
    }
}
