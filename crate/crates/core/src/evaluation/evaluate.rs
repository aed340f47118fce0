use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::OverlapCounts;
use crate::data::{write_atomic, SlicePair};
use crate::decoder::predict_mask;
use crate::model::USam;
use crate::prompting::{sample_points, PromptSet};
use crate::{Error, Result};

pub const REPORT_JSON: &str = "metrics.json";
pub const REPORT_CSV: &str = "metrics.csv";
const EVAL_BATCH: usize = 8;

/// How a pair counts toward a class average when the class is absent from
/// both prediction and ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentPolicy {
    #[default]
    Exclude,
    CountAsOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub k_points: usize,
    pub seed: u64,
    /// Square side the pairs are resized to before prediction and scoring.
    pub input_size: usize,
    pub policy: AbsentPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub name: String,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    /// Pairs that contributed to the averages.
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Foreground classes 1..N.
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: Option<f64>,
    pub mean_iou: Option<f64>,
    pub pair_count: usize,
    pub protocol: EvalProtocol,
    pub config_tag: Option<String>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("class_id,class_name,dice,iou,pairs\n");
        for c in &self.classes {
            out.push_str(&format!("{},{},{},{},{}\n", c.class_id, c.name, fmt(c.dice), fmt(c.iou), c.pairs));
        }
        out.push_str(&format!(",mean,{},{},{}\n", fmt(self.mean_dice), fmt(self.mean_iou), self.pair_count));
        out
    }

    /// Write `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(REPORT_JSON), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&dir.join(REPORT_CSV), self.to_csv().as_bytes())
    }
}

/// Prompts for pair `index`, independent of batching and evaluation order.
pub fn eval_prompts(label: &Array2<u8>, k_points: usize, num_classes: usize, seed: u64, index: usize) -> PromptSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_points(label, k_points, num_classes, &mut rng)
}

/// Score a segmenter over `pairs`. The segmenter receives pairs already
/// resized to the protocol's input size, with their prompts, in batches.
pub fn evaluate_with<F>(
    pairs: &[SlicePair],
    class_names: &[String],
    protocol: EvalProtocol,
    mut segment: F,
) -> Result<MetricsReport>
where
    F: FnMut(&[SlicePair], &[PromptSet]) -> Result<Vec<Array2<u8>>>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no evaluation pairs".into()));
    }
    let n = class_names.len();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n];
    for (chunk_index, chunk) in pairs.chunks(EVAL_BATCH).enumerate() {
        let resized: Vec<SlicePair> = chunk.iter().map(|p| p.resized(protocol.input_size)).collect();
        let prompts: Vec<PromptSet> = resized
            .iter()
            .enumerate()
            .map(|(i, p)| eval_prompts(&p.label, protocol.k_points, n, protocol.seed, chunk_index * EVAL_BATCH + i))
            .collect();
        let preds = segment(&resized, &prompts)?;
        if preds.len() != resized.len() {
            return Err(Error::Shape(format!("{} predictions for {} pairs", preds.len(), resized.len())));
        }
        for (pred, pair) in preds.iter().zip(&resized) {
            for (c, slot) in sums.iter_mut().enumerate().skip(1) {
                let counts = OverlapCounts::of(pred, &pair.label, c as u8)?;
                match (counts.dice(), counts.iou(), protocol.policy) {
                    (Some(d), Some(i), _) => {
                        slot.0 += d;
                        slot.1 += i;
                        slot.2 += 1;
                    }
                    (_, _, AbsentPolicy::CountAsOne) => {
                        slot.0 += 1.0;
                        slot.1 += 1.0;
                        slot.2 += 1;
                    }
                    _ => {}
                }
            }
        }
    }
    let classes: Vec<ClassMetrics> = (1..n)
        .map(|c| {
            let (d, i, k) = sums[c];
            ClassMetrics {
                class_id: c as u8,
                name: class_names[c].clone(),
                dice: (k > 0).then(|| d / k as f64),
                iou: (k > 0).then(|| i / k as f64),
                pairs: k,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
        let vals: Vec<f64> = classes.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(MetricsReport {
        mean_dice: mean(|c| c.dice),
        mean_iou: mean(|c| c.iou),
        classes,
        pair_count: pairs.len(),
        protocol,
        config_tag: None,
    })
}

pub fn evaluate_model(
    model: &USam,
    pairs: &[SlicePair],
    class_names: &[String],
    protocol: EvalProtocol,
) -> Result<MetricsReport> {
    if class_names.len() != model.config().num_classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.config().num_classes
        )));
    }
    let mut report = evaluate_with(pairs, class_names, protocol, |batch, prompts| {
        let images = model.image_tensor(&batch.iter().map(|p| p.image.view()).collect::<Vec<_>>())?;
        let logits = model.forward(&images, prompts)?;
        (0..batch.len()).map(|i| predict_mask(&logits.get(i)?)).collect()
    })?;
    report.config_tag = Some(model.config().tag());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_pairs, synthetic_class_names, SyntheticSpec};

    fn pairs() -> Vec<SlicePair> {
        synthesize_pairs(&SyntheticSpec {
            n_volumes: 2,
            slices_per_volume: 5,
            tumor_prob: 0.5,
            ..Default::default()
        })
        .unwrap()
    }

    fn protocol() -> EvalProtocol {
        EvalProtocol {
            k_points: 3,
            seed: 7,
            input_size: 64,
            policy: AbsentPolicy::Exclude,
        }
    }

    #[test]
    fn oracle_scores_one_and_background_scores_zero() {
        let data = pairs();
        let names = synthetic_class_names();
        let perfect = evaluate_with(&data, &names, protocol(), |b, _| Ok(b.iter().map(|p| p.label.clone()).collect())).unwrap();
        assert_eq!(perfect.mean_dice, Some(1.0));
        assert_eq!(perfect.mean_iou, Some(1.0));
        let blank =
            evaluate_with(&data, &names, protocol(), |b, _| Ok(b.iter().map(|p| Array2::zeros(p.label.dim())).collect()))
                .unwrap();
        for c in &blank.classes {
            if c.pairs > 0 {
                assert_eq!(c.dice, Some(0.0));
            }
        }
        assert_eq!(blank.pair_count, data.len());
    }

    #[test]
    fn count_as_one_includes_absent_pairs() {
        let data = pairs();
        let names = synthetic_class_names();
        let mut p = protocol();
        p.policy = AbsentPolicy::CountAsOne;
        let r = evaluate_with(&data, &names, p, |b, _| Ok(b.iter().map(|p| p.label.clone()).collect())).unwrap();
        assert!(r.classes.iter().all(|c| c.pairs == data.len()));
    }

    #[test]
    fn prompts_are_order_independent_and_reports_persist() {
        let data = pairs();
        let names = synthetic_class_names();
        let mut seen = Vec::new();
        evaluate_with(&data, &names, protocol(), |b, prompts| {
            seen.extend(prompts.iter().cloned());
            for (p, pr) in b.iter().zip(prompts) {
                for q in &pr.points {
                    assert_eq!(p.label[[q.y, q.x]], q.class_id);
                }
            }
            Ok(b.iter().map(|p| p.label.clone()).collect())
        })
        .unwrap();
        let again = eval_prompts(&data[9].resized(64).label, 3, 3, 7, 9);
        assert_eq!(seen[9], again);
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate_with(&data, &names, protocol(), |b, _| Ok(b.iter().map(|p| p.label.clone()).collect())).unwrap();
        r.write(dir.path()).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        let names = synthetic_class_names();
        assert!(matches!(
            evaluate_with(&[], &names, protocol(), |_, _| Ok(vec![])),
            Err(Error::EmptyDataset(_))
        ));
        assert!(evaluate_with(&pairs(), &names, protocol(), |_, _| Ok(vec![])).is_err());
    }

    #[test]
    fn model_evaluation_is_deterministic() {
        let model = USam::new(crate::ModelConfig::tiny(3), 0, candle::DType::F32, &candle::Device::Cpu).unwrap();
        let data = pairs();
        let names = synthetic_class_names();
        let mut p = protocol();
        p.input_size = 32;
        let a = evaluate_model(&model, &data, &names, p).unwrap();
        let b = evaluate_model(&model, &data, &names, p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config_tag.as_deref(), Some("tiny-usam-n3-skips4"));
    }
}
