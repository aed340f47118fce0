use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_model, AbsentPolicy, EvalProtocol, MetricsReport};
use crate::data::SlicePair;
use crate::training::{train, TrainConfig, TrainOptions};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Prompt points per class, used both in training and evaluation.
    Points,
    /// Number of skip connections.
    Skips,
}

impl AblationAxis {
    pub fn allowed(&self) -> &'static [u8] {
        match self {
            AblationAxis::Points => &[0, 1, 3, 5],
            AblationAxis::Skips => &[0, 1, 2, 3, 4],
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points" => Ok(AblationAxis::Points),
            "skips" => Ok(AblationAxis::Skips),
            other => Err(Error::Config(format!("unknown ablation axis `{other}` (points|skips)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub base: TrainConfig,
    pub train: &'a [SlicePair],
    pub test: &'a [SlicePair],
    pub class_names: &'a [String],
    pub seeds: Vec<u64>,
    pub policy: AbsentPolicy,
    /// When set, each run trains into `<out_dir>/<axis>-<value>-seed<seed>`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: u8,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub values: Vec<u8>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_dice(&self, value: u8, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.value == value && r.seed == seed)
            .and_then(|r| r.report.mean_dice)
    }

    /// Seeds on which `a` scores at least as well as `b`.
    pub fn wins(&self, a: u8, b: u8) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| matches!((self.mean_dice(a, s), self.mean_dice(b, s)), (Some(x), Some(y)) if x >= y))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let axis = match self.axis {
            AblationAxis::Points => "points",
            AblationAxis::Skips => "skips",
        };
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{axis},seed,mean_dice,mean_iou,final_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.value,
                r.seed,
                fmt(r.report.mean_dice),
                fmt(r.report.mean_iou),
                fmt(r.final_loss)
            ));
        }
        out
    }

    /// Mean Dice per value (rows) and seed (columns), plus the seed average.
    pub fn summary(&self) -> String {
        let mut out = String::from("| value |");
        for s in &self.seeds {
            out.push_str(&format!(" seed {s} |"));
        }
        out.push_str(" mean |\n|---|");
        out.push_str(&"---|".repeat(self.seeds.len() + 1));
        out.push('\n');
        for &v in &self.values {
            out.push_str(&format!("| {v} |"));
            let vals: Vec<f64> = self.seeds.iter().filter_map(|&s| self.mean_dice(v, s)).collect();
            for &s in &self.seeds {
                match self.mean_dice(v, s) {
                    Some(d) => out.push_str(&format!(" {:.2} |", 100.0 * d)),
                    None => out.push_str(" - |"),
                }
            }
            if vals.is_empty() {
                out.push_str(" - |\n");
            } else {
                out.push_str(&format!(" {:.2} |\n", 100.0 * vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        out
    }
}

/// One train + evaluate cycle per (value, seed).
pub fn ablation_run(setup: &AblationSetup, axis: AblationAxis, values: &[u8]) -> Result<AblationTable> {
    if values.is_empty() || setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one value and one seed".into()));
    }
    if let Some(v) = values.iter().find(|v| !axis.allowed().contains(v)) {
        return Err(Error::Config(format!("{axis:?} value {v} not in {:?}", axis.allowed())));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in &setup.seeds {
            let mut cfg = setup.base.clone();
            cfg.seed = seed;
            match axis {
                AblationAxis::Points => cfg.k_points = value as usize,
                AblationAxis::Skips => cfg.skips = value,
            }
            let opts = TrainOptions {
                out_dir: setup
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("{}-{value}-seed{seed}", axis_name(axis)))),
                resume: false,
            };
            let outcome = train(&cfg, setup.train, setup.class_names, &opts)?;
            let protocol = EvalProtocol {
                k_points: cfg.k_points,
                seed,
                input_size: cfg.input_size,
                policy: setup.policy,
            };
            let report = evaluate_model(&outcome.model, setup.test, setup.class_names, protocol)?;
            tracing::info!(?axis, value, seed, mean_dice = ?report.mean_dice, "ablation run");
            if let Some(dir) = &opts.out_dir {
                report.write(dir)?;
            }
            rows.push(AblationRow {
                value,
                seed,
                final_loss: outcome.losses.last().map(|&(_, l)| l),
                report,
            });
        }
    }
    Ok(AblationTable {
        axis,
        values: values.to_vec(),
        seeds: setup.seeds.clone(),
        rows,
    })
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Points => "points",
        AblationAxis::Skips => "skips",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneVariant;
    use crate::data::{synthesize_pairs, synthetic_class_names, SyntheticSpec};

    #[test]
    fn axis_parsing_and_bounds() {
        assert_eq!("points".parse::<AblationAxis>().unwrap(), AblationAxis::Points);
        assert!("depth".parse::<AblationAxis>().is_err());
        let data = synthesize_pairs(&SyntheticSpec {
            n_volumes: 1,
            slices_per_volume: 2,
            ..Default::default()
        })
        .unwrap();
        let names = synthetic_class_names();
        let setup = AblationSetup {
            base: TrainConfig {
                backbone: BackboneVariant::Tiny,
                input_size: 32,
                steps: 1,
                batch_size: 2,
                ..Default::default()
            },
            train: &data,
            test: &data,
            class_names: &names,
            seeds: vec![0],
            policy: AbsentPolicy::Exclude,
            out_dir: None,
        };
        assert!(ablation_run(&setup, AblationAxis::Points, &[2]).is_err());
        let table = ablation_run(&setup, AblationAxis::Points, &[0, 1, 3, 5]).unwrap();
        assert_eq!(table.rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0, 1, 3, 5]);
        assert_eq!(table.to_csv().lines().count(), 5);
        assert_eq!(table.summary().lines().count(), 6);
        assert!(table.wins(3, 3) == 1);
    }
}
