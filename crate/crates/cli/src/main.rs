//! `usam` command-line tool.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle::{DType, Device};
use clap::{Parser, Subcommand};
use usam::checkpoint::load_model;
use usam::data::{
    build_slice_pairs, generate_synthetic_dataset, load_dataset, load_volume_dir, write_dataset, Split, SyntheticSpec,
    Window,
};
use usam::evaluation::{ablation_run, evaluate_model, AblationAxis, AblationSetup, AbsentPolicy, EvalProtocol};
use usam::training::{train, TrainConfig, TrainOptions};
use usam_serve::{AppState, LoadedModel};

#[derive(Parser)]
#[command(name = "usam", version, about = "U-shaped promptable CT segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build dataset directories.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model on a dataset directory.
    Train {
        /// TOML training config; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.safetensors`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        points: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Count a class absent from both prediction and label as Dice 1.
        #[arg(long)]
        count_absent: bool,
        /// Directory for metrics.json and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per axis value and seed.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u8>,
        /// Base TOML training config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long, env = "USAM_CKPT")]
        ckpt: Option<PathBuf>,
        #[arg(long, env = "USAM_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "USAM_HOST", default_value = "127.0.0.1")]
        host: IpAddr,
        /// Allowed browser origin; any origin when unset.
        #[arg(long, env = "USAM_CORS_ORIGIN")]
        cors_origin: Option<String>,
        /// Dataset directory whose pairs can be requested by id.
        #[arg(long, env = "USAM_DATA")]
        data: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a synthetic dataset from a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack `<pid>.npy` HU volumes and label volumes into slice pairs.
    Pack {
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// HU window as center:width.
        #[arg(long, default_value = "40:400")]
        window: Window,
        #[arg(long, value_delimiter = ',', default_value = "background,rectum,tumor")]
        classes: Vec<String>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    Ok(TrainConfig::from_toml(&read_text(path)?)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Synth { spec, out }) => {
            let spec = SyntheticSpec::from_toml(&read_text(&spec)?)?;
            let manifest = generate_synthetic_dataset(&spec, &out)?;
            println!("wrote {} pairs to {}", manifest.pairs.len(), out.display());
        }
        Command::Dataset(DatasetCommand::Pack {
            volumes,
            labels,
            out,
            window,
            classes,
            split,
            seed,
        }) => {
            let mut pairs = Vec::new();
            for (vol, lab) in load_volume_dir(&volumes, &labels, &classes)? {
                pairs.extend(build_slice_pairs(&vol, &lab, window)?);
            }
            if pairs.is_empty() {
                bail!("no slice in {} contains a labelled structure", volumes.display());
            }
            let manifest = write_dataset(&out, &pairs, split, &classes, seed)?;
            println!("wrote {} pairs to {}", manifest.pairs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = read_train_config(&config)?;
            let (manifest, pairs) = load_dataset(&data)?;
            let outcome = train(
                &cfg,
                &pairs,
                &manifest.class_names,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    resume,
                },
            )?;
            let last = outcome.losses.last().map(|l| l.1);
            println!(
                "trained to step {} (final loss {}); checkpoint in {}",
                outcome.step,
                last.map_or("n/a".into(), |l| format!("{l:.5}")),
                out.display()
            );
        }
        Command::Evaluate {
            ckpt,
            data,
            points,
            seed,
            count_absent,
            out,
        } => {
            let (model, meta) = load_model(&ckpt, DType::F32, &Device::Cpu)?;
            let (manifest, pairs) = load_dataset(&data)?;
            if manifest.class_names != meta.class_names {
                bail!(
                    "dataset classes {:?} differ from checkpoint classes {:?}",
                    manifest.class_names,
                    meta.class_names
                );
            }
            let protocol = EvalProtocol {
                k_points: points,
                seed,
                input_size: meta.input_size(),
                policy: if count_absent {
                    AbsentPolicy::CountAsOne
                } else {
                    AbsentPolicy::Exclude
                },
            };
            let report = evaluate_model(&model, &pairs, &meta.class_names, protocol)?;
            if let Some(dir) = out {
                report.write(&dir)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            axis,
            values,
            config,
            train,
            test,
            seeds,
            out,
        } => {
            let base = read_train_config(&config)?;
            let (train_manifest, train_pairs) = load_dataset(&train)?;
            let (test_manifest, test_pairs) = load_dataset(&test)?;
            usam::data::check_disjoint(&train_manifest, &test_manifest)?;
            if train_manifest.class_names != test_manifest.class_names {
                bail!("train and test datasets use different class names");
            }
            let setup = AblationSetup {
                base,
                train: &train_pairs,
                test: &test_pairs,
                class_names: &train_manifest.class_names,
                seeds,
                policy: AbsentPolicy::Exclude,
                out_dir: Some(out.clone()),
            };
            std::fs::create_dir_all(&out)?;
            let table = ablation_run(&setup, axis, &values)?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
            println!("{}", table.summary());
        }
        Command::Serve {
            ckpt,
            port,
            host,
            cors_origin,
            data,
        } => {
            let model = ckpt
                .map(|p| LoadedModel::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let mut state = AppState::new(model);
            if let Some(dir) = data {
                state = state.with_dataset(&dir)?;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(usam_serve::serve(
                SocketAddr::new(host, port),
                Arc::new(state),
                cors_origin.as_deref(),
            ))?;
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
