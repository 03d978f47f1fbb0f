//! `tfn`: phantom generation, training, evaluation, ablation, reconstruction
//! and deployment from one entry point.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{Overrides, BASE_WIDTH_KEY};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "tfn", version = manifest::VERSION, about = "Dual-encoder CT segmentation pipeline")]
struct Cli {
    /// JSON file of flat dotted keys, e.g. {"train.epochs": 20}
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed for the data, init, shuffle and dropout streams
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single dotted-key override; the value is read as JSON, else as a string
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Rebuild the model at this channel base width
    #[arg(long)]
    base_width: Option<usize>,
    /// Update only the edge stream and decoder
    #[arg(long)]
    freeze_encoders: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write labelled phantom volumes
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        volumes: Option<usize>,
        #[arg(long)]
        slices: Option<usize>,
        /// Slice height and width
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train from scratch
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, no_semantic_skips, no_local_skips, no_all_skips or no_edge_module
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Continue training a checkpoint on new data
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Score a float or quantized checkpoint
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score architecture variants
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out volumes; without it `data` is split by `data.split_ratio`
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Per-slice label, edge and Canny PNGs for one volume
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smoothed, fused 3D labels as NRRD
    Reconstruct {
        #[arg(long)]
        volume: PathBuf,
        /// One model for every class
        #[arg(long, conflicts_with_all = ["tumor_ckpt", "vessel_ckpt"])]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "vessel_ckpt")]
        tumor_ckpt: Option<PathBuf>,
        #[arg(long, requires = "tumor_ckpt")]
        vessel_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        gzip: bool,
    },
    /// Int8 weights with calibrated activation ranges
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Calibration volumes
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also compare float and int8 on these volumes
        #[arg(long)]
        test_data: Option<PathBuf>,
    },
    /// Train a smaller student against a teacher's softened outputs
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        kd_weight: Option<f64>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Metric deltas and speed of two models
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn push<T: serde::Serialize>(o: &mut Overrides, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.into(), serde_json::to_value(v).expect("flag serializes")));
    }
}

fn train_overrides(o: &mut Overrides, f: &TrainFlags) {
    push(o, "train.epochs", f.epochs);
    push(o, "train.lr0", f.lr);
    push(o, "train.batch_size", f.batch_size);
    push(o, "train.momentum", f.momentum);
    push(o, "train.weight_decay", f.weight_decay);
    push(o, BASE_WIDTH_KEY, f.base_width);
    if f.freeze_encoders {
        push(o, "train.freeze_encoders", Some(true));
    }
}

fn overrides(cli: &Cli) -> Result<Overrides, CliError> {
    let mut o = match &cli.config {
        Some(p) => config::read_config_file(p)?,
        None => Vec::new(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.into()));
        o.push((k.into(), v));
    }
    push(&mut o, "train.seed", cli.seed);
    push(&mut o, "phantom.seed", cli.seed);
    match &cli.cmd {
        Cmd::GenData { volumes, slices, size, .. } => {
            push(&mut o, "data.volumes", *volumes);
            push(&mut o, "phantom.n_slices", *slices);
            push(&mut o, "phantom.height", *size);
            push(&mut o, "phantom.width", *size);
        }
        Cmd::Train { flags, .. } | Cmd::Finetune { flags, .. } | Cmd::Ablate { flags, .. } => train_overrides(&mut o, flags),
        Cmd::Distill { flags, temperature, kd_weight, .. } => {
            if !config::is_set(&o, BASE_WIDTH_KEY) && flags.base_width.is_none() {
                o.insert(0, (BASE_WIDTH_KEY.into(), json!(commands::DEFAULT_STUDENT_WIDTH)));
            }
            train_overrides(&mut o, flags);
            push(&mut o, "distill.temperature", *temperature);
            push(&mut o, "distill.kd_weight", *kd_weight);
        }
        Cmd::Reconstruct { sigma, gzip, .. } => {
            push(&mut o, "reconstruct.sigma", *sigma);
            if *gzip {
                push(&mut o, "reconstruct.gzip", Some(true));
            }
        }
        Cmd::Evaluate { .. } | Cmd::Segment { .. } | Cmd::Quantize { .. } | Cmd::Compare { .. } => {}
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let o = overrides(&cli)?;
    let cfg = config::resolve(&o)?;
    let ctx = commands::Ctx { cfg, overrides: o };
    match cli.cmd {
        Cmd::GenData { out, .. } => commands::gen_data(&ctx, &out),
        Cmd::Train { data, out, variant, .. } => commands::train(&ctx, &data, &out, variant.as_deref()),
        Cmd::Finetune { ckpt, data, out, .. } => commands::finetune(&ctx, &ckpt, &data, &out),
        Cmd::Evaluate { ckpt, data, out } => commands::evaluate(&ctx, &ckpt, &data, &out),
        Cmd::Ablate { data, test_data, out, variants, seeds, .. } => {
            commands::ablate(&ctx, &data, test_data.as_deref(), &out, &variants, seeds)
        }
        Cmd::Segment { ckpt, volume, out } => commands::segment(&ctx, &ckpt, &volume, &out),
        Cmd::Reconstruct { volume, ckpt, tumor_ckpt, vessel_ckpt, out, .. } => {
            let models = match (ckpt, tumor_ckpt, vessel_ckpt) {
                (Some(c), None, None) => commands::Models::Single(c),
                (None, Some(t), Some(v)) => commands::Models::Pair(t, v),
                _ => return Err(CliError::validation("give --ckpt, or both --tumor-ckpt and --vessel-ckpt")),
            };
            commands::reconstruct(&ctx, &volume, models, &out)
        }
        Cmd::Quantize { ckpt, data, out, test_data } => commands::quantize(&ctx, &ckpt, &data, &out, test_data.as_deref()),
        Cmd::Distill { teacher, data, out, .. } => commands::distill(&ctx, &teacher, &data, &out),
        Cmd::Compare { a, b, data, out } => commands::compare(&ctx, &a, &b, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tfn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
