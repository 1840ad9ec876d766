//! `forec`: data generation, training, evaluation, latent analysis and
//! gradient checking.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
//! 3 numerical failure (NaN/Inf).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forec_core::checkpoint::Checkpoint;
use forec_core::config::{Mode, TrainConfig};
use forec_core::dataset::Dataset;
use forec_core::gradcheck::{self, CheckedOp};
use forec_core::latent;
use forec_core::{gemm, ops, pnm, trainer, Error};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "forec", version, about = "Semi-supervised segmentation lab with foreground-only reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training images.
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Validation images.
        #[arg(long, default_value_t = 64)]
        val: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        /// Object classes (background excluded).
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a student/teacher pair.
    Train {
        /// JSON config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (overrides data.path).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Any config override as dotted.key=JSON.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print machine-readable JSON.
        #[arg(long)]
        json: bool,
    },
    /// Export and rank the reconstruction decoder's latent images.
    Latent {
        #[arg(long)]
        ckpt: PathBuf,
        /// PPM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Export only the best K slices.
        #[arg(long)]
        topk: Option<usize>,
        /// PGM label map for the foreground mask; defaults to the model's own
        /// segmentation.
        #[arg(long)]
        label: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        /// Restrict to one op.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
}

enum Failure {
    Check(String),
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CliResult = Result<(), Failure>;

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    Ok((
        h.parse().map_err(|_| format!("bad height `{h}`"))?,
        w.parse().map_err(|_| format!("bad width `{w}`"))?,
    ))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn gen_data(out: &Path, count: usize, val: usize, (h, w): (usize, usize), classes: usize, seed: u64, force: bool) -> CliResult {
    if classes == 0 {
        return Err(Failure::Usage("--classes must be at least 1".into()));
    }
    if out.exists() && !force {
        return Err(Failure::Usage(format!("{} already exists (use --force)", out.display())));
    }
    let data = Dataset::generate(count, val, h, w, classes, seed)?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Failure::Usage(format!("{}: {e}", parent.display())))?;
    let tmp = tempfile::Builder::new()
        .prefix(".forec-gen-")
        .tempdir_in(&parent)
        .map_err(|e| Failure::Usage(format!("{}: {e}", parent.display())))?;
    data.save(tmp.path())?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    }
    fs::rename(tmp.keep(), out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;

    let fg: usize = data
        .samples
        .iter()
        .map(|s| s.label.iter().filter(|&&l| l != 0).count())
        .sum();
    print_json(&json!({
        "out": out,
        "train": count,
        "val": val,
        "height": h,
        "width": w,
        "classes": classes,
        "seed": seed,
        "mean_foreground": fg as f64 / (data.samples.len() * h * w).max(1) as f64,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    out: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    data: Option<PathBuf>,
    epochs: Option<usize>,
    sets: &[String],
) -> CliResult {
    let mut cfg = match &config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        cfg.set("train.mode", json!(m.name()))?;
    }
    if let Some(s) = seed {
        cfg.set("train.seed", json!(s))?;
    }
    if let Some(d) = data {
        cfg.set("data.path", json!(d))?;
    }
    if let Some(e) = epochs {
        cfg.set("train.epochs", json!(e))?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        cfg.set(k, value)?;
    }
    let outcome = trainer::run(&cfg, out, |row| {
        eprintln!(
            "epoch {:>3} step {:>5} lr {:.3e} total {} val_miou {:.4}",
            row.epoch,
            row.step,
            row.lr,
            row.total.map_or("-".into(), |t| format!("{t:.4}")),
            row.val_miou
        );
    })?;
    print_json(&json!({
        "out": out,
        "mode": cfg.train.mode.name(),
        "seed": cfg.train.seed,
        "steps": outcome.checkpoint.step,
        "val_miou": outcome.final_miou(),
        "per_class_iou": outcome.final_report.per_class,
    }));
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, as_json: bool) -> CliResult {
    let net = Checkpoint::load(ckpt)?.eval_network()?;
    let data = Dataset::load(data)?;
    let classes = net.config().num_classes;
    if classes != data.meta.num_classes() {
        return Err(Failure::Usage(format!(
            "checkpoint predicts {classes} classes, dataset has {}",
            data.meta.num_classes()
        )));
    }
    let report = trainer::evaluate(&net, &data, &data.meta.val_ids)?;
    if as_json {
        print_json(&json!({
            "miou": report.mean,
            "pixel_accuracy": report.pixel_accuracy,
            "per_class_iou": report.per_class,
            "images": data.meta.val_ids.len(),
        }));
    } else {
        for (c, iou) in report.per_class.iter().enumerate() {
            match iou {
                Some(v) => println!("class {c}: IoU {v:.4}"),
                None => println!("class {c}: absent"),
            }
        }
        println!("mIoU {:.4}", report.mean);
    }
    Ok(())
}

fn latent_cmd(ckpt: &Path, image: &Path, out: &Path, topk: Option<usize>, label: Option<PathBuf>) -> CliResult {
    let ck = Checkpoint::load(ckpt)?;
    let student = ck.student()?;
    let img = pnm::read_ppm(image)?;
    let lat = latent::extract_latents(&student, &img)?;
    let (h, w) = (lat.height, lat.width);
    let objects: Vec<u8> = (1..student.config().num_classes as u8).collect();
    let mask: Vec<u8> = match label {
        Some(p) => {
            let (lw, lh, bytes) = pnm::read_pgm(&p)?;
            if (lw, lh) != (w, h) {
                return Err(Failure::Usage(format!("label is {lw}x{lh}, image is {w}x{h}")));
            }
            bytes.iter().map(|l| objects.contains(l) as u8).collect()
        }
        None => {
            let x = img.clone().reshape([1, 3, h, w])?;
            let pred = ops::argmax_channels(&student.forward_seg(&x)?)?;
            pred.iter().map(|&p| (p != 0) as u8).collect()
        }
    };
    let mut ranking = latent::rank_by_foreground(&lat.raw, &mask)?;
    if let Some(k) = topk {
        ranking.truncate(k);
    }
    let manifest = latent::export_grid(&lat, &ranking, out)?;
    print_json(&json!({
        "out": out,
        "slices": manifest.slices.len(),
        "mean_top3": manifest.mean_top3,
        "best": manifest.slices.first().map(|s| s.index),
    }));
    Ok(())
}

fn grad_check(op: Option<String>, trials: usize, seed: u64, eps: f64) -> CliResult {
    let ops = match op {
        Some(name) => vec![CheckedOp::from_name(&name).ok_or_else(|| {
            let known: Vec<&str> = CheckedOp::ALL.iter().map(|o| o.name()).collect();
            Failure::Usage(format!("unknown op `{name}` (known: {})", known.join(", ")))
        })?],
        None => CheckedOp::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for (i, op) in ops.into_iter().enumerate() {
        let r = gradcheck::check_op(op, trials, seed.wrapping_add(i as u64), eps)?;
        println!(
            "{:<18} trials {:>3}  max rel err {:.3e}  {}",
            op.name(),
            r.trials,
            r.max_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(format!("{} ({})", op.name(), r.worst_case));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch: {}", failed.join("; "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("FOREC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    gemm::set_threads(threads);
    let result = match cli.command {
        Command::GenData {
            out,
            count,
            val,
            size,
            classes,
            seed,
            force,
        } => gen_data(&out, count, val, size, classes, seed, force),
        Command::Train {
            config,
            out,
            mode,
            seed,
            data,
            epochs,
            sets,
        } => train(config, &out, mode, seed, data, epochs, &sets),
        Command::Eval { ckpt, data, json } => eval(&ckpt, &data, json),
        Command::Latent {
            ckpt,
            image,
            out,
            topk,
            label,
        } => latent_cmd(&ckpt, &image, &out, topk, label),
        Command::GradCheck { op, trials, seed, eps } => grad_check(op, trials, seed, eps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Check(m) => (1, m),
                Failure::Usage(m) => (2, m),
                Failure::Numerical(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
