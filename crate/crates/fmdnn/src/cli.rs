//! Command-line surface. Thin argument handling; the work lives in the
//! library modules so it stays testable without a process boundary.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fmdnn_core::fuzzy::{fuse_plain, fuzzy_features, grayscale, softmax3};
use fmdnn_core::metrics::Metrics;
use fmdnn_core::model::Fmdnn;
use fmdnn_core::Graph;

use crate::checkpoint::{load_checkpoint, restore_model, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, split_dataset, Dataset};
use crate::heatmap::{channel_mean, compute_cam, emit_heatmap, CamSource};
use crate::ppm::{load_image, write_gray_ppm};
use crate::selftest;
use crate::synthetic;
use crate::train::{evaluate_model, history_csv, load_split, train};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "fmdnn", version, about = "Fuzzy multi-granular image classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a directory of class subfolders (or a generated set)
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset
    Eval(EvalArgs),
    /// Write the membership maps and fused map of one image
    ExtractFuzzy(ExtractArgs),
    /// Render a feature heatmap or class activation map
    Visualize(VisualizeArgs),
    /// Run the built-in verification suites
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root: one subdirectory per class
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate a synthetic dataset with this many classes instead of --data
    #[arg(long, value_name = "CLASSES")]
    synthetic: Option<usize>,
    /// Images per class for --synthetic
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Output directory for checkpoint, history, and synthetic data
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config overrides, e.g. `train.lr=0.01` or bare `lr=0.01`
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; split with the checkpoint's ratios and seed
    #[arg(long)]
    data: PathBuf,
    /// Which split to score
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
}

#[derive(Args)]
struct ExtractArgs {
    /// Input image (PPM or PNG)
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the four maps and the sidecar
    #[arg(long, default_value = "fuzzy-maps")]
    out: PathBuf,
    /// Use this checkpoint's membership settings and learned fusion weights
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PPM or PNG)
    #[arg(long)]
    image: PathBuf,
    /// Output PPM path (a .txt sidecar lands next to it)
    #[arg(long, default_value = "heatmap.ppm")]
    out: PathBuf,
    /// What to render: a granularity's features, the fused fuzzy map, or a CAM
    #[arg(long, default_value = "cam", value_parser = ["fine", "medium", "coarse", "fuzzy", "cam"])]
    source: String,
    /// Target class for --source cam
    #[arg(long, default_value_t = 0)]
    class: usize,
    /// Which feature map the CAM differentiates
    #[arg(long, default_value = "fine", value_parser = ["fine", "medium", "coarse"])]
    cam_source: String,
    /// Nearest-neighbor upscale to the input resolution
    #[arg(long)]
    upscale: bool,
}

/// Returns the process exit code: 0 success, 1 runtime failure. Argument
/// errors exit 2 from inside clap before this returns.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::ExtractFuzzy(a) => cmd_extract(a),
        Cmd::Visualize(a) => cmd_visualize(a),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn print_metrics(m: &Metrics, loss: f64) {
    println!(
        "loss {loss:.4}  acc {:.4}  tpr {:.4}  tnr {:.4}  ppv {:.4}  f1 {:.4}",
        m.acc, m.tpr, m.tnr, m.ppv, m.f1
    );
    if !m.degenerate_classes.is_empty() {
        println!(
            "note: classes {:?} had an empty rate denominator (counted as 0)",
            m.degenerate_classes
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    let data_dir = match (&a.data, a.synthetic) {
        (Some(dir), None) => dir.clone(),
        (None, Some(classes)) => {
            let dir = a.out.join("synthetic-data");
            synthetic::generate(&dir, classes, a.per_class, cfg.image_size, cfg.train.seed)?;
            println!(
                "generated {} x {} synthetic images under {}",
                classes,
                a.per_class,
                dir.display()
            );
            dir
        }
        _ => {
            return Err(Error::Input(
                "pass exactly one of --data or --synthetic".into(),
            ))
        }
    };
    let ds = load_dataset(&data_dir)?;
    println!(
        "dataset: {} samples in {} classes from {}",
        ds.samples.len(),
        ds.class_count(),
        data_dir.display()
    );

    std::fs::create_dir_all(&a.out)?;
    let t0 = Instant::now();
    let outcome = train(&cfg, &ds, &mut |line| println!("{line}"))?;
    let elapsed = t0.elapsed().as_secs_f64();

    let csv = history_csv(&outcome.history);
    let history_path = a.out.join("history.csv");
    std::fs::write(&history_path, &csv)?;

    let mut saved = cfg.clone();
    saved.classes = outcome.model.cfg().classes;
    let ck_path = a.out.join("checkpoint.fmdn");
    save_checkpoint(
        &ck_path,
        &outcome.model,
        &saved.to_text(),
        outcome.best_epoch,
        &csv,
    )?;

    if outcome.best_val_acc.is_finite() {
        println!(
            "best epoch {} (val acc {:.4}) after {:.1}s",
            outcome.best_epoch, outcome.best_val_acc, elapsed
        );
    } else {
        println!(
            "finished {} epochs in {:.1}s (no validation split)",
            outcome.best_epoch, elapsed
        );
    }
    println!("wrote {} and {}", ck_path.display(), history_path.display());

    let tp = &cfg.train;
    let split = split_dataset(&ds, (tp.train_ratio, tp.val_ratio, tp.test_ratio), tp.seed)?;
    if !split.test.is_empty() {
        let test_set = load_split(&ds, &split.test)?;
        let (m, loss) = evaluate_model(&outcome.model, &test_set)?;
        println!("test split ({} samples):", test_set.len());
        print_metrics(&m, loss);
    }
    Ok(())
}

fn pick_split<'a>(ds: &Dataset, cfg: &RunConfig, which: &str) -> Result<Vec<usize>> {
    let tp = &cfg.train;
    let split = split_dataset(ds, (tp.train_ratio, tp.val_ratio, tp.test_ratio), tp.seed)?;
    Ok(match which {
        "train" => split.train,
        "val" => split.val,
        _ => split.test,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (cfg, model) = restore_model(&ck)?;
    let ds = load_dataset(&a.data)?;
    let idxs = pick_split(&ds, &cfg, &a.split)?;
    if idxs.is_empty() {
        return Err(Error::Input(format!(
            "the {} split of {} is empty at ratios {}/{}/{}",
            a.split,
            a.data.display(),
            cfg.train.train_ratio,
            cfg.train.val_ratio,
            cfg.train.test_ratio
        )));
    }
    let set = load_split(&ds, &idxs)?;
    let (m, loss) = evaluate_model(&model, &set)?;
    println!(
        "{} split of {} ({} samples), checkpoint epoch {}:",
        a.split,
        a.data.display(),
        set.len(),
        ck.epoch
    );
    print_metrics(&m, loss);
    Ok(())
}

/// Learned fusion weights and bias from a checkpointed model, or the init
/// values (uniform weights, zero bias) when no checkpoint is given.
fn fusion_params(model: Option<&Fmdnn>) -> Result<([f64; 3], f64)> {
    let Some(model) = model else {
        return Ok((softmax3([0.0; 3]), 0.0));
    };
    let store = &model.store;
    let (Some(w), Some(b)) = (store.id("fuzzy.w_logits"), store.id("fuzzy.bias")) else {
        return Err(Error::Input(format!(
            "checkpoint was trained with fusion mode \"{}\", which has no fuzzy parameters",
            model.cfg().fusion.name()
        )));
    };
    let logits = &store.entries()[w.0].value.data;
    let bias = store.entries()[b.0].value.data[0];
    Ok((softmax3([logits[0], logits[1], logits[2]]), bias))
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let restored = match &a.checkpoint {
        Some(path) => Some(restore_model(&load_checkpoint(path)?)?),
        None => None,
    };
    let membership = restored
        .as_ref()
        .map(|(cfg, _)| cfg.membership.clone())
        .unwrap_or_default();
    let (weights, bias) = fusion_params(restored.as_ref().map(|(_, m)| m))?;

    let image = load_image(&a.image)?;
    let gray = grayscale(&image)?;
    let feats = fuzzy_features(&gray, &membership)?;
    let fused = fuse_plain(&feats, weights, bias)?;

    std::fs::create_dir_all(&a.out)?;
    for (name, map) in [
        ("i_mu", &feats.i_mu),
        ("i_sigma", &feats.i_sigma),
        ("i_t", &feats.i_t),
        ("fused", &fused),
    ] {
        write_gray_ppm(&a.out.join(format!("{name}.ppm")), map)?;
    }
    let sidecar = format!(
        "image: {}\nmu: {}\nsigma: {}\nweights: {} {} {}\nbias: {}\n",
        a.image.display(),
        feats.image_mu,
        feats.image_sigma,
        weights[0],
        weights[1],
        weights[2],
        bias
    );
    std::fs::write(a.out.join("fuzzy.txt"), sidecar)?;
    println!(
        "wrote i_mu.ppm, i_sigma.ppm, i_t.ppm, fused.ppm, fuzzy.txt under {}",
        a.out.display()
    );
    Ok(())
}

fn upscale_factor(want: bool, image_side: usize, map_side: usize) -> usize {
    if want && map_side > 0 && image_side >= map_side {
        image_side / map_side
    } else {
        1
    }
}

fn cmd_visualize(a: VisualizeArgs) -> Result<()> {
    let (cfg, model) = restore_model(&load_checkpoint(&a.checkpoint)?)?;
    let image = load_image(&a.image)?;
    let side = cfg.image_size;

    let (map, label) = match a.source.as_str() {
        "cam" => {
            let src = CamSource::parse(&a.cam_source)?;
            let cam = compute_cam(&model, &image, a.class, src)?;
            (cam, format!("cam class {} over {}", a.class, a.cam_source))
        }
        "fuzzy" => {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &image)?;
            let fused = out.fused.ok_or_else(|| {
                Error::Input(format!(
                    "fusion mode \"{}\" computes no fuzzy map",
                    cfg.fusion.name()
                ))
            })?;
            (g.value(fused).clone(), "fuzzy".to_string())
        }
        granularity => {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &image)?;
            let tap = match granularity {
                "fine" => out.fine,
                "medium" => out.medium,
                _ => out.coarse,
            }
            .ok_or_else(|| {
                Error::Input(format!("{granularity} branch is not active in this model"))
            })?;
            (channel_mean(g.value(tap))?, granularity.to_string())
        }
    };

    let factor = upscale_factor(a.upscale, side, map.shape[0]);
    emit_heatmap(&a.out, &map, &label, factor)?;
    println!("wrote {} ({})", a.out.display(), label);
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let (table, ok) = selftest::render(&selftest::run_all());
    print!("{table}");
    if ok {
        Ok(())
    } else {
        Err(Error::Input("selftest failed".into()))
    }
}
