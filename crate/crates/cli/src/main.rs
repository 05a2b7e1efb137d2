//! `gca`: synthetic data, training, evaluation, ablations, gradient checks
//! and cost reports for the context-aware detector.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gca_rcnn::harness::ablate::{ablate, AblationGrid};
use gca_rcnn::harness::checkpoint::Checkpoint;
use gca_rcnn::harness::coco;
use gca_rcnn::harness::config::ExperimentConfig;
use gca_rcnn::harness::cost;
use gca_rcnn::harness::eval::{evaluate, ApSummary};
use gca_rcnn::harness::gradcheck;
use gca_rcnn::harness::scene::{generate_set, Scene};
use gca_rcnn::harness::train::{smoothed, train_as, IterRecord, TrainOptions};
use gca_rcnn::head::{AttentionVariant, GcaHead, HeadMode};
use gca_rcnn::model::Detector;
use gca_rcnn::tensor::{Element, ParamStore};
use gca_rcnn::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gca", version, about = "Global context aware two-stage detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config and write checkpoints plus the loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on a COCO annotation file (PPM images) instead of synthetic scenes.
        #[arg(long)]
        coco: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out synthetic scenes or a COCO file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        coco: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// JSON grid, inline or as a file path, e.g. '{"r": [4, 8, 16]}'.
        #[arg(long, conflicts_with = "preset")]
        grid: Option<String>,
        #[arg(long, value_parser = ["dense", "pooling", "variants", "reduction"])]
        preset: Option<String>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        /// Random coordinates per parameter tensor.
        #[arg(long, default_value_t = 1)]
        probes: usize,
    },
    /// Parameter census, MACs and forward latency for each head mode.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Render synthetic scenes as COCO JSON plus PPM images.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        first: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    EndToEnd,
    All,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<HeadMode>,
    #[arg(long)]
    variant: Option<AttentionVariant>,
    /// Lattice pool size as MxN.
    #[arg(long, value_parser = parse_pool)]
    pool_size: Option<(usize, usize)>,
    #[arg(long)]
    reduction: Option<usize>,
    /// Recalibrate the RPN input features with pooled context.
    #[arg(long)]
    rpn_recal: bool,
    /// Output directory for JSON reports, checkpoints and data.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run in 64-bit floating point.
    #[arg(long)]
    f64: bool,
}

fn parse_pool(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected MxN, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(m)?, p(n)?))
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let head = &mut cfg.model.head;
        if let Some(m) = self.mode {
            head.mode = m;
        }
        if let Some(v) = self.variant {
            head.variant = v;
        }
        if let Some(p) = self.pool_size {
            head.pool_size = p;
        }
        if let Some(r) = self.reduction {
            head.reduction = r;
        }
        if self.rpn_recal {
            cfg.rpn_recalibrate = true;
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct MetricsReport {
    images: usize,
    iteration: u64,
    head_params: usize,
    total_params: usize,
    /// Mean wall-clock per image for detection, post-processing included.
    latency_ms: f64,
    ap: ApSummary,
    /// Trailing-50 mean of the training loss, when a log sits next to the checkpoint.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    loss_curve: Vec<f64>,
}

fn ap_table(s: &ApSummary, class_names: &[String]) -> String {
    let mut t = String::from("IoU    AP\n");
    for (thr, ap) in &s.per_iou {
        t.push_str(&format!("{thr:.2}  {ap:.4}\n"));
    }
    t.push_str(&format!("mean  {:.4}\n\n{:<16} {:>8}\n", s.map, "class", "AP"));
    for (i, ap) in s.per_class.iter().enumerate() {
        let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{}", i + 1));
        let v = ap.map_or("-".to_string(), |v| format!("{v:.4}"));
        t.push_str(&format!("{name:<16} {v:>8}\n"));
    }
    t
}

fn load_scenes(cfg: &ExperimentConfig, coco_file: Option<&Path>, first: u64, count: usize) -> Result<(Vec<Scene>, Vec<String>)> {
    match coco_file {
        Some(p) => {
            let dir = p.parent().unwrap_or(Path::new("."));
            let imp = coco::import(p, dir)?;
            if imp.class_names.len() != cfg.model.head.num_classes {
                return Err(Error::Config(format!(
                    "{} has {} categories but model.head.num_classes is {}",
                    p.display(),
                    imp.class_names.len(),
                    cfg.model.head.num_classes
                )));
            }
            Ok((imp.scenes, imp.class_names))
        }
        None => Ok((generate_set(&cfg.dataset, first, count)?, cfg.dataset.class_names())),
    }
}

fn run_train<T: Element>(cfg: &ExperimentConfig, scenes: &[Scene], out: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let total = cfg.epochs * scenes.len();
    let mut progress = |r: &IterRecord| {
        if r.iteration % 50 == 0 || r.iteration + 1 == total {
            eprintln!(
                "epoch {:>3} iter {:>6}/{total} lr {:.5} loss {:.4} (rpn {:.4}, head {:.4}) {:.0}s",
                r.epoch,
                r.iteration,
                r.lr,
                r.total,
                r.rpn,
                r.head,
                t0.elapsed().as_secs_f64()
            );
        }
    };
    let opts = TrainOptions {
        out_dir: out.map(Path::to_path_buf),
        progress: Some(&mut progress),
    };
    let outcome = train_as::<T>(cfg, scenes, opts)?;
    let sm = smoothed(&outcome.log, 50);
    let first = outcome.log.first().map_or(0.0, |r| r.total);
    let last = sm.last().copied().unwrap_or(0.0);
    println!("iterations      {}", outcome.log.len());
    println!("initial loss    {first:.4}");
    println!("smoothed final  {last:.4}  ({:.1}% of initial)", 100.0 * last / first);
    if let Some(dir) = out {
        std::fs::write(dir.join("config.json"), cfg.to_json())?;
        println!("checkpoint      {}", dir.join("final.gcac").display());
    }
    Ok(())
}

fn run_eval<T: Element>(cfg: &ExperimentConfig, ckpt: &Checkpoint, scenes: &[Scene], names: &[String], common: &Common, log_dir: Option<&Path>) -> Result<()> {
    let mut store = ParamStore::<T>::new();
    let det = Detector::new(&cfg.model_config(), &mut store, cfg.seed)?;
    ckpt.restore(&mut store, true)?;
    let t0 = Instant::now();
    let (ap, _) = evaluate(&det, &store, scenes)?;
    let latency_ms = t0.elapsed().as_secs_f64() * 1e3 / scenes.len() as f64;
    let loss_curve = log_dir
        .map(|d| d.join("train_log.json"))
        .filter(|p| p.exists())
        .map(|p| -> Result<Vec<f64>> {
            let log: Vec<IterRecord> = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            Ok(smoothed(&log, 50))
        })
        .transpose()?
        .unwrap_or_default();
    print!("{}", ap_table(&ap, names));
    let report = MetricsReport {
        images: scenes.len(),
        iteration: ckpt.iteration,
        head_params: GcaHead::param_count(&cfg.model.head, cfg.model.roi.output_size)?,
        total_params: store.count(""),
        latency_ms,
        ap,
        loss_curve,
    };
    println!("\nhead params {}  all params {}  {:.1} ms/image", report.head_params, report.total_params, report.latency_ms);
    common.write_json("metrics.json", &report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, coco } => {
            let cfg = common.config()?;
            let (scenes, _) = load_scenes(&cfg, coco.as_deref(), 0, cfg.train_images)?;
            let out = common.out.as_deref();
            if common.f64 {
                run_train::<f64>(&cfg, &scenes, out)
            } else {
                run_train::<f32>(&cfg, &scenes, out)
            }
        }
        Cmd::Eval { common, checkpoint, coco } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = ExperimentConfig::from_json(&ckpt.config_json)?;
            // only the seed may move the evaluation set; architecture flags
            // must match the stored weights
            if let Some(s) = common.seed {
                cfg.dataset.seed = s;
            }
            let (scenes, names) = load_scenes(&cfg, coco.as_deref(), cfg.eval_offset, cfg.eval_images)?;
            let log_dir = checkpoint.parent();
            if common.f64 {
                run_eval::<f64>(&cfg, &ckpt, &scenes, &names, &common, log_dir)
            } else {
                run_eval::<f32>(&cfg, &ckpt, &scenes, &names, &common, log_dir)
            }
        }
        Cmd::Ablate { common, grid, preset } => {
            let cfg = common.config()?;
            let grid = match (grid, preset) {
                (Some(g), _) => {
                    let text = if Path::new(&g).is_file() { std::fs::read_to_string(&g)? } else { g };
                    AblationGrid::from_json(&text)?
                }
                (None, Some(p)) => AblationGrid::preset(&p)?,
                (None, None) => AblationGrid::default(),
            };
            let cells = grid.cells().len();
            let mut done = 0;
            let mut progress = |r: &gca_rcnn::harness::ablate::AblationRow| {
                done += 1;
                eprintln!("cell {done}/{cells} {:?}: AP50 {:.3}", r.cell, r.ap50);
            };
            let report = ablate(&cfg, &grid, Some(&mut progress))?;
            print!("{}", report.table());
            common.write_json("ablation.json", &report)
        }
        Cmd::Gradcheck { common, scope, probes } => {
            let seed = common.seed.unwrap_or(0);
            let mut reports = Vec::new();
            if matches!(scope, Scope::Ops | Scope::All) {
                reports.push(gradcheck::check_ops(seed)?);
            }
            if matches!(scope, Scope::EndToEnd | Scope::All) {
                reports.push(gradcheck::check_all_end_to_end(probes, seed)?);
            }
            for r in &reports {
                println!("[{}] tolerance {:.0e}: {}", r.scope, r.tolerance, if r.passed { "PASS" } else { "FAIL" });
                print!("{}", r.table());
            }
            common.write_json("gradcheck.json", &reports)?;
            if reports.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(Error::Invalid("gradient check failed".into()))
            }
        }
        Cmd::Bench { common, runs, warmup } => {
            let cfg = common.config()?;
            let modes = [HeadMode::Baseline, HeadMode::Lightweight, HeadMode::DenseNoAttention, HeadMode::Full];
            let size = cfg.dataset.image_size;
            let model = cfg.model_config();
            let report = if common.f64 {
                cost::measure::<f64>(&model, &modes, size, warmup, runs, cfg.seed)?
            } else {
                cost::measure::<f32>(&model, &modes, size, warmup, runs, cfg.seed)?
            };
            print!("{}", report.table());
            if let Some(r) = report.latency_ratio(HeadMode::Lightweight) {
                println!("lightweight / baseline latency {r:.3}");
            }
            common.write_json("cost.json", &report)
        }
        Cmd::GenData { common, count, first } => {
            let cfg = common.config()?;
            let out = common.out.clone().ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
            let mut spec = cfg.dataset.clone();
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let scenes = generate_set(&spec, first, count.unwrap_or(cfg.train_images))?;
            let ds = coco::export(&out, &scenes, &spec.class_names())?;
            println!("{} images, {} boxes -> {}", ds.images.len(), ds.annotations.len(), out.join("annotations.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
