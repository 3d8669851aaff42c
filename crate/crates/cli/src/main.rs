use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use repl_core::grid::GridShape;
use repl_core::kvfile::KvFile;
use repl_core::net::load_checkpoint;
use repl_core::pipeline::{self, Mode, Split, TrainConfig, TrainData};
use repl_core::scenegen::{generate_dataset, DatasetSpec, Extent, SceneConfig, FEATURE_CHANNELS};
use repl_core::theory::{
    accounting_csv, mean_scene_zeta, pooled, region_sweep, slope_through_origin, sweep_boundary, sweep_csv,
};

#[derive(Parser)]
#[command(name = "repl", version, about = "Pseudo-label refinement for semi-supervised voxel segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset and its manifest.
    GenData(GenArgs),
    /// Supervised training on the labeled split only.
    TrainSup(TrainArgs),
    /// Semi-supervised training (semi-repl or semi-no-refine).
    TrainSemi(TrainArgs),
    /// mIoU of a checkpoint network on a split.
    Eval(EvalArgs),
    /// Benefit-region sweep over (q, r) at fixed pi.
    ZetaSweep(SweepArgs),
    /// Per-scene refinement accounting from a checkpoint.
    Account(AccountArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for scenes and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    scenes: usize,
    #[arg(long, default_value_t = 0.0625)]
    labeled_ratio: f64,
    #[arg(long, default_value_t = 8)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid as HxWxL.
    #[arg(long, default_value = "8x16x16")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Half-ranges x,y,z in metres.
    #[arg(long, default_value = "12,24,4")]
    extent: String,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (checkpoint, metrics, resolved config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    mix_ratio: Option<f64>,
    #[arg(long)]
    lambda_ls: Option<f64>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    #[arg(long)]
    batch_mix: Option<usize>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    base_lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "validation")]
    split: String,
    /// student or teacher.
    #[arg(long, default_value = "student")]
    net: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    pi: f64,
    /// Grid points per axis over [0, 1].
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "unlabeled")]
    split: String,
    /// Training configuration (for kappa); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(msg: String) -> anyhow::Error {
    repl_core::Error::Config(msg).into()
}

fn parse_triple<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split(sep)
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_error(format!("bad {what} {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| config_error(format!("{what} needs three values, got {s:?}")))
}

fn gen_data(a: &GenArgs) -> Result<()> {
    let [h, w, l] = parse_triple::<usize>(&a.grid, 'x', "grid")?;
    let [ex, ey, ez] = parse_triple::<f64>(&a.extent, ',', "extent")?;
    let spec = DatasetSpec {
        scene: SceneConfig {
            extent: Extent::new(ex, ey, ez)?,
            num_classes: a.classes,
            ..Default::default()
        },
        shape: GridShape::new(a.classes, FEATURE_CHANNELS, h, w, l)?,
        n_scenes: a.scenes,
        labeled_ratio: a.labeled_ratio,
        n_val: a.val,
        seed: a.seed,
    };
    let (ds, _) = generate_dataset(&spec, Some(&a.out))?;
    println!(
        "wrote {} scenes ({} labeled, {} unlabeled, {} validation) to {}",
        ds.num_scenes,
        ds.labeled.len(),
        ds.unlabeled.len(),
        ds.validation.len(),
        a.out.display()
    );
    Ok(())
}

fn opt<T: ToString>(x: &Option<T>) -> Option<String> {
    x.as_ref().map(ToString::to_string)
}

fn train_config(a: &TrainArgs, forced: Option<Mode>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    let mut kv = KvFile::default();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(k, v);
        }
    };
    put("manifest", a.manifest.as_ref().map(|p| p.display().to_string()));
    put("out_dir", a.out.as_ref().map(|p| p.display().to_string()));
    put("mode", a.mode.clone());
    put("steps", opt(&a.steps));
    put("eval_interval", opt(&a.eval_interval));
    put("seed", opt(&a.seed));
    put("hidden", opt(&a.hidden));
    put("alpha", opt(&a.alpha));
    put("kappa", opt(&a.kappa));
    put("sigma", opt(&a.sigma));
    put("top_k", opt(&a.top_k));
    put("mix_ratio", opt(&a.mix_ratio));
    put("lambda_ls", opt(&a.lambda_ls));
    put("batch_labeled", opt(&a.batch_labeled));
    put("batch_unlabeled", opt(&a.batch_unlabeled));
    put("batch_mix", opt(&a.batch_mix));
    put("warmup_frac", opt(&a.warmup_frac));
    put("base_lr", opt(&a.base_lr));
    cfg.apply(&kv)?;
    match forced {
        Some(Mode::SupOnly) => cfg.mode = Mode::SupOnly,
        _ if cfg.mode == Mode::SupOnly => {
            bail!(config_error("train-semi needs mode semi-repl or semi-no-refine".into()))
        }
        _ => {}
    }
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, forced: Option<Mode>) -> Result<()> {
    let cfg = train_config(a, forced)?;
    let out = pipeline::run(&cfg)?;
    if let Some(last) = out.outcome.metrics.last() {
        println!(
            "step {}: student mIoU {:.4}, teacher mIoU {:.4}, pseudo-label acc {:.4} -> {:.4}",
            last.step, last.student_miou, last.teacher_miou, last.pl_acc_before, last.pl_acc_after
        );
    }
    println!("checkpoint: {}", out.checkpoint.display());
    println!("metrics:    {}", out.metrics.display());
    println!("config:     {}", out.config.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let (ckpt, data) = pipeline::load_for_eval(&a.checkpoint, &a.manifest)?;
    let report = pipeline::evaluate(&ckpt, &a.net, &data, split)?;
    println!("class,iou");
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("{k},{v:.6}"),
            None => println!("{k},absent"),
        }
    }
    println!("miou,{:.6}", report.miou);
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    if a.points < 2 {
        bail!(config_error("need at least two grid points".into()));
    }
    let grid: Vec<f64> = (0..a.points).map(|i| i as f64 / (a.points - 1) as f64).collect();
    let points = region_sweep(a.pi, &grid, &grid)?;
    write_or_print(a.out.as_deref(), &sweep_csv(&points))?;
    // For large pi the boundary meets r = 1 at small q, so the slope is fitted
    // on a log-spaced q grid.
    let qs: Vec<f64> = (0..=600).map(|i| 10f64.powf(-6.0 + i as f64 / 100.0)).collect();
    let rs: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    if let Ok(slope) = sweep_boundary(a.pi, &qs, &rs).and_then(|b| slope_through_origin(&b)) {
        eprintln!("boundary slope r/q = {slope:.6}");
    }
    Ok(())
}

fn account_cmd(a: &AccountArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => TrainConfig::read(p)?.reliability,
        None => TrainConfig::default().reliability,
    };
    if let Some(k) = a.kappa {
        rc.kappa = k;
    }
    let split: Split = a.split.parse()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = TrainData::load(&a.manifest)?;
    let rows = pipeline::account_checkpoint(&ckpt, &data, split, &rc)?;
    write_or_print(a.out.as_deref(), &accounting_csv(&rows))?;
    let accs: Vec<_> = rows.iter().map(|r| r.1).collect();
    let fmt = |z: Option<f64>| z.map_or("nan".to_string(), |z| format!("{z:.6}"));
    if !accs.is_empty() {
        eprintln!("pooled zeta {}", fmt(pooled(&accs)?.zeta));
    }
    eprintln!("mean per-scene zeta {}", fmt(mean_scene_zeta(&accs)));
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<repl_core::Error>() {
        Some(err) => err.code().clamp(1, 255) as u8,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainSup(a) => train_cmd(a, Some(Mode::SupOnly)),
        Cmd::TrainSemi(a) => train_cmd(a, None),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::ZetaSweep(a) => sweep_cmd(a),
        Cmd::Account(a) => account_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
