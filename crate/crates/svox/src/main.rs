//! `svox`: phantom generation, training, prediction, and evaluation for
//! patch-based dual-echo MR to CT synthesis.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use svox::formats::{self, model::model_file_name};
use svox::manifest::RunManifest;
use svox::predict::predict_ensemble_parallel;
use svox::trainer::{self, Atlas, TrainPlan};
use svox_core::inference::Ensemble;
use svox_core::metrics::{self, EvalReport};
use svox_core::model::ModelConfig;
use svox_core::optim::AdamParams;
use svox_core::phantom;
use svox_core::volume::Mask;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "svox", version, about = "Patch-based dual-echo MR to CT synthesis")]
struct Cli {
    /// Worker threads (falls back to SVOX_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of co-registered phantom subjects
    Phantom(PhantomArgs),
    /// Train the three orientation models on one atlas subject
    Train(TrainArgs),
    /// Predict a synthetic CT from a dual-echo pair with a model ensemble
    Predict(PredictArgs),
    /// Evaluate a synthetic CT against a reference within a mask
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory (one pair_NNN subdirectory per subject)
    #[arg(long)]
    out: PathBuf,
    /// Base seed; subject i uses seed+i
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of subjects (pair 0 is the atlas)
    #[arg(long, default_value_t = 2)]
    count: usize,
    /// Volume dimensions as X,Y,Z
    #[arg(long, value_parser = parse_dims, default_value = "64,64,64")]
    dims: [usize; 3],
}

#[derive(Args)]
struct TrainArgs {
    /// Atlas directory holding echo1/echo2/ct/mask volumes
    #[arg(long)]
    atlas: PathBuf,
    /// Architecture: "paper", "tiny", or a JSON config file
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Training epochs per orientation
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    /// Batch size
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Base seed; orientations use seed, seed+1, seed+2
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Output directory for the three model files and histories
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding model_axial/coronal/sagittal.svoxnet
    #[arg(long)]
    models: PathBuf,
    /// First echo volume
    #[arg(long)]
    echo1: PathBuf,
    /// Second echo volume
    #[arg(long)]
    echo2: PathBuf,
    /// Output volume (.nii for NIfTI, anything else for the internal format)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference CT
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Synthetic CT under test
    #[arg(long)]
    test: PathBuf,
    /// Evaluation mask volume
    #[arg(long)]
    mask: PathBuf,
    /// Output report JSON
    #[arg(long)]
    out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected X,Y,Z".into());
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.trim().parse().map_err(|e| format!("bad dimension {p:?}: {e}"))?;
    }
    Ok(dims)
}

fn main() {
    let cli = Cli::parse();
    let threads = resolve_threads(cli.threads);
    // ignored if a pool already exists (e.g. in-process tests)
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Predict(a) => cmd_predict(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a, threads),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("SVOX_THREADS").ok().and_then(|v| v.parse().ok()))
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn cmd_phantom(args: PhantomArgs, threads: usize) -> CmdResult {
    let mut manifest = RunManifest::new("phantom", threads);
    manifest.add_seed("base", args.seed);
    let t0 = Instant::now();
    let corpus = phantom::generate_corpus(args.count, args.seed, args.dims)?;
    manifest.add_timing("generate", t0.elapsed().as_secs_f64() * 1e3);
    std::fs::create_dir_all(&args.out)?;
    for (i, (spec, pair)) in corpus.iter().enumerate() {
        let dir = args.out.join(format!("pair_{i:03}"));
        std::fs::create_dir_all(&dir)?;
        formats::write_volume(&pair.echo1, &dir.join("echo1.svox"))?;
        formats::write_volume(&pair.echo2, &dir.join("echo2.svox"))?;
        formats::write_volume(&pair.ct, &dir.join("ct.svox"))?;
        formats::write_volume(&pair.mask.to_volume(spec.spacing_mm), &dir.join("mask.svox"))?;
        let class_map = svox_core::volume::Volume {
            dims: spec.dims,
            spacing_mm: spec.spacing_mm,
            data: pair.class_map.iter().map(|&c| c as f32).collect(),
            units: svox_core::volume::IntensityUnits::ArbitraryMr,
            orientation: svox_core::volume::OrientationTag::Axial,
        };
        formats::write_volume(&class_map, &dir.join("class_map.svox"))?;
        std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(spec)?)?;
        println!(
            "pair_{i:03}: dims {:?}, mask voxels {} ({:.1}% of volume){}",
            spec.dims,
            pair.mask.count_true(),
            100.0 * pair.mask.count_true() as f64 / pair.mask.bits.len() as f64,
            if i == 0 { " [atlas]" } else { "" }
        );
    }
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn load_config(spec: &str, seed: u64) -> Result<ModelConfig, Box<dyn std::error::Error>> {
    let mut cfg = match spec {
        "paper" => ModelConfig::paper(seed),
        "tiny" => ModelConfig::tiny(seed),
        path => {
            let bytes = std::fs::read(path).map_err(|e| format!("config {path}: {e}"))?;
            serde_json::from_slice::<ModelConfig>(&bytes)
                .map_err(|e| format!("config {path}: {e}"))?
        }
    };
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn find_volume(dir: &Path, stem: &str) -> Result<PathBuf, Box<dyn std::error::Error>> {
    for ext in ["svox", "nii"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(format!("no {stem}.svox or {stem}.nii in {}", dir.display()).into())
}

fn cmd_train(args: TrainArgs, threads: usize) -> CmdResult {
    let mut manifest = RunManifest::new("train", threads);
    manifest.add_seed("base", args.seed);
    let paths: Vec<PathBuf> = ["echo1", "echo2", "ct", "mask"]
        .iter()
        .map(|stem| find_volume(&args.atlas, stem))
        .collect::<Result<_, _>>()?;
    for p in &paths {
        manifest.add_input(p)?;
    }
    let echo1 = formats::read_volume(&paths[0])?;
    let echo2 = formats::read_volume(&paths[1])?;
    let ct = formats::read_volume(&paths[2])?;
    let mask = Mask::from_volume(&formats::read_volume(&paths[3])?);
    let atlas = Atlas { echo1: &echo1, echo2: &echo2, ct: &ct, mask: &mask };

    let cfg = load_config(&args.config, args.seed)?;
    let plan = TrainPlan {
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        adam: AdamParams { lr: args.lr, ..AdamParams::default() },
        ..TrainPlan::default()
    };
    std::fs::create_dir_all(&args.out)?;
    let t0 = Instant::now();
    let histories = trainer::train_all_orientations(atlas, &cfg, &plan, &args.out)?;
    manifest.add_timing("train_all", t0.elapsed().as_secs_f64() * 1e3);
    for h in &histories {
        for e in &h.epochs {
            println!(
                "[{}] epoch {}/{}: train {:.6} val {:.6} ({:.1}s)",
                h.orientation.as_str(),
                e.epoch,
                args.epochs,
                e.train_loss,
                e.val_loss,
                e.wall_ms / 1e3
            );
        }
        println!(
            "[{}] best epoch {} (val {:.6}), {} params, model written",
            h.orientation.as_str(),
            h.best_epoch,
            h.best_val_loss,
            h.param_count
        );
    }
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn load_ensemble(dir: &Path) -> Result<Ensemble, Box<dyn std::error::Error>> {
    let mut members = Vec::with_capacity(3);
    for tag in svox_core::volume::OrientationTag::ALL {
        let path = dir.join(model_file_name(tag));
        let saved = formats::model::load_model(&path)?;
        let orientation = saved.orientation();
        members.push((saved.network, saved.meta.normalization, orientation));
    }
    let members: [_; 3] = members.try_into().map_err(|_| "expected 3 models")?;
    Ok(Ensemble { members })
}

fn cmd_predict(args: PredictArgs, threads: usize) -> CmdResult {
    let mut manifest = RunManifest::new("predict", threads);
    for tag in svox_core::volume::OrientationTag::ALL {
        manifest.add_input(&args.models.join(model_file_name(tag)))?;
    }
    manifest.add_input(&args.echo1)?;
    manifest.add_input(&args.echo2)?;
    let ensemble = load_ensemble(&args.models)?;
    let echo1 = formats::read_volume(&args.echo1)?;
    let echo2 = formats::read_volume(&args.echo2)?;
    let t0 = Instant::now();
    let prediction = predict_ensemble_parallel(&ensemble, &echo1, &echo2)?;
    manifest.add_timing("predict", t0.elapsed().as_secs_f64() * 1e3);
    formats::write_volume(&prediction, &args.out)?;
    println!("synthetic CT written to {} (dims {:?})", args.out.display(), prediction.dims);
    manifest.write(&manifest_sibling(&args.out))?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, threads: usize) -> CmdResult {
    let mut manifest = RunManifest::new("evaluate", threads);
    manifest.add_input(&args.reference)?;
    manifest.add_input(&args.test)?;
    manifest.add_input(&args.mask)?;
    let reference = formats::read_volume(&args.reference)?;
    let test = formats::read_volume(&args.test)?;
    let mask = Mask::from_volume(&formats::read_volume(&args.mask)?);
    let report = EvalReport {
        psnr_db: metrics::psnr(&reference, &test, &mask)?,
        correlation: metrics::pearson(&reference, &test, &mask)?,
        n_voxels: mask.count_true() as u64,
        mask_source: args.mask.display().to_string(),
    };
    std::fs::write(&args.out, serde_json::to_vec_pretty(&report)?)?;
    print!("{}", metrics::format_eval_table(&[("CNN w/ UTE", vec![report])]));
    manifest.write(&manifest_sibling(&args.out))?;
    Ok(())
}

fn manifest_sibling(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
