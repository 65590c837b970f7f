//! `csds` command line: data generation, training, evaluation, uncertainty
//! and augmentation previews, and report aggregation.
//!
//! Failures print a single JSON line `{"error": <kind>, "message": ...}` on
//! stderr and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csds::augment::{color_jitter, histogram_match, sample_elastic, warp, Interp};
use csds::data::{generate_corpus, load_dir, load_rgb, make_splits, save_png, save_sample, tensor_to_rgb};
use csds::harness::{self, load_fold_data, read_metrics, MetricRow, RunConfig};
use csds::imaging::BinaryMask;
use csds::segnet::{forward_eval, load_checkpoint};
use csds::trainer::{fit, predict_masks};
use csds::uncertainty::uncertainty_stages;
use csds::{Error, Result, Rng, Tensor};
use serde_json::json;

#[derive(Parser)]
#[command(name = "csds", version, about = "Dual-student semi-supervised gland segmentation")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus as PNG pairs plus a split manifest.
    GenData(GenDataArgs),
    /// Train one fold and write metrics, checkpoints and run.json.
    Train(TrainArgs),
    /// Score a checkpoint on an `images/` + `masks/` directory.
    Eval(EvalArgs),
    /// Write base / color / structure uncertainty maps for one image.
    Uncertainty(UncertaintyArgs),
    /// Write the augmented views of one image.
    AugmentPreview(AugmentArgs),
    /// Aggregate metrics files into report.csv and curves.csv.
    Report(ReportArgs),
    /// Print a run config with every default filled in.
    Config(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config to resolve; the built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run config whose `[data]` section supplies the generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    /// Output directory; defaults to `runs/<run_id>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    resize: Option<usize>,
    /// Metrics CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Run config supplying the `[uncertainty]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    image: PathBuf,
    /// Reference image for histogram matching.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// `metrics.csv` files or run directories containing one.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Uncertainty(a) => uncertainty(a),
        Command::AugmentPreview(a) => augment_preview(a),
        Command::Report(a) => report(a),
        Command::Config(a) => load_config(a.config.as_deref()).and_then(|c| c.to_toml()).map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.count {
        cfg.data.count = n;
    }
    if let Some(s) = a.seed {
        cfg.data.synth.seed = s;
    }
    if let Some(s) = a.size {
        cfg.data.synth.size = s;
    }
    cfg.data.synth.validate()?;
    let samples = generate_corpus(&cfg.data.synth, cfg.data.count)?;
    create_dir(&a.out)?;
    for s in &samples {
        save_sample(&a.out, s)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let splits = make_splits(&ids, cfg.data.synth.seed, cfg.data.labeled_ratio)?;
    write_file(&a.out.join("splits.json"), &splits.to_json()?)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.fold {
        cfg.data.fold = f;
    }
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run_id));
    create_dir(&out)?;
    let (fold, splits) = load_fold_data(&cfg)?;
    write_file(&out.join("splits.json"), &splits.to_json()?)?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    log::info!(
        "fold {}: {} labeled, {} unlabeled, {} validation, {} test",
        cfg.data.fold,
        fold.labeled.len(),
        fold.unlabeled.len(),
        fold.validation.len(),
        fold.test.len()
    );
    let res = fit(&cfg, &fold, Some(&out))?;
    println!(
        "run {} seed {} fold {}: test dice {:.2} jaccard {:.2} (teacher {:.2})",
        res.run_id, res.seed, res.fold, res.test_dice, res.test_jaccard, res.teacher_test_dice
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let loaded = load_dir(&a.data, a.resize)?;
    for why in &loaded.skipped {
        log::warn!("skipped {why}");
    }
    if loaded.samples.is_empty() {
        return Err(Error::Validation(format!("no usable samples in {}", a.data.display())));
    }
    let preds = predict_masks(&state, &loaded.samples, 8)?;
    let model = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let mut rows = Vec::with_capacity(preds.len());
    for (s, p) in loaded.samples.iter().zip(&preds) {
        let gt = BinaryMask::from_tensor(&s.mask, 0.5)?;
        rows.push(MetricRow {
            run_id: s.id.clone(),
            fold: 0,
            epoch: 0,
            split: "eval".into(),
            model: model.clone(),
            dice: harness::dice_score(p, &gt)?,
            jaccard: harness::jaccard_score(p, &gt)?,
            loss_sup: 0.0,
            loss_unsup: 0.0,
            lambda_unsup: 0.0,
        });
    }
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let jac: Vec<f64> = rows.iter().map(|r| r.jaccard).collect();
    println!("dice {}  jaccard {}  (n = {})", harness::aggregate(&dice), harness::aggregate(&jac), rows.len());
    if let Some(out) = &a.out {
        harness::write_metrics(out, &rows)?;
    }
    Ok(())
}

fn uncertainty(a: UncertaintyArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let state = load_checkpoint(&a.checkpoint)?;
    let image = load_rgb(&a.image)?;
    let batch = Tensor::stack(&[image.clone()])?;
    let logits = forward_eval(&state, &batch)?;
    let maps = uncertainty_stages(&logits, &batch, &cfg.uncertainty)?;
    let stages = [("base", &maps.base), ("color", &maps.color), ("structure", &maps.structure)];
    let scale = stages.iter().map(|(_, m)| m.map().max()).fold(0.0, f64::max);
    create_dir(&a.out)?;
    let mut stats = serde_json::Map::new();
    for (name, m) in stages {
        save_png(m.map().to_luma8(scale), &a.out.join(format!("uncertainty_{name}.png")))?;
        stats.insert(name.into(), json!({ "min": m.map().min(), "max": m.map().max(), "mean": m.map().mean() }));
    }
    stats.insert("scale".into(), json!(scale));
    let text = serde_json::to_string_pretty(&stats).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&a.out.join("uncertainty.json"), &text)?;
    println!("wrote uncertainty maps to {}", a.out.display());
    Ok(())
}

fn augment_preview(a: AugmentArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.augment.validate()?;
    let image = load_rgb(&a.image)?;
    let mut rng = Rng::new(a.seed);
    create_dir(&a.out)?;
    let jit = color_jitter(&image, &cfg.augment.jitter.sample(&mut rng))?;
    save_png(tensor_to_rgb(&jit)?, &a.out.join("color_jitter.png"))?;
    if let Some(r) = &a.reference {
        let reference = load_rgb(r)?;
        let matched = histogram_match(&image, &reference)?;
        save_png(tensor_to_rgb(&matched)?, &a.out.join("histogram_match.png"))?;
    }
    let [_, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let field = sample_elastic(h, w, cfg.augment.elastic_alpha, cfg.augment.elastic_sigma, &mut rng)?;
    let batch = Tensor::stack(&[image])?;
    let warped = warp(&batch, &field, Interp::Bilinear)?.sample(0)?;
    let warped = warped.reshape(vec![3, h, w])?;
    save_png(tensor_to_rgb(&warped)?, &a.out.join("elastic.png"))?;
    println!("wrote augmentation previews to {}", a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() { input.join("metrics.csv") } else { input.clone() };
        rows.extend(read_metrics(&path)?);
    }
    create_dir(&a.out)?;
    let report = harness::write_report(&a.out, &rows)?;
    for r in &report {
        println!("{:<24} {:<10} dice {}  jaccard {}", r.config, r.model, r.dice, r.jaccard);
    }
    Ok(())
}
