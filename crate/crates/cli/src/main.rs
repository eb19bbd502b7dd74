use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mgreid::checkpoint::{load_checkpoint, write_features};
use mgreid::config::{Config, FusionMode};
use mgreid::data::{generate_synthetic, import_market, DatasetManifest, Split, SyntheticSpec};
use mgreid::eval::{attention_rollout, eval_set, evaluate_model};
use mgreid::image::Image;
use mgreid::trainer::Trainer;
use mgreid::Model32;

#[derive(Parser)]
#[command(name = "mgreid", version, about = "Multi-grained transformer features for unsupervised person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset and a matching toy config.
    Synth(SynthArgs),
    /// Build a manifest from a Market-1501 style directory.
    Import(ImportArgs),
    /// Train without identity labels.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits of a manifest.
    Eval(EvalArgs),
    /// Write inference features of one split.
    Extract(ExtractArgs),
    /// Export the attention rollout map of one image.
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    ids: usize,
    #[arg(long, default_value_t = 4)]
    cams: usize,
    #[arg(long, default_value_t = 8)]
    per: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixel noise standard deviation.
    #[arg(long)]
    sigma: Option<f32>,
    /// Per-camera photometric shift strength.
    #[arg(long)]
    shift: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportArgs {
    /// Directory with `bounding_box_train`, `query` and `bounding_box_test`.
    #[arg(long)]
    market: PathBuf,
    #[arg(long)]
    cams: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    /// avg, b1 or b2.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Share layer L between the branches instead of duplicating it.
    #[arg(long)]
    no_duplicate: bool,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write per-query AP and first-hit rank as CSV.
    #[arg(long)]
    per_query: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    max_rank: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "gallery")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Output prefix; writes `<out>.png` and `<out>.txt`.
    #[arg(long)]
    out: PathBuf,
    /// Pixels per grid cell in the PNG.
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Import(a) => import(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Extract(a) => extract(a),
        Command::Rollout(a) => rollout(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::toy(a.ids, a.cams, a.per, a.seed);
    if let Some(s) = a.sigma {
        spec.noise_sigma = s;
    }
    if let Some(s) = a.shift {
        spec.camera_shift = s;
    }
    let manifest = generate_synthetic(&spec)?;
    let manifest_path = manifest.write_to_dir(&a.out)?;
    let mut config = Config::toy(a.cams);
    config.train.seed = a.seed;
    config.data.manifest = PathBuf::from("manifest.csv");
    config.data.output_dir = PathBuf::from("run");
    let config_path = a.out.join("config.toml");
    config.save(&config_path)?;
    println!("wrote {} images", manifest.len());
    println!("manifest {}", manifest_path.display());
    println!("config {}", config_path.display());
    Ok(())
}

fn import(a: ImportArgs) -> Result<()> {
    let manifest = import_market(&a.market, a.cams)?;
    manifest.write(&a.out)?;
    println!("wrote {} rows to {}", manifest.len(), a.out.display());
    Ok(())
}

/// Relative paths in a config file resolve against the file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = Config::load(&a.config)?;
    if let Some(k) = a.k1 {
        config.head.partitions[0] = k;
    }
    if let Some(k) = a.k2 {
        config.head.partitions[1] = k;
    }
    if let Some(f) = a.fusion {
        config.head.fusion_mode = f;
    }
    if a.no_duplicate {
        config.head.duplicate_last_layer = false;
    }
    if let Some(l) = a.lambda_p {
        config.loss.lambda_p = l;
    }
    if let Some(e) = a.eps {
        config.association.dbscan_eps = e;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    config.validate()?;

    let base = a.config.parent().unwrap_or(Path::new("."));
    let manifest_path = resolve(base, &config.data.manifest);
    let out_dir = match a.out {
        Some(o) => o,
        None => resolve(base, &config.data.output_dir),
    };
    let manifest = DatasetManifest::load(&manifest_path, config.backbone.num_cameras)
        .with_context(|| format!("loading {}", manifest_path.display()))?;

    let model = Model32::new(config.backbone.clone(), config.head.clone(), config.train.seed)?;
    let mut trainer = Trainer::new(config, model, &manifest)?;
    info!(
        "training on {} images for {} epochs",
        trainer.num_images(),
        trainer.config.train.epochs
    );
    trainer.fit(Some(&out_dir))?;

    if !manifest.indices(Split::Query).is_empty() {
        let result = evaluate_model(&trainer.model, &manifest, 10)?;
        let table = result.table();
        print!("{table}");
        std::fs::write(out_dir.join("eval.txt"), &table)?;
    }
    println!("checkpoint {}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (config, model, epoch) = load_checkpoint::<f32>(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest, config.backbone.num_cameras)?;
    info!("evaluating checkpoint at epoch {epoch}");
    let result = evaluate_model(&model, &manifest, a.max_rank)?;
    print!("{}", result.table());
    if let Some(path) = a.per_query {
        result.write_per_query_csv(&path)?;
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let (config, model, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest, config.backbone.num_cameras)?;
    let set = eval_set(&model, &manifest, a.split)?;
    if set.is_empty() {
        bail!("split {} is empty", a.split);
    }
    write_features(&a.out, &set.features)?;
    println!("wrote {}x{} features to {}", set.features.rows(), set.features.cols(), a.out.display());
    Ok(())
}

fn rollout(a: RolloutArgs) -> Result<()> {
    let (config, model, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let bb = &config.backbone;
    if a.camera >= bb.num_cameras {
        bail!("camera {} out of range (model has {})", a.camera, bb.num_cameras);
    }
    let image = Image::load(&a.image)?.resized(bb.image_height, bb.image_width);
    let attns = model.attention_maps(&image, a.camera)?;
    let r = attention_rollout(&attns, bb.grid_rows(), bb.grid_cols())?;
    if r.degenerate {
        log::warn!("rollout is constant over patches; writing an all-zero map");
    }
    let png = a.out.with_extension("png");
    let txt = a.out.with_extension("txt");
    r.save_png(&png, a.scale)?;
    std::fs::write(&txt, r.to_text())?;
    println!("wrote {} and {}", png.display(), txt.display());
    Ok(())
}
