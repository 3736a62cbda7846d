//! `memae`: train, score, evaluate and visualize the masked autoencoder
//! anomaly detector.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use memae::evalharness::{
    evaluate, evaluate_checkpoint, fingerprint, generate_synthetic, load_dataset, materialize, read_scores_csv,
    save_heatmap_png, save_triptych_png, score_test_set, write_scores_csv, LabeledTestSet, NormalImageSet, RunConfig,
};
use memae::patchgrid::{patchify, sample_mask, unpatchify};
use memae::pipeline::{load_checkpoint, save_checkpoint, train_with_observer, Checkpoint, LossRecord, TrainObserver};
use memae::scoring::masked_view;

#[derive(Parser)]
#[command(name = "memae", version, about = "Masked autoencoder anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the subcommand's random process.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the normal images of the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the test set: scores.csv and one heatmap per image.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Detection AUC and grouped IoU: report.json plus a printed table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "scores")]
        checkpoint: Option<PathBuf>,
        /// Evaluate an existing scores.csv (detection only).
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
    },
    /// Masked input, reconstruction and original for the first test images.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 3)]
        count: usize,
    },
    /// Write the configured synthetic dataset to disk.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            checkpoint,
            epochs,
        } => train(&common, checkpoint.as_deref(), epochs),
        Command::Score { common, checkpoint } => score(&common, &checkpoint),
        Command::Eval {
            common,
            checkpoint,
            scores,
        } => eval(&common, checkpoint.as_deref(), scores.as_deref()),
        Command::Visualize {
            common,
            checkpoint,
            count,
        } => visualize(&common, &checkpoint, count),
        Command::Synth { common } => synth(&common),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig) -> Result<(NormalImageSet, LabeledTestSet)> {
    match &cfg.data.root {
        Some(root) => load_dataset(root, cfg.model.image_size, cfg.model.channels)
            .with_context(|| format!("loading dataset {}", root.display())),
        None => {
            if cfg.synthetic.image_size != cfg.model.image_size || cfg.synthetic.channels != cfg.model.channels {
                bail!("synthetic images do not match the model input size");
            }
            Ok(generate_synthetic(&cfg.synthetic)?)
        }
    }
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// File-system name for an image id such as `test/anomalous/img_001`.
fn file_stem(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

struct Recorder {
    curve: BufWriter<File>,
    checkpoints: PathBuf,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, r: &LossRecord) -> memae::Result<()> {
        writeln!(self.curve, "{},{},{},{}", r.epoch, r.step, r.loss, r.lr)?;
        Ok(())
    }

    fn on_checkpoint(&mut self, c: &Checkpoint) -> memae::Result<()> {
        self.curve.flush()?;
        save_checkpoint(c, self.checkpoints.join(format!("epoch_{:05}.ckpt", c.epoch)))
    }

    fn on_epoch_end(&mut self, epoch: usize, mean_loss: f64) {
        log::info!("epoch {epoch} mean loss {mean_loss:.6}");
    }
}

fn train(common: &Common, resume_from: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e.saturating_sub(1));
    }
    cfg.validate()?;
    let (train_set, _) = dataset(&cfg)?;
    log::info!("training on {} images", train_set.len());

    let curve_path = common.out_dir.join("loss_curve.csv");
    let fresh = !curve_path.exists();
    let file = OpenOptions::new().create(true).append(true).open(&curve_path)?;
    let mut curve = BufWriter::new(file);
    if fresh {
        writeln!(curve, "epoch,step,loss,lr")?;
    }
    let checkpoints = common.out_dir.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    let mut recorder = Recorder { curve, checkpoints };

    let outcome = match resume_from {
        Some(path) => {
            let mut ckpt = open_checkpoint(path)?;
            if ckpt.model.config() != &cfg.model {
                bail!("checkpoint model configuration differs from {}", config_name(common));
            }
            ckpt.train_config.epochs = cfg.train.epochs;
            memae::pipeline::resume(ckpt, &train_set, &mut recorder)?
        }
        None => train_with_observer(&train_set, &cfg.model, &cfg.train, &mut recorder)?,
    };
    recorder.curve.flush()?;
    let path = common.out_dir.join("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &path)?;
    fs::write(common.out_dir.join("config.toml"), cfg.to_toml_string())?;
    println!("checkpoint {}", path.display());
    Ok(())
}

fn config_name(common: &Common) -> String {
    common
        .config
        .as_ref()
        .map_or_else(|| "the default configuration".into(), |p| p.display().to_string())
}

fn score(common: &Common, checkpoint: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.scoring.base_seed = seed;
    }
    let ckpt = open_checkpoint(checkpoint)?;
    cfg.model = ckpt.model.config().clone();
    let (_, test) = dataset(&cfg)?;
    let (rows, results) = score_test_set(&ckpt, &test, &cfg.scoring)?;
    write_scores_csv(&common.out_dir.join("scores.csv"), &rows)?;
    let heatmaps = common.out_dir.join("heatmaps");
    fs::create_dir_all(&heatmaps)?;
    for (row, r) in rows.iter().zip(&results) {
        save_heatmap_png(&heatmaps.join(format!("{}.png", file_stem(&row.image_id))), &r.pixel_map)?;
    }
    println!("scored {} images into {}", rows.len(), common.out_dir.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, scores: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.eval.seed = seed;
    }
    let report = match (checkpoint, scores) {
        (_, Some(csv)) => {
            let rows = read_scores_csv(csv).with_context(|| format!("reading scores {}", csv.display()))?;
            evaluate(&rows, None, &cfg.eval, fingerprint(&cfg))?
        }
        (Some(path), None) => {
            let ckpt = open_checkpoint(path)?;
            cfg.model = ckpt.model.config().clone();
            let (_, test) = dataset(&cfg)?;
            evaluate_checkpoint(&ckpt, &test, &cfg.scoring, &cfg.eval, fingerprint(&cfg))?.0
        }
        (None, None) => bail!("eval needs --checkpoint or --scores"),
    };
    report.write_json(&common.out_dir.join("report.json"))?;
    println!("{report}");
    Ok(())
}

fn visualize(common: &Common, checkpoint: &Path, count: usize) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.scoring.base_seed = seed;
    }
    let ckpt = open_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    cfg.model = model.config().clone();
    let (_, test) = dataset(&cfg)?;
    let dir = common.out_dir.join("triptychs");
    fs::create_dir_all(&dir)?;
    let m = model.config();
    for entry in test.entries.iter().take(count) {
        let partition = sample_mask(m.num_patches(), cfg.scoring.mask_ratio, cfg.scoring.base_seed)?;
        let mut grid = patchify(&entry.image, m.patch_side)?;
        let pred = model.predict(&grid, &partition)?;
        for &i in &partition.masked_idx {
            grid.patches.row_mut(i).assign(&pred.patches.row(i));
        }
        let recon = unpatchify(&grid)?;
        let masked = masked_view(&entry.image, m.patch_side, &partition.masked_idx)?;
        let path = dir.join(format!("{}.png", file_stem(&entry.id)));
        save_triptych_png(&path, &masked, &recon, &entry.image)?;
    }
    println!("wrote {} triptychs to {}", count.min(test.len()), dir.display());
    Ok(())
}

fn synth(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.synthetic.seed = seed;
    }
    let (train_set, test) = generate_synthetic(&cfg.synthetic)?;
    materialize(&train_set, &test, &common.out_dir)?;
    println!(
        "wrote {} training and {} test images to {}",
        train_set.len(),
        test.len(),
        common.out_dir.display()
    );
    Ok(())
}
