//! Trains the tiny profile on generated textures and reports detection AUC.
//!
//! `cargo run --release -p memae --example train_synthetic -- [run.toml] [model.ckpt] [epochs] [n_train]`
//!
//! An existing checkpoint is loaded instead of training; otherwise the trained
//! one is saved there.

use std::time::Instant;

use memae::evalharness::{evaluate_checkpoint, fingerprint, generate_synthetic, RunConfig, SyntheticSpec};
use memae::pipeline::{load_checkpoint, save_checkpoint, train_with_observer, TrainObserver};

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch_end(&mut self, epoch: usize, mean_loss: f64) {
        if epoch == 1 || epoch % 10 == 0 {
            println!("epoch {epoch:4}  loss {mean_loss:.5}");
        }
    }
}

fn main() -> memae::Result<()> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match raw.iter().find(|a| a.ends_with(".toml")) {
        Some(path) => RunConfig::load(std::path::Path::new(path))?,
        None => RunConfig::tiny(),
    };
    let args: Vec<usize> = raw.iter().filter_map(|a| a.parse().ok()).collect();
    cfg.train.epochs = args.first().copied().unwrap_or(cfg.train.epochs);
    cfg.synthetic = SyntheticSpec {
        n_train: args.get(1).copied().unwrap_or(200),
        ..cfg.synthetic
    };
    let (train, test) = generate_synthetic(&cfg.synthetic)?;
    let ckpt_path = raw.iter().find(|a| a.ends_with(".ckpt")).map(std::path::PathBuf::from);
    let checkpoint = match &ckpt_path {
        Some(p) if p.is_file() => load_checkpoint(p)?,
        _ => {
            let start = Instant::now();
            let outcome = train_with_observer(&train, &cfg.model, &cfg.train, &mut Progress)?;
            let secs = start.elapsed().as_secs_f64();
            println!(
                "trained {} epochs in {secs:.1}s ({:.2} ms per image step)",
                cfg.train.epochs,
                1e3 * secs / (cfg.train.epochs * train.len()) as f64
            );
            if let Some(p) = &ckpt_path {
                save_checkpoint(&outcome.checkpoint, p)?;
            }
            outcome.checkpoint
        }
    };
    let start = Instant::now();
    let (report, _) = evaluate_checkpoint(&checkpoint, &test, &cfg.scoring, &cfg.eval, fingerprint(&cfg))?;
    println!("scored in {:.1}s\n{report}", start.elapsed().as_secs_f64());
    Ok(())
}
