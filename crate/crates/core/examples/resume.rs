//! Trains with periodic checkpoints, restarts from the middle checkpoint and
//! confirms the resumed run retraces the uninterrupted one.
//!
//! cargo run --release --example resume -- [steps] [out_dir]

use std::path::PathBuf;

use selection_gan::config::FileConfig;
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::trainer::{checkpoint_path, run_training, RunOptions, RunSetup, TrainState, LOG_FILE};

fn setup() -> selection_gan::Result<RunSetup> {
    let cfg = FileConfig::desk();
    Ok(RunSetup {
        wiring: cfg.wiring()?,
        model: cfg.model,
        attention: cfg.attention,
        train: cfg.train,
        augment: cfg.augment,
        image_size: (64, 64),
        seed: 0,
    })
}

fn main() -> selection_gan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "resume_out".into()));
    let samples: Vec<_> = synthesize(&SynthSpec::default())?.into_iter().map(|s| s.sample).collect();
    let half = steps / 2;
    let opts = |total: u64, dir: &str| RunOptions {
        total_steps: total,
        batch_size: 4,
        checkpoint_every: Some(half.max(1)),
        out_dir: Some(root.join(dir)),
    };

    let mut straight = TrainState::new(&setup()?)?;
    run_training(&mut straight, &samples, &opts(steps, "straight"))?;

    let mut first = TrainState::new(&setup()?)?;
    run_training(&mut first, &samples, &opts(half, "split"))?;
    let mut resumed = TrainState::load(&checkpoint_path(&root.join("split"), half))?;
    println!("resumed at step {}", resumed.step);
    run_training(&mut resumed, &samples, &opts(steps, "split"))?;

    let read = |dir: &str| std::fs::read_to_string(root.join(dir).join(LOG_FILE)).unwrap_or_default();
    println!("loss logs identical: {}", read("straight") == read("split"));
    println!("final states identical: {}", straight == resumed);
    Ok(())
}
