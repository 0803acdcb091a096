//! Overfits baseline H on eight synthetic samples and reports SSIM of the
//! refined output as training progresses.
//!
//! cargo run --release --example overfit -- [steps] [seed]

use std::time::Instant;

use selection_gan::config::FileConfig;
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::trainer::{evaluate_model, run_training, RunOptions, RunSetup, TrainState};

fn main() -> selection_gan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let samples: Vec<_> = synthesize(&SynthSpec::default())?.into_iter().map(|s| s.sample).collect();
    let cfg = FileConfig::desk();
    let wiring = cfg.wiring()?;
    let mut state = TrainState::new(&RunSetup {
        model: cfg.model,
        attention: cfg.attention,
        train: cfg.train,
        wiring,
        augment: None,
        image_size: (64, 64),
        seed,
    })?;
    println!("parameters: {}", state.model.parameter_count());
    let start = Instant::now();
    let chunk = 50.min(steps.max(1));
    while state.step < steps {
        let target = (state.step + chunk).min(steps);
        let trace = run_training(
            &mut state,
            &samples,
            &RunOptions {
                total_steps: target,
                batch_size: 4,
                checkpoint_every: None,
                out_dir: None,
            },
        )?;
        let scores = evaluate_model(&state.model, &samples, 4)?;
        let last = &trace.last().expect("at least one step").1;
        println!(
            "step {:4}  total {:9.4}  d {:.4}  ssim {:.4}  psnr {:.2}  [{:.0?}]",
            state.step,
            last.total,
            last.d_loss,
            scores.ssim,
            scores.psnr,
            start.elapsed()
        );
    }
    Ok(())
}
