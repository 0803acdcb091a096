//! Trains baseline F at several attention widths N (N = 0 is baseline E)
//! and prints the scores.
//!
//! cargo run --release --example sweep -- [steps] [n_values] [seed]
//! e.g. `-- 200 0,1,5,10 0`

use selection_gan::config::FileConfig;
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::trainer::{attention_sweep, format_table, Experiment};

fn main() -> selection_gan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let n_values: Vec<usize> = args
        .next()
        .as_deref()
        .unwrap_or("0,1,5,10")
        .split(',')
        .map(|s| s.trim().parse().expect("bad N"))
        .collect();
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let samples: Vec<_> = synthesize(&SynthSpec::default())?.into_iter().map(|s| s.sample).collect();
    let cfg = FileConfig::desk();
    let exp = Experiment {
        model: cfg.model,
        attention: cfg.attention,
        train: cfg.train,
        augment: None,
        steps,
        batch_size: 4,
        seed,
    };
    let start = std::time::Instant::now();
    let rows = attention_sweep(&exp, &n_values, &samples, &samples)?;
    print!("{}", format_table("n", &rows));
    println!("# {:.0?}", start.elapsed());
    Ok(())
}
