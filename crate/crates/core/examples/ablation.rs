//! Trains a set of ablation baselines on the synthetic set and prints one
//! CSV table per seed.
//!
//! cargo run --release --example ablation -- [steps] [seeds] [baselines]
//! e.g. `-- 200 0,1 A,C,H`

use selection_gan::config::FileConfig;
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::trainer::{format_table, run_ablation, Experiment};

fn list<T: std::str::FromStr>(arg: Option<String>, default: &str) -> Vec<T> {
    arg.as_deref()
        .unwrap_or(default)
        .split(',')
        .map(|s| s.trim().parse().ok().expect("bad list item"))
        .collect()
}

fn main() -> selection_gan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seeds: Vec<u64> = list(args.next(), "0");
    let baselines: Vec<char> = list(args.next(), "A,C,E,F");
    let samples: Vec<_> = synthesize(&SynthSpec::default())?.into_iter().map(|s| s.sample).collect();
    let cfg = FileConfig::desk();
    for seed in seeds {
        let exp = Experiment {
            model: cfg.model.clone(),
            attention: cfg.attention.clone(),
            train: cfg.train.clone(),
            augment: None,
            steps,
            batch_size: 4,
            seed,
        };
        let start = std::time::Instant::now();
        let rows = run_ablation(&exp, &baselines, &samples, &samples)?;
        println!("# seed {seed} ({:.0?})", start.elapsed());
        print!("{}", format_table("baseline", &rows));
    }
    Ok(())
}
