//! Runs stage I and the multi-channel attention selection on a synthetic
//! sample, checks the per-pixel invariants and dumps every map.
//!
//! cargo run --release --example attention_selection -- [out_dir]

use std::path::PathBuf;

use selection_gan::attention::{dump_selection, forward_stage2, fused_channels, AttentionConfig, AttentionModuleParams};
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::networks::{build_image_generator, build_semantic_generator, default_depth, forward_stage1};
use selection_gan::params::InitSpec;

fn main() -> selection_gan::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "attention_out".into()));
    let sample = synthesize(&SynthSpec::default())?.remove(0).sample;
    let depth = default_depth(sample.height(), sample.width());
    let gi = build_image_generator(16, 6, 3, depth, InitSpec { std: 0.02, seed: 1 })?;
    let gs = build_semantic_generator(4, 3, 3, InitSpec { std: 0.02, seed: 2 })?;
    let cfg = AttentionConfig::default();
    let params = AttentionModuleParams::new(cfg.clone(), fused_channels(3, 16, 4), 3, InitSpec { std: 0.2, seed: 3 })?;

    let s1 = forward_stage1(&gi, &gs, &sample)?;
    let sel = forward_stage2(&s1, &sample, &gs, &params, &cfg)?;

    let pixels = sel.attentions[0].len();
    let mut worst = 0.0f64;
    let mut outside = 0;
    for p in 0..pixels {
        let sum: f64 = sel.attentions.iter().map(|a| a.data()[p]).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    for (i, v) in sel.refined_image.data().iter().enumerate() {
        let lo = sel.intermediates.iter().map(|m| m.data()[i]).fold(f64::INFINITY, f64::min);
        let hi = sel.intermediates.iter().map(|m| m.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        outside += usize::from(*v < lo - 1e-12 || *v > hi + 1e-12);
    }
    println!("{} intermediates, {} attention maps, {} uncertainty maps", sel.intermediates.len(), sel.attentions.len(), sel.uncertainties.len());
    println!("max |sum of attention - 1| = {worst:.2e}");
    println!("refined values outside the intermediate range: {outside}");
    for (k, u) in sel.uncertainties.iter().enumerate() {
        let (lo, hi) = u.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!("uncertainty {k}: [{lo:.4}, {hi:.4}]");
    }
    let written = dump_selection(&sel, &out)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}
