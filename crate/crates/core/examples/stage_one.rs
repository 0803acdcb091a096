//! Runs the stage-I cycle on one synthetic sample with freshly initialised
//! generators and writes the coarse image and reconstructed semantic map.
//!
//! cargo run --release --example stage_one -- [out_dir]

use std::path::PathBuf;

use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::networks::{build_image_generator, build_semantic_generator, default_depth, forward_stage1, parameter_count};
use selection_gan::params::InitSpec;

fn main() -> selection_gan::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "stage_one_out".into()));
    let sample = synthesize(&SynthSpec::default())?.remove(0).sample;
    let (h, w) = (sample.height(), sample.width());
    let depth = default_depth(h, w);
    let gi = build_image_generator(16, 6, 3, depth, InitSpec { std: 0.02, seed: 1 })?;
    let gs = build_semantic_generator(4, 3, 3, InitSpec { std: 0.02, seed: 2 })?;
    println!("G_i depth {depth}: {} parameters", parameter_count(&gi.arch));
    println!("G_s: {} parameters", parameter_count(&gs.arch));

    let s1 = forward_stage1(&gi, &gs, &sample)?;
    println!("coarse image     {}x{}x{}", s1.coarse_image.channels(), s1.coarse_image.height(), s1.coarse_image.width());
    println!("image features   {:?}", s1.image_features.shape());
    println!("semantic features {:?}", s1.semantic_features.shape());

    std::fs::create_dir_all(&out).expect("create output directory");
    s1.coarse_image.save_png(&out.join("coarse.png"))?;
    s1.recon_semantic.image.save_png(&out.join("semantic_reconstruction.png"))?;
    sample.target_image.save_png(&out.join("target.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
