//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::image::PairedSample;
use selection_gan::params::{Bound, ParamSet};
use sg_autodiff::gradcheck::relative_error;
use sg_autodiff::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Derivatives smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// A parameter set with every tensor redrawn from `U(lo, hi)`.
pub fn randomized(set: &ParamSet, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ParamSet {
    let mut out = set.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    out
}

pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    let spec = SynthSpec {
        seed,
        n_samples: n,
        image_size: size,
        ..SynthSpec::default()
    };
    synthesize(&spec).unwrap().into_iter().map(|s| s.sample).collect()
}

/// One sampled coordinate of a gradient check.
#[derive(Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn error(&self) -> f64 {
        relative_error(self.analytic, self.numeric, FD_FLOOR)
    }
}

fn scalar_loss(params: &ParamSet, build: &dyn Fn(&mut Graph, &Bound) -> Var) -> f64 {
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let out = build(&mut g, &b);
    g.value(out).item()
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences on `count` parameter coordinates. Every tensor contributes
/// at least a few coordinates; the rest are drawn uniformly.
pub fn check_gradients(
    params: &ParamSet,
    count: usize,
    seed: u64,
    build: &dyn Fn(&mut Graph, &Bound) -> Var,
) -> Vec<GradSample> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = build(&mut g, &bound);
    let grads = g.backward(loss);

    let mut rng = rng(seed);
    let names: Vec<String> = params.names().cloned().collect();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let len = params.get(name).unwrap().len();
        for _ in 0..len.min(3) {
            picks.push((k, rng.gen_range(0..len)));
        }
    }
    let total = params.scalar_count();
    while picks.len() < count {
        let mut flat = rng.gen_range(0..total);
        for (k, name) in names.iter().enumerate() {
            let len = params.get(name).unwrap().len();
            if flat < len {
                picks.push((k, flat));
                break;
            }
            flat -= len;
        }
    }

    picks
        .into_iter()
        .map(|(k, index)| {
            let name = &names[k];
            let analytic = grads
                .get(bound.var(name))
                .map(|t| t.data()[index])
                .unwrap_or(0.0);
            let mut shifted = params.clone();
            let orig = params.get(name).unwrap().data()[index];
            shifted.get_mut(name).unwrap().data_mut()[index] = orig + FD_STEP;
            let plus = scalar_loss(&shifted, build);
            shifted.get_mut(name).unwrap().data_mut()[index] = orig - FD_STEP;
            let minus = scalar_loss(&shifted, build);
            GradSample {
                name: name.clone(),
                index,
                analytic,
                numeric: (plus - minus) / (2.0 * FD_STEP),
            }
        })
        .collect()
}

pub fn max_error(samples: &[GradSample]) -> f64 {
    samples.iter().map(GradSample::error).fold(0.0, f64::max)
}

pub fn worst(samples: &[GradSample]) -> &GradSample {
    samples
        .iter()
        .max_by(|a, b| a.error().total_cmp(&b.error()))
        .expect("non-empty sample")
}
