//! Scores increasingly noisy copies of the synthetic targets with every
//! metric, using a classifier fitted on the same set.
//!
//! cargo run --release --example evaluate

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selection_gan::classifier::{FitOptions, GridClassifier};
use selection_gan::data::{synthesize, SynthSpec};
use selection_gan::image::{ImageTensor, ValueRange};
use selection_gan::metrics::{evaluate, Classifier, EvalSet, Metric};

fn noisy(img: &ImageTensor, amp: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
    let data = img
        .to_signed()
        .data()
        .iter()
        .map(|v| (v + rng.gen_range(-amp..=amp)).clamp(-1.0, 1.0))
        .collect();
    ImageTensor::new(img.channels(), img.height(), img.width(), data, ValueRange::Signed).expect("same shape")
}

fn main() -> selection_gan::Result<()> {
    let spec = SynthSpec {
        n_samples: 32,
        ..SynthSpec::default()
    };
    let samples: Vec<_> = synthesize(&spec)?.into_iter().map(|s| s.sample).collect();
    let clf = GridClassifier::fit_samples(&samples, FitOptions::default())?;
    println!("classifier: {} classes", clf.n_classes());

    let metrics = [Metric::Ssim, Metric::Psnr, Metric::Sd, Metric::Kl, Metric::Is, Metric::Topk];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for amp in [0.0, 0.05, 0.2, 0.5] {
        let set = EvalSet {
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            real: samples.iter().map(|s| s.target_image.clone()).collect(),
            fake: samples.iter().map(|s| noisy(&s.target_image, amp, &mut rng)).collect(),
            real_semantic: Vec::new(),
            fake_semantic: Vec::new(),
            classifier: Some(&clf),
            inception_splits: 4,
        };
        let (report, _) = evaluate(&set, &metrics)?;
        println!("noise {amp:<5} {}", serde_json::to_string(&report).expect("report serialises"));
    }
    Ok(())
}
