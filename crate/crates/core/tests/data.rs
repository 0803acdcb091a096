mod common;

use std::collections::BTreeSet;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selection_gan::data::{
    augment, generate_synthetic, load_dataset, synthesize, AugmentConfig, DataSource, DatasetManifest, SynthSpec,
    MANIFEST_FILE,
};
use selection_gan::image::{ImageTensor, PairedSample, SemanticMap, ValueRange};

use common::{random_tensor, rng};

#[test]
fn png_round_trip_is_within_one_level() {
    let mut r = rng(1);
    let data = random_tensor(&mut r, &[3 * 20 * 24], -1.0, 1.0).into_data();
    let img = ImageTensor::new(3, 20, 24, data, ValueRange::Signed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    img.save_png(&path).unwrap();
    let back = ImageTensor::load_png(&path).unwrap().to_signed();
    assert_eq!((back.channels(), back.height(), back.width()), (3, 20, 24));
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12, "{a} vs {b}");
    }
}

#[test]
fn empty_manifest_loads_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest {
        root: dir.path().to_path_buf(),
        entries: vec![],
        image_size: (16, 16),
        palette: SynthSpec::default().palette(),
    };
    let path = m.write().unwrap();
    let read = DatasetManifest::read(&path).unwrap();
    assert!(load_dataset(&read).unwrap().is_empty());
}

#[test]
fn synthetic_files_round_trip_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_samples: 3,
        image_size: 32,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let (loaded, palette) = DataSource::Manifest(dir.path().join(MANIFEST_FILE)).load().unwrap();
    assert_eq!(palette, spec.palette());
    let direct = synthesize(&spec).unwrap();
    assert_eq!(loaded.len(), 3);
    for (l, d) in loaded.iter().zip(&direct) {
        assert_eq!(l, &d.sample);
    }
}

#[test]
fn missing_file_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_samples: 3,
        image_size: 32,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    fs::remove_file(dir.path().join(&m.entries[1].target)).unwrap();
    let err = load_dataset(&m).unwrap_err().to_string();
    assert!(err.contains("synth_00001"), "{err}");
}

#[test]
fn resizes_to_declared_size() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_samples: 1,
        image_size: 32,
        ..SynthSpec::default()
    };
    let mut m = generate_synthetic(&spec, dir.path()).unwrap();
    m.image_size = (16, 24);
    let s = &load_dataset(&m).unwrap()[0];
    assert_eq!((s.height(), s.width()), (16, 24));
}

#[test]
fn synthetic_generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SynthSpec {
        n_samples: 4,
        image_size: 32,
        ..SynthSpec::default()
    };
    let ma = generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    let mut names: Vec<_> = ma
        .entries
        .iter()
        .flat_map(|e| [e.condition.clone(), e.target.clone(), e.semantic.clone()])
        .collect();
    names.push(MANIFEST_FILE.into());
    for n in names {
        let (x, y) = (fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        assert_eq!(x, y, "{}", n.display());
    }

    let empty = SynthSpec {
        n_samples: 0,
        ..spec
    };
    let m = generate_synthetic(&empty, a.path().join("empty").as_path()).unwrap();
    assert!(m.entries.is_empty());
    assert!(DatasetManifest::read(&a.path().join("empty").join(MANIFEST_FILE)).is_ok());
}

#[test]
fn semantic_classes_match_the_placement_record() {
    let spec = SynthSpec {
        n_samples: 30,
        shape_count: (1, 4),
        n_classes: 6,
        ..SynthSpec::default()
    };
    for s in synthesize(&spec).unwrap() {
        let got: BTreeSet<usize> = s.sample.target_semantic.labels().unwrap().into_iter().collect();
        let mut want: BTreeSet<usize> = s.objects.iter().map(|o| o.class).collect();
        want.insert(0);
        assert_eq!(got, want, "{}", s.sample.sample_id);
        let (lo, hi) = spec.shape_count;
        assert!((lo..=hi).contains(&s.objects.len()));
    }
}

#[test]
fn synthetic_spec_rejects_too_many_classes() {
    let spec = SynthSpec {
        n_classes: 10,
        ..SynthSpec::default()
    };
    assert!(synthesize(&spec).is_err());
}

/// A sample whose target image and semantic map are the same picture.
fn mirrored_sample(seed: u64) -> PairedSample {
    let s = synthesize(&SynthSpec {
        seed,
        n_samples: 1,
        image_size: 32,
        ..SynthSpec::default()
    })
    .unwrap()
    .remove(0)
    .sample;
    let sem = s.target_semantic.clone();
    PairedSample::new(
        s.condition_image,
        sem.image.clone(),
        SemanticMap::new(sem.image, sem.palette).unwrap(),
        s.sample_id,
    )
    .unwrap()
}

#[test]
fn augmentation_is_joint_and_deterministic() {
    let cfg = AugmentConfig::default();
    for seed in 0..20 {
        let s = mirrored_sample(seed);
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(a, b);
        assert_eq!(a.target_image, a.target_semantic.image);
        assert_eq!((a.height(), a.width()), (32, 32));
    }
    let never = AugmentConfig {
        flip_prob: 0.0,
        crop_fraction: 1.0,
    };
    let s = mirrored_sample(3);
    assert_eq!(augment(&s, &never, &mut ChaCha8Rng::seed_from_u64(0)), s);
}
