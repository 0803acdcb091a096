//! A small trainable classifier for the classifier-based metrics: softmax
//! regression on per-cell colour means over a coarse grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, PairedSample};
use crate::metrics::Classifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridClassifier {
    pub n_classes: usize,
    pub grid: usize,
    pub channels: usize,
    /// Row-major `[n_classes, features + 1]`, bias last.
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub grid: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid: 4,
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Majority non-background class of the sample's semantic map, or 0.
pub fn dominant_class(sample: &PairedSample) -> Result<usize> {
    let labels = sample.target_semantic.labels()?;
    let mut counts = vec![0usize; sample.target_semantic.palette.len()];
    for l in labels {
        counts[l] += 1;
    }
    Ok((1..counts.len())
        .filter(|&c| counts[c] > 0)
        .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
        .unwrap_or(0))
}

impl GridClassifier {
    fn n_features(&self) -> usize {
        self.channels * self.grid * self.grid
    }

    /// Per-cell channel means, bias term last.
    pub fn features(grid: usize, img: &ImageTensor) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let mut out = Vec::with_capacity(img.channels() * grid * grid + 1);
        let signed = img.to_signed();
        for c in 0..img.channels() {
            for gy in 0..grid {
                for gx in 0..grid {
                    let (y0, y1) = (gy * h / grid, ((gy + 1) * h / grid).max(gy * h / grid + 1).min(h));
                    let (x0, x1) = (gx * w / grid, ((gx + 1) * w / grid).max(gx * w / grid + 1).min(w));
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += signed.get(c, y, x);
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out.push(1.0);
        out
    }

    /// Full-batch gradient descent on the cross-entropy.
    pub fn fit(images: &[ImageTensor], labels: &[usize], n_classes: usize, opts: FitOptions) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Data("classifier needs one label per image".into()));
        }
        if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::Data(format!("labels must lie in 0..{n_classes} with at least 2 classes")));
        }
        let channels = images[0].channels();
        let xs: Vec<Vec<f64>> = images.iter().map(|i| Self::features(opts.grid, i)).collect();
        let d = xs[0].len();
        let mut w = vec![0.0; n_classes * d];
        let n = xs.len() as f64;
        for _ in 0..opts.iterations {
            let mut grad = vec![0.0; n_classes * d];
            for (x, &y) in xs.iter().zip(labels) {
                let mut z: Vec<f64> = (0..n_classes).map(|k| (0..d).map(|j| w[k * d + j] * x[j]).sum()).collect();
                softmax(&mut z);
                z[y] -= 1.0;
                for k in 0..n_classes {
                    for j in 0..d {
                        grad[k * d + j] += z[k] * x[j] / n;
                    }
                }
            }
            for i in 0..w.len() {
                w[i] -= opts.learning_rate * (grad[i] + opts.l2 * w[i]);
            }
        }
        Ok(Self {
            n_classes,
            grid: opts.grid,
            channels,
            weights: w,
        })
    }

    /// Trains on the dominant object class of each sample's target view.
    pub fn fit_samples(samples: &[PairedSample], opts: FitOptions) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty training set".into()))?;
        let labels = samples.iter().map(dominant_class).collect::<Result<Vec<_>>>()?;
        let images: Vec<ImageTensor> = samples.iter().map(|s| s.target_image.clone()).collect();
        Self::fit(&images, &labels, first.target_semantic.palette.len(), opts)
    }

    pub fn accuracy(&self, images: &[ImageTensor], labels: &[usize]) -> f64 {
        let hits = images
            .iter()
            .zip(labels)
            .filter(|(img, &l)| crate::metrics::ranked_classes(&self.predict(img))[0] == l)
            .count();
        hits as f64 / images.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("classifier serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if c.weights.len() != c.n_classes * (c.n_features() + 1) {
            return Err(Error::Data(format!("{}: weight count does not match the grid", path.display())));
        }
        Ok(c)
    }
}

impl Classifier for GridClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict(&self, img: &ImageTensor) -> Vec<f64> {
        let x = Self::features(self.grid, img);
        let d = x.len();
        let mut z: Vec<f64> = (0..self.n_classes)
            .map(|k| (0..d).map(|j| self.weights[k * d + j] * x[j]).sum())
            .collect();
        softmax(&mut z);
        z
    }
}
