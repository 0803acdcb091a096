//! Independent reference implementations used by several test targets.

use selection_gan::image::ImageTensor;
use selection_gan::metrics::Classifier;

/// SSIM written straight from its definition: centred moments under a
/// 2-D Gaussian window at every valid position.
pub fn ssim_reference(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (h, w) = (a.height(), a.width());
    let mut per_channel = 0.0;
    for c in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i][j] / total;
                        ma += wt * a.get(c, y + i, x + j);
                        mb += wt * b.get(c, y + i, x + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i][j] / total;
                        let da = a.get(c, y + i, x + j) - ma;
                        let db = b.get(c, y + i, x + j) - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / a.channels() as f64
}

/// Sharpness difference by enumeration of the gradient maps.
pub fn sd_reference(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let grad = |im: &ImageTensor, c: usize, y: usize, x: usize| {
        (im.get(c, y, x) - im.get(c, y - 1, x)).abs() + (im.get(c, y, x) - im.get(c, y, x - 1)).abs()
    };
    let (mut sum, mut n) = (0.0, 0.0);
    for c in 0..a.channels() {
        for y in 1..a.height() {
            for x in 1..a.width() {
                sum += (grad(a, c, y, x) - grad(b, c, y, x)).abs();
                n += 1.0;
            }
        }
    }
    if sum == 0.0 {
        100.0
    } else {
        10.0 * (255.0f64 * 255.0 / (sum / n)).log10()
    }
}

/// Classifier stub: the posterior is looked up by the image's first value.
pub struct Lookup(pub Vec<Vec<f64>>);

impl Classifier for Lookup {
    fn n_classes(&self) -> usize {
        self.0[0].len()
    }
    fn predict(&self, img: &ImageTensor) -> Vec<f64> {
        self.0[img.data()[0] as usize].clone()
    }
}

/// Grid minimiser of `l/u + ln u` over `[eps, 1]`.
pub fn grid_argmin(l: f64, eps: f64, points: usize) -> f64 {
    (0..points)
        .map(|i| eps + (1.0 - eps) * i as f64 / (points - 1) as f64)
        .min_by(|a, b| (l / a + a.ln()).total_cmp(&(l / b + b.ln())))
        .unwrap()
}

/// Mean of every vertical and horizontal absolute neighbour difference.
pub fn tv_oracle(im: &ImageTensor) -> f64 {
    let (c, h, w) = (im.channels(), im.height(), im.width());
    let mut diffs = Vec::new();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    diffs.push((im.get(ch, i + 1, j) - im.get(ch, i, j)).abs());
                }
                if j + 1 < w {
                    diffs.push((im.get(ch, i, j + 1) - im.get(ch, i, j)).abs());
                }
            }
        }
    }
    diffs.iter().sum::<f64>() / diffs.len() as f64
}
