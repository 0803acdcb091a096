//! Evaluation metrics: SSIM, PSNR, sharpness difference, KL score,
//! Inception Score, top-k accuracy and segmentation scores.
//!
//! Pixel metrics work in `[0, 255]`; generated images are mapped from
//! `[-1, 1]` with round-to-nearest before scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, SemanticMap};

/// PSNR and SD value reported for a zero error.
pub const DB_CAP: f64 = 100.0;
const PEAK: f64 = 255.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
/// Floor applied to classifier posteriors inside logarithms.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

fn byte_pair(a: &ImageTensor, b: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
    if !a.same_shape(b) {
        return Err(Error::Metric(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok((a.to_byte_space(), b.to_byte_space()))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (σ = 1.5), averaged over
/// all valid window positions and then over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += acc / n as f64;
    }
    Ok(total / a.channels() as f64)
}

fn to_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        DB_CAP
    } else {
        (10.0 * (PEAK * PEAK / mse).log10()).min(DB_CAP)
    }
}

/// `10 log10(255² / MSE)`, [`DB_CAP`] for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(to_db(mse))
}

/// `|I(i,j) - I(i-1,j)| + |I(i,j) - I(i,j-1)|` over `i, j >= 1`.
fn gradient_magnitude(img: &ImageTensor, c: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity((h - 1) * (w - 1));
    for y in 1..h {
        for x in 1..w {
            let v = img.get(c, y, x);
            out.push((v - img.get(c, y - 1, x)).abs() + (v - img.get(c, y, x - 1)).abs());
        }
    }
    out
}

/// Sharpness difference: PSNR-style score of the mean absolute difference
/// between the two images' gradient magnitudes.
pub fn sharpness_difference(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    if a.height() < 2 || a.width() < 2 {
        return Err(Error::Metric("sharpness difference needs at least 2x2 images".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for c in 0..a.channels() {
        let (ga, gb) = (gradient_magnitude(&a, c), gradient_magnitude(&b, c));
        acc += ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        n += ga.len();
    }
    Ok(to_db(acc / n as f64))
}

/// A classifier mapping an image to a distribution over classes.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn predict(&self, img: &ImageTensor) -> Vec<f64>;
}

/// Runs the classifier and checks that it produced a distribution.
pub fn posterior(clf: &dyn Classifier, img: &ImageTensor) -> Result<Vec<f64>> {
    let p = clf.predict(img);
    if p.len() != clf.n_classes() {
        return Err(Error::Metric(format!(
            "classifier returned {} probabilities for {} classes",
            p.len(),
            clf.n_classes()
        )));
    }
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-5 {
        return Err(Error::Metric(format!("classifier output is not a distribution (sum {s})")));
    }
    Ok(p)
}

/// `KL(p ‖ q)` with both distributions floored at [`POSTERIOR_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(POSTERIOR_FLOOR);
            let b = b.max(POSTERIOR_FLOOR);
            a * (a / b).ln()
        })
        .sum()
}

/// Per-pair `KL(p(y|fake) ‖ p(y|real))`.
pub fn kl_values(real: &[ImageTensor], fake: &[ImageTensor], clf: &dyn Classifier) -> Result<Vec<f64>> {
    if real.len() != fake.len() {
        return Err(Error::Metric(format!("{} real vs {} fake images", real.len(), fake.len())));
    }
    real.iter()
        .zip(fake)
        .map(|(r, f)| Ok(kl_divergence(&posterior(clf, f)?, &posterior(clf, r)?)))
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// KL score as `(mean, std)` over corresponding pairs.
pub fn kl_score(real: &[ImageTensor], fake: &[ImageTensor], clf: &dyn Classifier) -> Result<(f64, f64)> {
    Ok(mean_std(&kl_values(real, fake, clf)?))
}

/// Inception Score from precomputed posteriors.
pub fn inception_score_from_posteriors(posteriors: &[Vec<f64>], n_splits: usize) -> Result<f64> {
    if n_splits == 0 || posteriors.len() < n_splits {
        return Err(Error::Metric(format!(
            "{} images cannot fill {n_splits} non-empty splits",
            posteriors.len()
        )));
    }
    let n_classes = posteriors[0].len();
    let size = posteriors.len() / n_splits;
    let mut scores = Vec::with_capacity(n_splits);
    for split in posteriors.chunks(size).take(n_splits) {
        let mut marginal = vec![0.0; n_classes];
        for p in split {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / split.len() as f64;
            }
        }
        let mean_kl = split
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(&a, _)| a > 0.0)
                    .map(|(&a, &m)| a * (a / m).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / split.len() as f64;
        scores.push(mean_kl.clamp(0.0, (n_classes as f64).ln()).exp());
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))`, averaged over `n_splits` equal partitions.
pub fn inception_score(fake: &[ImageTensor], clf: &dyn Classifier, n_splits: usize) -> Result<f64> {
    let posteriors = fake.iter().map(|f| posterior(clf, f)).collect::<Result<Vec<_>>>()?;
    inception_score_from_posteriors(&posteriors, n_splits)
}

/// Class indices sorted by descending probability, ties to the lower index.
pub fn ranked_classes(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// `(variant A, variant B)` from paired posteriors; see [`topk_accuracy`].
pub fn topk_from_posteriors(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Metric("top-k needs equal, non-empty paired sets".into()));
    }
    let n_classes = real[0].len();
    if k == 0 || k > n_classes {
        return Err(Error::Metric(format!("k = {k} outside 1..={n_classes}")));
    }
    let (mut a, mut b) = (0usize, 0usize);
    for (r, f) in real.iter().zip(fake) {
        let truth = ranked_classes(r)[0];
        let ranked = ranked_classes(f);
        if ranked[0] == truth {
            a += 1;
        }
        if ranked[..k].contains(&truth) {
            b += 1;
        }
    }
    let n = real.len() as f64;
    Ok((a as f64 / n, b as f64 / n))
}

/// Variant A: fraction of pairs whose top-1 classes agree. Variant B:
/// fraction where the real image's top-1 class is in the fake's top-k.
pub fn topk_accuracy(real: &[ImageTensor], fake: &[ImageTensor], clf: &dyn Classifier, k: usize) -> Result<(f64, f64)> {
    if real.len() != fake.len() {
        return Err(Error::Metric(format!("{} real vs {} fake images", real.len(), fake.len())));
    }
    let pr = real.iter().map(|x| posterior(clf, x)).collect::<Result<Vec<_>>>()?;
    let pf = fake.iter().map(|x| posterior(clf, x)).collect::<Result<Vec<_>>>()?;
    topk_from_posteriors(&pr, &pf, k)
}

/// Raw counts for accumulating segmentation scores over several maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub gt: Vec<u64>,
    pub pred: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        Self {
            intersection: vec![0; n_classes],
            gt: vec![0; n_classes],
            pred: vec![0; n_classes],
        }
    }

    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if pred.palette != gt.palette {
            return Err(Error::Metric("prediction and ground truth use different palettes".into()));
        }
        if !pred.image.same_size(&gt.image) {
            return Err(Error::Metric("semantic maps differ in size".into()));
        }
        let (lp, lg) = (pred.labels()?, gt.labels()?);
        for (&p, &g) in lp.iter().zip(&lg) {
            self.pred[p] += 1;
            self.gt[g] += 1;
            if p == g {
                self.intersection[g] += 1;
            }
        }
        Ok(())
    }

    /// `(per-class accuracy, mean IoU)` over classes present in the ground truth.
    pub fn scores(&self) -> (f64, f64) {
        let (mut acc, mut iou, mut n) = (0.0, 0.0, 0usize);
        for c in 0..self.gt.len() {
            if self.gt[c] == 0 {
                continue;
            }
            let inter = self.intersection[c] as f64;
            acc += inter / self.gt[c] as f64;
            iou += inter / (self.gt[c] + self.pred[c] - self.intersection[c]) as f64;
            n += 1;
        }
        if n == 0 {
            (0.0, 0.0)
        } else {
            (acc / n as f64, iou / n as f64)
        }
    }
}

/// `(per-class accuracy, mean IoU)` of one predicted semantic map.
pub fn segmentation_scores(pred: &SemanticMap, gt: &SemanticMap) -> Result<(f64, f64)> {
    if gt.palette.is_empty() {
        return Err(Error::Metric("empty palette".into()));
    }
    let mut counts = ConfusionCounts::new(gt.palette.len());
    counts.add(pred, gt)?;
    Ok(counts.scores())
}

/// Aggregate evaluation report; absent metrics are omitted from JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inception_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_acc: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5_acc: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    pub n_images: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ssim,
    Psnr,
    Sd,
    Kl,
    Is,
    Topk,
    Seg,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "ssim" => Metric::Ssim,
            "psnr" => Metric::Psnr,
            "sd" => Metric::Sd,
            "kl" => Metric::Kl,
            "is" | "inception" => Metric::Is,
            "topk" | "top-k" => Metric::Topk,
            "seg" | "miou" => Metric::Seg,
            other => return Err(Error::Config(format!("unknown metric `{other}`"))),
        })
    }
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Ssim,
        Metric::Psnr,
        Metric::Sd,
        Metric::Kl,
        Metric::Is,
        Metric::Topk,
        Metric::Seg,
    ];

    pub fn needs_classifier(self) -> bool {
        matches!(self, Metric::Kl | Metric::Is | Metric::Topk)
    }
}

/// Per-image values written alongside the aggregate report.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PerImageRow {
    pub sample_id: String,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub sd: Option<f64>,
    pub kl: Option<f64>,
}

impl PerImageRow {
    pub const CSV_HEADER: &'static str = "sample_id,ssim,psnr,sd,kl";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.sample_id, f(self.ssim), f(self.psnr), f(self.sd), f(self.kl))
    }
}

/// Paired evaluation set, sorted by id before scoring.
pub struct EvalSet<'a> {
    pub ids: Vec<String>,
    pub real: Vec<ImageTensor>,
    pub fake: Vec<ImageTensor>,
    pub real_semantic: Vec<SemanticMap>,
    pub fake_semantic: Vec<SemanticMap>,
    pub classifier: Option<&'a dyn Classifier>,
    pub inception_splits: usize,
}

/// Computes the requested metrics. Classifier metrics are skipped (with a
/// warning) when no classifier is supplied; segmentation scores need
/// semantic maps.
pub fn evaluate(set: &EvalSet<'_>, metrics: &[Metric]) -> Result<(MetricsReport, Vec<PerImageRow>)> {
    if set.real.len() != set.fake.len() || set.ids.len() != set.real.len() {
        return Err(Error::Metric("evaluation sets are not paired".into()));
    }
    let want = |m: Metric| metrics.contains(&m);
    let mut order: Vec<usize> = (0..set.ids.len()).collect();
    order.sort_by(|&a, &b| set.ids[a].cmp(&set.ids[b]));
    let mut rows: Vec<PerImageRow> = order
        .iter()
        .map(|&i| PerImageRow {
            sample_id: set.ids[i].clone(),
            ..Default::default()
        })
        .collect();
    let mut report = MetricsReport {
        n_images: order.len(),
        ..Default::default()
    };
    type PixelMetric = fn(&ImageTensor, &ImageTensor) -> Result<f64>;
    let pixel: [(Metric, PixelMetric); 3] = [(Metric::Ssim, ssim), (Metric::Psnr, psnr), (Metric::Sd, sharpness_difference)];
    for (m, f) in pixel {
        if !want(m) {
            continue;
        }
        let mut values = Vec::with_capacity(order.len());
        for (row, &i) in rows.iter_mut().zip(&order) {
            let v = f(&set.real[i], &set.fake[i])?;
            match m {
                Metric::Ssim => row.ssim = Some(v),
                Metric::Psnr => row.psnr = Some(v),
                _ => row.sd = Some(v),
            }
            values.push(v);
        }
        let mean = mean_std(&values).0;
        match m {
            Metric::Ssim => report.ssim = Some(mean),
            Metric::Psnr => report.psnr = Some(mean),
            _ => report.sd = Some(mean),
        }
    }
    let classifier_metrics: Vec<Metric> = metrics.iter().copied().filter(|m| m.needs_classifier()).collect();
    match set.classifier {
        None if !classifier_metrics.is_empty() => {
            log::warn!("no classifier given; skipping {classifier_metrics:?}");
        }
        Some(clf) if !classifier_metrics.is_empty() => {
            let pr = order.iter().map(|&i| posterior(clf, &set.real[i])).collect::<Result<Vec<_>>>()?;
            let pf = order.iter().map(|&i| posterior(clf, &set.fake[i])).collect::<Result<Vec<_>>>()?;
            if want(Metric::Kl) {
                let kls: Vec<f64> = pf.iter().zip(&pr).map(|(f, r)| kl_divergence(f, r)).collect();
                for (row, v) in rows.iter_mut().zip(&kls) {
                    row.kl = Some(*v);
                }
                let (m, s) = mean_std(&kls);
                report.kl_mean = Some(m);
                report.kl_std = Some(s);
            }
            if want(Metric::Is) {
                let splits = set.inception_splits.clamp(1, pf.len().max(1));
                report.inception_score = Some(inception_score_from_posteriors(&pf, splits)?);
            }
            if want(Metric::Topk) {
                let n = clf.n_classes();
                let (a1, b1) = topk_from_posteriors(&pr, &pf, 1)?;
                let (a5, b5) = topk_from_posteriors(&pr, &pf, 5.min(n))?;
                report.top1_acc = Some([a1, b1]);
                report.top5_acc = Some([a5, b5]);
            }
        }
        _ => {}
    }
    if want(Metric::Seg) {
        if set.real_semantic.len() != set.fake_semantic.len() || set.real_semantic.is_empty() {
            log::warn!("segmentation scores need paired semantic maps; skipping");
        } else {
            let mut counts = ConfusionCounts::new(set.real_semantic[0].palette.len());
            for (p, g) in set.fake_semantic.iter().zip(&set.real_semantic) {
                counts.add(p, g)?;
            }
            let (acc, iou) = counts.scores();
            report.per_class_acc = Some(acc);
            report.mean_iou = Some(iou);
        }
    }
    Ok((report, rows))
}
