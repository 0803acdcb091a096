//! Training objectives: L1 pixel maps, uncertainty guidance, the two-stage
//! conditional adversarial loss, total variation and their weighted total.

use serde::{Deserialize, Serialize};
use sg_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::{check_discriminator_input, NetworkParams};

/// The four reconstruction terms, in objective order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelTerm {
    /// `I_g'` vs `I_g`.
    CoarseImage,
    /// `S_g'` vs `S_g`.
    CoarseSemantic,
    /// `I_g''` vs `I_g`.
    RefinedImage,
    /// `S_g''` vs `S_g`.
    RefinedSemantic,
}

impl PixelTerm {
    pub const ALL: [PixelTerm; 4] = [
        PixelTerm::CoarseImage,
        PixelTerm::CoarseSemantic,
        PixelTerm::RefinedImage,
        PixelTerm::RefinedSemantic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PixelTerm::CoarseImage => "pixel_coarse_image",
            PixelTerm::CoarseSemantic => "pixel_coarse_semantic",
            PixelTerm::RefinedImage => "pixel_refined_image",
            PixelTerm::RefinedSemantic => "pixel_refined_semantic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub lambda_4: f64,
    /// Weight of the stage-II adversarial term.
    pub lambda_adv: f64,
    pub lambda_tv: f64,
    /// Pixel terms reweighted by the learned uncertainty maps, in map order.
    pub uncertainty_targets: Vec<PixelTerm>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Discriminator updates per generator update.
    pub d_updates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_1: 100.0,
            lambda_2: 1.0,
            lambda_3: 200.0,
            lambda_4: 2.0,
            lambda_adv: 4.0,
            lambda_tv: 1e-6,
            uncertainty_targets: vec![PixelTerm::CoarseSemantic, PixelTerm::RefinedSemantic],
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            d_updates: 1,
        }
    }
}

impl TrainConfig {
    pub fn pixel_weights(&self) -> [f64; 4] {
        [self.lambda_1, self.lambda_2, self.lambda_3, self.lambda_4]
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
            ("lambda_4", self.lambda_4),
            ("lambda_adv", self.lambda_adv),
            ("lambda_tv", self.lambda_tv),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0 || !c.is_finite()) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.d_updates == 0 {
            return Err(Error::Config("d_updates must be >= 1".into()));
        }
        let mut seen = self.uncertainty_targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.uncertainty_targets.len() {
            return Err(Error::Config("uncertainty_targets contains duplicates".into()));
        }
        Ok(())
    }
}

/// Reported components of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// `L_p^1..L_p^4` after uncertainty guidance; zero for absent terms.
    pub pixel: [f64; 4],
    pub adv_stage1: f64,
    pub adv_stage2: f64,
    pub tv: f64,
    pub total: f64,
    /// Discriminator loss of the same step (not part of `total`).
    pub d_loss: f64,
    /// Loss maps of the guided terms, `[B, 1, H, W]`, before guidance.
    pub per_pixel_maps: Vec<(PixelTerm, Tensor)>,
}

impl LossBreakdown {
    /// `Σ λ_i L_p^i + L_adv1 + λ L_adv2 + λ_tv L_tv` from the reported parts.
    pub fn recompose(&self, cfg: &TrainConfig) -> f64 {
        let w = cfg.pixel_weights();
        let pixel: f64 = (0..4).map(|i| w[i] * self.pixel[i]).sum();
        pixel + self.adv_stage1 + cfg.lambda_adv * self.adv_stage2 + cfg.lambda_tv * self.tv
    }

    pub const CSV_HEADER: &'static str = "step,pixel_coarse_image,pixel_coarse_semantic,pixel_refined_image,pixel_refined_semantic,adv_stage1,adv_stage2,tv,total,d_loss";

    /// One CSV record; floats use the shortest round-trip representation.
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.pixel[0], self.pixel[1], self.pixel[2], self.pixel[3], self.adv_stage1, self.adv_stage2, self.tv, self.total, self.d_loss
        )
    }
}

// ---- graph-level building blocks ----

/// `[B, 1, H, W]` map of channel-averaged absolute errors.
pub fn l1_map(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.channel_mean(a)
}

/// `mean(ℓ / u + ln u)`.
pub fn guided(g: &mut Graph, loss_map: Var, u: Var) -> Var {
    let q = g.div(loss_map, u);
    let l = g.log(u);
    let s = g.add(q, l);
    g.mean(s)
}

/// Recorded objective terms; `None` marks a term absent from the wiring.
#[derive(Clone, Debug, Default)]
pub struct ObjectiveTerms {
    pub pixel: [Option<Var>; 4],
    pub maps: Vec<(PixelTerm, Var)>,
    pub adv_stage1: Option<Var>,
    pub adv_stage2: Option<Var>,
    pub tv: Option<Var>,
}

/// Weighted total recorded on the graph.
pub fn objective(g: &mut Graph, cfg: &TrainConfig, terms: &ObjectiveTerms) -> Var {
    let w = cfg.pixel_weights();
    let mut parts: Vec<(Var, f64)> = Vec::new();
    for (i, p) in terms.pixel.iter().enumerate() {
        if let Some(v) = p {
            parts.push((*v, w[i]));
        }
    }
    if let Some(v) = terms.adv_stage1 {
        parts.push((v, 1.0));
    }
    if let Some(v) = terms.adv_stage2 {
        parts.push((v, cfg.lambda_adv));
    }
    if let Some(v) = terms.tv {
        parts.push((v, cfg.lambda_tv));
    }
    if parts.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    g.weighted_sum(&parts)
}

/// Reads the recorded terms back into a [`LossBreakdown`], failing on the
/// first non-finite component.
pub fn breakdown(g: &Graph, terms: &ObjectiveTerms, total: Var) -> Result<LossBreakdown> {
    let read = |v: Option<Var>, name: &str| -> Result<f64> {
        let x = v.map(|v| g.value(v).item()).unwrap_or(0.0);
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite { term: name.to_string() })
        }
    };
    let mut pixel = [0.0; 4];
    for t in PixelTerm::ALL {
        pixel[t.index()] = read(terms.pixel[t.index()], t.name())?;
    }
    Ok(LossBreakdown {
        pixel,
        adv_stage1: read(terms.adv_stage1, "adv_stage1")?,
        adv_stage2: read(terms.adv_stage2, "adv_stage2")?,
        tv: read(terms.tv, "tv")?,
        total: read(Some(total), "total")?,
        d_loss: 0.0,
        per_pixel_maps: terms.maps.iter().map(|(t, v)| (*t, g.value(*v).clone())).collect(),
    })
}

// ---- value-level operations ----

/// Per-pixel L1 map `[1, 1, H, W]`; its mean is the scalar loss.
pub fn pixel_l1_map(pred: &ImageTensor, target: &ImageTensor) -> Result<Tensor> {
    if !pred.same_shape(target) {
        return Err(Error::Shape("prediction and target differ in shape".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let t = g.constant(target.to_tensor());
    let m = l1_map(&mut g, p, t);
    Ok(g.value(m).clone())
}

/// `mean(ℓ / u + ln u)` for an uncertainty map already clamped to `[ε, 1]`.
pub fn uncertainty_guided(loss_map: &Tensor, u: &Tensor, epsilon_u: f64) -> Result<f64> {
    if loss_map.shape() != u.shape() {
        return Err(Error::Shape(format!(
            "loss map {:?} vs uncertainty {:?}",
            loss_map.shape(),
            u.shape()
        )));
    }
    if let Some(bad) = u.data().iter().find(|&&v| !(v >= epsilon_u && v <= 1.0)) {
        return Err(Error::Shape(format!("uncertainty value {bad} outside [{epsilon_u}, 1]")));
    }
    let mut g = Graph::new();
    let l = g.constant(loss_map.clone());
    let uv = g.constant(u.clone());
    let r = guided(&mut g, l, uv);
    Ok(g.value(r).item())
}

fn d_logits(g: &mut Graph, d: &NetworkParams, bound: &crate::params::Bound, a: Var, b: Var) -> Result<Var> {
    let spec = d.patch_gan_spec()?;
    let pair = g.concat(&[a, b]);
    Ok(spec.forward(g, bound, pair))
}

/// `(d_loss, g_loss)` for one sample.
///
/// `d_loss = -[(log σ(D(a,g)) + log(1-σ(D(a,g')))) + λ(log σ(D(a,g)) + log(1-σ(D(a,g''))))]`,
/// patch means throughout; `g_loss = -[log σ(D(a,g')) + λ log σ(D(a,g''))]`.
pub fn adversarial_losses(
    d: &NetworkParams,
    i_a: &ImageTensor,
    i_g: &ImageTensor,
    i_g1: &ImageTensor,
    i_g2: &ImageTensor,
    lambda_adv: f64,
) -> Result<(f64, f64)> {
    let spec = d.patch_gan_spec()?;
    for (name, im) in [("I_g", i_g), ("I_g'", i_g1), ("I_g''", i_g2)] {
        if !im.same_shape(i_a) {
            return Err(Error::Shape(format!("{name} differs in shape from I_a")));
        }
    }
    check_discriminator_input(&spec, 2 * i_a.channels(), i_a.height(), i_a.width())?;
    let mut g = Graph::new();
    let bound = d.tensors.bind(&mut g, false);
    let a = g.constant(i_a.to_tensor());
    let real = g.constant(i_g.to_tensor());
    let f1 = g.constant(i_g1.to_tensor());
    let f2 = g.constant(i_g2.to_tensor());
    let lr = d_logits(&mut g, d, &bound, a, real)?;
    let l1 = d_logits(&mut g, d, &bound, a, f1)?;
    let l2 = d_logits(&mut g, d, &bound, a, f2)?;
    let d_loss = discriminator_objective(&mut g, lr, l1, Some(l2), lambda_adv);
    let (g1, g2) = (g.bce_with_logits(l1, 1.0), g.bce_with_logits(l2, 1.0));
    let g_loss = g.weighted_sum(&[(g1, 1.0), (g2, lambda_adv)]);
    Ok((g.value(d_loss).item(), g.value(g_loss).item()))
}

/// Discriminator objective from patch logits, as a minimisation target.
pub fn discriminator_objective(g: &mut Graph, real: Var, fake1: Var, fake2: Option<Var>, lambda_adv: f64) -> Var {
    let r = g.bce_with_logits(real, 1.0);
    let f1 = g.bce_with_logits(fake1, 0.0);
    let mut parts = vec![(r, 1.0), (f1, 1.0)];
    if let Some(f2) = fake2 {
        let f2 = g.bce_with_logits(f2, 0.0);
        parts.push((r, lambda_adv));
        parts.push((f2, lambda_adv));
    }
    g.weighted_sum(&parts)
}

/// Anisotropic total variation of one image.
pub fn tv_regularization(img: &ImageTensor) -> Result<f64> {
    if img.height() < 2 || img.width() < 2 {
        return Err(Error::Shape(format!(
            "total variation needs at least 2x2, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor());
    let tv = g.total_variation(x);
    Ok(g.value(tv).item())
}

/// Scalar inputs of [`total_objective`].
#[derive(Clone, Debug, Default)]
pub struct ObjectiveInputs {
    /// Pixel loss maps `[1, 1, H, W]` per term, `None` when absent.
    pub pixel_maps: [Option<Tensor>; 4],
    /// Uncertainty maps aligned with `TrainConfig::uncertainty_targets`.
    pub uncertainties: Vec<Tensor>,
    pub adv_stage1: Option<f64>,
    pub adv_stage2: Option<f64>,
    pub tv: Option<f64>,
    pub epsilon_u: f64,
}

/// Applies guidance to the configured targets, weights every term and checks
/// that each component is finite.
pub fn total_objective(inputs: &ObjectiveInputs, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut pixel = [0.0; 4];
    let mut maps = Vec::new();
    let targets: Vec<PixelTerm> = cfg
        .uncertainty_targets
        .iter()
        .copied()
        .filter(|t| inputs.pixel_maps[t.index()].is_some())
        .collect();
    if !inputs.uncertainties.is_empty() && inputs.uncertainties.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} uncertainty maps for {} guided terms",
            inputs.uncertainties.len(),
            targets.len()
        )));
    }
    for t in PixelTerm::ALL {
        let Some(map) = &inputs.pixel_maps[t.index()] else { continue };
        let value = match targets.iter().position(|x| *x == t) {
            Some(k) if !inputs.uncertainties.is_empty() => {
                maps.push((t, map.clone()));
                uncertainty_guided(map, &inputs.uncertainties[k], inputs.epsilon_u)?
            }
            _ => map.mean(),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { term: t.name().into() });
        }
        pixel[t.index()] = value;
    }
    let check = |v: Option<f64>, name: &str| -> Result<f64> {
        let x = v.unwrap_or(0.0);
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite { term: name.into() })
        }
    };
    let mut b = LossBreakdown {
        pixel,
        adv_stage1: check(inputs.adv_stage1, "adv_stage1")?,
        adv_stage2: check(inputs.adv_stage2, "adv_stage2")?,
        tv: check(inputs.tv, "tv")?,
        total: 0.0,
        d_loss: 0.0,
        per_pixel_maps: maps,
    };
    b.total = b.recompose(cfg);
    Ok(b)
}
