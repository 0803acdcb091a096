//! Multi-channel attention selection (`G_a`).
//!
//! Stage-I outputs are fused into `F_c = concat(I_a, I_g', F_i, F_s)`,
//! refined by multi-scale spatial pooling into `F_c'`, and decoded into `N`
//! intermediate images `I_G^i = tanh(conv(F_c'))` plus `N` softmax-normalised
//! attention maps `I_A^i`. The refined image is the pixel-wise convex
//! combination `I_g'' = Σ_i I_A^i ⊗ I_G^i`. A 1x1 convolution over the
//! stacked attention maps yields `K` uncertainty maps
//! `U_k = max(σ(conv(I_A)), ε_u)` that reweight selected pixel losses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sg_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, PairedSample, SemanticMap, ValueRange};
use crate::networks::{NetworkParams, StageOneOutput};
use crate::params::{Bound, InitSpec, Initializer, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Number of intermediate generations / attention maps `N`.
    pub n_channels: usize,
    /// Pooling windows `{s_i}`; empty disables multi-scale pooling.
    pub pool_scales: Vec<usize>,
    /// Number of uncertainty maps `K`.
    pub uncertainty_count: usize,
    pub gen_kernel: usize,
    pub attn_kernel: usize,
    pub epsilon_u: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_channels: 10,
            pool_scales: vec![2, 4, 8],
            uncertainty_count: 2,
            gen_kernel: 3,
            attn_kernel: 1,
            epsilon_u: 1e-3,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Config("attention n_channels must be >= 1".into()));
        }
        if self.pool_scales.iter().any(|&s| s == 0) {
            return Err(Error::Config("pool scales must be positive".into()));
        }
        for (name, k) in [("gen_kernel", self.gen_kernel), ("attn_kernel", self.attn_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and positive, got {k}")));
            }
        }
        if !(self.epsilon_u > 0.0 && self.epsilon_u < 1.0) {
            return Err(Error::Config(format!("epsilon_u must lie in (0, 1), got {}", self.epsilon_u)));
        }
        Ok(())
    }

    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        for &s in &self.pool_scales {
            if height % s != 0 || width % s != 0 {
                return Err(Error::Shape(format!("pool scale {s} does not divide {height}x{width}")));
            }
        }
        Ok(())
    }
}

/// Learned filters of the selection module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModuleParams {
    pub config: AttentionConfig,
    /// Channels of `F_c`.
    pub feature_channels: usize,
    pub image_channels: usize,
    pub tensors: ParamSet,
    pub init: InitSpec,
}

/// Channel count of `F_c` for the given stage-I widths.
pub fn fused_channels(image_channels: usize, gi_filters: usize, gs_filters: usize) -> usize {
    2 * image_channels + gi_filters + gs_filters
}

impl AttentionModuleParams {
    pub fn new(config: AttentionConfig, feature_channels: usize, image_channels: usize, init: InitSpec) -> Result<Self> {
        config.validate()?;
        if feature_channels == 0 || image_channels == 0 {
            return Err(Error::Config("attention module channel counts must be positive".into()));
        }
        let mut rng = Initializer::new(init)?;
        let mut tensors = ParamSet::new();
        let c = feature_channels;
        let pooled = if config.pool_scales.is_empty() { c } else { c * config.pool_scales.len() };
        let n = config.n_channels;
        let (gk, ak) = (config.gen_kernel, config.attn_kernel);
        tensors.insert("fuse.weight", rng.weight(&[c, pooled, 3, 3]))?;
        tensors.insert("fuse.bias", rng.bias(c))?;
        tensors.insert("gen.weight", rng.weight(&[n * image_channels, c, gk, gk]))?;
        tensors.insert("gen.bias", rng.bias(n * image_channels))?;
        tensors.insert("attn.weight", rng.weight(&[n, c, ak, ak]))?;
        tensors.insert("attn.bias", rng.bias(n))?;
        if config.uncertainty_count > 0 {
            tensors.insert("unc.weight", rng.weight(&[config.uncertainty_count, n, 1, 1]))?;
            tensors.insert("unc.bias", rng.bias(config.uncertainty_count))?;
        }
        Ok(Self {
            config,
            feature_channels,
            image_channels,
            tensors,
            init,
        })
    }

    fn check_config(&self, cfg: &AttentionConfig) -> Result<()> {
        if cfg.n_channels != self.config.n_channels {
            return Err(Error::Config(format!(
                "config asks for N={} but parameters hold N={}",
                cfg.n_channels, self.config.n_channels
            )));
        }
        if cfg.uncertainty_count != self.config.uncertainty_count {
            return Err(Error::Config(format!(
                "config asks for K={} but parameters hold K={}",
                cfg.uncertainty_count, self.config.uncertainty_count
            )));
        }
        if cfg.pool_scales.len() != self.config.pool_scales.len() {
            return Err(Error::Config("pool scale count differs from parameters".into()));
        }
        Ok(())
    }

    /// `F_c -> F_c'`: pooled products (or `F_c` itself without pooling)
    /// through the 3x3 fusion convolution and a ReLU.
    pub fn pool(&self, g: &mut Graph, p: &Bound, fc: Var) -> Var {
        let x = if self.config.pool_scales.is_empty() {
            fc
        } else {
            let products: Vec<Var> = self
                .config
                .pool_scales
                .iter()
                .map(|&s| {
                    let pooled = g.pool_upsample(fc, s);
                    g.mul(fc, pooled)
                })
                .collect();
            g.concat(&products)
        };
        let y = g.conv2d(x, p.var("fuse.weight"), Some(p.var("fuse.bias")), 1, 1);
        g.relu(y)
    }

    /// `[B, N * C_img, H, W]` stack of intermediate generations.
    pub fn intermediates(&self, g: &mut Graph, p: &Bound, fcp: Var) -> Var {
        let pad = self.config.gen_kernel / 2;
        let y = g.conv2d(fcp, p.var("gen.weight"), Some(p.var("gen.bias")), 1, pad);
        g.tanh(y)
    }

    /// `[B, N, H, W]` attention maps, softmax-normalised over the N maps.
    pub fn attention(&self, g: &mut Graph, p: &Bound, fcp: Var) -> Var {
        let pad = self.config.attn_kernel / 2;
        let y = g.conv2d(fcp, p.var("attn.weight"), Some(p.var("attn.bias")), 1, pad);
        g.softmax_channels(y)
    }

    /// `[B, K, H, W]` clamped uncertainty maps, or `None` when `K = 0`.
    pub fn uncertainty(&self, g: &mut Graph, p: &Bound, attention: Var) -> Option<Var> {
        let w = p.try_var("unc.weight")?;
        let y = g.conv2d(attention, w, Some(p.var("unc.bias")), 1, 0);
        let s = g.sigmoid(y);
        Some(g.clamp_min(s, self.config.epsilon_u))
    }
}

/// Uncertainty head used when attention selection is disabled: a 1x1
/// convolution over `F_c` followed by the same sigmoid and clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyHead {
    pub count: usize,
    pub feature_channels: usize,
    pub epsilon_u: f64,
    pub tensors: ParamSet,
}

impl UncertaintyHead {
    pub fn new(count: usize, feature_channels: usize, epsilon_u: f64, init: InitSpec) -> Result<Self> {
        if count == 0 || feature_channels == 0 {
            return Err(Error::Config("uncertainty head sizes must be positive".into()));
        }
        let mut rng = Initializer::new(init)?;
        let mut tensors = ParamSet::new();
        tensors.insert("unc.weight", rng.weight(&[count, feature_channels, 1, 1]))?;
        tensors.insert("unc.bias", rng.bias(count))?;
        Ok(Self {
            count,
            feature_channels,
            epsilon_u,
            tensors,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, fc: Var) -> Var {
        let y = g.conv2d(fc, p.var("unc.weight"), Some(p.var("unc.bias")), 1, 0);
        let s = g.sigmoid(y);
        g.clamp_min(s, self.epsilon_u)
    }
}

/// Graph handles of one stage-II pass.
#[derive(Clone, Copy, Debug)]
pub struct SelectionVars {
    pub fused: Var,
    pub post_pool: Var,
    pub intermediates: Var,
    pub attention: Var,
    pub uncertainty: Option<Var>,
    pub refined: Var,
}

/// Records fuse -> pool -> intermediates/attention -> select -> uncertainty.
pub fn stage2_graph(
    g: &mut Graph,
    params: &AttentionModuleParams,
    p: &Bound,
    condition: Var,
    coarse: Var,
    image_features: Var,
    semantic_features: Var,
) -> SelectionVars {
    let fused = g.concat(&[condition, coarse, image_features, semantic_features]);
    let post_pool = params.pool(g, p, fused);
    let intermediates = params.intermediates(g, p, post_pool);
    let attention = params.attention(g, p, post_pool);
    let refined = g.attention_select(attention, intermediates);
    let uncertainty = params.uncertainty(g, p, attention);
    SelectionVars {
        fused,
        post_pool,
        intermediates,
        attention,
        uncertainty,
        refined,
    }
}

/// Stage-II results for one sample.
#[derive(Clone, Debug)]
pub struct SelectionOutput {
    pub intermediates: Vec<ImageTensor>,
    /// `[1, 1, H, W]` maps summing to one at every pixel.
    pub attentions: Vec<Tensor>,
    /// `[1, 1, H, W]` maps in `[ε_u, 1]`.
    pub uncertainties: Vec<Tensor>,
    pub refined_image: ImageTensor,
    pub refined_semantic: SemanticMap,
}

fn split_channels(t: &Tensor, per: usize) -> Vec<Tensor> {
    let c = t.shape()[1];
    (0..c / per).map(|i| t.channels(i * per, per)).collect()
}

fn check_same_spatial(tensors: &[(&str, &Tensor)]) -> Result<()> {
    let (_, _, h, w) = tensors[0].1.dims4();
    for (name, t) in tensors {
        let s = t.shape();
        if s.len() != 4 || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!("{name} has shape {s:?}, expected spatial {h}x{w}")));
        }
    }
    Ok(())
}

/// Channel-wise concatenation `(I_a, I_g', F_i, F_s)`.
pub fn fuse_inputs(condition: &ImageTensor, coarse: &ImageTensor, f_i: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    let a = condition.to_tensor();
    let c = coarse.to_tensor();
    check_same_spatial(&[("condition", &a), ("coarse", &c), ("F_i", f_i), ("F_s", f_s)])?;
    let mut g = Graph::new();
    let vars: Vec<Var> = [a, c, f_i.clone(), f_s.clone()]
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    let out = g.concat(&vars);
    Ok(g.value(out).clone())
}

/// `F_c -> F_c'` with frozen parameters.
pub fn multi_scale_pool(fc: &Tensor, cfg: &AttentionConfig, params: &AttentionModuleParams) -> Result<Tensor> {
    params.check_config(cfg)?;
    let (_, c, h, w) = fc.dims4();
    cfg.check_spatial(h, w)?;
    if c != params.feature_channels {
        return Err(Error::Shape(format!("F_c has {c} channels, expected {}", params.feature_channels)));
    }
    let mut g = Graph::new();
    let x = g.constant(fc.clone());
    let p = params.tensors.bind(&mut g, false);
    let y = params.pool(&mut g, &p, x);
    Ok(g.value(y).clone())
}

fn check_post_pool(fcp: &Tensor, params: &AttentionModuleParams) -> Result<()> {
    if fcp.shape().len() != 4 || fcp.shape()[1] != params.feature_channels {
        return Err(Error::Shape(format!(
            "F_c' has shape {:?}, expected {} channels",
            fcp.shape(),
            params.feature_channels
        )));
    }
    Ok(())
}

/// The `N` intermediate generations `I_G^i` for a single-sample `F_c'`.
pub fn generate_intermediates(fcp: &Tensor, params: &AttentionModuleParams, cfg: &AttentionConfig) -> Result<Vec<ImageTensor>> {
    params.check_config(cfg)?;
    check_post_pool(fcp, params)?;
    let mut g = Graph::new();
    let x = g.constant(fcp.clone());
    let p = params.tensors.bind(&mut g, false);
    let y = params.intermediates(&mut g, &p, x);
    Ok(split_channels(g.value(y), params.image_channels)
        .iter()
        .map(|t| ImageTensor::from_batch(t, 0, ValueRange::Signed))
        .collect())
}

/// The `N` attention maps `I_A^i` for a single-sample `F_c'`.
pub fn generate_attention(fcp: &Tensor, params: &AttentionModuleParams, cfg: &AttentionConfig) -> Result<Vec<Tensor>> {
    params.check_config(cfg)?;
    check_post_pool(fcp, params)?;
    let mut g = Graph::new();
    let x = g.constant(fcp.clone());
    let p = params.tensors.bind(&mut g, false);
    let y = params.attention(&mut g, &p, x);
    Ok(split_channels(g.value(y), 1))
}

/// `I_g'' = Σ_i I_A^i ⊗ I_G^i` with each map broadcast over image channels.
pub fn select(intermediates: &[ImageTensor], attentions: &[Tensor]) -> Result<ImageTensor> {
    if intermediates.is_empty() || intermediates.len() != attentions.len() {
        return Err(Error::Shape(format!(
            "{} intermediates vs {} attention maps",
            intermediates.len(),
            attentions.len()
        )));
    }
    let first = &intermediates[0];
    for (im, at) in intermediates.iter().zip(attentions) {
        if !im.same_shape(first) {
            return Err(Error::Shape("intermediate generations differ in shape".into()));
        }
        if at.shape() != [1, 1, first.height(), first.width()] {
            return Err(Error::Shape(format!("attention map has shape {:?}", at.shape())));
        }
    }
    let gens = Tensor::stack(&intermediates.iter().map(ImageTensor::to_tensor).collect::<Vec<_>>());
    let (n, c, h, w) = gens.dims4();
    let gens = gens.reshape(&[1, n * c, h, w]);
    let attn = Tensor::stack(attentions).reshape(&[1, n, h, w]);
    let mut g = Graph::new();
    let a = g.constant(attn);
    let gv = g.constant(gens);
    let y = g.attention_select(a, gv);
    Ok(ImageTensor::from_batch(g.value(y), 0, ValueRange::Signed))
}

/// The `K` uncertainty maps computed from the attention maps.
pub fn uncertainty_maps(attentions: &[Tensor], params: &AttentionModuleParams, cfg: &AttentionConfig) -> Result<Vec<Tensor>> {
    params.check_config(cfg)?;
    if attentions.len() != cfg.n_channels {
        return Err(Error::Shape(format!(
            "{} attention maps for N={}",
            attentions.len(),
            cfg.n_channels
        )));
    }
    let (_, _, h, w) = attentions[0].dims4();
    let attn = Tensor::stack(attentions).reshape(&[1, attentions.len(), h, w]);
    let mut g = Graph::new();
    let a = g.constant(attn);
    let p = params.tensors.bind(&mut g, false);
    Ok(match params.uncertainty(&mut g, &p, a) {
        Some(u) => split_channels(g.value(u), 1),
        None => Vec::new(),
    })
}

/// Full stage II for one sample: selection followed by `S_g'' = G_s(I_g'')`
/// using the same semantic generator as stage I.
pub fn forward_stage2(
    stage1: &StageOneOutput,
    sample: &PairedSample,
    gs: &NetworkParams,
    params: &AttentionModuleParams,
    cfg: &AttentionConfig,
) -> Result<SelectionOutput> {
    params.check_config(cfg)?;
    let gs_spec = gs.unet_spec()?;
    let cond = sample.condition_image.to_tensor();
    let coarse = stage1.coarse_image.to_tensor();
    check_same_spatial(&[
        ("condition", &cond),
        ("coarse", &coarse),
        ("F_i", &stage1.image_features),
        ("F_s", &stage1.semantic_features),
    ])?;
    let (_, _, h, w) = cond.dims4();
    cfg.check_spatial(h, w)?;
    let fc = cond.shape()[1] + coarse.shape()[1] + stage1.image_features.shape()[1] + stage1.semantic_features.shape()[1];
    if fc != params.feature_channels {
        return Err(Error::Shape(format!("F_c would have {fc} channels, expected {}", params.feature_channels)));
    }
    let mut g = Graph::new();
    let a = g.constant(cond);
    let c = g.constant(coarse);
    let fi = g.constant(stage1.image_features.clone());
    let fs = g.constant(stage1.semantic_features.clone());
    let p = params.tensors.bind(&mut g, false);
    let sel = stage2_graph(&mut g, params, &p, a, c, fi, fs);
    let bs = gs.tensors.bind(&mut g, false);
    let (sem, _) = gs_spec.forward(&mut g, &bs, sel.refined);
    Ok(SelectionOutput {
        intermediates: split_channels(g.value(sel.intermediates), params.image_channels)
            .iter()
            .map(|t| ImageTensor::from_batch(t, 0, ValueRange::Signed))
            .collect(),
        attentions: split_channels(g.value(sel.attention), 1),
        uncertainties: sel.uncertainty.map(|u| split_channels(g.value(u), 1)).unwrap_or_default(),
        refined_image: ImageTensor::from_batch(g.value(sel.refined), 0, ValueRange::Signed),
        refined_semantic: SemanticMap::new(
            ImageTensor::from_batch(g.value(sem), 0, ValueRange::Signed),
            sample.target_semantic.palette.clone(),
        )?,
    })
}

fn unit_map_to_image(t: &Tensor) -> Result<ImageTensor> {
    let (_, _, h, w) = t.dims4();
    let data = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round()).collect();
    ImageTensor::new(1, h, w, data, ValueRange::Byte)
}

/// Writes every `I_G^i`, `I_A^i` and `U_k` as PNG, plus a `grid.png` with one
/// row per kind. Attention and uncertainty map `[0, 1] -> [0, 255]`;
/// intermediates map `[-1, 1] -> [0, 255]`.
pub fn dump_selection(out: &SelectionOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut rows: Vec<Vec<image::RgbImage>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (i, im) in out.intermediates.iter().enumerate() {
        let path = dir.join(format!("intermediate_{i:02}.png"));
        im.save_png(&path)?;
        rows[0].push(im.to_rgb8()?);
        written.push(path);
    }
    for (i, a) in out.attentions.iter().enumerate() {
        let img = unit_map_to_image(a)?;
        let path = dir.join(format!("attention_{i:02}.png"));
        img.save_png(&path)?;
        rows[1].push(img.to_rgb8()?);
        written.push(path);
    }
    for (k, u) in out.uncertainties.iter().enumerate() {
        let img = unit_map_to_image(u)?;
        let path = dir.join(format!("uncertainty_{k:02}.png"));
        img.save_png(&path)?;
        rows[2].push(img.to_rgb8()?);
        written.push(path);
    }
    let (h, w) = (out.refined_image.height() as u32, out.refined_image.width() as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    if cols > 0 {
        let mut grid = image::RgbImage::new(cols * w, 3 * h);
        for (r, row) in rows.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                image::imageops::replace(&mut grid, tile, (c as u32 * w) as i64, (r as u32 * h) as i64);
            }
        }
        let path = dir.join("grid.png");
        grid.save_with_format(&path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}
