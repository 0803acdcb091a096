//! U-Net generators, the PatchGAN discriminator and the stage-I cycle
//! `I_g' = G_i(I_a, S_g)`, `S_g' = G_s(I_g')`.

use serde::{Deserialize, Serialize};
use sg_autodiff::{ConvGeometry, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, PairedSample, SemanticMap, ValueRange};
use crate::params::{Bound, InitSpec, Initializer, ParamSet};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const IMAGE_FILTERS: usize = 64;
pub const SEMANTIC_FILTERS: usize = 4;
/// Encoder stages of the shallow semantic generator.
pub const SEMANTIC_DEPTH: usize = 3;
const MAX_DEPTH: usize = 8;
const MAX_WIDTH_MULT: usize = 8;

/// Default U-Net depth for an image size: `log2(min(H, W)) - 2`, capped at 8.
pub fn default_depth(height: usize, width: usize) -> usize {
    let m = height.min(width).max(1);
    let log2 = usize::BITS as usize - 1 - m.leading_zeros() as usize;
    log2.saturating_sub(2).clamp(1, MAX_DEPTH)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub instance_norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGanSpec {
    pub in_channels: usize,
    pub base_filters: usize,
    /// Number of stride-2 convolutions.
    pub n_layers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    UNet(UNetSpec),
    PatchGan(PatchGanSpec),
}

/// Parameters of one network together with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub tensors: ParamSet,
    pub init: InitSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// One convolution layer of a network, in parameter order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerShape {
    fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => [self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::ConvTranspose => [self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }
}

fn layer(name: String, kind: LayerKind, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> LayerShape {
    LayerShape {
        name,
        kind,
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::Config(format!("U-Net depth must be in 1..={MAX_DEPTH}")));
        }
        Ok(())
    }

    /// Channels at encoder level `k` (1-based); level 0 is the feature width.
    fn width(&self, k: usize) -> usize {
        if k == 0 {
            self.base_filters
        } else {
            self.base_filters * (1 << (k - 1)).min(MAX_WIDTH_MULT)
        }
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        for k in 1..=self.depth {
            let cin = if k == 1 { self.in_channels } else { self.width(k - 1) };
            out.push(layer(format!("down{k}"), LayerKind::Conv, cin, self.width(k), 4, 2, 1));
        }
        for k in (1..=self.depth).rev() {
            let cin = if k == self.depth { self.width(k) } else { 2 * self.width(k) };
            out.push(layer(format!("up{k}"), LayerKind::ConvTranspose, cin, self.width(k - 1), 4, 2, 1));
        }
        out.push(layer("head".into(), LayerKind::Conv, self.base_filters, self.out_channels, 3, 1, 1));
        out
    }

    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let m = 1usize << self.depth;
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} input is not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Runs the U-Net, returning `(tanh output, penultimate features)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for k in 1..=self.depth {
            let name = format!("down{k}");
            h = g.conv2d(h, p.var(&format!("{name}.weight")), Some(p.var(&format!("{name}.bias"))), 2, 1);
            let (_, _, hh, ww) = g.value(h).dims4();
            if self.instance_norm && k > 1 && hh * ww > 1 {
                h = g.instance_norm(h);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        let mut u = h;
        for k in (1..=self.depth).rev() {
            let name = format!("up{k}");
            u = g.conv_transpose2d(u, p.var(&format!("{name}.weight")), Some(p.var(&format!("{name}.bias"))), 2, 1);
            if self.instance_norm {
                u = g.instance_norm(u);
            }
            u = g.relu(u);
            if k > 1 {
                u = g.concat(&[u, skips[k - 2]]);
            }
        }
        let features = u;
        let logits = g.conv2d(features, p.var("head.weight"), Some(p.var("head.bias")), 1, 1);
        (g.tanh(logits), features)
    }
}

impl PatchGanSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 || self.n_layers == 0 {
            return Err(Error::Config("PatchGAN sizes must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, i: usize) -> usize {
        self.base_filters * (1 << i).min(MAX_WIDTH_MULT)
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = vec![layer("conv0".into(), LayerKind::Conv, self.in_channels, self.base_filters, 4, 2, 1)];
        for i in 1..self.n_layers {
            out.push(layer(format!("conv{i}"), LayerKind::Conv, self.width(i - 1), self.width(i), 4, 2, 1));
        }
        let n = self.n_layers;
        out.push(layer(format!("conv{n}"), LayerKind::Conv, self.width(n - 1), self.width(n), 4, 1, 1));
        out.push(layer("out".into(), LayerKind::Conv, self.width(n), 1, 4, 1, 1));
        out
    }

    /// Logit-grid size for an input extent, `None` if the input is too small.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.layers().iter().try_fold(input, |size, l| {
            ConvGeometry::new(l.kernel, l.stride, l.padding)
                .conv_out(size)
                .filter(|&s| s > 0)
        })
    }

    /// Receptive field of one output logit, in input pixels.
    pub fn receptive_field(&self) -> usize {
        self.layers()
            .iter()
            .rev()
            .fold(1, |rf, l| (rf - 1) * l.stride + l.kernel)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, pair: Var) -> Var {
        let layers = self.layers();
        let mut h = pair;
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            h = g.conv2d(
                h,
                p.var(&format!("{}.weight", l.name)),
                Some(p.var(&format!("{}.bias", l.name))),
                l.stride,
                l.padding,
            );
            if i == last {
                break;
            }
            if i > 0 {
                h = g.instance_norm(h);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h
    }
}

fn init_layers(layers: &[LayerShape], init: InitSpec) -> Result<ParamSet> {
    let mut rng = Initializer::new(init)?;
    let mut set = ParamSet::new();
    for l in layers {
        set.insert(format!("{}.weight", l.name), rng.weight(&l.weight_shape()))?;
        set.insert(format!("{}.bias", l.name), rng.bias(l.out_channels))?;
    }
    Ok(set)
}

/// Number of scalar parameters implied by an architecture.
pub fn parameter_count(arch: &Architecture) -> usize {
    let layers = match arch {
        Architecture::UNet(s) => s.layers(),
        Architecture::PatchGan(s) => s.layers(),
    };
    layers
        .iter()
        .map(|l| l.kernel * l.kernel * l.in_channels * l.out_channels + l.out_channels)
        .sum()
}

impl NetworkParams {
    pub fn unet(spec: UNetSpec, init: InitSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            arch: Architecture::UNet(spec),
            tensors: init_layers(&spec.layers(), init)?,
            init,
        })
    }

    pub fn patch_gan(spec: PatchGanSpec, init: InitSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            arch: Architecture::PatchGan(spec),
            tensors: init_layers(&spec.layers(), init)?,
            init,
        })
    }

    pub fn unet_spec(&self) -> Result<UNetSpec> {
        match self.arch {
            Architecture::UNet(s) => Ok(s),
            Architecture::PatchGan(_) => Err(Error::Config("expected a U-Net, found a PatchGAN".into())),
        }
    }

    pub fn patch_gan_spec(&self) -> Result<PatchGanSpec> {
        match self.arch {
            Architecture::PatchGan(s) => Ok(s),
            Architecture::UNet(_) => Err(Error::Config("expected a PatchGAN, found a U-Net".into())),
        }
    }
}

/// Image generator `G_i`: deep U-Net over `[I_a, S_g]`.
pub fn build_image_generator(
    base_filters: usize,
    in_channels: usize,
    out_channels: usize,
    depth: usize,
    init: InitSpec,
) -> Result<NetworkParams> {
    NetworkParams::unet(
        UNetSpec {
            in_channels,
            out_channels,
            base_filters,
            depth,
            instance_norm: true,
        },
        init,
    )
}

/// Semantic generator `G_s`: shallow U-Net shared by both stages.
pub fn build_semantic_generator(
    base_filters: usize,
    in_channels: usize,
    out_channels: usize,
    init: InitSpec,
) -> Result<NetworkParams> {
    NetworkParams::unet(
        UNetSpec {
            in_channels,
            out_channels,
            base_filters,
            depth: SEMANTIC_DEPTH,
            instance_norm: true,
        },
        init,
    )
}

/// 70x70 PatchGAN over channel-concatenated `(condition, candidate)` pairs.
pub fn build_discriminator(in_channels: usize, base_filters: usize, init: InitSpec) -> Result<NetworkParams> {
    NetworkParams::patch_gan(
        PatchGanSpec {
            in_channels,
            base_filters,
            n_layers: 3,
        },
        init,
    )
}

/// Stage-I results for one sample.
#[derive(Clone, Debug)]
pub struct StageOneOutput {
    pub coarse_image: ImageTensor,
    pub recon_semantic: SemanticMap,
    /// `F_i`, `[1, base_filters(G_i), H, W]`.
    pub image_features: Tensor,
    /// `F_s`, `[1, base_filters(G_s), H, W]`.
    pub semantic_features: Tensor,
}

/// Graph handles produced by the stage-I cycle.
#[derive(Clone, Copy, Debug)]
pub struct StageOneVars {
    pub coarse: Var,
    pub image_features: Var,
    pub recon_semantic: Option<Var>,
    pub semantic_features: Option<Var>,
}

/// Records `G_i(input)` and, when `gs` is given, `G_s(G_i(input))`.
pub fn stage1_graph(
    g: &mut Graph,
    gi: (&UNetSpec, &Bound),
    gs: Option<(&UNetSpec, &Bound)>,
    input: Var,
) -> StageOneVars {
    let (coarse, image_features) = gi.0.forward(g, gi.1, input);
    let (recon_semantic, semantic_features) = match gs {
        Some((spec, bound)) => {
            let (s, f) = spec.forward(g, bound, coarse);
            (Some(s), Some(f))
        }
        None => (None, None),
    };
    StageOneVars {
        coarse,
        image_features,
        recon_semantic,
        semantic_features,
    }
}

/// Stage I on one sample with frozen parameters.
pub fn forward_stage1(gi: &NetworkParams, gs: &NetworkParams, sample: &PairedSample) -> Result<StageOneOutput> {
    let gi_spec = gi.unet_spec()?;
    let gs_spec = gs.unet_spec()?;
    let cond = &sample.condition_image;
    let sem = &sample.target_semantic.image;
    if !cond.same_size(sem) {
        return Err(Error::Shape("condition image and semantic map differ in size".into()));
    }
    gi_spec.check_input(cond.channels() + sem.channels(), cond.height(), cond.width())?;
    gs_spec.check_input(gi_spec.out_channels, cond.height(), cond.width())?;
    let mut g = Graph::new();
    let a = g.constant(cond.to_tensor());
    let s = g.constant(sem.to_tensor());
    let input = g.concat(&[a, s]);
    let bi = gi.tensors.bind(&mut g, false);
    let bs = gs.tensors.bind(&mut g, false);
    let out = stage1_graph(&mut g, (&gi_spec, &bi), Some((&gs_spec, &bs)), input);
    let recon = out.recon_semantic.expect("semantic generator bound");
    Ok(StageOneOutput {
        coarse_image: ImageTensor::from_batch(g.value(out.coarse), 0, ValueRange::Signed),
        recon_semantic: SemanticMap::new(
            ImageTensor::from_batch(g.value(recon), 0, ValueRange::Signed),
            sample.target_semantic.palette.clone(),
        )?,
        image_features: g.value(out.image_features).clone(),
        semantic_features: g.value(out.semantic_features.expect("bound")).clone(),
    })
}

/// Patch logits for `(condition, candidate)` with the shared discriminator.
pub fn discriminate(d: &NetworkParams, condition: &ImageTensor, candidate: &ImageTensor) -> Result<Tensor> {
    let spec = d.patch_gan_spec()?;
    if !condition.same_size(candidate) {
        return Err(Error::Shape("condition and candidate differ in size".into()));
    }
    check_discriminator_input(&spec, condition.channels() + candidate.channels(), condition.height(), condition.width())?;
    let mut g = Graph::new();
    let a = g.constant(condition.to_tensor());
    let b = g.constant(candidate.to_tensor());
    let pair = g.concat(&[a, b]);
    let bound = d.tensors.bind(&mut g, false);
    let logits = spec.forward(&mut g, &bound, pair);
    Ok(g.value(logits).clone())
}

pub fn check_discriminator_input(spec: &PatchGanSpec, channels: usize, height: usize, width: usize) -> Result<()> {
    if channels != spec.in_channels {
        return Err(Error::Shape(format!(
            "discriminator expects {} channels, got {channels}",
            spec.in_channels
        )));
    }
    if spec.output_extent(height).is_none() || spec.output_extent(width).is_none() {
        return Err(Error::Shape(format!(
            "{height}x{width} input too small for the discriminator"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_depth_follows_image_size() {
        assert_eq!(default_depth(64, 64), 4);
        assert_eq!(default_depth(256, 256), 6);
        assert_eq!(default_depth(4096, 4096), 8);
    }

    #[test]
    fn patch_gan_grid_sizes() {
        let spec = PatchGanSpec {
            in_channels: 6,
            base_filters: 64,
            n_layers: 3,
        };
        assert_eq!(spec.output_extent(256), Some(30));
        assert_eq!(spec.output_extent(64), Some(6));
        assert_eq!(spec.output_extent(16), None);
        assert_eq!(spec.receptive_field(), 70);
    }

    #[test]
    fn rejects_indivisible_input() {
        let spec = UNetSpec {
            in_channels: 6,
            out_channels: 3,
            base_filters: 8,
            depth: 4,
            instance_norm: true,
        };
        assert!(spec.check_input(6, 64, 64).is_ok());
        assert!(spec.check_input(6, 60, 64).is_err());
        assert!(spec.check_input(5, 64, 64).is_err());
    }

    #[test]
    fn rejects_zero_channels() {
        assert!(build_image_generator(0, 6, 3, 4, InitSpec::default()).is_err());
        assert!(build_semantic_generator(4, 0, 3, InitSpec::default()).is_err());
    }
}
