//! The full generator/discriminator bundle, its ablation wiring and the
//! graph recording shared by training and inference.

use serde::{Deserialize, Serialize};
use sg_autodiff::{Graph, Tensor, Var};

use crate::attention::{fused_channels, stage2_graph, AttentionConfig, AttentionModuleParams, SelectionOutput, SelectionVars, UncertaintyHead};
use crate::data::splitmix64;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, PairedSample, SemanticMap, ValueRange};
use crate::losses::{guided, l1_map, objective, ObjectiveTerms, PixelTerm, TrainConfig};
use crate::networks::{
    build_discriminator, build_image_generator, build_semantic_generator, check_discriminator_input, default_depth,
    stage1_graph, NetworkParams, IMAGE_FILTERS, SEMANTIC_FILTERS,
};
use crate::params::{Bound, InitSpec, ParamSet};

pub const IMAGE_CHANNELS: usize = 3;
pub const SEMANTIC_CHANNELS: usize = 3;

/// Network widths and initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_filters: usize,
    pub semantic_filters: usize,
    pub disc_filters: usize,
    /// U-Net depth of `G_i`; derived from the image size when absent.
    pub depth: Option<usize>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_filters: IMAGE_FILTERS,
            semantic_filters: SEMANTIC_FILTERS,
            disc_filters: IMAGE_FILTERS,
            depth: None,
            init_std: 0.2,
        }
    }
}

/// Feature toggles of one ablation baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub baseline: char,
    pub use_condition_image: bool,
    pub use_semantic_input: bool,
    pub use_cycle: bool,
    pub use_uncertainty: bool,
    pub use_attention_selection: bool,
    pub use_tv: bool,
    pub use_multiscale_pool: bool,
}

pub const BASELINES: [char; 8] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'];

impl AblationSpec {
    pub fn toggles(&self) -> [bool; 7] {
        [
            self.use_condition_image,
            self.use_semantic_input,
            self.use_cycle,
            self.use_uncertainty,
            self.use_attention_selection,
            self.use_tv,
            self.use_multiscale_pool,
        ]
    }

    pub fn full() -> Self {
        build_ablation('H').expect("H is a baseline")
    }

    /// Whether `G_s` is instantiated.
    pub fn has_semantic_generator(&self) -> bool {
        self.use_cycle || self.use_attention_selection
    }

    pub fn gi_input_channels(&self) -> usize {
        IMAGE_CHANNELS * self.use_condition_image as usize + SEMANTIC_CHANNELS * self.use_semantic_input as usize
    }

    /// Pixel terms the wiring produces.
    pub fn pixel_terms(&self) -> Vec<PixelTerm> {
        let mut t = vec![PixelTerm::CoarseImage];
        if self.use_cycle {
            t.push(PixelTerm::CoarseSemantic);
        }
        if self.use_attention_selection {
            t.push(PixelTerm::RefinedImage);
            t.push(PixelTerm::RefinedSemantic);
        }
        t
    }

    /// Adapts the base configs to this wiring: drops absent uncertainty
    /// targets, sizes `K`, disables pooling and TV as required.
    pub fn specialise(&self, train: &TrainConfig, attention: &AttentionConfig) -> (TrainConfig, AttentionConfig) {
        let mut train = train.clone();
        let mut attention = attention.clone();
        let present = self.pixel_terms();
        train.uncertainty_targets = if self.use_uncertainty {
            train.uncertainty_targets.iter().copied().filter(|t| present.contains(t)).collect()
        } else {
            Vec::new()
        };
        if !self.use_tv {
            train.lambda_tv = 0.0;
        }
        attention.uncertainty_count = if self.use_attention_selection {
            train.uncertainty_targets.len()
        } else {
            0
        };
        if !self.use_multiscale_pool {
            attention.pool_scales.clear();
        }
        (train, attention)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_condition_image && !self.use_semantic_input {
            return Err(Error::Config("G_i needs the condition image, the semantic map or both".into()));
        }
        if self.use_attention_selection && !self.use_cycle {
            return Err(Error::Config("attention selection needs the semantic cycle".into()));
        }
        if self.use_uncertainty && !self.use_cycle && !self.use_attention_selection {
            return Err(Error::Config("uncertainty guidance needs F_s from the semantic generator".into()));
        }
        Ok(())
    }
}

/// Toggles of baseline `id`; each letter after C adds one feature.
pub fn build_ablation(id: char) -> Result<AblationSpec> {
    let id = id.to_ascii_uppercase();
    let rank = BASELINES
        .iter()
        .position(|&b| b == id)
        .ok_or_else(|| Error::Config(format!("unknown baseline `{id}` (expected A..H)")))?;
    Ok(AblationSpec {
        baseline: id,
        use_condition_image: id != 'B',
        use_semantic_input: id != 'A',
        use_cycle: rank >= 3,
        use_uncertainty: rank >= 4,
        use_attention_selection: rank >= 5,
        use_tv: rank >= 6,
        use_multiscale_pool: rank >= 7,
    })
}

/// Batched NCHW tensors of a list of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub condition: Tensor,
    pub target: Tensor,
    pub semantic: Tensor,
}

impl Batch {
    pub fn new(samples: &[PairedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        for s in samples {
            if !s.condition_image.same_shape(&first.condition_image)
                || !s.target_image.same_shape(&first.target_image)
                || !s.target_semantic.image.same_shape(&first.target_semantic.image)
            {
                return Err(Error::Shape(format!("sample `{}` differs in shape from the batch", s.sample_id)));
            }
        }
        let stack = |f: &dyn Fn(&PairedSample) -> Tensor| Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            condition: stack(&|s| s.condition_image.to_tensor()),
            target: stack(&|s| s.target_image.to_tensor()),
            semantic: stack(&|s| s.target_semantic.image.to_tensor()),
        })
    }

    pub fn len(&self) -> usize {
        self.condition.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All learned parameters of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub attention: AttentionConfig,
    pub wiring: AblationSpec,
    pub image_size: (usize, usize),
    pub uncertainty_targets: Vec<PixelTerm>,
    pub gi: NetworkParams,
    pub gs: Option<NetworkParams>,
    pub ga: Option<AttentionModuleParams>,
    pub unc_head: Option<UncertaintyHead>,
    pub d: NetworkParams,
}

/// Generator parameters bound on one graph.
pub struct GeneratorBound {
    pub gi: Bound,
    pub gs: Option<Bound>,
    pub ga: Option<Bound>,
    pub unc: Option<Bound>,
}

/// Handles of one generator forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub condition: Var,
    pub coarse: Var,
    pub image_features: Var,
    pub recon_semantic: Option<Var>,
    pub semantic_features: Option<Var>,
    pub selection: Option<SelectionVars>,
    pub refined_semantic: Option<Var>,
    pub uncertainty: Option<Var>,
}

impl ForwardVars {
    /// `I_g''` when stage II runs, else `I_g'`.
    pub fn final_image(&self) -> Var {
        self.selection.map(|s| s.refined).unwrap_or(self.coarse)
    }
}

/// One generated sample, values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Generated {
    pub coarse_image: ImageTensor,
    pub recon_semantic: Option<SemanticMap>,
    pub refined_image: Option<ImageTensor>,
    pub refined_semantic: Option<SemanticMap>,
}

impl Generated {
    pub fn final_image(&self) -> &ImageTensor {
        self.refined_image.as_ref().unwrap_or(&self.coarse_image)
    }
}

/// Group key and parameter set, in a fixed order.
pub type ParamGroup<'a> = (&'static str, &'a ParamSet);

impl Model {
    /// Builds every network for `wiring`; `train` must already be
    /// specialised (see [`AblationSpec::specialise`]).
    pub fn new(
        config: &ModelConfig,
        attention: &AttentionConfig,
        wiring: AblationSpec,
        train: &TrainConfig,
        image_size: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        wiring.validate()?;
        attention.validate()?;
        let (h, w) = image_size;
        let init = |k: u64| InitSpec {
            std: config.init_std,
            seed: splitmix64(seed ^ splitmix64(k)),
        };
        let depth = config.depth.unwrap_or_else(|| default_depth(h, w));
        let gi = build_image_generator(config.image_filters, wiring.gi_input_channels(), IMAGE_CHANNELS, depth, init(1))?;
        gi.unet_spec()?.check_input(wiring.gi_input_channels(), h, w)?;
        let gs = if wiring.has_semantic_generator() {
            let gs = build_semantic_generator(config.semantic_filters, IMAGE_CHANNELS, SEMANTIC_CHANNELS, init(2))?;
            gs.unet_spec()?.check_input(IMAGE_CHANNELS, h, w)?;
            Some(gs)
        } else {
            None
        };
        let present = wiring.pixel_terms();
        if let Some(t) = train.uncertainty_targets.iter().find(|t| !present.contains(t)) {
            return Err(Error::Config(format!(
                "uncertainty target `{}` is not produced by baseline {}",
                t.name(),
                wiring.baseline
            )));
        }
        let targets = if wiring.use_uncertainty { train.uncertainty_targets.clone() } else { Vec::new() };
        let fc = fused_channels(IMAGE_CHANNELS, config.image_filters, config.semantic_filters);
        let ga = if wiring.use_attention_selection {
            if attention.uncertainty_count != targets.len() {
                return Err(Error::Config(format!(
                    "attention config has K={} uncertainty maps for {} guided terms",
                    attention.uncertainty_count,
                    targets.len()
                )));
            }
            attention.check_spatial(h, w)?;
            Some(AttentionModuleParams::new(attention.clone(), fc, IMAGE_CHANNELS, init(3))?)
        } else {
            None
        };
        let unc_head = if !wiring.use_attention_selection && !targets.is_empty() {
            Some(UncertaintyHead::new(targets.len(), fc, attention.epsilon_u, init(4))?)
        } else {
            None
        };
        let d = build_discriminator(2 * IMAGE_CHANNELS, config.disc_filters, init(5))?;
        check_discriminator_input(&d.patch_gan_spec()?, 2 * IMAGE_CHANNELS, h, w)?;
        Ok(Self {
            config: config.clone(),
            attention: attention.clone(),
            wiring,
            image_size,
            uncertainty_targets: targets,
            gi,
            gs,
            ga,
            unc_head,
            d,
        })
    }

    pub fn generator_groups(&self) -> Vec<ParamGroup<'_>> {
        let mut out = vec![("gi", &self.gi.tensors)];
        if let Some(gs) = &self.gs {
            out.push(("gs", &gs.tensors));
        }
        if let Some(ga) = &self.ga {
            out.push(("ga", &ga.tensors));
        }
        if let Some(u) = &self.unc_head {
            out.push(("unc", &u.tensors));
        }
        out
    }

    pub fn generator_groups_mut(&mut self) -> Vec<(&'static str, &mut ParamSet)> {
        let mut out = vec![("gi", &mut self.gi.tensors)];
        if let Some(gs) = &mut self.gs {
            out.push(("gs", &mut gs.tensors));
        }
        if let Some(ga) = &mut self.ga {
            out.push(("ga", &mut ga.tensors));
        }
        if let Some(u) = &mut self.unc_head {
            out.push(("unc", &mut u.tensors));
        }
        out
    }

    /// Every group including the discriminator (`"d"`).
    pub fn all_groups(&self) -> Vec<ParamGroup<'_>> {
        let mut out = self.generator_groups();
        out.push(("d", &self.d.tensors));
        out
    }

    pub fn all_groups_mut(&mut self) -> Vec<(&'static str, &mut ParamSet)> {
        let Model { gi, gs, ga, unc_head, d, .. } = self;
        let mut out = vec![("gi", &mut gi.tensors)];
        if let Some(gs) = gs {
            out.push(("gs", &mut gs.tensors));
        }
        if let Some(ga) = ga {
            out.push(("ga", &mut ga.tensors));
        }
        if let Some(u) = unc_head {
            out.push(("unc", &mut u.tensors));
        }
        out.push(("d", &mut d.tensors));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.all_groups().iter().map(|(_, p)| p.scalar_count()).sum()
    }

    pub fn bind_generators(&self, g: &mut Graph, trainable: bool) -> GeneratorBound {
        GeneratorBound {
            gi: self.gi.tensors.bind(g, trainable),
            gs: self.gs.as_ref().map(|n| n.tensors.bind(g, trainable)),
            ga: self.ga.as_ref().map(|n| n.tensors.bind(g, trainable)),
            unc: self.unc_head.as_ref().map(|n| n.tensors.bind(g, trainable)),
        }
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (_, c, h, w) = batch.condition.dims4();
        if (h, w) != self.image_size || c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!(
                "batch is {c}x{h}x{w}, model expects {IMAGE_CHANNELS}x{}x{}",
                self.image_size.0, self.image_size.1
            )));
        }
        let (_, sc, _, _) = batch.semantic.dims4();
        if sc != SEMANTIC_CHANNELS {
            return Err(Error::Shape(format!("semantic maps have {sc} channels, expected {SEMANTIC_CHANNELS}")));
        }
        Ok(())
    }

    /// Records both stages for the given condition images and semantic maps.
    pub fn forward(&self, g: &mut Graph, p: &GeneratorBound, condition: Var, semantic: Var) -> Result<ForwardVars> {
        let mut inputs = Vec::new();
        if self.wiring.use_condition_image {
            inputs.push(condition);
        }
        if self.wiring.use_semantic_input {
            inputs.push(semantic);
        }
        let input = if inputs.len() == 1 { inputs[0] } else { g.concat(&inputs) };
        let gi_spec = self.gi.unet_spec()?;
        let gs_spec = self.gs.as_ref().map(|n| n.unet_spec()).transpose()?;
        let gs_pair = gs_spec.as_ref().zip(p.gs.as_ref());
        let s1 = stage1_graph(g, (&gi_spec, &p.gi), gs_pair, input);
        let mut out = ForwardVars {
            condition,
            coarse: s1.coarse,
            image_features: s1.image_features,
            recon_semantic: s1.recon_semantic.filter(|_| self.wiring.use_cycle),
            semantic_features: s1.semantic_features,
            selection: None,
            refined_semantic: None,
            uncertainty: None,
        };
        if let (Some(ga), Some(pa)) = (&self.ga, &p.ga) {
            let fs = s1.semantic_features.expect("G_s present with attention");
            let sel = stage2_graph(g, ga, pa, condition, s1.coarse, s1.image_features, fs);
            let (gs_spec, gs_bound) = gs_pair.expect("G_s present with attention");
            let (sem, _) = gs_spec.forward(g, gs_bound, sel.refined);
            out.selection = Some(sel);
            out.refined_semantic = Some(sem);
            out.uncertainty = sel.uncertainty;
        } else if let (Some(head), Some(pu)) = (&self.unc_head, &p.unc) {
            let fs = s1.semantic_features.expect("G_s present with uncertainty");
            let fc = g.concat(&[condition, s1.coarse, s1.image_features, fs]);
            out.uncertainty = Some(head.forward(g, pu, fc));
        }
        Ok(out)
    }

    /// Records the generator objective terms with the discriminator frozen.
    pub fn generator_terms(
        &self,
        g: &mut Graph,
        fv: &ForwardVars,
        d: &Bound,
        target: Var,
        semantic: Var,
    ) -> Result<ObjectiveTerms> {
        let mut terms = ObjectiveTerms::default();
        let mut maps: [Option<Var>; 4] = [None; 4];
        maps[0] = Some(l1_map(g, fv.coarse, target));
        if let Some(s) = fv.recon_semantic {
            maps[1] = Some(l1_map(g, s, semantic));
        }
        if let Some(sel) = fv.selection {
            maps[2] = Some(l1_map(g, sel.refined, target));
        }
        if let Some(s) = fv.refined_semantic {
            maps[3] = Some(l1_map(g, s, semantic));
        }
        for t in PixelTerm::ALL {
            let Some(map) = maps[t.index()] else { continue };
            let k = self.uncertainty_targets.iter().position(|&u| u == t);
            terms.pixel[t.index()] = Some(match (k, fv.uncertainty) {
                (Some(k), Some(u)) => {
                    let uk = g.slice_channels(u, k, 1);
                    terms.maps.push((t, map));
                    guided(g, map, uk)
                }
                _ => g.mean(map),
            });
        }
        let spec = self.d.patch_gan_spec()?;
        let pair1 = g.concat(&[fv.condition, fv.coarse]);
        let l1 = spec.forward(g, d, pair1);
        terms.adv_stage1 = Some(g.bce_with_logits(l1, 1.0));
        if let Some(sel) = fv.selection {
            let pair2 = g.concat(&[fv.condition, sel.refined]);
            let l2 = spec.forward(g, d, pair2);
            terms.adv_stage2 = Some(g.bce_with_logits(l2, 1.0));
        }
        if self.wiring.use_tv {
            terms.tv = Some(g.total_variation(fv.final_image()));
        }
        Ok(terms)
    }

    /// Generator objective on one batch; returns the graph handles, the
    /// recorded terms and the total.
    pub fn record_generator_step(
        &self,
        g: &mut Graph,
        batch: &Batch,
        cfg: &TrainConfig,
        trainable: bool,
    ) -> Result<(GeneratorBound, ForwardVars, ObjectiveTerms, Var)> {
        self.check_batch(batch)?;
        let cond = g.constant(batch.condition.clone());
        let target = g.constant(batch.target.clone());
        let sem = g.constant(batch.semantic.clone());
        let p = self.bind_generators(g, trainable);
        let d = self.d.tensors.bind(g, false);
        let fv = self.forward(g, &p, cond, sem)?;
        let terms = self.generator_terms(g, &fv, &d, target, sem)?;
        let total = objective(g, cfg, &terms);
        Ok((p, fv, terms, total))
    }

    /// Runs the generators without gradients, one output per sample.
    pub fn generate(&self, samples: &[PairedSample]) -> Result<Vec<Generated>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::new(samples)?;
        self.check_batch(&batch)?;
        let mut g = Graph::new();
        let cond = g.constant(batch.condition);
        let sem = g.constant(batch.semantic);
        let p = self.bind_generators(&mut g, false);
        let fv = self.forward(&mut g, &p, cond, sem)?;
        let img = |v: Var, i: usize| ImageTensor::from_batch(g.value(v), i, ValueRange::Signed);
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let palette = s.target_semantic.palette.clone();
                Ok(Generated {
                    coarse_image: img(fv.coarse, i),
                    recon_semantic: fv.recon_semantic.map(|v| SemanticMap::new(img(v, i), palette.clone())).transpose()?,
                    refined_image: fv.selection.map(|sel| img(sel.refined, i)),
                    refined_semantic: fv.refined_semantic.map(|v| SemanticMap::new(img(v, i), palette)).transpose()?,
                })
            })
            .collect()
    }
}

impl Model {
    /// Stage-II internals for one sample, `None` when the wiring has no
    /// attention selection.
    pub fn selection_output(&self, sample: &PairedSample) -> Result<Option<SelectionOutput>> {
        let ga = match &self.ga {
            Some(ga) => ga,
            None => return Ok(None),
        };
        let batch = Batch::new(std::slice::from_ref(sample))?;
        self.check_batch(&batch)?;
        let mut g = Graph::new();
        let cond = g.constant(batch.condition);
        let sem = g.constant(batch.semantic);
        let p = self.bind_generators(&mut g, false);
        let fv = self.forward(&mut g, &p, cond, sem)?;
        let sel = fv.selection.expect("attention wiring runs stage II");
        let split = |t: &Tensor, width: usize| -> Vec<Tensor> {
            (0..t.shape()[1] / width).map(|i| t.channels(i * width, width)).collect()
        };
        let img = |t: &Tensor| ImageTensor::from_batch(t, 0, ValueRange::Signed);
        Ok(Some(SelectionOutput {
            intermediates: split(g.value(sel.intermediates), ga.image_channels).iter().map(img).collect(),
            attentions: split(g.value(sel.attention), 1),
            uncertainties: fv.uncertainty.map(|u| split(g.value(u), 1)).unwrap_or_default(),
            refined_image: img(g.value(sel.refined)),
            refined_semantic: SemanticMap::new(
                img(g.value(fv.refined_semantic.expect("stage II reconstructs semantics"))),
                sample.target_semantic.palette.clone(),
            )?,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_adds_one_feature_per_step() {
        for pair in BASELINES[2..].windows(2) {
            let a = build_ablation(pair[0]).unwrap().toggles();
            let b = build_ablation(pair[1]).unwrap().toggles();
            let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert_eq!(diff, 1, "{} -> {}", pair[0], pair[1]);
        }
        assert!(build_ablation('H').unwrap().toggles().iter().all(|&t| t));
        assert!(build_ablation('Z').is_err());
    }

    #[test]
    fn single_input_baselines() {
        assert_eq!(build_ablation('A').unwrap().gi_input_channels(), IMAGE_CHANNELS);
        assert_eq!(build_ablation('B').unwrap().gi_input_channels(), SEMANTIC_CHANNELS);
        assert_eq!(build_ablation('C').unwrap().gi_input_channels(), IMAGE_CHANNELS + SEMANTIC_CHANNELS);
    }

    #[test]
    fn baseline_e_guides_only_present_terms() {
        let e = build_ablation('E').unwrap();
        let (train, attn) = e.specialise(&TrainConfig::default(), &AttentionConfig::default());
        assert_eq!(train.uncertainty_targets, vec![PixelTerm::CoarseSemantic]);
        assert_eq!(attn.uncertainty_count, 0);
        let cfg = ModelConfig {
            image_filters: 4,
            disc_filters: 4,
            ..ModelConfig::default()
        };
        let m = Model::new(&cfg, &attn, e, &train, (32, 32), 0).unwrap();
        assert!(m.ga.is_none());
        assert_eq!(m.unc_head.as_ref().unwrap().count, 1);
    }
}
