//! Alternating generator/discriminator optimisation, checkpointing and the
//! ablation and attention-sweep harnesses.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sg_autodiff::{Gradients, Graph, Tensor};

use crate::attention::AttentionConfig;
use crate::checkpoint::Archive;
use crate::data::{augment, splitmix64, AugmentConfig};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, PairedSample};
use crate::losses::{breakdown, discriminator_objective, LossBreakdown, TrainConfig};
use crate::metrics::{mean_std, psnr, sharpness_difference, ssim};
use crate::model::{build_ablation, AblationSpec, Batch, Model, ModelConfig};
use crate::params::{Bound, ParamSet};

pub const LOG_FILE: &str = "losses.csv";
pub const LATEST_CHECKPOINT: &str = "latest.sgck";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const SHUFFLE_SALT: u64 = 0x5348_5546;
const AUGMENT_SALT: u64 = 0x4155_474d;

/// Adam moments for a list of parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, ParamSet>,
    pub v: IndexMap<String, ParamSet>,
}

impl AdamState {
    pub fn new<'a>(groups: impl IntoIterator<Item = (&'a str, &'a ParamSet)>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (k, p) in groups {
            m.insert(k.to_string(), p.zeros_like());
            v.insert(k.to_string(), p.zeros_like());
        }
        Self { t: 0, m, v }
    }

    /// One Adam update. `grads` is aligned with `params`. Returns the
    /// global gradient norm before clipping.
    pub fn update(
        &mut self,
        params: Vec<(&'static str, &mut ParamSet)>,
        grads: &[ParamSet],
        cfg: &TrainConfig,
    ) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((key, set), grad) in params.into_iter().zip(grads) {
            let m = self.m.get_mut(key).expect("moment group exists");
            let v = self.v.get_mut(key).expect("moment group exists");
            for (name, p) in set.iter_mut() {
                let g = grad.get(name).expect("gradient for every parameter");
                let mt = m.get_mut(name).expect("moment for every parameter");
                let vt = v.get_mut(name).expect("moment for every parameter");
                let (pd, gd) = (p.data_mut(), g.data());
                let (md, vd) = (mt.data_mut(), vt.data_mut());
                for i in 0..pd.len() {
                    let gi = gd[i] * scale;
                    md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                    vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                    let mhat = md[i] / bc1;
                    let vhat = vd[i] / bc2;
                    pd[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
                }
            }
        }
        norm
    }
}

fn collect_grads(grads: &Gradients, set: &ParamSet, bound: &Bound) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in set.iter() {
        let g = grads
            .get(bound.var(name))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        out.insert(name.clone(), g).expect("unique names");
    }
    out
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub train: TrainConfig,
    pub augment: Option<AugmentConfig>,
    pub model: Model,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
}

/// Inputs that fix a training run up to the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSetup {
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    pub wiring: AblationSpec,
    pub augment: Option<AugmentConfig>,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl TrainState {
    /// Fresh state. `train` and `attention` are specialised to the wiring.
    pub fn new(setup: &RunSetup) -> Result<Self> {
        let (train, attention) = setup.wiring.specialise(&setup.train, &setup.attention);
        train.validate()?;
        if let Some(a) = &setup.augment {
            a.validate()?;
        }
        let model = Model::new(&setup.model, &attention, setup.wiring, &train, setup.image_size, setup.seed)?;
        let opt_g = AdamState::new(model.generator_groups());
        let opt_d = AdamState::new([("d", &model.d.tensors)]);
        Ok(Self {
            step: 0,
            seed: setup.seed,
            train,
            augment: setup.augment,
            model,
            opt_g,
            opt_d,
        })
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            model: self.model.config.clone(),
            attention: self.model.attention.clone(),
            train: self.train.clone(),
            wiring: self.model.wiring,
            augment: self.augment,
            image_size: self.model.image_size,
            seed: self.seed,
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        #[derive(Serialize)]
        struct Meta<'a> {
            step: u64,
            adam_g_t: u64,
            adam_d_t: u64,
            setup: &'a RunSetup,
        }
        let setup = self.setup();
        let meta = serde_json::to_value(Meta {
            step: self.step,
            adam_g_t: self.opt_g.t,
            adam_d_t: self.opt_d.t,
            setup: &setup,
        })
        .expect("metadata serialises");
        let mut a = Archive::new(meta);
        for (k, p) in self.model.all_groups() {
            a.insert_set(&format!("param/{k}"), p)?;
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (k, p) in &opt.m {
                a.insert_set(&format!("{tag}/m/{k}"), p)?;
            }
            for (k, p) in &opt.v {
                a.insert_set(&format!("{tag}/v/{k}"), p)?;
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            step: u64,
            adam_g_t: u64,
            adam_d_t: u64,
            setup: RunSetup,
        }
        let meta: Meta = serde_json::from_value(a.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad training metadata: {e}")))?;
        let mut state = TrainState::new(&meta.setup)?;
        state.step = meta.step;
        state.opt_g.t = meta.adam_g_t;
        state.opt_d.t = meta.adam_d_t;
        for (k, p) in state.model.all_groups_mut() {
            a.fill_set(&format!("param/{k}"), p)?;
        }
        for (tag, opt) in [("adam_g", &mut state.opt_g), ("adam_d", &mut state.opt_d)] {
            for (k, p) in opt.m.iter_mut() {
                a.fill_set(&format!("{tag}/m/{k}"), p)?;
            }
            for (k, p) in opt.v.iter_mut() {
                a.fill_set(&format!("{tag}/v/{k}"), p)?;
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Stage-I and stage-II outputs of a generator step, detached from the graph.
#[derive(Clone, Debug)]
pub struct DetachedFakes {
    pub coarse: Tensor,
    pub refined: Option<Tensor>,
}

/// One generator update with D frozen. Returns the breakdown (without
/// `d_loss`) and the fakes of the pre-update forward pass.
pub fn generator_update(state: &mut TrainState, batch: &Batch) -> Result<(LossBreakdown, DetachedFakes)> {
    let cfg = state.train.clone();
    let mut g = Graph::new();
    let (bound, fv, terms, total) = state.model.record_generator_step(&mut g, batch, &cfg, true)?;
    let report = breakdown(&g, &terms, total)?;
    let fakes = DetachedFakes {
        coarse: g.value(fv.coarse).clone(),
        refined: fv.selection.map(|s| g.value(s.refined).clone()),
    };
    let grads = g.backward(total);
    let bounds: Vec<&Bound> = std::iter::once(&bound.gi)
        .chain(bound.gs.as_ref())
        .chain(bound.ga.as_ref())
        .chain(bound.unc.as_ref())
        .collect();
    let g_grads: Vec<ParamSet> = state
        .model
        .generator_groups()
        .iter()
        .zip(&bounds)
        .map(|((_, set), b)| collect_grads(&grads, set, b))
        .collect();
    drop(grads);
    drop(g);
    state.opt_g.update(state.model.generator_groups_mut(), &g_grads, &cfg);
    Ok((report, fakes))
}

/// `d_updates` discriminator updates on detached fakes; returns the loss
/// of the first one.
pub fn discriminator_update(state: &mut TrainState, batch: &Batch, fakes: &DetachedFakes) -> Result<f64> {
    let cfg = state.train.clone();
    let spec = state.model.d.patch_gan_spec()?;
    let mut first = f64::NAN;
    for i in 0..cfg.d_updates {
        let mut g = Graph::new();
        let cond = g.constant(batch.condition.clone());
        let real = g.constant(batch.target.clone());
        let f1 = g.constant(fakes.coarse.clone());
        let f2 = fakes.refined.as_ref().map(|t| g.constant(t.clone()));
        let bd = state.model.d.tensors.bind(&mut g, true);
        let logits = |g: &mut Graph, x| {
            let pair = g.concat(&[cond, x]);
            spec.forward(g, &bd, pair)
        };
        let lr = logits(&mut g, real);
        let l1 = logits(&mut g, f1);
        let l2 = f2.map(|f| logits(&mut g, f));
        let loss = discriminator_objective(&mut g, lr, l1, l2, cfg.lambda_adv);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "d_loss".into() });
        }
        if i == 0 {
            first = value;
        }
        let grads = g.backward(loss);
        let d_grads = collect_grads(&grads, &state.model.d.tensors, &bd);
        state.opt_d.update(vec![("d", &mut state.model.d.tensors)], &[d_grads], &cfg);
    }
    Ok(first)
}

/// One generator update with D frozen, then `d_updates` discriminator
/// updates on the (detached) fakes from the same forward pass.
pub fn train_step(state: &mut TrainState, samples: &[PairedSample]) -> Result<LossBreakdown> {
    let batch = Batch::new(samples)?;
    let (mut report, fakes) = generator_update(state, &batch)?;
    report.d_loss = discriminator_update(state, &batch, &fakes)?;
    state.step += 1;
    Ok(report)
}

/// Mixes a seed with a counter into an independent 64-bit seed.
pub fn derive_seed(seed: u64, salt: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ salt) ^ counter)
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size.max(1)) as u64
}

/// Sample indices of training step `step`: the epoch's seeded permutation,
/// cut into consecutive batches (the last may be short).
pub fn batch_indices(n_samples: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(n_samples, batch_size);
    let (epoch, pos) = (step / spe, (step % spe) as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_SALT, epoch));
    let mut perm: Vec<usize> = (0..n_samples).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let start = pos * batch_size;
    perm[start..(start + batch_size).min(n_samples)].to_vec()
}

/// The (possibly augmented) batch of training step `step`.
pub fn step_batch(samples: &[PairedSample], batch_size: usize, seed: u64, step: u64, aug: Option<&AugmentConfig>) -> Vec<PairedSample> {
    let idx = batch_indices(samples.len(), batch_size, seed, step);
    match aug {
        None => idx.iter().map(|&i| samples[i].clone()).collect(),
        Some(cfg) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, AUGMENT_SALT, step));
            idx.iter().map(|&i| augment(&samples[i], cfg, &mut rng)).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Step count at which training stops.
    pub total_steps: u64,
    pub batch_size: usize,
    /// Write `checkpoints/step_XXXXXXXX.sgck` every this many steps.
    pub checkpoint_every: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:08}.sgck"))
}

/// Keeps the header and every row logged before `step`.
fn prepare_log(path: &Path, step: u64) -> Result<fs::File> {
    let mut kept = vec![LossBreakdown::CSV_HEADER.to_string()];
    if step > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: malformed log row", path.display())))?;
            if s < step {
                kept.push(line.to_string());
            }
        }
    }
    let mut body = kept.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Trains from `state.step` up to `opts.total_steps`. Logged rows carry the
/// step index before the update. With an output directory, writes the CSV
/// log, a checkpoint at step 0 and every `checkpoint_every` steps, and
/// `latest.sgck` at the end.
pub fn run_training(state: &mut TrainState, samples: &[PairedSample], opts: &RunOptions) -> Result<Vec<(u64, LossBreakdown)>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if samples.is_empty() && opts.total_steps > state.step {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(prepare_log(&dir.join(LOG_FILE), state.step)?)
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            let a = state.to_archive()?;
            a.save(&checkpoint_path(dir, state.step))?;
            a.save(&dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(())
    };
    if state.step == 0 {
        save(state)?;
    }
    let mut trace = Vec::new();
    while state.step < opts.total_steps {
        let step = state.step;
        let batch = step_batch(samples, opts.batch_size, state.seed, step, state.augment.as_ref());
        let report = train_step(state, &batch)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", report.csv_row(step)).map_err(|e| Error::io(opts.out_dir.as_ref().unwrap().join(LOG_FILE), e))?;
        }
        log::debug!("step {step}: total {:.6} d {:.6}", report.total, report.d_loss);
        trace.push((step, report));
        if matches!(opts.checkpoint_every, Some(k) if k > 0 && state.step % k == 0) {
            save(state)?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        state.to_archive()?.save(&dir.join(LATEST_CHECKPOINT))?;
    }
    Ok(trace)
}

/// Mean pixel scores of the final output against the targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelScores {
    pub ssim: f64,
    pub psnr: f64,
    pub sd: f64,
}

pub fn evaluate_model(model: &Model, samples: &[PairedSample], batch_size: usize) -> Result<PixelScores> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut values = [Vec::new(), Vec::new(), Vec::new()];
    for chunk in samples.chunks(batch_size.max(1)) {
        for (out, s) in model.generate(chunk)?.iter().zip(chunk) {
            let (fake, real): (&ImageTensor, &ImageTensor) = (out.final_image(), &s.target_image);
            values[0].push(ssim(real, fake)?);
            values[1].push(psnr(real, fake)?);
            values[2].push(sharpness_difference(real, fake)?);
        }
    }
    Ok(PixelScores {
        ssim: mean_std(&values[0]).0,
        psnr: mean_std(&values[1]).0,
        sd: mean_std(&values[2]).0,
    })
}

/// Shared settings of an ablation or sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    pub augment: Option<AugmentConfig>,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Experiment {
    pub fn setup(&self, wiring: AblationSpec, image_size: (usize, usize)) -> RunSetup {
        RunSetup {
            model: self.model.clone(),
            attention: self.attention.clone(),
            train: self.train.clone(),
            wiring,
            augment: self.augment,
            image_size,
            seed: self.seed,
        }
    }

    /// Trains `wiring` (with attention overrides) and scores it on `eval`.
    pub fn run(&self, wiring: AblationSpec, attention: &AttentionConfig, train: &[PairedSample], eval: &[PairedSample]) -> Result<PixelScores> {
        let first = train.first().ok_or_else(|| Error::Data("empty training set".into()))?;
        let mut setup = self.setup(wiring, (first.height(), first.width()));
        setup.attention = attention.clone();
        let mut state = TrainState::new(&setup)?;
        run_training(
            &mut state,
            train,
            &RunOptions {
                total_steps: self.steps,
                batch_size: self.batch_size,
                checkpoint_every: None,
                out_dir: None,
            },
        )?;
        evaluate_model(&state.model, eval, self.batch_size)
    }
}

/// One row of an ablation or sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub scores: PixelScores,
}

/// Trains and scores each requested baseline.
pub fn run_ablation(exp: &Experiment, ids: &[char], train: &[PairedSample], eval: &[PairedSample]) -> Result<Vec<ResultRow>> {
    let wirings = ids.iter().map(|&c| build_ablation(c)).collect::<Result<Vec<_>>>()?;
    wirings
        .into_iter()
        .map(|w| {
            log::info!("baseline {}", w.baseline);
            Ok(ResultRow {
                label: w.baseline.to_string(),
                scores: exp.run(w, &exp.attention, train, eval)?,
            })
        })
        .collect()
}

/// Baseline F at each attention width `N`; `N = 0` runs baseline E.
pub fn attention_sweep(exp: &Experiment, n_values: &[usize], train: &[PairedSample], eval: &[PairedSample]) -> Result<Vec<ResultRow>> {
    n_values
        .iter()
        .map(|&n| {
            log::info!("attention channels N={n}");
            let (wiring, attention) = if n == 0 {
                (build_ablation('E')?, exp.attention.clone())
            } else {
                let attention = AttentionConfig {
                    n_channels: n,
                    ..exp.attention.clone()
                };
                (build_ablation('F')?, attention)
            };
            Ok(ResultRow {
                label: n.to_string(),
                scores: exp.run(wiring, &attention, train, eval)?,
            })
        })
        .collect()
}

/// CSV table with columns `<key>,ssim,psnr,sd`.
pub fn format_table(key: &str, rows: &[ResultRow]) -> String {
    let mut out = format!("{key},ssim,psnr,sd\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.label, r.scores.ssim, r.scores.psnr, r.scores.sd));
    }
    out
}
