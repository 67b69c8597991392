//! Two-phase training: image-level adversarial steps alternating with mixup
//! steps that add patch-level adversarial and distance-regularization terms.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Var};
use crate::checkpoint;
use crate::data::FewShotDataset;
use crate::error::{MixdlError, Result};
use crate::imaging::Image;
use crate::losses::ProjectionHead;
use crate::metrics::sample_latents;
use crate::mixup::{sample_coefficients, target_distribution, CoefficientSource, LatentSpace, MixupCoefficients};
use crate::models::{Discriminator, Generator, ModelConfig, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLoss {
    #[default]
    NonsaturatingLogistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub mixup_n: usize,
    pub mixup_source: CoefficientSource,
    pub alpha: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: [f64; 2],
    pub adv_loss: AdvLoss,
    pub r1_gamma: f64,
    pub r1_interval: u64,
    pub interpolation_space: LatentSpace,
    pub patch_phase: bool,
    pub patch_weight: f64,
    pub seed: u64,
    pub augmentation: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_g: 1000.0,
            lambda_d: 1.0,
            mixup_n: 8,
            mixup_source: CoefficientSource::Dirichlet,
            alpha: 1.0,
            steps: 5000,
            batch_size: 8,
            lr_g: 2e-3,
            lr_d: 2e-3,
            betas: [0.0, 0.99],
            adv_loss: AdvLoss::NonsaturatingLogistic,
            r1_gamma: 1.0,
            r1_interval: 16,
            interpolation_space: LatentSpace::Mapped,
            patch_phase: true,
            patch_weight: 1.0,
            seed: 0,
            augmentation: "none".into(),
        }
    }
}

impl TrainConfig {
    /// All regularizers and the patch phase switched off.
    pub fn plain_gan(self) -> Self {
        TrainConfig {
            lambda_g: 0.0,
            lambda_d: 0.0,
            patch_phase: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MixdlError::Configuration(msg));
        for (name, v) in [("lambda_g", self.lambda_g), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.steps < 1 {
            return bad("train.steps must be at least 1".into());
        }
        if self.mixup_n < 2 {
            return bad(format!("train.mixup_n must be at least 2, got {}", self.mixup_n));
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("train.alpha must be positive, got {}", self.alpha));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be positive, got {v}"));
            }
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("train.betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return bad(format!("train.r1_gamma must be >= 0, got {}", self.r1_gamma));
        }
        if self.r1_interval < 1 {
            return bad("train.r1_interval must be at least 1".into());
        }
        if !(self.patch_weight >= 0.0 && self.patch_weight.is_finite()) {
            return bad(format!("train.patch_weight must be >= 0, got {}", self.patch_weight));
        }
        augmentation_by_name(&self.augmentation)?;
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: 1e-8,
        }
    }
}

/// Differentiable image-batch transform applied before every discriminator
/// call.
pub trait Augmentation: Send {
    fn name(&self) -> &str;
    fn apply(&self, g: &mut Graph, images: Var, rng: &mut ChaCha8Rng) -> Var;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoAugmentation;

impl Augmentation for NoAugmentation {
    fn name(&self) -> &str {
        "none"
    }

    fn apply(&self, _g: &mut Graph, images: Var, _rng: &mut ChaCha8Rng) -> Var {
        images
    }
}

pub fn augmentation_by_name(name: &str) -> Result<Box<dyn Augmentation>> {
    match name {
        "none" => Ok(Box::new(NoAugmentation)),
        other => Err(MixdlError::Configuration(format!(
            "unknown augmentation {other:?} (only \"none\" is built in)"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adversarial,
    Mixup,
}

/// Losses of one training step. Terms a phase does not compute are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub adv_g: f64,
    pub adv_d: f64,
    pub dist_g: f64,
    pub dist_d: f64,
    pub r1: f64,
}

impl StepRecord {
    fn empty(step: u64, phase: Phase) -> Self {
        StepRecord {
            step,
            phase,
            adv_g: 0.0,
            adv_d: 0.0,
            dist_g: 0.0,
            dist_d: 0.0,
            r1: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<StepRecord>,
}

impl LossTrace {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| MixdlError::Configuration(format!("bad trace line {l:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(LossTrace { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path).map_err(|e| MixdlError::io(path, e))?)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// `weight` `[proj_dim, d_pen]` and `bias` `[proj_dim]`.
    pub projection: ParamSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_p: Adam,
    pub step: u64,
    pub d_updates: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh models and optimizers. Initialization draws from stream 0 of
    /// the seed, training draws from stream 1.
    pub fn new(config: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::from_config(model, &mut init)?;
        let discriminator = Discriminator::from_config(model, &mut init)?;
        let head = ProjectionHead::random(model.d_pen, model.proj_dim, &mut init);
        let mut projection = ParamSet::default();
        projection.push("weight", head.weight().clone());
        projection.push("bias", Tensor::new(vec![head.output_dim()], head.bias().to_vec()));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainState {
            opt_g: Adam::new(config.adam(config.lr_g), generator.params()),
            opt_d: Adam::new(config.adam(config.lr_d), discriminator.params()),
            opt_p: Adam::new(config.adam(config.lr_d), &projection),
            generator,
            discriminator,
            projection,
            step: 0,
            d_updates: 0,
            rng,
        })
    }

    pub fn projection_head(&self) -> Result<ProjectionHead> {
        let w = self.projection.get("weight").expect("projection weight");
        let b = self.projection.get("bias").expect("projection bias");
        ProjectionHead::new(w.clone(), b.data().to_vec())
    }
}

/// Images produced by a mixup step, for inspection.
#[derive(Clone, Debug)]
pub struct MixupOutcome {
    pub record: StepRecord,
    pub coefficients: Option<MixupCoefficients>,
    pub anchor: Option<Image>,
    pub batch: Vec<Image>,
}

pub struct Trainer {
    config: TrainConfig,
    model: ModelConfig,
    state: TrainState,
    dataset: FewShotDataset,
    augment: Box<dyn Augmentation>,
    metadata: serde_json::Value,
}

fn check(step: u64, term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MixdlError::NonFinite { step, term, value })
    }
}

fn check_params(step: u64, term: &'static str, p: &ParamSet) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(MixdlError::NonFinite {
            step,
            term,
            value: f64::NAN,
        })
    }
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn grads_for<'a>(grads: &'a Gradients, vars: &[Var]) -> Vec<Option<&'a Tensor>> {
    vars.iter().map(|v| grads.get(*v)).collect()
}

/// `mean(softplus(x))`, or `mean(softplus(-x))` when `negate`.
fn softplus_mean(g: &mut Graph, x: Var, negate: bool) -> Var {
    let x = if negate { g.scale(x, -1.0) } else { x };
    let s = g.softplus(x);
    g.mean(s)
}

/// Relative step for the finite-difference Hessian-vector product.
const R1_FD_STEP: f64 = 1e-3;

impl Trainer {
    pub fn new(config: TrainConfig, model: ModelConfig, dataset: FewShotDataset) -> Result<Self> {
        let state = TrainState::new(&config, &model)?;
        Self::with_state(config, model, state, dataset)
    }

    /// Resumes from a state, e.g. one read back from a checkpoint.
    pub fn with_state(
        config: TrainConfig,
        model: ModelConfig,
        state: TrainState,
        dataset: FewShotDataset,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.resolution() != model.resolution {
            return Err(MixdlError::Configuration(format!(
                "dataset resolution {} does not match model resolution {}",
                dataset.resolution(),
                model.resolution
            )));
        }
        let augment = augmentation_by_name(&config.augmentation)?;
        Ok(Trainer {
            config,
            model,
            state,
            dataset,
            augment,
            metadata: serde_json::Value::Null,
        })
    }

    pub fn from_checkpoint(path: &Path, dataset: FewShotDataset) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let mut t = Self::with_state(ck.train, ck.model, ck.state, dataset)?;
        t.metadata = ck.metadata;
        Ok(t)
    }

    pub fn with_augmentation(mut self, augment: Box<dyn Augmentation>) -> Self {
        self.augment = augment;
        self
    }

    /// Opaque JSON stored alongside the weights in checkpoints.
    pub fn set_metadata(&mut self, metadata: serde_json::Value) {
        self.metadata = metadata;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn dataset(&self) -> &FewShotDataset {
        &self.dataset
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config, &self.model, &self.metadata, &self.state)
    }

    /// Runs the next step: adversarial on even step counts, mixup on odd.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.state.step % 2 == 0 {
            self.adversarial_step()
        } else {
            self.mixup_step()
        }
    }

    /// One discriminator update then one generator update with image-level
    /// nonsaturating logistic losses, plus lazy R1 on real images.
    pub fn adversarial_step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let b = self.config.batch_size;
        let d_z = self.state.generator.latent_dim();
        let mut rec = StepRecord::empty(step, Phase::Adversarial);

        let z = sample_latents(b, d_z, &mut self.state.rng);
        let fake = Image::batch_to_tensor(&self.state.generator.generate(&z)?)?;
        let real = Image::batch_to_tensor(&self.dataset.sample(b, &mut self.state.rng))?;
        let r1_due = self.config.r1_gamma > 0.0 && self.state.d_updates % self.config.r1_interval == 0;
        let r1 = if r1_due { Some(self.r1_direction(&real)?) } else { None };

        let mut g = Graph::new();
        let dv = self.state.discriminator.params().bind(&mut g, true);
        let x = g.constant(concat(&fake, &real));
        let x = self.augment.apply(&mut g, x, &mut self.state.rng);
        let logits = self.state.discriminator.forward(&mut g, &dv, x, true).logits.expect("full pass");
        let fake_idx: Vec<usize> = (0..b).collect();
        let real_idx: Vec<usize> = (b..2 * b).collect();
        let lf = g.select_rows(logits, &fake_idx);
        let lr = g.select_rows(logits, &real_idx);
        let lf = softplus_mean(&mut g, lf, false);
        let lr = softplus_mean(&mut g, lr, true);
        let mut loss = g.add(lf, lr);
        rec.adv_d = check(step, "adv_d", g.value(loss).item())?;
        if let Some((dir, eps, penalty)) = r1 {
            rec.r1 = check(step, "r1", penalty)?;
            loss = self.add_r1_term(&mut g, &dv, loss, &real, &dir, eps);
        }
        let grads = g.backward(loss);
        self.state
            .opt_d
            .step(self.state.discriminator.params_mut(), &grads_for(&grads, &dv));
        self.state.d_updates += 1;
        check_params(step, "discriminator parameters", self.state.discriminator.params())?;

        let z = sample_latents(b, d_z, &mut self.state.rng);
        let mut g = Graph::new();
        let gv = self.state.generator.params().bind(&mut g, true);
        let dv = self.state.discriminator.params().bind(&mut g, false);
        let zv = g.constant(self.state.generator.latent_tensor(&z)?);
        let w = self.state.generator.map_latent_graph(&mut g, &gv, zv);
        let images = self.state.generator.synthesize_graph(&mut g, &gv, w).images;
        let x = self.augment.apply(&mut g, images, &mut self.state.rng);
        let logits = self.state.discriminator.forward(&mut g, &dv, x, true).logits.expect("full pass");
        let loss = softplus_mean(&mut g, logits, true);
        rec.adv_g = check(step, "adv_g", g.value(loss).item())?;
        let grads = g.backward(loss);
        self.state
            .opt_g
            .step(self.state.generator.params_mut(), &grads_for(&grads, &gv));
        check_params(step, "generator parameters", self.state.generator.params())?;

        self.state.step += 1;
        Ok(rec)
    }

    /// Input gradient `g = d sum D(x) / dx` on real images, the finite
    /// difference step for it, and the penalty value
    /// `gamma / 2 * mean_i |g_i|^2`.
    fn r1_direction(&self, real: &Tensor) -> Result<(Tensor, f64, f64)> {
        let mut g = Graph::new();
        let dv = self.state.discriminator.params().bind(&mut g, false);
        let x = g.leaf(real.clone(), true);
        let logits = self.state.discriminator.forward(&mut g, &dv, x, true).logits.expect("full pass");
        let total = g.sum(logits);
        let mut grads = g.backward(total);
        let gx = grads.take(x).expect("input gradient");
        let b = real.rows() as f64;
        let penalty = 0.5 * self.config.r1_gamma * gx.data().iter().map(|v| v * v).sum::<f64>() / b;
        let max = gx.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let eps = if max > 0.0 { R1_FD_STEP / max } else { 0.0 };
        Ok((gx, eps, penalty))
    }

    /// Adds a term whose parameter gradient equals that of
    /// `interval * gamma / 2 * mean_i |grad_x D(x_i)|^2`, using
    /// `d/dtheta (g . grad_x D) ~ d/dtheta (D(x + eps g) - D(x - eps g)) / 2 eps`
    /// with `g` held fixed.
    fn add_r1_term(&self, g: &mut Graph, dv: &[Var], loss: Var, real: &Tensor, dir: &Tensor, eps: f64) -> Var {
        if eps == 0.0 {
            return loss;
        }
        let shifted = |sign: f64| {
            let data = real
                .data()
                .iter()
                .zip(dir.data())
                .map(|(x, d)| x + sign * eps * d)
                .collect();
            Tensor::new(real.shape().to_vec(), data)
        };
        let d = &self.state.discriminator;
        let xp = g.constant(shifted(1.0));
        let xm = g.constant(shifted(-1.0));
        let lp = d.forward(g, dv, xp, true).logits.expect("full pass");
        let lm = d.forward(g, dv, xm, true).logits.expect("full pass");
        let sp = g.sum(lp);
        let sm = g.sum(lm);
        let sm = g.scale(sm, -1.0);
        let diff = g.add(sp, sm);
        let weight = self.config.r1_gamma * self.config.r1_interval as f64 / real.rows() as f64 / (2.0 * eps);
        let term = g.scale(diff, weight);
        g.add(loss, term)
    }

    pub fn mixup_step(&mut self) -> Result<StepRecord> {
        self.mixup_step_with(None).map(|o| o.record)
    }

    /// Mixup step, optionally with forced coefficients instead of a draw.
    ///
    /// The anchor is built in the configured interpolation space and
    /// synthesized together with the batch. The discriminator update sees
    /// patch-level real/fake losses (anchor vs. real images) plus
    /// `lambda_d` times the projected-feature distance loss. The generator
    /// update sees the patch-level loss on the anchor plus `lambda_g` times
    /// the tap distance loss. The discriminator's distance loss does not
    /// reach the generator.
    pub fn mixup_step_with(&mut self, forced: Option<MixupCoefficients>) -> Result<MixupOutcome> {
        let step = self.state.step;
        let cfg = self.config.clone();
        let update_g = cfg.patch_phase || cfg.lambda_g > 0.0;
        let update_d = cfg.patch_phase || cfg.lambda_d > 0.0;
        let mut rec = StepRecord::empty(step, Phase::Mixup);
        if !update_g && !update_d && forced.is_none() {
            self.state.step += 1;
            return Ok(MixupOutcome {
                record: rec,
                coefficients: None,
                anchor: None,
                batch: Vec::new(),
            });
        }
        let n = cfg.mixup_n;
        let gen = &self.state.generator;
        let z = sample_latents(n, gen.latent_dim(), &mut self.state.rng);
        let coeff = match forced {
            Some(c) if c.n() != n => {
                return Err(MixdlError::param(format!(
                    "forced coefficients have {} entries, mixup_n is {n}",
                    c.n()
                )))
            }
            Some(c) => c,
            None => sample_coefficients(n, cfg.mixup_source, &[cfg.alpha], &mut self.state.rng)?,
        };
        let target = target_distribution(&coeff);
        let batch_idx: Vec<usize> = (0..n).collect();

        let mut gg = Graph::new();
        let gv = gen.params().bind(&mut gg, update_g);
        let zv = gg.constant(gen.latent_tensor(&z)?);
        let latents = match cfg.interpolation_space {
            LatentSpace::Mapped => {
                let w = gen.map_latent_graph(&mut gg, &gv, zv);
                let a = gg.mix_rows(w, coeff.values())?;
                gg.concat_rows(&[w, a])
            }
            LatentSpace::Prior => {
                let a = gg.mix_rows(zv, coeff.values())?;
                let all = gg.concat_rows(&[zv, a]);
                gen.map_latent_graph(&mut gg, &gv, all)
            }
        };
        let syn = gen.synthesize_graph(&mut gg, &gv, latents);
        let mut dist_g = None;
        for (_, tap) in &syn.taps {
            let kl = gg.profile_kl(*tap, n, &batch_idx, &target)?;
            dist_g = Some(match dist_g {
                None => kl,
                Some(acc) => gg.add(acc, kl),
            });
        }
        let dist_g = gg.scale(dist_g.expect("generator declares taps"), 1.0 / syn.taps.len() as f64);
        rec.dist_g = check(step, "dist_g", gg.value(dist_g).item())?;
        let images = gg.value(syn.images).clone();

        if update_d {
            let b = cfg.batch_size;
            let real = Image::batch_to_tensor(&self.dataset.sample(b, &mut self.state.rng))?;
            let mut g = Graph::new();
            let dv = self.state.discriminator.params().bind(&mut g, true);
            let pv = self.state.projection.bind(&mut g, cfg.lambda_d > 0.0);
            let x = g.constant(concat(&images, &real));
            let x = self.augment.apply(&mut g, x, &mut self.state.rng);
            let out = self.state.discriminator.forward(&mut g, &dv, x, true);
            let mut loss = None;
            if cfg.patch_phase {
                let real_idx: Vec<usize> = (n + 1..n + 1 + b).collect();
                let pa = g.select_rows(out.patch, &[n]);
                let pr = g.select_rows(out.patch, &real_idx);
                let la = softplus_mean(&mut g, pa, false);
                let lr = softplus_mean(&mut g, pr, true);
                let adv = g.add(la, lr);
                rec.adv_d = check(step, "adv_d", g.value(adv).item())?;
                loss = Some(g.scale(adv, cfg.patch_weight));
            }
            let fake_idx: Vec<usize> = (0..=n).collect();
            let pen = g.select_rows(out.pen.expect("full pass"), &fake_idx);
            let proj = g.linear(pen, pv[0], Some(pv[1]));
            let dist_d = g.profile_kl(proj, n, &batch_idx, &target)?;
            rec.dist_d = check(step, "dist_d", g.value(dist_d).item())?;
            if cfg.lambda_d > 0.0 {
                let term = g.scale(dist_d, cfg.lambda_d);
                loss = Some(match loss {
                    None => term,
                    Some(l) => g.add(l, term),
                });
            }
            if let Some(loss) = loss {
                let grads = g.backward(loss);
                self.state
                    .opt_d
                    .step(self.state.discriminator.params_mut(), &grads_for(&grads, &dv));
                self.state.d_updates += 1;
                if cfg.lambda_d > 0.0 {
                    self.state
                        .opt_p
                        .step(&mut self.state.projection, &grads_for(&grads, &pv));
                }
                check_params(step, "discriminator parameters", self.state.discriminator.params())?;
                check_params(step, "projection parameters", &self.state.projection)?;
            }
        }

        if update_g {
            let mut loss = None;
            if cfg.patch_phase {
                let dv = self.state.discriminator.params().bind(&mut gg, false);
                let anchor = gg.select_rows(syn.images, &[n]);
                let x = self.augment.apply(&mut gg, anchor, &mut self.state.rng);
                let patch = self.state.discriminator.forward(&mut gg, &dv, x, false).patch;
                let adv = softplus_mean(&mut gg, patch, true);
                rec.adv_g = check(step, "adv_g", gg.value(adv).item())?;
                loss = Some(gg.scale(adv, cfg.patch_weight));
            }
            if cfg.lambda_g > 0.0 {
                let term = gg.scale(dist_g, cfg.lambda_g);
                loss = Some(match loss {
                    None => term,
                    Some(l) => gg.add(l, term),
                });
            }
            if let Some(loss) = loss {
                let grads = gg.backward(loss);
                self.state
                    .opt_g
                    .step(self.state.generator.params_mut(), &grads_for(&grads, &gv));
                check_params(step, "generator parameters", self.state.generator.params())?;
            }
        }

        self.state.step += 1;
        let mut all = Image::batch_from_tensor(&images);
        let anchor = all.pop();
        Ok(MixupOutcome {
            record: rec,
            coefficients: Some(coeff),
            anchor,
            batch: all,
        })
    }

    /// Runs until `config.steps`, appending each record to the trace file,
    /// invoking callbacks and writing checkpoints at their cadences.
    pub fn run(&mut self, options: &TrainOptions, callbacks: &mut [&mut dyn TrainCallback]) -> Result<TrainOutcome> {
        let mut trace = LossTrace::default();
        let mut checkpoints = Vec::new();
        let mut trace_file = match &options.trace_path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| MixdlError::io(parent, e))?;
                }
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| MixdlError::io(p, e))?;
                Some((p.clone(), std::io::BufWriter::new(f)))
            }
            None => None,
        };
        while self.state.step < self.config.steps {
            let rec = self.step()?;
            if let Some((p, f)) = trace_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("records serialize");
                writeln!(f, "{line}")
                    .and_then(|_| f.flush())
                    .map_err(|e| MixdlError::io(p.as_path(), e))?;
            }
            trace.push(rec);
            let done = self.state.step;
            let last = done == self.config.steps;
            if options.callback_every > 0 && (done % options.callback_every == 0 || last) {
                for cb in callbacks.iter_mut() {
                    cb.on_cadence(self, &rec)?;
                }
            }
            if let Some(dir) = &options.checkpoint_dir {
                if last || (options.checkpoint_every > 0 && done % options.checkpoint_every == 0) {
                    let path = dir.join(format!("step_{done:06}.mixdl"));
                    self.save_checkpoint(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        Ok(TrainOutcome { trace, checkpoints })
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

/// Hook invoked between steps with read access to the trainer.
pub trait TrainCallback {
    fn on_cadence(&mut self, trainer: &Trainer, record: &StepRecord) -> Result<()>;
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Steps between callback invocations; 0 disables callbacks.
    pub callback_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between checkpoints; the final step is always saved when a
    /// directory is set.
    pub checkpoint_every: u64,
    pub trace_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    pub checkpoints: Vec<PathBuf>,
}

/// Builds a trainer and runs it to completion.
pub fn train(
    config: TrainConfig,
    model: ModelConfig,
    dataset: FewShotDataset,
    options: &TrainOptions,
    callbacks: &mut [&mut dyn TrainCallback],
) -> Result<(TrainState, LossTrace, Vec<PathBuf>)> {
    let mut trainer = Trainer::new(config, model, dataset)?;
    let out = trainer.run(options, callbacks)?;
    Ok((trainer.into_state(), out.trace, out.checkpoints))
}

/// Reference trainer that only ever takes adversarial steps.
pub struct PlainGanTrainer {
    inner: Trainer,
}

impl PlainGanTrainer {
    pub fn new(config: TrainConfig, model: ModelConfig, dataset: FewShotDataset) -> Result<Self> {
        Ok(PlainGanTrainer {
            inner: Trainer::new(config.plain_gan(), model, dataset)?,
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        self.inner.adversarial_step()
    }

    pub fn state(&self) -> &TrainState {
        self.inner.state()
    }
}
