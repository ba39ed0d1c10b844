//! Staged training: a background-first schedule with a linear foreground
//! ramp, masked noise-prediction losses, an AdamW optimizer that skips
//! frozen and unreached parameters, and bit-exact checkpointing.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::composer::{boundary_band, union_mask};
use crate::config::{Config, RegionMode, TrainingConfig};
use crate::denoiser::{BranchInput, Denoiser};
use crate::diffusion::{add_noise, make_schedule, NoiseSchedule};
use crate::guidance::{assemble_condition_bg, assemble_condition_fg, context_mask, ConditionSequence, PoseMap};
use crate::lora::Branch;
use crate::params::ParamStore;
use crate::scenes::{render_pose_map, SceneSample};
use crate::tensor::GradMap;
use crate::tensor::{DRng, Tensor};

#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample size {0} does not match configured image size {1}")]
    SizeMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BgOnly,
    Ramp,
    Joint,
}

/// Piecewise foreground weight: 0 before `t0`, linear ramp on `[t0, t1]`,
/// `lambda_max` afterwards.
#[derive(Clone, Copy, Debug)]
pub struct StageController {
    pub t0: u64,
    pub t1: u64,
    pub lambda_max: f64,
}

impl StageController {
    pub fn from_config(cfg: &TrainingConfig) -> StageController {
        assert!(cfg.t0 < cfg.t1, "t0 must be below t1");
        assert!(cfg.lambda_max >= 0.0, "lambda_max must be nonnegative");
        StageController { t0: cfg.t0, t1: cfg.t1, lambda_max: cfg.lambda_max }
    }

    pub fn stage(&self, step: u64) -> Stage {
        if step < self.t0 {
            Stage::BgOnly
        } else if step <= self.t1 {
            Stage::Ramp
        } else {
            Stage::Joint
        }
    }

    pub fn lambda_t(&self, step: u64) -> f64 {
        if step < self.t0 {
            0.0
        } else if step <= self.t1 {
            // ratio first: keeps the weight within [0, lambda_max] and
            // monotone even under floating-point rounding
            self.lambda_max * ((step - self.t0) as f64 / (self.t1 - self.t0) as f64)
        } else {
            self.lambda_max
        }
    }
}

fn expand_mask(mask: &Tensor, channels: usize) -> Tensor {
    assert_eq!(mask.shape().len(), 2, "mask must be HxW");
    let hw = mask.numel();
    let mut data = vec![0.0; channels * hw];
    for c in 0..channels {
        data[c * hw..(c + 1) * hw].copy_from_slice(mask.data());
    }
    Tensor::new(&[channels, mask.shape()[0], mask.shape()[1]], data)
}

fn invert_mask(mask: &Tensor) -> Tensor {
    Tensor::new(mask.shape(), mask.data().iter().map(|&v| 1.0 - v).collect())
}

/// Masked noise-prediction loss of one foreground branch:
/// `||M * (eps - eps_hat)||^2` (inside) or the complement (outside).
/// The mask is at latent extent.
pub fn foreground_loss(eps: &Tensor, eps_hat: &Tensor, mask: &Tensor, mode: RegionMode) -> Tensor {
    assert_eq!(eps.shape(), eps_hat.shape(), "foreground_loss: extent mismatch");
    let m = match mode {
        RegionMode::Inside => mask.clone(),
        RegionMode::Outside => invert_mask(mask),
    };
    let mc = expand_mask(&m, eps.shape()[0]);
    eps.sub(eps_hat).mul(&mc).sq_norm()
}

/// Whole-image noise-prediction loss of the background branch.
pub fn background_loss(eps: &Tensor, eps_hat: &Tensor) -> Tensor {
    assert_eq!(eps.shape(), eps_hat.shape(), "background_loss: extent mismatch");
    eps.sub(eps_hat).sq_norm()
}

/// Region-aware foreground loss: masked residual plus a boundary-band
/// residual penalty and a masked finite-difference gradient penalty.
pub fn region_loss(eps: &Tensor, eps_hat: &Tensor, mask: &Tensor, beta_b: f64, beta_g: f64) -> Tensor {
    assert!(beta_b >= 0.0 && beta_g >= 0.0, "region loss weights must be nonnegative");
    assert_eq!(eps.shape(), eps_hat.shape(), "region_loss: extent mismatch");
    let c = eps.shape()[0];
    let r = eps.sub(eps_hat);
    let mc = expand_mask(mask, c);
    let band = expand_mask(&boundary_band(mask, 1), c);
    let residual = r.mul(&mc).sq_norm();
    let boundary = r.mul(&band).sq_norm().scale_const(beta_b);
    let grads = r
        .diff_x()
        .mul(&mc)
        .sq_norm()
        .add(&r.diff_y().mul(&mc).sq_norm())
        .scale_const(beta_g);
    residual.add(&boundary).add(&grads)
}

/// `lambda_t(step) * sum(fg) + bg`; with a zero weight the result is the
/// background loss itself, so no foreground graph is attached.
pub fn total_loss(fg_losses: &[Tensor], bg_loss: &Tensor, step: u64, ctrl: &StageController) -> Tensor {
    let lambda = ctrl.lambda_t(step);
    if lambda == 0.0 || fg_losses.is_empty() {
        return bg_loss.clone();
    }
    let mut sum = fg_losses[0].clone();
    for l in &fg_losses[1..] {
        sum = sum.add(l);
    }
    bg_loss.add(&sum.scale_const(lambda))
}

/// AdamW state: decoupled weight decay, bias-corrected moments, and a
/// per-parameter update count so late-joining parameters are corrected from
/// their own first step. Parameters that are frozen or absent from the
/// gradient graph are left completely untouched (no decay, no moments).
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
}

impl OptimState {
    pub fn new(cfg: &TrainingConfig, store: &ParamStore) -> OptimState {
        let m = store.slots().map(|(_, s)| vec![0.0; s.value.numel()]).collect::<Vec<_>>();
        let v = m.clone();
        let counts = vec![0; m.len()];
        OptimState {
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m,
            v,
            counts,
        }
    }
}

/// One AdamW step over every unfrozen parameter that received a gradient.
/// Clamped parameters are projected back into their range afterwards.
pub fn adamw_update(store: &mut ParamStore, grads: &GradMap, optim: &mut OptimState) {
    optim.step += 1;
    let ids: Vec<_> = store.slots().map(|(id, _)| id).collect();
    for id in ids {
        let slot = store.slot(id);
        if slot.frozen {
            continue;
        }
        let Some(g) = grads.get(&slot.value) else { continue };
        let g = g.to_vec();
        let shape = slot.value.shape().to_vec();
        let mut p = slot.value.data().to_vec();
        let clamp = slot.clamp;
        let idx = id.0;
        optim.counts[idx] += 1;
        let t = optim.counts[idx] as i32;
        let (b1, b2) = (optim.beta1, optim.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..p.len() {
            optim.m[idx][i] = b1 * optim.m[idx][i] + (1.0 - b1) * g[i];
            optim.v[idx][i] = b2 * optim.v[idx][i] + (1.0 - b2) * g[i] * g[i];
            let mhat = optim.m[idx][i] / bc1;
            let vhat = optim.v[idx][i] / bc2;
            p[i] -= optim.lr * (mhat / (vhat.sqrt() + optim.eps) + optim.weight_decay * p[i]);
            if let Some((lo, hi)) = clamp {
                p[i] = p[i].clamp(lo, hi);
            }
        }
        store.set_value(id, Tensor::param(&shape, p));
    }
}

/// Per-step record, emitted as one JSON object per line by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: Stage,
    pub lambda: f64,
    pub bg_loss: f64,
    pub fg_loss: f64,
    pub total: f64,
}

/// Owns everything a training run needs; checkpoints restore it bit-exactly.
pub struct Trainer {
    pub cfg: Config,
    pub model: Denoiser,
    pub store: ParamStore,
    pub optim: OptimState,
    pub ctrl: StageController,
    pub sched: NoiseSchedule,
    pub rng: DRng,
}

impl Trainer {
    pub fn new(cfg: Config, seed: u64) -> Trainer {
        let root = DRng::new(seed);
        let mut store = ParamStore::new();
        let model = Denoiser::init(&mut store, &cfg.model, &mut root.split(1));
        let optim = OptimState::new(&cfg.training, &store);
        let ctrl = StageController::from_config(&cfg.training);
        let sched = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
            .expect("validated config yields a valid schedule");
        Trainer { cfg, model, store, optim, ctrl, sched, rng: root.split(2) }
    }

    pub fn step_index(&self) -> u64 {
        self.optim.step
    }

    /// Scene-level pose map: per-keypoint maximum over all instances.
    fn scene_pose(&self, sample: &SceneSample) -> PoseMap {
        let s = sample.size();
        let sigma = self.cfg.model.heatmap_sigma;
        let mut acc = vec![0.0; self.cfg.model.keypoints * s * s];
        for ks in &sample.keypoints {
            let pm = render_pose_map(ks, s, s, sigma);
            for (a, &v) in acc.iter_mut().zip(pm.heatmaps.data()) {
                *a = f64::max(*a, v);
            }
        }
        PoseMap::new(Tensor::new(&[self.cfg.model.keypoints, s, s], acc))
    }

    fn fg_condition(&self, sample: &SceneSample, k: usize) -> ConditionSequence {
        let m = &self.cfg.model;
        let store = &self.store;
        let text = self.model.hmg.embed_text(store, &sample.prompt);
        let pose = m.use_pose.then(|| {
            let s = sample.size();
            let pm = render_pose_map(&sample.keypoints[k], s, s, m.heatmap_sigma);
            self.model.hmg.encode_pose(store, &pm)
        });
        let parse = m
            .use_parsing
            .then(|| self.model.hmg.encode_parsing(store, &sample.parsing));
        let target = self.model.hmg.encode_mask(store, &sample.masks.masks[k]);
        let ctx = self
            .model
            .hmg
            .encode_mask(store, &context_mask(&sample.masks, k));
        assemble_condition_fg(text, pose, parse, target, ctx)
    }

    fn bg_condition(&self, sample: &SceneSample) -> ConditionSequence {
        let m = &self.cfg.model;
        let store = &self.store;
        let text = self.model.hmg.embed_text(store, &sample.prompt);
        let pose = m
            .use_pose
            .then(|| self.model.hmg.encode_pose(store, &self.scene_pose(sample)));
        let parse = m
            .use_parsing
            .then(|| self.model.hmg.encode_parsing(store, &sample.parsing));
        assemble_condition_bg(text, pose, parse)
    }

    /// Build public conditions for inference-time layer generation.
    pub fn conditions_for(&self, sample: &SceneSample) -> (Vec<ConditionSequence>, ConditionSequence) {
        let fg = (0..sample.instances()).map(|k| self.fg_condition(sample, k)).collect();
        (fg, self.bg_condition(sample))
    }

    /// One optimizer step over a batch. Per sample: a shared diffusion
    /// timestep and noise draw; the background branch denoises the clean
    /// background image, foreground branches denoise the composite; losses
    /// are combined by the ramp weight. With a zero weight the foreground
    /// forwards are skipped entirely, so foreground adapters stay
    /// bit-identical through the background-only stage.
    pub fn train_step(&mut self, batch: &[&SceneSample]) -> Result<StepReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let step = self.optim.step;
        let stage = self.ctrl.stage(step);
        let lambda = self.ctrl.lambda_t(step);

        // Background adapters are protected while the foreground ramp runs.
        let protect = self.cfg.training.protect_bg && stage == Stage::Ramp;
        self.model.router.set_frozen(&mut self.store, Branch::Bg, protect);

        let mut bg_total = 0.0;
        let mut fg_total = 0.0;
        let mut loss_acc: Option<Tensor> = None;

        for sample in batch {
            if sample.size() != self.cfg.model.image_size {
                return Err(TrainError::SizeMismatch(sample.size(), self.cfg.model.image_size));
            }
            let t = self.rng.below(self.sched.len());
            let union = union_mask(&sample.masks);
            let union_lat = self.model.latent_mask(&union);

            let z0_fg = self.model.offset.inject_spatial_offsets(
                &self.store,
                &self.model.codec.encode(&sample.composite),
                &union_lat,
            );
            let z0_bg = self.model.offset.inject_spatial_offsets(
                &self.store,
                &self.model.codec.encode(&sample.background),
                &union_lat,
            );
            let eps = Tensor::randn(z0_fg.shape(), &mut self.rng);
            let zt_bg = add_noise(&z0_bg, t, &eps, &self.sched);

            let mut inputs = Vec::new();
            let mut fg_masks = Vec::new();
            if lambda > 0.0 {
                let zt_fg = add_noise(&z0_fg, t, &eps, &self.sched);
                for k in 0..sample.instances() {
                    let mask_lat = self.model.latent_mask(&sample.masks.masks[k]);
                    inputs.push(BranchInput {
                        z: zt_fg.clone(),
                        branch: Branch::Fg,
                        cond: self.fg_condition(sample, k),
                        region_mask: mask_lat.clone(),
                    });
                    fg_masks.push(mask_lat);
                }
            }
            inputs.push(BranchInput {
                z: zt_bg,
                branch: Branch::Bg,
                cond: self.bg_condition(sample),
                region_mask: union_lat,
            });

            let outputs = self.model.forward_many(&self.store, &inputs, t);
            let bg_hat = outputs.last().unwrap();
            let bg = background_loss(&eps, bg_hat);
            let tcfg = &self.cfg.training;
            let fg_losses: Vec<Tensor> = fg_masks
                .iter()
                .zip(&outputs)
                .map(|(m, out)| {
                    if tcfg.use_region_loss {
                        region_loss(&eps, out, m, tcfg.region_beta_b, tcfg.region_beta_g)
                    } else {
                        foreground_loss(&eps, out, m, tcfg.fg_loss_region)
                    }
                })
                .collect();

            bg_total += bg.item();
            fg_total += fg_losses.iter().map(|l| l.item()).sum::<f64>();
            let sample_loss = total_loss(&fg_losses, &bg, step, &self.ctrl);
            loss_acc = Some(match loss_acc {
                None => sample_loss,
                Some(a) => a.add(&sample_loss),
            });
        }

        let loss = loss_acc.unwrap().scale_const(1.0 / batch.len() as f64);
        let total = loss.item();
        let grads = loss.backward();
        adamw_update(&mut self.store, &grads, &mut self.optim);

        Ok(StepReport {
            step,
            stage,
            lambda,
            bg_loss: bg_total / batch.len() as f64,
            fg_loss: fg_total / batch.len() as f64,
            total,
        })
    }
}
