//! Noise schedule, forward noising, deterministic DDIM sampling, and the
//! multi-branch driver that generates a full layer set (one image per
//! instance plus a background image).

use crate::composer::{union_mask, LayerSet};
use crate::denoiser::{BranchInput, Denoiser};
use crate::guidance::ConditionSequence;
use crate::lora::Branch;
use crate::params::ParamStore;
use crate::scenes::{quantize255, MaskSet};
use crate::tensor::{DRng, Tensor};

#[derive(thiserror::Error, Debug, PartialEq)]
pub enum DiffusionError {
    #[error("invalid beta range [{0}, {1}]")]
    InvalidBetas(f64, f64),
    #[error("invalid schedule length {0}")]
    InvalidLength(usize),
    #[error("invalid step count {0} for {1} timesteps")]
    InvalidSteps(usize, usize),
    #[error("{0} foreground conditions do not match {1} masks")]
    ConditionCount(usize, usize),
}

/// Linear beta schedule with precomputed `alpha` and cumulative
/// `alpha_bar` products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

pub fn make_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::InvalidLength(t));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidBetas(beta_min, beta_max));
    }
    let mut beta = Vec::with_capacity(t);
    for i in 0..t {
        let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
        beta.push(beta_min + (beta_max - beta_min) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps` for an explicit cumulative alpha.
pub fn add_noise_with(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Tensor {
    assert!((0.0..=1.0).contains(&alpha_bar), "alpha_bar must lie in [0,1]");
    z0.scale_const(alpha_bar.sqrt())
        .add(&eps.scale_const((1.0 - alpha_bar).sqrt()))
}

/// Forward noising to timestep `t` of the schedule.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Tensor {
    assert!(t < sched.len(), "timestep {} out of range for schedule of {}", t, sched.len());
    add_noise_with(z0, sched.alpha_bar[t], eps)
}

/// Evenly strided ascending timestep subset: `floor(i * T / n)`.
pub fn ddim_timesteps(t_total: usize, n_steps: usize) -> Vec<usize> {
    assert!(n_steps >= 1 && n_steps <= t_total, "invalid DDIM step count");
    (0..n_steps).map(|i| i * t_total / n_steps).collect()
}

/// Deterministic DDIM (eta = 0) over an explicit timestep list, starting
/// from `z_init` at the largest timestep. Each step predicts
/// `z0 = (z_t - sqrt(1-ab_t) * eps) / sqrt(ab_t)` and re-noises it to the
/// previous stride; the final step lands on the clean estimate (`ab = 1`).
pub fn ddim_sample_with<F>(mut eps_model: F, sched: &NoiseSchedule, timesteps: &[usize], z_init: Tensor) -> Tensor
where
    F: FnMut(&Tensor, usize) -> Tensor,
{
    assert!(!timesteps.is_empty(), "DDIM needs at least one timestep");
    for w in timesteps.windows(2) {
        assert!(w[0] < w[1], "timesteps must be strictly ascending");
    }
    assert!(*timesteps.last().unwrap() < sched.len(), "timestep beyond schedule");
    let mut z = z_init;
    for i in (0..timesteps.len()).rev() {
        let t = timesteps[i];
        let ab = sched.alpha_bar[t];
        let eps = eps_model(&z, t).detach();
        let z0 = z.sub(&eps.scale_const((1.0 - ab).sqrt())).scale_const(1.0 / ab.sqrt());
        let ab_prev = if i > 0 { sched.alpha_bar[timesteps[i - 1]] } else { 1.0 };
        z = add_noise_with(&z0, ab_prev, &eps).detach();
    }
    z
}

/// Sample one branch from Gaussian noise with the trained model.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    model: &Denoiser,
    store: &ParamStore,
    sched: &NoiseSchedule,
    n_steps: usize,
    branch: Branch,
    cond: &ConditionSequence,
    region_mask: &Tensor,
    rng: &mut DRng,
) -> Tensor {
    assert!(n_steps >= 1 && n_steps <= sched.len(), "invalid DDIM step count");
    let e = model.latent_extent();
    let c = model.codec.latent_channels(model.cfg.channels);
    let z_init = Tensor::randn(&[c, e, e], rng);
    let ts = ddim_timesteps(sched.len(), n_steps);
    ddim_sample_with(
        |z, t| {
            let input = BranchInput {
                z: z.clone(),
                branch,
                cond: cond.clone(),
                region_mask: region_mask.clone(),
            };
            model.predict_noise(store, &input, t)
        },
        sched,
        &ts,
        z_init,
    )
}

fn clamp_image(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| quantize255(v)).collect())
}

/// Generate a full layer set: one DDIM sample per foreground branch (its
/// own mask and condition) plus one background sample (union mask). Each
/// branch draws from a sub-seeded RNG, decoded images are snapped to the
/// 1/255 grid.
pub fn generate_layers(
    model: &Denoiser,
    store: &ParamStore,
    sched: &NoiseSchedule,
    n_steps: usize,
    masks: &MaskSet,
    fg_conds: &[ConditionSequence],
    bg_cond: &ConditionSequence,
    rng: &mut DRng,
) -> Result<LayerSet, DiffusionError> {
    let n = masks.len();
    if fg_conds.len() != n {
        return Err(DiffusionError::ConditionCount(fg_conds.len(), n));
    }
    if n_steps < 1 || n_steps > sched.len() {
        return Err(DiffusionError::InvalidSteps(n_steps, sched.len()));
    }
    let mut foregrounds = Vec::with_capacity(n);
    for (k, cond) in fg_conds.iter().enumerate() {
        let region = model.latent_mask(&masks.masks[k]);
        let mut r = rng.split(k as u64);
        let z = ddim_sample(model, store, sched, n_steps, Branch::Fg, cond, &region, &mut r);
        foregrounds.push(clamp_image(&model.codec.decode(&z)));
    }
    let union = union_mask(masks);
    let region = model.latent_mask(&union);
    let mut r = rng.split(n as u64);
    let z = ddim_sample(model, store, sched, n_steps, Branch::Bg, bg_cond, &region, &mut r);
    let background = clamp_image(&model.codec.decode(&z));
    Ok(LayerSet { foregrounds, background, masks: masks.clone() })
}
