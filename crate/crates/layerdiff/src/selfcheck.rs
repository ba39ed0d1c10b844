//! Built-in verification suites runnable from the CLI. Each suite is an
//! independent check of a core invariant; the harness also supports
//! deliberate fault injection so the suites themselves can be shown to
//! catch regressions rather than pass vacuously.

use serde::Serialize;

use crate::lora::Branch;
use crate::composer;
use crate::config::{DataConfig, ModelConfig};
use crate::denoiser::{BranchInput, Denoiser};
use crate::diffusion::{add_noise, add_noise_with, ddim_sample_with, make_schedule};
use crate::guidance::{assemble_condition_bg, context_mask_with};
use crate::params::ParamStore;
use crate::scenes::generate_scene;
use crate::tensor::{finite_diff_grad, grad, DRng, Tensor};

/// Deliberate defects the harness can inject to prove the suites have teeth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Initialize the learnable attention region bias to a nonzero value,
    /// breaking fresh-model equivalence with the bare network.
    SmaInit,
    /// Skip the clamp when merging sibling instance masks into a context
    /// mask, so overlaps produce values above 1.
    ContextClamp,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "sma-init" => Some(Fault::SmaInit),
            "context-clamp" => Some(Fault::ContextClamp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfcheckReport {
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.image_size = 8;
    cfg.widths = [8, 16];
    cfg.d_cond = 16;
    cfg.t_embed_dim = 8;
    cfg.lora_rank = 2;
    cfg
}

fn make_model(seed: u64, nonzero_sma: bool) -> (ParamStore, Denoiser) {
    let mut store = ParamStore::new();
    let model = Denoiser::init(&mut store, &tiny_model(), &mut DRng::new(seed));
    if nonzero_sma {
        let id = store.find("sma.0.alpha_st").expect("region bias parameter");
        store.set_value(id, Tensor::param(&[2, 2], vec![0.01; 4]));
    }
    (store, model)
}

fn half_mask(extent: usize) -> Tensor {
    let data = (0..extent * extent)
        .map(|i| if i / extent < extent / 2 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[extent, extent], data)
}

fn suite_gradient_oracle() -> Result<(), String> {
    let (mut store, model) = make_model(11, false);
    let mut rng = DRng::new(12);
    // Give the adapters and region bias small nonzero values so their
    // gradients are not trivially zero at the fresh init.
    for name in [
        "lora.fg.self.q.a",
        "lora.fg.self.q.b",
        "lora.fg.self.q.alpha",
        "sma.0.alpha_st",
        "offset.weight",
    ] {
        let id = store.find(name).ok_or_else(|| format!("missing param {name}"))?;
        let shape = store.get(id).shape().to_vec();
        let vals: Vec<f64> = (0..shape.iter().product())
            .map(|_| 0.05 * rng.normal())
            .collect();
        store.set_value(id, Tensor::param(&shape, vals));
    }

    let e = model.latent_extent();
    let c_lat = model.cfg.channels * model.cfg.patch * model.cfg.patch;
    let z0 = Tensor::randn(&[c_lat, e, e], &mut rng);
    let region = half_mask(e);
    let cond_tokens = Tensor::randn(&[3, model.cfg.d_cond], &mut rng);

    let names = [
        "sma.0.alpha_st",
        "lora.fg.self.q.a",
        "lora.fg.self.q.b",
        "lora.fg.self.q.alpha",
        "offset.weight",
    ];
    let ids: Vec<_> = names
        .iter()
        .map(|n| store.find(n).expect("param present"))
        .collect();
    let params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();

    let f = |ps: &[Tensor]| -> Tensor {
        let mut s = store.clone();
        for (&id, p) in ids.iter().zip(ps) {
            s.set_value(id, p.clone());
        }
        let z = model.offset.inject_spatial_offsets(&s, &z0, &region);
        let input = BranchInput {
            z,
            branch: Branch::Fg,
            cond: crate::guidance::ConditionSequence {
                tokens: cond_tokens.clone(),
                segments: vec![(crate::guidance::SegmentTag::Text, 3)],
            },
            region_mask: region.clone(),
        };
        model.predict_noise(&s, &input, 7).sq_norm()
    };

    let loss = f(&params);
    let analytic = grad(&loss, &params).map_err(|e| format!("reverse mode failed: {e:?}"))?;
    let numeric = finite_diff_grad(|ps| f(ps).item(), &params, 1e-5);
    for ((name, a), n) in names.iter().zip(&analytic).zip(&numeric) {
        for (i, (&ga, &gn)) in a.data().iter().zip(n.data()).enumerate() {
            let diff = (ga - gn).abs();
            if diff > 1e-5 * ga.abs().max(gn.abs()) && diff > 1e-7 {
                return Err(format!(
                    "gradient mismatch at {name}[{i}]: reverse {ga} vs finite-diff {gn}"
                ));
            }
        }
    }
    Ok(())
}

fn suite_zero_init_equivalence(fault: bool) -> Result<(), String> {
    let (store, model) = make_model(21, fault);
    let e = model.latent_extent();
    let c_lat = model.cfg.channels * model.cfg.patch * model.cfg.patch;
    let mut rng = DRng::new(22);
    let region = half_mask(e);
    for trial in 0..5 {
        for branch in [Branch::Fg, Branch::Bg] {
            let z = Tensor::randn(&[c_lat, e, e], &mut rng);
            let cond = assemble_condition_bg(model.hmg.embed_text(&store, &[1, 2, 3]), None, None);
            let input = BranchInput { z, branch, cond, region_mask: region.clone() };
            let adapted = model.predict_noise(&store, &input, trial * 13);
            let base = model.forward_base(&store, &input, trial * 13);
            if adapted.data() != base.data() {
                return Err(format!(
                    "fresh adapted model diverges from the bare network (trial {trial}, {branch:?} branch)"
                ));
            }
        }
    }
    Ok(())
}

fn suite_noise_schedule() -> Result<(), String> {
    let sched = make_schedule(100, 1e-4, 2e-2).map_err(|e| e.to_string())?;
    for w in sched.alpha_bar.windows(2) {
        if !(w[1] < w[0] && w[1] > 0.0 && w[0] < 1.0) {
            return Err("cumulative signal level must decrease strictly within (0,1)".into());
        }
    }

    let mut rng = DRng::new(31);
    let z0 = Tensor::randn(&[2, 4, 4], &mut rng);
    let eps = Tensor::randn(&[2, 4, 4], &mut rng);
    if add_noise_with(&z0, 1.0, &eps).data() != z0.data() {
        return Err("noising with full signal level must return the input exactly".into());
    }
    if add_noise_with(&z0, 0.0, &eps).data() != eps.data() {
        return Err("noising with zero signal level must return the noise exactly".into());
    }

    // With an oracle noise predictor, a single deterministic step from any
    // timestep must invert the forward noising.
    for t in [1usize, 40, 99] {
        let zt = add_noise(&z0, t, &eps, &sched);
        let recovered = ddim_sample_with(|_z, _t| eps.clone(), &sched, &[t], zt);
        let err = recovered
            .data()
            .iter()
            .zip(z0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if err > 1e-10 {
            return Err(format!("one-step inversion error {err} at t={t} exceeds 1e-10"));
        }
    }
    Ok(())
}

fn suite_composition() -> Result<(), String> {
    let cfg = DataConfig { size: 16, min_instances: 1, max_instances: 3, occlusion_prob: 0.5 };
    let mut rng = DRng::new(41);
    for scene_i in 0..10 {
        let s = generate_scene(&mut rng, &cfg);
        let n = s.instances();
        let layers: Vec<Tensor> = s.sprites.clone();
        let keep_all = composer::compose(&s.background, &layers, &s.masks, &[])
            .map_err(|e| e.to_string())?;
        if keep_all.data() != s.composite.data() {
            return Err(format!("scene {scene_i}: recomposition with nothing removed differs from the stored composite"));
        }
        let all: Vec<usize> = (0..n).collect();
        let none = composer::compose(&s.background, &layers, &s.masks, &all)
            .map_err(|e| e.to_string())?;
        if none.data() != s.background.data() {
            return Err(format!("scene {scene_i}: removing every instance must return the background"));
        }
        // every subset against a direct painter's-order oracle
        for subset in 0..(1usize << n) {
            let remove: Vec<usize> = (0..n).filter(|k| subset & (1 << k) != 0).collect();
            let got = composer::compose(&s.background, &layers, &s.masks, &remove)
                .map_err(|e| e.to_string())?;
            let (h, w) = s.masks.extent();
            let mut oracle = s.background.data().to_vec();
            for &k in &s.masks.depth_order {
                if remove.contains(&k) {
                    continue;
                }
                for c in 0..3 {
                    for p in 0..h * w {
                        if s.masks.masks[k].data()[p] == 1.0 {
                            oracle[c * h * w + p] = layers[k].data()[c * h * w + p];
                        }
                    }
                }
            }
            if got.data() != &oracle[..] {
                return Err(format!("scene {scene_i}: subset {remove:?} differs from the painter's-order oracle"));
            }
        }
    }
    Ok(())
}

fn suite_conditioning(fault: bool) -> Result<(), String> {
    // two overlapping masks plus one disjoint mask
    let h = 6;
    let mk = |on: &[usize]| {
        let mut d = vec![0.0; h * h];
        for &p in on {
            d[p] = 1.0;
        }
        Tensor::new(&[h, h], d)
    };
    let masks = crate::scenes::MaskSet::new(
        vec![mk(&[0, 1, 2]), mk(&[2, 3]), mk(&[10, 11])],
        vec![0, 1, 2],
    );
    for k in 0..3 {
        let got = context_mask_with(&masks, k, !fault);
        // oracle: clamped sum of the sibling masks
        let (hh, ww) = masks.extent();
        let mut want = vec![0.0; hh * ww];
        for (j, m) in [0, 1, 2].iter().zip([&masks.masks[0], &masks.masks[1], &masks.masks[2]]) {
            if *j == k {
                continue;
            }
            for (a, &v) in want.iter_mut().zip(m.data()) {
                *a = (*a + v).clamp(0.0, 1.0);
            }
        }
        if got.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(format!("context mask for instance {k} is not binary"));
        }
        if got.data() != &want[..] {
            return Err(format!("context mask for instance {k} differs from the clamped union of siblings"));
        }
    }
    Ok(())
}

/// Run every suite and collect a report. `faults` lists deliberate defects
/// to inject; a fresh run passes iff `faults` is empty and nothing is broken.
pub fn run_selfcheck(faults: &[Fault]) -> SelfcheckReport {
    let sma_fault = faults.contains(&Fault::SmaInit);
    let clamp_fault = faults.contains(&Fault::ContextClamp);
    let suites: Vec<(&str, Result<(), String>)> = vec![
        ("gradient-oracle", suite_gradient_oracle()),
        ("zero-init-equivalence", suite_zero_init_equivalence(sma_fault)),
        ("noise-schedule", suite_noise_schedule()),
        ("composition", suite_composition()),
        ("conditioning", suite_conditioning(clamp_fault)),
    ];
    let suites: Vec<SuiteResult> = suites
        .into_iter()
        .map(|(name, r)| SuiteResult {
            name: name.to_string(),
            passed: r.is_ok(),
            detail: match r {
                Ok(()) => "ok".to_string(),
                Err(e) => e,
            },
        })
        .collect();
    let passed = suites.iter().all(|s| s.passed);
    SelfcheckReport { suites, passed }
}
