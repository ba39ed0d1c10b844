//! Low-rank adapters on the attention Q/K/V projections.
//!
//! Two adapter sets exist regardless of how many foreground instances a
//! scene has: all foreground branches share one set, the background branch
//! owns the other. Each adapter contributes `dW = alpha * B * A` on top of
//! its base projection weight; `B` starts at zero so a fresh model is
//! exactly the base model.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{DRng, Tensor};

/// Standard deviation for the Gaussian init of the `A` factor.
pub const LORA_A_INIT_STD: f64 = 0.02;
/// The learnable scaling factor is projected into this range after every
/// optimizer update.
pub const ALPHA_CLAMP: (f64, f64) = (0.0, 64.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Fg,
    Bg,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Fg => "fg",
            Branch::Bg => "bg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub fn tag(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

/// Low-rank pair `(A, B)` with learnable scaling, tagged by branch and
/// projection. `A: [r, d_in]`, `B: [d_out, r]`, so `dW` matches the base
/// weight `[d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub alpha: ParamId,
    pub branch: Branch,
    pub projection: Projection,
    pub rank: usize,
}

/// Create an adapter with `A ~ N(0, 0.02^2)`, `B = 0`, and the configured
/// scaling. A fresh adapter is a no-op because `B = 0`.
pub fn init_adapter(
    store: &mut ParamStore,
    prefix: &str,
    rank: usize,
    d_out: usize,
    d_in: usize,
    alpha: f64,
    branch: Branch,
    projection: Projection,
    rng: &mut DRng,
) -> LoraAdapter {
    assert!(rank >= 1 && rank <= d_in.min(d_out), "invalid LoRA rank {} for {}x{}", rank, d_out, d_in);
    let a_data = Tensor::randn(&[rank, d_in], rng).scale_const(LORA_A_INIT_STD);
    let a = store.add(format!("{prefix}.a"), Tensor::param(&[rank, d_in], a_data.data().to_vec()));
    let b = store.add(format!("{prefix}.b"), Tensor::param(&[d_out, rank], vec![0.0; d_out * rank]));
    let alpha = store.add_clamped(
        format!("{prefix}.alpha"),
        Tensor::param(&[1], vec![alpha]),
        ALPHA_CLAMP.0,
        ALPHA_CLAMP.1,
    );
    LoraAdapter { a, b, alpha, branch, projection, rank }
}

/// `dW = alpha * B * A`.
pub fn lora_delta(store: &ParamStore, adapter: &LoraAdapter) -> Tensor {
    store
        .get(adapter.b)
        .matmul(store.get(adapter.a))
        .scale(store.get(adapter.alpha))
}

/// Adapted projection `x (W_base + dW)^T`. With `adapter = None` this is
/// the base projection, used for bit-comparison against a fresh model.
pub fn apply_projection(
    store: &ParamStore,
    x: &Tensor,
    w_base: &Tensor,
    adapter: Option<&LoraAdapter>,
) -> Tensor {
    let w = match adapter {
        Some(ad) => w_base.add(&lora_delta(store, ad)),
        None => w_base.clone(),
    };
    x.matmul(&w.transpose())
}

/// One Q/K/V adapter triple per attention layer.
#[derive(Clone, Debug)]
pub struct LayerAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

impl LayerAdapters {
    pub fn get(&self, p: Projection) -> &LoraAdapter {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
        }
    }

    fn param_ids(&self) -> [ParamId; 9] {
        [
            self.q.a, self.q.b, self.q.alpha,
            self.k.a, self.k.b, self.k.alpha,
            self.v.a, self.v.b, self.v.alpha,
        ]
    }
}

/// The two adapter sets, indexed by attention layer.
#[derive(Clone, Debug, Default)]
pub struct BranchRouter {
    pub fg: Vec<LayerAdapters>,
    pub bg: Vec<LayerAdapters>,
}

impl BranchRouter {
    pub fn layers(&self, branch: Branch) -> &[LayerAdapters] {
        match branch {
            Branch::Fg => &self.fg,
            Branch::Bg => &self.bg,
        }
    }

    /// Mark every adapter parameter of a branch (not) frozen; the optimizer
    /// skips frozen parameters entirely.
    pub fn set_frozen(&self, store: &mut ParamStore, branch: Branch, frozen: bool) {
        for layer in self.layers(branch) {
            for id in layer.param_ids() {
                store.set_frozen(id, frozen);
            }
        }
    }

    /// Scalar parameter count of one branch's adapter set:
    /// per projection `r*d_in + d_out*r + 1`, independent of instance count.
    pub fn branch_param_count(&self, store: &ParamStore, branch: Branch) -> usize {
        self.layers(branch)
            .iter()
            .flat_map(|l| l.param_ids())
            .map(|id| store.get(id).numel())
            .sum()
    }
}
