//! Self-attention with a mask-modulated additive bias.
//!
//! Every query/key token carries a binary region label (foreground or
//! background). A learnable 2x2 table `alpha[s][t]` is added to the logits
//! of every (query-region s, key-region t) pair, so training can suppress
//! or encourage attention flow across the mask boundary. The table starts
//! at zero, which leaves vanilla attention bit-identical.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learnable 2x2 logit offsets indexed by (query region, key region).
#[derive(Clone, Debug)]
pub struct SpatialBias {
    /// Parameter of shape `[2, 2]`, zero-initialized.
    pub alpha_st: ParamId,
}

impl SpatialBias {
    pub fn init(store: &mut ParamStore, prefix: &str) -> SpatialBias {
        let alpha_st = store.add(format!("{prefix}.alpha_st"), Tensor::param(&[2, 2], vec![0.0; 4]));
        SpatialBias { alpha_st }
    }
}

/// Binary region label per attention token (0 = background, 1 = foreground).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    m: Vec<u8>,
}

impl TokenMask {
    pub fn new(m: Vec<u8>) -> TokenMask {
        assert!(
            m.iter().all(|&v| v <= 1),
            "token mask values must be 0 or 1"
        );
        TokenMask { m }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.m
    }
}

/// Scaled dot-product logits `Q K^T / sqrt(d_k)`.
pub fn attention_logits(q: &Tensor, k: &Tensor) -> Tensor {
    assert_eq!(q.shape()[1], k.shape()[1], "attention_logits: key dim mismatch");
    let dk = q.shape()[1] as f64;
    q.matmul(&k.transpose()).scale_const(1.0 / dk.sqrt())
}

/// Bias matrix with entry `(i, j) = alpha[m_i][m_j]`, differentiable in the
/// four table entries.
pub fn sma_bias(mask: &TokenMask, alpha_st: &Tensor) -> Tensor {
    assert_eq!(alpha_st.shape(), &[2, 2], "sma_bias: alpha table must be 2x2");
    let n = mask.len();
    let labels = mask.labels();
    let mut ids = Vec::with_capacity(n * n);
    for &mi in labels {
        for &mj in labels {
            ids.push((mi as usize) * 2 + mj as usize);
        }
    }
    alpha_st.reshape(&[4, 1]).gather_rows(&ids).reshape(&[n, n])
}

/// Vanilla scaled dot-product attention, kept as the bit-identity reference
/// for the zero-bias case.
pub fn vanilla_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    attention_logits(q, k).softmax_rows().matmul(v)
}

/// Attention with the additive region bias: `softmax(QK^T/sqrt(d_k) + B) V`.
pub fn sma_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &TokenMask,
    alpha_st: &Tensor,
) -> Tensor {
    assert_eq!(q.shape()[0], mask.len(), "sma_attention: mask length mismatch");
    assert_eq!(k.shape()[0], mask.len(), "sma_attention: mask length mismatch");
    let logits = attention_logits(q, k);
    let bias = sma_bias(mask, alpha_st);
    logits.add(&bias).softmax_rows().matmul(v)
}

/// Average-pool a pixel mask onto a coarser grid and threshold at 0.5, ties
/// mapping to foreground.
pub fn pool_mask(mask_image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(mask_image.shape().len(), 2, "pool_mask: mask must be HxW");
    let (h, w) = (mask_image.shape()[0], mask_image.shape()[1]);
    assert!(
        h % out_h == 0 && w % out_w == 0,
        "pool_mask: extents {}x{} not divisible by {}x{}",
        h, w, out_h, out_w
    );
    let (ch, cw) = (h / out_h, w / out_w);
    let d = mask_image.data();
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for dy in 0..ch {
                for dx in 0..cw {
                    acc += d[(oy * ch + dy) * w + ox * cw + dx];
                }
            }
            let mean = acc / (ch * cw) as f64;
            out[oy * out_w + ox] = if mean >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// Region labels for the attention tokens of a latent grid, derived from a
/// pixel mask.
pub fn latent_token_mask(mask_image: &Tensor, latent_h: usize, latent_w: usize) -> TokenMask {
    let pooled = pool_mask(mask_image, latent_h, latent_w);
    TokenMask::new(pooled.data().iter().map(|&v| v as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad, DRng};

    #[test]
    fn logits_hand_case() {
        let q = Tensor::new(&[1, 1], vec![1.0]);
        let k = Tensor::new(&[1, 1], vec![2.0]);
        assert_eq!(attention_logits(&q, &k).data(), &[2.0]);
    }

    #[test]
    fn zero_query_zero_logits() {
        let mut rng = DRng::new(1);
        let k = Tensor::randn(&[4, 8], &mut rng);
        let a = attention_logits(&Tensor::zeros(&[4, 8]), &k);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_qk_symmetric_logits() {
        let q = Tensor::eye(4);
        let a = attention_logits(&q, &q);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.data()[i * 4 + j], a.data()[j * 4 + i]);
            }
        }
    }

    #[test]
    fn zero_table_zero_bias() {
        let mask = TokenMask::new(vec![1, 0, 1]);
        let b = sma_bias(&mask, &Tensor::zeros(&[2, 2]));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_indicator_hand_case() {
        // m = [1,0], alpha_10 = 0.5, others 0 -> [[a11, 0.5],[0, 0]]
        let mask = TokenMask::new(vec![1, 0]);
        let alpha = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.5, 0.0]); // row s, col t
        let b = sma_bias(&mask, &alpha);
        assert_eq!(b.data(), &[0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn uniform_mask_constant_bias() {
        let mask = TokenMask::new(vec![0; 3]);
        let alpha = Tensor::new(&[2, 2], vec![0.7, 0.1, 0.2, 0.3]);
        let b = sma_bias(&mask, &alpha);
        assert!(b.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    #[should_panic(expected = "token mask values must be 0 or 1")]
    fn mask_values_validated() {
        let _ = TokenMask::new(vec![0, 2]);
    }

    #[test]
    fn zero_bias_equals_vanilla_bitwise() {
        let mut rng = DRng::new(2);
        for trial in 0..20 {
            let q = Tensor::randn(&[6, 4], &mut rng);
            let k = Tensor::randn(&[6, 4], &mut rng);
            let v = Tensor::randn(&[6, 5], &mut rng);
            let labels: Vec<u8> = (0..6).map(|i| ((i + trial) % 2) as u8).collect();
            let mask = TokenMask::new(labels);
            let with = sma_attention(&q, &k, &v, &mask, &Tensor::zeros(&[2, 2]));
            let without = vanilla_attention(&q, &k, &v);
            assert_eq!(with.data(), without.data(), "trial {}", trial);
        }
    }

    #[test]
    fn large_negative_cross_bias_masks_attention() {
        // alpha_10 = -1e9: foreground queries effectively cannot see
        // background keys, so their output matches foreground-only rows.
        let mut rng = DRng::new(3);
        let q = Tensor::randn(&[2, 4], &mut rng);
        let k = Tensor::randn(&[2, 4], &mut rng);
        let v = Tensor::randn(&[2, 3], &mut rng);
        let mask = TokenMask::new(vec![1, 0]);
        let alpha = Tensor::new(&[2, 2], vec![0.0, 0.0, -1e9, 0.0]);
        let out = sma_attention(&q, &k, &v, &mask, &alpha);
        // Query 0 (fg) attends only to key 0 (fg): its row equals V row 0.
        for j in 0..3 {
            assert!((out.data()[j] - v.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_region_weight_below_soft_mask_limit() {
        let mut rng = DRng::new(4);
        let q = Tensor::randn(&[4, 4], &mut rng);
        let k = Tensor::randn(&[4, 4], &mut rng);
        let mask = TokenMask::new(vec![1, 1, 0, 0]);
        let alpha = Tensor::new(&[2, 2], vec![0.0, 0.0, -30.0, 0.0]);
        let weights = attention_logits(&q, &k).add(&sma_bias(&mask, &alpha)).softmax_rows();
        // fg->bg entries: rows 0..2, cols 2..4
        for i in 0..2 {
            for j in 2..4 {
                assert!(weights.data()[i * 4 + j] < 1e-12);
            }
        }
    }

    #[test]
    fn zero_values_zero_output() {
        let mut rng = DRng::new(5);
        let q = Tensor::randn(&[3, 4], &mut rng);
        let k = Tensor::randn(&[3, 4], &mut rng);
        let mask = TokenMask::new(vec![0, 1, 0]);
        let out = sma_attention(&q, &k, &Tensor::zeros(&[3, 4]), &mask, &Tensor::zeros(&[2, 2]));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = DRng::new(6);
        let q = Tensor::randn(&[4, 3], &mut rng);
        let k = Tensor::randn(&[4, 3], &mut rng);
        let v = Tensor::randn(&[4, 3], &mut rng);
        let labels = vec![1u8, 0, 0, 1];
        let alpha = Tensor::new(&[2, 2], vec![0.3, -0.2, 0.1, 0.4]);
        let out = sma_attention(&q, &k, &v, &TokenMask::new(labels.clone()), &alpha);

        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let d = t.shape()[1];
            let mut data = vec![0.0; t.numel()];
            for (to, &from) in perm.iter().enumerate() {
                data[to * d..(to + 1) * d].copy_from_slice(&t.data()[from * d..(from + 1) * d]);
            }
            Tensor::new(t.shape(), data)
        };
        let plabels: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let pout = sma_attention(
            &permute(&q),
            &permute(&k),
            &permute(&v),
            &TokenMask::new(plabels),
            &alpha,
        );
        let expected = permute(&out);
        for (a, b) in pout.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_gradients_match_finite_differences() {
        let mut rng = DRng::new(7);
        let q = Tensor::randn(&[4, 3], &mut rng);
        let k = Tensor::randn(&[4, 3], &mut rng);
        let v = Tensor::randn(&[4, 3], &mut rng);
        let mask = TokenMask::new(vec![1, 0, 1, 0]);
        let alpha = Tensor::param(&[2, 2], vec![0.2, -0.1, 0.3, 0.05]);
        let f = |ps: &[Tensor]| sma_attention(&q, &k, &v, &mask, &ps[0]).sq_norm();
        let loss = f(std::slice::from_ref(&alpha));
        let analytic = grad(&loss, std::slice::from_ref(&alpha)).unwrap();
        let numeric = finite_diff_grad(
            |ps| f(ps).item(),
            std::slice::from_ref(&alpha),
            1e-5,
        );
        for (a, n) in analytic[0].data().iter().zip(numeric[0].data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-5, "{} vs {}", a, n);
        }
    }

    #[test]
    fn token_mask_pooling() {
        // all ones / all zeros
        let ones = latent_token_mask(&Tensor::full(&[4, 4], 1.0), 2, 2);
        assert_eq!(ones.labels(), &[1, 1, 1, 1]);
        let zeros = latent_token_mask(&Tensor::zeros(&[4, 4]), 2, 2);
        assert_eq!(zeros.labels(), &[0, 0, 0, 0]);
        // one 2x2 foreground quadrant (top-left) -> exactly one token
        let mut m = vec![0.0; 16];
        for y in 0..2 {
            for x in 0..2 {
                m[y * 4 + x] = 1.0;
            }
        }
        let one = latent_token_mask(&Tensor::new(&[4, 4], m), 2, 2);
        assert_eq!(one.labels(), &[1, 0, 0, 0]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn pooling_requires_divisible_extents() {
        let _ = latent_token_mask(&Tensor::zeros(&[5, 5]), 2, 2);
    }

    #[test]
    fn tie_pools_to_foreground() {
        // Exactly half foreground in a cell -> mean 0.5 -> label 1.
        let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let tm = latent_token_mask(&m, 1, 1);
        assert_eq!(tm.labels(), &[1]);
    }
}
