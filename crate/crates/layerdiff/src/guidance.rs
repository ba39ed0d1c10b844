//! Morphology-aware conditioning: pose heatmaps, part-parsing maps, target
//! and context masks, and a toy text prompt are encoded into one token
//! sequence that the denoiser cross-attends to.
//!
//! Foreground branches see the full layout (text, pose, parse, target mask,
//! context mask); the background branch sees only text, pose, and parse.
//! The context mask of instance k is the clamped sum of all *other*
//! instance masks, i.e. the spatial layout surrounding the target.

use crate::config::ModelConfig;
use crate::params::{ParamId, ParamStore};
use crate::scenes::MaskSet;
use crate::tensor::{DRng, Tensor};

/// One Gaussian heatmap per skeleton keypoint, values in [0, 1].
#[derive(Clone, Debug)]
pub struct PoseMap {
    pub heatmaps: Tensor, // [K, H, W]
}

impl PoseMap {
    pub fn new(heatmaps: Tensor) -> PoseMap {
        assert_eq!(heatmaps.shape().len(), 3, "pose map must be [K,H,W]");
        assert!(
            heatmaps.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "pose heatmap values must lie in [0,1]"
        );
        PoseMap { heatmaps }
    }
}

/// Dense part labels; every pixel carries one of `labels < L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsingMap {
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
}

impl ParsingMap {
    pub fn new(labels: Vec<u8>, height: usize, width: usize, num_labels: usize) -> ParsingMap {
        assert_eq!(labels.len(), height * width, "parsing map extent mismatch");
        assert!(
            labels.iter().all(|&l| (l as usize) < num_labels),
            "parsing label out of range"
        );
        ParsingMap { labels, height, width, num_labels }
    }

    pub fn one_hot(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; self.num_labels * hw];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * hw + p] = 1.0;
        }
        Tensor::new(&[self.num_labels, self.height, self.width], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentTag {
    Text,
    Pose,
    Parse,
    Mask,
    Context,
}

/// Conditioning tokens with per-token segment provenance.
#[derive(Clone, Debug)]
pub struct ConditionSequence {
    pub tokens: Tensor, // [n_tok, d_cond]
    pub segments: Vec<(SegmentTag, usize)>,
}

impl ConditionSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Segment tag of a token index; segments partition the sequence.
    pub fn tag_of(&self, mut idx: usize) -> SegmentTag {
        for &(tag, len) in &self.segments {
            if idx < len {
                return tag;
            }
            idx -= len;
        }
        panic!("token index out of range");
    }
}

/// Context mask of instance k: `clamp(sum_{j != k} M_j, 0, 1)`.
/// Instances are zero-indexed.
pub fn context_mask(masks: &MaskSet, k: usize) -> Tensor {
    context_mask_with(masks, k, true)
}

/// Implementation of [`context_mask`] with the clamp made optional so the
/// self-check harness can inject a "forgot to clamp" fault and verify the
/// conditioning suite catches it.
pub(crate) fn context_mask_with(masks: &MaskSet, k: usize, clamp: bool) -> Tensor {
    assert!(k < masks.len(), "context_mask: instance {} out of range ({})", k, masks.len());
    let (h, w) = masks.extent();
    let mut acc = vec![0.0f64; h * w];
    for (j, m) in masks.masks.iter().enumerate() {
        if j == k {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    if clamp {
        for a in acc.iter_mut() {
            *a = a.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[h, w], acc)
}

fn init_weight(store: &mut ParamStore, name: String, shape: &[usize], fan_in: usize, rng: &mut DRng) -> ParamId {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = Tensor::randn(shape, rng).scale_const(std);
    store.add(name, Tensor::param(shape, data.data().to_vec()))
}

fn init_bias(store: &mut ParamStore, name: String, n: usize) -> ParamId {
    store.add(name, Tensor::param(&[n], vec![0.0; n]))
}

/// Stack of 3x3 convolution + 2x2 average-pool stages (each stage halves
/// the resolution) followed by a per-position linear projection onto the
/// conditioning width. Token count is fixed by the input resolution.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    convs: Vec<(ParamId, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
    in_ch: usize,
}

impl TokenEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        hidden: &[usize],
        d_cond: usize,
        rng: &mut DRng,
    ) -> TokenEncoder {
        let mut convs = Vec::new();
        let mut c = in_ch;
        for (i, &h) in hidden.iter().enumerate() {
            let w = init_weight(store, format!("{prefix}.conv{i}.weight"), &[h, c, 3, 3], c * 9, rng);
            let b = init_bias(store, format!("{prefix}.conv{i}.bias"), h);
            convs.push((w, b));
            c = h;
        }
        let proj_w = init_weight(store, format!("{prefix}.proj.weight"), &[d_cond, c], c, rng);
        let proj_b = init_bias(store, format!("{prefix}.proj.bias"), d_cond);
        TokenEncoder { convs, proj_w, proj_b, in_ch }
    }

    /// `[C, H, W] -> [(H/2^k)*(W/2^k), d_cond]` tokens.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 3, "encoder input must be [C,H,W]");
        assert_eq!(x.shape()[0], self.in_ch, "encoder channel mismatch");
        let mut h = x.clone();
        for &(w, b) in &self.convs {
            h = h.conv2d(store.get(w), 1, 1).add_chan_bias(store.get(b)).silu().avg_pool2();
        }
        let c = h.shape()[0];
        let m = h.shape()[1] * h.shape()[2];
        h.reshape(&[c, m])
            .transpose()
            .matmul(&store.get(self.proj_w).transpose())
            .add_row_bias(store.get(self.proj_b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.push(self.proj_w);
        ids.push(self.proj_b);
        ids
    }
}

/// All conditioning encoders plus the toy text embedding table.
#[derive(Clone, Debug)]
pub struct HmgEncoders {
    pub pose: TokenEncoder,
    pub parse: TokenEncoder,
    pub mask: TokenEncoder,
    pub text_embed: ParamId,
    vocab_size: usize,
}

impl HmgEncoders {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut DRng) -> HmgEncoders {
        let pose = TokenEncoder::init(store, "hmg.pose", cfg.keypoints, &[8, 16], cfg.d_cond, &mut rng.split(1));
        let parse = TokenEncoder::init(store, "hmg.parse", cfg.parse_labels, &[8, 16], cfg.d_cond, &mut rng.split(2));
        let mask = TokenEncoder::init(store, "hmg.mask", 1, &[8], cfg.d_cond, &mut rng.split(3));
        let table = Tensor::randn(&[cfg.vocab_size, cfg.d_cond], &mut rng.split(4)).scale_const(0.02);
        let text_embed = store.add(
            "hmg.text.embed",
            Tensor::param(&[cfg.vocab_size, cfg.d_cond], table.data().to_vec()),
        );
        HmgEncoders { pose, parse, mask, text_embed, vocab_size: cfg.vocab_size }
    }

    pub fn encode_pose(&self, store: &ParamStore, p: &PoseMap) -> Tensor {
        self.pose.encode(store, &p.heatmaps)
    }

    pub fn encode_parsing(&self, store: &ParamStore, s: &ParsingMap) -> Tensor {
        self.parse.encode(store, &s.one_hot())
    }

    /// Encode a binary H x W mask into tokens.
    pub fn encode_mask(&self, store: &ParamStore, m: &Tensor) -> Tensor {
        assert_eq!(m.shape().len(), 2, "mask must be HxW");
        assert!(
            m.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "mask values must be binary"
        );
        let (h, w) = (m.shape()[0], m.shape()[1]);
        self.mask.encode(store, &m.reshape(&[1, h, w]))
    }

    /// Learned embedding lookup; an empty prompt yields a zero-length
    /// segment.
    pub fn embed_text(&self, store: &ParamStore, ids: &[u16]) -> Tensor {
        for &id in ids {
            assert!((id as usize) < self.vocab_size, "unknown prompt token id {}", id);
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        store.get(self.text_embed).gather_rows(&idx)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pose.param_ids();
        ids.extend(self.parse.param_ids());
        ids.extend(self.mask.param_ids());
        ids.push(self.text_embed);
        ids
    }
}

fn push_segment(
    tokens: Option<Tensor>,
    segments: &mut Vec<(SegmentTag, usize)>,
    tag: SegmentTag,
    acc: Option<Tensor>,
) -> Option<Tensor> {
    match tokens {
        None => acc,
        Some(t) => {
            if t.shape()[0] == 0 {
                segments.push((tag, 0));
                return acc;
            }
            segments.push((tag, t.shape()[0]));
            Some(match acc {
                None => t,
                Some(a) => a.concat_rows(&t),
            })
        }
    }
}

/// Foreground condition: text, pose, parse, target mask, context mask, in
/// that order. Pose/parse segments are dropped when disabled by config.
pub fn assemble_condition_fg(
    text: Tensor,
    pose: Option<Tensor>,
    parse: Option<Tensor>,
    target_mask: Tensor,
    context: Tensor,
) -> ConditionSequence {
    let mut segments = Vec::new();
    let mut acc = push_segment(Some(text), &mut segments, SegmentTag::Text, None);
    acc = push_segment(pose, &mut segments, SegmentTag::Pose, acc);
    acc = push_segment(parse, &mut segments, SegmentTag::Parse, acc);
    acc = push_segment(Some(target_mask), &mut segments, SegmentTag::Mask, acc);
    acc = push_segment(Some(context), &mut segments, SegmentTag::Context, acc);
    let tokens = acc.expect("foreground condition cannot be empty");
    ConditionSequence { tokens, segments }
}

/// Background condition: text, pose, parse only — no mask information.
pub fn assemble_condition_bg(
    text: Tensor,
    pose: Option<Tensor>,
    parse: Option<Tensor>,
) -> ConditionSequence {
    let mut segments = Vec::new();
    let mut acc = push_segment(Some(text), &mut segments, SegmentTag::Text, None);
    acc = push_segment(pose, &mut segments, SegmentTag::Pose, acc);
    acc = push_segment(parse, &mut segments, SegmentTag::Parse, acc);
    let tokens = acc.expect("background condition cannot be empty");
    ConditionSequence { tokens, segments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad};

    fn mask_set(masks: Vec<Tensor>) -> MaskSet {
        let order = (0..masks.len()).collect();
        MaskSet::new(masks, order)
    }

    fn cfg16() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.image_size = 16;
        cfg.d_cond = 32;
        cfg
    }

    #[test]
    fn context_mask_single_instance_is_zero() {
        let ms = mask_set(vec![Tensor::full(&[4, 4], 1.0)]);
        let c = context_mask(&ms, 0);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_mask_clamps_overlap() {
        let mut m2 = vec![0.0; 16];
        m2[5] = 1.0;
        let mut m3 = vec![0.0; 16];
        m3[5] = 1.0;
        let ms = mask_set(vec![
            Tensor::zeros(&[4, 4]),
            Tensor::new(&[4, 4], m2),
            Tensor::new(&[4, 4], m3),
        ]);
        let c = context_mask(&ms, 0);
        assert_eq!(c.data()[5], 1.0);
        assert_eq!(c.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn context_mask_disjoint_is_union() {
        // Pixelwise oracle over all pixels.
        let mut m2 = vec![0.0; 16];
        m2[1] = 1.0;
        m2[2] = 1.0;
        let mut m3 = vec![0.0; 16];
        m3[9] = 1.0;
        let ms = mask_set(vec![
            Tensor::zeros(&[4, 4]),
            Tensor::new(&[4, 4], m2.clone()),
            Tensor::new(&[4, 4], m3.clone()),
        ]);
        let c = context_mask(&ms, 0);
        for p in 0..16 {
            let expect = (m2[p] + m3[p]).clamp(0.0, 1.0);
            assert_eq!(c.data()[p], expect, "pixel {}", p);
        }
    }

    #[test]
    fn context_mask_dominates_each_other_mask_and_is_binary() {
        let mut rng = DRng::new(9);
        let masks: Vec<Tensor> = (0..3)
            .map(|_| {
                let d: Vec<f64> = (0..16)
                    .map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(&[4, 4], d)
            })
            .collect();
        let ms = mask_set(masks.clone());
        for k in 0..3 {
            let c = context_mask(&ms, k);
            assert!(c.data().iter().all(|&v| v == 0.0 || v == 1.0));
            for (j, m) in masks.iter().enumerate() {
                if j == k {
                    continue;
                }
                for (cv, mv) in c.data().iter().zip(m.data()) {
                    assert!(cv >= mv);
                }
            }
            // zero wherever all other masks are zero
            for p in 0..16 {
                let others: f64 = masks
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .map(|(_, m)| m.data()[p])
                    .sum();
                if others == 0.0 {
                    assert_eq!(c.data()[p], 0.0);
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn context_mask_index_checked() {
        let ms = mask_set(vec![Tensor::zeros(&[2, 2])]);
        let _ = context_mask(&ms, 1);
    }

    #[test]
    fn pose_encoder_constant_input_equal_tokens() {
        let cfg = cfg16();
        let mut store = ParamStore::new();
        let enc = HmgEncoders::init(&mut store, &cfg, &mut DRng::new(1));
        let p = PoseMap::new(Tensor::zeros(&[cfg.keypoints, 16, 16]));
        let t = enc.encode_pose(&store, &p);
        assert_eq!(t.shape(), &[16, 32]);
        // zero heatmaps: every token is the same bias-driven vector
        let first = &t.data()[..32];
        for row in 1..16 {
            assert_eq!(&t.data()[row * 32..(row + 1) * 32], first);
        }
    }

    #[test]
    fn encoders_deterministic() {
        let cfg = cfg16();
        let mut store = ParamStore::new();
        let enc = HmgEncoders::init(&mut store, &cfg, &mut DRng::new(2));
        let p = PoseMap::new(
            Tensor::randn(&[cfg.keypoints, 16, 16], &mut DRng::new(5))
                .sigmoid(),
        );
        let a = enc.encode_pose(&store, &p);
        let b = enc.encode_pose(&store, &p);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // Check pose, parse, and mask encoder parameters on a small input.
        let mut cfg = cfg16();
        cfg.image_size = 8;
        cfg.d_cond = 8;
        let mut store = ParamStore::new();
        let enc = HmgEncoders::init(&mut store, &cfg, &mut DRng::new(3));
        let pose = PoseMap::new(Tensor::randn(&[cfg.keypoints, 8, 8], &mut DRng::new(6)).sigmoid());
        let parsing = ParsingMap::new(
            (0..64).map(|i| (i % cfg.parse_labels) as u8).collect(),
            8,
            8,
            cfg.parse_labels,
        );
        let mask = Tensor::new(&[8, 8], (0..64).map(|i| ((i / 8) % 2) as f64).collect());

        let all_ids = enc.param_ids();
        let params: Vec<Tensor> = all_ids.iter().map(|&id| store.get(id).clone()).collect();
        let f = |ps: &[Tensor]| -> Tensor {
            let mut s = store.clone();
            for (&id, p) in all_ids.iter().zip(ps) {
                s.set_value(id, p.clone());
            }
            let a = enc.encode_pose(&s, &pose).sq_norm();
            let b = enc.encode_parsing(&s, &parsing).sq_norm();
            let c = enc.encode_mask(&s, &mask).sq_norm();
            let d = enc.embed_text(&s, &[0, 1, 2]).sq_norm();
            a.add(&b).add(&c).add(&d)
        };
        let loss = f(&params);
        let analytic = grad(&loss, &params);
        let numeric = finite_diff_grad(|ps| f(ps).item(), &params, 1e-5);
        for (i, nu) in numeric.iter().enumerate() {
            match &analytic {
                Ok(gs) => {
                    for (a, n) in gs[i].data().iter().zip(nu.data()) {
                        let diff = (a - n).abs();
                        assert!(
                            diff <= 1e-5 * a.abs().max(n.abs()) || diff <= 1e-7,
                            "param {} grad {} vs {}",
                            i, a, n
                        );
                    }
                }
                Err(e) => panic!("grad failed: {e}"),
            }
        }
    }

    #[test]
    fn text_embedding_behaviour() {
        let cfg = cfg16();
        let mut store = ParamStore::new();
        let enc = HmgEncoders::init(&mut store, &cfg, &mut DRng::new(4));
        let empty = enc.embed_text(&store, &[]);
        assert_eq!(empty.shape(), &[0, 32]);
        let a = enc.embed_text(&store, &[1, 2, 3]);
        let b = enc.embed_text(&store, &[1, 2, 3]);
        assert_eq!(a.data(), b.data());
        let c = enc.embed_text(&store, &[3, 2, 1]);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    #[should_panic(expected = "unknown prompt token")]
    fn unknown_token_rejected() {
        let cfg = cfg16();
        let mut store = ParamStore::new();
        let enc = HmgEncoders::init(&mut store, &cfg, &mut DRng::new(4));
        let _ = enc.embed_text(&store, &[64]);
    }

    #[test]
    fn fg_assembly_layout() {
        let d = 8;
        let seg = |n: usize, v: f64| Tensor::full(&[n, d], v);
        let cond = assemble_condition_fg(
            seg(4, 0.1),
            Some(seg(16, 0.2)),
            Some(seg(16, 0.3)),
            seg(16, 0.4),
            seg(16, 0.5),
        );
        assert_eq!(cond.len(), 68);
        assert_eq!(cond.tag_of(0), SegmentTag::Text);
        assert_eq!(cond.tag_of(4), SegmentTag::Pose);
        assert_eq!(cond.tag_of(20), SegmentTag::Parse);
        assert_eq!(cond.tag_of(36), SegmentTag::Mask);
        assert_eq!(cond.tag_of(52), SegmentTag::Context);
        assert_eq!(cond.tag_of(67), SegmentTag::Context);
        let total: usize = cond.segments.iter().map(|&(_, n)| n).sum();
        assert_eq!(total, cond.len());
    }

    #[test]
    fn fg_layout_fixed_even_with_zero_context() {
        // N=1: the context mask is all zeros but still encoded, so the
        // token count does not change.
        let d = 8;
        let seg = |n: usize, v: f64| Tensor::full(&[n, d], v);
        let cond = assemble_condition_fg(seg(4, 0.1), Some(seg(16, 0.2)), Some(seg(16, 0.3)), seg(16, 0.4), seg(16, 0.0));
        assert_eq!(cond.len(), 68);
    }

    #[test]
    fn bg_assembly_layout() {
        let d = 8;
        let seg = |n: usize, v: f64| Tensor::full(&[n, d], v);
        let cond = assemble_condition_bg(seg(4, 0.1), Some(seg(16, 0.2)), Some(seg(16, 0.3)));
        assert_eq!(cond.len(), 36);
        assert!(cond
            .segments
            .iter()
            .all(|&(tag, _)| !matches!(tag, SegmentTag::Mask | SegmentTag::Context)));
    }

    #[test]
    fn disabled_segments_are_dropped() {
        let d = 8;
        let seg = |n: usize, v: f64| Tensor::full(&[n, d], v);
        let cond = assemble_condition_bg(seg(4, 0.1), None, None);
        assert_eq!(cond.len(), 4);
        assert_eq!(cond.segments.len(), 1);
    }
}
