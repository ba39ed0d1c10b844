//! Deterministic n-dimensional f64 array math with reverse-mode
//! differentiation.
//!
//! Tensors are immutable once produced; every non-leaf tensor records the
//! operation and operands that made it, so a scalar loss can be
//! back-propagated through the recorded graph. All arithmetic is 64-bit and
//! single-threaded within a graph, which makes gradient checks against
//! central finite differences tight and makes seeded runs bit-reproducible.
//!
//! Shape mismatches and non-finite results are programming errors and panic
//! with a descriptive message; they are never silently propagated.

mod autodiff;
pub mod rng;

pub use autodiff::{finite_diff_grad, grad, GradError, GradMap, DEFAULT_FD_STEP};
pub use rng::DRng;

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Node>,
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    /// Multiply every element by a scalar tensor (the scalar is learnable).
    Scale { x: Tensor, s: Tensor },
    ScaleConst(Tensor, f64),
    // the constant does not affect gradients, but keep it for debug printing
    AddConst(Tensor, #[allow(dead_code)] f64),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Conv2d { x: Tensor, w: Tensor, stride: usize, pad: usize },
    SoftmaxRows(Tensor),
    SumAll(Tensor),
    Sigmoid(Tensor),
    /// `[n, d] + [d]`, bias added to every row.
    AddRowBias(Tensor, Tensor),
    /// `[C, H, W] + [C]`, bias added to every spatial position of a channel.
    AddChanBias(Tensor, Tensor),
    GroupNorm { x: Tensor, gamma: Tensor, beta: Tensor, groups: usize, eps: f64 },
    AvgPool2(Tensor),
    Upsample2(Tensor),
    ConcatChan(Tensor, Tensor),
    ConcatRows(Tensor, Tensor),
    SliceCols { x: Tensor, start: usize, len: usize },
    GatherRows { table: Tensor, ids: Vec<usize> },
    /// Forward difference along the last axis; last column is zero.
    DiffX(Tensor),
    /// Forward difference along the second-to-last axis; last row is zero.
    DiffY(Tensor),
    /// Per-channel 3x3 box blur with zero padding.
    BoxBlur3(Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleConst(..) => "scale_const",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SumAll(..) => "sum_all",
            Op::Sigmoid(..) => "sigmoid",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddChanBias(..) => "add_chan_bias",
            Op::GroupNorm { .. } => "group_norm",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample2(..) => "upsample2",
            Op::ConcatChan(..) => "concat_chan",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::DiffX(..) => "diff_x",
            Op::DiffY(..) => "diff_y",
            Op::BoxBlur3(..) => "box_blur3",
        }
    }

    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChanBias(a, b)
            | Op::ConcatChan(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale { x, s } => vec![x, s],
            Op::ScaleConst(a, _)
            | Op::AddConst(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::Sigmoid(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::DiffX(a)
            | Op::DiffY(a)
            | Op::BoxBlur3(a) => vec![a],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SliceCols { x, .. } => vec![x],
            Op::GatherRows { table, .. } => vec![table],
        }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn make(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
    debug_assert_eq!(numel_of(&shape), data.len());
    for &v in &data {
        if !v.is_finite() {
            panic!("non-finite value produced by op `{}`", op.name());
        }
    }
    let needs_grad = op.parents().iter().any(|p| p.inner.needs_grad);
    Tensor {
        inner: Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            needs_grad,
        }),
    }
}

impl Tensor {
    // ── Constructors ────────────────────────────────────────────────

    /// Constant leaf; not tracked by the gradient graph.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        make(shape.to_vec(), data, Op::Leaf)
    }

    /// Leaf that participates in differentiation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel_of(shape), data.len());
        for &v in &data {
            assert!(v.is_finite(), "non-finite value in parameter data");
        }
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data,
                op: Op::Leaf,
                needs_grad: true,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(shape, vec![v; numel_of(shape)])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], data)
    }

    /// I.i.d. standard normal samples drawn from the given stream.
    pub fn randn(shape: &[usize], rng: &mut DRng) -> Tensor {
        let n = numel_of(shape);
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data[0]
    }

    /// Same values as a fresh untracked leaf (cuts the graph).
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape(), self.data().to_vec())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{}: shape mismatch {:?} vs {:?}",
            op,
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        make(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        make(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        make(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone()))
    }

    /// Multiply by a learnable scalar tensor.
    pub fn scale(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "scale: scaling factor must be a scalar tensor");
        let k = s.item();
        let data = self.data().iter().map(|a| a * k).collect();
        make(self.shape().to_vec(), data, Op::Scale { x: self.clone(), s: s.clone() })
    }

    pub fn scale_const(&self, k: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * k).collect();
        make(self.shape().to_vec(), data, Op::ScaleConst(self.clone(), k))
    }

    pub fn add_const(&self, k: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + k).collect();
        make(self.shape().to_vec(), data, Op::AddConst(self.clone(), k))
    }

    pub fn neg(&self) -> Tensor {
        self.scale_const(-1.0)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        make(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid())
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be 2-d");
        assert_eq!(other.shape().len(), 2, "matmul: rhs must be 2-d");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul: inner extents mismatch {} vs {}", k, k2);
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        make(vec![m, n], out, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose: tensor must be 2-d");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        make(vec![n, m], out, Op::Transpose(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            shape
        );
        make(shape.to_vec(), self.data().to_vec(), Op::Reshape(self.clone()))
    }

    /// Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "softmax_rows: tensor must be 2-d");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        make(vec![m, n], out, Op::SoftmaxRows(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        make(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale_const(1.0 / self.numel() as f64)
    }

    /// Sum of squared elements as a scalar tensor.
    pub fn sq_norm(&self) -> Tensor {
        self.square().sum_all()
    }

    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "add_row_bias: input must be 2-d");
        assert_eq!(bias.shape(), &[self.shape()[1]], "add_row_bias: bias extent mismatch");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let b = bias.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a[i * n + j] + b[j];
            }
        }
        make(vec![m, n], out, Op::AddRowBias(self.clone(), bias.clone()))
    }

    pub fn add_chan_bias(&self, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 3, "add_chan_bias: input must be [C,H,W]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert_eq!(bias.shape(), &[c], "add_chan_bias: bias extent mismatch");
        let a = self.data();
        let b = bias.data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                out[ci * h * w + p] = a[ci * h * w + p] + b[ci];
            }
        }
        make(vec![c, h, w], out, Op::AddChanBias(self.clone(), bias.clone()))
    }

    // ── Convolution and spatial ops ─────────────────────────────────

    /// 2-d cross-correlation of `[C,H,W]` input with `[F,C,kh,kw]` kernel.
    /// Kernel extents must be odd; the output extent must divide evenly.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.shape().len(), 3, "conv2d: input must be [C,H,W]");
        assert_eq!(kernel.shape().len(), 4, "conv2d: kernel must be [F,C,kh,kw]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (f, kc, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        assert_eq!(c, kc, "conv2d: channel mismatch {} vs {}", c, kc);
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        assert!(
            (h + 2 * pad - kh) % stride == 0 && (w + 2 * pad - kw) % stride == 0,
            "conv2d: non-integral output extent for input {}x{}, kernel {}x{}, stride {}, pad {}",
            h, w, kh, kw, stride, pad
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![0.0; f * oh * ow];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            let iy = (oy * stride + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(ci * h + iy as usize) * w + ix as usize]
                                    * k[((fi * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[(fi * oh + oy) * ow + ox] = acc;
                }
            }
        }
        make(
            vec![f, oh, ow],
            out,
            Op::Conv2d { x: self.clone(), w: kernel.clone(), stride, pad },
        )
    }

    /// 2x2 average pooling with stride 2; extents must be even.
    pub fn avg_pool2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 3, "avg_pool2: input must be [C,H,W]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: extents must be even");
        let x = self.data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc * 0.25;
                }
            }
        }
        make(vec![c, oh, ow], out, Op::AvgPool2(self.clone()))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 3, "upsample2: input must be [C,H,W]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let x = self.data();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ci * oh + oy) * ow + ox] = x[(ci * h + oy / 2) * w + ox / 2];
                }
            }
        }
        make(vec![c, oh, ow], out, Op::Upsample2(self.clone()))
    }

    pub fn concat_chan(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 3, "concat_chan: inputs must be [C,H,W]");
        assert_eq!(
            &self.shape()[1..],
            &other.shape()[1..],
            "concat_chan: spatial extents mismatch"
        );
        let c = self.shape()[0] + other.shape()[0];
        let mut data = self.data().to_vec();
        data.extend_from_slice(other.data());
        make(
            vec![c, self.shape()[1], self.shape()[2]],
            data,
            Op::ConcatChan(self.clone(), other.clone()),
        )
    }

    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "concat_rows: inputs must be 2-d");
        assert_eq!(self.shape()[1], other.shape()[1], "concat_rows: column extents mismatch");
        let mut data = self.data().to_vec();
        data.extend_from_slice(other.data());
        make(
            vec![self.shape()[0] + other.shape()[0], self.shape()[1]],
            data,
            Op::ConcatRows(self.clone(), other.clone()),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "slice_cols: input must be 2-d");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        assert!(start + len <= n, "slice_cols: range out of bounds");
        let a = self.data();
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&a[i * n + start..i * n + start + len]);
        }
        make(vec![m, len], out, Op::SliceCols { x: self.clone(), start, len })
    }

    /// Row lookup `out[i] = table[ids[i]]`; gradients scatter-add back.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "gather_rows: table must be 2-d");
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for &i in ids {
            assert!(i < v, "gather_rows: id {} out of range {}", i, v);
        }
        let t = self.data();
        let mut out = vec![0.0; ids.len() * d];
        for (row, &i) in ids.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&t[i * d..(i + 1) * d]);
        }
        make(
            vec![ids.len(), d],
            out,
            Op::GatherRows { table: self.clone(), ids: ids.to_vec() },
        )
    }

    /// Group normalization over `[C,H,W]` with per-channel affine.
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
        assert_eq!(self.shape().len(), 3, "group_norm: input must be [C,H,W]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide channels");
        assert_eq!(gamma.shape(), &[c], "group_norm: gamma extent mismatch");
        assert_eq!(beta.shape(), &[c], "group_norm: beta extent mismatch");
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let cg = c / groups;
        let m = cg * h * w;
        let mut out = vec![0.0; c * h * w];
        for gi in 0..groups {
            let base = gi * cg * h * w;
            let slice = &x[base..base + m];
            let mu: f64 = slice.iter().sum::<f64>() / m as f64;
            let var: f64 = slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for p in 0..h * w {
                    let idx = ch * h * w + p;
                    out[idx] = g[ch] * (x[idx] - mu) * inv + b[ch];
                }
            }
        }
        make(
            vec![c, h, w],
            out,
            Op::GroupNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                groups,
                eps,
            },
        )
    }

    /// Forward finite difference along the width axis; last column zero.
    pub fn diff_x(&self) -> Tensor {
        assert!(self.shape().len() >= 2, "diff_x: input must have spatial axes");
        let w = *self.shape().last().unwrap();
        let rows = self.numel() / w;
        let x = self.data();
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            for j in 0..w - 1 {
                out[r * w + j] = x[r * w + j + 1] - x[r * w + j];
            }
        }
        make(self.shape().to_vec(), out, Op::DiffX(self.clone()))
    }

    /// Forward finite difference along the height axis; last row zero.
    pub fn diff_y(&self) -> Tensor {
        let nd = self.shape().len();
        assert!(nd >= 2, "diff_y: input must have spatial axes");
        let w = self.shape()[nd - 1];
        let h = self.shape()[nd - 2];
        let planes = self.numel() / (h * w);
        let x = self.data();
        let mut out = vec![0.0; self.numel()];
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..h - 1 {
                for j in 0..w {
                    out[base + i * w + j] = x[base + (i + 1) * w + j] - x[base + i * w + j];
                }
            }
        }
        make(self.shape().to_vec(), out, Op::DiffY(self.clone()))
    }

    /// Per-channel 3x3 box blur (zero padding, kernel weight 1/9).
    pub fn box_blur3(&self) -> Tensor {
        assert_eq!(self.shape().len(), 3, "box_blur3: input must be [C,H,W]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let x = self.data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (yi, xi) = (i as i64 + di, j as i64 + dj);
                            if yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64 {
                                acc += x[(ci * h + yi as usize) * w + xi as usize];
                            }
                        }
                    }
                    out[(ci * h + i) * w + j] = acc / 9.0;
                }
            }
        }
        make(vec![c, h, w], out, Op::BoxBlur3(self.clone()))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("op", &self.inner.op.name())
            .field("needs_grad", &self.inner.needs_grad)
            .finish()
    }
}
