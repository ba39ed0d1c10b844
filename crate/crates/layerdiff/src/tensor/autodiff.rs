//! Reverse-mode differentiation over the recorded op graph, plus an
//! independent central-difference oracle used by the test suites.

use std::collections::HashMap;

use super::{Op, Tensor};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(thiserror::Error, Debug, PartialEq, Eq)]
pub enum GradError {
    #[error("loss must be a scalar tensor")]
    LossNotScalar,
    #[error("parameter #{0} is not reachable from the loss graph")]
    ParamNotInGraph(usize),
}

/// Gradients keyed by tensor id. Tensors never visited by the backward
/// sweep (unreachable from the loss) have no entry.
pub struct GradMap {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }
}

impl Tensor {
    /// Back-propagate from a scalar loss. Panics if the tensor is not a
    /// scalar; use [`grad`] for the checked interface.
    pub fn backward(&self) -> GradMap {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss");
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let g = match grads.get(&t.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            accumulate_parents(t, &g, &mut grads);
        }
        GradMap { grads }
    }
}

/// Exact reverse-mode derivatives of `loss` with respect to each parameter.
pub fn grad(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>, GradError> {
    if loss.numel() != 1 {
        return Err(GradError::LossNotScalar);
    }
    let map = loss.backward();
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            map.get(p)
                .map(|g| Tensor::new(p.shape(), g.to_vec()))
                .ok_or(GradError::ParamNotInGraph(i))
        })
        .collect()
}

/// Central finite differences `(f(p+h) - f(p-h)) / 2h`, evaluated one
/// coordinate at a time. Independent of the backward sweep by construction.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = vec![0.0; p.numel()];
        for ei in 0..p.numel() {
            let eval = |delta: f64, f: &mut F| {
                let mut bumped: Vec<Tensor> = params.to_vec();
                let mut data = p.data().to_vec();
                data[ei] += delta;
                bumped[pi] = Tensor::param(p.shape(), data);
                f(&bumped)
            };
            let hi = eval(h, &mut f);
            let lo = eval(-h, &mut f);
            g[ei] = (hi - lo) / (2.0 * h);
        }
        out.push(Tensor::new(p.shape(), g));
    }
    out
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    // Iterative post-order DFS; graphs can be deep at toy scale too.
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.inner.op.parents() {
            if p.inner.needs_grad && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn add_into(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, delta: &[f64]) {
    if !t.inner.needs_grad {
        return;
    }
    let slot = grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

fn accumulate_parents(t: &Tensor, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match &t.inner.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grads, a, g);
            add_into(grads, b, g);
        }
        Op::Sub(a, b) => {
            add_into(grads, a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            add_into(grads, b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(b.data()).map(|(v, bv)| v * bv).collect();
            let db: Vec<f64> = g.iter().zip(a.data()).map(|(v, av)| v * av).collect();
            add_into(grads, a, &da);
            add_into(grads, b, &db);
        }
        Op::Scale { x, s } => {
            let k = s.item();
            let dx: Vec<f64> = g.iter().map(|v| v * k).collect();
            let ds: f64 = g.iter().zip(x.data()).map(|(v, xv)| v * xv).sum();
            add_into(grads, x, &dx);
            add_into(grads, s, &[ds]);
        }
        Op::ScaleConst(a, k) => {
            let da: Vec<f64> = g.iter().map(|v| v * k).collect();
            add_into(grads, a, &da);
        }
        Op::AddConst(a, _) => add_into(grads, a, g),
        Op::MatMul(a, b) => {
            // dA = G . B^T, dB = A^T . G
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let (ad, bd) = (a.data(), b.data());
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for j in 0..n {
                    let gv = g[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for l in 0..k {
                        da[i * k + l] += gv * bd[l * n + j];
                        db[l * n + j] += ad[i * k + l] * gv;
                    }
                }
            }
            add_into(grads, a, &da);
            add_into(grads, b, &db);
        }
        Op::Transpose(a) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = g[j * m + i];
                }
            }
            add_into(grads, a, &da);
        }
        Op::Reshape(a) => add_into(grads, a, g),
        Op::Conv2d { x, w, stride, pad } => {
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (f, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (wd + 2 * pad - kw) / stride + 1;
            let xd = x.data();
            let kd = w.data();
            let mut dx = vec![0.0; c * h * wd];
            let mut dw = vec![0.0; f * c * kh * kw];
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(fi * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for i in 0..kh {
                                let iy = (oy * stride + i) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let ix = (ox * stride + j) as isize - *pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = (ci * h + iy as usize) * wd + ix as usize;
                                    let ki = ((fi * c + ci) * kh + i) * kw + j;
                                    dx[xi] += gv * kd[ki];
                                    dw[ki] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
            add_into(grads, x, &dx);
            add_into(grads, w, &dw);
        }
        Op::SoftmaxRows(a) => {
            // dx_i = y_i * (g_i - sum_j g_j y_j), per row.
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let y = t.data();
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                for j in 0..n {
                    da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                }
            }
            add_into(grads, a, &da);
        }
        Op::SumAll(a) => {
            let da = vec![g[0]; a.numel()];
            add_into(grads, a, &da);
        }
        Op::Sigmoid(a) => {
            let y = t.data();
            let da: Vec<f64> = g.iter().zip(y).map(|(v, &yv)| v * yv * (1.0 - yv)).collect();
            add_into(grads, a, &da);
        }
        Op::AddRowBias(a, b) => {
            add_into(grads, a, g);
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut db = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    db[j] += g[i * n + j];
                }
            }
            add_into(grads, b, &db);
        }
        Op::AddChanBias(a, b) => {
            add_into(grads, a, g);
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let mut db = vec![0.0; c];
            for ci in 0..c {
                for p in 0..h * w {
                    db[ci] += g[ci * h * w + p];
                }
            }
            add_into(grads, b, &db);
        }
        Op::GroupNorm { x, gamma, beta, groups, eps } => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cg = c / groups;
            let m = cg * h * w;
            let xd = x.data();
            let gd = gamma.data();
            let mut dx = vec![0.0; c * h * w];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for gi in 0..*groups {
                let base = gi * cg * h * w;
                let slice = &xd[base..base + m];
                let mu: f64 = slice.iter().sum::<f64>() / m as f64;
                let var: f64 = slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                // xhat and dxhat for this group
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                let mut dxh = vec![0.0; m];
                let mut xh = vec![0.0; m];
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for p in 0..h * w {
                        let li = ci * h * w + p;
                        let idx = base + li;
                        xh[li] = (xd[idx] - mu) * inv;
                        dxh[li] = g[idx] * gd[ch];
                        dgamma[ch] += g[idx] * xh[li];
                        dbeta[ch] += g[idx];
                        sum_dxh += dxh[li];
                        sum_dxh_xh += dxh[li] * xh[li];
                    }
                }
                let mean_dxh = sum_dxh / m as f64;
                let mean_dxh_xh = sum_dxh_xh / m as f64;
                for li in 0..m {
                    dx[base + li] = inv * (dxh[li] - mean_dxh - xh[li] * mean_dxh_xh);
                }
            }
            add_into(grads, x, &dx);
            add_into(grads, gamma, &dgamma);
            add_into(grads, beta, &dbeta);
        }
        Op::AvgPool2(a) => {
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut da = vec![0.0; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(ci * oh + oy) * ow + ox] * 0.25;
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                da[(ci * h + 2 * oy + dy) * w + 2 * ox + dx_] += gv;
                            }
                        }
                    }
                }
            }
            add_into(grads, a, &da);
        }
        Op::Upsample2(a) => {
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (oh, ow) = (h * 2, w * 2);
            let mut da = vec![0.0; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        da[(ci * h + oy / 2) * w + ox / 2] += g[(ci * oh + oy) * ow + ox];
                    }
                }
            }
            add_into(grads, a, &da);
        }
        Op::ConcatChan(a, b) => {
            let na = a.numel();
            add_into(grads, a, &g[..na]);
            add_into(grads, b, &g[na..]);
        }
        Op::ConcatRows(a, b) => {
            let na = a.numel();
            add_into(grads, a, &g[..na]);
            add_into(grads, b, &g[na..]);
        }
        Op::SliceCols { x, start, len } => {
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..*len {
                    dx[i * n + start + j] = g[i * len + j];
                }
            }
            add_into(grads, x, &dx);
        }
        Op::GatherRows { table, ids } => {
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            for (row, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[i * d + j] += g[row * d + j];
                }
            }
            add_into(grads, table, &dt);
        }
        Op::DiffX(a) => {
            // out[., j] = x[., j+1] - x[., j]  =>  dx[., j] = g[., j-1] - g[., j]
            let w = *a.shape().last().unwrap();
            let rows = a.numel() / w;
            let mut da = vec![0.0; a.numel()];
            for r in 0..rows {
                for j in 0..w {
                    let mut v = 0.0;
                    if j > 0 {
                        v += g[r * w + j - 1];
                    }
                    if j < w - 1 {
                        v -= g[r * w + j];
                    }
                    da[r * w + j] = v;
                }
            }
            add_into(grads, a, &da);
        }
        Op::DiffY(a) => {
            let nd = a.shape().len();
            let w = a.shape()[nd - 1];
            let h = a.shape()[nd - 2];
            let planes = a.numel() / (h * w);
            let mut da = vec![0.0; a.numel()];
            for p in 0..planes {
                let base = p * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let mut v = 0.0;
                        if i > 0 {
                            v += g[base + (i - 1) * w + j];
                        }
                        if i < h - 1 {
                            v -= g[base + i * w + j];
                        }
                        da[base + i * w + j] = v;
                    }
                }
            }
            add_into(grads, a, &da);
        }
        Op::BoxBlur3(a) => {
            // Symmetric kernel: the adjoint is the same blur applied to g.
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let mut da = vec![0.0; c * h * w];
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                let (yi, xi) = (i as i64 + di, j as i64 + dj);
                                if yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64 {
                                    acc += g[(ci * h + yi as usize) * w + xi as usize];
                                }
                            }
                        }
                        da[(ci * h + i) * w + j] = acc / 9.0;
                    }
                }
            }
            add_into(grads, a, &da);
        }
    }
}
