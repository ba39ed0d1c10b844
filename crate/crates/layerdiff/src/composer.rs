//! Layer recomposition: assemble any subset of generated layers over the
//! background to express selective instance removal.
//!
//! Overlapping masks are resolved by painter's order — layers are painted
//! back-to-front following the scene's recorded depth order, each restricted
//! to its own mask. For disjoint masks this reduces exactly to the
//! mask-weighted sum `sum_{k kept} M_k*x_k + (1 - sum_{k kept} M_k)*x_bg`.

use crate::scenes::MaskSet;
use crate::tensor::Tensor;

#[derive(thiserror::Error, Debug, PartialEq, Eq)]
pub enum ComposeError {
    #[error("removal index {0} out of range for {1} layers")]
    UnknownIndex(usize, usize),
    #[error("layer/mask count mismatch: {0} layers vs {1} masks")]
    CountMismatch(usize, usize),
    #[error("layer extent does not match masks")]
    ExtentMismatch,
}

/// The composable outputs of a layered generation pass: one image per
/// foreground instance plus the background image, with the instance masks
/// and depth order used to recombine them.
#[derive(Clone, Debug)]
pub struct LayerSet {
    pub foregrounds: Vec<Tensor>, // each [C, H, W]
    pub background: Tensor,       // [C, H, W]
    pub masks: MaskSet,
}

impl LayerSet {
    pub fn compose(&self, remove: &[usize]) -> Result<Tensor, ComposeError> {
        compose(&self.background, &self.foregrounds, &self.masks, remove)
    }
}

/// Pixelwise maximum of all instance masks.
pub fn union_mask(masks: &MaskSet) -> Tensor {
    let (h, w) = masks.extent();
    let mut out = vec![0.0f64; h * w];
    for m in &masks.masks {
        for (o, &v) in out.iter_mut().zip(m.data()) {
            *o = o.max(v);
        }
    }
    Tensor::new(&[h, w], out)
}

/// Binary 3x3 dilation applied `radius` times; `radius = 0` is identity.
pub fn dilate(mask: &Tensor, radius: usize) -> Tensor {
    morph(mask, radius, true)
}

/// Binary 3x3 erosion applied `radius` times; pixels beyond the border
/// count as background, so erosion shrinks masks touching the edge.
pub fn erode(mask: &Tensor, radius: usize) -> Tensor {
    morph(mask, radius, false)
}

fn morph(mask: &Tensor, radius: usize, grow: bool) -> Tensor {
    assert_eq!(mask.shape().len(), 2, "morphology expects an HxW mask");
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut cur = mask.data().to_vec();
    assert!(
        cur.iter().all(|&v| v == 0.0 || v == 1.0),
        "morphology expects a binary mask"
    );
    for _ in 0..radius {
        let mut next = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = if grow { 0.0f64 } else { 1.0f64 };
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        let v = if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                            cur[ny as usize * w + nx as usize]
                        } else {
                            0.0
                        };
                        acc = if grow { acc.max(v) } else { acc.min(v) };
                    }
                }
                next[y * w + x] = acc;
            }
        }
        cur = next;
    }
    Tensor::new(&[h, w], cur)
}

/// Boundary band `dilate(M, w) - erode(M, w)`: the ring of pixels around a
/// mask edge.
pub fn boundary_band(mask: &Tensor, width: usize) -> Tensor {
    let d = dilate(mask, width);
    let e = erode(mask, width);
    let out: Vec<f64> = d.data().iter().zip(e.data()).map(|(a, b)| a - b).collect();
    Tensor::new(mask.shape(), out)
}

/// Painter's composite: start from the background, then paint every kept
/// layer restricted to its mask, back to front along `masks.depth_order`.
/// `remove` holds zero-based instance indices; duplicates are allowed.
pub fn compose(
    background: &Tensor,
    layers: &[Tensor],
    masks: &MaskSet,
    remove: &[usize],
) -> Result<Tensor, ComposeError> {
    let n = masks.len();
    if layers.len() != n {
        return Err(ComposeError::CountMismatch(layers.len(), n));
    }
    let (h, w) = masks.extent();
    if background.shape().len() != 3 || background.shape()[1] != h || background.shape()[2] != w {
        return Err(ComposeError::ExtentMismatch);
    }
    for l in layers {
        if l.shape() != background.shape() {
            return Err(ComposeError::ExtentMismatch);
        }
    }
    let mut removed = vec![false; n];
    for &r in remove {
        if r >= n {
            return Err(ComposeError::UnknownIndex(r, n));
        }
        removed[r] = true;
    }
    let c = background.shape()[0];
    let hw = h * w;
    let mut out = background.data().to_vec();
    for &k in &masks.depth_order {
        if removed[k] {
            continue;
        }
        let m = masks.masks[k].data();
        let l = layers[k].data();
        for ch in 0..c {
            for p in 0..hw {
                if m[p] == 1.0 {
                    out[ch * hw + p] = l[ch * hw + p];
                }
            }
        }
    }
    Ok(Tensor::new(background.shape(), out))
}
