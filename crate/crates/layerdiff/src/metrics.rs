//! Image fidelity metrics: PSNR, uniform-window SSIM, masked MSE, and a
//! directory-level JSON evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scenes::{read_mask_png, read_rgb_png, DatasetError};
use crate::tensor::Tensor;

/// PSNR reported for identical images (infinite ratio).
pub const PSNR_SENTINEL: f64 = 99.0;

const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(thiserror::Error, Debug)]
pub enum MetricsError {
    #[error("metrics I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("file count mismatch: {pred} predictions vs {gt} references")]
    CountMismatch { pred: usize, gt: usize },
    #[error("missing companion file for `{0}`")]
    Missing(String),
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "metric extent mismatch");
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// `10 * log10(max_val^2 / MSE)`; identical images return the sentinel.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> f64 {
    assert!(max_val > 0.0, "max_val must be positive");
    let e = mse(a, b);
    if e == 0.0 {
        return PSNR_SENTINEL;
    }
    10.0 * (max_val * max_val / e).log10()
}

fn to_gray(a: &Tensor) -> Tensor {
    match a.shape().len() {
        2 => a.clone(),
        3 => {
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let mut out = vec![0.0; h * w];
            for ch in 0..c {
                for p in 0..h * w {
                    out[p] += a.data()[ch * h * w + p] / c as f64;
                }
            }
            Tensor::new(&[h, w], out)
        }
        _ => panic!("ssim expects HxW or CxHxW"),
    }
}

/// Mean SSIM over all 7x7 uniform windows of the channel-averaged images.
pub fn ssim(a: &Tensor, b: &Tensor, max_val: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "metric extent mismatch");
    let ga = to_gray(a);
    let gb = to_gray(b);
    let (h, w) = (ga.shape()[0], ga.shape()[1]);
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "image {}x{} smaller than the {}x{} SSIM window",
        h, w, SSIM_WINDOW, SSIM_WINDOW
    );
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let x = ga.data()[(y0 + dy) * w + x0 + dx];
                    let y = gb.data()[(y0 + dy) * w + x0 + dx];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean squared difference over the pixels where the mask is 1, averaged
/// over channels as well. The mask must select at least one pixel.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "metric extent mismatch");
    assert_eq!(mask.shape().len(), 2, "mask must be HxW");
    assert_eq!(&a.shape()[a.shape().len() - 2..], mask.shape(), "mask extent mismatch");
    assert!(
        mask.data().iter().all(|&v| v == 0.0 || v == 1.0),
        "mask must be binary"
    );
    let selected: f64 = mask.data().iter().sum();
    assert!(selected > 0.0, "masked_mse: empty mask");
    let hw = mask.numel();
    let c = a.numel() / hw;
    let mut acc = 0.0;
    for ch in 0..c {
        for p in 0..hw {
            if mask.data()[p] == 1.0 {
                let d = a.data()[ch * hw + p] - b.data()[ch * hw + p];
                acc += d * d;
            }
        }
    }
    acc / (selected * c as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub masked_mse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub masked_mse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

fn png_names(dir: &Path) -> Result<Vec<String>, MetricsError> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Pair every prediction PNG with the same-named reference and mask and
/// compute per-sample plus mean metrics.
pub fn eval_report(pred_dir: &Path, gt_dir: &Path, masks_dir: &Path) -> Result<EvalReport, MetricsError> {
    let preds = png_names(pred_dir)?;
    let gts = png_names(gt_dir)?;
    if preds.len() != gts.len() {
        return Err(MetricsError::CountMismatch { pred: preds.len(), gt: gts.len() });
    }
    let mut per_sample = Vec::with_capacity(preds.len());
    for name in &preds {
        let gt_path = gt_dir.join(name);
        if !gt_path.exists() {
            return Err(MetricsError::Missing(gt_path.display().to_string()));
        }
        let mask_path = masks_dir.join(name);
        if !mask_path.exists() {
            return Err(MetricsError::Missing(mask_path.display().to_string()));
        }
        let pred = read_rgb_png(&pred_dir.join(name))?;
        let gt = read_rgb_png(&gt_path)?;
        let mask = read_mask_png(&mask_path)?;
        per_sample.push(SampleMetrics {
            name: name.clone(),
            psnr: psnr(&pred, &gt, 1.0),
            ssim: ssim(&pred, &gt, 1.0),
            masked_mse: masked_mse(&pred, &gt, &mask),
        });
    }
    let n = per_sample.len().max(1) as f64;
    let aggregate = Aggregate {
        psnr: per_sample.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: per_sample.iter().map(|s| s.ssim).sum::<f64>() / n,
        masked_mse: per_sample.iter().map(|s| s.masked_mse).sum::<f64>() / n,
    };
    Ok(EvalReport { per_sample, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{write_mask_png, write_rgb_png};
    use crate::tensor::DRng;

    #[test]
    fn psnr_identity_is_sentinel() {
        let a = Tensor::randn(&[3, 8, 8], &mut DRng::new(1));
        assert_eq!(psnr(&a, &a, 1.0), PSNR_SENTINEL);
    }

    #[test]
    fn psnr_hand_cases() {
        // MSE = max^2 -> 0 dB exactly
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(psnr(&a, &b, 1.0), 0.0);
        // MSE = max^2 / 100 -> 20 dB
        let c = Tensor::full(&[1, 2, 2], 0.1);
        assert!((psnr(&c, &b, 1.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let a = Tensor::full(&[1, 2, 2], 0.5);
        let b = Tensor::full(&[1, 2, 2], 0.3);
        let c = Tensor::full(&[1, 2, 2], 0.1);
        assert_eq!(psnr(&a, &b, 1.0), psnr(&b, &a, 1.0));
        assert!(psnr(&a, &b, 1.0) > psnr(&a, &c, 1.0));
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = Tensor::randn(&[3, 10, 10], &mut DRng::new(2)).sigmoid();
        assert!((ssim(&a, &a, 1.0) - 1.0).abs() < 1e-9);
        let c = Tensor::full(&[8, 8], 0.5);
        assert!((ssim(&c, &c, 1.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric() {
        let a = Tensor::randn(&[8, 8], &mut DRng::new(3)).sigmoid();
        let b = Tensor::randn(&[8, 8], &mut DRng::new(4)).sigmoid();
        assert!((ssim(&a, &b, 1.0) - ssim(&b, &a, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_image_scores_low_and_matches_oracle() {
        // textured input vs its range flip
        let a = Tensor::randn(&[10, 10], &mut DRng::new(5)).sigmoid();
        let b = Tensor::new(a.shape(), a.data().iter().map(|&v| 1.0 - v).collect());
        let s = ssim(&a, &b, 1.0);
        assert!(s < 0.2, "ssim of negative image was {}", s);

        // independent per-window oracle
        let (h, w, win) = (10usize, 10usize, 7usize);
        let c1 = (0.01f64).powi(2);
        let c2 = (0.03f64).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dy in 0..win {
                    for dx in 0..win {
                        xs.push(a.data()[(y0 + dy) * w + x0 + dx]);
                        ys.push(b.data()[(y0 + dy) * w + x0 + dx]);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
                let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        let oracle = total / count as f64;
        assert!((s - oracle).abs() < 1e-9, "{} vs oracle {}", s, oracle);
    }

    #[test]
    #[should_panic(expected = "smaller than")]
    fn ssim_rejects_tiny_images() {
        let a = Tensor::zeros(&[4, 4]);
        let _ = ssim(&a, &a, 1.0);
    }

    #[test]
    fn masked_mse_cases() {
        let a = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(masked_mse(&a, &a, &Tensor::full(&[2, 2], 1.0)), 0.0);
        // one selected pixel with difference 2 -> 4
        let b = Tensor::new(&[1, 2, 2], vec![2.0, 7.0, 7.0, 7.0]);
        let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(masked_mse(&a, &b, &m), 4.0);
    }

    #[test]
    fn masked_mse_ignores_outside_pixels() {
        let mut rng = DRng::new(6);
        let a = Tensor::randn(&[3, 4, 4], &mut rng);
        let b = Tensor::randn(&[3, 4, 4], &mut rng);
        let mut m = vec![0.0; 16];
        m[5] = 1.0;
        m[10] = 1.0;
        let mask = Tensor::new(&[4, 4], m.clone());
        let base = masked_mse(&a, &b, &mask);
        // perturb every out-of-mask pixel of b
        let mut perturbed = b.data().to_vec();
        for ch in 0..3 {
            for p in 0..16 {
                if m[p] == 0.0 {
                    perturbed[ch * 16 + p] += 100.0;
                }
            }
        }
        let b2 = Tensor::new(b.shape(), perturbed);
        assert_eq!(masked_mse(&a, &b2, &mask), base);
    }

    #[test]
    #[should_panic(expected = "empty mask")]
    fn empty_mask_rejected() {
        let a = Tensor::zeros(&[1, 2, 2]);
        let _ = masked_mse(&a, &a, &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn eval_report_identity_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        let masks = dir.path().join("masks");
        for d in [&pred, &gt, &masks] {
            std::fs::create_dir_all(d).unwrap();
        }
        let mut rng = DRng::new(7);
        for i in 0..3 {
            let img = Tensor::new(
                &[3, 8, 8],
                (0..192).map(|_| (rng.below(256) as f64) / 255.0).collect(),
            );
            let name = format!("s{i}.png");
            write_rgb_png(&pred.join(&name), &img).unwrap();
            write_rgb_png(&gt.join(&name), &img).unwrap();
            let mut m = vec![0.0; 64];
            m[0] = 1.0;
            write_mask_png(&masks.join(&name), &Tensor::new(&[8, 8], m)).unwrap();
        }
        let report = eval_report(&pred, &gt, &masks).unwrap();
        assert_eq!(report.per_sample.len(), 3);
        for s in &report.per_sample {
            assert_eq!(s.psnr, PSNR_SENTINEL);
            assert!((s.ssim - 1.0).abs() < 1e-9);
            assert_eq!(s.masked_mse, 0.0);
        }
        let mean_psnr = report.per_sample.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
        assert_eq!(report.aggregate.psnr, mean_psnr);

        // missing mask file is named
        std::fs::remove_file(masks.join("s1.png")).unwrap();
        match eval_report(&pred, &gt, &masks) {
            Err(MetricsError::Missing(p)) => assert!(p.contains("s1.png")),
            other => panic!("expected missing error, got {:?}", other.map(|_| ())),
        }

        // count mismatch
        std::fs::remove_file(gt.join("s2.png")).unwrap();
        assert!(matches!(
            eval_report(&pred, &gt, &masks),
            Err(MetricsError::CountMismatch { pred: 3, gt: 2 })
        ));
    }
}
