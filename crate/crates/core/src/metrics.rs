//! Reconstruction-fidelity metrics.
//!
//! Clips live in `[-1, 1]`; both metrics map values to `[0, 1]` first and use
//! a peak value of 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videovae::VideoClip;

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR in dB of unit-range data; capped at 100 dB.
pub fn psnr_unit(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Inclusive prefix sums with a zero border: `table[(y + 1) * (w + 1) + x + 1]`.
fn integral(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut table = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img[y * w + x];
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
        }
    }
    table
}

fn box_sum(table: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    table[(y + k) * stride + x + k] - table[y * stride + x + k] - table[(y + k) * stride + x] + table[y * stride + x]
}

/// Mean SSIM of one unit-range plane over all `8 × 8` sliding windows.
///
/// Window statistics use population moments. Planes smaller than the window
/// are treated as a single window.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW.min(h).min(w);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (ia, ib, iaa, ibb, iab) = (
        integral(a, h, w),
        integral(b, h, w),
        integral(&aa, h, w),
        integral(&bb, h, w),
        integral(&ab, h, w),
    );
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let mu_a = box_sum(&ia, w, y, x, k) / n;
            let mu_b = box_sum(&ib, w, y, x, k) / n;
            let var_a = box_sum(&iaa, w, y, x, k) / n - mu_a * mu_a;
            let var_b = box_sum(&ibb, w, y, x, k) / n - mu_b * mu_b;
            let cov = box_sum(&iab, w, y, x, k) / n - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            count += 1;
        }
    }
    total / count as f64
}

fn to_unit(x: f32) -> f64 {
    (x as f64 + 1.0) / 2.0
}

/// PSNR and SSIM of `candidate` against `reference`.
///
/// SSIM is computed per frame and channel, averaged over channels and then
/// over frames.
pub fn eval_metrics(reference: &VideoClip, candidate: &VideoClip) -> Result<EvalMetrics> {
    if reference.dims() != candidate.dims() {
        return Err(Error::dim(
            "shape",
            format!("reference {:?} vs candidate {:?}", reference.dims(), candidate.dims()),
        ));
    }
    let a: Vec<f64> = reference.data().iter().map(|&x| to_unit(x)).collect();
    let b: Vec<f64> = candidate.data().iter().map(|&x| to_unit(x)).collect();
    let psnr = psnr_unit(&a, &b);

    let (t, c, h, w) = reference.dims();
    let plane = h * w;
    let mut ssim = 0.0;
    for ti in 0..t {
        let mut frame = 0.0;
        for ci in 0..c {
            let off = (ti * c + ci) * plane;
            frame += ssim_plane(&a[off..off + plane], &b[off..off + plane], h, w);
        }
        ssim += frame / c as f64;
    }
    Ok(EvalMetrics {
        psnr,
        ssim: ssim / t as f64,
    })
}
