//! Evaluation metrics: PSNR and SSIM against a ground-truth image, plus the
//! reference reconstructions (temporal mean, sharpest frame) that restored
//! outputs are compared against.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::FrameStack;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("domain error: {0}")]
    Domain(String),
}

/// Quantitative summary of one restoration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    /// PSNR of each distorted input frame against the ground truth.
    pub input_psnr: Vec<f64>,
}

/// Peak signal-to-noise ratio in dB for [0,1] images (peak = 1), capped at
/// 100 dB once the mean squared error drops below 1e-10.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Domain(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = (a - b).mapv(|d| d * d).mean().unwrap_or(f64::NAN);
    if !mse.is_finite() {
        return Err(MetricsError::Domain("non-finite pixel values".into()));
    }
    if mse < 1e-10 {
        Ok(100.0)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Valid-mode separable Gaussian filter: rows then columns.
fn filter_valid(img: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (m, n) = img.dim();
    let k = w.len();
    let mut rows = Array2::<f64>::zeros((m, n - k + 1));
    for i in 0..m {
        for j in 0..=(n - k) {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * img[(i, j + t)];
            }
            rows[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((m - k + 1, n - k + 1));
    for j in 0..rows.ncols() {
        for i in 0..=(m - k) {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * rows[(i + t, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

fn channel(img: &Array3<f64>, c: usize) -> Array2<f64> {
    let (m, n, _) = img.dim();
    Array2::from_shape_fn((m, n), |(i, j)| img[(i, j, c)])
}

/// Structural similarity with the standard 11x11 Gaussian window (sigma 1.5,
/// C1 = 0.01^2, C2 = 0.03^2), computed per channel over all valid window
/// positions and averaged across channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Domain(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (m, n, c) = a.dim();
    if m < SSIM_WINDOW || n < SSIM_WINDOW {
        return Err(MetricsError::Domain(format!(
            "image {m}x{n} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let w = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let mu_x = filter_valid(&x, &w);
        let mu_y = filter_valid(&y, &w);
        let xx = filter_valid(&(&x * &x), &w);
        let yy = filter_valid(&(&y * &y), &w);
        let xy = filter_valid(&(&x * &y), &w);
        let mut acc = 0.0;
        for ((i, j), &mx) in mu_x.indexed_iter() {
            let my = mu_y[(i, j)];
            let vx = xx[(i, j)] - mx * mx;
            let vy = yy[(i, j)] - my * my;
            let cxy = xy[(i, j)] - mx * my;
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / c as f64)
}

/// Reference reconstructions computed directly from the input stack.
#[derive(Debug, Clone)]
pub struct Baselines {
    pub temporal_mean: Array3<f64>,
    pub sharpest: Array3<f64>,
    pub sharpest_index: usize,
}

/// Variance of the 4-neighbor Laplacian of the channel-mean grayscale image;
/// the classical focus measure used to pick a reference frame.
pub fn laplacian_variance(img: &Array3<f64>) -> f64 {
    let (m, n, c) = img.dim();
    if m < 3 || n < 3 {
        return 0.0;
    }
    let gray = Array2::from_shape_fn((m, n), |(i, j)| {
        (0..c).map(|ch| img[(i, j, ch)]).sum::<f64>() / c as f64
    });
    let mut vals = Vec::with_capacity((m - 2) * (n - 2));
    for i in 1..m - 1 {
        for j in 1..n - 1 {
            vals.push(
                gray[(i - 1, j)] + gray[(i + 1, j)] + gray[(i, j - 1)] + gray[(i, j + 1)]
                    - 4.0 * gray[(i, j)],
            );
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
}

/// Temporal mean and the sharpest single frame of a stack.
pub fn baselines(frames: &FrameStack) -> Result<Baselines, MetricsError> {
    if frames.is_empty() {
        return Err(MetricsError::Domain("empty frame stack".into()));
    }
    let dim = frames[0].dim();
    for (k, f) in frames.iter().enumerate() {
        if f.dim() != dim {
            return Err(MetricsError::Domain(format!(
                "frame {k} has shape {:?}, expected {:?}",
                f.dim(),
                dim
            )));
        }
    }
    let mut mean = Array3::<f64>::zeros(dim);
    for f in frames {
        mean += f;
    }
    mean /= frames.len() as f64;
    let sharpest_index = frames
        .iter()
        .enumerate()
        .map(|(k, f)| (k, laplacian_variance(f)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap();
    Ok(Baselines { temporal_mean: mean, sharpest: frames[sharpest_index].clone(), sharpest_index })
}

/// Scores a restored image against ground truth alongside the baselines.
pub fn evaluate(
    restored: &Array3<f64>,
    ground_truth: &Array3<f64>,
    frames: &FrameStack,
) -> Result<EvalReport, MetricsError> {
    let base = baselines(frames)?;
    let report = EvalReport {
        psnr: psnr(restored, ground_truth)?,
        ssim: ssim(restored, ground_truth)?,
        baseline_psnr: psnr(&base.temporal_mean, ground_truth)?,
        baseline_ssim: ssim(&base.temporal_mean, ground_truth)?,
        input_psnr: frames
            .iter()
            .map(|f| psnr(f, ground_truth))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if !(report.psnr.is_finite() && report.ssim.is_finite() && report.ssim <= 1.0 + 1e-12) {
        return Err(MetricsError::Domain("non-finite or out-of-range metric".into()));
    }
    Ok(report)
}
