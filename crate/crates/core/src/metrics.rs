//! Evaluation metrics over 8-bit frames: MSE, PSNR, SSIM, and an optional
//! LPIPS-style perceptual distance that only exists when a feature backbone
//! file is supplied — it is omitted from reports otherwise, never faked.
//!
//! All metrics run on (H, W, 3) u8 frames in 0–255 pixel units, matching how
//! the dataset stores clips; predictions in [−1,1] model units are converted
//! through the exact de-normalization `round((x+1)·127.5)` first, which is a
//! bijection on the 8-bit grid.

use crate::autodiff::{Scalar, Tape};
use crate::dataset::VideoClip;
use crate::error::{Error, Result};
use crate::objectives::FeatureExtractor;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use serde::{Deserialize, Serialize};

/// SSIM window: 11×11 Gaussian, σ = 1.5, stabilizers K1/K2 on L = 255.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;

/// De-normalize one model-unit value to a pixel: round((x+1)·127.5),
/// clamped to [0, 255]. Inverse of `v/127.5 − 1` on every u8 value.
pub fn denorm_pixel(x: f32) -> u8 {
    (((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8
}

/// Convert a model tensor (T, 3, H, W) in [−1,1] to (T, H, W, 3) u8 frames.
pub fn model_tensor_to_frames(t: &ArrayD<f32>) -> Result<Array4<u8>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Validation(format!(
            "model tensor shape {s:?}, expected (T, 3, H, W)"
        )));
    }
    let (tn, h, w) = (s[0], s[2], s[3]);
    let mut out = Array4::<u8>::zeros((tn, h, w, 3));
    for ti in 0..tn {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(ti, y, x, c)] = denorm_pixel(t[[ti, c, y, x]]);
                }
            }
        }
    }
    Ok(out)
}

fn check_same_shape(a: &ArrayView3<u8>, b: &ArrayView3<u8>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Validation(format!(
            "frame shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape()[2] != 3 {
        return Err(Error::Validation(format!(
            "frames must be (H, W, 3), got {:?}",
            a.shape()
        )));
    }
    Ok(())
}

/// Mean squared pixel error in 0–255 units.
pub fn frame_mse(a: ArrayView3<u8>, b: ArrayView3<u8>) -> Result<f64> {
    check_same_shape(&a, &b)?;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// PSNR in dB from an 8-bit MSE: 10·log10(255²/mse), capped at 100 dB
/// (identical frames would otherwise be infinite).
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Normalized 1-D Gaussian window for SSIM.
fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Valid-mode separable Gaussian filter: horizontal then vertical pass.
fn gaussian_filter_valid(x: &ArrayView2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let k = g.len();
    let mut horiz = Array2::<f64>::zeros((h, w - k + 1));
    for i in 0..h {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (d, &gv) in g.iter().enumerate() {
                acc += gv * x[(i, j + d)];
            }
            horiz[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - k + 1, w - k + 1));
    for i in 0..h - k + 1 {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (d, &gv) in g.iter().enumerate() {
                acc += gv * horiz[(i + d, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Mean SSIM over valid window positions, averaged across the 3 channels.
pub fn frame_ssim(a: ArrayView3<u8>, b: ArrayView3<u8>) -> Result<f64> {
    check_same_shape(&a, &b)?;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "frames {h}×{w} are smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let mut channel_means = 0.0;
    for c in 0..3 {
        let xa = a.index_axis(Axis(2), c).mapv(|v| v as f64);
        let xb = b.index_axis(Axis(2), c).mapv(|v| v as f64);
        let mx = gaussian_filter_valid(&xa.view(), &g);
        let my = gaussian_filter_valid(&xb.view(), &g);
        let mxx = gaussian_filter_valid(&(&xa * &xa).view(), &g);
        let myy = gaussian_filter_valid(&(&xb * &xb).view(), &g);
        let mxy = gaussian_filter_valid(&(&xa * &xb).view(), &g);
        let mut total = 0.0;
        for i in 0..mx.shape()[0] {
            for j in 0..mx.shape()[1] {
                let (ux, uy) = (mx[(i, j)], my[(i, j)]);
                let vx = mxx[(i, j)] - ux * ux;
                let vy = myy[(i, j)] - uy * uy;
                let cov = mxy[(i, j)] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
        }
        channel_means += total / (mx.len() as f64);
    }
    Ok(channel_means / 3.0)
}

/// LPIPS-style distance through a supplied feature backbone: features are
/// unit-normalized over channels at each position; per tap the squared
/// differences are summed over channels and averaged over positions, then
/// taps are summed. Values are comparable only under one fixed backbone.
pub fn frame_lpips<T: Scalar>(
    fx: &FeatureExtractor<T>,
    a: ArrayView3<u8>,
    b: ArrayView3<u8>,
) -> Result<f64> {
    check_same_shape(&a, &b)?;
    let to_model = |f: &ArrayView3<u8>| -> ArrayD<T> {
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[1, 3, h, w]));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[0, c, y, x]] = T::from_f64(f[(y, x, c)] as f64 / 127.5 - 1.0);
                }
            }
        }
        out
    };
    let tape = Tape::<T>::new();
    let va = tape.constant(to_model(&a));
    let vb = tape.constant(to_model(&b));
    let taps_a = fx.forward_taps(&tape, va);
    let taps_b = fx.forward_taps(&tape, vb);
    let mut total = 0.0;
    for (ta, tb) in taps_a.iter().zip(&taps_b) {
        let fa = tape.value_clone(*ta);
        let fb = tape.value_clone(*tb);
        let s = fa.shape().to_vec();
        let (ch, hh, ww) = (s[1], s[2], s[3]);
        let mut tap_sum = 0.0;
        for y in 0..hh {
            for x in 0..ww {
                let norm = |f: &ArrayD<T>| -> Vec<f64> {
                    let col: Vec<f64> =
                        (0..ch).map(|c| Scalar::to_f64(f[[0, c, y, x]])).collect();
                    let len = col.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                    col.iter().map(|v| v / len).collect()
                };
                let (na, nb) = (norm(&fa), norm(&fb));
                tap_sum += na
                    .iter()
                    .zip(&nb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        total += tap_sum / (hh * ww) as f64;
    }
    Ok(total)
}

/// Scores of one predicted frame against its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameScore {
    /// 0-based frame index inside the sampled clip.
    pub frame: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip: usize,
    pub frames: Vec<FrameScore>,
}

/// Per-clip records plus their flat means. Aggregates are always the plain
/// mean of every retained (clip, frame) record and can be recomputed from
/// `per_clip` exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clips: usize,
    /// Evaluated frame indices, inclusive-exclusive.
    pub frame_range: (usize, usize),
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub per_clip: Vec<ClipScores>,
}

impl MetricsReport {
    /// Recompute the aggregate means from the per-frame records.
    pub fn recompute_aggregates(&self) -> (f64, f64, f64, Option<f64>) {
        let mut n = 0usize;
        let (mut mse, mut ssim, mut psnr, mut lp) = (0.0, 0.0, 0.0, 0.0);
        let mut lp_n = 0usize;
        for clip in &self.per_clip {
            for f in &clip.frames {
                n += 1;
                mse += f.mse;
                ssim += f.ssim;
                psnr += f.psnr;
                if let Some(v) = f.lpips {
                    lp += v;
                    lp_n += 1;
                }
            }
        }
        let d = n.max(1) as f64;
        (
            mse / d,
            ssim / d,
            psnr / d,
            (lp_n > 0).then(|| lp / lp_n as f64),
        )
    }
}

/// Score predictions for every clip yielded by `pairs`: each item is
/// (ground truth, prediction) as (T, H, W, 3) u8 frames of equal shape.
/// Frames `[start, T)` are scored, where `start` is 1 unless
/// `include_first` — the first frame is reproduced by frozen inversion, not
/// predicted, so it is excluded from headline numbers by default.
pub fn score_clips<T: Scalar>(
    pairs: &[(Array4<u8>, Array4<u8>)],
    include_first: bool,
    lpips: Option<&FeatureExtractor<T>>,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Validation("no clips to evaluate".into()));
    }
    let t = pairs[0].0.shape()[0];
    let start = if include_first { 0 } else { 1 };
    if start >= t {
        return Err(Error::Validation(format!(
            "clips have {t} frames; nothing left to score"
        )));
    }
    let mut per_clip = Vec::with_capacity(pairs.len());
    for (ci, (gt, pred)) in pairs.iter().enumerate() {
        if gt.shape() != pred.shape() {
            return Err(Error::Validation(format!(
                "clip {ci}: ground truth {:?} vs prediction {:?}",
                gt.shape(),
                pred.shape()
            )));
        }
        if gt.shape()[0] != t {
            return Err(Error::Validation("clips have differing lengths".into()));
        }
        let mut frames = Vec::with_capacity(t - start);
        for f in start..t {
            let a = gt.index_axis(Axis(0), f);
            let b = pred.index_axis(Axis(0), f);
            let mse = frame_mse(a, b)?;
            frames.push(FrameScore {
                frame: f,
                mse,
                psnr: psnr_from_mse(mse),
                ssim: frame_ssim(a, b)?,
                lpips: match lpips {
                    Some(fx) => Some(frame_lpips(fx, a, b)?),
                    None => None,
                },
            });
        }
        per_clip.push(ClipScores { clip: ci, frames });
    }
    let mut report = MetricsReport {
        clips: pairs.len(),
        frame_range: (start, t),
        mse: 0.0,
        ssim: 0.0,
        psnr: 0.0,
        lpips: None,
        per_clip,
    };
    let (mse, ssim, psnr, lp) = report.recompute_aggregates();
    report.mse = mse;
    report.ssim = ssim;
    report.psnr = psnr;
    report.lpips = lp;
    Ok(report)
}

/// Predict-and-score loop over one dataset split. The predictor receives the
/// clip index and its ground-truth sampled clip and returns predicted frames
/// of the same shape.
pub fn evaluate_split<T, F>(
    data: &crate::dataset::LoadedDataset,
    split: &str,
    n_frames: usize,
    include_first: bool,
    lpips: Option<&FeatureExtractor<T>>,
    mut predict: F,
) -> Result<MetricsReport>
where
    T: Scalar,
    F: FnMut(usize, &VideoClip) -> Result<Array4<u8>>,
{
    let indices = data.indices_for_split(split);
    if indices.is_empty() {
        return Err(Error::Validation(format!(
            "dataset has no {split:?} clips"
        )));
    }
    let mut pairs = Vec::with_capacity(indices.len());
    for idx in indices {
        let clip = data.load_clip(idx)?;
        let sampled = crate::dataset::sample_frames(&clip, n_frames)?;
        let pred = predict(idx, &sampled)?;
        pairs.push((sampled.frames, pred));
    }
    score_clips(&pairs, include_first, lpips)
}

/// Render an aligned comparison table, Table-II column order. The LPIPS
/// column appears only when at least one row carries a value.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let any_lpips = rows.iter().any(|(_, r)| r.lpips.is_some());
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(["model".len()])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_w$}  {:>10}  {:>8}  {:>10}",
        "model", "MSE \u{2193}", "SSIM \u{2191}", "PSNR \u{2191}"
    ));
    if any_lpips {
        out.push_str(&format!("  {:>9}", "LPIPS \u{2193}"));
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!(
            "{name:<name_w$}  {:>10.3}  {:>8.3}  {:>10.3}",
            r.mse, r.ssim, r.psnr
        ));
        if any_lpips {
            match r.lpips {
                Some(v) => out.push_str(&format!("  {:>9.3}", v)),
                None => out.push_str(&format!("  {:>9}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
