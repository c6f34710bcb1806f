//! Training losses: reconstruction MSE, perceptual distance through a frozen
//! feature extractor, non-saturating adversarial terms, the weighted total,
//! and the discriminator losses.
//!
//! Patch discriminator outputs are aggregated to one scalar by mean before
//! any log. Raw squared-L2 objectives are implemented as per-element means so
//! the weight λ_mse = 100 stays scale-appropriate across resolutions. The
//! adversarial terms enter the minimized total as −log D(·), the standard
//! non-saturating form.
//!
//! The default feature extractor is the pretrained inversion encoder's
//! convolutional trunk (frozen, taps ordered shallow→deep). An external
//! weights file can replace it: little-endian u32 layer count, then per layer
//! {out_ch, in_ch, k, stride, pad: u32; slope: f32; weights out·in·k·k f32;
//! biases out f32}, where slope is the leaky-ReLU slope (0 = ReLU).

use crate::autodiff::{Scalar, Tape, Var};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::generator::Encoder;
use crate::nn::ParamStore;
use ndarray::{ArrayD, IxDyn};
use serde::Serialize;
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Sigmoid scores are clamped to [FLOOR, 1−FLOOR] before logs.
pub const SCORE_FLOOR: f64 = 1e-7;

/// Mean squared error over all elements of two same-shape tensors.
pub fn mse_loss<T: Scalar>(tape: &Tape<T>, v: Var, v_hat: Var) -> Result<Var> {
    let (a, b) = (tape.shape(v), tape.shape(v_hat));
    if a != b {
        return Err(Error::Validation(format!(
            "mse over mismatched shapes {a:?} vs {b:?}"
        )));
    }
    let d = tape.sub(v, v_hat);
    Ok(tape.mean_all(tape.sqr(d)))
}

#[derive(Debug)]
struct FxLayer<T: Scalar> {
    w: ArrayD<T>,
    b: ArrayD<T>,
    stride: usize,
    pad: usize,
    slope: f64,
}

/// Frozen convolutional stack exposing one tap per layer (post-activation),
/// shallow→deep.
#[derive(Debug)]
pub struct FeatureExtractor<T: Scalar> {
    layers: Vec<FxLayer<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Snapshot the inversion encoder's convolutional trunk.
    pub fn from_encoder(enc: &Encoder, store: &ParamStore<T>) -> Self {
        let layers = enc
            .conv_params()
            .iter()
            .map(|c| FxLayer {
                w: store.get(c.w).clone(),
                b: store.get(c.b.expect("encoder convs carry biases")).clone(),
                stride: c.stride,
                pad: c.pad,
                slope: crate::generator::LEAK,
            })
            .collect();
        FeatureExtractor { layers }
    }

    /// Single 1×1 identity layer with slope 1: θ(x) = x. Test fixture and
    /// the degenerate extractor for sanity runs.
    pub fn identity(channels: usize) -> Self {
        let mut w = ArrayD::<T>::zeros(IxDyn(&[channels, channels, 1, 1]));
        for c in 0..channels {
            w[[c, c, 0, 0]] = T::one();
        }
        FeatureExtractor {
            layers: vec![FxLayer {
                w,
                b: ArrayD::zeros(IxDyn(&[channels])),
                stride: 1,
                pad: 0,
                slope: 1.0,
            }],
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::Format(format!("extractor {}: {e}", path.display())))?;
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |file: &mut std::fs::File| -> Result<u32> {
            file.read_exact(&mut u32buf)
                .map_err(|_| Error::Format("extractor file truncated".into()))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let p = read_u32(&mut file)? as usize;
        if p == 0 || p > 16 {
            return Err(Error::Format(format!("extractor declares {p} layers")));
        }
        let mut layers = Vec::with_capacity(p);
        let mut expect_in = 3usize;
        for li in 0..p {
            let out_ch = read_u32(&mut file)? as usize;
            let in_ch = read_u32(&mut file)? as usize;
            let k = read_u32(&mut file)? as usize;
            let stride = read_u32(&mut file)? as usize;
            let pad = read_u32(&mut file)? as usize;
            if in_ch != expect_in {
                return Err(Error::Format(format!(
                    "extractor layer {li} consumes {in_ch} channels, expected {expect_in}"
                )));
            }
            if out_ch == 0 || k == 0 || stride == 0 {
                return Err(Error::Format(format!("extractor layer {li} degenerate")));
            }
            let mut f32buf = [0u8; 4];
            file.read_exact(&mut f32buf)
                .map_err(|_| Error::Format("extractor file truncated".into()))?;
            let slope = f32::from_le_bytes(f32buf) as f64;
            let mut wbytes = vec![0u8; out_ch * in_ch * k * k * 4];
            file.read_exact(&mut wbytes)
                .map_err(|_| Error::Format("extractor file truncated".into()))?;
            let mut bbytes = vec![0u8; out_ch * 4];
            file.read_exact(&mut bbytes)
                .map_err(|_| Error::Format("extractor file truncated".into()))?;
            let to_vals = |bytes: &[u8]| -> Vec<T> {
                bytes
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect()
            };
            let w = ArrayD::from_shape_vec(IxDyn(&[out_ch, in_ch, k, k]), to_vals(&wbytes))
                .unwrap();
            let b = ArrayD::from_shape_vec(IxDyn(&[out_ch]), to_vals(&bbytes)).unwrap();
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) || !slope.is_finite() {
                return Err(Error::Numeric(format!(
                    "extractor layer {li} holds non-finite values"
                )));
            }
            layers.push(FxLayer {
                w,
                b,
                stride,
                pad,
                slope,
            });
            expect_in = out_ch;
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing).unwrap_or(0) != 0 {
            return Err(Error::Format("extractor file has trailing bytes".into()));
        }
        Ok(FeatureExtractor { layers })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            let s = l.w.shape();
            for v in [s[0], s[1], s[2], l.stride, l.pad] {
                out.write_all(&(v as u32).to_le_bytes())?;
            }
            out.write_all(&(l.slope as f32).to_le_bytes())?;
            for &v in l.w.iter() {
                out.write_all(&(Scalar::to_f64(v) as f32).to_le_bytes())?;
            }
            for &v in l.b.iter() {
                out.write_all(&(Scalar::to_f64(v) as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn tap_count(&self) -> usize {
        self.layers.len()
    }

    /// Feature maps θ_1(x)..θ_P(x); parameters enter the tape as constants,
    /// so no gradient ever reaches the extractor.
    pub fn forward_taps(&self, tape: &Tape<T>, x: Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            let w = tape.constant(l.w.clone());
            let b = tape.constant(l.b.clone());
            h = tape.leaky_relu(tape.conv2d(h, w, Some(b), l.stride, l.pad), l.slope);
            taps.push(h);
        }
        taps
    }
}

/// Perceptual distance of one frame pair: Σ_p mean |θ_p(x) − θ_p(x̂)|, the
/// mean running over channels, space, and the batch.
pub fn perceptual_loss<T: Scalar>(
    tape: &Tape<T>,
    fx: &FeatureExtractor<T>,
    x: Var,
    x_hat: Var,
) -> Result<Var> {
    let (a, b) = (tape.shape(x), tape.shape(x_hat));
    if a != b {
        return Err(Error::Validation(format!(
            "perceptual loss over mismatched shapes {a:?} vs {b:?}"
        )));
    }
    let tx = fx.forward_taps(tape, x);
    let ty = fx.forward_taps(tape, x_hat);
    let mut acc: Option<Var> = None;
    for (px, py) in tx.iter().zip(&ty) {
        let term = tape.mean_all(tape.abs(tape.sub(*px, *py)));
        acc = Some(match acc {
            Some(s) => tape.add(s, term),
            None => term,
        });
    }
    Ok(acc.expect("extractor has at least one tap"))
}

pub fn neg_log<T: Scalar>(tape: &Tape<T>, score: Var) -> Var {
    let clamped = tape.clamp(score, SCORE_FLOOR, 1.0 - SCORE_FLOOR);
    tape.neg(tape.ln(clamped))
}

/// Non-saturating generator terms: (−log s_img, −log s_vid) from the two
/// mean-aggregated discriminator scores.
pub fn adv_generator_losses<T: Scalar>(
    tape: &Tape<T>,
    img_score: Var,
    vid_score: Var,
) -> (Var, Var) {
    (neg_log(tape, img_score), neg_log(tape, vid_score))
}

/// One discriminator's loss: −[log s_real + log(1 − s_fake)].
pub fn discriminator_loss<T: Scalar>(tape: &Tape<T>, real_score: Var, fake_score: Var) -> Var {
    let one_minus_fake = tape.add_scalar(tape.neg(fake_score), T::one());
    let r = tape.clamp(real_score, SCORE_FLOOR, 1.0 - SCORE_FLOOR);
    let f = tape.clamp(one_minus_fake, SCORE_FLOOR, 1.0 - SCORE_FLOOR);
    tape.neg(tape.add(tape.ln(r), tape.ln(f)))
}

/// Scalar loss values and their weighted composition for one update.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perc: f64,
    pub adv2d: f64,
    pub adv3d: f64,
    /// Weighted contributions in (mse, perc, adv2d, adv3d) order.
    pub weighted: [f64; 4],
    pub total: f64,
}

/// Weighted total L = λ_mse·L_mse + λ_perc·L_perc + λ_2D·L_2D + λ_3D·L_3D,
/// returned both as a tape scalar (for backward) and as a value breakdown.
pub fn total_generator_loss<T: Scalar>(
    tape: &Tape<T>,
    mse: Var,
    perc: Var,
    adv2d: Var,
    adv3d: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let named = [
        ("mse", mse, w.mse),
        ("perc", perc, w.perc),
        ("adv2d", adv2d, w.adv2d),
        ("adv3d", adv3d, w.adv3d),
    ];
    for (name, var, _) in &named {
        let v = Scalar::to_f64(tape.scalar_value(*var));
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    let total = tape.weighted_sum_scalars(&[
        (mse, w.mse),
        (perc, w.perc),
        (adv2d, w.adv2d),
        (adv3d, w.adv3d),
    ]);
    let term = |v: Var| Scalar::to_f64(tape.scalar_value(v));
    let weighted = [
        w.mse * term(mse),
        w.perc * term(perc),
        w.adv2d * term(adv2d),
        w.adv3d * term(adv3d),
    ];
    Ok((
        total,
        LossBreakdown {
            mse: term(mse),
            perc: term(perc),
            adv2d: term(adv2d),
            adv3d: term(adv3d),
            weighted,
            total: term(total),
        },
    ))
}
