//! Style-based image generator and its inversion encoder.
//!
//! The generator starts from a learned constant 4×4 block; each layer
//! optionally doubles the resolution, convolves, modulates the result with
//! AdaIN driven by that layer's w row, and applies a leaky ReLU. A final 1×1
//! convolution with tanh produces a 3-channel frame in [−1, 1]. Stochastic
//! noise injection is disabled — generation is deterministic — and there is
//! no mapping network: the model only ever consumes per-layer W+ codes
//! produced by inversion or by the latent rollout.
//!
//! Inversion runs through a convolutional encoder trained jointly with the
//! generator (see `pretrain`); a per-image latent-optimization fallback
//! refines or replaces encoder output under a fixed iteration budget.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Binding, Conv2dP, LinearP, ParamStore, PId};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

/// Leaky-ReLU slope shared by the generator, encoder, and discriminators.
pub const LEAK: f64 = 0.2;

/// AdaIN epsilon: added to the per-channel std before division.
pub const ADAIN_EPS: f64 = 1e-5;

struct GenBlock {
    upsample: bool,
    conv: Conv2dP,
    affine: LinearP,
}

/// Parameter layout of the generator.
pub struct Generator {
    pub layers: usize,
    pub d_w: usize,
    pub height: usize,
    pub width: usize,
    const_input: PId,
    blocks: Vec<GenBlock>,
    to_rgb: Conv2dP,
}

/// Pre- and post-modulation activations recorded during synthesis.
pub struct GenTaps {
    pub const_input: Var,
    /// Post-conv, pre-AdaIN activation per layer.
    pub pre_mod: Vec<Var>,
    /// Post-leaky-ReLU activation per layer.
    pub post_act: Vec<Var>,
}

fn upsample_count(height: usize, width: usize, layers: usize) -> usize {
    assert_eq!(height, width, "square frames only");
    assert!(
        height >= 8 && height.is_power_of_two(),
        "frame side must be a power of two ≥ 8"
    );
    let ups = (height / 4).trailing_zeros() as usize;
    assert!(
        ups <= layers,
        "{layers} layers cannot upsample 4×4 to {height}×{width}"
    );
    ups
}

impl Generator {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        channels: &[usize],
        d_w: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let layers = channels.len();
        assert!(layers >= 1);
        let ups = upsample_count(height, width, layers);
        let const_input = store.declare(
            "gen.const",
            ArrayD::from_elem(IxDyn(&[channels[0], 4, 4]), T::one()),
        );
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_ch = channels[l.saturating_sub(1)];
            blocks.push(GenBlock {
                upsample: l < ups,
                conv: Conv2dP::declare(
                    store,
                    rng,
                    &format!("gen.l{l}.conv"),
                    in_ch,
                    channels[l],
                    3,
                    1,
                    1,
                ),
                // Zero-initialized affine: modulation starts at identity
                // (y_s = 1, y_b = 0).
                affine: LinearP::declare_zeroed(
                    store,
                    &format!("gen.l{l}.affine"),
                    d_w,
                    2 * channels[l],
                    true,
                ),
            });
        }
        let to_rgb = Conv2dP::declare(
            store,
            rng,
            "gen.to_rgb",
            channels[layers - 1],
            3,
            1,
            1,
            0,
        );
        Generator {
            layers,
            d_w,
            height,
            width,
            const_input,
            blocks,
            to_rgb,
        }
    }

    pub fn latent_len(&self) -> usize {
        self.layers * self.d_w
    }

    /// Synthesize frames from flattened W+ codes (B, L·d_w) → (B, 3, H, W).
    pub fn synthesize<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        w: Var,
    ) -> Result<Var> {
        Ok(self.synthesize_with_taps(tape, bind, w)?.0)
    }

    /// Synthesis plus the per-layer activation taps.
    pub fn synthesize_with_taps<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        w: Var,
    ) -> Result<(Var, GenTaps)> {
        let s = tape.shape(w);
        if s.len() != 2 || s[1] != self.latent_len() {
            return Err(Error::Validation(format!(
                "latent code shape {s:?}, expected (B, {})",
                self.latent_len()
            )));
        }
        let b = s[0];
        let c0 = {
            let shape = tape.shape(bind.var(self.const_input));
            shape[0]
        };
        let zeros = tape.constant(ArrayD::zeros(IxDyn(&[b, c0, 4, 4])));
        let const_batch = tape.add_bc0(zeros, bind.var(self.const_input));
        let mut x = const_batch;
        let mut pre_mod = Vec::with_capacity(self.layers);
        let mut post_act = Vec::with_capacity(self.layers);
        for (l, blk) in self.blocks.iter().enumerate() {
            if blk.upsample {
                x = tape.upsample2x(x);
            }
            x = blk.conv.forward(tape, bind, x);
            pre_mod.push(x);
            let w_row = tape.narrow(w, 1, l * self.d_w, self.d_w);
            x = modulate(tape, bind, &blk.affine, x, w_row)?;
            x = tape.leaky_relu(x, LEAK);
            post_act.push(x);
        }
        let out = tape.tanh(self.to_rgb.forward(tape, bind, x));
        let os = tape.shape(out);
        debug_assert_eq!(&os[2..], &[self.height, self.width]);
        Ok((
            out,
            GenTaps {
                const_input: const_batch,
                pre_mod,
                post_act,
            },
        ))
    }
}

/// AdaIN: standardize each channel over space, then scale/shift with
/// (y_s, y_b) = affine(w_row), where the affine is zero-initialized and y_s
/// carries a +1 shift — out = y_s·(x−μ)/(σ+ε) + y_b.
pub fn modulate<T: Scalar>(
    tape: &Tape<T>,
    bind: &Binding,
    affine: &LinearP,
    x: Var,
    w_row: Var,
) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.len() != 4 {
        return Err(Error::Validation(format!(
            "modulate expects (B, C, H, W), got {xs:?}"
        )));
    }
    let c = xs[1];
    let aff = affine.forward(tape, bind, w_row);
    let asx = tape.shape(aff);
    if asx != vec![xs[0], 2 * c] {
        return Err(Error::Validation(format!(
            "affine output {asx:?} does not modulate {c} channels"
        )));
    }
    let ys = tape.add_scalar(tape.narrow(aff, 1, 0, c), T::one());
    let yb = tape.narrow(aff, 1, c, c);
    let normed = tape.instance_norm2d(x, ADAIN_EPS);
    Ok(tape.channel_affine(normed, ys, yb))
}

/// Convolutional inversion encoder: frame (B, 3, H, W) → W+ code (B, L·d_w).
pub struct Encoder {
    pub latent_len: usize,
    pub height: usize,
    pub width: usize,
    convs: Vec<Conv2dP>,
    head: LinearP,
}

impl Encoder {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        channels: &[usize],
        latent_len: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let downs = upsample_count(height, width, channels.len());
        assert_eq!(
            downs,
            channels.len(),
            "encoder needs exactly log2(side/4) stride-2 convs"
        );
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 3;
        for (i, &out_ch) in channels.iter().enumerate() {
            convs.push(Conv2dP::declare(
                store,
                rng,
                &format!("enc.c{i}"),
                in_ch,
                out_ch,
                3,
                2,
                1,
            ));
            in_ch = out_ch;
        }
        let head = LinearP::declare(store, rng, "enc.head", in_ch * 16, latent_len, true);
        Encoder {
            latent_len,
            height,
            width,
            convs,
            head,
        }
    }

    pub fn conv_params(&self) -> &[Conv2dP] {
        &self.convs
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        Ok(self.forward_taps(tape, bind, x)?.0)
    }

    /// Returns (code, taps): taps are the post-activation conv outputs,
    /// shallow→deep, and double as the perceptual feature maps.
    pub fn forward_taps<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.height || s[3] != self.width {
            return Err(Error::Validation(format!(
                "frame shape {s:?}, inverter configured for (B, 3, {}, {})",
                self.height, self.width
            )));
        }
        let mut h = x;
        let mut taps = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = tape.leaky_relu(conv.forward(tape, bind, h), LEAK);
            taps.push(h);
        }
        let hs = tape.shape(h);
        let flat = tape.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]]);
        Ok((self.head.forward(tape, bind, flat), taps))
    }
}

/// Latent-optimization inversion: Adam on w minimizing reconstruction MSE
/// (plus a weighted perceptual term when an extractor is supplied) against
/// `target` (B, 3, H, W), for a fixed budget. Deterministic in `seed`.
pub fn invert_by_optimization<T: Scalar>(
    gen: &Generator,
    store: &ParamStore<T>,
    target: &ArrayD<T>,
    features: Option<(&crate::objectives::FeatureExtractor<T>, f64)>,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<ArrayD<T>> {
    let s = target.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != gen.height || s[3] != gen.width {
        return Err(Error::Validation(format!(
            "inversion target shape {s:?}, generator renders (B, 3, {}, {})",
            gen.height, gen.width
        )));
    }
    let b = s[0];
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Inversion, 0);
    let mut w = crate::nn::uniform_init::<T>(&mut rng, &[b, gen.latent_len()], 0.1);
    let mut adam = AdamState::new(&[b, gen.latent_len()]);
    for t in 1..=iters as u64 {
        let tape = Tape::<T>::new();
        let bind = store.bind(&tape, false);
        let wv = tape.param(w.clone());
        let out = gen.synthesize(&tape, &bind, wv)?;
        let tv = tape.constant(target.clone());
        let mut loss = crate::objectives::mse_loss(&tape, tv, out)?;
        if let Some((fx, weight)) = features {
            let perc = crate::objectives::perceptual_loss(&tape, fx, tv, out)?;
            loss = tape.add(loss, tape.mul_scalar(perc, weight));
        }
        if !Scalar::to_f64(tape.scalar_value(loss)).is_finite() {
            return Err(Error::Numeric(format!(
                "inversion loss diverged at iteration {t}"
            )));
        }
        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(wv, &[b, gen.latent_len()]);
        adam.update(&mut w, &g, t, lr, 0.9, 0.999, 1e-8);
    }
    Ok(w)
}
