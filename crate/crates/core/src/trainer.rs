//! Training loop and model assembly. The frozen backbone (generator +
//! inversion encoder) comes from pretraining; this module declares the
//! trainable motion model for the chosen variant, runs the repeating
//! G, G, D update schedule over the dataset, checkpoints, and predicts
//! clips for evaluation.
//!
//! Variants share one latent-rollout skeleton and differ only in where the
//! per-step input comes from:
//!   `tvp`   caption attention + fusion + refinement (the full model),
//!   `wo_se` the caption summary token for every step (no step attention),
//!   `wo_rm` attention-fused words without the refinement MLP,
//!   `fvp`   the previous latent code (no text at all),
//!   `nvp`   a fresh Gaussian draw per step (no text at all).

use crate::autodiff::{Scalar, Tape, Var};
use crate::checkpoint::{self, CheckpointHeader, CheckpointState};
use crate::config::Config;
use crate::dataset::{
    clip_to_model_tensor, sample_frames, tokenize, LoadedDataset, TokenizedCaption, VideoClip,
    Vocabulary,
};
use crate::disc::{ImageDisc, VideoDisc};
use crate::error::{Error, Result};
use crate::motion::MotionPredictor;
use crate::nn::{AdamGroup, AdamState, Binding, ParamStore};
use crate::objectives::{
    adv_generator_losses, discriminator_loss, mse_loss, perceptual_loss, total_generator_loss,
    FeatureExtractor, LossBreakdown,
};
use crate::pretrain::{assert_disjoint, encode_frames, PretrainedGenerator};
use crate::rng::{stream_rng, Stream};
use crate::textenc::TextEncoder;
use crate::tim::{StepEmbeddings, Tim};
use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::Serialize;
use std::path::Path;

/// Which step-input source drives the latent rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tvp,
    Fvp,
    Nvp,
    WoSe,
    WoRm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Tvp,
        Variant::Fvp,
        Variant::Nvp,
        Variant::WoSe,
        Variant::WoRm,
    ];

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "tvp" => Ok(Variant::Tvp),
            "fvp" => Ok(Variant::Fvp),
            "nvp" => Ok(Variant::Nvp),
            "wo_se" => Ok(Variant::WoSe),
            "wo_rm" => Ok(Variant::WoRm),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected tvp, fvp, nvp, wo_se, or wo_rm)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tvp => "tvp",
            Variant::Fvp => "fvp",
            Variant::Nvp => "nvp",
            Variant::WoSe => "wo_se",
            Variant::WoRm => "wo_rm",
        }
    }

    /// Ablations that feed text vectors straight into the rollout need the
    /// step width to match the word width.
    pub fn needs_matching_text_dims(self) -> bool {
        matches!(self, Variant::WoSe | Variant::WoRm)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Variant::Tvp | Variant::WoSe | Variant::WoRm)
    }

    fn uses_tim(self) -> bool {
        matches!(self, Variant::Tvp | Variant::WoRm)
    }
}

/// The trainable motion model for one variant. Text/TIM components exist
/// only where the variant consumes them, so checkpoints carry no dead
/// parameters (`wo_rm` keeps its TIM's unused refinement rows at init; they
/// receive no gradients and the optimizer skips them).
pub struct ModelAssembly<T: Scalar> {
    pub variant: Variant,
    pub store: ParamStore<T>,
    pub text: Option<TextEncoder>,
    pub tim: Option<Tim>,
    pub motion: MotionPredictor,
    pub step_dim: usize,
}

impl<T: Scalar> ModelAssembly<T> {
    pub fn declare(cfg: &Config, vocab_size: usize) -> Result<Self> {
        let variant = Variant::parse(&cfg.train.variant)?;
        let m = &cfg.model;
        let step_dim = match variant {
            Variant::Tvp | Variant::Nvp => m.d_t,
            Variant::WoSe | Variant::WoRm => m.d_u,
            Variant::Fvp => m.latent_len(),
        };
        let mut store = ParamStore::new();
        let mut rng = stream_rng(cfg.train.seed, Stream::Init, 0);
        let text = variant.uses_text().then(|| {
            TextEncoder::declare(
                &mut store,
                &mut rng,
                vocab_size,
                m.max_tokens,
                m.d_u,
                m.text_depth,
            )
        });
        let tim = variant
            .uses_tim()
            .then(|| Tim::declare(&mut store, &mut rng, m.n_frames, m.d_u, m.d_t));
        let motion = MotionPredictor::declare(&mut store, &mut rng, m.latent_len(), step_dim);
        Ok(ModelAssembly {
            variant,
            store,
            text,
            tim,
            motion,
            step_dim,
        })
    }
}

/// Both discriminators in one store.
pub struct DiscAssembly<T: Scalar> {
    pub store: ParamStore<T>,
    pub d2: ImageDisc,
    pub d3: VideoDisc,
}

impl<T: Scalar> DiscAssembly<T> {
    pub fn declare(cfg: &Config) -> Self {
        let (h, w) = (cfg.dataset.height, cfg.dataset.width);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(cfg.train.seed, Stream::Init, 1);
        let d2 = ImageDisc::declare(&mut store, &mut rng, "d2", &cfg.model.disc2d_channels, h, w);
        let d3 = VideoDisc::declare(&mut store, &mut rng, "d3", &cfg.model.disc3d_channels, h, w);
        DiscAssembly { store, d2, d3 }
    }
}

/// One training batch: ground-truth frame tensors, captions, and the frozen
/// inversion of the first frame.
struct Batch<T: Scalar> {
    /// N tensors, each (B, 3, H, W), in frame order.
    frames: Vec<ArrayD<T>>,
    tokens: Vec<TokenizedCaption>,
    /// (B, L·d_w) codes of frame 1 under the frozen encoder.
    w1: ArrayD<T>,
}

/// Deterministic clip picks for one schedule tick: a per-epoch permutation of
/// the split, read off in batch-sized windows. Being a pure function of the
/// tick makes any batch recomputable when resuming.
fn batch_indices(seed: u64, pool: usize, batch: usize, tick: u64) -> Vec<usize> {
    let per_epoch = (pool / batch).max(1) as u64;
    let epoch = tick / per_epoch;
    let offset = (tick % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..pool).collect();
    perm.shuffle(&mut stream_rng(seed, Stream::DataOrder, epoch));
    (0..batch)
        .map(|k| perm[(offset * batch + k) % pool])
        .collect()
}

fn to_scalar_tensor<T: Scalar>(x: &ArrayD<f32>) -> ArrayD<T> {
    x.mapv(|v| T::from_f64(v as f64))
}

fn make_batch<T: Scalar>(
    cfg: &Config,
    data: &LoadedDataset,
    pre: &PretrainedGenerator<T>,
    train_pool: &[usize],
    picks: &[usize],
) -> Result<Batch<T>> {
    let n = cfg.model.n_frames;
    let mut per_clip: Vec<ArrayD<T>> = Vec::with_capacity(picks.len());
    let mut tokens = Vec::with_capacity(picks.len());
    for &k in picks {
        let clip = data.load_clip(train_pool[k])?;
        let sampled = sample_frames(&clip, n)?;
        per_clip.push(to_scalar_tensor(&clip_to_model_tensor(&sampled.frames)));
        tokens.push(tokenize(&clip.caption, &data.vocab, cfg.model.max_tokens)?);
    }
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let views: Vec<_> = per_clip
            .iter()
            .map(|c| c.index_axis(Axis(0), f).insert_axis(Axis(0)))
            .collect();
        frames.push(ndarray::concatenate(Axis(0), &views).unwrap());
    }
    let w1 = encode_frames(pre, &frames[0])?;
    Ok(Batch { frames, tokens, w1 })
}

/// Per-step Gaussian inputs for the noise baseline: one (B, d) draw per
/// predicted frame, all from the stream slot `index`.
fn nvp_noise<T: Scalar>(
    seed: u64,
    stream: Stream,
    index: u64,
    count: usize,
    b: usize,
    d: usize,
) -> Vec<ArrayD<T>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream_rng(seed, stream, index);
    (0..count)
        .map(|_| {
            let vals: Vec<T> = (0..b * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::from_f64(z)
                })
                .collect();
            ArrayD::from_shape_vec(IxDyn(&[b, d]), vals).unwrap()
        })
        .collect()
}

/// Latent codes [w_2 .. w_N] for one batch under the variant's step source.
#[allow(clippy::too_many_arguments)]
fn roll_latents<T: Scalar>(
    tape: &Tape<T>,
    asm: &ModelAssembly<T>,
    bind: &Binding,
    cfg: &Config,
    w1: Var,
    tokens: &[TokenizedCaption],
    noise_stream: Stream,
    noise_index: u64,
) -> Result<Vec<Var>> {
    let n = cfg.model.n_frames;
    let steps: StepEmbeddings = match asm.variant {
        Variant::Tvp => {
            let enc = asm.text.as_ref().unwrap().encode(tape, bind, tokens)?;
            asm.tim.as_ref().unwrap().infer_steps(tape, bind, &enc)?
        }
        Variant::WoRm => {
            let enc = asm.text.as_ref().unwrap().encode(tape, bind, tokens)?;
            asm.tim.as_ref().unwrap().fused_steps(tape, bind, &enc)?
        }
        Variant::WoSe => {
            let enc = asm.text.as_ref().unwrap().encode(tape, bind, tokens)?;
            StepEmbeddings {
                rows: vec![enc.u_cls; n - 1],
            }
        }
        Variant::Nvp => {
            let b = tape.shape(w1)[0];
            let draws = nvp_noise::<T>(
                cfg.train.seed,
                noise_stream,
                noise_index,
                n - 1,
                b,
                asm.step_dim,
            );
            StepEmbeddings {
                rows: draws.into_iter().map(|z| tape.constant(z)).collect(),
            }
        }
        Variant::Fvp => {
            // Feedback rollout: each step consumes the previous latent.
            let mut state = asm.motion.init_state(tape, bind, w1)?;
            let mut w = w1;
            let mut out = Vec::with_capacity(n - 1);
            for _ in 2..=n {
                state = asm.motion.step(tape, bind, w, state)?;
                w = asm.motion.accumulate(tape, w, state.h)?;
                out.push(w);
            }
            return Ok(out);
        }
    };
    asm.motion.rollout(tape, bind, w1, &steps)
}

/// Mean of already-scalar patch means: one scalar per discriminator pass.
fn average_scalars<T: Scalar>(tape: &Tape<T>, parts: &[Var]) -> Var {
    let w = 1.0 / parts.len() as f64;
    tape.weighted_sum_scalars(&parts.iter().map(|&p| (p, w)).collect::<Vec<_>>())
}

/// One forward pass: reconstructed and ground-truth frames, index 0 = frame 1.
struct Forward {
    /// x̂_1 .. x̂_N; x̂_1 is the frozen inversion's reconstruction.
    recon: Vec<Var>,
    /// x_1 .. x_N as tape constants.
    gt: Vec<Var>,
}

fn forward<T: Scalar>(
    tape: &Tape<T>,
    cfg: &Config,
    asm: &ModelAssembly<T>,
    model_bind: &Binding,
    pre: &PretrainedGenerator<T>,
    backbone_bind: &Binding,
    batch: &Batch<T>,
    tick: u64,
) -> Result<Forward> {
    let w1 = tape.constant(batch.w1.clone());
    let codes = roll_latents(
        tape,
        asm,
        model_bind,
        cfg,
        w1,
        &batch.tokens,
        Stream::NvpNoise,
        tick,
    )?;
    let mut recon = Vec::with_capacity(cfg.model.n_frames);
    recon.push(pre.gen.synthesize(tape, backbone_bind, w1)?);
    for &code in &codes {
        recon.push(pre.gen.synthesize(tape, backbone_bind, code)?);
    }
    let gt = batch
        .frames
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    Ok(Forward { recon, gt })
}

/// One training log record; `g_loss` is set on generator updates, the
/// discriminator losses on discriminator updates.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    /// Schedule tick (G and D updates both advance it).
    pub tick: u64,
    pub g_updates: u64,
    pub d_updates: u64,
    /// "g" or "d".
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_loss: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d2_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d3_loss: Option<f64>,
}

/// A trained (or resumed) model with its optimizer state and counters.
pub struct TrainedModel<T: Scalar> {
    pub assembly: ModelAssembly<T>,
    pub discs: DiscAssembly<T>,
    pub model_opt: AdamGroup<T>,
    pub disc_opt: AdamGroup<T>,
    pub g_updates: u64,
    pub d_updates: u64,
    pub ticks: u64,
}

fn clone_store<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for i in 0..store.len() {
        let (name, value) = store.by_index(i);
        out.declare(name, value.clone());
    }
    out
}

fn clone_opt<T: Scalar>(opt: &AdamGroup<T>) -> AdamGroup<T> {
    let states = opt
        .states()
        .iter()
        .map(|s| {
            let (m, v) = s.moments();
            AdamState::from_moments(m.clone(), v.clone())
        })
        .collect();
    AdamGroup::from_parts(states, opt.t())
}

#[allow(clippy::too_many_arguments)]
fn save_progress<T: Scalar>(
    path: &Path,
    cfg: &Config,
    pre: &PretrainedGenerator<T>,
    asm: &ModelAssembly<T>,
    discs: &DiscAssembly<T>,
    model_opt: &AdamGroup<T>,
    disc_opt: &AdamGroup<T>,
    counters: (u64, u64, u64),
) -> Result<()> {
    // Serialization wants owned state; desk-scale stores copy in microseconds.
    let state = CheckpointState {
        header: CheckpointHeader {
            config_digest: cfg.digest_hex(),
            variant: asm.variant.name().to_string(),
            g_updates: counters.0,
            d_updates: counters.1,
            ticks: counters.2,
            backbone_digest: pre.report.digest.clone(),
        },
        model_store: clone_store(&asm.store),
        model_opt: clone_opt(model_opt),
        disc_store: clone_store(&discs.store),
        disc_opt: clone_opt(disc_opt),
    };
    checkpoint::save_checkpoint(path, &state)
}

/// Train the configured variant against a frozen backbone.
///
/// `resume_from` continues an interrupted run trace-equivalently: the same
/// update sequence, batches, and noise as an uninterrupted run. When
/// `checkpoint_to` is set, the file is rewritten every
/// `train.checkpoint_every` generator updates and at the end. `on_record`
/// sees one record per update; returning `false` halts after that update
/// (the final checkpoint is still written).
pub fn train<T: Scalar>(
    cfg: &Config,
    data: &LoadedDataset,
    pre: &PretrainedGenerator<T>,
    resume_from: Option<&Path>,
    checkpoint_to: Option<&Path>,
    mut on_record: impl FnMut(&TrainRecord) -> bool,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    let train_pool = data.indices_for_split("train");
    if train_pool.is_empty() {
        return Err(Error::Validation("no training clips in dataset".into()));
    }
    let mut asm = ModelAssembly::<T>::declare(cfg, data.vocab.len())?;
    assert_disjoint(&pre.store, &asm.store)?;
    let mut discs = DiscAssembly::<T>::declare(cfg);

    let (mut model_opt, mut disc_opt, mut g_updates, mut d_updates, mut ticks) = match resume_from
    {
        Some(path) => {
            let st = checkpoint::load_checkpoint(
                path,
                cfg,
                std::mem::replace(&mut asm.store, ParamStore::new()),
                std::mem::replace(&mut discs.store, ParamStore::new()),
            )?;
            if st.header.backbone_digest != pre.report.digest {
                return Err(Error::Integrity(
                    "checkpoint was trained against a different frozen backbone".into(),
                ));
            }
            asm.store = st.model_store;
            discs.store = st.disc_store;
            (
                st.model_opt,
                st.disc_opt,
                st.header.g_updates,
                st.header.d_updates,
                st.header.ticks,
            )
        }
        None => (
            AdamGroup::new(&asm.store),
            AdamGroup::new(&discs.store),
            0,
            0,
            0,
        ),
    };

    let t = &cfg.train;
    let fx = pre.feature_extractor();
    let mut halted = false;
    while !halted && g_updates < t.steps as u64 {
        let picks = batch_indices(t.seed, train_pool.len(), t.batch, ticks);
        let batch = make_batch(cfg, data, pre, &train_pool, &picks)?;
        let mut save_due = false;
        let record = if ticks % 3 == 2 {
            let (d2v, d3v) =
                disc_update(cfg, &asm, &mut discs, &mut disc_opt, pre, &batch, ticks)?;
            d_updates += 1;
            TrainRecord {
                tick: ticks,
                g_updates,
                d_updates,
                kind: "d",
                g_loss: None,
                d2_loss: Some(d2v),
                d3_loss: Some(d3v),
            }
        } else {
            let breakdown = generator_update(
                cfg,
                &mut asm,
                &mut model_opt,
                &discs,
                pre,
                &fx,
                &batch,
                ticks,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} (generator update {}, tick {ticks}); aborting",
                    g_updates + 1
                )),
                other => other,
            })?;
            g_updates += 1;
            save_due = t.checkpoint_every > 0 && g_updates % t.checkpoint_every as u64 == 0;
            TrainRecord {
                tick: ticks,
                g_updates,
                d_updates,
                kind: "g",
                g_loss: Some(breakdown),
                d2_loss: None,
                d3_loss: None,
            }
        };
        halted = !on_record(&record);
        ticks += 1;
        if save_due {
            if let Some(path) = checkpoint_to {
                save_progress(
                    path,
                    cfg,
                    pre,
                    &asm,
                    &discs,
                    &model_opt,
                    &disc_opt,
                    (g_updates, d_updates, ticks),
                )?;
            }
        }
    }
    if let Some(path) = checkpoint_to {
        save_progress(
            path,
            cfg,
            pre,
            &asm,
            &discs,
            &model_opt,
            &disc_opt,
            (g_updates, d_updates, ticks),
        )?;
    }
    Ok(TrainedModel {
        assembly: asm,
        discs,
        model_opt,
        disc_opt,
        g_updates,
        d_updates,
        ticks,
    })
}

#[allow(clippy::too_many_arguments)]
fn generator_update<T: Scalar>(
    cfg: &Config,
    asm: &mut ModelAssembly<T>,
    model_opt: &mut AdamGroup<T>,
    discs: &DiscAssembly<T>,
    pre: &PretrainedGenerator<T>,
    fx: &FeatureExtractor<T>,
    batch: &Batch<T>,
    tick: u64,
) -> Result<LossBreakdown> {
    let t = &cfg.train;
    let n = cfg.model.n_frames;
    let tape = Tape::<T>::new();
    let model_bind = asm.store.bind(&tape, true);
    let backbone_bind = pre.store.bind(&tape, false);
    let disc_bind = discs.store.bind(&tape, false);
    let f = forward(&tape, cfg, asm, &model_bind, pre, &backbone_bind, batch, tick)?;

    // L_mse: per-element mean over predicted frames (optionally also the
    // inverted first frame).
    let mse_start = if t.mse_includes_first { 0 } else { 1 };
    let mse_terms: Vec<Var> = (mse_start..n)
        .map(|i| mse_loss(&tape, f.gt[i], f.recon[i]))
        .collect::<Result<_>>()?;
    let mse = average_scalars(&tape, &mse_terms);

    // L_perc: summed over predicted frames.
    let perc_terms: Vec<(Var, f64)> = (1..n)
        .map(|i| perceptual_loss(&tape, fx, f.gt[i], f.recon[i]).map(|v| (v, 1.0)))
        .collect::<Result<_>>()?;
    let perc = tape.weighted_sum_scalars(&perc_terms);

    // Adversarial terms: all patch/voxel scores of a discriminator fold into
    // one mean score, then a single log. Fake pairs are conditioned on the
    // reconstructed first frame; the candidate volume includes it.
    let img_scores: Vec<Var> = (1..n)
        .map(|i| {
            discs
                .d2
                .score_map(&tape, &disc_bind, f.recon[0], f.recon[i])
                .map(|m| tape.mean_all(m))
        })
        .collect::<Result<_>>()?;
    let s_img = average_scalars(&tape, &img_scores);
    let volume = tape.stack_time(&f.recon);
    let s_vid = tape.mean_all(
        discs
            .d3
            .score_volume(&tape, &disc_bind, f.recon[0], volume)?,
    );
    let (adv2d, adv3d) = adv_generator_losses(&tape, s_img, s_vid);

    let (total, breakdown) = total_generator_loss(&tape, mse, perc, adv2d, adv3d, &t.weights)?;
    let grads = tape.backward(total);
    model_opt.step(
        &mut asm.store,
        &model_bind,
        &grads,
        t.lr,
        t.beta1,
        t.beta2,
        1e-8,
    );
    Ok(breakdown)
}

fn disc_update<T: Scalar>(
    cfg: &Config,
    asm: &ModelAssembly<T>,
    discs: &mut DiscAssembly<T>,
    disc_opt: &mut AdamGroup<T>,
    pre: &PretrainedGenerator<T>,
    batch: &Batch<T>,
    tick: u64,
) -> Result<(f64, f64)> {
    let t = &cfg.train;
    let n = cfg.model.n_frames;
    let tape = Tape::<T>::new();
    // Model frozen: discriminator gradients must not leak into the rollout.
    let model_bind = asm.store.bind(&tape, false);
    let backbone_bind = pre.store.bind(&tape, false);
    let disc_bind = discs.store.bind(&tape, true);
    let f = forward(&tape, cfg, asm, &model_bind, pre, &backbone_bind, batch, tick)?;

    let fold_2d = |cond: Var, frames: &[Var]| -> Result<Var> {
        let scores: Vec<Var> = (1..n)
            .map(|i| {
                discs
                    .d2
                    .score_map(&tape, &disc_bind, cond, frames[i])
                    .map(|m| tape.mean_all(m))
            })
            .collect::<Result<_>>()?;
        Ok(average_scalars(&tape, &scores))
    };
    let s2_real = fold_2d(f.gt[0], &f.gt)?;
    let s2_fake = fold_2d(f.recon[0], &f.recon)?;
    let d2 = discriminator_loss(&tape, s2_real, s2_fake);

    let real_vol = tape.stack_time(&f.gt);
    let fake_vol = tape.stack_time(&f.recon);
    let s3_real = tape.mean_all(discs.d3.score_volume(&tape, &disc_bind, f.gt[0], real_vol)?);
    let s3_fake = tape.mean_all(
        discs
            .d3
            .score_volume(&tape, &disc_bind, f.recon[0], fake_vol)?,
    );
    let d3 = discriminator_loss(&tape, s3_real, s3_fake);

    let d2v = Scalar::to_f64(tape.scalar_value(d2));
    let d3v = Scalar::to_f64(tape.scalar_value(d3));
    if !d2v.is_finite() || !d3v.is_finite() {
        return Err(Error::Numeric(format!(
            "discriminator loss became non-finite at tick {tick} (d2 {d2v}, d3 {d3v}); aborting"
        )));
    }
    let loss = tape.add(d2, d3);
    let grads = tape.backward(loss);
    disc_opt.step(
        &mut discs.store,
        &disc_bind,
        &grads,
        t.lr,
        t.beta1,
        t.beta2,
        1e-8,
    );
    Ok((d2v, d3v))
}

/// Predict all frames of one ground-truth clip (already sampled to the model
/// horizon): frame 1 is the frozen inversion's reconstruction, the rest come
/// from the latent rollout. Deterministic; the noise baseline draws from the
/// evaluation stream slot `clip_index`.
pub fn predict_clip<T: Scalar>(
    cfg: &Config,
    pre: &PretrainedGenerator<T>,
    asm: &ModelAssembly<T>,
    vocab: &Vocabulary,
    clip: &VideoClip,
    clip_index: u64,
) -> Result<Array4<u8>> {
    let n = cfg.model.n_frames;
    if clip.len() != n {
        return Err(Error::Validation(format!(
            "clip has {} frames, model predicts {n}",
            clip.len()
        )));
    }
    let first = clip.frames.index_axis(Axis(0), 0).to_owned();
    predict_from_frame(cfg, pre, asm, vocab, &first, &clip.caption, clip_index)
}

/// Predict a clip from a lone first frame (H, W, 3) u8 and a caption — the
/// deployment entry point, where no ground-truth clip exists. Identical to
/// [`predict_clip`] on a clip's first frame.
pub fn predict_from_frame<T: Scalar>(
    cfg: &Config,
    pre: &PretrainedGenerator<T>,
    asm: &ModelAssembly<T>,
    vocab: &Vocabulary,
    frame: &ndarray::Array3<u8>,
    caption: &str,
    clip_index: u64,
) -> Result<Array4<u8>> {
    let n = cfg.model.n_frames;
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    if frame.shape() != [h, w, 3] {
        return Err(Error::Validation(format!(
            "first frame is {:?}, model expects ({h}, {w}, 3)",
            frame.shape()
        )));
    }
    let frames = frame.clone().insert_axis(Axis(0));
    let x1 = to_scalar_tensor::<T>(&clip_to_model_tensor(&frames));
    let w1_val = encode_frames(pre, &x1)?;
    let tokens = vec![tokenize(caption, vocab, cfg.model.max_tokens)?];

    let tape = Tape::<T>::new();
    let model_bind = asm.store.bind(&tape, false);
    let backbone_bind = pre.store.bind(&tape, false);
    let w1 = tape.constant(w1_val);
    let codes = roll_latents(
        &tape,
        asm,
        &model_bind,
        cfg,
        w1,
        &tokens,
        Stream::Eval,
        clip_index,
    )?;
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, 3, cfg.dataset.height, cfg.dataset.width]));
    let mut write_frame = |i: usize, v: Var| {
        let val = tape.value_clone(v);
        for (dst, src) in out
            .index_axis_mut(Axis(0), i)
            .iter_mut()
            .zip(val.index_axis(Axis(0), 0).iter())
        {
            *dst = Scalar::to_f64(*src) as f32;
        }
    };
    write_frame(0, pre.gen.synthesize(&tape, &backbone_bind, w1)?);
    for (k, &code) in codes.iter().enumerate() {
        write_frame(k + 1, pre.gen.synthesize(&tape, &backbone_bind, code)?);
    }
    crate::metrics::model_tensor_to_frames(&out)
}
