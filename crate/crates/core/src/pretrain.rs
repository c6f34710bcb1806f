//! Generator pretraining: before any motion model is trained, the generator
//! and its inversion encoder are fitted jointly as an autoencoder on single
//! frames, so that real frames have faithful latent codes and the latent
//! space is smooth enough for residual rollouts.
//!
//! The objective per step is reconstruction MSE plus a stop-gradient
//! self-perceptual term (features from a frozen snapshot of the current
//! encoder) plus a small adversarial term from an image discriminator
//! conditioned on the target frame — reals are (x ⊕ x), fakes (x ⊕ x̂). The
//! discriminator trains 1:1 with the autoencoder. After pretraining both
//! networks are frozen: downstream training only reads them, and the store
//! digest in the report pins exactly which weights every result used.

use crate::autodiff::{Scalar, Tape};
use crate::config::Config;
use crate::dataset::{clip_to_model_tensor, sample_frames, LoadedDataset};
use crate::disc::ImageDisc;
use crate::error::{Error, Result};
use crate::generator::{Encoder, Generator};
use crate::nn::{AdamGroup, ParamStore};
use crate::objectives::{discriminator_loss, mse_loss, neg_log, perceptual_loss, FeatureExtractor};
use crate::rng::{stream_rng, Stream};
use ndarray::{ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Outcome summary of one pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainReport {
    /// Autoencoder updates actually run (early stop on convergence).
    pub steps: usize,
    /// Reconstruction MSE over the held-out frames, in [−1,1] pixel units.
    pub final_val_mse: f64,
    /// Whether `final_val_mse` reached the configured target. A
    /// non-converged backbone is still returned and usable; callers should
    /// surface the flag rather than discard the run.
    pub converged: bool,
    /// Digest of the frozen generator+encoder store.
    pub digest: String,
}

/// A frozen generator/encoder pair plus the report that produced it.
pub struct PretrainedGenerator<T: Scalar> {
    pub store: ParamStore<T>,
    pub gen: Generator,
    pub enc: Encoder,
    pub report: PretrainReport,
}

impl<T: Scalar> PretrainedGenerator<T> {
    /// Declare the generator and encoder into a fresh store with the
    /// deterministic init stream for `cfg`. Declaration order is the
    /// canonical parameter order for artifacts.
    pub fn declare(cfg: &Config) -> (ParamStore<T>, Generator, Encoder) {
        let m = &cfg.model;
        let (h, w) = (cfg.dataset.height, cfg.dataset.width);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(cfg.pretrain.seed, Stream::Init, 0);
        let gen = Generator::declare(&mut store, &mut rng, &m.gen_channels, m.d_w, h, w);
        let enc = Encoder::declare(&mut store, &mut rng, &m.enc_channels, m.latent_len(), h, w);
        (store, gen, enc)
    }

    /// Perceptual feature extractor snapshotting the current encoder convs.
    pub fn feature_extractor(&self) -> FeatureExtractor<T> {
        FeatureExtractor::from_encoder(&self.enc, &self.store)
    }
}

/// Stack of single frames used as the autoencoder's data pool.
fn frame_pool<T: Scalar>(
    data: &LoadedDataset,
    split: &str,
    n_frames: usize,
) -> Result<Vec<ArrayD<T>>> {
    let mut pool = Vec::new();
    for idx in data.indices_for_split(split) {
        let clip = data.load_clip(idx)?;
        let sampled = sample_frames(&clip, n_frames)?;
        let tensor = clip_to_model_tensor(&sampled.frames);
        for t in 0..n_frames {
            let frame = tensor.index_axis(Axis(0), t).to_owned();
            let shaped = frame.insert_axis(Axis(0)); // (1, 3, H, W)
            pool.push(shaped.mapv(|v| T::from_f64(v as f64)));
        }
    }
    Ok(pool)
}

fn batch_of<T: Scalar>(pool: &[ArrayD<T>], indices: &[usize]) -> ArrayD<T> {
    let views: Vec<_> = indices.iter().map(|&i| pool[i].view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Mean reconstruction MSE of the frozen autoencoder over a frame pool.
fn pool_mse<T: Scalar>(
    store: &ParamStore<T>,
    gen: &Generator,
    enc: &Encoder,
    pool: &[ArrayD<T>],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..pool.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let tape = Tape::<T>::new();
        let bind = store.bind(&tape, false);
        let x = tape.constant(batch_of(pool, chunk));
        let code = enc.forward(&tape, &bind, x)?;
        let recon = gen.synthesize(&tape, &bind, code)?;
        let mse = mse_loss(&tape, x, recon)?;
        total += Scalar::to_f64(tape.scalar_value(mse)) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Fit generator + encoder as an adversarially sharpened autoencoder.
/// Deterministic in the config; early-stops once the held-out MSE reaches
/// `pretrain.target_mse` (checked every 50 steps).
pub fn pretrain_generator<T: Scalar>(
    cfg: &Config,
    data: &LoadedDataset,
) -> Result<PretrainedGenerator<T>> {
    cfg.validate()?;
    let meta = &data.manifest.meta;
    if meta.height != cfg.dataset.height || meta.width != cfg.dataset.width {
        return Err(Error::Config(format!(
            "dataset on disk is {}×{}, config says {}×{}",
            meta.height, meta.width, cfg.dataset.height, cfg.dataset.width
        )));
    }
    let p = &cfg.pretrain;
    let train_pool = frame_pool::<T>(data, "train", cfg.model.n_frames)?;
    if train_pool.is_empty() {
        return Err(Error::Validation("no training clips in dataset".into()));
    }
    let val_pool = frame_pool::<T>(data, "val", cfg.model.n_frames)?;
    let held_out = if val_pool.is_empty() { &train_pool } else { &val_pool };

    let (mut store, gen, enc) = PretrainedGenerator::<T>::declare(cfg);
    let mut disc_store = ParamStore::<T>::new();
    let mut disc_rng = stream_rng(p.seed, Stream::Init, 1);
    let disc = ImageDisc::declare(
        &mut disc_store,
        &mut disc_rng,
        "pre.disc",
        &cfg.model.disc2d_channels,
        cfg.dataset.height,
        cfg.dataset.width,
    );

    let mut ae_opt = AdamGroup::new(&store);
    let mut d_opt = AdamGroup::new(&disc_store);
    let (b1, b2, eps) = (0.5, 0.999, 1e-8);

    let mut steps_run = 0usize;
    let mut val_mse = f64::INFINITY;
    let mut converged = false;
    for step in 0..p.steps {
        let mut order = stream_rng(p.seed, Stream::DataOrder, step as u64);
        let idx: Vec<usize> = (0..p.batch)
            .map(|_| order.gen_range(0..train_pool.len()))
            .collect();
        let x_val = batch_of(&train_pool, &idx);

        // Autoencoder update: recon + stop-gradient perceptual + adversarial.
        let fx = FeatureExtractor::from_encoder(&enc, &store);
        {
            let tape = Tape::<T>::new();
            let ae_bind = store.bind(&tape, true);
            let d_bind = disc_store.bind(&tape, false);
            let x = tape.constant(x_val.clone());
            let code = enc.forward(&tape, &ae_bind, x)?;
            let recon = gen.synthesize(&tape, &ae_bind, code)?;
            let mse = mse_loss(&tape, x, recon)?;
            let perc = perceptual_loss(&tape, &fx, x, recon)?;
            let fake = tape.mean_all(disc.score_map(&tape, &d_bind, x, recon)?);
            let adv = neg_log(&tape, fake);
            // The code penalty keeps the W+ space compact: per-frame code
            // deltas must stay within the rollout cell's bounded step.
            let code_l2 = tape.mean_all(tape.sqr(code));
            let loss = tape.weighted_sum_scalars(&[
                (mse, 1.0),
                (perc, p.perc_weight),
                (adv, p.adv_weight),
                (code_l2, p.code_weight),
            ]);
            let total = Scalar::to_f64(tape.scalar_value(loss));
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining loss became {total} at step {step}"
                )));
            }
            let grads = tape.backward(loss);
            ae_opt.step(&mut store, &ae_bind, &grads, p.lr, b1, b2, eps);
        }

        // Discriminator update on the frozen autoencoder's output.
        {
            let tape = Tape::<T>::new();
            let ae_bind = store.bind(&tape, false);
            let d_bind = disc_store.bind(&tape, true);
            let x = tape.constant(x_val);
            let code = enc.forward(&tape, &ae_bind, x)?;
            let recon = gen.synthesize(&tape, &ae_bind, code)?;
            let real = tape.mean_all(disc.score_map(&tape, &d_bind, x, x)?);
            let fake = tape.mean_all(disc.score_map(&tape, &d_bind, x, recon)?);
            let d_loss = discriminator_loss(&tape, real, fake);
            let grads = tape.backward(d_loss);
            d_opt.step(&mut disc_store, &d_bind, &grads, p.lr, b1, b2, eps);
        }

        steps_run = step + 1;
        if steps_run % 50 == 0 || steps_run == p.steps {
            val_mse = pool_mse(&store, &gen, &enc, held_out, p.batch)?;
            if val_mse <= p.target_mse {
                converged = true;
                break;
            }
        }
    }
    if !val_mse.is_finite() {
        val_mse = pool_mse(&store, &gen, &enc, held_out, p.batch)?;
        converged = val_mse <= p.target_mse;
    }
    store.validate_finite()?;
    let digest = store.digest_hex();
    Ok(PretrainedGenerator {
        store,
        gen,
        enc,
        report: PretrainReport {
            steps: steps_run,
            final_val_mse: val_mse,
            converged,
            digest,
        },
    })
}

/// Guard for the freeze contract: errors if any frozen backbone parameter
/// was somehow registered in a trainable store.
pub fn assert_disjoint<T: Scalar>(frozen: &ParamStore<T>, trainable: &ParamStore<T>) -> Result<()> {
    for name in frozen.names() {
        if trainable.id_by_name(name).is_some() {
            return Err(Error::Config(format!(
                "frozen parameter {name:?} is registered with the optimizer"
            )));
        }
    }
    Ok(())
}

/// Convenience: invert one batch of frames with the frozen encoder.
pub fn encode_frames<T: Scalar>(
    pre: &PretrainedGenerator<T>,
    frames: &ArrayD<T>,
) -> Result<ArrayD<T>> {
    let tape = Tape::<T>::new();
    let bind = pre.store.bind(&tape, false);
    let x = tape.constant(frames.clone());
    let code = pre.enc.forward(&tape, &bind, x)?;
    Ok(tape.value_clone(code))
}
