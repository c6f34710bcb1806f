//! Finite-difference suites for every trainable block and loss term. Each
//! function builds a small 64-bit instance, jitters it off its symmetric
//! init, runs the probe loop, and returns the worst relative error seen.

use super::{check_gradients, jitter_store};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use tvp_core::autodiff::{Tape, Var};
use tvp_core::config::LossWeights;
use tvp_core::dataset::{build_vocabulary, tokenize};
use tvp_core::generator::modulate;
use tvp_core::motion::MotionPredictor;
use tvp_core::nn::{LinearP, ParamStore};
use tvp_core::objectives::{
    adv_generator_losses, discriminator_loss, mse_loss, perceptual_loss, total_generator_loss,
    FeatureExtractor,
};
use tvp_core::rng::{stream_rng, Stream};
use tvp_core::textenc::TextEncoder;
use tvp_core::tim::{StepEmbeddings, Tim};

pub const PROBES: usize = 24;

fn sum_means_of_squares(tape: &Tape<f64>, rows: &[Var]) -> Var {
    rows.iter()
        .map(|&r| tape.mean_all(tape.sqr(r)))
        .reduce(|a, b| tape.add(a, b))
        .expect("at least one row")
}

fn random_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = stream_rng(seed, Stream::Init, 777);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

/// Text encoder into TIM: attention, fusion, and refinement in one graph,
/// with a padded caption so the masked-softmax zeros are exercised.
pub fn tim_suite() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream_rng(7, Stream::Init, 1);
    let vocab =
        build_vocabulary(["three moves up then down", "seven moves left then right"]).unwrap();
    let text = TextEncoder::declare(&mut store, &mut rng, vocab.len(), 5, 4, 1);
    let tim = Tim::declare(&mut store, &mut rng, 4, 4, 6);
    jitter_store(&mut store, 11, 0.05);
    let toks = vec![
        tokenize("three moves up then down", &vocab, 5).unwrap(),
        tokenize("seven moves left", &vocab, 5).unwrap(),
    ];
    check_gradients(&mut store, PROBES, 1, |tape, bind| {
        let enc = text.encode(tape, bind, &toks).unwrap();
        let steps = tim.infer_steps(tape, bind, &enc).unwrap();
        sum_means_of_squares(tape, &steps.rows)
    })
}

/// Both motion cells through a full rollout: the init cell seeds the state
/// from w_1 and the roll cell produces every residual.
pub fn lstm_suite() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream_rng(8, Stream::Init, 2);
    let motion = MotionPredictor::declare(&mut store, &mut rng, 6, 3);
    jitter_store(&mut store, 12, 0.05);
    let w1 = random_array(&[2, 6], 21);
    let steps: Vec<ArrayD<f64>> = (0..3).map(|k| random_array(&[2, 3], 30 + k)).collect();
    check_gradients(&mut store, PROBES, 2, |tape, bind| {
        let w1v = tape.constant(w1.clone());
        let rows = steps.iter().map(|a| tape.constant(a.clone())).collect();
        let ws = motion
            .rollout(tape, bind, w1v, &StepEmbeddings { rows })
            .unwrap();
        sum_means_of_squares(tape, &ws)
    })
}

/// The AdaIN block: style affine, instance norm, and the modulated output,
/// with the feature map and style row as probed parameters too.
pub fn adain_suite() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream_rng(9, Stream::Init, 3);
    let affine = LinearP::declare(&mut store, &mut rng, "affine", 4, 6, true);
    let x = store.declare("x", random_array(&[2, 3, 5, 5], 41));
    let w_row = store.declare("w_row", random_array(&[2, 4], 42));
    jitter_store(&mut store, 13, 0.05);
    check_gradients(&mut store, PROBES, 3, |tape, bind| {
        let y = modulate(tape, bind, &affine, bind.var(x), bind.var(w_row)).unwrap();
        tape.mean_all(tape.sqr(y))
    })
}

/// Reconstruction and perceptual terms, with both the target and the
/// prediction trainable.
pub fn reconstruction_losses_suite() -> f64 {
    let fx = FeatureExtractor::<f64>::identity(3);
    let mut store = ParamStore::<f64>::new();
    let x = store.declare("x", random_array(&[2, 3, 6, 6], 51));
    let x_hat = store.declare("x_hat", random_array(&[2, 3, 6, 6], 52));
    check_gradients(&mut store, PROBES, 4, |tape, bind| {
        let mse = mse_loss(tape, bind.var(x), bind.var(x_hat)).unwrap();
        let perc = perceptual_loss(tape, &fx, bind.var(x), bind.var(x_hat)).unwrap();
        tape.add(mse, perc)
    })
}

/// Adversarial terms on both sides: the generator's two −log s losses and
/// one discriminator loss, scores squashed through a sigmoid so every
/// evaluation stays inside the clamp interval.
pub fn adversarial_losses_suite() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let img = store.declare("img", random_array(&[3], 61));
    let vid = store.declare("vid", random_array(&[3], 62));
    let real = store.declare("real", random_array(&[3], 63));
    let fake = store.declare("fake", random_array(&[3], 64));
    check_gradients(&mut store, PROBES, 5, |tape, bind| {
        let score = |v| tape.sigmoid(tape.mean_all(v));
        let (g2d, g3d) = adv_generator_losses(tape, score(bind.var(img)), score(bind.var(vid)));
        let d = discriminator_loss(tape, score(bind.var(real)), score(bind.var(fake)));
        tape.add(tape.add(g2d, g3d), d)
    })
}

/// The weighted total that training actually descends.
pub fn total_loss_suite() -> f64 {
    let fx = FeatureExtractor::<f64>::identity(3);
    let weights = LossWeights::default();
    let mut store = ParamStore::<f64>::new();
    let x = store.declare("x", random_array(&[2, 3, 6, 6], 71));
    let x_hat = store.declare("x_hat", random_array(&[2, 3, 6, 6], 72));
    let img = store.declare("img", random_array(&[3], 73));
    let vid = store.declare("vid", random_array(&[3], 74));
    check_gradients(&mut store, PROBES, 6, |tape, bind| {
        let mse = mse_loss(tape, bind.var(x), bind.var(x_hat)).unwrap();
        let perc = perceptual_loss(tape, &fx, bind.var(x), bind.var(x_hat)).unwrap();
        let score = |v| tape.sigmoid(tape.mean_all(v));
        let (g2d, g3d) = adv_generator_losses(tape, score(bind.var(img)), score(bind.var(vid)));
        let (total, _) = total_generator_loss(tape, mse, perc, g2d, g3d, &weights).unwrap();
        total
    })
}
