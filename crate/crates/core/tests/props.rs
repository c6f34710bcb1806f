//! Property tests for the library's structural invariants: attention
//! simplexes under arbitrary masks, latent telescoping, tokenizer and
//! frame-sampling contracts, trajectory bounds, and metric ranges.

mod common;

use common::jitter_store;
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::Rng;
use tvp_core::autodiff::Tape;
use tvp_core::dataset::{
    build_vocabulary, sample_indices, tokenize, trajectory_offsets, PatternId, CLS_ID, PAD_ID,
};
use tvp_core::metrics::{frame_mse, frame_ssim, psnr_from_mse, PSNR_CAP_DB};
use tvp_core::motion::MotionPredictor;
use tvp_core::nn::ParamStore;
use tvp_core::rng::{stream_rng, Stream};
use tvp_core::textenc::{EncodedText, WordEmbeddings};
use tvp_core::tim::Tim;

/// Rectangular (B, M) masks with at least one live position per row.
fn masks(b: impl Strategy<Value = usize>, m: impl Strategy<Value = usize>)
    -> impl Strategy<Value = Vec<Vec<bool>>> {
    (b, m).prop_flat_map(|(b, m)| {
        prop::collection::vec((prop::collection::vec(any::<bool>(), m), 0..m), b).prop_map(
            |rows| {
                rows.into_iter()
                    .map(|(mut bits, live)| {
                        bits[live] = true;
                        bits
                    })
                    .collect()
            },
        )
    })
}

fn embeddings(mask_rows: &[Vec<bool>], d_u: usize, seed: u64) -> Vec<WordEmbeddings> {
    let mut rng = stream_rng(seed, Stream::Init, 99);
    mask_rows
        .iter()
        .map(|mask| WordEmbeddings {
            u: Array2::from_shape_simple_fn((mask.len(), d_u), || rng.gen_range(-2.0..2.0f32)),
            u_cls: Array1::from_shape_simple_fn(d_u, || rng.gen_range(-2.0..2.0f32)),
            mask: mask.clone(),
        })
        .collect()
}

fn jittered_tim(n_frames: usize, d_u: usize, d_t: usize, seed: u64) -> (ParamStore<f32>, Tim) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = stream_rng(seed, Stream::Init, 17);
    let tim = Tim::declare(&mut store, &mut rng, n_frames, d_u, d_t);
    jitter_store(&mut store, seed ^ 0xa5a5, 0.2);
    (store, tim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_form_a_simplex_over_unmasked_positions(
        mask_rows in masks(1usize..4, 2usize..7),
        n_frames in 2usize..6,
        seed in any::<u64>(),
    ) {
        let d_u = 3;
        let (store, tim) = jittered_tim(n_frames, d_u, 5, seed);
        let tape = Tape::<f32>::new();
        let bind = store.bind(&tape, false);
        let enc = EncodedText::from_values(&tape, &embeddings(&mask_rows, d_u, seed)).unwrap();
        for i in 2..=n_frames {
            let alpha = tape.value_clone(tim.step_attention(&tape, &bind, &enc, i).unwrap());
            for (bi, row) in mask_rows.iter().enumerate() {
                let mut sum = 0.0f64;
                for (j, &live) in row.iter().enumerate() {
                    let a = alpha[[bi, j]] as f64;
                    prop_assert!(a >= 0.0);
                    if !live {
                        prop_assert_eq!(a, 0.0);
                    }
                    sum += a;
                }
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_positions_never_influence_step_embeddings(
        mask_rows in masks(1usize..3, 2usize..6),
        seed in any::<u64>(),
        garbage in -50.0f32..50.0,
    ) {
        let (n_frames, d_u) = (4, 3);
        let (store, tim) = jittered_tim(n_frames, d_u, 5, seed);
        let rows = embeddings(&mask_rows, d_u, seed);
        let mut poked = rows.clone();
        for row in &mut poked {
            for (j, &live) in row.mask.iter().enumerate() {
                if !live {
                    row.u.row_mut(j).fill(garbage);
                }
            }
        }
        let run = |rows: &[WordEmbeddings]| -> Vec<ArrayD<f32>> {
            let tape = Tape::<f32>::new();
            let bind = store.bind(&tape, false);
            let enc = EncodedText::from_values(&tape, rows).unwrap();
            let steps = tim.infer_steps(&tape, &bind, &enc).unwrap();
            steps.rows.iter().map(|&r| tape.value_clone(r)).collect()
        };
        prop_assert_eq!(run(&rows), run(&poked));
    }

    #[test]
    fn attention_is_invariant_to_a_constant_logit_shift(
        mask_rows in masks(1usize..3, 2usize..6),
        shift in -5.0f32..5.0,
        seed in any::<u64>(),
    ) {
        let (b, m) = (mask_rows.len(), mask_rows[0].len());
        let mut rng = stream_rng(seed, Stream::Init, 5);
        let logits = ArrayD::from_shape_simple_fn(IxDyn(&[b, m]), || rng.gen_range(-3.0..3.0f32));
        let mask = Array2::from_shape_fn((b, m), |(i, j)| mask_rows[i][j]);
        let tape = Tape::<f32>::new();
        let base = tape.masked_softmax(tape.constant(logits.clone()), &mask);
        let shifted =
            tape.masked_softmax(tape.add_scalar(tape.constant(logits), shift), &mask);
        let (base, shifted) = (tape.value_clone(base), tape.value_clone(shifted));
        for (a, b) in base.iter().zip(shifted.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rollouts_telescope_and_residuals_stay_bounded(
        batch in 1usize..3,
        latent in 2usize..8,
        step_dim in 1usize..4,
        n_steps in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream_rng(seed, Stream::Init, 23);
        let motion = MotionPredictor::declare(&mut store, &mut rng, latent, step_dim);
        let mut content = stream_rng(seed, Stream::Init, 24);
        let w1 = ArrayD::from_shape_simple_fn(IxDyn(&[batch, latent]), || {
            content.gen_range(-1.0..1.0f32)
        });
        let steps: Vec<ArrayD<f32>> = (0..n_steps)
            .map(|_| {
                ArrayD::from_shape_simple_fn(IxDyn(&[batch, step_dim]), || {
                    content.gen_range(-1.0..1.0f32)
                })
            })
            .collect();

        let tape = Tape::<f32>::new();
        let bind = store.bind(&tape, false);
        let w1v = tape.constant(w1.clone());
        let rows = steps.iter().map(|a| tape.constant(a.clone())).collect();
        let ws = motion
            .rollout(&tape, &bind, w1v, &tvp_core::tim::StepEmbeddings { rows })
            .unwrap();

        // Re-run the cells by hand to harvest the residuals, then check the
        // telescoped sum against the rollout's final latent.
        let step_vars: Vec<_> = steps.iter().map(|a| tape.constant(a.clone())).collect();
        let mut state = motion.init_state(&tape, &bind, w1v).unwrap();
        let mut h_sum = ArrayD::<f32>::zeros(IxDyn(&[batch, latent]));
        for &t_n in &step_vars {
            state = motion.step(&tape, &bind, t_n, state).unwrap();
            let h = tape.value_clone(state.h);
            for &v in h.iter() {
                prop_assert!(v > -1.0 && v < 1.0);
            }
            h_sum += &h;
        }
        let w_last = tape.value_clone(*ws.last().unwrap());
        let telescoped = &w1 + &h_sum;
        for (a, b) in w_last.iter().zip(telescoped.iter()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zeroed_motion_parameters_reproduce_the_first_latent_exactly(
        batch in 1usize..3,
        latent in 2usize..8,
        n_steps in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream_rng(seed, Stream::Init, 29);
        let motion = MotionPredictor::declare(&mut store, &mut rng, latent, 3);
        for i in 0..store.len() {
            store.by_index_mut(i).fill(0.0);
        }
        let mut content = stream_rng(seed, Stream::Init, 30);
        let w1 = ArrayD::from_shape_simple_fn(IxDyn(&[batch, latent]), || {
            content.gen_range(-1.0..1.0f32)
        });
        let tape = Tape::<f32>::new();
        let bind = store.bind(&tape, false);
        let w1v = tape.constant(w1.clone());
        let rows = (0..n_steps)
            .map(|_| {
                tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[batch, 3]), || {
                    content.gen_range(-1.0..1.0f32)
                }))
            })
            .collect();
        let ws = motion
            .rollout(&tape, &bind, w1v, &tvp_core::tim::StepEmbeddings { rows })
            .unwrap();
        for w in ws {
            prop_assert_eq!(tape.value_clone(w), w1.clone());
        }
    }

    #[test]
    fn tokenize_pads_to_length_m_with_a_prefix_mask(
        words in prop::collection::vec("[a-z]{1,6}", 1..10),
        m in 2usize..12,
    ) {
        let caption = words.join(" ");
        let vocab = build_vocabulary([caption.as_str()]).unwrap();
        let t = tokenize(&caption, &vocab, m).unwrap();
        prop_assert_eq!(t.ids.len(), m);
        prop_assert_eq!(t.mask.len(), m);
        prop_assert_eq!(t.ids[0], CLS_ID);
        prop_assert_eq!(t.original_length, words.len() + 1);
        let live = t.original_length.min(m);
        for j in 0..m {
            prop_assert_eq!(t.mask[j], j < live);
            if j >= live {
                prop_assert_eq!(t.ids[j], PAD_ID);
            }
        }
    }

    #[test]
    fn sampled_frame_indices_are_strictly_increasing_with_pinned_endpoints(
        t in 2usize..60,
        frac in 0.0f64..1.0,
    ) {
        let n = 2 + ((t - 2) as f64 * frac) as usize;
        let idx = sample_indices(t, n).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(*idx.last().unwrap(), t - 1);
        for pair in idx.windows(2) {
            prop_assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn trajectories_return_to_start_and_respect_the_amplitude(
        pattern in 0usize..4,
        a in 1u32..8,
        t in 3usize..40,
    ) {
        let id = PatternId::ALL[pattern];
        let offs = trajectory_offsets(id, a, t);
        prop_assert_eq!(offs.len(), t);
        prop_assert_eq!(offs[0], (0, 0));
        prop_assert_eq!(offs[t - 1], (0, 0));
        for &(dy, dx) in &offs {
            prop_assert!(dy.unsigned_abs() <= a as u64 && dx.unsigned_abs() <= a as u64);
            match id {
                PatternId::UpThenDown => prop_assert!(dx == 0 && dy <= 0),
                PatternId::DownThenUp => prop_assert!(dx == 0 && dy >= 0),
                PatternId::LeftThenRight => prop_assert!(dy == 0 && dx <= 0),
                PatternId::RightThenLeft => prop_assert!(dy == 0 && dx >= 0),
            }
        }
    }

    #[test]
    fn psnr_decreases_in_mse_and_respects_the_cap(
        mse_a in 0.0f64..70000.0,
        mse_b in 0.0f64..70000.0,
    ) {
        let (lo, hi) = if mse_a <= mse_b { (mse_a, mse_b) } else { (mse_b, mse_a) };
        let (p_lo, p_hi) = (psnr_from_mse(lo), psnr_from_mse(hi));
        prop_assert!(p_lo >= p_hi);
        prop_assert!(p_lo <= PSNR_CAP_DB);
        // Worst case in range: mse 70000 is just past 255², a little below 0 dB.
        prop_assert!(p_hi >= 10.0 * (65025.0f64 / 70000.0).log10() - 1e-9);
    }

    #[test]
    fn ssim_is_one_on_identical_frames_and_bounded_in_general(
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, Stream::Init, 31);
        let a = Array3::from_shape_simple_fn((12, 12, 3), || rng.gen_range(0..=255u8));
        let b = Array3::from_shape_simple_fn((12, 12, 3), || rng.gen_range(0..=255u8));
        prop_assert!((frame_ssim(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        let s = frame_ssim(a.view(), b.view()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(frame_mse(a.view(), b.view()).unwrap() >= 0.0);
    }
}
