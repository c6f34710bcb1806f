//! Text inference module: per-step attention over word embeddings, primary
//! fusion, and CLS-refinement producing step-wise inference embeddings
//! t_2..t_N.
//!
//! Step i owns a trainable d_u-vector whose dot product with each word
//! embedding gives that word's attention logit; logits are softmax-normalized
//! over the caption's real tokens (padding masked to −∞), the words are
//! averaged under those weights into a fused vector f_i, and a 2-layer ReLU
//! MLP refines [f_i, u_cls] into t_i. Steps share no state, so all N−1
//! embeddings are independent functions of the caption.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, LinearP, ParamStore, PId};
use crate::textenc::EncodedText;
use rand_chacha::ChaCha12Rng;

/// Parameter layout of the text inference module.
pub struct Tim {
    /// Horizon N: steps run i = 2..=N.
    pub n_frames: usize,
    pub d_u: usize,
    pub d_t: usize,
    /// (N−1, d_u); row i−2 holds step i's attention weights. Zero-initialized
    /// so training starts from uniform attention.
    step_w: PId,
    p1: LinearP,
    p2: LinearP,
}

/// Step embeddings on a tape: rows[k] is t_{k+2} with shape (B, d_t).
pub struct StepEmbeddings {
    pub rows: Vec<Var>,
}

impl Tim {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        n_frames: usize,
        d_u: usize,
        d_t: usize,
    ) -> Self {
        assert!(n_frames >= 2, "need at least one predicted frame");
        let step_w = store.declare(
            "tim.step_w",
            crate::nn::zeros_init(&[n_frames - 1, d_u]),
        );
        let p1 = LinearP::declare(store, rng, "tim.p1", 2 * d_u, d_t, true);
        let p2 = LinearP::declare(store, rng, "tim.p2", d_t, d_t, true);
        Tim {
            n_frames,
            d_u,
            d_t,
            step_w,
            p1,
            p2,
        }
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i < 2 || i > self.n_frames {
            return Err(Error::Validation(format!(
                "step index {i} outside 2..={}",
                self.n_frames
            )));
        }
        Ok(())
    }

    fn check_mask(enc: &EncodedText) -> Result<()> {
        for (b, row) in enc.mask.outer_iter().enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::Validation(format!(
                    "caption {b} has no unmasked positions"
                )));
            }
        }
        Ok(())
    }

    /// Attention weights of step `i` over the caption words: (B, M), each row
    /// on the simplex over masked-in positions, exact zeros elsewhere.
    pub fn step_attention<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        enc: &EncodedText,
        i: usize,
    ) -> Result<Var> {
        self.check_step(i)?;
        Self::check_mask(enc)?;
        let (b, m) = (enc.mask.nrows(), enc.mask.ncols());
        let u2 = tape.reshape(enc.u, &[b * m, self.d_u]);
        let w_i = tape.narrow(bind.var(self.step_w), 0, i - 2, 1);
        let logits = tape.reshape(tape.linear(u2, w_i, None), &[b, m]);
        Ok(tape.masked_softmax(logits, &enc.mask))
    }

    /// Primary fusion f_i = Σ_j α_{i,j} u_j: u (B, M, d_u) under alpha (B, M).
    pub fn fuse<T: Scalar>(&self, tape: &Tape<T>, u: Var, alpha: Var) -> Result<Var> {
        let su = tape.shape(u);
        let sa = tape.shape(alpha);
        if su.len() != 3 || sa.len() != 2 || su[0] != sa[0] || su[1] != sa[1] {
            return Err(Error::Validation(format!(
                "fuse shape mismatch: u {su:?} vs alpha {sa:?}"
            )));
        }
        Ok(tape.weighted_sum_rows(u, alpha))
    }

    /// Refinement t_i = P([f_i, u_cls]): two affine layers with ReLU between.
    pub fn refine<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        f: Var,
        u_cls: Var,
    ) -> Result<Var> {
        let (sf, sc) = (tape.shape(f), tape.shape(u_cls));
        if sf != sc || sf.len() != 2 || sf[1] != self.d_u {
            return Err(Error::Validation(format!(
                "refine expects two (B, {}) inputs, got {sf:?} and {sc:?}",
                self.d_u
            )));
        }
        let cat = tape.concat(&[f, u_cls], 1);
        let hidden = tape.relu(self.p1.forward(tape, bind, cat));
        Ok(self.p2.forward(tape, bind, hidden))
    }

    /// All step embeddings t_2..t_N for a batch of captions.
    pub fn infer_steps<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        enc: &EncodedText,
    ) -> Result<StepEmbeddings> {
        let mut rows = Vec::with_capacity(self.n_frames - 1);
        for i in 2..=self.n_frames {
            let alpha = self.step_attention(tape, bind, enc, i)?;
            let f = self.fuse(tape, enc.u, alpha)?;
            rows.push(self.refine(tape, bind, f, enc.u_cls)?);
        }
        Ok(StepEmbeddings { rows })
    }

    /// Fused vectors f_2..f_N without refinement (the wo_rm ablation).
    pub fn fused_steps<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        enc: &EncodedText,
    ) -> Result<StepEmbeddings> {
        let mut rows = Vec::with_capacity(self.n_frames - 1);
        for i in 2..=self.n_frames {
            let alpha = self.step_attention(tape, bind, enc, i)?;
            rows.push(self.fuse(tape, enc.u, alpha)?);
        }
        Ok(StepEmbeddings { rows })
    }

    pub fn step_w_id(&self) -> PId {
        self.step_w
    }

    pub fn mlp_ids(&self) -> (LinearP, LinearP) {
        (self.p1, self.p2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};

    fn enc_from(
        tape: &Tape<f64>,
        u: ArrayD<f64>,
        mask_rows: &[Vec<bool>],
    ) -> EncodedText {
        let (b, m) = (u.shape()[0], u.shape()[1]);
        let d = u.shape()[2];
        let mut mask = ndarray::Array2::<bool>::default((b, m));
        let mut cls = ArrayD::<f64>::zeros(IxDyn(&[b, d]));
        for bi in 0..b {
            for j in 0..m {
                mask[(bi, j)] = mask_rows[bi][j];
            }
            for dd in 0..d {
                cls[[bi, dd]] = u[[bi, 0, dd]];
            }
        }
        EncodedText {
            u: tape.constant(u),
            u_cls: tape.constant(cls),
            mask,
        }
    }

    fn tim(n: usize, d_u: usize, d_t: usize, seed: u64) -> (ParamStore<f64>, Tim) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let t = Tim::declare(&mut store, &mut rng, n, d_u, d_t);
        (store, t)
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let (store, tm) = tim(3, 2, 2, 1);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut u = ArrayD::<f64>::zeros(IxDyn(&[1, 4, 2]));
        u[[0, 0, 0]] = 1.0;
        u[[0, 1, 1]] = 2.0;
        u[[0, 2, 0]] = -3.0;
        let enc = enc_from(&tape, u, &[vec![true, true, true, false]]);
        let alpha = tm.step_attention(&tape, &bind, &enc, 2).unwrap();
        let a = tape.value(alpha);
        for j in 0..3 {
            assert_abs_diff_eq!(a[[0, j]], 1.0 / 3.0, epsilon = 1e-12);
        }
        assert_eq!(a[[0, 3]], 0.0);
    }

    #[test]
    fn single_real_token_gets_all_attention() {
        let (store, tm) = tim(2, 2, 2, 2);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let u = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 2]));
        let enc = enc_from(&tape, u, &[vec![true, false, false]]);
        let alpha = tm.step_attention(&tape, &bind, &enc, 2).unwrap();
        let a = tape.value(alpha);
        assert_eq!(a[[0, 0]], 1.0);
        assert_eq!(a[[0, 1]], 0.0);
        assert_eq!(a[[0, 2]], 0.0);
    }

    #[test]
    fn attention_matches_independent_softmax() {
        // u rows e1, e2; W_2 = (2, 0) → logits (2, 0).
        let (mut store, tm) = tim(2, 2, 2, 3);
        let w = store.get_mut(store.id_by_name("tim.step_w").unwrap());
        w[IxDyn(&[0, 0])] = 2.0;
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut u = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2]));
        u[[0, 0, 0]] = 1.0;
        u[[0, 1, 1]] = 1.0;
        let enc = enc_from(&tape, u, &[vec![true, true]]);
        let alpha = tape.value(tm.step_attention(&tape, &bind, &enc, 2).unwrap());
        let e2 = (2.0f64).exp();
        let e0 = 1.0;
        assert_abs_diff_eq!(alpha[[0, 0]], e2 / (e2 + e0), epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[[0, 1]], e0 / (e2 + e0), epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[[0, 0]], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(alpha[[0, 1]], 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn attention_row_sums_to_one_and_is_nonnegative() {
        let (mut store, tm) = tim(4, 3, 3, 4);
        let mut rng = stream_rng(11, Stream::Init, 1);
        *store.get_mut(store.id_by_name("tim.step_w").unwrap()) =
            crate::nn::uniform_init(&mut rng, &[3, 3], 2.0);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let u = crate::nn::uniform_init::<f64>(&mut rng, &[2, 5, 3], 1.5);
        let enc = enc_from(
            &tape,
            u,
            &[
                vec![true, true, true, false, false],
                vec![true, true, true, true, true],
            ],
        );
        for i in 2..=4 {
            let a = tape.value(tm.step_attention(&tape, &bind, &enc, i).unwrap());
            for bi in 0..2 {
                let sum: f64 = (0..5).map(|j| a[[bi, j]]).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
                assert!((0..5).all(|j| a[[bi, j]] >= 0.0));
            }
        }
    }

    #[test]
    fn fuse_matches_hand_weighted_sum() {
        let (store, tm) = tim(2, 2, 2, 5);
        let tape = Tape::<f64>::new();
        let _bind = store.bind(&tape, false);
        let u = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![4.0, 0.0, 0.0, 4.0]).unwrap(),
        );
        let alpha =
            tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.25, 0.75]).unwrap());
        let f = tape.value(tm.fuse(&tape, u, alpha).unwrap());
        assert_eq!(f[[0, 0]], 1.0);
        assert_eq!(f[[0, 1]], 3.0);
    }

    #[test]
    fn one_hot_alpha_selects_a_row() {
        let (store, tm) = tim(2, 3, 3, 6);
        let tape = Tape::<f64>::new();
        let _bind = store.bind(&tape, false);
        let mut rng = stream_rng(12, Stream::Init, 0);
        let u_val = crate::nn::uniform_init::<f64>(&mut rng, &[1, 4, 3], 1.0);
        let u = tape.constant(u_val.clone());
        let alpha = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![0.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        let f = tape.value(tm.fuse(&tape, u, alpha).unwrap());
        for d in 0..3 {
            assert_eq!(f[[0, d]], u_val[[0, 2, d]]);
        }
    }

    #[test]
    fn refine_with_zero_params_is_zero() {
        let (mut store, tm) = tim(2, 2, 2, 7);
        for i in 0..store.len() {
            store.by_index_mut(i).fill(0.0);
        }
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let f = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, -2.0]).unwrap());
        let cls = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 1.0]).unwrap());
        let t = tape.value(tm.refine(&tape, &bind, f, cls).unwrap());
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_matches_matrix_oracle() {
        // Fixed 2×4 → 2 → 2 weights evaluated by brute-force matrix arithmetic.
        let (mut store, tm) = tim(2, 2, 2, 8);
        let w1 = vec![0.5, -1.0, 2.0, 0.25, 1.5, 0.75, -0.5, 1.0];
        let b1 = vec![0.1, -0.2];
        let w2 = vec![1.0, -1.0, 0.5, 2.0];
        let b2 = vec![0.0, 0.3];
        *store.get_mut(store.id_by_name("tim.p1.w").unwrap()) =
            ArrayD::from_shape_vec(IxDyn(&[2, 4]), w1.clone()).unwrap();
        *store.get_mut(store.id_by_name("tim.p1.b").unwrap()) =
            ArrayD::from_shape_vec(IxDyn(&[2]), b1.clone()).unwrap();
        *store.get_mut(store.id_by_name("tim.p2.w").unwrap()) =
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), w2.clone()).unwrap();
        *store.get_mut(store.id_by_name("tim.p2.b").unwrap()) =
            ArrayD::from_shape_vec(IxDyn(&[2]), b2.clone()).unwrap();
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let f = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap());
        let cls = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 1.0]).unwrap());
        let t = tape.value(tm.refine(&tape, &bind, f, cls).unwrap());

        let x = [1.0, 0.0, 0.0, 1.0];
        let mut h = [0.0f64; 2];
        for o in 0..2 {
            let mut acc = b1[o];
            for k in 0..4 {
                acc += w1[o * 4 + k] * x[k];
            }
            h[o] = acc.max(0.0);
        }
        for o in 0..2 {
            let mut acc = b2[o];
            for k in 0..2 {
                acc += w2[o * 2 + k] * h[k];
            }
            assert_abs_diff_eq!(t[[0, o]], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn infer_steps_matches_suboperation_composition() {
        let (mut store, tm) = tim(4, 2, 2, 9);
        let mut rng = stream_rng(21, Stream::Init, 2);
        *store.get_mut(store.id_by_name("tim.step_w").unwrap()) =
            crate::nn::uniform_init(&mut rng, &[3, 2], 1.0);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let u = crate::nn::uniform_init::<f64>(&mut rng, &[1, 3, 2], 1.0);
        let enc = enc_from(&tape, u, &[vec![true, true, true]]);
        let steps = tm.infer_steps(&tape, &bind, &enc).unwrap();
        assert_eq!(steps.rows.len(), 3);
        for (k, &row) in steps.rows.iter().enumerate() {
            let i = k + 2;
            let alpha = tm.step_attention(&tape, &bind, &enc, i).unwrap();
            let f = tm.fuse(&tape, enc.u, alpha).unwrap();
            let expect = tm.refine(&tape, &bind, f, enc.u_cls).unwrap();
            assert_eq!(tape.value_clone(row), tape.value_clone(expect));
        }
    }

    #[test]
    fn equal_step_weights_give_equal_steps() {
        // Default zero-initialized step weights: every row identical.
        let (store, tm) = tim(5, 3, 3, 10);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut rng = stream_rng(22, Stream::Init, 0);
        let u = crate::nn::uniform_init::<f64>(&mut rng, &[2, 4, 3], 1.0);
        let enc = enc_from(&tape, u, &[vec![true; 4], vec![true, true, false, false]]);
        let steps = tm.infer_steps(&tape, &bind, &enc).unwrap();
        let first = tape.value_clone(steps.rows[0]);
        for &row in &steps.rows[1..] {
            assert_eq!(tape.value_clone(row), first);
        }
    }

    #[test]
    fn minimal_horizon_has_one_row() {
        let (store, tm) = tim(2, 2, 2, 11);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let u = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2]));
        let enc = enc_from(&tape, u, &[vec![true, true]]);
        let steps = tm.infer_steps(&tape, &bind, &enc).unwrap();
        assert_eq!(steps.rows.len(), 1);
    }

    #[test]
    fn masked_rows_never_influence_steps() {
        // Garbage at masked-out positions (mask false) must not reach t_i.
        let (mut store, tm) = tim(3, 2, 2, 12);
        let mut rng = stream_rng(23, Stream::Init, 0);
        *store.get_mut(store.id_by_name("tim.step_w").unwrap()) =
            crate::nn::uniform_init(&mut rng, &[2, 2], 1.0);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut u_clean = crate::nn::uniform_init::<f64>(&mut rng, &[1, 3, 2], 1.0);
        u_clean[[0, 2, 0]] = 0.0;
        u_clean[[0, 2, 1]] = 0.0;
        let mut u_dirty = u_clean.clone();
        u_dirty[[0, 2, 0]] = 1e6;
        u_dirty[[0, 2, 1]] = -1e6;
        let mask = vec![vec![true, true, false]];
        let enc_a = enc_from(&tape, u_clean, &mask);
        let enc_b = enc_from(&tape, u_dirty, &mask);
        let sa = tm.infer_steps(&tape, &bind, &enc_a).unwrap();
        let sb = tm.infer_steps(&tape, &bind, &enc_b).unwrap();
        for (&a, &b) in sa.rows.iter().zip(&sb.rows) {
            assert_eq!(tape.value_clone(a), tape.value_clone(b));
        }
    }

    #[test]
    fn logit_shift_leaves_attention_unchanged() {
        // Softmax shift invariance, checked on the tape op the module uses.
        let tape = Tape::<f64>::new();
        let logits =
            tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.3, -1.2, 2.0]).unwrap());
        let shifted = tape.add_scalar(logits, 7.5);
        let mask = ndarray::Array2::from_elem((1, 3), true);
        let a = tape.value_clone(tape.masked_softmax(logits, &mask));
        let b = tape.value_clone(tape.masked_softmax(shifted, &mask));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn step_index_and_mask_guards() {
        let (store, tm) = tim(3, 2, 2, 13);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let u = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2]));
        let enc = enc_from(&tape, u.clone(), &[vec![true, true]]);
        assert!(tm.step_attention(&tape, &bind, &enc, 1).is_err());
        assert!(tm.step_attention(&tape, &bind, &enc, 4).is_err());
        let enc_bad = enc_from(&tape, u, &[vec![false, false]]);
        let err = tm.step_attention(&tape, &bind, &enc_bad, 2).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
