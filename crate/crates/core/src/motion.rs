//! Latent motion predictor: one LSTM cell initializes the recurrent state
//! from the first frame's latent code, a second cell turns step embeddings
//! into latent residuals, and codes accumulate as w_n = w_{n−1} + h_n.
//!
//! The hidden size equals L·d_w so the hidden state h_n *is* the residual;
//! the two cells share no parameters. The initializer consumes the flattened
//! w_1 as a single input step from a zero prior state.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, LstmP, ParamStore};
use crate::tim::StepEmbeddings;
use rand_chacha::ChaCha12Rng;

/// Recurrent state on a tape: h and c, each (B, L·d_w).
#[derive(Debug, Clone, Copy)]
pub struct MotionState {
    pub h: Var,
    pub c: Var,
}

/// Parameter layout of the motion predictor.
pub struct MotionPredictor {
    /// Latent width L·d_w.
    pub latent_len: usize,
    /// Step-embedding width consumed by the rollout cell.
    pub step_dim: usize,
    init_cell: LstmP,
    roll_cell: LstmP,
}

impl MotionPredictor {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        latent_len: usize,
        step_dim: usize,
    ) -> Self {
        let init_cell = LstmP::declare(store, rng, "motion.init", latent_len, latent_len);
        let roll_cell = LstmP::declare(store, rng, "motion.roll", step_dim, latent_len);
        MotionPredictor {
            latent_len,
            step_dim,
            init_cell,
            roll_cell,
        }
    }

    fn check_latent(&self, tape: &Tape<impl Scalar>, w: Var) -> Result<usize> {
        let s = tape.shape(w);
        if s.len() != 2 || s[1] != self.latent_len {
            return Err(Error::Validation(format!(
                "latent code shape {s:?}, expected (B, {})",
                self.latent_len
            )));
        }
        Ok(s[0])
    }

    /// (h_1, c_1) = LSTM_i(flatten(w_1)) from a zero prior state.
    pub fn init_state<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        w1: Var,
    ) -> Result<MotionState> {
        let b = self.check_latent(tape, w1)?;
        let zero = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[
            b,
            self.latent_len,
        ])));
        let (h, c) = self.init_cell.step(tape, bind, w1, zero, zero);
        Ok(MotionState { h, c })
    }

    /// One rollout update from a step embedding t_n (B, step_dim).
    pub fn step<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        t_n: Var,
        prev: MotionState,
    ) -> Result<MotionState> {
        let s = tape.shape(t_n);
        if s.len() != 2 || s[1] != self.step_dim {
            return Err(Error::Validation(format!(
                "step embedding shape {s:?}, expected (B, {})",
                self.step_dim
            )));
        }
        let (h, c) = self.roll_cell.step(tape, bind, t_n, prev.h, prev.c);
        Ok(MotionState { h, c })
    }

    /// w_n = w_{n−1} + h_n.
    pub fn accumulate<T: Scalar>(
        &self,
        tape: &Tape<T>,
        w_prev: Var,
        h_n: Var,
    ) -> Result<Var> {
        let (a, b) = (tape.shape(w_prev), tape.shape(h_n));
        if a != b {
            return Err(Error::Validation(format!(
                "accumulate shape mismatch: {a:?} vs {b:?}"
            )));
        }
        Ok(tape.add(w_prev, h_n))
    }

    /// Full rollout: returns [w_2 .. w_N], each (B, L·d_w).
    pub fn rollout<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        w1: Var,
        steps: &StepEmbeddings,
    ) -> Result<Vec<Var>> {
        self.check_latent(tape, w1)?;
        let mut state = self.init_state(tape, bind, w1)?;
        let mut w = w1;
        let mut out = Vec::with_capacity(steps.rows.len());
        for &t_n in &steps.rows {
            state = self.step(tape, bind, t_n, state)?;
            w = self.accumulate(tape, w, state.h)?;
            out.push(w);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::{ArrayD, IxDyn};

    fn predictor(
        latent: usize,
        step_dim: usize,
        seed: u64,
    ) -> (ParamStore<f64>, MotionPredictor) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mp = MotionPredictor::declare(&mut store, &mut rng, latent, step_dim);
        (store, mp)
    }

    fn const_steps(tape: &Tape<f64>, vals: &[ArrayD<f64>]) -> StepEmbeddings {
        StepEmbeddings {
            rows: vals.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    #[test]
    fn zero_parameters_anchor_to_w1() {
        let (mut store, mp) = predictor(8, 3, 1);
        for i in 0..store.len() {
            store.by_index_mut(i).fill(0.0);
        }
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut rng = stream_rng(2, Stream::Init, 0);
        let w1_val = crate::nn::uniform_init::<f64>(&mut rng, &[2, 8], 1.0);
        let w1 = tape.constant(w1_val.clone());
        let steps = const_steps(
            &tape,
            &(0..4)
                .map(|_| crate::nn::uniform_init::<f64>(&mut rng, &[2, 3], 1.0))
                .collect::<Vec<_>>(),
        );
        let ws = mp.rollout(&tape, &bind, w1, &steps).unwrap();
        assert_eq!(ws.len(), 4);
        for &w in &ws {
            assert_eq!(tape.value_clone(w), w1_val);
        }
    }

    #[test]
    fn init_state_with_zero_input_weights_matches_bias_oracle() {
        // Zero input/recurrent weights but nonzero bias: state depends only
        // on the bias; evaluate the gate equations by hand.
        let (mut store, mp) = predictor(2, 2, 3);
        for name in ["motion.init.w_ih", "motion.init.w_hh"] {
            store.get_mut(store.id_by_name(name).unwrap()).fill(0.0);
        }
        let bias_vals = vec![0.3, -0.4, 1.2, 0.9, 0.5, -0.6, -0.1, 0.2];
        *store.get_mut(store.id_by_name("motion.init.b").unwrap()) =
            ArrayD::from_shape_vec(IxDyn(&[8]), bias_vals.clone()).unwrap();
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let w1 = tape.constant(ArrayD::zeros(IxDyn(&[1, 2])));
        let st = mp.init_state(&tape, &bind, w1).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for unit in 0..2 {
            let i = sig(bias_vals[unit]);
            let f = sig(bias_vals[2 + unit]);
            let g = bias_vals[4 + unit].tanh();
            let o = sig(bias_vals[6 + unit]);
            let _ = f; // prior cell state is zero, so f contributes nothing
            let c = i * g;
            let h = o * c.tanh();
            approx::assert_abs_diff_eq!(
                tape.value(st.c)[[0, unit]],
                c,
                epsilon = 1e-12
            );
            approx::assert_abs_diff_eq!(
                tape.value(st.h)[[0, unit]],
                h,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn accumulate_is_elementwise_sum() {
        let (store, mp) = predictor(8, 2, 4);
        let tape = Tape::<f64>::new();
        let _bind = store.bind(&tape, false);
        let mut rng = stream_rng(5, Stream::Init, 0);
        let a = crate::nn::uniform_init::<f64>(&mut rng, &[1, 8], 2.0);
        let b = crate::nn::uniform_init::<f64>(&mut rng, &[1, 8], 2.0);
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let sum = mp.accumulate(&tape, va, vb).unwrap();
        assert_eq!(tape.value_clone(sum), &a + &b);

        // Associativity with a combined residual.
        let c = crate::nn::uniform_init::<f64>(&mut rng, &[1, 8], 2.0);
        let vc = tape.constant(c.clone());
        let left = mp
            .accumulate(&tape, mp.accumulate(&tape, va, vb).unwrap(), vc)
            .unwrap();
        let bc = tape.constant(&b + &c);
        let right = mp.accumulate(&tape, va, bc).unwrap();
        let (l, r) = (tape.value_clone(left), tape.value_clone(right));
        for (x, y) in l.iter().zip(r.iter()) {
            approx::assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rollout_telescopes_to_w1_plus_residual_sum() {
        let (store, mp) = predictor(8, 3, 6);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut rng = stream_rng(7, Stream::Init, 0);
        let w1_val = crate::nn::uniform_init::<f64>(&mut rng, &[2, 8], 1.0);
        let w1 = tape.constant(w1_val.clone());
        let step_vals: Vec<_> = (0..4)
            .map(|_| crate::nn::uniform_init::<f64>(&mut rng, &[2, 3], 1.0))
            .collect();
        let steps = const_steps(&tape, &step_vals);
        let ws = mp.rollout(&tape, &bind, w1, &steps).unwrap();

        // Independent accumulation of the residuals via the state equations.
        let mut state = mp.init_state(&tape, &bind, w1).unwrap();
        let mut expect = w1_val.clone();
        for (k, sv) in step_vals.iter().enumerate() {
            let t_n = tape.constant(sv.clone());
            state = mp.step(&tape, &bind, t_n, state).unwrap();
            expect = expect + tape.value_clone(state.h);
            let got = tape.value_clone(ws[k]);
            for (x, y) in got.iter().zip(expect.iter()) {
                approx::assert_abs_diff_eq!(x, y, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn residuals_stay_in_the_open_unit_interval() {
        let (store, mp) = predictor(16, 4, 8);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut rng = stream_rng(9, Stream::Init, 0);
        let w1 = tape.constant(crate::nn::uniform_init::<f64>(&mut rng, &[3, 16], 5.0));
        let steps = const_steps(
            &tape,
            &(0..5)
                .map(|_| crate::nn::uniform_init::<f64>(&mut rng, &[3, 4], 5.0))
                .collect::<Vec<_>>(),
        );
        let mut state = mp.init_state(&tape, &bind, w1).unwrap();
        for &t_n in &steps.rows {
            state = mp.step(&tape, &bind, t_n, state).unwrap();
            assert!(tape.value(state.h).iter().all(|&v| v.abs() < 1.0));
        }
    }

    #[test]
    fn single_step_rollout_equals_composition() {
        let (store, mp) = predictor(4, 2, 10);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let mut rng = stream_rng(10, Stream::Init, 0);
        let w1_val = crate::nn::uniform_init::<f64>(&mut rng, &[1, 4], 1.0);
        let t_val = crate::nn::uniform_init::<f64>(&mut rng, &[1, 2], 1.0);
        let w1 = tape.constant(w1_val.clone());
        let steps = const_steps(&tape, &[t_val.clone()]);
        let ws = mp.rollout(&tape, &bind, w1, &steps).unwrap();
        assert_eq!(ws.len(), 1);

        let st0 = mp.init_state(&tape, &bind, w1).unwrap();
        let st1 = mp
            .step(&tape, &bind, tape.constant(t_val), st0)
            .unwrap();
        let expect = mp.accumulate(&tape, w1, st1.h).unwrap();
        assert_eq!(tape.value_clone(ws[0]), tape.value_clone(expect));
    }

    #[test]
    fn shape_guards_reject_mismatches() {
        let (store, mp) = predictor(4, 2, 11);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let bad_w = tape.constant(ArrayD::zeros(IxDyn(&[1, 5])));
        assert!(mp.init_state(&tape, &bind, bad_w).is_err());
        let w1 = tape.constant(ArrayD::zeros(IxDyn(&[1, 4])));
        let st = mp.init_state(&tape, &bind, w1).unwrap();
        let bad_t = tape.constant(ArrayD::zeros(IxDyn(&[1, 3])));
        assert!(mp.step(&tape, &bind, bad_t, st).is_err());
        let h_bad = tape.constant(ArrayD::zeros(IxDyn(&[1, 5])));
        assert!(mp.accumulate(&tape, w1, h_bad).is_err());
    }
}
