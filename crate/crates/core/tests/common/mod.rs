//! Helpers shared by the integration suites: a finite-difference gradient
//! checker over parameter stores and a brute-force SSIM oracle that shares
//! no code path with the library implementation.

#![allow(dead_code)]

pub mod suites;

use ndarray::{ArrayD, ArrayView3};
use rand::Rng;
use tvp_core::autodiff::{Scalar, Tape, Var};
use tvp_core::nn::{Binding, ParamStore};
use tvp_core::rng::{stream_rng, Stream};

/// Central-difference step; f64 keeps truncation error near 1e-10 at unit
/// scale, far below the acceptance tolerance.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Floor added to the error denominator so the FD roundoff noise floor
/// (ε·|loss|/step ≈ 1e-11) cannot fail a legitimately tiny gradient; any
/// gradient above ~1e-5 still faces the full relative test.
pub const FD_DENOM_FLOOR: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative. Near-zero
/// pairs compare absolutely so a legitimately zero gradient passes.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Add uniform noise to every parameter so checks run at a generic point —
/// several groups (AdaIN affines, TIM step weights) are zero-initialized by
/// design and would otherwise sit on a symmetry.
pub fn jitter_store<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = stream_rng(seed, Stream::Init, 4242);
    for i in 0..store.len() {
        for v in store.by_index_mut(i).iter_mut() {
            *v += T::from_f64(rng.gen_range(-scale..scale));
        }
    }
}

/// Probe `probes` random parameter elements against central finite
/// differences of `loss` (fresh 64-bit tape per evaluation). Panics on any
/// probe whose relative error reaches `FD_TOL`; returns the worst error.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, probes: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&Tape<f64>, &Binding) -> Var,
{
    let eval = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let l = loss(&tape, &bind);
        tape.scalar_value(l)
    };

    let tape = Tape::<f64>::new();
    let bind = store.bind(&tape, true);
    let l = loss(&tape, &bind);
    let grads = tape.backward(l);
    let analytic: Vec<ArrayD<f64>> = (0..store.len())
        .map(|i| {
            let (name, value) = store.by_index(i);
            let pid = store.id_by_name(name).expect("declared name");
            grads.get_or_zeros(bind.var(pid), value.shape())
        })
        .collect();

    let mut rng = stream_rng(seed, Stream::Init, 31337);
    let mut worst = 0.0f64;
    for k in 0..probes {
        let p = rng.gen_range(0..store.len());
        let len = store.by_index(p).1.len();
        let e = rng.gen_range(0..len);
        let a = *analytic[p].iter().nth(e).expect("element in range");
        let orig = *store.by_index(p).1.iter().nth(e).expect("element in range");

        *store.by_index_mut(p).iter_mut().nth(e).unwrap() = orig + FD_STEP;
        let lp = eval(store);
        *store.by_index_mut(p).iter_mut().nth(e).unwrap() = orig - FD_STEP;
        let lm = eval(store);
        *store.by_index_mut(p).iter_mut().nth(e).unwrap() = orig;

        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let err = (a - numeric).abs() / (FD_DENOM_FLOOR + a.abs().max(numeric.abs()));
        assert!(
            err < FD_TOL,
            "probe {k} on {}[{e}]: analytic {a:.8e}, numeric {numeric:.8e}, rel err {err:.3e}",
            store.by_index(p).0
        );
        worst = worst.max(err);
    }
    worst
}

/// Brute-force SSIM: at every valid window position compute the
/// Gaussian-weighted means, central-moment variances, and covariance with a
/// literal quadruple loop, then average positions and channels. Independent
/// of the library's separable-filter route.
pub fn ssim_oracle(a: ArrayView3<u8>, b: ArrayView3<u8>) -> f64 {
    use tvp_core::metrics::{SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
    let k = SSIM_WINDOW;
    let half = (k / 2) as f64;
    let mut g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= sum;
    }
    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let (h, w) = (a.shape()[0], a.shape()[1]);
    assert!(h >= k && w >= k, "oracle needs at least one window");

    let mut channels = 0.0;
    for c in 0..3 {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut ux, mut uy) = (0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        let wgt = g[di] * g[dj];
                        ux += wgt * a[(i + di, j + dj, c)] as f64;
                        uy += wgt * b[(i + di, j + dj, c)] as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        let wgt = g[di] * g[dj];
                        let da = a[(i + di, j + dj, c)] as f64 - ux;
                        let db = b[(i + di, j + dj, c)] as f64 - uy;
                        vx += wgt * da * da;
                        vy += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        channels += total / count as f64;
    }
    channels / 3.0
}
