//! Forward constructors and the backward dispatcher for tape ops.

use super::conv;
use super::{slot, Node, Op, Scalar, Tape, UnaryKind, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice};

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[a.0].value.shape(),
                nodes[b.0].value.shape(),
                "add: shape mismatch"
            );
            &nodes[a.0].value + &nodes[b.0].value
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[a.0].value.shape(),
                nodes[b.0].value.shape(),
                "sub: shape mismatch"
            );
            &nodes[a.0].value - &nodes[b.0].value
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[a.0].value.shape(),
                nodes[b.0].value.shape(),
                "mul: shape mismatch"
            );
            &nodes[a.0].value * &nodes[b.0].value
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| -v);
        let needs = self.needs(a.0);
        self.push(value, Op::Neg(a.0), needs)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v + c);
        let needs = self.needs(a.0);
        self.push(value, Op::AddScalar(a.0), needs)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * cc);
        let needs = self.needs(a.0);
        self.push(value, Op::MulScalar(a.0, c), needs)
    }

    fn unary(&self, a: Var, kind: UnaryKind, payload: f64) -> Var {
        let value = {
            let x = &self.nodes.borrow()[a.0].value;
            let p = T::from_f64(payload);
            match kind {
                UnaryKind::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
                UnaryKind::LeakyRelu => x.mapv(|v| if v > T::zero() { v } else { v * p }),
                UnaryKind::Tanh => x.mapv(|v| v.tanh()),
                UnaryKind::Sigmoid => x.mapv(sigmoid),
                UnaryKind::Exp => x.mapv(|v| v.exp()),
                UnaryKind::Ln => x.mapv(|v| v.ln()),
                UnaryKind::Abs => x.mapv(|v| v.abs()),
                UnaryKind::Sqr => x.mapv(|v| v * v),
            }
        };
        let needs = self.needs(a.0);
        self.push(value, Op::Unary(a.0, kind, payload), needs)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu, 0.0)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, UnaryKind::LeakyRelu, slope)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Tanh, 0.0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid, 0.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp, 0.0)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Ln, 0.0)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Abs, 0.0)
    }

    pub fn sqr(&self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sqr, 0.0)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.nodes.borrow()[a.0]
            .value
            .mapv(|v| if v < l { l } else if v > h { h } else { v });
        let needs = self.needs(a.0);
        self.push(value, Op::Clamp(a.0, lo, hi), needs)
    }

    /// a (m,k) · b (k,n) -> (m,n)
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let a2 = as2(&nodes[a.0].value);
            let b2 = as2(&nodes[b.0].value);
            assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
            let mut out = Array2::<T>::zeros((a2.nrows(), b2.ncols()));
            general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut out);
            out.into_dyn()
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::MatMul(a.0, b.0), needs)
    }

    /// x (n,in) · w (out,in)ᵀ + b -> (n,out)
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x2 = as2(&nodes[x.0].value);
            let w2 = as2(&nodes[w.0].value);
            assert_eq!(x2.ncols(), w2.ncols(), "linear: input dim mismatch");
            let mut out = Array2::<T>::zeros((x2.nrows(), w2.nrows()));
            general_mat_mul(T::one(), &x2, &w2.t(), T::zero(), &mut out);
            if let Some(bv) = b {
                let bias = &nodes[bv.0].value;
                assert_eq!(bias.len(), w2.nrows(), "linear: bias dim mismatch");
                let b1 = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                for mut row in out.rows_mut() {
                    row += &b1;
                }
            }
            out.into_dyn()
        };
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map(|bv| self.needs(bv.0)).unwrap_or(false);
        self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            needs,
        )
    }

    /// Batched matmul: a (B,m,k) · b (B,k,n) -> (B,m,n); with `trans_b`,
    /// b is (B,n,k) and multiplied transposed.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let a3 = nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(a3.shape()[0], b3.shape()[0], "bmm: batch mismatch");
            let (bs, m, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
            let n = if trans_b { b3.shape()[1] } else { b3.shape()[2] };
            let mut out = ndarray::Array3::<T>::zeros((bs, m, n));
            for i in 0..bs {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let mut oi = out.index_axis_mut(Axis(0), i);
                if trans_b {
                    assert_eq!(k, b3.shape()[2], "bmm: inner dim mismatch");
                    general_mat_mul(T::one(), &ai, &bi.t(), T::zero(), &mut oi);
                } else {
                    assert_eq!(k, b3.shape()[1], "bmm: inner dim mismatch");
                    general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut oi);
                }
            }
            out.into_dyn()
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(
            value,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            needs,
        )
    }

    /// x (N,C,H,W), w (O,C,kh,kw), zero padding, square stride.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|bv| nodes[bv.0].value.clone());
            conv::conv2d_forward(
                &nodes[x.0].value,
                &nodes[w.0].value,
                bias.as_ref(),
                stride,
                pad,
            )
        };
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map(|bv| self.needs(bv.0)).unwrap_or(false);
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            needs,
        )
    }

    /// x (N,C,D,H,W), w (O,C,kd,kh,kw).
    pub fn conv3d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|bv| nodes[bv.0].value.clone());
            conv::conv3d_forward(
                &nodes[x.0].value,
                &nodes[w.0].value,
                bias.as_ref(),
                stride,
                pad,
            )
        };
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map(|bv| self.needs(bv.0)).unwrap_or(false);
        self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            needs,
        )
    }

    /// Nearest-neighbour 2x upsampling of (N,C,H,W).
    pub fn upsample2x(&self, x: Var) -> Var {
        let value = conv::upsample2x_forward(&self.nodes.borrow()[x.0].value);
        let needs = self.needs(x.0);
        self.push(value, Op::Upsample2x(x.0), needs)
    }

    /// Per-(n,c) spatial standardization: (x − μ)/(σ + ε), σ = population std.
    pub fn instance_norm2d(&self, x: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            instance_norm_forward(&nodes[x.0].value, T::from_f64(eps))
        };
        let needs = self.needs(x.0);
        self.push(value, Op::InstanceNorm2d { x: x.0, eps }, needs)
    }

    /// out[n,c,·] = s[n,c]·x[n,c,·] + b[n,c] for x (N,C,H,W), s,b (N,C).
    pub fn channel_affine(&self, x: Var, s: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let sv = as2(&nodes[s.0].value);
            let bv = as2(&nodes[b.0].value);
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            assert_eq!(sv.dim(), (n, c), "channel_affine: scale shape");
            assert_eq!(bv.dim(), (n, c), "channel_affine: bias shape");
            let mut out = xv.clone();
            for ni in 0..n {
                for ci in 0..c {
                    let mut plane = out.index_axis_mut(Axis(0), ni);
                    let mut plane = plane.index_axis_mut(Axis(0), ci);
                    let (sc, bi) = (sv[(ni, ci)], bv[(ni, ci)]);
                    plane.mapv_inplace(|v| v * sc + bi);
                }
            }
            out
        };
        let needs = self.needs(x.0) || self.needs(s.0) || self.needs(b.0);
        self.push(
            value,
            Op::ChannelAffine {
                x: x.0,
                s: s.0,
                b: b.0,
            },
            needs,
        )
    }

    /// Row-wise softmax over `logits` (R,M); positions with `mask == false`
    /// get exactly zero (their logits are treated as −∞). Rows must have at
    /// least one unmasked position.
    pub fn masked_softmax(&self, logits: Var, mask: &ndarray::Array2<bool>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let l2 = as2(&nodes[logits.0].value);
            assert_eq!(l2.dim(), mask.dim(), "masked_softmax: mask shape");
            let mut out = Array2::<T>::zeros(l2.dim());
            for (r, row) in l2.rows().into_iter().enumerate() {
                let mut mx = T::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if mask[(r, j)] && v > mx {
                        mx = v;
                    }
                }
                assert!(
                    mx > T::neg_infinity(),
                    "masked_softmax: fully masked row {r}"
                );
                let mut denom = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    if mask[(r, j)] {
                        let e = (v - mx).exp();
                        out[(r, j)] = e;
                        denom = denom + e;
                    }
                }
                for j in 0..row.len() {
                    if mask[(r, j)] {
                        out[(r, j)] = out[(r, j)] / denom;
                    }
                }
            }
            out.into_dyn()
        };
        let needs = self.needs(logits.0);
        self.push(
            value,
            Op::MaskedSoftmax {
                logits: logits.0,
                mask: mask.clone(),
            },
            needs,
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayViewD<T>> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes")
        };
        let needs = parts.iter().any(|p| self.needs(p.0));
        self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            needs,
        )
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.0]
                .value
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned()
        };
        let needs = self.needs(x.0);
        self.push(
            value,
            Op::Narrow {
                x: x.0,
                axis,
                start,
                len,
            },
            needs,
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.as_standard_layout().into_owned();
            v.into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        };
        let needs = self.needs(x.0);
        self.push(value, Op::Reshape(x.0), needs)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            ArrayD::from_elem(IxDyn(&[]), nodes[x.0].value.sum())
        };
        let needs = self.needs(x.0);
        self.push(value, Op::SumAll(x.0), needs)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let n = T::from_f64(v.len() as f64);
            ArrayD::from_elem(IxDyn(&[]), v.sum() / n)
        };
        let needs = self.needs(x.0);
        self.push(value, Op::MeanAll(x.0), needs)
    }

    /// table (V,d), ids (R) -> (R,d).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t2 = as2(&nodes[table.0].value);
            let mut out = Array2::<T>::zeros((ids.len(), t2.ncols()));
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < t2.nrows(), "gather_rows: id {id} out of range");
                out.row_mut(r).assign(&t2.row(id));
            }
            out.into_dyn()
        };
        let needs = self.needs(table.0);
        self.push(
            value,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// u (B,M,d), alpha (B,M) -> (B,d): per-item weighted sum of rows.
    pub fn weighted_sum_rows(&self, u: Var, alpha: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let u3 = nodes[u.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let a2 = as2(&nodes[alpha.0].value);
            let (b, m, d) = (u3.shape()[0], u3.shape()[1], u3.shape()[2]);
            assert_eq!(a2.dim(), (b, m), "weighted_sum_rows: alpha shape");
            let mut out = Array2::<T>::zeros((b, d));
            for bi in 0..b {
                for j in 0..m {
                    let w = a2[(bi, j)];
                    if w != T::zero() {
                        let row = u3.index_axis(Axis(0), bi);
                        out.row_mut(bi).scaled_add(w, &row.index_axis(Axis(0), j));
                    }
                }
            }
            out.into_dyn()
        };
        let needs = self.needs(u.0) || self.needs(alpha.0);
        self.push(
            value,
            Op::WeightedSumRows {
                u: u.0,
                alpha: alpha.0,
            },
            needs,
        )
    }

    /// x (B, rest…) + p (rest…), broadcast over the leading axis.
    pub fn add_bc0(&self, x: Var, p: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let pv = &nodes[p.0].value;
            assert_eq!(&xv.shape()[1..], pv.shape(), "add_bc0: shape mismatch");
            let mut out = xv.clone();
            for mut item in out.axis_iter_mut(Axis(0)) {
                item += pv;
            }
            out
        };
        let needs = self.needs(x.0) || self.needs(p.0);
        self.push(value, Op::AddBc0 { x: x.0, p: p.0 }, needs)
    }

    /// Stack T frames of (B,C,H,W) into (B,C,T,H,W).
    pub fn stack_time(&self, frames: &[Var]) -> Var {
        assert!(!frames.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let f0 = &nodes[frames[0].0].value;
            let (b, c, h, w) = (f0.shape()[0], f0.shape()[1], f0.shape()[2], f0.shape()[3]);
            let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, frames.len(), h, w]));
            for (t, fv) in frames.iter().enumerate() {
                let frame = &nodes[fv.0].value;
                assert_eq!(frame.shape(), f0.shape(), "stack_time: frame shapes differ");
                out.index_axis_mut(Axis(2), t).assign(frame);
            }
            out
        };
        let needs = frames.iter().any(|f| self.needs(f.0));
        self.push(
            value,
            Op::StackTime {
                frames: frames.iter().map(|f| f.0).collect(),
            },
            needs,
        )
    }

    /// Tile x (B,C,H,W) along a new time axis -> (B,C,T,H,W).
    pub fn repeat_time(&self, x: Var, t: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, t, h, w]));
            for ti in 0..t {
                out.index_axis_mut(Axis(2), ti).assign(xv);
            }
            out
        };
        let needs = self.needs(x.0);
        self.push(value, Op::RepeatTime { x: x.0, t }, needs)
    }

    /// Σ cᵢ·vᵢ over 0-d vars, as tape ops.
    pub fn weighted_sum_scalars(&self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            let scaled = self.mul_scalar(v, c);
            acc = Some(match acc {
                Some(a) => self.add(a, scaled),
                None => scaled,
            });
        }
        acc.expect("weighted_sum_scalars: empty terms")
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d array")
}

fn instance_norm_forward<T: Scalar>(x: &ArrayD<T>, eps: T) -> ArrayD<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = out.index_axis_mut(Axis(0), ni);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            let len = T::from_f64(plane.len() as f64);
            let mu = plane.sum() / len;
            let var = plane.fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / len;
            let denom = var.sqrt() + eps;
            plane.mapv_inplace(|v| (v - mu) / denom);
        }
    }
    out
}

/// Accumulate the gradients of node `id`'s parents given its own gradient `g`.
pub(crate) fn backward_step<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &ArrayD<T>,
    grads: &mut [Option<ArrayD<T>>],
) {
    let needs = |p: usize| nodes[p].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                *slot(grads, *a, nodes[*a].value.shape()) += g;
            }
            if needs(*b) {
                *slot(grads, *b, nodes[*b].value.shape()) += g;
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                *slot(grads, *a, nodes[*a].value.shape()) += g;
            }
            if needs(*b) {
                *slot(grads, *b, nodes[*b].value.shape()) -= g;
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                *slot(grads, *a, nodes[*a].value.shape()) += &(g * &nodes[*b].value);
            }
            if needs(*b) {
                *slot(grads, *b, nodes[*b].value.shape()) += &(g * &nodes[*a].value);
            }
        }
        Op::Neg(a) => {
            if needs(*a) {
                *slot(grads, *a, nodes[*a].value.shape()) -= g;
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                *slot(grads, *a, nodes[*a].value.shape()) += g;
            }
        }
        Op::MulScalar(a, c) => {
            if needs(*a) {
                let cc = T::from_f64(*c);
                *slot(grads, *a, nodes[*a].value.shape()) += &g.mapv(|v| v * cc);
            }
        }
        Op::Unary(a, kind, payload) => {
            if needs(*a) {
                let x = &nodes[*a].value;
                let y = &nodes[id].value;
                let p = T::from_f64(*payload);
                let dx = match kind {
                    UnaryKind::Relu => ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryKind::LeakyRelu => ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            gv * p
                        }
                    }),
                    UnaryKind::Tanh => ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * (T::one() - yv * yv)),
                    UnaryKind::Sigmoid => ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (T::one() - yv)),
                    UnaryKind::Exp => g * y,
                    UnaryKind::Ln => g / x,
                    UnaryKind::Abs => ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryKind::Sqr => {
                        let two = T::from_f64(2.0);
                        ndarray::Zip::from(g)
                            .and(x)
                            .map_collect(|&gv, &xv| two * gv * xv)
                    }
                };
                *slot(grads, *a, nodes[*a].value.shape()) += &dx;
            }
        }
        Op::Clamp(a, lo, hi) => {
            if needs(*a) {
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                let x = &nodes[*a].value;
                let dx = ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                    if xv >= l && xv <= h {
                        gv
                    } else {
                        T::zero()
                    }
                });
                *slot(grads, *a, nodes[*a].value.shape()) += &dx;
            }
        }
        Op::MatMul(a, b) => {
            let g2 = as2(g);
            let av = as2(&nodes[*a].value);
            let bv = as2(&nodes[*b].value);
            if needs(*a) {
                let da = slot(grads, *a, nodes[*a].value.shape());
                let mut da2 = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                general_mat_mul(T::one(), &g2, &bv.t(), T::one(), &mut da2);
            }
            if needs(*b) {
                let db = slot(grads, *b, nodes[*b].value.shape());
                let mut db2 = db.view_mut().into_dimensionality::<Ix2>().unwrap();
                general_mat_mul(T::one(), &av.t(), &g2, T::one(), &mut db2);
            }
        }
        Op::Linear { x, w, b } => {
            let g2 = as2(g);
            let xv = as2(&nodes[*x].value);
            let wv = as2(&nodes[*w].value);
            if needs(*x) {
                let dx = slot(grads, *x, nodes[*x].value.shape());
                let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                general_mat_mul(T::one(), &g2, &wv, T::one(), &mut dx2);
            }
            if needs(*w) {
                let dw = slot(grads, *w, nodes[*w].value.shape());
                let mut dw2 = dw.view_mut().into_dimensionality::<Ix2>().unwrap();
                general_mat_mul(T::one(), &g2.t(), &xv, T::one(), &mut dw2);
            }
            if let Some(bi) = b {
                if needs(*bi) {
                    let db = slot(grads, *bi, nodes[*bi].value.shape());
                    let gsum = g2.sum_axis(Axis(0));
                    let mut db1 = db.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                    db1 += &gsum;
                }
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let av = nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
            let bv = nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
            let bs = av.shape()[0];
            if needs(*a) {
                let da = slot(grads, *a, nodes[*a].value.shape());
                let mut da3 = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                for i in 0..bs {
                    let gi = g3.index_axis(Axis(0), i);
                    let bi = bv.index_axis(Axis(0), i);
                    let mut dai = da3.index_axis_mut(Axis(0), i);
                    if *trans_b {
                        general_mat_mul(T::one(), &gi, &bi, T::one(), &mut dai);
                    } else {
                        general_mat_mul(T::one(), &gi, &bi.t(), T::one(), &mut dai);
                    }
                }
            }
            if needs(*b) {
                let db = slot(grads, *b, nodes[*b].value.shape());
                let mut db3 = db.view_mut().into_dimensionality::<Ix3>().unwrap();
                for i in 0..bs {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = av.index_axis(Axis(0), i);
                    let mut dbi = db3.index_axis_mut(Axis(0), i);
                    if *trans_b {
                        general_mat_mul(T::one(), &gi.t(), &ai, T::one(), &mut dbi);
                    } else {
                        general_mat_mul(T::one(), &ai.t(), &gi, T::one(), &mut dbi);
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            conv::conv2d_backward(nodes, id, g, grads, *x, *w, *b, *stride, *pad);
        }
        Op::Conv3d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            conv::conv3d_backward(nodes, id, g, grads, *x, *w, *b, *stride, *pad);
        }
        Op::Upsample2x(x) => {
            if needs(*x) {
                let dx = conv::upsample2x_backward(g);
                *slot(grads, *x, nodes[*x].value.shape()) += &dx;
            }
        }
        Op::InstanceNorm2d { x, eps } => {
            if needs(*x) {
                let dx = instance_norm_backward(&nodes[*x].value, g, T::from_f64(*eps));
                *slot(grads, *x, nodes[*x].value.shape()) += &dx;
            }
        }
        Op::ChannelAffine { x, s, b } => {
            let xv = &nodes[*x].value;
            let sv = as2(&nodes[*s].value);
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            if needs(*x) {
                let dx = slot(grads, *x, xv.shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let sc = sv[(ni, ci)];
                        let gp = g.index_axis(Axis(0), ni);
                        let gp = gp.index_axis(Axis(0), ci);
                        let mut dxp = dx.index_axis_mut(Axis(0), ni);
                        let mut dxp = dxp.index_axis_mut(Axis(0), ci);
                        dxp.zip_mut_with(&gp, |d, &gv| *d = *d + gv * sc);
                    }
                }
            }
            if needs(*s) {
                let ds = slot(grads, *s, nodes[*s].value.shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g.index_axis(Axis(0), ni);
                        let gp = gp.index_axis(Axis(0), ci);
                        let xp = xv.index_axis(Axis(0), ni);
                        let xp = xp.index_axis(Axis(0), ci);
                        let dot = ndarray::Zip::from(&gp)
                            .and(&xp)
                            .fold(T::zero(), |acc, &gv, &xv2| acc + gv * xv2);
                        ds[IxDyn(&[ni, ci])] = ds[IxDyn(&[ni, ci])] + dot;
                    }
                }
            }
            if needs(*b) {
                let db = slot(grads, *b, nodes[*b].value.shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g.index_axis(Axis(0), ni);
                        let gp = gp.index_axis(Axis(0), ci);
                        db[IxDyn(&[ni, ci])] = db[IxDyn(&[ni, ci])] + gp.sum();
                    }
                }
            }
        }
        Op::MaskedSoftmax { logits, mask } => {
            if needs(*logits) {
                let y = as2(&nodes[id].value);
                let g2 = as2(g);
                let (r, m) = y.dim();
                let mut dx = Array2::<T>::zeros((r, m));
                for ri in 0..r {
                    let mut dot = T::zero();
                    for j in 0..m {
                        if mask[(ri, j)] {
                            dot = dot + g2[(ri, j)] * y[(ri, j)];
                        }
                    }
                    for j in 0..m {
                        if mask[(ri, j)] {
                            dx[(ri, j)] = y[(ri, j)] * (g2[(ri, j)] - dot);
                        }
                    }
                }
                *slot(grads, *logits, nodes[*logits].value.shape()) += &dx.into_dyn();
            }
        }
        Op::Concat { parts, axis } => {
            let mut start = 0usize;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if needs(p) {
                    let gp = g.slice_axis(Axis(*axis), Slice::from(start..start + len));
                    *slot(grads, p, nodes[p].value.shape()) += &gp;
                }
                start += len;
            }
        }
        Op::Narrow {
            x,
            axis,
            start,
            len,
        } => {
            if needs(*x) {
                let dx = slot(grads, *x, nodes[*x].value.shape());
                let mut section = dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len));
                section += g;
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                let gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(nodes[*x].value.shape()))
                    .unwrap();
                *slot(grads, *x, nodes[*x].value.shape()) += &gx;
            }
        }
        Op::SumAll(x) => {
            if needs(*x) {
                let gs = g[IxDyn(&[])];
                slot(grads, *x, nodes[*x].value.shape()).mapv_inplace(|v| v + gs);
            }
        }
        Op::MeanAll(x) => {
            if needs(*x) {
                let n = T::from_f64(nodes[*x].value.len() as f64);
                let gs = g[IxDyn(&[])] / n;
                slot(grads, *x, nodes[*x].value.shape()).mapv_inplace(|v| v + gs);
            }
        }
        Op::GatherRows { table, ids } => {
            if needs(*table) {
                let g2 = as2(g);
                let dt = slot(grads, *table, nodes[*table].value.shape());
                let mut dt2 = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (r, &idx) in ids.iter().enumerate() {
                    let mut row = dt2.row_mut(idx);
                    row += &g2.row(r);
                }
            }
        }
        Op::WeightedSumRows { u, alpha } => {
            let u3 = nodes[*u].value.view().into_dimensionality::<Ix3>().unwrap();
            let a2 = as2(&nodes[*alpha].value);
            let g2 = as2(g);
            let (b, m, _d) = (u3.shape()[0], u3.shape()[1], u3.shape()[2]);
            if needs(*u) {
                let du = slot(grads, *u, nodes[*u].value.shape());
                let mut du3 = du.view_mut().into_dimensionality::<Ix3>().unwrap();
                for bi in 0..b {
                    for j in 0..m {
                        let w = a2[(bi, j)];
                        if w != T::zero() {
                            let mut row = du3.index_axis_mut(Axis(0), bi);
                            let mut row = row.index_axis_mut(Axis(0), j);
                            row.scaled_add(w, &g2.row(bi));
                        }
                    }
                }
            }
            if needs(*alpha) {
                let da = slot(grads, *alpha, nodes[*alpha].value.shape());
                let mut da2 = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                for bi in 0..b {
                    for j in 0..m {
                        let urow = u3.index_axis(Axis(0), bi);
                        let urow = urow.index_axis(Axis(0), j);
                        let dot = ndarray::Zip::from(&g2.row(bi))
                            .and(&urow)
                            .fold(T::zero(), |acc, &gv, &uv| acc + gv * uv);
                        da2[(bi, j)] = da2[(bi, j)] + dot;
                    }
                }
            }
        }
        Op::AddBc0 { x, p } => {
            if needs(*x) {
                *slot(grads, *x, nodes[*x].value.shape()) += g;
            }
            if needs(*p) {
                let dp = slot(grads, *p, nodes[*p].value.shape());
                for item in g.axis_iter(Axis(0)) {
                    *dp += &item;
                }
            }
        }
        Op::StackTime { frames } => {
            for (t, &f) in frames.iter().enumerate() {
                if needs(f) {
                    let gf = g.index_axis(Axis(2), t);
                    *slot(grads, f, nodes[f].value.shape()) += &gf;
                }
            }
        }
        Op::RepeatTime { x, t } => {
            if needs(*x) {
                let dx = slot(grads, *x, nodes[*x].value.shape());
                for ti in 0..*t {
                    *dx += &g.index_axis(Axis(2), ti);
                }
            }
        }
    }
}

/// Backward of (x − μ)/(σ + ε) per (n,c) plane, σ the population std.
fn instance_norm_backward<T: Scalar>(x: &ArrayD<T>, g: &ArrayD<T>, eps: T) -> ArrayD<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut dx = ArrayD::<T>::zeros(IxDyn(x.shape()));
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let gp = g.index_axis(Axis(0), ni);
            let gp = gp.index_axis(Axis(0), ci);
            let len = T::from_f64(xp.len() as f64);
            let mu = xp.sum() / len;
            let var = xp.fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / len;
            let sd = var.sqrt();
            let d = T::one() / (sd + eps);
            let gmean = gp.sum() / len;
            // z_i = (x_i − μ)/σ; dxᵢ = D·(gᵢ − mean(g) − (Dσ)·zᵢ·mean(g⊙z)),
            // dropping the z term when the plane is constant (σ = 0).
            let mut dxp = dx.index_axis_mut(Axis(0), ni);
            let mut dxp = dxp.index_axis_mut(Axis(0), ci);
            if sd == T::zero() {
                ndarray::Zip::from(&mut dxp)
                    .and(&gp)
                    .for_each(|o, &gv| *o = d * (gv - gmean));
            } else {
                let gz_mean = ndarray::Zip::from(&gp)
                    .and(&xp)
                    .fold(T::zero(), |a, &gv, &xv| a + gv * (xv - mu) / sd)
                    / len;
                let ds = d * sd;
                ndarray::Zip::from(&mut dxp)
                    .and(&gp)
                    .and(&xp)
                    .for_each(|o, &gv, &xv| {
                        let z = (xv - mu) / sd;
                        *o = d * (gv - gmean - ds * z * gz_mean);
                    });
            }
        }
    }
    dx
}
