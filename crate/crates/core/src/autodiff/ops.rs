//! Forward definitions of every recorded operation.

use std::cell::Ref;

use super::gemm::{gemm, View, ViewMut};
use super::tape::{axis_split, gelu, Broadcast, Op, Var};
use super::{AutodiffError, Result, Tensor};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize], b_len: usize) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b_len == 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Broadcast::Suffix)
    } else {
        Err(mismatch(op, a, b))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let a = self.value();
            let b = other.value();
            let bc = broadcast_kind(name, a.shape(), b.shape(), b.len())?;
            let bd = b.data();
            let m = bd.len();
            let data: Vec<f64> = match bc {
                Broadcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Suffix => a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % m])).collect(),
                Broadcast::Scalar => a.data().iter().map(|&x| f(x, bd[0])).collect(),
            };
            (Tensor::from_parts(a.shape().to_vec(), data), bc)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out.0, make(self.id, other.id, out.1), rg))
    }

    /// Elementwise sum; `other` may be a trailing-suffix bias or a single value.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale { a: self.id, c }, |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::Shift { a: self.id }, |x| x + c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (m, k) = match a.shape() {
                [m, k] => (*m, *k),
                s => return Err(mismatch("matmul", s, b.shape())),
            };
            let n = match b.shape() {
                [k2, n] if *k2 == k => *n,
                s => return Err(mismatch("matmul", a.shape(), s)),
            };
            let mut data = vec![0.0; m * n];
            gemm(
                1.0,
                View::dense(a.data(), m, k),
                View::dense(b.data(), k, n),
                0.0,
                ViewMut::dense(&mut data, m, n),
            );
            Tensor::from_parts(vec![m, n], data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            let src = a.data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        };
        Ok(self.tape.push(out, Op::Transpose { a: self.id }, self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.to_tensor().reshaped(shape.to_vec())?;
        Ok(self.tape.push(out, Op::Reshape { a: self.id }, self.requires_grad()))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let tape = first.tape;
        let base = first.shape();
        if axis >= base.len() {
            return Err(AutodiffError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let v = p.value();
            let len_p = v.shape()[axis];
            let src = v.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len_p * inner].copy_from_slice(&src[o * len_p * inner..(o + 1) * len_p * inner]);
            }
            offset += len_p;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::from_parts(shape, data), Op::Concat { parts: ids, axis }, rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(AutodiffError::AxisOutOfRange {
                    op: "slice",
                    axis,
                    rank: shape.len(),
                });
            }
            if len == 0 || start + len > shape[axis] {
                return Err(AutodiffError::InvalidArgument(format!(
                    "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                    start + len
                )));
            }
            let (outer, total, inner) = axis_split(shape, axis);
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            let src = a.data();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * total + start) * inner;
                data.extend_from_slice(&src[from..from + len * inner]);
            }
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.tape.push(
            out,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum { a: self.id }, self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let s = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.tape
            .push(Tensor::scalar(s), Op::Mean { a: self.id }, self.requires_grad())
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(AutodiffError::AxisOutOfRange {
                    op: "mean_axis",
                    axis,
                    rank: shape.len(),
                });
            }
            let (outer, len, inner) = axis_split(shape, axis);
            let src = a.data();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += src[(o * len + l) * inner + i];
                    }
                }
            }
            data.iter_mut().for_each(|x| *x /= len as f64);
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Tensor::from_parts(out_shape, data)
        };
        Ok(self
            .tape
            .push(out, Op::MeanAxis { a: self.id, axis }, self.requires_grad()))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu { a: self.id }, |x| x.max(0.0))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu { a: self.id }, gelu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid { a: self.id }, sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh { a: self.id }, f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp { a: self.id }, f64::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log { a: self.id }, f64::ln)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs { a: self.id }, f64::abs)
    }

    /// `max(x, c)` elementwise.
    pub fn max_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::MaxScalar { a: self.id, c }, move |x| x.max(c))
    }

    /// Elementwise clamp built from two `max_scalar` ops.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.max_scalar(lo).neg().max_scalar(-hi).neg()
    }

    /// Forward `forward`, backward identity into `self` (straight-through estimator).
    pub fn straight_through(&self, forward: Tensor) -> Result<Var<'t>> {
        if forward.shape() != self.value().shape() {
            return Err(mismatch("straight_through", forward.shape(), &self.shape()));
        }
        Ok(self
            .tape
            .push(forward, Op::StraightThrough { a: self.id }, self.requires_grad()))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(AutodiffError::AxisOutOfRange {
                    op: "softmax",
                    axis,
                    rank: shape.len(),
                });
            }
            let (outer, len, inner) = axis_split(shape, axis);
            let src = a.data();
            let mut data = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for l in 0..len {
                        let e = (src[idx(l)] - max).exp();
                        data[idx(l)] = e;
                        total += e;
                    }
                    for l in 0..len {
                        data[idx(l)] /= total;
                    }
                }
            }
            Tensor::from_parts(shape.to_vec(), data)
        };
        Ok(self
            .tape
            .push(out, Op::Softmax { a: self.id, axis }, self.requires_grad()))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (out, xhat, inv_std) = {
            let x = self.value();
            let shape = x.shape();
            let c = *shape.last().ok_or_else(|| mismatch("layer_norm", shape, &[]))?;
            let g = gain.value();
            let b = bias.value();
            if g.shape() != [c] || b.shape() != [c] {
                return Err(mismatch("layer_norm", shape, g.shape()));
            }
            let rows = x.len() / c;
            let src = x.data();
            let mut xhat = vec![0.0; src.len()];
            let mut inv_std = vec![0.0; rows];
            let mut data = vec![0.0; src.len()];
            for r in 0..rows {
                let row = &src[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..c {
                    let h = (row[j] - mean) * inv;
                    xhat[r * c + j] = h;
                    data[r * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::from_parts(shape.to_vec(), data), xhat, inv_std)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(out, op, rg))
    }

    /// Multi-head scaled dot-product attention over already-projected inputs.
    ///
    /// `q` is `(n_q, C)`, `k` and `v` are `(n_kv, C)`. `mask[i * n_kv + j] == false`
    /// hides key `j` from query `i`.
    pub fn attention(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, heads: usize, mask: Option<&[bool]>) -> Result<Var<'t>> {
        q.same_tape(k);
        q.same_tape(v);
        let (out, probs) = {
            let qv = q.value();
            let kv = k.value();
            let vv = v.value();
            let (nq, c) = qv.dims2()?;
            let (nk, ck) = kv.dims2()?;
            if ck != c || vv.shape() != kv.shape() {
                return Err(mismatch("attention", qv.shape(), kv.shape()));
            }
            if heads == 0 || c % heads != 0 {
                return Err(AutodiffError::InvalidArgument(format!(
                    "model dim {c} not divisible by {heads} heads"
                )));
            }
            if let Some(m) = mask {
                if m.len() != nq * nk {
                    return Err(mismatch("attention mask", &[m.len()], &[nq, nk]));
                }
                if let Some(row) = (0..nq).find(|r| !m[r * nk..(r + 1) * nk].iter().any(|&b| b)) {
                    return Err(AutodiffError::AllMasked { row });
                }
            }
            let dh = c / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut probs = vec![0.0; heads * nq * nk];
            let mut out = vec![0.0; nq * c];
            for h in 0..heads {
                let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
                gemm(
                    scale,
                    View::columns(qv.data(), nq, c, h * dh, dh),
                    View::columns(kv.data(), nk, c, h * dh, dh).t(),
                    0.0,
                    ViewMut::dense(p, nq, nk),
                );
                for r in 0..nq {
                    let row = &mut p[r * nk..(r + 1) * nk];
                    let visible = |j: usize| mask.is_none_or(|m| m[r * nk + j]);
                    let max = (0..nk)
                        .filter(|&j| visible(j))
                        .map(|j| row[j])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if visible(j) { (*x - max).exp() } else { 0.0 };
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                }
                gemm(
                    1.0,
                    View::dense(p, nq, nk),
                    View::columns(vv.data(), nk, c, h * dh, dh),
                    0.0,
                    ViewMut::columns(&mut out, nq, c, h * dh, dh),
                );
            }
            (Tensor::from_parts(vec![nq, c], out), probs)
        };
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        let op = Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            heads,
            probs,
        };
        Ok(q.tape.push(out, op, rg))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
