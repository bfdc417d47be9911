//! Primitive forward/backward implementations.
//!
//! Each method records one node on the tape. Shape violations are
//! programmer errors and panic with the offending shapes; value-level
//! problems (non-finite outputs) trip the debug assertion in the tape.

use crate::graph::{Graph, Var};
use crate::Tensor;

/// Activations searchable in the block and MLP choice sets. Dice is
/// handled separately because it carries state (see [`Graph::dice`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Act {
    Relu,
    Gelu,
    Swish,
    Identity,
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value(x).map(f);
        self.push_op(
            value,
            vec![x],
            Box::new(move |g, parents, _| {
                let x = parents[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&go, &xi)| go * df(xi, 0.0))
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)]),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, parents, _| {
                let (a, b) = (parents[0], parents[1]);
                let da = g.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![
                    Tensor::new(a.shape().to_vec(), da),
                    Tensor::new(b.shape().to_vec(), db),
                ]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |xi, _| {
            let s = sigmoid_scalar(xi);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |xi, _| 1.0 - xi.tanh().powi(2))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |xi, _| if xi > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact Gaussian-CDF form, x * Phi(x).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, |xi, _| gelu_grad_scalar(xi))
    }

    /// x * sigmoid(x).
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid_scalar(v), |xi, _| {
            let s = sigmoid_scalar(xi);
            s * (1.0 + xi * (1.0 - s))
        })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, |xi, _| sigmoid_scalar(xi))
    }

    pub fn apply_act(&mut self, act: Act, x: Var) -> Var {
        match act {
            Act::Relu => self.relu(x),
            Act::Gelu => self.gelu(x),
            Act::Swish => self.swish(x),
            Act::Identity => x,
        }
    }

    /// Dice activation (state passed in as running statistics):
    /// p = sigmoid((x - mean)/sqrt(var + eps)), y = p*x + alpha*(1-p)*x.
    /// `alpha` is a learnable per-feature vector; the statistics are
    /// treated as constants of the step.
    pub fn dice(&mut self, x: Var, alpha: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(mean.len(), d, "dice: mean width");
        assert_eq!(var.len(), d, "dice: var width");
        assert_eq!(self.value(alpha).shape(), [d], "dice: alpha width");
        let neg_mean = self.constant(Tensor::vector(mean.iter().map(|m| -m).collect()));
        let inv_std = self.constant(Tensor::vector(
            var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        ));
        let centered = self.add_rows(x, neg_mean);
        let xn = self.mul_rows(centered, inv_std);
        let p = self.sigmoid(xn);
        let gated = self.mul(p, x);
        let one_minus_p = self.unary(p, |v| 1.0 - v, |_, _| -1.0);
        let anti = self.mul(one_minus_p, x);
        let anti = self.mul_rows(anti, alpha);
        self.add(gated, anti)
    }

    /// Broadcast add of a length-d vector over the last axis.
    pub fn add_rows(&mut self, x: Var, b: Var) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(b).shape(), [d], "add_rows: bias width");
        let mut value = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bd[i % d];
        }
        self.push_op(
            value,
            vec![x, b],
            Box::new(move |g, parents, _| {
                let d = parents[1].numel();
                let mut db = vec![0.0; d];
                for (i, &go) in g.data().iter().enumerate() {
                    db[i % d] += go;
                }
                vec![g.clone(), Tensor::vector(db)]
            }),
        )
    }

    /// Broadcast multiply by a length-d vector over the last axis.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(v).shape(), [d], "mul_rows: vector width");
        let vd = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, y) in value.data_mut().iter_mut().enumerate() {
            *y *= vd[i % d];
        }
        self.push_op(
            value,
            vec![x, v],
            Box::new(move |g, parents, _| {
                let (x, v) = (parents[0], parents[1]);
                let d = v.numel();
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &go)| go * v.data()[i % d])
                    .collect();
                let mut dv = vec![0.0; d];
                for (i, &go) in g.data().iter().enumerate() {
                    dv[i % d] += go * x.data()[i];
                }
                vec![Tensor::new(x.shape().to_vec(), dx), Tensor::vector(dv)]
            }),
        )
    }

    /// y[.., r, k] = x[.., r, k] * s[.., r]: per-row scaling where `s`
    /// matches `x` with the last axis dropped.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let k = *xs.last().expect("scale_rows: x must have rank >= 1");
        assert_eq!(
            self.value(s).shape(),
            &xs[..xs.len() - 1],
            "scale_rows: scale shape must be x shape minus last axis"
        );
        let sd = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, y) in value.data_mut().iter_mut().enumerate() {
            *y *= sd[i / k];
        }
        self.push_op(
            value,
            vec![x, s],
            Box::new(move |g, parents, _| {
                let (x, s) = (parents[0], parents[1]);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &go)| go * s.data()[i / k])
                    .collect();
                let mut ds = vec![0.0; s.numel()];
                for (i, &go) in g.data().iter().enumerate() {
                    ds[i / k] += go * x.data()[i];
                }
                vec![
                    Tensor::new(x.shape().to_vec(), dx),
                    Tensor::new(s.shape().to_vec(), ds),
                ]
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_op(
            Tensor::new(vec![m, n], value),
            vec![a, b],
            Box::new(move |g, parents, _| {
                let (a, b) = (parents[0], parents[1]);
                // da = g * b^T, db = a^T * g
                let bt = transpose_raw(b.data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(a.data(), m, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                vec![Tensor::new(vec![m, k], da), Tensor::new(vec![k, n], db)]
            }),
        )
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "batch_matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let block = matmul_raw(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&block);
        }
        self.push_op(
            Tensor::new(vec![bs, m, n], out),
            vec![a, b],
            Box::new(move |g, parents, _| {
                let (a, b) = (parents[0], parents[1]);
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let bt = transpose_raw(bi, k, n);
                    da[i * m * k..(i + 1) * m * k]
                        .copy_from_slice(&matmul_raw(gi, &bt, m, n, k));
                    let at = transpose_raw(ai, m, k);
                    db[i * k * n..(i + 1) * k * n]
                        .copy_from_slice(&matmul_raw(&at, gi, k, m, n));
                }
                vec![
                    Tensor::new(vec![bs, m, k], da),
                    Tensor::new(vec![bs, k, n], db),
                ]
            }),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert!(s.len() >= 2, "transpose_last2: rank >= 2 required");
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let outer: usize = s[..s.len() - 2].iter().product();
        let mut out_shape = s.clone();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let mut out = vec![0.0; self.value(x).numel()];
        for o in 0..outer {
            let src = &self.value(x).data()[o * m * n..(o + 1) * m * n];
            out[o * m * n..(o + 1) * m * n].copy_from_slice(&transpose_raw(src, m, n));
        }
        self.push_op(
            Tensor::new(out_shape, out),
            vec![x],
            Box::new(move |g, parents, _| {
                let mut dx = vec![0.0; parents[0].numel()];
                for o in 0..outer {
                    let src = &g.data()[o * m * n..(o + 1) * m * n];
                    dx[o * m * n..(o + 1) * m * n].copy_from_slice(&transpose_raw(src, n, m));
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        self.push_op(
            value,
            vec![x],
            Box::new(|g, parents, _| vec![g.clone().reshaped(parents[0].shape().to_vec())]),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let base = self.value(parts[0]).shape().to_vec();
        assert!(axis < base.len(), "concat: axis out of range");
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), base.len(), "concat: rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                assert!(i == axis || a == b, "concat: off-axis extent mismatch");
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &p in parts {
            let e = self.value(p).shape()[axis];
            offsets.push((off, e));
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * axis_total + off) * inner;
                let src_start = o * e * inner;
                out[dst_start..dst_start + e * inner]
                    .copy_from_slice(&src[src_start..src_start + e * inner]);
            }
            off += e;
        }
        self.push_op(
            Tensor::new(out_shape, out),
            parts.to_vec(),
            Box::new(move |g, parents, _| {
                parents
                    .iter()
                    .zip(&offsets)
                    .map(|(p, &(off, e))| {
                        let mut dx = vec![0.0; p.numel()];
                        for o in 0..outer {
                            let src_start = (o * axis_total + off) * inner;
                            dx[o * e * inner..(o + 1) * e * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + e * inner]);
                        }
                        Tensor::new(p.shape().to_vec(), dx)
                    })
                    .collect()
            }),
        )
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert!(axis < s.len() && start + len <= s[axis],
            "narrow: [{start}, {start}+{len}) out of axis {axis} of {s:?}");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let e = s[axis];
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * e + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&self.value(x).data()[src_start..src_start + len * inner]);
        }
        self.push_op(
            Tensor::new(out_shape, out),
            vec![x],
            Box::new(move |g, parents, _| {
                let mut dx = vec![0.0; parents[0].numel()];
                for o in 0..outer {
                    let dst_start = (o * e + start) * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// Leading (rows, cols) sub-matrix of a 2-D weight, for width slicing.
    pub fn slice2d(&mut self, w: Var, rows: usize, cols: usize) -> Var {
        let r = self.narrow(w, 0, 0, rows);
        self.narrow(r, 1, 0, cols)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        self.push_op(
            Tensor::scalar(total),
            vec![x],
            Box::new(|g, parents, _| {
                let go = g.item();
                vec![Tensor::full(parents[0].shape(), go)]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert!(axis < s.len(), "sum_axis: axis out of range");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let e = s[axis];
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let base = (o * e + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.value(x).data()[base + i];
                }
            }
        }
        self.push_op(
            Tensor::new(out_shape, out),
            vec![x],
            Box::new(move |g, parents, _| {
                let mut dx = vec![0.0; parents[0].numel()];
                for o in 0..outer {
                    for j in 0..e {
                        let base = (o * e + j) * inner;
                        for i in 0..inner {
                            dx[base + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push_op(
            value,
            vec![x],
            Box::new(move |g, parents, out| {
                let mut dx = vec![0.0; parents[0].numel()];
                for (r, (grow, yrow)) in g.data().chunks(d).zip(out.data().chunks(d)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dx[r * d + i] = yrow[i] * (grow[i] - dot);
                    }
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// 1-D convolution over (B, T, d_in) with stride 1, SAME zero padding
    /// and the given dilation; kernel (k, d_in, d_out), bias (d_out).
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 3 && ws.len() == 3 && xs[2] == ws[1],
            "conv1d_same: x {xs:?} w {ws:?}");
        let (bs, t, din) = (xs[0], xs[1], xs[2]);
        let (k, dout) = (ws[0], ws[2]);
        assert_eq!(self.value(b).shape(), [dout], "conv1d_same: bias width");
        let pad = (k - 1) * dilation / 2;
        let mut out = vec![0.0; bs * t * dout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for bi in 0..bs {
                for ti in 0..t {
                    let orow = (bi * t + ti) * dout;
                    out[orow..orow + dout].copy_from_slice(bd);
                    for j in 0..k {
                        let src = ti as isize + (j * dilation) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let xrow = (bi * t + src as usize) * din;
                        for i in 0..din {
                            let xv = xd[xrow + i];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = (j * din + i) * dout;
                            for o in 0..dout {
                                out[orow + o] += xv * wd[wrow + o];
                            }
                        }
                    }
                }
            }
        }
        self.push_op(
            Tensor::new(vec![bs, t, dout], out),
            vec![x, w, b],
            Box::new(move |g, parents, _| {
                let (x, w) = (parents[0], parents[1]);
                let mut dx = vec![0.0; x.numel()];
                let mut dw = vec![0.0; w.numel()];
                let mut db = vec![0.0; dout];
                for bi in 0..bs {
                    for ti in 0..t {
                        let grow = (bi * t + ti) * dout;
                        for o in 0..dout {
                            db[o] += g.data()[grow + o];
                        }
                        for j in 0..k {
                            let src = ti as isize + (j * dilation) as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let xrow = (bi * t + src as usize) * din;
                            for i in 0..din {
                                let wrow = (j * din + i) * dout;
                                let mut acc = 0.0;
                                for o in 0..dout {
                                    let go = g.data()[grow + o];
                                    acc += go * w.data()[wrow + o];
                                    dw[wrow + o] += go * x.data()[xrow + i];
                                }
                                dx[xrow + i] += acc;
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(x.shape().to_vec(), dx),
                    Tensor::new(w.shape().to_vec(), dw),
                    Tensor::vector(db),
                ]
            }),
        )
    }

    /// Average pooling over (B, T, d), window k, stride 1, SAME zero
    /// padding; the divisor is always k (pads count as zeros).
    pub fn avg_pool1d_same(&mut self, x: Var, k: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert!(xs.len() == 3, "avg_pool1d_same: expected (B,T,d)");
        let (bs, t, d) = (xs[0], xs[1], xs[2]);
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; bs * t * d];
        {
            let xd = self.value(x).data();
            for bi in 0..bs {
                for ti in 0..t {
                    for j in 0..k {
                        let src = ti as isize + j as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let xrow = (bi * t + src as usize) * d;
                        let orow = (bi * t + ti) * d;
                        for i in 0..d {
                            out[orow + i] += xd[xrow + i] / k as f64;
                        }
                    }
                }
            }
        }
        self.push_op(
            Tensor::new(vec![bs, t, d], out),
            vec![x],
            Box::new(move |g, parents, _| {
                let mut dx = vec![0.0; parents[0].numel()];
                for bi in 0..bs {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let xrow = (bi * t + src as usize) * d;
                            let orow = (bi * t + ti) * d;
                            for i in 0..d {
                                dx[xrow + i] += g.data()[orow + i] / k as f64;
                            }
                        }
                    }
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// Max pooling over (B, T, d), window k, stride 1, SAME padding; the
    /// maximum is taken over valid (unpadded) positions only and ties
    /// resolve to the earliest position.
    pub fn max_pool1d_same(&mut self, x: Var, k: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert!(xs.len() == 3, "max_pool1d_same: expected (B,T,d)");
        let (bs, t, d) = (xs[0], xs[1], xs[2]);
        let pad = (k - 1) / 2;
        let argmax = move |xd: &[f64], bi: usize, ti: usize, i: usize| -> usize {
            let mut best_src = usize::MAX;
            let mut best = f64::NEG_INFINITY;
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let v = xd[(bi * t + src as usize) * d + i];
                if best_src == usize::MAX || v > best {
                    best = v;
                    best_src = src as usize;
                }
            }
            best_src
        };
        let mut out = vec![0.0; bs * t * d];
        {
            let xd = self.value(x).data();
            for bi in 0..bs {
                for ti in 0..t {
                    for i in 0..d {
                        let src = argmax(xd, bi, ti, i);
                        out[(bi * t + ti) * d + i] = xd[(bi * t + src) * d + i];
                    }
                }
            }
        }
        self.push_op(
            Tensor::new(vec![bs, t, d], out),
            vec![x],
            Box::new(move |g, parents, _| {
                let xd = parents[0].data();
                let mut dx = vec![0.0; parents[0].numel()];
                for bi in 0..bs {
                    for ti in 0..t {
                        for i in 0..d {
                            let src = argmax(xd, bi, ti, i);
                            dx[(bi * t + src) * d + i] += g.data()[(bi * t + ti) * d + i];
                        }
                    }
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// Layer normalization over the last axis with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(gamma).shape(), [d], "layer_norm: gamma width");
        assert_eq!(self.value(beta).shape(), [d], "layer_norm: beta width");
        let mut value = self.value(x).clone();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        for row in value.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = gd[i] * (*v - mean) * inv + bd[i];
            }
        }
        self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, parents, _| {
                let (x, gamma) = (parents[0], parents[1]);
                let rows = x.numel() / d;
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xrow = &x.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> = grow
                        .iter()
                        .zip(gamma.data())
                        .map(|(go, ga)| go * ga)
                        .collect();
                    let mean_gg = gg.iter().sum::<f64>() / d as f64;
                    let mean_gg_xhat =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[r * d + i] = (gg[i] - mean_gg - xhat[i] * mean_gg_xhat) * inv;
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                }
                vec![
                    Tensor::new(x.shape().to_vec(), dx),
                    Tensor::vector(dgamma),
                    Tensor::vector(dbeta),
                ]
            }),
        )
    }

    /// Embedding lookup with multi-hot summation: row n of the output is
    /// the sum of the table rows named by `groups[n]` (empty group -> zero
    /// vector). Backward scatters additively into the table.
    pub fn gather_sum(&mut self, table: Var, groups: &[Vec<u32>]) -> Var {
        let ts = self.value(table).shape().to_vec();
        assert_eq!(ts.len(), 2, "gather_sum: table must be (V, K)");
        let (v, k) = (ts[0], ts[1]);
        for g in groups {
            for &id in g {
                assert!((id as usize) < v, "gather_sum: id {id} out of range {v}");
            }
        }
        let n = groups.len();
        let mut out = vec![0.0; n * k];
        {
            let td = self.value(table).data();
            for (row, group) in groups.iter().enumerate() {
                for &id in group {
                    let src = id as usize * k;
                    for i in 0..k {
                        out[row * k + i] += td[src + i];
                    }
                }
            }
        }
        let groups = groups.to_vec();
        self.push_op(
            Tensor::new(vec![n, k], out),
            vec![table],
            Box::new(move |g, parents, _| {
                let mut dt = vec![0.0; parents[0].numel()];
                for (row, group) in groups.iter().enumerate() {
                    for &id in group {
                        let dst = id as usize * k;
                        for i in 0..k {
                            dt[dst + i] += g.data()[row * k + i];
                        }
                    }
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dt)]
            }),
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Var {
        let groups: Vec<Vec<u32>> = ids.iter().map(|&i| vec![i]).collect();
        self.gather_sum(table, &groups)
    }

    /// Repeat (B, d) rows along a new middle axis: -> (B, t, d).
    pub fn broadcast_middle(&mut self, x: Var, t: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "broadcast_middle: expected (B, d)");
        let (b, d) = (xs[0], xs[1]);
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            let row = &self.value(x).data()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                out[(bi * t + ti) * d..(bi * t + ti) * d + d].copy_from_slice(row);
            }
        }
        self.push_op(
            Tensor::new(vec![b, t, d], out),
            vec![x],
            Box::new(move |g, parents, _| {
                let mut dx = vec![0.0; parents[0].numel()];
                for bi in 0..b {
                    for ti in 0..t {
                        for i in 0..d {
                            dx[bi * d + i] += g.data()[(bi * t + ti) * d + i];
                        }
                    }
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// Pick one time position per batch element: (B, T, d) -> (B, d).
    pub fn select_time(&mut self, x: Var, idx: &[usize]) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert!(xs.len() == 3 && idx.len() == xs[0], "select_time: (B,T,d) and B indices");
        let (t, d) = (xs[1], xs[2]);
        for &i in idx {
            assert!(i < t, "select_time: index {i} out of T={t}");
        }
        let mut out = vec![0.0; idx.len() * d];
        for (bi, &ti) in idx.iter().enumerate() {
            out[bi * d..(bi + 1) * d]
                .copy_from_slice(&self.value(x).data()[(bi * t + ti) * d..(bi * t + ti) * d + d]);
        }
        let idx = idx.to_vec();
        self.push_op(
            Tensor::new(vec![idx.len(), d], out),
            vec![x],
            Box::new(move |g, parents, _| {
                let mut dx = vec![0.0; parents[0].numel()];
                for (bi, &ti) in idx.iter().enumerate() {
                    dx[(bi * t + ti) * d..(bi * t + ti) * d + d]
                        .copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                vec![Tensor::new(parents[0].shape().to_vec(), dx)]
            }),
        )
    }

    /// Affine layer y = x W + b for x (n, d_in), W (d_in, d_out), b (d_out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_rows(y, b)
    }

    /// Per-example dot product of two (n, d) tensors -> (n,).
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_axis(p, 1)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
