//! Elementwise, reduction and shape ops on [`Var`].

use std::rc::Rc;

use super::{gemm, Var};
use crate::error::{Error, Result};
use crate::tensor::{invert_perm, strides_of, Tensor};

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = strides_of(shape);
    (0..nd)
        .map(|i| {
            if i + shape.len() < nd {
                0
            } else {
                let j = i + shape.len() - nd;
                if shape[j] == 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visits every output index of a broadcast binary op with the flat offsets
/// of both operands.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let strides = broadcast_strides(shape, out_shape);
    let mut acc = vec![0.0; shape.iter().product()];
    let zeros = vec![0; out_shape.len()];
    for_each_broadcast(out_shape, &strides, &zeros, |o, a, _| {
        acc[a] += grad.data()[o]
    });
    Tensor::from_raw(shape.to_vec(), acc)
}

/// Broadcasts `t` up to `shape`.
pub(crate) fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    let st = broadcast_strides(t.shape(), shape);
    let zeros = vec![0; shape.len()];
    let mut out = vec![0.0; shape.iter().product()];
    let td = t.data();
    for_each_broadcast(shape, &st, &zeros, |o, a, _| out[o] = td[a]);
    Tensor::from_raw(shape.to_vec(), out)
}

fn binary_value(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_raw(out_shape, out))
}

/// Elementwise `g * h(a, b)` evaluated on the broadcast grid.
fn binary_grad(g: &Tensor, a: &Tensor, b: &Tensor, h: impl Fn(f64, f64) -> f64) -> Tensor {
    let out_shape = g.shape();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = vec![0.0; g.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
        out[o] = gd[o] * h(ad[ia], bd[ib])
    });
    Tensor::from_raw(out_shape.to_vec(), out)
}

fn check_axis(axis: usize, nd: usize) -> Result<()> {
    if axis >= nd {
        Err(Error::shape(format!(
            "axis {axis} out of range for rank {nd}"
        )))
    } else {
        Ok(())
    }
}

/// Splits `shape` at `axis` into (outer, extent, inner) for strided loops.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_value(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(d[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..n {
                let e = (d[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                out[base + k * inner] /= s;
            }
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

pub(crate) fn softmax_grad(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(y.shape(), axis);
    let mut out = vec![0.0; y.numel()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n)
                .map(|k| yd[base + k * inner] * gd[base + k * inner])
                .sum();
            for k in 0..n {
                let p = base + k * inner;
                out[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::from_raw(y.shape().to_vec(), out)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = binary_value(&self.value(), &other.value(), f)?;
        self.tape.record(
            op,
            &[self, other],
            value,
            Box::new(move |g, inputs, _| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = reduce_to_shape(&binary_grad(g, a, b, da), a.shape());
                let gb = reduce_to_shape(&binary_grad(g, a, b, db), b.shape());
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        if self.shape() == other.shape() {
            let value = self.value().zip_map(&other.value(), |a, b| a + b);
            return self.tape.record(
                "add",
                &[self, other],
                value,
                Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
            );
        }
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // derivative from (input, output)
        df: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = self.value().map(f);
        self.tape.record(
            op,
            &[self],
            value,
            Box::new(move |g, inputs, out| {
                let x = &inputs[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_raw(x.shape().to_vec(), data))]
            }),
        )
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v * s);
        self.tape.record(
            "mul_scalar",
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(
            "relu",
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(
            "sigmoid",
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// `x^p` for positive inputs.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v.powf(p));
        self.tape.record(
            "powf",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let x = &inputs[0];
                vec![Some(g.zip_map(x, |g, x| g * p * x.powf(p - 1.0)))]
            }),
        )
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.record(
            "sum_all",
            &[self],
            value,
            Box::new(|g, inputs, _| vec![Some(Tensor::full(inputs[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.numel() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them with extent 1.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        for &a in axes {
            check_axis(a, shape.len())?;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let value = reduce_to_shape(&self.value(), &out_shape);
        self.tape.record(
            "sum_axes",
            &[self],
            value,
            Box::new(move |g, inputs, _| vec![Some(expand_to(g, inputs[0].shape()))]),
        )
    }

    /// Mean over `axes`, keeping them with extent 1.
    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes
            .iter()
            .map(|&a| shape.get(a).copied().unwrap_or(1))
            .product();
        self.sum_axes(axes)?.mul_scalar(1.0 / count as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        self.tape.record(
            "reshape",
            &[self],
            value,
            Box::new(|g, inputs, _| {
                vec![Some(Tensor::from_raw(
                    inputs[0].shape().to_vec(),
                    g.data().to_vec(),
                ))]
            }),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permute(perm)?;
        let inv = invert_perm(perm);
        self.tape.record(
            "permute",
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(g.permute(&inv).expect("valid inverse"))]),
        )
    }

    /// Transpose of a 2-D value.
    pub fn t(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("t() needs a 2-D value"));
        }
        self.permute(&[1, 0])
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis(axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of range for extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape.record(
            "narrow",
            &[self],
            Tensor::from_raw(out_shape, out),
            Box::new(move |g, inputs, _| {
                let mut gx = vec![0.0; inputs[0].numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_raw(inputs[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of an empty list"))?;
        let base_shape = first.shape();
        check_axis(axis, base_shape.len())?;
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} vs {base_shape:?}"
                )));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let tape = first.tape;
        tape.record(
            "concat",
            parts,
            Tensor::from_raw(out_shape, out),
            Box::new(move |g, inputs, _| {
                let mut grads: Vec<Vec<f64>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let gd = g.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &e) in grads.iter_mut().zip(&extents) {
                        gr.extend_from_slice(&gd[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .map(|(gr, x)| Some(Tensor::from_raw(x.shape().to_vec(), gr)))
                    .collect()
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value().data(),
            false,
            other.value().data(),
            false,
            &mut out,
            false,
        );
        self.tape.record(
            "matmul",
            &[self, other],
            Tensor::from_raw(vec![m, n], out),
            Box::new(move |g, inputs, _| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
                vec![
                    Some(Tensor::from_raw(vec![m, k], ga)),
                    Some(Tensor::from_raw(vec![k, n], gb)),
                ]
            }),
        )
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        check_axis(axis, self.shape().len())?;
        let value = softmax_value(&self.value(), axis);
        self.tape.record(
            "softmax",
            &[self],
            value,
            Box::new(move |g, _, y| vec![Some(softmax_grad(y, g, axis))]),
        )
    }

    /// Rows `indices` of a 2-D value, in the given order.
    pub fn select_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || indices.iter().any(|&i| i >= s[0]) || indices.is_empty() {
            return Err(Error::shape(format!("select_rows on {s:?}")));
        }
        let cols = s[1];
        let x = self.value();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let idx = indices.to_vec();
        self.tape.record(
            "select_rows",
            &[self],
            Tensor::from_raw(vec![indices.len(), cols], out),
            Box::new(move |g, inputs, _| {
                let mut gx = vec![0.0; inputs[0].numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[r * cols + c] += g.data()[k * cols + c];
                    }
                }
                vec![Some(Tensor::from_raw(inputs[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Copy of a 2-D value with rows `indices` replaced by `rows`
    /// (distinct indices required).
    pub fn put_rows(self, indices: &[usize], rows: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let rs = rows.shape();
        if s.len() != 2 || rs.len() != 2 || rs[1] != s[1] || rs[0] != indices.len() {
            return Err(Error::shape(format!("put_rows of {rs:?} into {s:?}")));
        }
        let mut seen = vec![false; s[0]];
        for &i in indices {
            if i >= s[0] || seen[i] {
                return Err(Error::shape("put_rows needs distinct in-range indices"));
            }
            seen[i] = true;
        }
        let cols = s[1];
        let mut out = self.value().data().to_vec();
        let r = rows.value();
        for (k, &i) in indices.iter().enumerate() {
            out[i * cols..(i + 1) * cols].copy_from_slice(&r.data()[k * cols..(k + 1) * cols]);
        }
        let idx = indices.to_vec();
        self.tape.record(
            "put_rows",
            &[self, rows],
            Tensor::from_raw(s.clone(), out),
            Box::new(move |g, inputs, _| {
                let mut gb = g.data().to_vec();
                let mut gr = vec![0.0; idx.len() * cols];
                for (k, &i) in idx.iter().enumerate() {
                    gr[k * cols..(k + 1) * cols]
                        .copy_from_slice(&g.data()[i * cols..(i + 1) * cols]);
                    gb[i * cols..(i + 1) * cols].fill(0.0);
                }
                vec![
                    Some(Tensor::from_raw(inputs[0].shape().to_vec(), gb)),
                    Some(Tensor::from_raw(inputs[1].shape().to_vec(), gr)),
                ]
            }),
        )
    }
}
