//! Convolution, pooling, resampling and loss ops.

use super::{gemm, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Output extent of a convolution window sweep.
pub fn conv_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::config("kernel and stride must be positive"));
    }
    let span = extent + 2 * padding;
    if span < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded extent {span}"
        )));
    }
    if !(span - kernel).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "extent {extent} with kernel {kernel}, padding {padding} and stride {stride} \
             does not give an integral output extent"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, hw_out) = (self.k, self.ho * self.wo);
        let mut cols = vec![0.0; self.c * k * k * hw_out];
        for c in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src_row = &x[(c * self.h + ii as usize) * self.w..];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.wo + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let (k, hw_out) = (self.k, self.ho * self.wo);
        for c in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                gx[base + jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn expect_rank4(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "{what} expects [B, C, H, W], got {shape:?}"
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[B,C,H,W]` with `[O,C,k,k]`, plus optional `[O]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = weight.shape();
        expect_rank4(&xs, "conv2d input")?;
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d kernel must be [O, C, k, k], got {ws:?}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {xs:?}, kernel {ws:?}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    ws[0],
                    b.shape()
                )));
            }
        }
        let (bsz, o, k) = (xs[0], ws[0], ws[2]);
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad: padding,
            ho: conv_output_extent(xs[2], k, stride, padding)?,
            wo: conv_output_extent(xs[3], k, stride, padding)?,
        };
        let ckk = geom.c * k * k;
        let hw_out = geom.ho * geom.wo;
        let in_plane = geom.c * geom.h * geom.w;
        let x = self.value();
        let wv = weight.value();
        let bias_data: Option<Vec<f64>> = bias.map(|b| b.value().data().to_vec());
        let mut out = vec![0.0; bsz * o * hw_out];
        {
            let (xd, wd) = (x.data(), wv.data());
            par::for_each_chunk_mut(&mut out, o * hw_out, |b, dst| {
                let xb = &xd[b * in_plane..(b + 1) * in_plane];
                if geom.is_pointwise() {
                    gemm(o, ckk, hw_out, wd, false, xb, false, dst, false);
                } else {
                    let cols = geom.im2col(xb);
                    gemm(o, ckk, hw_out, wd, false, &cols, false, dst, false);
                }
                if let Some(bv) = &bias_data {
                    for (oc, row) in dst.chunks_mut(hw_out).enumerate() {
                        let bias = bv[oc];
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                }
            });
        }
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        self.tape.record(
            "conv2d",
            &inputs,
            Tensor::from_raw(vec![bsz, o, geom.ho, geom.wo], out),
            Box::new(move |g, inputs, _| {
                let (x, w) = (&inputs[0], &inputs[1]);
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                let per_batch: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(bsz, |b| {
                    let xb = &xd[b * in_plane..(b + 1) * in_plane];
                    let gb = &gd[b * o * hw_out..(b + 1) * o * hw_out];
                    let mut gw = vec![0.0; o * ckk];
                    let mut gx = vec![0.0; in_plane];
                    if geom.is_pointwise() {
                        gemm(o, hw_out, ckk, gb, false, xb, true, &mut gw, false);
                        gemm(ckk, o, hw_out, wd, true, gb, false, &mut gx, false);
                    } else {
                        let cols = geom.im2col(xb);
                        gemm(o, hw_out, ckk, gb, false, &cols, true, &mut gw, false);
                        let mut gcols = vec![0.0; ckk * hw_out];
                        gemm(ckk, o, hw_out, wd, true, gb, false, &mut gcols, false);
                        geom.col2im(&gcols, &mut gx);
                    }
                    (gx, gw)
                });
                let mut gx_all = Vec::with_capacity(bsz * in_plane);
                let mut gw_all = vec![0.0; o * ckk];
                for (gx, gw) in per_batch {
                    gx_all.extend_from_slice(&gx);
                    gw_all.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                }
                let mut grads = vec![
                    Some(Tensor::from_raw(x.shape().to_vec(), gx_all)),
                    Some(Tensor::from_raw(w.shape().to_vec(), gw_all)),
                ];
                if has_bias {
                    let mut gbias = vec![0.0; o];
                    for b in 0..bsz {
                        for (oc, acc) in gbias.iter_mut().enumerate() {
                            let start = (b * o + oc) * hw_out;
                            *acc += gd[start..start + hw_out].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::from_raw(vec![o], gbias)));
                }
                grads
            }),
        )
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// raster order.
    pub fn max_pool2x2(self) -> Result<Var<'t>> {
        let s = self.shape();
        expect_rank4(&s, "max_pool2x2")?;
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool2x2 needs even extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value();
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut arg = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let p = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[p] > xd[best] {
                            best = p;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        self.tape.record(
            "max_pool2x2",
            &[self],
            Tensor::from_raw(vec![b, c, ho, wo], out),
            Box::new(move |g, inputs, _| {
                let mut gx = vec![0.0; inputs[0].numel()];
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    gx[a] += gv;
                }
                vec![Some(Tensor::from_raw(inputs[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Mean over each `H×W` plane: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        expect_rank4(&self.shape(), "global_avg_pool")?;
        self.mean_axes(&[2, 3])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        if factor < 1 {
            return Err(Error::config("upsampling factor must be at least 1"));
        }
        let s = self.shape();
        expect_rank4(&s, "upsample_nearest")?;
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value();
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            for i in 0..ho {
                let row = &xd[plane * h * w + (i / factor) * w..][..w];
                for j in 0..wo {
                    out.push(row[j / factor]);
                }
            }
        }
        self.tape.record(
            "upsample_nearest",
            &[self],
            Tensor::from_raw(vec![b, c, ho, wo], out),
            Box::new(move |g, inputs, _| {
                let mut gx = vec![0.0; inputs[0].numel()];
                let gd = g.data();
                for plane in 0..b * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[plane * h * w + (i / factor) * w + j / factor] +=
                                gd[plane * ho * wo + i * wo + j];
                        }
                    }
                }
                vec![Some(Tensor::from_raw(inputs[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Pixel-wise cross entropy of `[B,K,H,W]` logits against class indices
    /// `[B,H,W]`, restricted to pixels where `fov` is 1 and divided by
    /// `norm`. Per-pixel losses are capped at `-ln 1e-12`; the gradient stays
    /// `q - onehot` on capped pixels so saturated mistakes still train.
    pub fn cross_entropy_sum(self, target: &Tensor, fov: &Tensor, norm: f64) -> Result<Var<'t>> {
        let cap = -(1e-12f64).ln();
        let s = self.shape();
        expect_rank4(&s, "cross_entropy")?;
        let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
        if target.shape() != [b, h, w] || fov.shape() != [b, h, w] {
            return Err(Error::shape(format!(
                "cross_entropy targets {:?} / fov {:?} do not match logits {s:?}",
                target.shape(),
                fov.shape()
            )));
        }
        if norm <= 0.0 {
            return Err(Error::contract("cross_entropy normaliser must be positive"));
        }
        let hw = h * w;
        let z = self.value();
        let q = super::ops::softmax_value(&z, 1);
        let (zd, qd, td, fd) = (z.data(), q.data(), target.data(), fov.data());
        let mut total = 0.0;
        let mut grad = vec![0.0; q.numel()];
        for bi in 0..b {
            for p in 0..hw {
                let flat = bi * hw + p;
                if fd[flat] == 0.0 {
                    continue;
                }
                let cls = td[flat];
                if cls < 0.0 || cls.fract() != 0.0 || cls as usize >= k {
                    return Err(Error::contract(format!(
                        "target value {cls} is not a class index below {k}"
                    )));
                }
                let cls = cls as usize;
                let at = |c: usize| (bi * k + c) * hw + p;
                let zmax = (0..k).map(|c| zd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = zmax + (0..k).map(|c| (zd[at(c)] - zmax).exp()).sum::<f64>().ln();
                total += (lse - zd[at(cls)]).min(cap);
                for c in 0..k {
                    let onehot = if c == cls { 1.0 } else { 0.0 };
                    grad[at(c)] = (qd[at(c)] - onehot) / norm;
                }
            }
        }
        let grad = Tensor::from_raw(s.clone(), grad);
        self.tape.record(
            "cross_entropy",
            &[self],
            Tensor::scalar(total / norm),
            Box::new(move |g, _, _| vec![Some(grad.map(|v| v * g.item()))]),
        )
    }

    /// Mean cross entropy over field-of-view pixels.
    pub fn cross_entropy(self, target: &Tensor, fov: &Tensor) -> Result<Var<'t>> {
        let count = fov.data().iter().filter(|&&v| v != 0.0).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy over an empty field of view"));
        }
        self.cross_entropy_sum(target, fov, count as f64)
    }
}
