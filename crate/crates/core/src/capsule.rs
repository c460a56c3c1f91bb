//! Capsules, the squash nonlinearity, dynamic routing and the graph capsule
//! convolution.
//!
//! Capsule tensors use the axis order `[B, H, W, K², C, L, V]`: batch,
//! spatial position, kernel window position, capsule channel, capsule and
//! atom. Routing collapses the window and capsule axes of each
//! `(b, h, w, c)` location into `L` output capsules, so routed tensors have
//! `K² = 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{GraphActivation, GraphConvLayer};
use crate::nn::{Conv2d, Ctx, ParamId, ParamKind, ParamStore};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    /// Capsule channels `C`.
    pub cap_channels: usize,
    /// Capsules per channel `L`.
    pub capsules: usize,
    /// Atoms per capsule `V`.
    pub atoms: usize,
    /// Window extent `K`.
    pub kernel: usize,
    pub iterations: usize,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        CapsuleConfig {
            cap_channels: 4,
            capsules: 4,
            atoms: 4,
            kernel: 3,
            iterations: 3,
        }
    }
}

impl CapsuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cap_channels == 0 || self.capsules == 0 || self.atoms == 0 {
            return Err(Error::config(
                "capsule channels, capsules and atoms must be positive",
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "capsule window must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        Ok(())
    }

    /// Feature channels of one capsule window position, `C·L·V`.
    pub fn width(&self) -> usize {
        self.cap_channels * self.capsules * self.atoms
    }
}

/// A differentiable value with `[B, H, W, K², C, L, V]` axis semantics.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleTensor<'t> {
    pub data: Var<'t>,
}

impl<'t> CapsuleTensor<'t> {
    pub fn new(data: Var<'t>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 7 || s.contains(&0) {
            return Err(Error::shape(format!(
                "capsule tensors are [B, H, W, K², C, L, V], got {s:?}"
            )));
        }
        Ok(CapsuleTensor { data })
    }

    pub fn dims(&self) -> [usize; 7] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3], s[4], s[5], s[6]]
    }
}

/// `v = s · ‖s‖ / (1 + ‖s‖²)`, which is `(‖s‖² / (1 + ‖s‖²)) · s / ‖s‖`
/// with the `s = 0` case mapped to zero.
pub fn squash_value(s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    squash_into(s, &mut out);
    out
}

fn squash_into(s: &[f64], out: &mut [f64]) {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        out.fill(0.0);
        return;
    }
    let f = n2.sqrt() / (1.0 + n2);
    for (o, x) in out.iter_mut().zip(s) {
        *o = f * x;
    }
}

/// Vector-Jacobian product of [`squash_value`], accumulated into `gs`.
fn squash_backward(s: &[f64], gv: &[f64], gs: &mut [f64]) {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return;
    }
    let n = n2.sqrt();
    let d = 1.0 + n2;
    let f = n / d;
    let df_over_n = (1.0 - n2) / (d * d * n);
    let proj: f64 = s.iter().zip(gv).map(|(a, b)| a * b).sum();
    for ((g, x), v) in gs.iter_mut().zip(s).zip(gv) {
        *g += f * v + df_over_n * proj * x;
    }
}

impl<'t> Var<'t> {
    /// Squash along the last axis.
    pub fn squash(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let v = *shape
            .last()
            .ok_or_else(|| Error::shape("squash of a scalar"))?;
        let x = self.value();
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks(v).zip(out.chunks_mut(v)) {
            squash_into(src, dst);
        }
        self.tape().record(
            "squash",
            &[self],
            Tensor::from_raw(shape, out),
            Box::new(move |g, inputs, _| {
                let x = &inputs[0];
                let mut gx = vec![0.0; x.numel()];
                for ((s, gv), gs) in x
                    .data()
                    .chunks(v)
                    .zip(g.data().chunks(v))
                    .zip(gx.chunks_mut(v))
                {
                    squash_backward(s, gv, gs);
                }
                vec![Some(Tensor::from_raw(x.shape().to_vec(), gx))]
            }),
        )
    }
}

/// Routing works on votes laid out `[J, V, I]` (upper capsule, atom, lower
/// capsule) so the long lower-capsule axis is innermost.
#[derive(Debug, Clone, Copy)]
struct RouteDims {
    i: usize,
    j: usize,
    v: usize,
    t: usize,
}

/// Per-iteration routing state of one location.
struct Trace {
    /// Agreement logits entering each iteration, `[T, J, I]`.
    b: Vec<f64>,
    /// Couplings, `[T, J, I]`.
    c: Vec<f64>,
    /// Weighted sums, `[T, J, V]`.
    s: Vec<f64>,
    /// Squashed outputs, `[T, J, V]`.
    v: Vec<f64>,
    scratch: Vec<f64>,
}

impl Trace {
    fn new(d: RouteDims) -> Self {
        Trace {
            b: vec![0.0; d.t * d.i * d.j],
            c: vec![0.0; d.t * d.i * d.j],
            s: vec![0.0; d.t * d.j * d.v],
            v: vec![0.0; d.t * d.j * d.v],
            scratch: vec![0.0; 2 * d.i],
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Softmax over `J` of each column of a `[J, I]` block.
fn softmax_columns(b: &[f64], c: &mut [f64], ni: usize, scratch: &mut [f64]) {
    let (m, z) = scratch.split_at_mut(ni);
    m.copy_from_slice(&b[..ni]);
    for row in b.chunks_exact(ni).skip(1) {
        m.iter_mut().zip(row).for_each(|(m, &x)| *m = m.max(x));
    }
    z.fill(0.0);
    for (row, out) in b.chunks_exact(ni).zip(c.chunks_exact_mut(ni)) {
        for ((o, &x), (&mi, zi)) in out.iter_mut().zip(row).zip(m.iter().zip(z.iter_mut())) {
            *o = (x - mi).exp();
            *zi += *o;
        }
    }
    for out in c.chunks_exact_mut(ni) {
        out.iter_mut().zip(z.iter()).for_each(|(o, z)| *o /= z);
    }
}

fn route_forward(uh: &[f64], d: RouteDims, tr: &mut Trace) {
    let (ij, jv, ni) = (d.i * d.j, d.j * d.v, d.i);
    tr.b[..ij].fill(0.0);
    for t in 0..d.t {
        let (bt, rest) = tr.b[t * ij..].split_at_mut(ij);
        let c = &mut tr.c[t * ij..(t + 1) * ij];
        if t == 0 {
            c.fill(1.0 / d.j as f64);
        } else {
            softmax_columns(bt, c, ni, &mut tr.scratch);
        }
        let s = &mut tr.s[t * jv..(t + 1) * jv];
        for j in 0..d.j {
            let cj = &c[j * ni..(j + 1) * ni];
            for a in 0..d.v {
                s[j * d.v + a] = dot(cj, &uh[(j * d.v + a) * ni..][..ni]);
            }
        }
        let v = &mut tr.v[t * jv..(t + 1) * jv];
        for (sj, vj) in s.chunks_exact(d.v).zip(v.chunks_exact_mut(d.v)) {
            squash_into(sj, vj);
        }
        if t + 1 < d.t {
            let next = &mut rest[..ij];
            next.copy_from_slice(bt);
            for j in 0..d.j {
                let nj = &mut next[j * ni..(j + 1) * ni];
                for a in 0..d.v {
                    axpy(v[j * d.v + a], &uh[(j * d.v + a) * ni..][..ni], nj);
                }
            }
        }
    }
}

/// Gradient of the final routed output with respect to the votes,
/// differentiating through couplings and agreement updates of every
/// iteration. Accumulates into `guh`.
fn route_backward(
    uh: &[f64],
    g: &[f64],
    d: RouteDims,
    tr: Saved<'_>,
    guh: &mut [f64],
    work: &mut RouteWork,
) {
    let (ij, jv, ni) = (d.i * d.j, d.j * d.v, d.i);
    let RouteWork {
        gb,
        gv,
        gs,
        gc,
        inner,
    } = work;
    gb.fill(0.0);
    for t in (0..d.t).rev() {
        let c = &tr.c[t * ij..(t + 1) * ij];
        let s = &tr.s[t * jv..(t + 1) * jv];
        let v = &tr.v[t * jv..(t + 1) * jv];
        if t + 1 == d.t {
            gv.copy_from_slice(g);
        } else {
            for j in 0..d.j {
                let gbj = &gb[j * ni..(j + 1) * ni];
                for a in 0..d.v {
                    let r = (j * d.v + a) * ni..(j * d.v + a + 1) * ni;
                    gv[j * d.v + a] = dot(gbj, &uh[r.clone()]);
                    axpy(v[j * d.v + a], gbj, &mut guh[r]);
                }
            }
        }
        gs.fill(0.0);
        for j in 0..d.j {
            let r = j * d.v..(j + 1) * d.v;
            squash_backward(&s[r.clone()], &gv[r.clone()], &mut gs[r]);
        }
        gc.fill(0.0);
        for j in 0..d.j {
            let cj = &c[j * ni..(j + 1) * ni];
            let gcj = &mut gc[j * ni..(j + 1) * ni];
            for a in 0..d.v {
                let r = (j * d.v + a) * ni..(j * d.v + a + 1) * ni;
                let gsa = gs[j * d.v + a];
                axpy(gsa, &uh[r.clone()], gcj);
                axpy(gsa, cj, &mut guh[r]);
            }
        }
        if t == 0 {
            break;
        }
        inner.fill(0.0);
        for (cj, gcj) in c.chunks_exact(ni).zip(gc.chunks_exact(ni)) {
            inner
                .iter_mut()
                .zip(cj.iter().zip(gcj))
                .for_each(|(n, (c, g))| *n += c * g);
        }
        for (gbj, (cj, gcj)) in gb
            .chunks_exact_mut(ni)
            .zip(c.chunks_exact(ni).zip(gc.chunks_exact(ni)))
        {
            for (((gb, &c), &g), &n) in gbj.iter_mut().zip(cj).zip(gcj).zip(inner.iter()) {
                *gb += c * (g - n);
            }
        }
    }
}

/// The parts of a [`Trace`] that backward reads.
#[derive(Clone, Copy)]
struct Saved<'a> {
    c: &'a [f64],
    s: &'a [f64],
    v: &'a [f64],
}

impl Trace {
    fn saved(&self) -> Saved<'_> {
        Saved {
            c: &self.c,
            s: &self.s,
            v: &self.v,
        }
    }
}

impl RouteDims {
    fn saved_len(&self) -> usize {
        self.t * (self.i * self.j + 2 * self.j * self.v)
    }
}

impl<'a> Saved<'a> {
    fn split(buf: &'a [f64], d: RouteDims) -> Self {
        let (c, rest) = buf.split_at(d.t * d.i * d.j);
        let (s, v) = rest.split_at(d.t * d.j * d.v);
        Saved { c, s, v }
    }
}

/// Scratch buffers of [`route_backward`].
struct RouteWork {
    gb: Vec<f64>,
    gv: Vec<f64>,
    gs: Vec<f64>,
    gc: Vec<f64>,
    inner: Vec<f64>,
}

impl RouteWork {
    fn new(d: RouteDims) -> Self {
        RouteWork {
            gb: vec![0.0; d.i * d.j],
            gv: vec![0.0; d.j * d.v],
            gs: vec![0.0; d.j * d.v],
            gc: vec![0.0; d.i * d.j],
            inner: vec![0.0; d.i],
        }
    }
}

/// `[I, J, V]` to `[J, V, I]`.
fn to_routing_layout(src: &[f64], d: RouteDims, dst: &mut [f64]) {
    for i in 0..d.i {
        for j in 0..d.j {
            for a in 0..d.v {
                dst[(j * d.v + a) * d.i + i] = src[(i * d.j + j) * d.v + a];
            }
        }
    }
}

/// `[J, V, I]` to `[I, J, V]`.
fn from_routing_layout(src: &[f64], d: RouteDims, dst: &mut [f64]) {
    for i in 0..d.i {
        for j in 0..d.j {
            for a in 0..d.v {
                dst[(i * d.j + j) * d.v + a] = src[(j * d.v + a) * d.i + i];
            }
        }
    }
}

/// `[J, I]` to an `[I, J]` tensor.
fn columns_to_tensor(src: &[f64], d: RouteDims) -> Tensor {
    let mut out = vec![0.0; d.i * d.j];
    for i in 0..d.i {
        for j in 0..d.j {
            out[i * d.j + j] = src[j * d.i + i];
        }
    }
    Tensor::from_raw(vec![d.i, d.j], out)
}

/// Routing state of one location, for inspection.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// Agreement logits entering each iteration, each `[I, J]`.
    pub logits: Vec<Tensor>,
    /// Couplings `softmax_J(b)` of each iteration, each `[I, J]`.
    pub couplings: Vec<Tensor>,
    /// Squashed outputs of each iteration, each `[J, V]`.
    pub outputs: Vec<Tensor>,
}

/// Runs routing on a single `[I, J, V]` vote tensor and returns every
/// intermediate iterate.
pub fn routing_trace(votes: &Tensor, iterations: usize) -> Result<RoutingTrace> {
    let s = votes.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("votes must be [I, J, V], got {s:?}")));
    }
    if iterations == 0 {
        return Err(Error::config("routing needs at least one iteration"));
    }
    let d = RouteDims {
        i: s[0],
        j: s[1],
        v: s[2],
        t: iterations,
    };
    let mut uh = vec![0.0; votes.numel()];
    to_routing_layout(votes.data(), d, &mut uh);
    let mut tr = Trace::new(d);
    route_forward(&uh, d, &mut tr);
    let (ij, jv) = (d.i * d.j, d.j * d.v);
    Ok(RoutingTrace {
        logits: tr.b.chunks(ij).map(|b| columns_to_tensor(b, d)).collect(),
        couplings: tr.c.chunks(ij).map(|c| columns_to_tensor(c, d)).collect(),
        outputs: tr
            .v
            .chunks(jv)
            .map(|v| Tensor::from_raw(vec![d.j, d.v], v.to_vec()))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy)]
struct VoteDims {
    k2: usize,
    c: usize,
    l: usize,
    v: usize,
    j: usize,
    vo: usize,
}

impl VoteDims {
    fn of(s: &[usize], ts: &[usize]) -> Result<Self> {
        if s.len() != 7 || ts.len() != 5 || ts[0] != s[3] || ts[1] != s[5] || ts[4] != s[6] {
            return Err(Error::shape(format!(
                "capsules {s:?} do not match transform {ts:?} ([K², L, J, V_out, V])"
            )));
        }
        Ok(VoteDims {
            k2: s[3],
            c: s[4],
            l: s[5],
            v: s[6],
            j: ts[2],
            vo: ts[3],
        })
    }

    fn lower(&self) -> usize {
        self.k2 * self.l
    }

    fn position_len(&self) -> usize {
        self.k2 * self.c * self.l * self.v
    }
}

/// Transform re-laid out as `[J·V_out, V, I]`.
fn transform_columns(w: &[f64], d: VoteDims) -> Vec<f64> {
    let (ni, jo) = (d.lower(), d.j * d.vo);
    let mut out = vec![0.0; jo * d.v * ni];
    for i in 0..ni {
        for o in 0..jo {
            for a in 0..d.v {
                out[(o * d.v + a) * ni + i] = w[(i * jo + o) * d.v + a];
            }
        }
    }
    out
}

fn transform_from_columns(wt: &[f64], d: VoteDims) -> Vec<f64> {
    let (ni, jo) = (d.lower(), d.j * d.vo);
    let mut out = vec![0.0; jo * d.v * ni];
    for i in 0..ni {
        for o in 0..jo {
            for a in 0..d.v {
                out[(i * jo + o) * d.v + a] = wt[(o * d.v + a) * ni + i];
            }
        }
    }
    out
}

/// Gathers capsule channel `ci` of one position's `[K², C, L, V]` capsules
/// into `[V, I]`.
fn gather_lower(u: &[f64], ci: usize, d: VoteDims, out: &mut [f64]) {
    let ni = d.lower();
    for kk in 0..d.k2 {
        for li in 0..d.l {
            let src = &u[((kk * d.c + ci) * d.l + li) * d.v..][..d.v];
            for (a, &x) in src.iter().enumerate() {
                out[a * ni + kk * d.l + li] = x;
            }
        }
    }
}

fn scatter_lower(g: &[f64], ci: usize, d: VoteDims, gu: &mut [f64]) {
    let ni = d.lower();
    for kk in 0..d.k2 {
        for li in 0..d.l {
            let dst = &mut gu[((kk * d.c + ci) * d.l + li) * d.v..][..d.v];
            for (a, x) in dst.iter_mut().enumerate() {
                *x += g[a * ni + kk * d.l + li];
            }
        }
    }
}

/// Votes `[J·V_out, I]` from gathered capsules `[V, I]`.
fn votes_columns(lower: &[f64], wt: &[f64], d: VoteDims, uh: &mut [f64]) {
    let ni = d.lower();
    for (o, out) in uh.chunks_exact_mut(ni).enumerate() {
        out.fill(0.0);
        for a in 0..d.v {
            let w = &wt[(o * d.v + a) * ni..][..ni];
            let x = &lower[a * ni..][..ni];
            for ((y, w), x) in out.iter_mut().zip(w).zip(x) {
                *y += w * x;
            }
        }
    }
}

fn votes_columns_backward(
    lower: &[f64],
    wt: &[f64],
    d: VoteDims,
    guh: &[f64],
    glower: &mut [f64],
    gwt: &mut [f64],
) {
    let ni = d.lower();
    glower.fill(0.0);
    for (o, g) in guh.chunks_exact(ni).enumerate() {
        for a in 0..d.v {
            let r = (o * d.v + a) * ni..(o * d.v + a + 1) * ni;
            let x = &lower[a * ni..][..ni];
            for (((gl, gw), &w), (&gv, &xv)) in glower[a * ni..(a + 1) * ni]
                .iter_mut()
                .zip(gwt[r.clone()].iter_mut())
                .zip(&wt[r])
                .zip(g.iter().zip(x))
            {
                *gl += gv * w;
                *gw += gv * xv;
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Dynamic routing over the last three axes `[.., I, J, V]` (lower
    /// capsules, upper capsules, atoms), returning `[.., J, V]`.
    pub fn dynamic_routing(self, iterations: usize) -> Result<Var<'t>> {
        if iterations == 0 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        let shape = self.shape();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "routing votes need [.., I, J, V], got {shape:?}"
            )));
        }
        let r = shape.len();
        let d = RouteDims {
            i: shape[r - 3],
            j: shape[r - 2],
            v: shape[r - 1],
            t: iterations,
        };
        let (ijv, jv) = (d.i * d.j * d.v, d.j * d.v);
        let x = self.value();
        let locations = x.numel() / ijv;
        let mut out = vec![0.0; locations * jv];
        {
            let xd = x.data();
            par::for_each_chunk_mut(&mut out, jv, |n, dst| {
                let mut uh = vec![0.0; ijv];
                to_routing_layout(&xd[n * ijv..(n + 1) * ijv], d, &mut uh);
                let mut tr = Trace::new(d);
                route_forward(&uh, d, &mut tr);
                dst.copy_from_slice(&tr.v[(d.t - 1) * jv..]);
            });
        }
        let mut out_shape = shape[..r - 3].to_vec();
        out_shape.extend([d.j, d.v]);
        self.tape().record(
            "dynamic_routing",
            &[self],
            Tensor::from_raw(out_shape, out),
            Box::new(move |g, inputs, _| {
                let x = &inputs[0];
                let (xd, gd) = (x.data(), g.data());
                let mut gx = vec![0.0; x.numel()];
                par::for_each_chunk_mut(&mut gx, ijv, |n, gu| {
                    let mut uh = vec![0.0; ijv];
                    to_routing_layout(&xd[n * ijv..(n + 1) * ijv], d, &mut uh);
                    let mut tr = Trace::new(d);
                    route_forward(&uh, d, &mut tr);
                    let mut guh = vec![0.0; ijv];
                    let mut work = RouteWork::new(d);
                    route_backward(
                        &uh,
                        &gd[n * jv..(n + 1) * jv],
                        d,
                        tr.saved(),
                        &mut guh,
                        &mut work,
                    );
                    from_routing_layout(&guh, d, gu);
                });
                vec![Some(Tensor::from_raw(x.shape().to_vec(), gx))]
            }),
        )
    }

    /// Capsule votes. `self` is `[B, H, W, K², C, L, V]` and `transform`
    /// `[K², L, J, V_out, V]`; the result is `[B, H, W, C, K²·L, J, V_out]`,
    /// with `û[.., c, (k, l), j] = transform[k, l, j] · u[.., k, c, l]`.
    pub fn capsule_votes(self, transform: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let vd = VoteDims::of(&s, &transform.shape())?;
        let positions = s[0] * s[1] * s[2];
        let (ni, jo) = (vd.lower(), vd.j * vd.vo);
        let (in_chunk, loc) = (vd.position_len(), ni * jo);
        let x = self.value();
        let w = transform.value();
        let wt = transform_columns(w.data(), vd);
        let mut out = vec![0.0; positions * vd.c * loc];
        {
            let xd = x.data();
            par::for_each_chunk_mut(&mut out, vd.c * loc, |p, dst| {
                let u = &xd[p * in_chunk..(p + 1) * in_chunk];
                let mut lower = vec![0.0; vd.v * ni];
                let mut uh = vec![0.0; loc];
                for ci in 0..vd.c {
                    gather_lower(u, ci, vd, &mut lower);
                    votes_columns(&lower, &wt, vd, &mut uh);
                    let dst = &mut dst[ci * loc..(ci + 1) * loc];
                    for i in 0..ni {
                        for o in 0..jo {
                            dst[i * jo + o] = uh[o * ni + i];
                        }
                    }
                }
            });
        }
        self.tape().record(
            "capsule_votes",
            &[self, transform],
            Tensor::from_raw(vec![s[0], s[1], s[2], vd.c, ni, vd.j, vd.vo], out),
            Box::new(move |g, inputs, _| {
                let (xd, gd) = (inputs[0].data(), g.data());
                let blocks = positions.min(16);
                let per = positions.div_ceil(blocks);
                let partial: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(blocks, |bi| {
                    let (start, end) = (bi * per, ((bi + 1) * per).min(positions));
                    let mut gx = vec![0.0; (end - start) * in_chunk];
                    let mut gwt = vec![0.0; wt.len()];
                    let mut lower = vec![0.0; vd.v * ni];
                    let mut glower = vec![0.0; vd.v * ni];
                    let mut guh = vec![0.0; loc];
                    for p in start..end {
                        let u = &xd[p * in_chunk..(p + 1) * in_chunk];
                        let gu = &mut gx[(p - start) * in_chunk..(p - start + 1) * in_chunk];
                        for ci in 0..vd.c {
                            gather_lower(u, ci, vd, &mut lower);
                            let go = &gd[(p * vd.c + ci) * loc..][..loc];
                            for i in 0..ni {
                                for o in 0..jo {
                                    guh[o * ni + i] = go[i * jo + o];
                                }
                            }
                            votes_columns_backward(&lower, &wt, vd, &guh, &mut glower, &mut gwt);
                            scatter_lower(&glower, ci, vd, gu);
                        }
                    }
                    (gx, gwt)
                });
                let (gx, gw) = reduce_partials(partial, inputs[0].numel(), vd);
                vec![
                    Some(Tensor::from_raw(inputs[0].shape().to_vec(), gx)),
                    Some(Tensor::from_raw(inputs[1].shape().to_vec(), gw)),
                ]
            }),
        )
    }

    /// Votes followed by routing, fused. Equal to
    /// `self.capsule_votes(transform)?.dynamic_routing(iterations)` with
    /// result `[B, H, W, C, J, V_out]`, but votes are never materialised.
    pub fn route_capsules(self, transform: Var<'t>, iterations: usize) -> Result<Var<'t>> {
        if iterations == 0 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        let s = self.shape();
        let vd = VoteDims::of(&s, &transform.shape())?;
        let d = RouteDims {
            i: vd.lower(),
            j: vd.j,
            v: vd.vo,
            t: iterations,
        };
        let positions = s[0] * s[1] * s[2];
        let in_chunk = vd.position_len();
        let (jv, loc) = (d.j * d.v, d.i * d.j * d.v);
        let x = self.value();
        let wt = transform_columns(transform.value().data(), vd);
        // With gradients, each location keeps its couplings and outputs so
        // backward needs no exponentials.
        let keep = self.requires_grad() || transform.requires_grad();
        let per_loc = jv + if keep { d.saved_len() } else { 0 };
        let mut buf = vec![0.0; positions * vd.c * per_loc];
        {
            let xd = x.data();
            par::for_each_chunk_mut(&mut buf, vd.c * per_loc, |p, dst| {
                let u = &xd[p * in_chunk..(p + 1) * in_chunk];
                let mut lower = vec![0.0; vd.v * d.i];
                let mut uh = vec![0.0; loc];
                let mut tr = Trace::new(d);
                for (ci, dst) in dst.chunks_exact_mut(per_loc).enumerate() {
                    gather_lower(u, ci, vd, &mut lower);
                    votes_columns(&lower, &wt, vd, &mut uh);
                    route_forward(&uh, d, &mut tr);
                    let (out, saved) = dst.split_at_mut(jv);
                    out.copy_from_slice(&tr.v[(d.t - 1) * jv..]);
                    if keep {
                        let (c, rest) = saved.split_at_mut(tr.c.len());
                        let (s, v) = rest.split_at_mut(tr.s.len());
                        c.copy_from_slice(&tr.c);
                        s.copy_from_slice(&tr.s);
                        v.copy_from_slice(&tr.v);
                    }
                }
            });
        }
        let out: Vec<f64> = buf
            .chunks_exact(per_loc)
            .flat_map(|c| c[..jv].iter().copied())
            .collect();
        if !keep {
            drop(buf);
            return self.tape().record(
                "route_capsules",
                &[self, transform],
                Tensor::from_raw(vec![s[0], s[1], s[2], vd.c, vd.j, vd.vo], out),
                Box::new(|_, _, _| vec![None, None]),
            );
        }
        self.tape().record(
            "route_capsules",
            &[self, transform],
            Tensor::from_raw(vec![s[0], s[1], s[2], vd.c, vd.j, vd.vo], out),
            Box::new(move |g, inputs, _| {
                let (xd, gd) = (inputs[0].data(), g.data());
                let blocks = positions.min(16);
                let per = positions.div_ceil(blocks);
                let partial: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(blocks, |bi| {
                    let (start, end) = (bi * per, ((bi + 1) * per).min(positions));
                    let mut gx = vec![0.0; (end - start) * in_chunk];
                    let mut gwt = vec![0.0; wt.len()];
                    let mut lower = vec![0.0; vd.v * d.i];
                    let mut glower = vec![0.0; vd.v * d.i];
                    let mut uh = vec![0.0; loc];
                    let mut guh = vec![0.0; loc];
                    let mut work = RouteWork::new(d);
                    for p in start..end {
                        let u = &xd[p * in_chunk..(p + 1) * in_chunk];
                        let gu = &mut gx[(p - start) * in_chunk..(p - start + 1) * in_chunk];
                        for ci in 0..vd.c {
                            let at = p * vd.c + ci;
                            gather_lower(u, ci, vd, &mut lower);
                            votes_columns(&lower, &wt, vd, &mut uh);
                            let saved =
                                Saved::split(&buf[at * per_loc + jv..(at + 1) * per_loc], d);
                            guh.fill(0.0);
                            route_backward(
                                &uh,
                                &gd[at * jv..(at + 1) * jv],
                                d,
                                saved,
                                &mut guh,
                                &mut work,
                            );
                            votes_columns_backward(&lower, &wt, vd, &guh, &mut glower, &mut gwt);
                            scatter_lower(&glower, ci, vd, gu);
                        }
                    }
                    (gx, gwt)
                });
                let (gx, gw) = reduce_partials(partial, inputs[0].numel(), vd);
                vec![
                    Some(Tensor::from_raw(inputs[0].shape().to_vec(), gx)),
                    Some(Tensor::from_raw(inputs[1].shape().to_vec(), gw)),
                ]
            }),
        )
    }
}

/// Concatenates per-block capsule gradients and sums per-block transform
/// gradients in block order, which keeps results independent of the thread
/// count.
fn reduce_partials(
    partial: Vec<(Vec<f64>, Vec<f64>)>,
    numel: usize,
    vd: VoteDims,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = Vec::with_capacity(numel);
    let mut gwt: Vec<f64> = Vec::new();
    for (px, pw) in partial {
        gx.extend_from_slice(&px);
        if gwt.is_empty() {
            gwt = pw;
        } else {
            gwt.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        }
    }
    (gx, transform_from_columns(&gwt, vd))
}

/// Gathers a zero-padded `K×K` window around every pixel of a
/// `[B, C·L·V, H, W]` feature map into `[B, H, W, K², C, L, V]`. With
/// `K = 1` this is a pure reshape and axis permutation.
pub fn to_primary_capsules<'t>(feat: Var<'t>, cfg: &CapsuleConfig) -> Result<CapsuleTensor<'t>> {
    cfg.validate()?;
    let s = feat.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [B, C, H, W], got {s:?}")));
    }
    if s[1] != cfg.width() {
        return Err(Error::config(format!(
            "{} channels do not factor into {} capsule channels × {} capsules × {} atoms",
            s[1], cfg.cap_channels, cfg.capsules, cfg.atoms
        )));
    }
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    let k = cfg.kernel;
    let (k2, pad) = (k * k, (k / 2) as isize);
    let x = feat.value();
    let row = w * k2 * d;
    let mut out = vec![0.0; b * h * row];
    {
        let xd = x.data();
        par::for_each_chunk_mut(&mut out, row, |r, dst| {
            let (bi, y) = (r / h, r % h);
            for xx in 0..w {
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as isize + dy as isize - pad;
                        let sx = xx as isize + dx as isize - pad;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let base = ((xx * k2) + dy * k + dx) * d;
                        let src = (bi * d * h + sy as usize) * w + sx as usize;
                        for ch in 0..d {
                            dst[base + ch] = xd[src + ch * h * w];
                        }
                    }
                }
            }
        });
    }
    let value = Tensor::from_raw(
        vec![b, h, w, k2, cfg.cap_channels, cfg.capsules, cfg.atoms],
        out,
    );
    let data = feat.tape().record(
        "capsule_unfold",
        &[feat],
        value,
        Box::new(move |g, inputs, _| {
            let gd = g.data();
            let plane = d * h * w;
            let per_batch: Vec<Vec<f64>> = par::map_indexed(b, |bi| {
                let mut gx = vec![0.0; plane];
                for y in 0..h {
                    for xx in 0..w {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let base = (((bi * h + y) * w + xx) * k2 + dy * k + dx) * d;
                                let dst = sy as usize * w + sx as usize;
                                for ch in 0..d {
                                    gx[dst + ch * h * w] += gd[base + ch];
                                }
                            }
                        }
                    }
                }
                gx
            });
            vec![Some(Tensor::from_raw(
                inputs[0].shape().to_vec(),
                per_batch.concat(),
            ))]
        }),
    )?;
    CapsuleTensor::new(data)
}

/// Merges the `[K², C, L, V]` axes into channels: `[B, K²·C·L·V, H, W]`.
pub fn merge_capsules<'t>(caps: CapsuleTensor<'t>) -> Result<Var<'t>> {
    let [b, h, w, k2, c, l, v] = caps.dims();
    caps.data
        .reshape(&[b, h, w, k2 * c * l * v])?
        .permute(&[0, 3, 1, 2])
}

/// Graph gating of routed capsules: one channel graph (`N = C`) and one
/// capsule-atom graph (`N = L·V`), both fed with pooled primary capsules.
#[derive(Debug, Clone)]
pub struct CapsuleGates {
    pub channel: GraphConvLayer,
    pub cap_atom: GraphConvLayer,
    /// Squash the combined gate through a sigmoid; disabling it exposes the
    /// raw graph output.
    pub sigmoid: bool,
}

/// Capsule convolution: primary capsules over a `K×K` window, routing to
/// `L` capsules per channel, optional graph gating, then a `1×1`
/// projection with ReLU back to feature layout.
#[derive(Debug, Clone)]
pub struct CapsuleConv {
    pub cfg: CapsuleConfig,
    pub projection: Conv2d,
    pub transform: ParamId,
    pub output: Conv2d,
    pub gates: Option<CapsuleGates>,
}

impl CapsuleConv {
    /// Plain capsule convolution without graph reasoning.
    pub fn vanilla(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: CapsuleConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let projection = Conv2d::with_kind(
            store,
            &format!("{name}.primary"),
            c_in,
            cfg.width(),
            1,
            false,
            ParamKind::CapsuleProjection,
        )?;
        let k2 = cfg.kernel * cfg.kernel;
        let (l, v) = (cfg.capsules, cfg.atoms);
        let t = Tensor::rand_normal(&[k2, l, l, v, v], (1.0 / v as f64).sqrt(), store.rng());
        let transform = store.add(format!("{name}.transform"), ParamKind::CapsuleTransform, t)?;
        let output = Conv2d::new(
            store,
            &format!("{name}.output"),
            cfg.width(),
            c_out,
            1,
            true,
        )?;
        Ok(CapsuleConv {
            cfg,
            projection,
            transform,
            output,
            gates: None,
        })
    }

    /// Graph capsule convolution. Registration extends [`Self::vanilla`]
    /// so both draw identical weights for the shared layers from one seed.
    pub fn graph(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: CapsuleConfig,
    ) -> Result<Self> {
        let mut conv = Self::vanilla(store, name, c_in, c_out, cfg)?;
        let channel = GraphConvLayer::learned(
            store,
            &format!("{name}.gc_channel"),
            cfg.cap_channels,
            1,
            1,
            GraphActivation::Linear,
        )?;
        let cap_atom = GraphConvLayer::learned(
            store,
            &format!("{name}.gc_cap_atom"),
            cfg.capsules * cfg.atoms,
            1,
            1,
            GraphActivation::Linear,
        )?;
        conv.gates = Some(CapsuleGates {
            channel,
            cap_atom,
            sigmoid: true,
        });
        Ok(conv)
    }

    pub fn primary<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<CapsuleTensor<'t>> {
        to_primary_capsules(self.projection.forward(ctx, x)?, &self.cfg)
    }

    /// Routed capsules `[B, H, W, 1, C, L, V]`.
    pub fn route<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        primary: CapsuleTensor<'t>,
    ) -> Result<CapsuleTensor<'t>> {
        let [b, h, w, _, c, l, v] = primary.dims();
        let routed = primary
            .data
            .route_capsules(ctx.param(self.transform), self.cfg.iterations)?;
        CapsuleTensor::new(routed.reshape(&[b, h, w, 1, c, l, v])?)
    }

    /// Combined gate `[B, 1, 1, 1, C, L, V]` from pooled primary capsules.
    pub fn gate<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        gates: &CapsuleGates,
        primary: CapsuleTensor<'t>,
    ) -> Result<Var<'t>> {
        let [b, _, _, _, c, l, v] = primary.dims();
        let channel = primary
            .data
            .mean_axes(&[1, 2, 3, 5, 6])?
            .reshape(&[b, c, 1])?;
        let cap_atom = primary
            .data
            .mean_axes(&[1, 2, 3, 4])?
            .reshape(&[b, l * v, 1])?;
        let gc = gates
            .channel
            .forward_batched(ctx, channel)?
            .reshape(&[b, 1, 1, 1, c, 1, 1])?;
        let ga = gates
            .cap_atom
            .forward_batched(ctx, cap_atom)?
            .reshape(&[b, 1, 1, 1, 1, l, v])?;
        let gate = gc.add(ga)?;
        if gates.sigmoid {
            gate.sigmoid()
        } else {
            Ok(gate)
        }
    }

    /// Routed, gated capsules before the output projection.
    pub fn capsules<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<CapsuleTensor<'t>> {
        let primary = self.primary(ctx, x)?;
        let routed = self.route(ctx, primary)?;
        match &self.gates {
            None => Ok(routed),
            Some(gates) => {
                let gate = self.gate(ctx, gates, primary)?;
                CapsuleTensor::new(routed.data.mul(gate)?.add(routed.data)?)
            }
        }
    }

    /// Merged channels through the learned `1×1` projection and ReLU.
    pub fn to_feature<'t>(&self, ctx: &Ctx<'t, '_>, caps: CapsuleTensor<'t>) -> Result<Var<'t>> {
        self.output.forward(ctx, merge_capsules(caps)?)?.relu()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let caps = self.capsules(ctx, x)?;
        self.to_feature(ctx, caps)
    }
}
