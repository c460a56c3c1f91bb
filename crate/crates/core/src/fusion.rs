//! Graph attention fusion blocks: selective graph attention fusion of two
//! feature streams, bottleneck graph attention (channel then spatial) and
//! multi-scale graph fusion.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{
    knn_adjacency, normalize_adjacency, vessel_nodes, GraphActivation, GraphConvLayer,
};
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::tensor::Tensor;

fn dims4(x: Var<'_>, what: &str) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "{what} expects [B, C, H, W], got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// `X ⊙ gate + X` with a `[B, C, 1, 1]` gate broadcast over the plane.
pub fn apply_channel_gate<'t>(x: Var<'t>, gate: Var<'t>) -> Result<Var<'t>> {
    x.mul(gate)?.add(x)
}

/// Per-channel gate `[B, C, 1, 1]` from a channel graph over pooled `x`.
fn pooled_gate<'t>(layer: &GraphConvLayer, ctx: &Ctx<'t, '_>, pooled: Var<'t>) -> Result<Var<'t>> {
    let s = pooled.shape();
    let (b, c) = (s[0], s[1]);
    layer
        .forward_batched(ctx, pooled.reshape(&[b, c, 1])?)?
        .reshape(&[b, c, 1, 1])
}

fn channel_graph_layer(
    store: &mut ParamStore,
    name: &str,
    channels: usize,
) -> Result<GraphConvLayer> {
    GraphConvLayer::learned(store, name, channels, 1, 1, GraphActivation::Sigmoid)
}

/// Selective graph attention fusion of a local and a global stream. Two
/// graph convolutions serve four channel graphs: each stream's own graph
/// and the matching graph of the fused stream.
#[derive(Debug, Clone)]
pub struct Sgaf {
    pub gc_local: GraphConvLayer,
    pub gc_global: GraphConvLayer,
}

impl Sgaf {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Sgaf {
            gc_local: channel_graph_layer(store, &format!("{name}.gc_local"), channels)?,
            gc_global: channel_graph_layer(store, &format!("{name}.gc_global"), channels)?,
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        x_local: Var<'t>,
        x_global: Var<'t>,
    ) -> Result<Var<'t>> {
        let sl = dims4(x_local, "SGAF")?;
        if x_global.shape() != sl {
            return Err(Error::shape(format!(
                "SGAF streams differ: {sl:?} vs {:?}",
                x_global.shape()
            )));
        }
        let x_fusion = x_local.add(x_global)?;
        let p_local = x_local.global_avg_pool()?;
        let p_global = x_global.global_avg_pool()?;
        let p_fusion = x_fusion.global_avg_pool()?;
        let g_local = pooled_gate(&self.gc_local, ctx, p_local)?;
        let g_fusion_local = pooled_gate(&self.gc_local, ctx, p_fusion)?;
        let g_global = pooled_gate(&self.gc_global, ctx, p_global)?;
        let g_fusion_global = pooled_gate(&self.gc_global, ctx, p_fusion)?;
        let local = apply_channel_gate(x_local, g_local.mul(g_fusion_local)?)?;
        let global = apply_channel_gate(x_global, g_global.mul(g_fusion_global)?)?;
        local.add(global)
    }
}

/// Channel graph attention: `Y = X ⊙ GC(AvgPool(X)) + X`.
#[derive(Debug, Clone)]
pub struct Cga {
    pub gc: GraphConvLayer,
}

impl Cga {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Cga {
            gc: channel_graph_layer(store, &format!("{name}.gc_channel"), channels)?,
        })
    }

    pub fn gate<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        dims4(x, "CGA")?;
        pooled_gate(&self.gc, ctx, x.global_avg_pool()?)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        apply_channel_gate(x, self.gate(ctx, x)?)
    }
}

/// Output of [`sign_split`].
#[derive(Debug, Clone, Copy)]
pub struct Split<'t> {
    pub vessel: Var<'t>,
    pub background: Var<'t>,
    /// `[B, 1, H, W]` hard mask, recorded as a stop-gradient constant.
    pub mask: Var<'t>,
}

/// Hard vessel/background partition of `y` by `p > threshold`.
pub fn sign_split<'t>(p: Var<'t>, y: Var<'t>, threshold: f64) -> Result<Split<'t>> {
    let [b, _, h, w] = dims4(y, "sign_split")?;
    if p.shape() != [b, 1, h, w] {
        return Err(Error::shape(format!(
            "probability map {:?} does not match features {:?}",
            p.shape(),
            y.shape()
        )));
    }
    let pv = p.value();
    if pv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("probabilities must lie in [0, 1]"));
    }
    let mask_value = pv.map(|v| if v > threshold { 1.0 } else { 0.0 });
    let inverse = mask_value.map(|m| 1.0 - m);
    let tape = y.tape();
    let mask = tape.stop_gradient("sign_gate", mask_value);
    let inverse = tape.stop_gradient("sign_gate", inverse);
    Ok(Split {
        vessel: y.mul(mask)?,
        background: y.mul(inverse)?,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgaConfig {
    pub threshold: f64,
    pub max_nodes: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for SgaConfig {
    fn default() -> Self {
        SgaConfig {
            threshold: 0.4,
            max_nodes: 256,
            k: 8,
            seed: 0,
        }
    }
}

/// Spatial graph attention over predicted vessel pixels.
///
/// Graph nodes and the pooled channel statistics use vessel features
/// weighted by the vessel probability, which is the path through which the
/// selector receives gradients.
#[derive(Debug, Clone)]
pub struct Sga {
    pub cfg: SgaConfig,
    pub selector: Conv2d,
    pub gc_spatial: GraphConvLayer,
    pub gc_channel_vessel: GraphConvLayer,
}

impl Sga {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: SgaConfig,
    ) -> Result<Self> {
        if cfg.max_nodes == 0 || cfg.k == 0 {
            return Err(Error::config("spatial graph needs max_nodes ≥ 1 and k ≥ 1"));
        }
        let selector = Conv2d::new(store, &format!("{name}.selector"), channels, 2, 1, true)?;
        let gc_spatial = GraphConvLayer::structural(
            store,
            &format!("{name}.gc_spatial"),
            channels,
            channels,
            GraphActivation::Relu,
        )?;
        let gc_channel_vessel =
            channel_graph_layer(store, &format!("{name}.gc_channel_vessel"), channels)?;
        Ok(Sga {
            cfg,
            selector,
            gc_spatial,
            gc_channel_vessel,
        })
    }

    /// Vessel probability plane `[B, 1, H, W]`.
    pub fn probability<'t>(&self, ctx: &Ctx<'t, '_>, y: Var<'t>) -> Result<Var<'t>> {
        self.selector.forward(ctx, y)?.softmax(1)?.narrow(1, 1, 1)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, y: Var<'t>) -> Result<Var<'t>> {
        let [b, c, h, w] = dims4(y, "SGA")?;
        let p = self.probability(ctx, y)?;
        let split = sign_split(p, y, self.cfg.threshold)?;
        let weighted = y.mul(p)?;
        let mask = split.mask.value();
        let plane = h * w;
        let mut outs = Vec::with_capacity(b);
        for bi in 0..b {
            let background = split.background.narrow(0, bi, 1)?;
            let mask_b = Tensor::from_raw(
                vec![h, w],
                mask.data()[bi * plane..(bi + 1) * plane].to_vec(),
            );
            let pixels = vessel_nodes(&mask_b, self.cfg.max_nodes, self.cfg.seed)?;
            if pixels.is_empty() {
                outs.push(background);
                continue;
            }
            let weighted_b = weighted.narrow(0, bi, 1)?;
            let nodes = weighted_b.reshape(&[c, plane])?.t()?.select_rows(&pixels)?;
            let adjacency = normalize_adjacency(&knn_adjacency(&pixels, w, self.cfg.k)?)?;
            let refined =
                self.gc_spatial
                    .forward_structural(ctx, y.tape().constant(adjacency), nodes)?;
            let z_spatial = split
                .vessel
                .narrow(0, bi, 1)?
                .reshape(&[c, plane])?
                .t()?
                .put_rows(&pixels, refined)?
                .t()?
                .reshape(&[1, c, h, w])?;
            let count = mask_b.sum();
            let pooled = weighted_b
                .mul(split.mask.narrow(0, bi, 1)?)?
                .sum_axes(&[2, 3])?
                .mul_scalar(1.0 / count)?;
            let gate = pooled_gate(&self.gc_channel_vessel, ctx, pooled)?;
            outs.push(gate.mul(z_spatial)?.add(background)?);
        }
        Var::concat(&outs, 0)
    }
}

/// Bottleneck graph attention: channel attention followed by spatial graph
/// attention.
#[derive(Debug, Clone)]
pub struct Bga {
    pub cga: Cga,
    pub sga: Sga,
}

impl Bga {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: SgaConfig,
    ) -> Result<Self> {
        Ok(Bga {
            cga: Cga::new(store, &format!("{name}.cga"), channels)?,
            sga: Sga::new(store, &format!("{name}.sga"), channels, cfg)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.sga.forward(ctx, self.cga.forward(ctx, x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgfMode {
    /// One graph convolution shared by the three scale graphs.
    Shared,
    /// One graph convolution per scale.
    Individual,
    /// One graph convolution over the concatenated three-scale graph.
    Concat,
}

/// Multi-scale graph fusion of three decoder stages.
#[derive(Debug, Clone)]
pub struct Msgf {
    pub mode: MsgfMode,
    pub channels: usize,
    pub align_b: Conv2d,
    pub align_c: Conv2d,
    /// One layer for `Shared` and `Concat`, three for `Individual`.
    pub gcs: Vec<GraphConvLayer>,
    pub fuse: Conv2d,
}

impl Msgf {
    /// `channels` are `(C_a, C_b, C_c)`; the output has `C_a` channels.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: (usize, usize, usize),
        mode: MsgfMode,
    ) -> Result<Self> {
        let (ca, cb, cc) = channels;
        let align_b = Conv2d::new(store, &format!("{name}.align_b"), cb, ca, 1, true)?;
        let align_c = Conv2d::new(store, &format!("{name}.align_c"), cc, ca, 1, true)?;
        let gcs = match mode {
            MsgfMode::Shared => vec![channel_graph_layer(
                store,
                &format!("{name}.gc_shared"),
                ca,
            )?],
            MsgfMode::Individual => ["a", "b", "c"]
                .iter()
                .map(|s| channel_graph_layer(store, &format!("{name}.gc_{s}"), ca))
                .collect::<Result<_>>()?,
            MsgfMode::Concat => vec![channel_graph_layer(
                store,
                &format!("{name}.gc_concat"),
                3 * ca,
            )?],
        };
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), 3 * ca, ca, 1, true)?;
        Ok(Msgf {
            mode,
            channels: ca,
            align_b,
            align_c,
            gcs,
            fuse,
        })
    }

    fn align<'t>(
        ctx: &Ctx<'t, '_>,
        conv: &Conv2d,
        x: Var<'t>,
        target: [usize; 4],
    ) -> Result<Var<'t>> {
        let [_, _, h, w] = dims4(x, "MSGF")?;
        let (th, tw) = (target[2], target[3]);
        if th % h != 0 || tw % w != 0 || th / h != tw / w {
            return Err(Error::config(format!(
                "cannot align {h}×{w} to {th}×{tw} by an integral upsampling factor"
            )));
        }
        conv.forward(ctx, x)?.upsample_nearest(th / h)
    }

    /// The three aligned streams, in `(a, b, c)` order.
    pub fn aligned<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        xa: Var<'t>,
        xb: Var<'t>,
        xc: Var<'t>,
    ) -> Result<[Var<'t>; 3]> {
        let target = dims4(xa, "MSGF")?;
        if target[1] != self.channels {
            return Err(Error::shape(format!(
                "MSGF expects {} channels at the finest scale, got {}",
                self.channels, target[1]
            )));
        }
        let b = Self::align(ctx, &self.align_b, xb, target)?;
        let c = Self::align(ctx, &self.align_c, xc, target)?;
        if b.shape()[0] != target[0] || c.shape()[0] != target[0] {
            return Err(Error::shape("MSGF inputs have different batch sizes"));
        }
        Ok([xa, b, c])
    }

    /// Gates `[B, C_a, 1, 1]` of the three streams.
    pub fn gates<'t>(&self, ctx: &Ctx<'t, '_>, streams: &[Var<'t>; 3]) -> Result<[Var<'t>; 3]> {
        let pooled = streams
            .iter()
            .map(|s| s.global_avg_pool())
            .collect::<Result<Vec<_>>>()?;
        match self.mode {
            MsgfMode::Shared => Ok([
                pooled_gate(&self.gcs[0], ctx, pooled[0])?,
                pooled_gate(&self.gcs[0], ctx, pooled[1])?,
                pooled_gate(&self.gcs[0], ctx, pooled[2])?,
            ]),
            MsgfMode::Individual => Ok([
                pooled_gate(&self.gcs[0], ctx, pooled[0])?,
                pooled_gate(&self.gcs[1], ctx, pooled[1])?,
                pooled_gate(&self.gcs[2], ctx, pooled[2])?,
            ]),
            MsgfMode::Concat => {
                let joint = pooled_gate(&self.gcs[0], ctx, Var::concat(&pooled, 1)?)?;
                let ca = self.channels;
                Ok([
                    joint.narrow(1, 0, ca)?,
                    joint.narrow(1, ca, ca)?,
                    joint.narrow(1, 2 * ca, ca)?,
                ])
            }
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        xa: Var<'t>,
        xb: Var<'t>,
        xc: Var<'t>,
    ) -> Result<Var<'t>> {
        let streams = self.aligned(ctx, xa, xb, xc)?;
        let gates = self.gates(ctx, &streams)?;
        let refined = streams
            .iter()
            .zip(gates.iter())
            .map(|(&s, &g)| apply_channel_gate(s, g))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(ctx, Var::concat(&refined, 1)?)
    }
}
