//! The segmentation network and its ablation variants.
//!
//! Encoder stages run a stem convolution followed by a local (plain
//! convolution) path, a global (capsule) path, or both fused by SGAF. The
//! bottleneck optionally applies BGA, decoder stages upsample and merge the
//! encoder skips, and MSGF optionally fuses the three finest decoder stages
//! before the two-class head.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::capsule::{CapsuleConfig, CapsuleConv};
use crate::error::{Error, Result};
use crate::fusion::{Bga, Msgf, MsgfMode, SgaConfig, Sgaf};
use crate::nn::{Conv2d, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LocalOnly,
    GlobalVanilla,
    GlobalGc,
    Fusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LocalOnly,
        Variant::GlobalVanilla,
        Variant::GlobalGc,
        Variant::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LocalOnly => "local_only",
            Variant::GlobalVanilla => "global_vanilla",
            Variant::GlobalGc => "global_gc",
            Variant::Fusion => "fusion",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant `{s}` (expected local_only, global_vanilla, global_gc or fusion)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The capsule path consumes the local path's output.
    Serial,
    /// Both paths consume the stem output.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub cap_channels: usize,
    pub capsules: usize,
    pub atoms: usize,
    pub kernel: usize,
    pub routing_iterations: usize,
    pub fusion_mode: FusionMode,
    pub variant: Variant,
    pub use_bga: bool,
    pub use_msgf: bool,
    pub msgf_mode: MsgfMode,
    pub sga_threshold: f64,
    pub sga_max_nodes: usize,
    pub sga_k: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let caps = CapsuleConfig::default();
        let sga = SgaConfig::default();
        ModelConfig {
            in_channels: 1,
            depth: 3,
            base_channels: 16,
            cap_channels: caps.cap_channels,
            capsules: caps.capsules,
            atoms: caps.atoms,
            kernel: caps.kernel,
            routing_iterations: caps.iterations,
            fusion_mode: FusionMode::Serial,
            variant: Variant::Fusion,
            use_bga: true,
            use_msgf: true,
            msgf_mode: MsgfMode::Shared,
            sga_threshold: sga.threshold,
            sga_max_nodes: sga.max_nodes,
            sga_k: sga.k,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn capsule(&self) -> CapsuleConfig {
        CapsuleConfig {
            cap_channels: self.cap_channels,
            capsules: self.capsules,
            atoms: self.atoms,
            kernel: self.kernel,
            iterations: self.routing_iterations,
        }
    }

    pub fn sga(&self) -> SgaConfig {
        SgaConfig {
            threshold: self.sga_threshold,
            max_nodes: self.sga_max_nodes,
            k: self.sga_k,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config(
                "in_channels and base_channels must be positive",
            ));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.use_msgf && self.depth < 3 {
            return Err(Error::config(format!(
                "MSGF fuses three decoder stages and needs depth ≥ 3, got {}",
                self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.sga_threshold) {
            return Err(Error::config("sga_threshold must lie in [0, 1)"));
        }
        if self.sga_max_nodes == 0 || self.sga_k == 0 {
            return Err(Error::config("sga_max_nodes and sga_k must be positive"));
        }
        if self.variant != Variant::LocalOnly {
            self.capsule().validate()?;
        }
        Ok(())
    }

    /// Channels of encoder stage `s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Input extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    stem: Conv2d,
    local: Option<Conv2d>,
    global: Option<CapsuleConv>,
    sgaf: Option<Sgaf>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Conv2d,
    merge: Conv2d,
    sgaf: Option<Sgaf>,
}

/// A built network: parameter registry plus layer wiring.
/// Initial weight gain of the convolutions whose outputs enter an SGAF sum.
/// Each SGAF adds both streams and their gated copies, so at unit gain the
/// activation scale roughly doubles per stage.
pub const FUSION_INIT_GAIN: f64 = 0.6;

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Vec<EncoderStage>,
    bottleneck: [Conv2d; 2],
    bga: Option<Bga>,
    decoder: Vec<DecoderStage>,
    msgf: Option<Msgf>,
    head: Conv2d,
}

fn conv_relu<'t>(conv: &Conv2d, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    conv.forward(ctx, x)?.relu()
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let caps = cfg.capsule();
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut c_in = cfg.in_channels;
        for s in 0..cfg.depth {
            let c = cfg.stage_channels(s);
            let name = format!("enc{s}");
            let stem = Conv2d::new(&mut store, &format!("{name}.stem"), c_in, c, 3, true)?;
            let has_local = matches!(cfg.variant, Variant::LocalOnly | Variant::Fusion);
            let local = if has_local {
                Some(Conv2d::new(
                    &mut store,
                    &format!("{name}.local"),
                    c,
                    c,
                    3,
                    true,
                )?)
            } else {
                None
            };
            let global_name = format!("{name}.global");
            let global = match cfg.variant {
                Variant::LocalOnly => None,
                Variant::GlobalVanilla => {
                    Some(CapsuleConv::vanilla(&mut store, &global_name, c, c, caps)?)
                }
                Variant::GlobalGc | Variant::Fusion => {
                    Some(CapsuleConv::graph(&mut store, &global_name, c, c, caps)?)
                }
            };
            let sgaf = if cfg.variant == Variant::Fusion {
                Some(Sgaf::new(&mut store, &format!("{name}.sgaf"), c)?)
            } else {
                None
            };
            encoder.push(EncoderStage {
                stem,
                local,
                global,
                sgaf,
            });
            c_in = c;
        }
        let cb = cfg.stage_channels(cfg.depth);
        let bottleneck = [
            Conv2d::new(&mut store, "bottleneck.conv1", c_in, cb, 3, true)?,
            Conv2d::new(&mut store, "bottleneck.conv2", cb, cb, 3, true)?,
        ];
        let bga = if cfg.use_bga {
            Some(Bga::new(&mut store, "bga", cb, cfg.sga())?)
        } else {
            None
        };
        let mut decoder = Vec::with_capacity(cfg.depth);
        let mut c_prev = cb;
        for s in (0..cfg.depth).rev() {
            let c = cfg.stage_channels(s);
            let name = format!("dec{s}");
            let up = Conv2d::new(&mut store, &format!("{name}.up"), c_prev, c, 3, true)?;
            let merge = Conv2d::new(&mut store, &format!("{name}.merge"), 2 * c, c, 3, true)?;
            let sgaf = if cfg.variant == Variant::Fusion {
                Some(Sgaf::new(&mut store, &format!("{name}.sgaf"), c)?)
            } else {
                None
            };
            decoder.push(DecoderStage { up, merge, sgaf });
            c_prev = c;
        }
        let msgf = if cfg.use_msgf {
            let ch = (
                cfg.stage_channels(0),
                cfg.stage_channels(1),
                cfg.stage_channels(2),
            );
            Some(Msgf::new(&mut store, "msgf", ch, cfg.msgf_mode)?)
        } else {
            None
        };
        let head = Conv2d::new(&mut store, "head", cfg.base_channels, 2, 1, true)?;
        if cfg.variant == Variant::Fusion {
            let mut scaled: Vec<ParamId> = Vec::new();
            for stage in &encoder {
                scaled.extend(stage.local.as_ref().map(|c| c.weight));
                scaled.extend(stage.global.as_ref().map(|g| g.output.weight));
            }
            scaled.extend(decoder.iter().map(|s| s.merge.weight));
            for id in scaled {
                store
                    .tensor_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w *= FUSION_INIT_GAIN);
            }
        }
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder,
            bottleneck,
            bga,
            decoder,
            msgf,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Scalar parameter counts per top-level block.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        self.store.breakdown()
    }

    pub fn count_kind(&self, kind: ParamKind) -> usize {
        self.store.count_kind(kind)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "model expects [B, {}, H, W] images, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let d = self.cfg.divisor();
        if !shape[2].is_multiple_of(d) || !shape[3].is_multiple_of(d) {
            return Err(Error::shape(format!(
                "image extents {}×{} must be multiples of {d}; pad to {}×{}",
                shape[2],
                shape[3],
                shape[2].div_ceil(d) * d,
                shape[3].div_ceil(d) * d
            )));
        }
        Ok(())
    }

    /// Per-pixel two-class logits `[B, 2, H, W]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&image.shape())?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut globals = Vec::with_capacity(self.cfg.depth);
        let mut x = image;
        for stage in &self.encoder {
            let stem = conv_relu(&stage.stem, ctx, x)?;
            let local = match &stage.local {
                Some(conv) => Some(conv_relu(conv, ctx, stem)?),
                None => None,
            };
            let global = match &stage.global {
                Some(caps) => {
                    let input = match (self.cfg.fusion_mode, local) {
                        (FusionMode::Serial, Some(l)) => l,
                        _ => stem,
                    };
                    Some(caps.forward(ctx, input)?)
                }
                None => None,
            };
            let out = match (&stage.sgaf, local, global) {
                (Some(sgaf), Some(l), Some(g)) => sgaf.forward(ctx, l, g)?,
                (_, Some(l), None) => l,
                (_, None, Some(g)) => g,
                _ => return Err(Error::config("encoder stage has no feature path")),
            };
            skips.push(out);
            globals.push(global);
            x = out.max_pool2x2()?;
        }
        x = conv_relu(&self.bottleneck[0], ctx, x)?;
        x = conv_relu(&self.bottleneck[1], ctx, x)?;
        if let Some(bga) = &self.bga {
            x = bga.forward(ctx, x)?;
        }
        let mut decoded = Vec::with_capacity(self.cfg.depth);
        for (i, stage) in self.decoder.iter().enumerate() {
            let s = self.cfg.depth - 1 - i;
            let up = conv_relu(&stage.up, ctx, x.upsample_nearest(2)?)?;
            let merged = conv_relu(&stage.merge, ctx, Var::concat(&[up, skips[s]], 1)?)?;
            x = match (&stage.sgaf, globals[s]) {
                (Some(sgaf), Some(g)) => sgaf.forward(ctx, merged, g)?,
                _ => merged,
            };
            decoded.push(x);
        }
        let top = match &self.msgf {
            Some(msgf) => {
                let n = decoded.len();
                msgf.forward(ctx, decoded[n - 1], decoded[n - 2], decoded[n - 3])?
            }
            None => x,
        };
        self.head.forward(ctx, top)
    }

    /// Logits without recording parameter gradients.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &self.store);
        let out = self.forward(&ctx, tape.constant(image.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Vessel probabilities `[B, H, W]` (softmax of the vessel logit).
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let logits = self.logits(image)?;
        let s = logits.shape();
        let (b, plane) = (s[0], s[2] * s[3]);
        let d = logits.data();
        let mut out = Vec::with_capacity(b * plane);
        for bi in 0..b {
            for i in 0..plane {
                let (l0, l1) = (d[bi * 2 * plane + i], d[(bi * 2 + 1) * plane + i]);
                out.push(1.0 / (1.0 + (l0 - l1).exp()));
            }
        }
        Tensor::new(&[b, s[2], s[3]], out)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(&self.store, &mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        read_checkpoint(&mut self.store, &mut bytes.as_slice())
    }
}

const MAGIC: &[u8; 4] = b"GCCW";
const VERSION: u32 = 1;

/// Checkpoint layout, little endian: magic, `u32` version, `u32` tensor
/// count, then per tensor a `u32`-prefixed UTF-8 name, `u32` rank, `u64`
/// extents and the `f64` payload.
pub fn write_checkpoint(store: &ParamStore, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("writing checkpoint", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(store.len() as u32).to_le_bytes())
        .map_err(io)?;
    for p in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())
            .map_err(io)?;
        out.write_all(p.name.as_bytes()).map_err(io)?;
        out.write_all(&(p.tensor.ndim() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in p.tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// Loads every tensor of a checkpoint into `store`, which must hold exactly
/// the same names and shapes.
pub fn read_checkpoint(store: &mut ParamStore, r: &mut impl Read) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(
            "not a weight checkpoint (bad magic)".into(),
        ));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model has {}",
            store.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if store.get(id).tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?} in the checkpoint but {:?} in the model",
                store.get(id).tensor.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(r)?));
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        loaded.push((id, t));
    }
    for (id, t) in loaded {
        *store.tensor_mut(id) = t;
    }
    Ok(())
}
