//! Parameter registry and the plain convolution layer.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a parameter is for; used for structural accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    GraphWeight,
    GraphAdjacency,
    CapsuleProjection,
    CapsuleTransform,
}

impl ParamKind {
    pub fn is_capsule_or_graph(self) -> bool {
        !matches!(self, ParamKind::ConvWeight | ParamKind::ConvBias)
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named set of trainable tensors. Initialisation draws
/// from one seeded stream in registration order, so a given construction
/// sequence always yields the same weights.
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        tensor: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, kind, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn count_kind(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).count()
    }

    /// Scalar counts grouped by the first dotted component of each name.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let group = p.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += p.tensor.numel(),
                None => out.push((group, p.tensor.numel())),
            }
        }
        out
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass. Each parameter
/// becomes a tape leaf the first time it is used, so shared layers map to a
/// single leaf no matter how many call sites reference them.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants (no parameter gradients).
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx {
            trainable: false,
            ..Ctx::new(tape, store)
        }
    }

    /// Binds the given leaves to the parameters in registry order, so that a
    /// caller holding the leaves can differentiate with respect to them.
    pub fn with_leaves(tape: &'t Tape, store: &'s ParamStore, leaves: &[Var<'t>]) -> Result<Self> {
        if leaves.len() != store.len() {
            return Err(Error::contract(format!(
                "{} leaves for {} parameters",
                leaves.len(),
                store.len()
            )));
        }
        for (p, v) in store.iter().zip(leaves) {
            if p.tensor.shape() != v.shape().as_slice() {
                return Err(Error::shape(format!(
                    "leaf {:?} does not match parameter {} {:?}",
                    v.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Ctx {
            tape,
            store,
            bound: RefCell::new(leaves.iter().copied().map(Some).collect()),
            trainable: true,
        })
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let t = self.store.get(id).tensor.clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        bound[id.0] = Some(v);
        v
    }

    /// Gradient for every registered parameter, in registry order; zero for
    /// parameters the loss does not reach.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .zip(bound.iter())
            .map(|(p, v)| match v {
                Some(v) => grads.wrt(*v),
                None => Tensor::zeros(p.tensor.shape()),
            })
            .collect()
    }
}

/// Square-kernel 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// "Same" padding (`k / 2`), stride 1, He-normal weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_kind(
            store,
            name,
            c_in,
            c_out,
            kernel,
            bias,
            ParamKind::ConvWeight,
        )
    }

    /// Like [`Conv2d::new`] but registers the weight under `kind`.
    pub fn with_kind(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
        kind: ParamKind,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w = Tensor::rand_normal(&[c_out, c_in, kernel, kernel], std, store.rng());
        let weight = store.add(format!("{name}.weight"), kind, w)?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                ParamKind::ConvBias,
                Tensor::zeros(&[c_out]),
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            ctx.param(self.weight),
            self.bias.map(|b| ctx.param(b)),
            self.stride,
            self.padding,
        )
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.shape()[0]
    }
}
