//! Graph construction, adjacency normalisation and graph convolution.
//!
//! Two graph families are used. Channel graphs have one node per feature
//! channel and a learnable adjacency owned by the convolution layer. Spatial
//! vessel graphs have one node per (sub-sampled) vessel pixel and a fixed
//! k-nearest-neighbour adjacency built from pixel coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Node features plus adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// `[N, F]`
    pub node_features: Tensor,
    /// `[N, N]`, nonnegative.
    pub adjacency: Tensor,
    /// Whether `adjacency` already is the propagation matrix.
    pub normalized: bool,
}

impl Graph {
    pub fn new(node_features: Tensor, adjacency: Tensor, normalized: bool) -> Result<Self> {
        let fs = node_features.shape();
        let as_ = adjacency.shape();
        if fs.len() != 2 || as_.len() != 2 || as_[0] != as_[1] || as_[0] != fs[0] {
            return Err(Error::shape(format!(
                "graph with features {fs:?} and adjacency {as_:?}"
            )));
        }
        if adjacency.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("adjacency entries must be nonnegative"));
        }
        Ok(Graph {
            node_features,
            adjacency,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.shape()[1]
    }
}

/// One channel graph per batch element from pooled `[B, C, 1, 1]` features:
/// `C` nodes with one scalar feature each and no structural edges (the
/// convolution layer supplies the adjacency).
pub fn build_channel_graph(feat: &Tensor) -> Result<Vec<Graph>> {
    let s = feat.shape();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return Err(Error::contract(format!(
            "channel graphs need spatially pooled [B, C, 1, 1] features, got {s:?}"
        )));
    }
    let (b, c) = (s[0], s[1]);
    (0..b)
        .map(|bi| {
            let x = Tensor::from_raw(vec![c, 1], feat.data()[bi * c..(bi + 1) * c].to_vec());
            Graph::new(x, Tensor::zeros(&[c, c]), false)
        })
        .collect()
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(format!("adjacency must be square, got {s:?}")));
    }
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("adjacency entries must be nonnegative"));
    }
    let n = s[0];
    let mut with_loops = a.data().to_vec();
    for i in 0..n {
        with_loops[i * n + i] += 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            with_loops[i * n..(i + 1) * n]
                .iter()
                .sum::<f64>()
                .powf(-0.5)
        })
        .collect();
    let out = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            inv_sqrt_deg[i] * with_loops[idx] * inv_sqrt_deg[j]
        })
        .collect();
    Ok(Tensor::from_raw(vec![n, n], out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphActivation {
    Sigmoid,
    Relu,
    Linear,
}

impl GraphActivation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            GraphActivation::Sigmoid => x.sigmoid(),
            GraphActivation::Relu => x.relu(),
            GraphActivation::Linear => Ok(x),
        }
    }
}

/// Single-hop propagation `act(Â · X · W)`.
///
/// A layer either owns learnable adjacency logits for a fixed node count
/// (row softmax, symmetrised, then normalised) or is applied to a
/// caller-supplied structural adjacency.
#[derive(Debug, Clone)]
pub struct GraphConvLayer {
    pub weight: ParamId,
    pub adjacency_logits: Option<ParamId>,
    pub activation: GraphActivation,
    pub f_in: usize,
    pub f_out: usize,
}

impl GraphConvLayer {
    pub fn learned(
        store: &mut ParamStore,
        name: &str,
        nodes: usize,
        f_in: usize,
        f_out: usize,
        activation: GraphActivation,
    ) -> Result<Self> {
        let mut layer = Self::structural(store, name, f_in, f_out, activation)?;
        let logits = store.add(
            format!("{name}.adjacency"),
            ParamKind::GraphAdjacency,
            Tensor::zeros(&[nodes, nodes]),
        )?;
        layer.adjacency_logits = Some(logits);
        Ok(layer)
    }

    pub fn structural(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        activation: GraphActivation,
    ) -> Result<Self> {
        let bound = (6.0 / (f_in + f_out) as f64).sqrt();
        let w = Tensor::rand_uniform(&[f_in, f_out], -bound, bound, store.rng());
        let weight = store.add(format!("{name}.weight"), ParamKind::GraphWeight, w)?;
        Ok(GraphConvLayer {
            weight,
            adjacency_logits: None,
            activation,
            f_in,
            f_out,
        })
    }

    pub fn nodes(&self, store: &ParamStore) -> Option<usize> {
        self.adjacency_logits
            .map(|id| store.get(id).tensor.shape()[0])
    }

    /// Differentiable propagation matrix from the learnable logits.
    pub fn propagation<'t>(&self, ctx: &Ctx<'t, '_>) -> Result<Var<'t>> {
        let id = self
            .adjacency_logits
            .ok_or_else(|| Error::config("layer has no learnable adjacency"))?;
        learned_propagation(ctx.tape(), ctx.param(id))
    }

    /// Applies the layer to a batch of graphs `[B, N, F_in]` sharing the
    /// learned adjacency.
    pub fn forward_batched<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let n = self
            .nodes(ctx.store())
            .ok_or_else(|| Error::config("forward_batched needs a learned adjacency"))?;
        if s.len() != 3 || s[1] != n || s[2] != self.f_in {
            return Err(Error::shape(format!(
                "graph conv over {n} nodes with {} features got {s:?}",
                self.f_in
            )));
        }
        let b = s[0];
        let prop = self.propagation(ctx)?;
        let xw = x
            .reshape(&[b * n, self.f_in])?
            .matmul(ctx.param(self.weight))?
            .reshape(&[b, n, self.f_out])?;
        let mixed = prop
            .matmul(xw.permute(&[1, 0, 2])?.reshape(&[n, b * self.f_out])?)?
            .reshape(&[n, b, self.f_out])?
            .permute(&[1, 0, 2])?;
        self.activation.apply(mixed)
    }

    /// Applies the layer to one graph `[N, F_in]` with an already normalised
    /// structural propagation matrix.
    pub fn forward_structural<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        propagation: Var<'t>,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.f_in {
            return Err(Error::shape(format!(
                "graph conv with {} input features got {s:?}",
                self.f_in
            )));
        }
        let out = propagation.matmul(x.matmul(ctx.param(self.weight))?)?;
        self.activation.apply(out)
    }
}

/// `D^{-1/2}(A + I)D^{-1/2}` with `A = ½(S + Sᵀ)`, `S = softmax_rows(logits)`.
pub fn learned_propagation<'t>(tape: &'t Tape, logits: Var<'t>) -> Result<Var<'t>> {
    let n = logits.shape()[0];
    let s = logits.softmax(1)?;
    let a = s.add(s.t()?)?.mul_scalar(0.5)?;
    let a = a.add(tape.constant(Tensor::eye(n)))?;
    let inv_sqrt = a.sum_axes(&[1])?.powf(-0.5)?;
    a.mul(inv_sqrt)?.mul(inv_sqrt.reshape(&[1, n])?)
}

/// Value-level graph convolution. Layers with learnable logits ignore
/// `g.adjacency`; structural layers normalise it unless already normalised.
pub fn graph_conv(layer: &GraphConvLayer, store: &ParamStore, g: &Graph) -> Result<Graph> {
    if g.feature_dim() != layer.f_in {
        return Err(Error::shape(format!(
            "graph has {} features, layer expects {}",
            g.feature_dim(),
            layer.f_in
        )));
    }
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store);
    let x = tape.constant(g.node_features.clone());
    let out = match layer.nodes(store) {
        Some(n) => {
            if n != g.num_nodes() {
                return Err(Error::shape(format!(
                    "layer adjacency has {n} nodes, graph has {}",
                    g.num_nodes()
                )));
            }
            let batched = x.reshape(&[1, n, layer.f_in])?;
            layer
                .forward_batched(&ctx, batched)?
                .reshape(&[n, layer.f_out])?
        }
        None => {
            let prop = if g.normalized {
                g.adjacency.clone()
            } else {
                normalize_adjacency(&g.adjacency)?
            };
            layer.forward_structural(&ctx, tape.constant(prop), x)?
        }
    };
    Ok(Graph {
        node_features: (*out.value()).clone(),
        adjacency: g.adjacency.clone(),
        normalized: g.normalized,
    })
}

/// Spatial vessel graph of one image.
#[derive(Debug, Clone, PartialEq)]
pub enum VesselGraph {
    /// No vessel pixel in the mask.
    Empty,
    Nodes {
        graph: Graph,
        /// Flat `row * W + col` pixel index of each node.
        pixels: Vec<usize>,
    },
}

/// Vessel pixels of a binary `[H, W]` mask in raster order, uniformly
/// sub-sampled to at most `max_nodes` with a `seed`ed generator.
pub fn vessel_nodes(mask: &Tensor, max_nodes: usize, seed: u64) -> Result<Vec<usize>> {
    if max_nodes == 0 {
        return Err(Error::config("max_nodes must be at least 1"));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("vessel mask must be binary"));
    }
    let all: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    if all.len() <= max_nodes {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), max_nodes).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i]).collect())
}

/// Symmetrised k-nearest-neighbour adjacency over pixel coordinates.
/// Neighbour ties resolve to the lower node index; an edge exists when
/// either endpoint lists the other.
pub fn knn_adjacency(pixels: &[usize], width: usize, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let n = pixels.len();
    let coords: Vec<(f64, f64)> = pixels
        .iter()
        .map(|&p| ((p / width) as f64, (p % width) as f64))
        .collect();
    let mut adj = vec![0.0; n * n];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        for j in 0..n {
            if j != i {
                let (dr, dc) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
                order.push((dr * dr + dc * dc, j));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in order.iter().take(k) {
            adj[i * n + j] = 1.0;
            adj[j * n + i] = 1.0;
        }
    }
    Ok(Tensor::from_raw(vec![n, n], adj))
}

/// Builds the spatial vessel graph of a binary `[H, W]` mask with node
/// features taken from `[C, H, W]` at each selected pixel. The adjacency is
/// returned normalised.
pub fn build_spatial_vessel_graph(
    mask: &Tensor,
    feat: &Tensor,
    max_nodes: usize,
    k: usize,
    seed: u64,
) -> Result<VesselGraph> {
    let ms = mask.shape();
    let fs = feat.shape();
    if ms.len() != 2 || fs.len() != 3 || fs[1] != ms[0] || fs[2] != ms[1] {
        return Err(Error::shape(format!(
            "mask {ms:?} and features {fs:?} are not aligned"
        )));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let pixels = vessel_nodes(mask, max_nodes, seed)?;
    if pixels.is_empty() {
        return Ok(VesselGraph::Empty);
    }
    let (c, hw) = (fs[0], ms[0] * ms[1]);
    let mut x = Vec::with_capacity(pixels.len() * c);
    for &p in &pixels {
        for ch in 0..c {
            x.push(feat.data()[ch * hw + p]);
        }
    }
    let adjacency = normalize_adjacency(&knn_adjacency(&pixels, ms[1], k)?)?;
    let graph = Graph::new(Tensor::from_raw(vec![pixels.len(), c], x), adjacency, true)?;
    Ok(VesselGraph::Nodes { graph, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense oracle: explicit degree matrix and two matrix products.
    fn oracle_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m = a.to_vec();
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            d[i][i] = 1.0 / m[i].iter().sum::<f64>().sqrt();
        }
        let mul = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            let mut z = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        z[i][j] += x[i][k] * y[k][j];
                    }
                }
            }
            z
        };
        mul(&mul(&d, &m), &d)
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        let n = rows.len();
        Tensor::new(&[n, rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_adjacency(&Tensor::zeros(&[2, 2])).unwrap(),
            Tensor::eye(2)
        );
        let a = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        for &v in n.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let rows = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        let n = normalize_adjacency(&to_tensor(&rows)).unwrap();
        let want = oracle_normalize(&rows);
        assert!(n.max_abs_diff(&to_tensor(&want)) < 1e-15);
        assert!((n.at(&[0, 0]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((n.at(&[0, 1]) - 2.0 / 3.0).abs() < 1e-15);
        assert!(normalize_adjacency(&Tensor::new(&[1, 1], vec![-1.0]).unwrap()).is_err());
    }

    #[test]
    fn channel_graph_construction() {
        let feat = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = build_channel_graph(&feat).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].node_features.shape(), &[4, 1]);
        assert_eq!(g[0].node_features.data(), &[1.0, 2.0, 3.0, 4.0]);

        let single = build_channel_graph(&Tensor::ones(&[1, 1, 1, 1])).unwrap();
        assert_eq!(single[0].num_nodes(), 1);

        let two = Tensor::new(&[2, 2, 1, 1], vec![1.0, 2.0, 5.0, 6.0]).unwrap();
        let g = build_channel_graph(&two).unwrap();
        assert_eq!(g[0].node_features.data(), &[1.0, 2.0]);
        assert_eq!(g[1].node_features.data(), &[5.0, 6.0]);

        assert!(matches!(
            build_channel_graph(&Tensor::ones(&[1, 2, 2, 1])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn graph_conv_identity_and_symmetry() {
        let mut store = ParamStore::new(1);
        let layer =
            GraphConvLayer::structural(&mut store, "g", 3, 3, GraphActivation::Linear).unwrap();
        *store.tensor_mut(layer.weight) = Tensor::eye(3);
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 - 5.0);
        let g = Graph::new(x.clone(), Tensor::zeros(&[4, 4]), false).unwrap();
        let out = graph_conv(&layer, &store, &g).unwrap();
        assert_eq!(out.node_features, x);

        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let a = Tensor::new(&[2, 2], vec![0.0, 0.7, 0.7, 0.0]).unwrap();
        let out = graph_conv(&layer, &store, &Graph::new(x, a, false).unwrap()).unwrap();
        let f = out.node_features;
        for c in 0..3 {
            assert_eq!(f.at(&[0, c]), f.at(&[1, c]));
        }
    }

    #[test]
    fn graph_conv_matches_triple_loop() {
        let mut store = ParamStore::new(9);
        let layer =
            GraphConvLayer::structural(&mut store, "g", 3, 2, GraphActivation::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let mut a = Tensor::rand_uniform(&[5, 5], 0.0, 1.0, &mut rng);
        for i in 0..5 {
            for j in 0..i {
                let v = a.at(&[i, j]);
                a.set(&[j, i], v);
            }
        }
        let out = graph_conv(
            &layer,
            &store,
            &Graph::new(x.clone(), a.clone(), false).unwrap(),
        )
        .unwrap();
        let p = normalize_adjacency(&a).unwrap();
        let w = &store.get(layer.weight).tensor;
        for i in 0..5 {
            for o in 0..2 {
                let mut acc = 0.0;
                for j in 0..5 {
                    for f in 0..3 {
                        acc += p.at(&[i, j]) * x.at(&[j, f]) * w.at(&[f, o]);
                    }
                }
                assert!((acc - out.node_features.at(&[i, o])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_graph_examples() {
        // all zero mask
        let mask = Tensor::zeros(&[4, 4]);
        let feat = Tensor::ones(&[2, 4, 4]);
        assert_eq!(
            build_spatial_vessel_graph(&mask, &feat, 256, 8, 0).unwrap(),
            VesselGraph::Empty
        );
        // single vessel pixel
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.set(&[1, 2], 1.0);
        match build_spatial_vessel_graph(&mask, &feat, 256, 8, 0).unwrap() {
            VesselGraph::Nodes { graph, pixels } => {
                assert_eq!(pixels, vec![6]);
                assert_eq!(graph.adjacency, Tensor::eye(1));
            }
            VesselGraph::Empty => panic!("expected one node"),
        }
    }

    #[test]
    fn collinear_pixels_k1_match_brute_force() {
        let mut mask = Tensor::zeros(&[3, 5]);
        for c in 1..4 {
            mask.set(&[1, c], 1.0);
        }
        let pixels = vessel_nodes(&mask, 256, 0).unwrap();
        let adj = knn_adjacency(&pixels, 5, 1).unwrap();
        // brute force: all pairwise distances, nearest neighbour by (distance, index)
        let coords: Vec<(i64, i64)> = pixels
            .iter()
            .map(|&p| ((p / 5) as i64, (p % 5) as i64))
            .collect();
        let mut want = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            let mut best: Option<(i64, usize)> = None;
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let d = (coords[i].0 - coords[j].0).pow(2) + (coords[i].1 - coords[j].1).pow(2);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            let j = best.unwrap().1;
            want[i][j] = 1.0;
            want[j][i] = 1.0;
        }
        assert_eq!(adj, to_tensor(&want));
        // middle node touches both ends
        assert_eq!(adj.at(&[1, 0]), 1.0);
        assert_eq!(adj.at(&[1, 2]), 1.0);
    }

    #[test]
    fn subsampling_is_seeded() {
        let mask = Tensor::ones(&[20, 20]);
        let a = vessel_nodes(&mask, 50, 7).unwrap();
        let b = vessel_nodes(&mask, 50, 7).unwrap();
        let c = vessel_nodes(&mask, 50, 8).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn shared_layer_registers_one_weight() {
        let mut store = ParamStore::new(0);
        let layer =
            GraphConvLayer::learned(&mut store, "shared", 4, 1, 1, GraphActivation::Sigmoid)
                .unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        for _ in 0..3 {
            let x = tape.constant(Tensor::ones(&[2, 4, 1]));
            layer.forward_batched(&ctx, x).unwrap();
        }
        assert_eq!(store.count_kind(ParamKind::GraphWeight), 1);
        assert_eq!(store.scalar_count(), 1 + 16);
    }
}
