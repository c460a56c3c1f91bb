//! Plain-loop reimplementations of the fusion blocks. Each function builds
//! the block with randomised parameters for one trial and returns the max
//! absolute difference between the block and the loop version.

use gcc_unet::fusion::{Cga, Msgf, MsgfMode, Sga, SgaConfig, Sgaf};
use gcc_unet::graph::GraphConvLayer;
use gcc_unet::nn::{Conv2d, Ctx, ParamStore};
use gcc_unet::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn param(store: &ParamStore, id: gcc_unet::nn::ParamId) -> &[f64] {
    store.get(id).tensor.data()
}

/// Row softmax, symmetrise, add self loops, symmetric degree scaling.
fn learned_adjacency(logits: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        let m = logits[i * n..(i + 1) * n]
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max);
        let z: f64 = (0..n).map(|j| (logits[i * n + j] - m).exp()).sum();
        for j in 0..n {
            s[i][j] = (logits[i * n + j] - m).exp() / z;
        }
    }
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = 0.5 * (s[i][j] + s[j][i]) + if i == j { 1.0 } else { 0.0 };
        }
    }
    scale_by_degree(a)
}

fn scale_by_degree(a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let d: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| a[i][j] / (d[i] * d[j]).sqrt()).collect())
        .collect()
}

/// Sigmoid channel gate of one pooled vector through a learned-adjacency
/// graph conv with a 1×1 weight.
fn channel_gate(store: &ParamStore, layer: &GraphConvLayer, pooled: &[f64]) -> Vec<f64> {
    let n = pooled.len();
    let adj = learned_adjacency(param(store, layer.adjacency_logits.unwrap()), n);
    let w = param(store, layer.weight)[0];
    (0..n)
        .map(|i| sigmoid((0..n).map(|j| adj[i][j] * pooled[j] * w).sum()))
        .collect()
}

/// Indexing helper for `[B, C, H, W]` buffers.
struct Map4<'a> {
    d: &'a [f64],
    c: usize,
    hw: usize,
}

impl Map4<'_> {
    fn at(&self, b: usize, c: usize, p: usize) -> f64 {
        self.d[(b * self.c + c) * self.hw + p]
    }

    fn pooled(&self, b: usize) -> Vec<f64> {
        (0..self.c)
            .map(|c| (0..self.hw).map(|p| self.at(b, c, p)).sum::<f64>() / self.hw as f64)
            .collect()
    }
}

fn conv1x1(
    store: &ParamStore,
    conv: &Conv2d,
    x: &Map4<'_>,
    b: usize,
    c_out: usize,
) -> Vec<Vec<f64>> {
    let w = param(store, conv.weight);
    let bias = conv.bias.map(|id| param(store, id).to_vec());
    (0..c_out)
        .map(|o| {
            (0..x.hw)
                .map(|p| {
                    let mut v = bias.as_ref().map_or(0.0, |bb| bb[o]);
                    for i in 0..x.c {
                        v += w[o * x.c + i] * x.at(b, i, p);
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn max_err(got: &Tensor, want: &[f64]) -> f64 {
    assert_eq!(got.numel(), want.len());
    got.data()
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn sgaf_error(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
    let (b, c, h, w) = (2, rng.gen_range(2..6), 4, 5);
    let mut store = ParamStore::new(trial);
    let sgaf = Sgaf::new(&mut store, "sgaf", c).unwrap();
    randomize(&mut store, trial);
    let xl = rand_tensor(&[b, c, h, w], &mut rng);
    let xg = rand_tensor(&[b, c, h, w], &mut rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let out = sgaf
        .forward(&ctx, tape.constant(xl.clone()), tape.constant(xg.clone()))
        .unwrap();

    let hw = h * w;
    let ml = Map4 {
        d: xl.data(),
        c,
        hw,
    };
    let mg = Map4 {
        d: xg.data(),
        c,
        hw,
    };
    let sum = xl.zip_map(&xg, |a, b| a + b);
    let mf = Map4 {
        d: sum.data(),
        c,
        hw,
    };
    let mut want = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        let gl = channel_gate(&store, &sgaf.gc_local, &ml.pooled(bi));
        let gfl = channel_gate(&store, &sgaf.gc_local, &mf.pooled(bi));
        let gg = channel_gate(&store, &sgaf.gc_global, &mg.pooled(bi));
        let gfg = channel_gate(&store, &sgaf.gc_global, &mf.pooled(bi));
        for ci in 0..c {
            for p in 0..hw {
                let (l, g) = (ml.at(bi, ci, p), mg.at(bi, ci, p));
                want.push(l * gl[ci] * gfl[ci] + l + g * gg[ci] * gfg[ci] + g);
            }
        }
    }
    max_err(&out.value(), &want)
}

pub fn cga_error(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
    let (b, c, h, w) = (2, rng.gen_range(2..7), 3, 4);
    let mut store = ParamStore::new(trial);
    let cga = Cga::new(&mut store, "cga", c).unwrap();
    randomize(&mut store, 50 + trial);
    let x = rand_tensor(&[b, c, h, w], &mut rng);
    let tape = Tape::new();
    let out = cga
        .forward(&Ctx::new(&tape, &store), tape.constant(x.clone()))
        .unwrap();

    let m = Map4 {
        d: x.data(),
        c,
        hw: h * w,
    };
    let mut want = Vec::new();
    for bi in 0..b {
        let g = channel_gate(&store, &cga.gc, &m.pooled(bi));
        for (ci, gc) in g.iter().enumerate().take(c) {
            for p in 0..h * w {
                let v = m.at(bi, ci, p);
                want.push(v * gc + v);
            }
        }
    }
    max_err(&out.value(), &want)
}

/// kNN over pixel coordinates by full sort, ties to the lower index, union
/// of both directions.
fn knn_union(pixels: &[usize], width: usize, k: usize) -> Vec<Vec<f64>> {
    let n = pixels.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut cand: Vec<(usize, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let (yi, xi) = ((pixels[i] / width) as i64, (pixels[i] % width) as i64);
                let (yj, xj) = ((pixels[j] / width) as i64, (pixels[j] % width) as i64);
                (((yi - yj).pow(2) + (xi - xj).pow(2)) as usize, j)
            })
            .collect();
        cand.sort();
        for &(_, j) in cand.iter().take(k) {
            a[i][j] = 1.0;
            a[j][i] = 1.0;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    scale_by_degree(a)
}

/// Also returns how many batch items produced a vessel graph.
pub fn sga_error(trial: u64) -> (f64, usize) {
    let mut nonempty = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
    let (b, c, h, w) = (2, rng.gen_range(2..5), 5, 6);
    let cfg = SgaConfig {
        k: rng.gen_range(1..6),
        ..SgaConfig::default()
    };
    let mut store = ParamStore::new(trial);
    let sga = Sga::new(&mut store, "sga", c, cfg).unwrap();
    randomize(&mut store, 90 + trial);
    let y = rand_tensor(&[b, c, h, w], &mut rng);
    let tape = Tape::new();
    let out = sga
        .forward(&Ctx::new(&tape, &store), tape.constant(y.clone()))
        .unwrap();

    let hw = h * w;
    let m = Map4 { d: y.data(), c, hw };
    let wsp = param(&store, sga.gc_spatial.weight);
    let mut want = Vec::new();
    for bi in 0..b {
        let z = conv1x1(&store, &sga.selector, &m, bi, 2);
        let p: Vec<f64> = (0..hw)
            .map(|i| {
                let mx = z[0][i].max(z[1][i]);
                let (e0, e1) = ((z[0][i] - mx).exp(), (z[1][i] - mx).exp());
                e1 / (e0 + e1)
            })
            .collect();
        let vessel: Vec<bool> = p.iter().map(|&v| v > cfg.threshold).collect();
        let pixels: Vec<usize> = (0..hw).filter(|&i| vessel[i]).collect();
        let mut plane = vec![vec![0.0; hw]; c];
        if !pixels.is_empty() {
            nonempty += 1;
            assert!(pixels.len() <= cfg.max_nodes);
            let adj = knn_union(&pixels, w, cfg.k);
            let feats: Vec<Vec<f64>> = pixels
                .iter()
                .map(|&px| (0..c).map(|ci| m.at(bi, ci, px) * p[px]).collect())
                .collect();
            let n = pixels.len();
            let pooled: Vec<f64> = (0..c)
                .map(|ci| {
                    pixels
                        .iter()
                        .map(|&px| m.at(bi, ci, px) * p[px])
                        .sum::<f64>()
                        / n as f64
                })
                .collect();
            let gate = channel_gate(&store, &sga.gc_channel_vessel, &pooled);
            for (r, &px) in pixels.iter().enumerate() {
                for co in 0..c {
                    let mut v = 0.0;
                    for (s, fs) in feats.iter().enumerate() {
                        let xw: f64 = (0..c).map(|ci| fs[ci] * wsp[ci * c + co]).sum();
                        v += adj[r][s] * xw;
                    }
                    plane[co][px] = gate[co] * v.max(0.0);
                }
            }
        }
        for (ci, row) in plane.iter().enumerate() {
            for px in 0..hw {
                let background = if vessel[px] { 0.0 } else { m.at(bi, ci, px) };
                want.push(row[px] + background);
            }
        }
    }
    (max_err(&out.value(), &want), nonempty)
}

fn upsample(plane: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    (0..h * f * w * f)
        .map(|i| {
            let (y, x) = (i / (w * f), i % (w * f));
            plane[(y / f) * w + x / f]
        })
        .collect()
}

/// Cycles through the three modes with the trial number.
pub fn msgf_error(trial: u64) -> f64 {
    let modes = [MsgfMode::Shared, MsgfMode::Individual, MsgfMode::Concat];
    let mode = modes[trial as usize % 3];
    let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
    let (b, ca, cb, cc, h, w) = (
        2,
        rng.gen_range(2..5),
        rng.gen_range(2..5),
        rng.gen_range(2..5),
        8,
        4,
    );
    let mut store = ParamStore::new(trial);
    let msgf = Msgf::new(&mut store, "msgf", (ca, cb, cc), mode).unwrap();
    randomize(&mut store, 130 + trial);
    let xa = rand_tensor(&[b, ca, h, w], &mut rng);
    let xb = rand_tensor(&[b, cb, h / 2, w / 2], &mut rng);
    let xc = rand_tensor(&[b, cc, h / 4, w / 4], &mut rng);
    let tape = Tape::new();
    let out = msgf
        .forward(
            &Ctx::new(&tape, &store),
            tape.constant(xa.clone()),
            tape.constant(xb.clone()),
            tape.constant(xc.clone()),
        )
        .unwrap();

    let hw = h * w;
    let mut want = Vec::new();
    for bi in 0..b {
        let a_map = Map4 {
            d: xa.data(),
            c: ca,
            hw,
        };
        let sa: Vec<Vec<f64>> = (0..ca)
            .map(|ci| (0..hw).map(|p| a_map.at(bi, ci, p)).collect())
            .collect();
        let b_map = Map4 {
            d: xb.data(),
            c: cb,
            hw: hw / 4,
        };
        let sb: Vec<Vec<f64>> = conv1x1(&store, &msgf.align_b, &b_map, bi, ca)
            .iter()
            .map(|pl| upsample(pl, h / 2, w / 2, 2))
            .collect();
        let c_map = Map4 {
            d: xc.data(),
            c: cc,
            hw: hw / 16,
        };
        let sc: Vec<Vec<f64>> = conv1x1(&store, &msgf.align_c, &c_map, bi, ca)
            .iter()
            .map(|pl| upsample(pl, h / 4, w / 4, 4))
            .collect();
        let streams = [sa, sb, sc];
        let pooled: Vec<Vec<f64>> = streams
            .iter()
            .map(|s| {
                s.iter()
                    .map(|pl| pl.iter().sum::<f64>() / hw as f64)
                    .collect()
            })
            .collect();
        let gates: Vec<Vec<f64>> = match mode {
            MsgfMode::Shared => pooled
                .iter()
                .map(|p| channel_gate(&store, &msgf.gcs[0], p))
                .collect(),
            MsgfMode::Individual => pooled
                .iter()
                .zip(&msgf.gcs)
                .map(|(p, g)| channel_gate(&store, g, p))
                .collect(),
            MsgfMode::Concat => {
                let joint = channel_gate(&store, &msgf.gcs[0], &pooled.concat());
                joint.chunks(ca).map(<[f64]>::to_vec).collect()
            }
        };
        let refined: Vec<Vec<f64>> = streams
            .iter()
            .zip(&gates)
            .flat_map(|(s, g)| {
                s.iter()
                    .zip(g)
                    .map(|(pl, &gv)| pl.iter().map(|v| v * gv + v).collect::<Vec<_>>())
            })
            .collect();
        let fw = param(&store, msgf.fuse.weight);
        let fb = param(&store, msgf.fuse.bias.unwrap());
        for o in 0..ca {
            for p in 0..hw {
                let mut v = fb[o];
                for (i, pl) in refined.iter().enumerate() {
                    v += fw[o * 3 * ca + i] * pl[p];
                }
                want.push(v);
            }
        }
    }
    max_err(&out.value(), &want)
}
