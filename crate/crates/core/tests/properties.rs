use gcc_unet::capsule::{routing_trace, squash_value};
use gcc_unet::data::{extract_patches, generate_synthetic, FundusSample};
use gcc_unet::fusion::sign_split;
use gcc_unet::graph::{graph_conv, normalize_adjacency, Graph, GraphActivation, GraphConvLayer};
use gcc_unet::metrics::{auroc, cal_metrics, Confusion};
use gcc_unet::nn::ParamStore;
use gcc_unet::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn symmetric(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..2.0, n * n).prop_map(move |d| {
        Tensor::from_fn(&[n, n], |i| {
            let (r, c) = (i / n, i % n);
            d[r.min(c) * n + r.max(c)]
        })
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in tensor(vec![3, 5])) {
        let tape = Tape::new();
        let s = tape.constant(x).softmax(1).unwrap().value();
        for row in s.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric(a in symmetric(6)) {
        let p = normalize_adjacency(&a).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                prop_assert!((p.at(&[i, j]) - p.at(&[j, i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn graph_conv_is_permutation_equivariant(
        a in symmetric(5),
        x in tensor(vec![5, 3]),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..1000,
    ) {
        let mut store = ParamStore::new(seed);
        let layer = GraphConvLayer::structural(&mut store, "g", 3, 2, GraphActivation::Relu).unwrap();
        let out = graph_conv(&layer, &store, &Graph::new(x.clone(), a.clone(), false).unwrap()).unwrap();
        let pa = Tensor::from_fn(&[5, 5], |i| a.at(&[perm[i / 5], perm[i % 5]]));
        let px = Tensor::from_fn(&[5, 3], |i| x.at(&[perm[i / 3], i % 3]));
        let pout = graph_conv(&layer, &store, &Graph::new(px, pa, false).unwrap()).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for f in 0..2 {
                let d = pout.node_features.at(&[i, f]) - out.node_features.at(&[pi, f]);
                prop_assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn squash_norm_below_one(v in prop::collection::vec(-1e3f64..1e3, 1..9)) {
        let s = squash_value(&v);
        let n: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n < 1.0);
    }

    #[test]
    fn routing_couplings_are_distributions(u in tensor(vec![6, 3, 4]), iters in 1usize..5) {
        let tr = routing_trace(&u, iters).unwrap();
        for c in &tr.couplings {
            for row in c.data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        for v in &tr.outputs {
            for cap in v.data().chunks(4) {
                prop_assert!(cap.iter().map(|x| x * x).sum::<f64>() < 1.0);
            }
        }
    }

    #[test]
    fn sign_split_partitions(
        p in prop::collection::vec(0.0f64..=1.0, 12),
        y in tensor(vec![1, 2, 3, 4]),
        t in 0.0f64..1.0,
    ) {
        let tape = Tape::new();
        let pv = tape.constant(Tensor::new(&[1, 1, 3, 4], p).unwrap());
        let s = sign_split(pv, tape.constant(y.clone()), t).unwrap();
        let (v, b, m) = (s.vessel.value(), s.background.value(), s.mask.value());
        for i in 0..24 {
            prop_assert_eq!(v.data()[i] + b.data()[i], y.data()[i]);
            prop_assert!(v.data()[i] == 0.0 || b.data()[i] == 0.0);
        }
        prop_assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn inverted_scores_swap_se_and_sp(
        k in prop::collection::vec(0u32..=1024, 40),
        y in prop::collection::vec(any::<bool>(), 40),
        tk in 0u32..1024,
    ) {
        // dyadic scores and a threshold between grid points keep 1 − s exact
        let s: Vec<f64> = k.iter().map(|&v| f64::from(v) / 1024.0).collect();
        let t = (f64::from(tk) + 0.5) / 1024.0;
        let labels: Vec<f64> = y.iter().map(|&b| b as u8 as f64).collect();
        let inv_s: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let inv_y: Vec<f64> = labels.iter().map(|v| 1.0 - v).collect();
        let fov = vec![1.0; 40];
        let a = Confusion::from_scores(&s, &labels, &fov, t);
        let b = Confusion::from_scores(&inv_s, &inv_y, &fov, 1.0 - t);
        prop_assert_eq!(a.sensitivity(), b.specificity());
        prop_assert_eq!(a.specificity(), b.sensitivity());
    }

    #[test]
    fn auroc_is_invariant_under_monotone_maps(
        s in prop::collection::vec(-5.0f64..5.0, 2..40),
        seed in any::<u64>(),
    ) {
        let y: Vec<bool> = (0..s.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let mapped: Vec<f64> = s.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        prop_assert_eq!(auroc(&s, &y), auroc(&mapped, &y));
    }

    #[test]
    fn mcc_properties(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let c = Confusion { tp, tn, fp, fn_ };
        if let Some(m) = c.mcc() {
            prop_assert!((-1.0..=1.0).contains(&m));
            prop_assert_eq!(m == 1.0, fp == 0 && fn_ == 0 && tp > 0 && tn > 0);
        }
        let eq = Confusion { tp, tn: tp, fp: tp, fn_: tp };
        prop_assert!(eq.mcc().is_none_or(|m| m == 0.0));
        prop_assert_eq!(c.total(), tp + tn + fp + fn_);
    }

    #[test]
    fn cal_is_bounded(
        p in prop::collection::vec(any::<bool>(), 100),
        g in prop::collection::vec(any::<bool>(), 100),
    ) {
        let t = |v: &[bool]| Tensor::from_fn(&[10, 10], |i| v[i] as u8 as f64);
        if let Some(cal) = cal_metrics(&t(&p), &t(&g)).unwrap() {
            for v in [cal.c, cal.a, cal.l, cal.f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(cal.f, cal.c * cal.a * cal.l);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_samples_satisfy_invariants(seed in any::<u64>(), size_step in 2usize..9) {
        let size = 8 * size_step;
        for s in generate_synthetic(seed, 2, size).unwrap() {
            let rebuilt = FundusSample::new(s.id.clone(), s.image.clone(), s.label.clone(), s.fov.clone());
            prop_assert!(rebuilt.is_ok());
            prop_assert_eq!(s.image.shape(), &[1, size, size]);
            prop_assert!(s.fov.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn patches_stay_in_bounds(seed in any::<u64>(), size in 1usize..24, stride in 1usize..12) {
        let s = &generate_synthetic(seed, 1, 24).unwrap()[0];
        let patches = extract_patches(s, size, stride).unwrap();
        prop_assert_eq!(patches.len(), ((24 - size) / stride + 1).pow(2));
        let n = (24 - size) / stride + 1;
        for (k, p) in patches.iter().enumerate() {
            let (y0, x0) = (stride * (k / n), stride * (k % n));
            prop_assert!(y0 + size <= 24 && x0 + size <= 24);
            prop_assert_eq!(p.label.at(&[size - 1, size - 1]), s.label.at(&[y0 + size - 1, x0 + size - 1]));
        }
    }
}
