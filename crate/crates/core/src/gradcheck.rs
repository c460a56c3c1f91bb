//! Central finite-difference gradient checking.
//!
//! A function under test maps tape inputs to any output; the check contracts
//! the output with a fixed pseudo-random weight tensor so that every output
//! component contributes to the scalar being differentiated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::capsule::{CapsuleConfig, CapsuleConv};
use crate::error::{Error, Result};
use crate::fusion::{Bga, Cga, Msgf, MsgfMode, Sga, SgaConfig, Sgaf};
use crate::graph::{learned_propagation, normalize_adjacency};
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::par;
use crate::tensor::Tensor;

/// Relative errors are measured as `|a - n| / max(|a|, |n|, REL_FLOOR)`.
/// Central differences at a step of `1e-5` carry roundoff near `1e-10`, so
/// smaller gradients are compared against the floor.
pub const REL_FLOOR: f64 = 1e-5;

const PROJECTION_SEED: u64 = 0x6772_6164;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Non-differentiable sub-paths the tape treated as constants.
    pub excluded: Vec<String>,
}

impl CheckReport {
    fn merge(&mut self, other: &CheckReport) {
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.passed &= other.passed;
        for e in &other.excluded {
            if !self.excluded.contains(e) {
                self.excluded.push(e.clone());
            }
        }
    }

    /// Folds a sequence of trial reports into one.
    pub fn combine(reports: &[CheckReport]) -> Option<CheckReport> {
        let mut it = reports.iter();
        let mut acc = it.next()?.clone();
        for r in it {
            acc.merge(r);
        }
        Some(acc)
    }
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Up to `n` distinct coordinates per input, drawn with `seed`.
    Sample {
        n: usize,
        seed: u64,
    },
}

fn scalarise<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let weights = Tensor::rand_uniform(&out.shape(), -1.0, 1.0, &mut rng);
    out.mul(tape.constant(weights))?.sum_all()
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    Ok(scalarise(&tape, out)?.value().item())
}

fn pick_coords(numel: usize, coords: Coords, input_index: usize) -> Vec<usize> {
    match coords {
        Coords::All => (0..numel).collect(),
        Coords::Sample { n, seed } => {
            if n >= numel {
                return (0..numel).collect();
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (input_index as u64).wrapping_mul(0x9e37));
            let mut picked = rand::seq::index::sample(&mut rng, numel, n).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// Compares analytic gradients of `f` with respect to every input against
/// central differences with step `eps`.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    coords: Coords,
) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = scalarise(&tape, out)?;
    let analytic_value = loss.value().item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let excluded = tape.excluded_ops().iter().map(|s| s.to_string()).collect();

    let probe = evaluate(&f, inputs)?;
    if probe.to_bits() != analytic_value.to_bits()
        || probe.to_bits() != evaluate(&f, inputs)?.to_bits()
    {
        return Err(Error::NonDeterministic(format!(
            "function returned {analytic_value:e} and then {probe:e} for the same input"
        )));
    }

    let mut report = CheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
        tolerance: tol,
        passed: true,
        excluded,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in pick_coords(input.numel(), coords, i) {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

/// Single-input convenience form of [`grad_check_multi`] checking every
/// coordinate.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64, tol: f64) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(input),
        eps,
        tol,
        Coords::All,
    )
}

/// Tolerance on the maximum relative error for single operators.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composed blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-3;
/// Central-difference step used by the suite.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates perturbed per block input.
const BLOCK_COORDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Op,
    Block,
}

/// One named entry of the gradient-check suite.
#[derive(Clone, Copy)]
pub struct SuiteCheck {
    pub name: &'static str,
    pub kind: CheckKind,
    trial: fn(u64) -> Result<CheckReport>,
}

impl SuiteCheck {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            CheckKind::Op => OP_TOLERANCE,
            CheckKind::Block => BLOCK_TOLERANCE,
        }
    }

    /// One randomized trial; `seed` drives inputs and parameters.
    pub fn trial(&self, seed: u64) -> Result<CheckReport> {
        (self.trial)(seed)
    }
}

/// Aggregate of all trials of one suite entry.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub kind: CheckKind,
    pub trials: usize,
    pub report: CheckReport,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn op_check<F>(f: F, inputs: &[Tensor]) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_multi(f, inputs, FD_STEP, OP_TOLERANCE, Coords::All)
}

/// Redraws every parameter uniformly in `[-1, 1]`.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed ^ 0x7061_7261);
    for p in store.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        p.tensor = uniform(&shape, &mut r);
    }
}

/// Checks a block with respect to its feature inputs and every parameter.
fn block_check<F>(store: &ParamStore, inputs: Vec<Tensor>, seed: u64, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&Ctx<'t, '_>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = inputs.len();
    let mut all = inputs;
    all.extend(store.iter().map(|p| p.tensor.clone()));
    grad_check_multi(
        |tape, vars| {
            let ctx = Ctx::with_leaves(tape, store, &vars[n..])?;
            f(&ctx, &vars[..n])
        },
        &all,
        FD_STEP,
        BLOCK_TOLERANCE,
        Coords::Sample {
            n: BLOCK_COORDS,
            seed,
        },
    )
}

fn small_capsules() -> CapsuleConfig {
    CapsuleConfig {
        cap_channels: 2,
        capsules: 2,
        atoms: 2,
        kernel: 3,
        iterations: 3,
    }
}

fn small_sga(seed: u64) -> SgaConfig {
    SgaConfig {
        threshold: 0.4,
        max_nodes: 8,
        k: 3,
        seed,
    }
}

fn check_conv2d(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let inputs = [
        uniform(&[1, 2, 5, 5], &mut r),
        uniform(&[2, 2, 3, 3], &mut r),
        uniform(&[2], &mut r),
    ];
    op_check(|_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1), &inputs)
}

fn check_max_pool(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(|_, v| v[0].max_pool2x2(), &[uniform(&[1, 2, 4, 4], &mut r)])
}

fn check_global_avg_pool(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].global_avg_pool(),
        &[uniform(&[2, 3, 3, 4], &mut r)],
    )
}

fn check_upsample(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].upsample_nearest(2),
        &[uniform(&[1, 2, 3, 3], &mut r)],
    )
}

fn check_softmax(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].softmax(1),
        &[uniform(&[3, 4], &mut r).map(|x| 3.0 * x)],
    )
}

fn check_relu(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(|_, v| v[0].relu(), &[uniform(&[12], &mut r)])
}

fn check_sigmoid(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].sigmoid(),
        &[uniform(&[12], &mut r).map(|x| 4.0 * x)],
    )
}

fn check_matmul(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].matmul(v[1]),
        &[uniform(&[3, 4], &mut r), uniform(&[4, 2], &mut r)],
    )
}

fn check_squash(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].squash(),
        &[uniform(&[4, 3], &mut r).map(|x| 2.0 * x)],
    )
}

fn check_capsule_votes(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let inputs = [
        uniform(&[1, 2, 2, 4, 2, 2, 3], &mut r),
        uniform(&[4, 2, 3, 2, 3], &mut r),
    ];
    op_check(|_, v| v[0].capsule_votes(v[1]), &inputs)
}

fn check_routing(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |_, v| v[0].dynamic_routing(3),
        &[uniform(&[2, 3, 2, 3], &mut r)],
    )
}

fn check_fused_routing(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let inputs = [
        uniform(&[1, 2, 2, 4, 2, 2, 2], &mut r),
        uniform(&[4, 2, 3, 2, 2], &mut r),
    ];
    op_check(|_, v| v[0].route_capsules(v[1], 3), &inputs)
}

fn check_learned_adjacency(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    op_check(
        |tape, v| learned_propagation(tape, v[0]),
        &[uniform(&[4, 4], &mut r)],
    )
}

fn check_graph_conv(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let a = uniform(&[5, 5], &mut r).map(f64::abs);
    let a = a.zip_map(&a.permute(&[1, 0])?, |x, y| x + y);
    let prop = normalize_adjacency(&a)?;
    let inputs = [uniform(&[5, 3], &mut r), uniform(&[3, 2], &mut r)];
    op_check(
        |tape, v| {
            tape.constant(prop.clone())
                .matmul(v[0].matmul(v[1])?)?
                .relu()
        },
        &inputs,
    )
}

fn check_cross_entropy(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let logits = uniform(&[2, 2, 3, 3], &mut r).map(|x| 3.0 * x);
    let target = uniform(&[2, 3, 3], &mut r).map(|x| (x > 0.0) as u8 as f64);
    let mut fov = uniform(&[2, 3, 3], &mut r).map(|x| (x > -0.5) as u8 as f64);
    fov.data_mut()[0] = 1.0;
    op_check(move |_, v| v[0].cross_entropy(&target, &fov), &[logits])
}

fn check_conv_layer(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, true)?;
    randomize(&mut store, seed);
    let x = uniform(&[1, 2, 4, 4], &mut rng(seed));
    block_check(&store, vec![x], seed, |ctx, v| {
        conv.forward(ctx, v[0])?.relu()
    })
}

fn check_capsule_conv(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let conv = CapsuleConv::vanilla(&mut store, "caps", 3, 2, small_capsules())?;
    randomize(&mut store, seed);
    let x = uniform(&[1, 3, 4, 4], &mut rng(seed));
    block_check(&store, vec![x], seed, |ctx, v| conv.forward(ctx, v[0]))
}

fn check_gc_conv(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let conv = CapsuleConv::graph(&mut store, "gc", 3, 2, small_capsules())?;
    randomize(&mut store, seed);
    let x = uniform(&[1, 3, 4, 4], &mut rng(seed));
    block_check(&store, vec![x], seed, |ctx, v| conv.forward(ctx, v[0]))
}

fn check_sgaf(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let sgaf = Sgaf::new(&mut store, "sgaf", 3)?;
    randomize(&mut store, seed);
    let mut r = rng(seed);
    let inputs = vec![
        uniform(&[2, 3, 3, 3], &mut r),
        uniform(&[2, 3, 3, 3], &mut r),
    ];
    block_check(&store, inputs, seed, |ctx, v| sgaf.forward(ctx, v[0], v[1]))
}

fn check_cga(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let cga = Cga::new(&mut store, "cga", 4)?;
    randomize(&mut store, seed);
    let x = uniform(&[2, 4, 3, 3], &mut rng(seed));
    block_check(&store, vec![x], seed, |ctx, v| cga.forward(ctx, v[0]))
}

fn check_sga(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let sga = Sga::new(&mut store, "sga", 3, small_sga(seed))?;
    randomize(&mut store, seed);
    let x = uniform(&[1, 3, 4, 4], &mut rng(seed));
    block_check(&store, vec![x], seed, |ctx, v| sga.forward(ctx, v[0]))
}

fn check_bga(seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new(seed);
    let bga = Bga::new(&mut store, "bga", 3, small_sga(seed))?;
    randomize(&mut store, seed);
    let x = uniform(&[1, 3, 4, 4], &mut rng(seed));
    block_check(&store, vec![x], seed, |ctx, v| bga.forward(ctx, v[0]))
}

fn check_msgf(seed: u64) -> Result<CheckReport> {
    let mode = [MsgfMode::Shared, MsgfMode::Individual, MsgfMode::Concat][(seed % 3) as usize];
    let mut store = ParamStore::new(seed);
    let msgf = Msgf::new(&mut store, "msgf", (2, 3, 4), mode)?;
    randomize(&mut store, seed);
    let mut r = rng(seed);
    let inputs = vec![
        uniform(&[1, 2, 4, 4], &mut r),
        uniform(&[1, 3, 2, 2], &mut r),
        uniform(&[1, 4, 1, 1], &mut r),
    ];
    block_check(&store, inputs, seed, |ctx, v| {
        msgf.forward(ctx, v[0], v[1], v[2])
    })
}

/// Every operator and block of the network, in report order.
pub fn suite() -> Vec<SuiteCheck> {
    use CheckKind::{Block, Op};
    let entry = |name, kind, trial| SuiteCheck { name, kind, trial };
    vec![
        entry("conv2d", Op, check_conv2d as fn(u64) -> Result<CheckReport>),
        entry("max_pool", Op, check_max_pool),
        entry("global_avg_pool", Op, check_global_avg_pool),
        entry("upsample_nearest", Op, check_upsample),
        entry("softmax", Op, check_softmax),
        entry("relu", Op, check_relu),
        entry("sigmoid", Op, check_sigmoid),
        entry("matmul", Op, check_matmul),
        entry("squash", Op, check_squash),
        entry("capsule_votes", Op, check_capsule_votes),
        entry("routing", Op, check_routing),
        entry("fused_routing", Op, check_fused_routing),
        entry("learned_adjacency", Op, check_learned_adjacency),
        entry("graph_conv", Op, check_graph_conv),
        entry("cross_entropy", Op, check_cross_entropy),
        entry("conv_layer", Block, check_conv_layer),
        entry("capsule_conv", Block, check_capsule_conv),
        entry("gc_conv", Block, check_gc_conv),
        entry("sgaf", Block, check_sgaf),
        entry("cga", Block, check_cga),
        entry("sga", Block, check_sga),
        entry("bga", Block, check_bga),
        entry("msgf", Block, check_msgf),
    ]
}

/// Runs `trials` seeded trials of every entry whose name equals `only`
/// (all entries when `None`). Trial `t` of every entry uses seed `seed + t`.
pub fn run_suite(only: Option<&str>, trials: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let checks: Vec<SuiteCheck> = suite()
        .into_iter()
        .filter(|c| only.is_none_or(|n| n == c.name))
        .collect();
    if let Some(name) = only {
        if checks.is_empty() {
            let known: Vec<&str> = suite().iter().map(|c| c.name).collect();
            return Err(Error::config(format!(
                "unknown check {name:?}; known checks: {}",
                known.join(", ")
            )));
        }
    }
    if trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    let jobs: Vec<(usize, u64)> = (0..checks.len())
        .flat_map(|c| (0..trials as u64).map(move |t| (c, seed.wrapping_add(t))))
        .collect();
    let reports = par::map_indexed(jobs.len(), |i| checks[jobs[i].0].trial(jobs[i].1));
    let mut out = Vec::with_capacity(checks.len());
    let mut it = reports.into_iter();
    for check in &checks {
        let mut runs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut r = it.next().expect("one report per job")?;
            r.tolerance = check.tolerance();
            r.passed = r.max_rel_err <= r.tolerance;
            runs.push(r);
        }
        out.push(SuiteResult {
            name: check.name,
            kind: check.kind,
            trials,
            report: CheckReport::combine(&runs).expect("trials ≥ 1"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.7);
        let r = grad_check(|_, x| Ok(x), &x, 1e-5, 1e-8).unwrap();
        assert!(r.max_abs_err < 1e-9);
        assert!(r.passed);
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn softmax_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[5], -2.0, 2.0, &mut rng);
        let r = grad_check(|_, x| x.softmax(0), &x, 1e-5, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // A deliberately wrong backward: claims d(2x)/dx = 1.
        let x = Tensor::from_fn(&[3], |i| i as f64);
        let r = grad_check(
            |tape, x| {
                let v = x.value().map(|v| 2.0 * v);
                tape.record("bad", &[x], v, Box::new(|g, _, _| vec![Some(g.clone())]))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_deterministic_function_aborts() {
        let counter = Cell::new(0.0);
        let x = Tensor::ones(&[2]);
        let res = grad_check(
            |_, x| {
                counter.set(counter.get() + 1.0);
                x.add_scalar(counter.get())
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn stop_gradient_paths_are_reported() {
        let x = Tensor::from_fn(&[4], |i| i as f64 * 0.25 + 0.1);
        let r = grad_check(
            |tape, x| {
                let mask = x.value().map(|v| if v > 0.4 { 1.0 } else { 0.0 });
                let m = tape.stop_gradient("sign_gate", mask);
                x.mul(m)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.excluded, vec!["sign_gate".to_string()]);
    }

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for r in run_suite(None, 3, 100).unwrap() {
            assert!(r.report.passed, "{}: {:?}", r.name, r.report);
            assert!(r.report.checked > 0);
        }
    }

    #[test]
    fn suite_filters_by_name() {
        let r = run_suite(Some("squash"), 2, 0).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].name, "squash");
        assert!(matches!(
            run_suite(Some("nope"), 1, 0),
            Err(Error::Config(_))
        ));
    }
}
