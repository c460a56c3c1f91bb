use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcc_unet::data::{
    generate_synthetic, load_mask, numeric_id, patch_set, read_fundus, save_mask,
    write_drive_layout, DatasetSpec, FundusSample, Source, Split,
};
use gcc_unet::gradcheck::run_suite;
use gcc_unet::metrics::MetricsReport;
use gcc_unet::network::{Model, Variant};
use gcc_unet::train::{evaluate, predict_image, score, train_with, Evaluation, TrainConfig};
use gcc_unet::Tensor;
use serde_json::{json, Map, Value};

use crate::manifest::{sha256_file, RunManifest, MANIFEST_FILE};
use crate::settings::{read_file, Settings};
use crate::{CliError, ConfigArgs, EvalArgs, GradcheckArgs, InferArgs, SynthArgs, TrainArgs};

const MODEL_FILE: &str = "model.gccw";

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{what} {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err("creating", path, e))
}

/// Settings from `--config` or a run's manifest, overlaid with flags.
fn settings(cfg: &ConfigArgs, run: Option<&Path>) -> Result<Settings, CliError> {
    let file = match (&cfg.config, run) {
        (Some(path), _) => Some(read_file(path)?),
        (None, Some(dir)) => Some(read_file(&dir.join(MANIFEST_FILE))?),
        (None, None) => None,
    };
    Settings::resolve(file, cfg.overrides()?)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(CliError::usage(format!(
            "split must be `train` or `test`, got `{s}`"
        ))),
    }
}

/// Whole images of one split, checked against the network divisor.
fn load_images(s: &Settings, split: Split) -> Result<(DatasetSpec, Vec<FundusSample>), CliError> {
    let spec = s.data.spec(s.seed(), split)?;
    spec.validate(s.model.depth)?;
    let whole = DatasetSpec {
        patching: None,
        ..spec.clone()
    };
    let samples = whole.load()?;
    if samples.is_empty() {
        return Err(CliError::usage("the selected split is empty"));
    }
    Ok((spec, samples))
}

fn hold_out(
    mut images: Vec<FundusSample>,
    fraction: f64,
) -> (Vec<FundusSample>, Vec<FundusSample>) {
    let n_val = ((images.len() as f64) * fraction).round() as usize;
    if n_val == 0 || n_val >= images.len() {
        let val = images.clone();
        return (images, val);
    }
    let val = images.split_off(images.len() - n_val);
    (images, val)
}

fn load_model(s: &Settings, weights: &Path) -> Result<Model, CliError> {
    let mut model = Model::build(&s.model)?;
    model.load_weights(weights)?;
    Ok(model)
}

fn weights_path(run: Option<&Path>, checkpoint: Option<&Path>) -> Result<PathBuf, CliError> {
    match (checkpoint, run) {
        (Some(c), _) => Ok(c.to_path_buf()),
        (None, Some(r)) => Ok(r.join(MODEL_FILE)),
        (None, None) => Err(CliError::usage("pass --run or --checkpoint")),
    }
}

/// Trains into `out` and writes the run manifest.
fn run_training(s: &Settings, out: &Path) -> Result<(RunManifest, Model), CliError> {
    create_dir(out)?;
    let t_load = Instant::now();
    let (spec, images) = load_images(s, Split::Train)?;
    let (train_images, val_images) = hold_out(images, s.data.val_fraction);
    let (train_set, val_set) = match spec.patching {
        Some((size, stride)) => (
            patch_set(&train_images, size, stride)?,
            patch_set(&val_images, size, stride)?,
        ),
        None => (train_images, val_images),
    };
    let mut model = Model::build(&s.model)?;
    let first = &train_set[0];
    model.check_input(&[1, first.channels(), first.height(), first.width()])?;
    let load_secs = t_load.elapsed().as_secs_f64();

    let t_train = Instant::now();
    let cfg = TrainConfig {
        checkpoint_dir: Some(out.to_path_buf()),
        ..s.train.clone()
    };
    println!(
        "training {} ({} parameters) on {} samples, validating on {}",
        s.model.variant.name(),
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let outcome = train_with(&mut model, &train_set, &val_set, &cfg, |r| {
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            if r.improved { "  *" } else { "" }
        );
    })?;
    model.save_weights(&out.join(MODEL_FILE))?;
    let train_secs = t_train.elapsed().as_secs_f64();
    println!(
        "best epoch {} (val {:.5}){}",
        outcome.best_epoch,
        outcome.best_val_loss,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );

    let mut flat = s.flat.clone();
    flat.insert("checkpoint_dir".into(), json!(out));
    let mut manifest = RunManifest::new("train", s.seed(), flat);
    manifest.datasets.push(spec);
    for f in [MODEL_FILE, "best.gccw", "last.gccw", "history.jsonl"] {
        manifest.add_artifact(out, f)?;
    }
    manifest.timings.insert("load".into(), load_secs);
    manifest.timings.insert("train".into(), train_secs);
    manifest.write(out)?;
    Ok((manifest, model))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let s = settings(&a.cfg, None)?;
    let out = match (&a.out, &s.train.checkpoint_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => PathBuf::from(format!("runs/{}-seed{}", s.model.variant.name(), s.seed())),
    };
    let (manifest, _) = run_training(&s, &out)?;
    println!(
        "weights {} sha256 {}",
        out.join(MODEL_FILE).display(),
        manifest.artifacts[MODEL_FILE].sha256
    );
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn row(name: &str, r: &MetricsReport) -> String {
    format!(
        "{name:<16}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
        fmt(r.f1),
        fmt(r.se),
        fmt(r.sp),
        fmt(r.acc),
        fmt(r.auroc),
        fmt(r.mcc),
        fmt(r.c),
        fmt(r.a),
        fmt(r.l),
        fmt(r.f)
    )
}

fn header() -> String {
    format!(
        "{:<16}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
        "", "F1", "Se", "Sp", "Acc", "AUROC", "Mcc", "C", "A", "L", "F"
    )
}

fn record(id: &str, r: &MetricsReport) -> Result<String, CliError> {
    let mut v = serde_json::to_value(r).map_err(|e| CliError::usage(e.to_string()))?;
    v.as_object_mut()
        .expect("reports serialize to objects")
        .insert("id".into(), Value::from(id));
    Ok(v.to_string())
}

/// `report.jsonl` (one line per sample, then the pooled line) and
/// `report.txt`.
fn write_report(out: &Path, ev: &Evaluation) -> Result<(), CliError> {
    create_dir(out)?;
    let mut lines = String::new();
    for (id, r) in &ev.per_sample {
        lines += &record(id, r)?;
        lines.push('\n');
    }
    lines += &record("pooled", &ev.pooled)?;
    lines.push('\n');
    let path = out.join("report.jsonl");
    fs::write(&path, lines).map_err(|e| io_err("writing", &path, e))?;
    let mut table = header() + "\n";
    for (id, r) in &ev.per_sample {
        table += &row(id, r);
        table.push('\n');
    }
    table += &row("pooled", &ev.pooled);
    table.push('\n');
    let path = out.join("report.txt");
    fs::write(&path, table).map_err(|e| io_err("writing", &path, e))
}

fn sweep(a: &EvalArgs) -> Result<(), CliError> {
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    create_dir(&out)?;
    let split = parse_split(&a.split)?;
    let mut rows = Vec::new();
    let mut lines = String::new();
    let mut manifest = None;
    for name in &a.variants {
        let variant: Variant = name.parse()?;
        let mut cfg = a.cfg.clone();
        cfg.variant = Some(variant.name().into());
        let s = settings(&cfg, a.run.as_deref())?;
        let dir = out.join(variant.name());
        let (_, model) = run_training(&s, &dir)?;
        let (spec, samples) = load_images(&s, split)?;
        let ev = evaluate(&model, &samples, a.threshold, a.tile)?;
        write_report(&dir, &ev)?;
        lines += &record(variant.name(), &ev.pooled)?;
        lines.push('\n');
        rows.push(row(variant.name(), &ev.pooled));
        let m = manifest.get_or_insert_with(|| {
            let mut flat = s.flat.clone();
            flat.remove("variant");
            RunManifest::new("eval", s.seed(), flat)
        });
        m.datasets.push(spec);
    }
    let path = out.join("sweep.jsonl");
    fs::write(&path, lines).map_err(|e| io_err("writing", &path, e))?;
    let mut manifest = manifest.ok_or_else(|| CliError::usage("--variants is empty"))?;
    manifest.config.insert("variants".into(), json!(a.variants));
    manifest.add_artifact(&out, "sweep.jsonl")?;
    manifest.write(&out)?;
    println!("{}", header());
    for r in rows {
        println!("{r}");
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if !a.variants.is_empty() {
        return sweep(a);
    }
    let s = settings(&a.cfg, a.run.as_deref())?;
    let split = parse_split(&a.split)?;
    let (spec, samples) = load_images(&s, split)?;
    let t0 = Instant::now();
    let ev = match &a.pred_dir {
        Some(dir) => {
            let probs = samples
                .iter()
                .map(|smp| load_mask(&dir.join(format!("{}_prob.png", smp.id))))
                .collect::<gcc_unet::Result<Vec<Tensor>>>()?;
            score(&samples, probs, a.threshold)?
        }
        None => {
            let model = load_model(
                &s,
                &weights_path(a.run.as_deref(), a.checkpoint.as_deref())?,
            )?;
            evaluate(&model, &samples, a.threshold, a.tile)?
        }
    };
    let out = match (&a.out, &a.run) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.join("eval"),
        (None, None) => PathBuf::from("eval"),
    };
    write_report(&out, &ev)?;
    let mut flat = s.flat.clone();
    flat.insert("threshold".into(), json!(a.threshold));
    let mut manifest = RunManifest::new("eval", s.seed(), flat);
    manifest.datasets.push(spec);
    manifest.add_artifact(&out, "report.jsonl")?;
    manifest.add_artifact(&out, "report.txt")?;
    manifest
        .timings
        .insert("eval".into(), t0.elapsed().as_secs_f64());
    manifest.write(&out)?;
    print!("{}", ev.pooled.table());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let s = settings(&a.cfg, a.run.as_deref())?;
    let model = load_model(
        &s,
        &weights_path(a.run.as_deref(), a.checkpoint.as_deref())?,
    )?;
    let mut manifest = RunManifest::new("infer", s.seed(), s.flat.clone());
    let images: Vec<(String, Tensor)> = if a.input.is_empty() {
        let (spec, samples) = load_images(&s, parse_split(&a.split)?)?;
        manifest.datasets.push(spec);
        samples.into_iter().map(|smp| (smp.id, smp.image)).collect()
    } else {
        a.input
            .iter()
            .map(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let id = numeric_id(name).map_or_else(
                    || {
                        p.file_stem()
                            .and_then(|n| n.to_str())
                            .unwrap_or("image")
                            .to_string()
                    },
                    |n| n.to_string(),
                );
                Ok((id, read_fundus(p)?))
            })
            .collect::<Result<_, CliError>>()?
    };
    create_dir(&a.out)?;
    let t0 = Instant::now();
    for (id, image) in &images {
        let sh = image.shape();
        if !a.pad && a.tile.is_none() {
            model
                .check_input(&[1, sh[0], sh[1], sh[2]])
                .map_err(|e| CliError::usage(format!("{id}: {e}; or pass --pad")))?;
        }
        let prob = predict_image(&model, image, a.tile)?;
        let mask = prob.map(|p| if p >= a.threshold { 1.0 } else { 0.0 });
        let (pf, mf) = (format!("{id}_prob.png"), format!("{id}_mask.png"));
        save_mask(&prob, &a.out.join(&pf))?;
        save_mask(&mask, &a.out.join(&mf))?;
        manifest.add_artifact(&a.out, &pf)?;
        manifest.add_artifact(&a.out, &mf)?;
    }
    manifest
        .config
        .insert("threshold".into(), json!(a.threshold));
    manifest
        .timings
        .insert("infer".into(), t0.elapsed().as_secs_f64());
    manifest.write(&a.out)?;
    println!("wrote {} mask pairs to {}", images.len(), a.out.display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let results = run_suite(a.op.as_deref(), a.trials, a.seed)?;
    let mut failing = Vec::new();
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for r in &results {
        let line = if a.json {
            serde_json::to_string(r).map_err(|e| CliError::usage(e.to_string()))?
        } else {
            format!(
                "{:<18} {:<5} max rel {:.2e} (tol {:.0e})  {} trials  {}",
                r.name,
                format!("{:?}", r.kind).to_lowercase(),
                r.report.max_rel_err,
                r.report.tolerance,
                r.trials,
                if r.report.passed { "pass" } else { "FAIL" }
            )
        };
        writeln!(w, "{line}").map_err(|e| CliError::usage(e.to_string()))?;
        if !r.report.passed {
            failing.push(r.name);
        }
    }
    if !a.json {
        writeln!(
            w,
            "{} checks in {:.1}s",
            results.len(),
            t0.elapsed().as_secs_f64()
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "gradient check failed for: {}",
            failing.join(", ")
        )))
    }
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let samples = generate_synthetic(a.seed, a.count, a.size)?;
    write_drive_layout(&samples, &a.out)?;
    let mut config = Map::new();
    config.insert("data".into(), json!("synthetic"));
    config.insert("seed".into(), json!(a.seed));
    config.insert("samples".into(), json!(a.count));
    config.insert("size".into(), json!(a.size));
    let mut manifest = RunManifest::new("synth", a.seed, config);
    manifest.datasets.push(DatasetSpec {
        source: Source::Synthetic {
            seed: a.seed,
            count: a.count,
            size: a.size,
        },
        split: Split::Train,
        patching: None,
    });
    let mut digest = String::new();
    for sub in ["images", "labels", "masks"] {
        let mut names: Vec<_> = fs::read_dir(a.out.join(sub))
            .map_err(|e| io_err("listing", &a.out.join(sub), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        for p in names {
            digest += &sha256_file(&p)?;
        }
    }
    let path = a.out.join("checksums.txt");
    fs::write(&path, digest).map_err(|e| io_err("writing", &path, e))?;
    manifest.add_artifact(&a.out, "checksums.txt")?;
    manifest.write(&a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}
