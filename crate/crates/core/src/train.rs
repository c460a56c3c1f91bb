//! Training with Adam and early stopping, and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::FundusSample;
use crate::error::{Error, Result};
use crate::metrics::{pooled_report, MetricsReport, Scored};
use crate::network::Model;
use crate::nn::{Ctx, ParamStore};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Receives `best.gccw`, `last.gccw` and `history.jsonl` when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 60,
            patience: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted: it trains nothing but still runs
    /// validation and early stopping.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience {} must be in 1..={}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be a finite non-negative number",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::config(
                "Adam needs betas in [0, 1) and a positive eps",
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights the model holds on return.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn stack_batch(samples: &[&FundusSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let pick = |f: fn(&FundusSample) -> &Tensor| -> Result<Tensor> {
        Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
    };
    Ok((pick(|s| &s.image)?, pick(|s| &s.label)?, pick(|s| &s.fov)?))
}

fn fov_pixels(s: &FundusSample) -> usize {
    s.fov.data().iter().filter(|&&v| v != 0.0).count()
}

/// Cross entropy of one sample summed over its FOV and divided by `norm`,
/// with parameter gradients.
fn sample_loss(model: &Model, s: &FundusSample, norm: f64) -> Result<(f64, Vec<Tensor>)> {
    let (x, y, f) = stack_batch(&[s])?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let logits = model.forward(&ctx, tape.constant(x))?;
    let loss = logits.cross_entropy_sum(&y, &f, norm)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), ctx.param_grads(&grads)))
}

/// Loss and gradient of one batch: per-sample FOV sums over the batch's
/// total FOV count. Samples run in parallel and are summed in batch order.
pub fn batch_gradient(model: &Model, batch: &[&FundusSample]) -> Result<(f64, Vec<Tensor>)> {
    let total: usize = batch.iter().map(|s| fov_pixels(s)).sum();
    if total == 0 {
        return Err(Error::contract("batch has an empty field of view"));
    }
    let parts = par::map_indexed(batch.len(), |i| sample_loss(model, batch[i], total as f64));
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

/// Mean FOV cross entropy without gradients.
pub fn mean_loss(model: &Model, samples: &[FundusSample]) -> Result<f64> {
    let total: usize = samples.iter().map(fov_pixels).sum();
    if total == 0 {
        return Err(Error::contract("validation set has an empty field of view"));
    }
    let parts = par::map_indexed(samples.len(), |i| -> Result<f64> {
        let (x, y, f) = stack_batch(&[&samples[i]])?;
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &model.store);
        let logits = model.forward(&ctx, tape.constant(x))?;
        Ok(logits
            .cross_entropy_sum(&y, &f, total as f64)?
            .value()
            .item())
    });
    parts.into_iter().sum()
}

/// Name of the parameter with the largest or first non-finite gradient.
fn worst_parameter(store: &ParamStore, grads: &[Tensor]) -> String {
    let score = |g: &Tensor| {
        g.data()
            .iter()
            .map(|v| {
                if v.is_finite() {
                    v.abs()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    };
    store
        .iter()
        .zip(grads)
        .map(|(p, g)| (score(g), &p.name))
        .fold(
            (-1.0, None),
            |best, (s, n)| if s > best.0 { (s, Some(n)) } else { best },
        )
        .1
        .cloned()
        .unwrap_or_default()
}

fn non_finite_parameter(store: &ParamStore) -> Option<String> {
    store
        .iter()
        .find(|p| !p.tensor.all_finite())
        .map(|p| p.name.clone())
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|p| p.tensor.clone()).collect()
}

fn restore(store: &mut ParamStore, weights: Vec<Tensor>) {
    for (p, w) in store.iter_mut().zip(weights) {
        p.tensor = w;
    }
}

fn save(model: &Model, dir: &Path, name: &str) -> Result<()> {
    model.save_weights(&dir.join(name))
}

/// Trains with Adam on shuffled mini-batches, validating after every
/// epoch. Stops once the validation loss has not strictly improved for
/// `patience` epochs and returns with the best-validation weights loaded.
pub fn train(
    model: &mut Model,
    train_set: &[FundusSample],
    val_set: &[FundusSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model: &mut Model,
    train_set: &[FundusSample],
    val_set: &[FundusSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract(
            "training and validation sets must be nonempty",
        ));
    }
    let mut history_file = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join("history.jsonl");
            let f = File::create(&path)
                .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let mut adam = Adam::new(&model.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let (mut best_loss, mut best_epoch, mut best_weights) =
        (f64::INFINITY, 0, snapshot(&model.store));
    let mut stale = 0;
    let mut steps = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&FundusSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = match batch_gradient(model, &batch) {
                Err(Error::NonFinite { op }) => {
                    return Err(Error::NumericalAbort {
                        epoch,
                        batch: bi + 1,
                        parameter: non_finite_parameter(&model.store)
                            .unwrap_or_else(|| op.to_string()),
                    })
                }
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch: bi + 1,
                    parameter: worst_parameter(&model.store, &grads),
                });
            }
            adam.step(&mut model.store, &grads);
            epoch_loss += loss;
            steps += 1;
        }
        let val_loss = mean_loss(model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NumericalAbort {
                epoch,
                batch: batches.len(),
                parameter: "validation loss".into(),
            });
        }
        let improved = val_loss < best_loss;
        if improved {
            best_loss = val_loss;
            best_epoch = epoch;
            best_weights = snapshot(&model.store);
            stale = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                save(model, dir, "best.gccw")?;
            }
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            steps,
            train_loss: epoch_loss / batches.len() as f64,
            val_loss,
            best_val_loss: best_loss,
            improved,
        };
        if let Some(f) = &mut history_file {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io("writing history", e))?;
            f.flush().map_err(|e| Error::io("writing history", e))?;
        }
        on_epoch(&record);
        history.push(record);
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save(model, dir, "last.gccw")?;
    }
    restore(&mut model.store, best_weights);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss: best_loss,
        stopped_early,
    })
}

/// Plain gradient steps on one fixed batch; returns the loss before each
/// step and the loss after the last.
pub fn overfit_batch(
    model: &mut Model,
    batch: &[FundusSample],
    steps: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let refs: Vec<&FundusSample> = batch.iter().collect();
    let mut adam = Adam::new(&model.store, cfg);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = batch_gradient(model, &refs)?;
        if !loss.is_finite() {
            return Err(Error::NumericalAbort {
                epoch: 1,
                batch: step + 1,
                parameter: worst_parameter(&model.store, &grads),
            });
        }
        losses.push(loss);
        adam.step(&mut model.store, &grads);
    }
    losses.push(batch_gradient(model, &refs)?.0);
    Ok(losses)
}

/// Pads `[C, H, W]` by edge replication to `[C, ph, pw]`.
fn pad_edge(image: &Tensor, ph: usize, pw: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[c, ph, pw], |i| {
        let (ci, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        image.data()[ci * h * w + y.min(h - 1) * w + x.min(w - 1)]
    })
}

/// Window origins covering `0..extent` with windows of `tile`, stepping by
/// `stride`, the last flush with the end.
fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent - tile).step_by(stride).collect();
    if *out.last().expect("extent ≥ tile") != extent - tile {
        out.push(extent - tile);
    }
    out
}

/// Vessel probabilities `[H, W]` for an image `[C, H, W]` of any extent.
///
/// The image is edge-padded to a multiple of the network divisor. With
/// `tile`, the network runs on overlapping `tile × tile` windows at half
/// stride and overlapping probabilities are averaged; otherwise it runs on
/// the whole padded image.
pub fn predict_image(model: &Model, image: &Tensor, tile: Option<usize>) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("image must be [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let div = model.cfg.divisor();
    let round = |v: usize| v.div_ceil(div) * div;
    let tile = tile.map(round);
    let (ph, pw) = match tile {
        Some(t) => (round(h).max(t), round(w).max(t)),
        None => (round(h), round(w)),
    };
    let padded = pad_edge(image, ph, pw);
    let probs = match tile {
        None => model
            .predict(&padded.reshape(&[1, c, ph, pw])?)?
            .reshape(&[ph, pw])?,
        Some(t) => {
            let stride = (t / 2).max(div) / div * div;
            let ys = tile_origins(ph, t, stride);
            let xs = tile_origins(pw, t, stride);
            let windows: Vec<(usize, usize)> = ys
                .iter()
                .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
                .collect();
            let preds = par::map_indexed(windows.len(), |k| {
                let (y0, x0) = windows[k];
                let crop = Tensor::from_fn(&[1, c, t, t], |i| {
                    let (ci, y, x) = (i / (t * t), (i / t) % t, i % t);
                    padded.data()[ci * ph * pw + (y0 + y) * pw + x0 + x]
                });
                model.predict(&crop)
            });
            let mut sum = vec![0.0; ph * pw];
            let mut hits = vec![0u32; ph * pw];
            for (&(y0, x0), p) in windows.iter().zip(preds) {
                let p = p?;
                for y in 0..t {
                    for x in 0..t {
                        let at = (y0 + y) * pw + x0 + x;
                        sum[at] += p.data()[y * t + x];
                        hits[at] += 1;
                    }
                }
            }
            let avg = sum
                .iter()
                .zip(&hits)
                .map(|(s, &n)| s / f64::from(n))
                .collect();
            Tensor::new(&[ph, pw], avg)?
        }
    };
    Ok(Tensor::from_fn(&[h, w], |i| {
        probs.data()[(i / w) * pw + i % w]
    }))
}

/// Per-sample and pooled metrics of a set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub pooled: MetricsReport,
    pub per_sample: Vec<(String, MetricsReport)>,
    pub probabilities: Vec<Tensor>,
}

/// Predicts every sample and scores the probabilities against the labels
/// at `threshold`.
pub fn evaluate(
    model: &Model,
    samples: &[FundusSample],
    threshold: f64,
    tile: Option<usize>,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let probabilities = par::map_indexed(samples.len(), |i| {
        predict_image(model, &samples[i].image, tile)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    score(samples, probabilities, threshold)
}

/// Scores precomputed probability maps.
pub fn score(
    samples: &[FundusSample],
    probabilities: Vec<Tensor>,
    threshold: f64,
) -> Result<Evaluation> {
    if samples.len() != probabilities.len() {
        return Err(Error::contract(
            "one probability map per sample is required",
        ));
    }
    let scored: Vec<Scored<'_>> = samples
        .iter()
        .zip(&probabilities)
        .map(|(s, p)| {
            if p.shape() != s.label.shape() {
                return Err(Error::shape(format!(
                    "prediction {:?} for sample {} does not match label {:?}",
                    p.shape(),
                    s.id,
                    s.label.shape()
                )));
            }
            Ok(Scored {
                scores: p.data(),
                labels: s.label.data(),
                fov: s.fov.data(),
                height: s.height(),
                width: s.width(),
            })
        })
        .collect::<Result<_>>()?;
    let per_sample = scored
        .iter()
        .zip(samples)
        .map(|(sc, s)| Ok((s.id.clone(), sc.report(threshold)?)))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pooled_report(&scored, threshold)?;
    Ok(Evaluation {
        pooled,
        per_sample,
        probabilities,
    })
}
