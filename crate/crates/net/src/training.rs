//! Loss, optimizers, the training loop, evaluation metrics, and a
//! finite-difference gradient audit.
//!
//! The training loop is deliberately plain: mini-batch gradient descent with
//! global-norm clipping, early stopping on validation MAE, and the best
//! validation snapshot returned. What makes it interesting is what flows
//! through it — for parameter-generating models, the loss gradient reaches
//! the spatial trunk and generation heads *through* the generated temporal
//! parameters, so the whole hypernetwork is trained by the forecasting loss
//! alone. [`grad_check`] verifies exactly that path against finite
//! differences for every learned tensor.

use std::collections::BTreeMap;
use std::path::Path;

use hyperst_tensor::TensorError;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleWindow, Splits, WindowSet};
use crate::error::NetError;
use crate::init::rng_for;
use crate::models::{BatchPrediction, Model, ModelSpec};
use crate::{Real, Result, Tape, Tensor, Var};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// ½‖pred − label‖² averaged over the batch (first axis), on plain tensors.
pub fn squared_error_loss(pred: &Tensor, label: &Tensor) -> Result<Real> {
    if pred.shape() != label.shape() {
        return Err(NetError::Shape {
            symbol: "label".into(),
            expected: pred.shape().to_vec(),
            got: label.shape().to_vec(),
        });
    }
    let batch = pred.shape()[0] as Real;
    let ss: Real = pred
        .data()
        .iter()
        .zip(label.data())
        .map(|(p, l)| (p - l) * (p - l))
        .sum();
    Ok(0.5 * ss / batch)
}

/// Tape version over one prediction tensor: ½‖pred − label‖² / samples.
pub fn squared_error_on_tape(
    tape: &mut Tape,
    pred: Var,
    label: &Tensor,
    samples: usize,
) -> Result<Var> {
    let lv = tape.leaf(label.clone());
    let diff = tape.sub(pred, lv)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale_const(total, 0.5 / samples as Real)?)
}

/// Loss for a whole batch prediction; `labels` is `[B, h·D_L]`.
pub fn batch_loss(tape: &mut Tape, pred: &BatchPrediction, labels: &Tensor) -> Result<Var> {
    match pred {
        BatchPrediction::Single(v) => {
            let batch = labels.shape()[0];
            squared_error_on_tape(tape, *v, labels, batch)
        }
        BatchPrediction::PerSample(rows) => {
            let batch = labels.shape()[0];
            if rows.len() != batch {
                return Err(NetError::Shape {
                    symbol: "labels".into(),
                    expected: vec![rows.len(), labels.shape()[1]],
                    got: labels.shape().to_vec(),
                });
            }
            let cols = labels.shape()[1];
            let mut total: Option<Var> = None;
            for (i, &row) in rows.iter().enumerate() {
                let lab = Tensor::from_fn(&[1, cols], |j| labels.data()[i * cols + j])?;
                let li = squared_error_on_tape(tape, row, &lab, 1)?;
                total = Some(match total {
                    None => li,
                    Some(acc) => tape.add(acc, li)?,
                });
            }
            Ok(tape.scale_const(total.unwrap(), 1.0 / batch as Real)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Learning rate. 0 is allowed as an explicit "frozen" mode (no updates,
    /// flat history); negative rates are rejected.
    #[serde(default = "default_lr")]
    pub lr: Real,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Early-stop patience on validation MAE.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip")]
    pub clip_norm: Real,
    #[serde(default)]
    pub seed: u64,
    /// Optional per-epoch batch cap: each epoch visits at most this many
    /// batches of the shuffled window stream (a compute budget for large
    /// window sets).
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> Real {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    10
}
fn default_clip() -> Real {
    5.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: default_optimizer(),
            lr: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            clip_norm: default_clip(),
            seed: 0,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NetError::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(NetError::Config("patience must be ≥ 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(NetError::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NetError::Config("batch_size and max_epochs must be ≥ 1".into()));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(NetError::Config("max_batches_per_epoch must be ≥ 1".into()));
        }
        Ok(())
    }
}

struct OptState {
    kind: OptimizerKind,
    /// First moment (Adam) or velocity (momentum), keyed by tensor name.
    m: BTreeMap<String, Vec<Real>>,
    /// Second moment (Adam only).
    v: BTreeMap<String, Vec<Real>>,
    /// Update count for Adam bias correction.
    t: u64,
}

const MOMENTUM: Real = 0.9;
const ADAM_B1: Real = 0.9;
const ADAM_B2: Real = 0.999;
const ADAM_EPS: Real = 1e-8;

impl OptState {
    fn new(kind: OptimizerKind) -> Self {
        OptState {
            kind,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Clips by global norm, then applies one update to every tensor with a
    /// gradient.
    fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &mut BTreeMap<String, Tensor>,
        lr: Real,
        clip: Real,
    ) {
        let norm: Real = grads
            .values()
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<Real>()
            .sqrt();
        if norm > clip {
            let scale = clip / norm;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
        self.t += 1;
        for (name, grad) in grads.iter() {
            let p = params.get_mut(name).expect("gradient for unknown tensor");
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let vel = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.numel()]);
                    for ((pv, g), v) in p.data_mut().iter_mut().zip(grad.data()).zip(vel) {
                        *v = MOMENTUM * *v + g;
                        *pv -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.numel()]);
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.numel()]);
                    let bc1 = 1.0 - ADAM_B1.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_B2.powi(self.t as i32);
                    for (i, (pv, g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g;
                        v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Stacks a set of per-object windows into batch tensors:
/// attributes `[B, D_s]`, per-step inputs `[B, D_T]`, labels `[B, h·D_L]`.
fn recurrent_batch(
    ds: &Dataset,
    windows: &[SampleWindow],
    w: usize,
    h: usize,
) -> (Tensor, Vec<Tensor>, Tensor) {
    let b = windows.len();
    let (d_s, d_t, d_l) = (ds.d_s(), ds.d_t(), ds.d_l());
    let s = Tensor::from_fn(&[b, d_s], |i| {
        ds.spatial.data()[windows[i / d_s].object * d_s + i % d_s]
    })
    .unwrap();
    let steps: Vec<Tensor> = (0..w)
        .map(|t| {
            Tensor::from_fn(&[b, d_t], |i| {
                let win = &windows[i / d_t];
                ds.temporal.data()[(win.object * ds.len_time() + win.start + t) * d_t + i % d_t]
            })
            .unwrap()
        })
        .collect();
    let cols = h * d_l;
    let labels = Tensor::from_fn(&[b, cols], |i| {
        let win = &windows[i / cols];
        let j = i % cols;
        ds.labels.data()[(win.object * ds.len_time() + win.start + w + j / d_l) * d_l + j % d_l]
    })
    .unwrap();
    (s, steps, labels)
}

/// Grid labels in channel layout `[h·D_L, G, G]` for one window start.
fn grid_label_channels(ds: &Dataset, start: usize, w: usize, h: usize) -> Result<Tensor> {
    let cells = ds.grid_labels(start + w, h)?;
    let g = ds.grid.unwrap();
    let hd = cells.shape()[1];
    Ok(Tensor::from_fn(&[hd, g, g], |i| {
        cells.data()[(i % (g * g)) * hd + i / (g * g)]
    })?)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One history row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Real,
    pub val_mae: Real,
    pub val_rmse: Real,
}

pub struct TrainOutcome {
    /// The model at its best validation MAE.
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

/// Writes the history as CSV with header `epoch,train_loss,val_mae,val_rmse`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_mae", "val_rmse"])?;
    for row in history {
        w.write_record([
            row.epoch.to_string(),
            format!("{}", row.train_loss),
            format!("{}", row.val_mae),
            format!("{}", row.val_rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One gradient step over one batch; returns the batch loss value.
fn train_step(
    model: &mut Model,
    state: &mut OptState,
    ds: &Dataset,
    batch: BatchItems<'_>,
    w: usize,
    h: usize,
    cfg: &TrainConfig,
) -> Result<Real> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = match batch {
        BatchItems::Windows(chunk) => {
            let (s, steps, labels) = recurrent_batch(ds, chunk, w, h);
            let pred = model.forward_batch(&mut tape, &vars, &s, &steps)?;
            batch_loss(&mut tape, &pred, &labels)?
        }
        BatchItems::Starts(starts) => {
            let s_cells = &ds.spatial;
            let mut total: Option<Var> = None;
            for &start in starts {
                let x = ds.grid_window(start, w)?;
                let pred = model.forward_grid(&mut tape, &vars, s_cells, &x)?;
                let label = grid_label_channels(ds, start, w, h)?;
                let cells = ds.n_objects();
                let li = squared_error_on_tape(&mut tape, pred, &label, cells)?;
                total = Some(match total {
                    None => li,
                    Some(acc) => tape.add(acc, li)?,
                });
            }
            tape.scale_const(total.unwrap(), 1.0 / starts.len() as Real)?
        }
    };
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Ok(loss_value); // caller names the epoch in the error
    }
    let grads = tape.backward(loss)?;
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in &vars {
        if let Some(g) = grads.get(*var) {
            named.insert(name.clone(), g.clone());
        }
    }
    state.step(&mut model.params, &mut named, cfg.lr, cfg.clip_norm);
    Ok(loss_value)
}

enum BatchItems<'a> {
    Windows(&'a [SampleWindow]),
    Starts(&'a [usize]),
}

/// Folds one batch outcome into the divergence policy: a non-finite loss —
/// or a non-finite intermediate caught by the tape's debug-build checks —
/// aborts training, naming the epoch.
fn settle(step: Result<Real>, epoch: usize) -> Result<Real> {
    match step {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(l) => Err(NetError::Divergence {
            epoch,
            detail: format!("batch loss became {l}"),
        }),
        Err(NetError::Tensor(TensorError::NonFinite { op })) => Err(NetError::Divergence {
            epoch,
            detail: format!("non-finite value produced by {op}"),
        }),
        Err(e) => Err(e),
    }
}

/// Trains a copy of the model on the train split, early-stopping on
/// validation MAE, and returns the best-validation snapshot plus the full
/// history. Deterministic for a fixed config. A non-finite loss aborts with
/// an error naming the epoch.
pub fn train(model: &Model, ds: &Dataset, splits: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.windows.is_empty() || splits.val.windows.is_empty() {
        return Err(NetError::Config("train and val window sets must be nonempty".into()));
    }
    let (w, h) = (splits.train.window, splits.train.horizon);
    if w != model.spec.window || h != model.spec.horizon {
        return Err(NetError::Config(format!(
            "model expects window {}/horizon {}, splits carry {w}/{h}",
            model.spec.window, model.spec.horizon
        )));
    }

    let mut work = model.clone();
    let mut state = OptState::new(cfg.optimizer);
    let mut rng = rng_for(cfg.seed, "train-shuffle");
    let mut history = Vec::new();
    let mut best: Option<(Real, usize, BTreeMap<String, Tensor>)> = None;
    let mut strikes = 0usize;

    // The grid kinds sample whole-grid windows; recurrent kinds sample
    // per-object windows.
    let grid = model.spec.kind.is_grid();
    let starts_pool: Vec<usize> = if grid { splits.train.unique_starts() } else { Vec::new() };

    for epoch in 1..=cfg.max_epochs {
        let mut sum_loss = 0.0;
        let mut samples = 0usize;
        let cap = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        if grid {
            let mut order = starts_pool.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size).take(cap) {
                let step = train_step(&mut work, &mut state, ds, BatchItems::Starts(chunk), w, h, cfg);
                let loss = settle(step, epoch)?;
                sum_loss += loss * chunk.len() as Real;
                samples += chunk.len();
            }
        } else {
            let mut order = splits.train.windows.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size).take(cap) {
                let step =
                    train_step(&mut work, &mut state, ds, BatchItems::Windows(chunk), w, h, cfg);
                let loss = settle(step, epoch)?;
                sum_loss += loss * chunk.len() as Real;
                samples += chunk.len();
            }
        }
        let train_loss = sum_loss / samples as Real;
        let val = evaluate(&work, ds, &splits.val)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_mae: val.mae,
            val_rmse: val.rmse,
        });
        let improved = best.as_ref().map_or(true, |(mae, _, _)| val.mae < *mae);
        if improved {
            best = Some((val.mae, epoch, work.params.clone()));
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best.unwrap();
    work.params = best_params;
    Ok(TrainOutcome {
        model: work,
        history,
        best_epoch,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Metrics over one window set, in original label units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: Real,
    pub rmse: Real,
    /// One entry per horizon step.
    pub per_horizon: Vec<HorizonMetrics>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub mae: Real,
    pub rmse: Real,
}

struct MetricAccum {
    abs: Vec<Real>,
    sq: Vec<Real>,
    count: Vec<usize>,
}

impl MetricAccum {
    fn new(h: usize) -> Self {
        MetricAccum {
            abs: vec![0.0; h],
            sq: vec![0.0; h],
            count: vec![0; h],
        }
    }

    /// Accumulates one denormalized prediction/label row pair `[h·D_L]`.
    fn push_row(&mut self, pred: &[Real], label: &[Real], d_l: usize) {
        for (j, (p, l)) in pred.iter().zip(label).enumerate() {
            let step = j / d_l;
            let e = p - l;
            self.abs[step] += e.abs();
            self.sq[step] += e * e;
            self.count[step] += 1;
        }
    }

    fn report(self) -> MetricsReport {
        let total: usize = self.count.iter().sum();
        let mae = self.abs.iter().sum::<Real>() / total as Real;
        let rmse = (self.sq.iter().sum::<Real>() / total as Real).sqrt();
        let per_horizon = self
            .abs
            .iter()
            .zip(&self.sq)
            .zip(&self.count)
            .enumerate()
            .map(|(step, ((abs, sq), &n))| HorizonMetrics {
                step,
                mae: abs / n as Real,
                rmse: (sq / n as Real).sqrt(),
            })
            .collect();
        MetricsReport {
            mae,
            rmse,
            per_horizon,
            samples: total,
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Evaluates MAE/RMSE (overall and per horizon step) over a window set.
/// Expects the dataset in the model's input units; reports in original
/// units via the model's stored normalizer.
pub fn evaluate(model: &Model, ds: &Dataset, set: &WindowSet) -> Result<MetricsReport> {
    if set.windows.is_empty() {
        return Err(NetError::EmptyEvaluation);
    }
    let (w, h) = (set.window, set.horizon);
    let d_l = ds.d_l();
    let mut acc = MetricAccum::new(h);
    let denorm = |row: &mut [Real]| {
        if let Some(n) = &model.normalizer {
            n.denormalize_labels_row(row);
        }
    };
    if model.spec.kind.is_grid() {
        for &start in &set.unique_starts() {
            let x = ds.grid_window(start, w)?;
            let pred = model.forecast(&ds.spatial, &x)?; // [G², h·D_L]
            let labels = ds.grid_labels(start + w, h)?;
            let cols = h * d_l;
            for cell in 0..pred.shape()[0] {
                let mut p = pred.data()[cell * cols..(cell + 1) * cols].to_vec();
                let mut l = labels.data()[cell * cols..(cell + 1) * cols].to_vec();
                denorm(&mut p);
                denorm(&mut l);
                acc.push_row(&p, &l, d_l);
            }
        }
    } else {
        for chunk in set.windows.chunks(EVAL_CHUNK) {
            let (s, steps, labels) = recurrent_batch(ds, chunk, w, h);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let pred = model.forward_batch(&mut tape, &vars, &s, &steps)?;
            let cols = h * d_l;
            let rows: Vec<Vec<Real>> = match pred {
                BatchPrediction::Single(v) => {
                    let val = tape.value(v);
                    (0..chunk.len())
                        .map(|i| val.data()[i * cols..(i + 1) * cols].to_vec())
                        .collect()
                }
                BatchPrediction::PerSample(vars) => vars
                    .iter()
                    .map(|&v| tape.value(v).data().to_vec())
                    .collect(),
            };
            for (i, mut p) in rows.into_iter().enumerate() {
                let mut l = labels.data()[i * cols..(i + 1) * cols].to_vec();
                denorm(&mut p);
                denorm(&mut l);
                acc.push_row(&p, &l, d_l);
            }
        }
    }
    Ok(acc.report())
}

// ---------------------------------------------------------------------------
// Gradient audit
// ---------------------------------------------------------------------------

/// Per-tensor outcome of the finite-difference audit.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: Real,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: Real,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

const FD_STEP: Real = 1e-5;
const REL_FLOOR: Real = 1e-5;

fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares every learned tensor's backward gradient against central finite
/// differences of the full loss on a tiny random instance. Keep dims small —
/// the FD oracle evaluates the loss twice per scalar parameter.
pub fn grad_check(spec: &ModelSpec, seed: u64, tolerance: Real) -> Result<GradCheckReport> {
    grad_check_impl(spec, seed, tolerance, None)
}

/// Audit variant that corrupts the named tensor's backward gradient before
/// comparing — the self-test that proves the audit can actually fail.
pub fn grad_check_tampered(
    spec: &ModelSpec,
    seed: u64,
    tolerance: Real,
    tamper: &str,
) -> Result<GradCheckReport> {
    grad_check_impl(spec, seed, tolerance, Some(tamper))
}

fn grad_check_impl(
    spec: &ModelSpec,
    seed: u64,
    tolerance: Real,
    tamper: Option<&str>,
) -> Result<GradCheckReport> {
    spec.validate()?;
    if !(tolerance > 0.0) {
        return Err(NetError::Config(format!("tolerance must be > 0, got {tolerance}")));
    }
    let mut model = crate::models::build(spec, seed)?;
    let mut rng = rng_for(seed, "grad-check");

    // Jitter every parameter: at the pristine identity start several
    // gradients vanish structurally (zero head weights cut the trunk off),
    // which would make the audit vacuous.
    for (_, tensor) in model.params.iter_mut() {
        for v in tensor.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    if let Some(name) = tamper {
        if !model.params.contains_key(name) {
            return Err(NetError::Config(format!("no tensor named {name} to tamper with")));
        }
    }

    // One fixed random instance.
    let grid = spec.kind.is_grid();
    let g = 2usize;
    let mut rand_tensor = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    };
    let (s, steps, x_grid, label): (Tensor, Vec<Tensor>, Option<Tensor>, Tensor) = if grid {
        let s = rand_tensor(&[g * g, spec.d_s]);
        let x = rand_tensor(&[spec.window * spec.d_t, g, g]);
        let label = rand_tensor(&[spec.horizon * spec.d_l, g, g]);
        (s, Vec::new(), Some(x), label)
    } else {
        let b = 2usize;
        let s = rand_tensor(&[b, spec.d_s.max(1)]);
        let steps = (0..spec.window).map(|_| rand_tensor(&[b, spec.d_t])).collect();
        let label = rand_tensor(&[b, spec.horizon * spec.d_l]);
        (s, steps, None, label)
    };

    let loss_of = |m: &Model| -> Result<Real> {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let loss = if grid {
            let pred = m.forward_grid(&mut tape, &vars, &s, x_grid.as_ref().unwrap())?;
            squared_error_on_tape(&mut tape, pred, &label, g * g)?
        } else {
            let pred = m.forward_batch(&mut tape, &vars, &s, &steps)?;
            batch_loss(&mut tape, &pred, &label)?
        };
        Ok(tape.value(loss).item()?)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = if grid {
        let pred = model.forward_grid(&mut tape, &vars, &s, x_grid.as_ref().unwrap())?;
        squared_error_on_tape(&mut tape, pred, &label, g * g)?
    } else {
        let pred = model.forward_batch(&mut tape, &vars, &s, &steps)?;
        batch_loss(&mut tape, &pred, &label)?
    };
    let grads = tape.backward(loss)?;

    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let analytic: Vec<Real> = match grads.get(vars[&name]) {
            Some(g) => {
                let mut v = g.data().to_vec();
                if tamper == Some(name.as_str()) {
                    for a in &mut v {
                        *a += 1.0;
                    }
                }
                v
            }
            None => vec![0.0; model.params[&name].numel()],
        };
        // Central differences of the full loss, one scalar at a time.
        let base = model.params[&name].clone();
        let mut max_err: Real = 0.0;
        for i in 0..base.numel() {
            let mut probe = |delta: Real| -> Result<Real> {
                let mut data = base.data().to_vec();
                data[i] += delta;
                model
                    .params
                    .insert(name.clone(), Tensor::from_vec(base.shape(), data)?);
                loss_of(&model)
            };
            let plus = probe(FD_STEP)?;
            let minus = probe(-FD_STEP)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[i], fd));
        }
        model.params.insert(name.clone(), base);
        entries.push(GradCheckEntry {
            passed: max_err < tolerance,
            name,
            max_rel_err: max_err,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}

/// Text rendering of the audit, one line per tensor.
pub fn format_grad_report(report: &GradCheckReport) -> String {
    let mut out = String::new();
    for e in &report.entries {
        out.push_str(&format!(
            "{} {:<28} max rel err {:.3e}\n",
            if e.passed { "ok  " } else { "FAIL" },
            e.name,
            e.max_rel_err
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_windows, GeneratorConfig, Normalizer, SplitSpec};
    use crate::models::{build, ModelKind};

    fn tiny_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            trunk: vec![3, 2],
            temporal: vec![3],
            d_s: 2,
            d_t: 2,
            d_l: 1,
            window: 2,
            horizon: 1,
            generate_bias: true,
            kernel: 3,
        }
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(squared_error_loss(&a, &a).unwrap(), 0.0);

        let pred = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let label = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(squared_error_loss(&pred, &label).unwrap(), 1.0);

        // Random case against a scalar loop.
        let p = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let l = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.11).cos()).unwrap();
        let mut want = 0.0;
        for i in 0..12 {
            let d = p.data()[i] - l.data()[i];
            want += 0.5 * d * d;
        }
        want /= 3.0;
        assert!((squared_error_loss(&p, &l).unwrap() - want).abs() < 1e-14);

        let bad = Tensor::zeros(&[2, 2]).unwrap();
        assert!(squared_error_loss(&p, &bad).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let p = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.21).sin()).unwrap();
        let l = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.13).cos()).unwrap();
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone());
        let loss = squared_error_on_tape(&mut tape, pv, &l, 4).unwrap();
        let want = squared_error_loss(&p, &l).unwrap();
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-14);
    }

    fn training_fixture(
        kind: ModelKind,
    ) -> (Model, crate::data::Dataset, Splits) {
        let ds = generate_synthetic(&GeneratorConfig {
            objects: 6,
            steps: 60,
            spatial_dim: 2,
            archetypes: 2,
            alpha: 1.0,
            sigma: 0.05,
            seed: 5,
        })
        .unwrap();
        let splits = split_windows(&ds, &SplitSpec::default(), 2, 1).unwrap();
        let mut spec = tiny_spec(kind);
        spec.d_t = ds.d_t();
        spec.d_l = ds.d_l();
        let model = build(&spec, 3).unwrap();
        (model, ds, splits)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (model, ds, splits) = training_fixture(ModelKind::HyperstLstmD);
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&model, &ds, &splits, &cfg).unwrap();
        assert_eq!(out.model.params, model.params);
        let l0 = out.history[0].train_loss;
        for row in &out.history {
            assert!((row.train_loss - l0).abs() < 1e-12 * l0.abs().max(1.0));
            assert_eq!(row.val_mae, out.history[0].val_mae);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (model, ds, splits) = training_fixture(ModelKind::Lstm);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&model, &ds, &splits, &cfg).unwrap();
        let b = train(&model, &ds, &splits, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn optimizer_recovers_least_squares_weight() {
        // One weight, data y = 3x exactly: the minimum of the squared error
        // is the analytic least-squares slope 3.
        let xs: Vec<Real> = (1..=8).map(|i| i as Real / 4.0).collect();
        let ys: Vec<Real> = xs.iter().map(|x| 3.0 * x).collect();
        let x = Tensor::from_vec(&[8, 1], xs).unwrap();
        let y = Tensor::from_vec(&[8, 1], ys).unwrap();

        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut params = BTreeMap::new();
            params.insert("w".to_string(), Tensor::from_vec(&[1, 1], vec![-1.0]).unwrap());
            let mut state = OptState::new(kind);
            let lr = match kind {
                OptimizerKind::Adam => 0.05,
                OptimizerKind::SgdMomentum => 0.02,
            };
            for _ in 0..2000 {
                let mut tape = Tape::new();
                let w = tape.leaf(params["w"].clone());
                let xv = tape.leaf(x.clone());
                let pred = tape.matmul(xv, w).unwrap();
                let loss = squared_error_on_tape(&mut tape, pred, &y, 8).unwrap();
                let grads = tape.backward(loss).unwrap();
                let mut named = BTreeMap::new();
                named.insert("w".to_string(), grads.get(w).unwrap().clone());
                state.step(&mut params, &mut named, lr, 5.0);
            }
            let w = params["w"].data()[0];
            assert!((w - 3.0).abs() < 1e-3, "{kind:?} ended at {w}");
        }
    }

    #[test]
    fn single_sgd_step_decreases_loss() {
        for seed in 0..5u64 {
            let spec = tiny_spec(ModelKind::HyperstLstmD);
            let report_model = build(&spec, seed).unwrap();
            let mut model = report_model.clone();
            let mut rng = rng_for(seed, "descent-test");
            for t in model.params.values_mut() {
                for v in t.data_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
            let s = Tensor::from_fn(&[2, 2], |i| (i as Real * 0.3).sin()).unwrap();
            let steps: Vec<Tensor> = (0..2)
                .map(|t| Tensor::from_fn(&[2, 2], |i| ((i + t) as Real * 0.7).cos()).unwrap())
                .collect();
            let label = Tensor::from_fn(&[2, 1], |i| i as Real - 0.5).unwrap();

            let loss_of = |m: &Model| {
                let mut tape = Tape::new();
                let vars = m.bind(&mut tape);
                let pred = m.forward_batch(&mut tape, &vars, &s, &steps).unwrap();
                let loss = batch_loss(&mut tape, &pred, &label).unwrap();
                tape.value(loss).item().unwrap()
            };

            let before = loss_of(&model);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let pred = model.forward_batch(&mut tape, &vars, &s, &steps).unwrap();
            let loss = batch_loss(&mut tape, &pred, &label).unwrap();
            let grads = tape.backward(loss).unwrap();
            let eps = 1e-4;
            for (name, var) in &vars {
                if let Some(g) = grads.get(*var) {
                    let p = model.params.get_mut(name).unwrap();
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= eps * gv;
                    }
                }
            }
            let after = loss_of(&model);
            assert!(
                after <= before + 1e-12,
                "seed {seed}: {before} -> {after}"
            );
        }
    }

    #[test]
    fn gradient_reaches_the_spatial_trunk() {
        let spec = tiny_spec(ModelKind::HyperstLstmD);
        let report = grad_check(&spec, 4, 1e-4).unwrap();
        assert!(report.passed(), "{}", format_grad_report(&report));
        // The audit jitters parameters, so trunk gradients are generically
        // nonzero; verify directly on a jittered instance.
        let mut model = build(&spec, 4).unwrap();
        let mut rng = rng_for(4, "flow-test");
        for t in model.params.values_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let s = Tensor::from_fn(&[2, 2], |i| (i as Real * 0.9).sin()).unwrap();
        let steps: Vec<Tensor> = (0..2)
            .map(|t| Tensor::from_fn(&[2, 2], |i| ((i * t + 1) as Real * 0.4).cos()).unwrap())
            .collect();
        let label = Tensor::from_fn(&[2, 1], |i| 0.3 - i as Real).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let pred = model.forward_batch(&mut tape, &vars, &s, &steps).unwrap();
        let loss = batch_loss(&mut tape, &pred, &label).unwrap();
        let grads = tape.backward(loss).unwrap();
        let trunk_grad = grads.get(vars["trunk.0.w"]).expect("trunk gradient missing");
        assert!(trunk_grad.data().iter().any(|g| g.abs() > 1e-12));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let (model, ds, splits) = training_fixture(ModelKind::Lstm);
        // A step this size pushes the output head past f64 range on the next
        // forward pass; the clip threshold is set high enough not to rescue it.
        let cfg = TrainConfig {
            lr: 1e200,
            optimizer: OptimizerKind::SgdMomentum,
            clip_norm: 1e300,
            max_epochs: 5,
            batch_size: 64,
            ..TrainConfig::default()
        };
        match train(&model, &ds, &splits, &cfg) {
            Err(NetError::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn early_stopping_returns_best_snapshot() {
        let (model, ds, splits) = training_fixture(ModelKind::Lstm);
        let cfg = TrainConfig {
            max_epochs: 8,
            patience: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&model, &ds, &splits, &cfg).unwrap();
        let best_row = out
            .history
            .iter()
            .min_by(|a, b| a.val_mae.total_cmp(&b.val_mae))
            .unwrap();
        assert_eq!(out.best_epoch, best_row.epoch);
        let re_eval = evaluate(&out.model, &ds, &splits.val).unwrap();
        assert!((re_eval.mae - best_row.val_mae).abs() < 1e-12);
    }

    fn zero_predictor_fixture(labels: &[Real]) -> (Model, crate::data::Dataset, WindowSet) {
        let n = labels.len();
        let m = 2;
        let ds = crate::data::Dataset {
            name: "fixed".into(),
            spatial: Tensor::zeros(&[n, 1]).unwrap(),
            temporal: Tensor::zeros(&[n, m, 1]).unwrap(),
            labels: Tensor::from_fn(&[n, m, 1], |i| if i % m == 1 { labels[i / m] } else { 0.0 })
                .unwrap(),
            timestamps: vec![0, 1],
            grid: None,
        };
        let spec = ModelSpec {
            kind: ModelKind::Lstm,
            trunk: vec![],
            temporal: vec![2],
            d_s: 1,
            d_t: 1,
            d_l: 1,
            window: 1,
            horizon: 1,
            generate_bias: true,
            kernel: 3,
        };
        let mut model = build(&spec, 0).unwrap();
        // Zero the output head: the model predicts exactly 0 everywhere.
        for name in ["out.w", "out.b"] {
            let shape = model.params[name].shape().to_vec();
            model.params.insert(name.into(), Tensor::zeros(&shape).unwrap());
        }
        let set = WindowSet {
            windows: (0..n).map(|object| SampleWindow { object, start: 0 }).collect(),
            window: 1,
            horizon: 1,
            time_range: 0..2,
        };
        (model, ds, set)
    }

    #[test]
    fn metric_oracles() {
        // Perfect predictor.
        let (model, ds, set) = zero_predictor_fixture(&[0.0, 0.0]);
        let r = evaluate(&model, &ds, &set).unwrap();
        assert_eq!((r.mae, r.rmse), (0.0, 0.0));

        // Errors {+1, −1}: MAE = RMSE = 1.
        let (model, ds, set) = zero_predictor_fixture(&[1.0, -1.0]);
        let r = evaluate(&model, &ds, &set).unwrap();
        assert!((r.mae - 1.0).abs() < 1e-15 && (r.rmse - 1.0).abs() < 1e-15);

        // Errors {0, 2}: MAE = 1, RMSE = √2 — RMSE ≥ MAE.
        let (model, ds, set) = zero_predictor_fixture(&[0.0, -2.0]);
        let r = evaluate(&model, &ds, &set).unwrap();
        assert!((r.mae - 1.0).abs() < 1e-15);
        assert!((r.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert!(r.rmse >= r.mae);
    }

    #[test]
    fn evaluation_denormalizes_with_model_stats() {
        let (mut model, ds, set) = zero_predictor_fixture(&[1.0, -1.0]);
        // With σ=2 on labels, normalized errors of ±1 are ±2 in raw units.
        model.normalizer = Some(Normalizer {
            t_mean: vec![0.0],
            t_std: vec![1.0],
            l_mean: vec![5.0],
            l_std: vec![2.0],
            degenerate: vec![],
        });
        let r = evaluate(&model, &ds, &set).unwrap();
        assert!((r.mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window_set_is_rejected() {
        let (model, ds, mut set) = zero_predictor_fixture(&[0.0]);
        set.windows.clear();
        assert!(matches!(
            evaluate(&model, &ds, &set),
            Err(NetError::EmptyEvaluation)
        ));
    }

    #[test]
    fn rmse_never_beats_mae_on_random_models() {
        let (model, ds, splits) = training_fixture(ModelKind::StLstm);
        for set in [&splits.train, &splits.val, &splits.test] {
            let r = evaluate(&model, &ds, set).unwrap();
            assert!(r.rmse >= r.mae, "rmse {} < mae {}", r.rmse, r.mae);
            for hstep in &r.per_horizon {
                assert!(hstep.rmse >= hstep.mae);
            }
        }
    }

    #[test]
    fn audit_passes_for_plain_lstm() {
        let report = grad_check(&tiny_spec(ModelKind::Lstm), 11, 1e-4).unwrap();
        assert!(report.passed(), "{}", format_grad_report(&report));
    }

    #[test]
    fn audit_passes_for_grid_model() {
        let mut spec = tiny_spec(ModelKind::HyperstCnn);
        spec.d_t = 1;
        spec.temporal = vec![2];
        let report = grad_check(&spec, 12, 1e-4).unwrap();
        assert!(report.passed(), "{}", format_grad_report(&report));
    }

    #[test]
    fn audit_catches_a_corrupted_gradient() {
        let spec = tiny_spec(ModelKind::HyperstLstmD);
        let report = grad_check_tampered(&spec, 4, 1e-4, "trunk.0.w").unwrap();
        assert!(!report.passed());
        let failing: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
        assert_eq!(failing, vec!["trunk.0.w"]);
    }

    #[test]
    fn history_csv_has_expected_header() {
        let rows = vec![EpochStats {
            epoch: 1,
            train_loss: 0.5,
            val_mae: 0.4,
            val_rmse: 0.6,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_mae,val_rmse\n"));
        assert!(text.contains("1,0.5,0.4,0.6"));
    }
}
