//! Contrastive training of the fusion network and geographic embeddings.
//!
//! Each level contributes an InfoNCE term over the batch,
//!
//! ```text
//! L_l = mean_i [ log Σ_j exp(v_i·g_j / τ_l) − v_i·g_i / τ_l ]
//! ```
//!
//! and the objective is `Σ_l L_l`. A step runs one forward tape per sample,
//! differentiates the batch loss with respect to the stacked features, then
//! pushes each feature's row gradient back through its own tape. Per-sample
//! gradients are summed in batch order, so results do not depend on thread
//! scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::fusion::{FusionError, FusionParams, RgbTokens, SegMap};
use crate::geoembed::{GeoEmbedError, GeoRepresentation};
use crate::model::Model;

/// Largest deviation from unit norm accepted by [`info_nce_level`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Geo(#[from] GeoEmbedError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("row {row} of {which} has norm {norm}, expected 1")]
    NotUnit { which: &'static str, row: usize, norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Micro-batches averaged per optimizer step.
    pub grad_accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub patience: usize,
    pub epochs_max: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Leave same-cell pairs `j ≠ i` out of each denominator.
    pub mask_same_cell_negatives: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            grad_accum: 1,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_gamma: 0.5,
            patience: 4,
            epochs_max: 20,
            seed: 0,
            precision: Precision::F32,
            mask_same_cell_negatives: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.lr_gamma > 0.0) {
            return bad("weight_decay must be >= 0 and lr_gamma > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    /// `lr₀ · γ^epoch`, epochs counted from zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi(epoch as i32)
    }
}

/// One training or validation record with its per-level embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub rgb: RgbTokens<T>,
    pub seg: SegMap,
    /// Row of the sample's cell in each level's embedding, coarsest first.
    pub rows: Vec<usize>,
}

/// InfoNCE on the tape. `inv_tau` is `1 × 1`; `cells`, when given, masks
/// pairs `j ≠ i` with `cells[j] == cells[i]` out of the denominator.
pub fn info_nce_var<T: Real>(
    tape: &mut Tape<'_, T>,
    v: Var,
    g: Var,
    inv_tau: Var,
    cells: Option<&[usize]>,
) -> Result<Var, TensorError> {
    let gt = tape.transpose(g)?;
    let logits = tape.matmul(v, gt)?;
    let logits = tape.scale_by(logits, inv_tau)?;
    let lse = match cells {
        Some(c) => {
            let b = c.len();
            let mask = (0..b * b).map(|k| k / b == k % b || c[k / b] != c[k % b]).collect();
            tape.log_sum_exp_rows_masked(logits, mask)?
        }
        None => tape.log_sum_exp_rows(logits)?,
    };
    let diag = tape.elementwise_mul(v, g)?;
    let diag = tape.sum_rows(diag)?;
    let diag = tape.scale_by(diag, inv_tau)?;
    let per_sample = tape.sub(lse, diag)?;
    tape.mean_all(per_sample)
}

/// InfoNCE of unit-norm rows `v` against `g` at temperature `tau`.
pub fn info_nce_level<T: Real>(
    v: &Tensor<T>,
    g: &Tensor<T>,
    tau: T,
    cells: Option<&[usize]>,
) -> Result<T, TrainError> {
    if v.shape() != g.shape() {
        return Err(TensorError::shape("info_nce_level", v.shape(), g.shape()).into());
    }
    if !(tau > T::zero()) {
        return Err(TrainError::Config(format!("temperature {tau} must be positive")));
    }
    for (which, m) in [("V", v), ("G", g)] {
        for r in 0..m.rows() {
            let norm = m.row(r).iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(TrainError::NotUnit { which, row: r, norm });
            }
        }
    }
    if let Some(c) = cells {
        if c.len() != v.rows() {
            return Err(TrainError::Config(format!("{} cell ids for {} rows", c.len(), v.rows())));
        }
    }
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let gv = tape.constant(g.clone());
    let it = tape.constant(Tensor::scalar(T::one() / tau));
    let loss = info_nce_var(&mut tape, vv, gv, it, cells)?;
    Ok(tape.value(loss).item())
}

/// `Σ_l L_l` for stacked features `v`, plus the per-level terms.
fn hierarchy_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    geo: &GeoRepresentation,
    v: Var,
    batch: &[&Example<T>],
    mask: bool,
) -> Result<(Var, Vec<Var>), TrainError> {
    let mut levels = Vec::with_capacity(geo.num_levels());
    for l in 0..geo.num_levels() {
        let rows: Vec<usize> = batch.iter().map(|e| e.rows[l]).collect();
        let g = geo.gather_normalized(tape, store, l, &rows)?;
        let inv_tau = geo.inv_temperature(tape, store, l)?;
        levels.push(info_nce_var(tape, v, g, inv_tau, mask.then_some(rows.as_slice()))?);
    }
    let mut total = levels[0];
    for &l in &levels[1..] {
        total = tape.add(total, l)?;
    }
    Ok((total, levels))
}

/// The whole objective on a single tape, for gradient checks and tests.
pub fn total_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    fusion: &FusionParams,
    geo: &GeoRepresentation,
    batch: &[&Example<T>],
    mask: bool,
) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let feats = batch
        .iter()
        .map(|e| fusion.fuse(tape, store, &e.rgb, &e.seg))
        .collect::<Result<Vec<_>, _>>()?;
    let v = tape.concat_rows(&feats)?;
    Ok(hierarchy_loss(tape, store, geo, v, batch, mask)?.0)
}

/// Loss values and summed parameter gradients (indexed by [`ParamId`]) of one batch.
pub struct BatchGradients<T> {
    pub loss: f64,
    pub per_level: Vec<f64>,
    pub grads: Vec<Option<Tensor<T>>>,
}

fn stack_features<T: Real>(tapes: &[(Tape<'_, T>, Var)]) -> Result<Tensor<T>, TensorError> {
    let dim = tapes[0].0.value(tapes[0].1).cols();
    let mut data = Vec::with_capacity(tapes.len() * dim);
    for (t, v) in tapes {
        data.extend_from_slice(t.value(*v).data());
    }
    Tensor::matrix(tapes.len(), dim, data)
}

fn forward_all<'a, T: Real>(
    model: &'a Model<T>,
    batch: &[&Example<T>],
) -> Result<Vec<(Tape<'a, T>, Var)>, TrainError> {
    batch
        .par_iter()
        .map(|e| {
            let mut tape = Tape::new();
            let v = model.fusion.fuse(&mut tape, &model.store, &e.rgb, &e.seg)?;
            Ok((tape, v))
        })
        .collect()
}

/// Loss and gradients of one batch via per-sample tapes.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[&Example<T>],
    mask: bool,
) -> Result<BatchGradients<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let forwards = forward_all(model, batch)?;
    let stacked = stack_features(&forwards)?;

    let mut bt = Tape::new();
    let vin = bt.input(stacked);
    let (loss, levels) = hierarchy_loss(&mut bt, &model.store, &model.geo, vin, batch, mask)?;
    let loss_value = bt.value(loss).item().as_f64();
    let per_level = levels.iter().map(|&l| bt.value(l).item().as_f64()).collect();
    let g = bt.backward(loss)?;

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
    let mut add = |id: ParamId, t: &Tensor<T>| match &mut grads[id.index()] {
        Some(acc) => acc.add_assign(t),
        slot => *slot = Some(t.clone()),
    };
    for (id, t) in g.param_grads() {
        add(id, t);
    }
    let dv = g
        .wrt(vin)
        .ok_or_else(|| TrainError::Config("features received no gradient".into()))?;
    let per_sample: Vec<Vec<(ParamId, Tensor<T>)>> = forwards
        .into_par_iter()
        .enumerate()
        .map(|(i, (mut tape, v))| {
            let seed = Tensor::matrix(1, dv.cols(), dv.row(i).to_vec())?;
            let gi = tape.backward_seeded(v, seed)?;
            Ok(gi.param_grads().map(|(id, t)| (id, t.clone())).collect())
        })
        .collect::<Result<_, TensorError>>()?;
    for sample in &per_sample {
        for (id, t) in sample {
            add(*id, t);
        }
    }
    Ok(BatchGradients {
        loss: loss_value,
        per_level,
        grads,
    })
}

/// Sets every gradient buffer to the mean of the micro-batch gradients,
/// summed in micro-batch order.
pub fn load_mean_gradients<T: Real>(store: &mut ParamStore<T>, micro: &[BatchGradients<T>]) {
    store.zero_grad();
    let scale = T::lit(1.0 / micro.len().max(1) as f64);
    for bg in micro {
        for (i, g) in bg.grads.iter().enumerate() {
            if let Some(g) = g {
                let dst = &mut store.get_mut(ParamId(i)).grad;
                for (d, &x) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += x * scale;
                }
            }
        }
    }
}

/// Mean loss over `examples` in fixed batches of `batch_size`, weighted by
/// batch size, plus the per-level means.
pub fn evaluate_loss<T: Real>(
    model: &Model<T>,
    examples: &[Example<T>],
    batch_size: usize,
    mask: bool,
) -> Result<(f64, Vec<f64>), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let mut total = 0.0;
    let mut per_level = vec![0.0; model.geo.num_levels()];
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch: Vec<&Example<T>> = chunk.iter().collect();
        let forwards = forward_all(model, &batch)?;
        let stacked = stack_features(&forwards)?;
        drop(forwards);
        let mut tape = Tape::new();
        let v = tape.constant(stacked);
        let (loss, levels) = hierarchy_loss(&mut tape, &model.store, &model.geo, v, &batch, mask)?;
        let w = chunk.len() as f64;
        total += w * tape.value(loss).item().as_f64();
        for (acc, l) in per_level.iter_mut().zip(levels) {
            *acc += w * tape.value(l).item().as_f64();
        }
    }
    let n = examples.len() as f64;
    Ok((total / n, per_level.into_iter().map(|x| x / n).collect()))
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update from the gradients held in `store`.
///
/// `w ← w − lr · (m̂ / (√v̂ + ε) + wd · w)`.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamW<T>, lr: f64, weight_decay: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(state.eps));
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
}

/// Stops once `patience` consecutive evaluations fail to improve on the best.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub since_best: usize,
    pub evaluations: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
            evaluations: 0,
        }
    }

    /// Records a validation value; true when it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        self.evaluations += 1;
        if value < self.best {
            self.best = value;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation loss of each level, coarsest first.
    pub per_level_losses: Vec<f64>,
    /// Left out of serialized logs so they stay reproducible.
    #[serde(skip)]
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Zero when no epoch beat the untrained model.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
}

/// Trains in place and leaves the best-validation parameters in `model`.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &[Example<T>],
    val: &[Example<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let mask = cfg.mask_same_cell_negatives;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let (initial, _) = evaluate_loss(model, val, cfg.batch_size, mask)?;
    stopper.observe(initial);
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut opt = AdamW::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs_max {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let min_batch = cfg.batch_size.min(2);
        let batches: Vec<&[usize]> = order
            .chunks(cfg.batch_size)
            .filter(|c| c.len() >= min_batch)
            .collect();
        if batches.is_empty() {
            return Err(TrainError::Config(format!(
                "{} training samples cannot fill a batch of {}",
                train.len(),
                cfg.batch_size
            )));
        }
        let mut train_loss = 0.0;
        for group in batches.chunks(cfg.grad_accum) {
            let micro = group
                .iter()
                .map(|idx| {
                    let batch: Vec<&Example<T>> = idx.iter().map(|&i| &train[i]).collect();
                    batch_gradients(model, &batch, mask)
                })
                .collect::<Result<Vec<_>, _>>()?;
            train_loss += micro.iter().map(|m| m.loss).sum::<f64>();
            load_mean_gradients(&mut model.store, &micro);
            adamw_step(&mut model.store, &mut opt, lr, cfg.weight_decay);
        }
        train_loss /= batches.len() as f64;
        let (val_loss, per_level_losses) = evaluate_loss(model, val, cfg.batch_size, mask)?;
        if stopper.observe(val_loss) {
            best = model.store.clone();
            best_epoch = epoch + 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
            per_level_losses,
            wall_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec);
        if stopper.should_stop() {
            break;
        }
    }
    model.store.copy_values_from(&best);
    Ok(FitReport {
        initial_val_loss: initial,
        best_val_loss: stopper.best,
        best_epoch,
        epochs_run: log.len(),
        stopped_early: stopper.should_stop(),
        log,
    })
}
