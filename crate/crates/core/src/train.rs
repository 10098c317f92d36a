//! Composite loss, adaptive-moment optimizer and the training loop.
//!
//! Each sequence runs on its own tape. A batch loss is
//! `Σ_j λ_j · S_j / N_j`, where `S_j` sums term `j` over every target of the
//! batch and `N_j` counts those targets, so per-sequence contributions can
//! be differentiated independently and summed.
//!
//! The interval term is measured in units of the training mean interval and
//! the continuous term in units of each attribute's training standard
//! deviation.

use rayon::prelude::*;

use crate::config::{LossWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::geo::haversine;
use crate::ingest::{Dataset, Split};
use crate::model::Model;
use crate::numeric::{hash_bytes, stream_id, Gradients, ParamStore, RngStream, Tape, Tensor, Var};
use crate::params::Bound;
use crate::types::{AttributeId, RecordSequence, TypeClass};

pub const TERMS: [&str; 5] = ["coo", "time", "period", "cont", "disc"];
const COO: usize = 0;
const TIME: usize = 1;
const PERIOD: usize = 2;
const CONT: usize = 3;
const DISC: usize = 4;

fn weight_of(w: &LossWeights, j: usize) -> f64 {
    [w.coo, w.time, w.period, w.cont, w.disc][j]
}

/// Haversine central angle, radians.
pub fn loss_coordinates(lon_hat: f64, lat_hat: f64, lon: f64, lat: f64) -> f64 {
    haversine(lon_hat, lat_hat, lon, lat)
}

/// Mean squared interval error; `prev[i]` is `τ_{i−1}`.
pub fn loss_timestamp(pred: &[f64], truth: &[f64], prev: &[f64]) -> f64 {
    mean(
        pred.iter()
            .zip(truth)
            .zip(prev)
            .map(|((p, t), q)| ((p - q) - (t - q)).powi(2)),
    )
}

/// `‖[sin x, cos x] − ê‖₂` for an angle in degrees.
pub fn loss_cyclical(x: f64, e_hat: [f64; 2]) -> f64 {
    let r = x.to_radians();
    (r.sin() - e_hat[0]).hypot(r.cos() - e_hat[1])
}

pub fn loss_continuous(pred: &[f64], truth: &[f64]) -> f64 {
    mean(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)))
}

/// Mean of `−log(ŷ_y + 1e-12)`.
pub fn loss_discrete(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    mean(probs.iter().zip(labels).map(|(p, &y)| -(p[y] + 1e-12).ln()))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Haversine angle on the tape; all inputs `[m, 1]` in degrees.
pub fn haversine_tape<'t>(lon1: Var<'t>, lat1: Var<'t>, lon2: Var<'t>, lat2: Var<'t>) -> Result<Var<'t>> {
    let rad = std::f64::consts::PI / 180.0;
    let half_dlat = lat2.sub(lat1)?.scale(rad / 2.0);
    let half_dlon = lon2.sub(lon1)?.scale(rad / 2.0);
    let cos1 = lat1.scale(rad).cos();
    let cos2 = lat2.scale(rad).cos();
    let a = half_dlat
        .sin()
        .square()
        .add(cos1.mul(cos2)?.mul(half_dlon.sin().square())?)?;
    Ok(a.clamp(0.0, 1.0 - 1e-12).add_scalar(1e-30).sqrt().asin().scale(2.0))
}

fn coordinate_rows(seq: &RecordSequence) -> Vec<usize> {
    (0..seq.len())
        .filter(|&t| {
            (seq.is_target(t, AttributeId::Lon) || seq.is_target(t, AttributeId::Lat))
                && seq.observed(t, AttributeId::Lon)
                && seq.observed(t, AttributeId::Lat)
        })
        .collect()
}

fn time_rows(seq: &RecordSequence) -> Vec<usize> {
    (1..seq.len())
        .filter(|&t| seq.is_target(t, AttributeId::Time) && seq.observed(t - 1, AttributeId::Time))
        .collect()
}

fn target_rows(seq: &RecordSequence, a: AttributeId) -> Vec<usize> {
    (0..seq.len()).filter(|&t| seq.is_target(t, a)).collect()
}

fn class_attrs(c: TypeClass) -> impl Iterator<Item = AttributeId> {
    AttributeId::ALL.into_iter().filter(move |a| a.type_class() == c)
}

/// Number of loss targets per term.
pub fn target_counts(seq: &RecordSequence) -> [usize; 5] {
    let per_class = |c| class_attrs(c).map(|a| target_rows(seq, a).len()).sum();
    [
        coordinate_rows(seq).len(),
        time_rows(seq).len(),
        per_class(TypeClass::Cyclical),
        per_class(TypeClass::Continuous),
        per_class(TypeClass::Discrete),
    ]
}

fn column(rows: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
    Tensor::new(&[rows.len(), 1], rows.iter().map(|&t| f(t)).collect())
}

fn accumulate<'t>(slot: &mut Option<Var<'t>>, v: Var<'t>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => v,
        Some(acc) => acc.add(v)?,
    });
    Ok(())
}

/// Per-term sums `S_j` of one sequence (`None` where it has no targets).
pub fn sequence_terms<'t>(model: &Model, bound: &Bound<'t, '_>, seq: &RecordSequence) -> Result<[Option<Var<'t>>; 5]> {
    let bases = model.bases(seq);
    let out = model.forward(bound, seq, &bases)?;
    let mut sums: [Option<Var<'t>>; 5] = [None; 5];
    let c = |t: Tensor| bound.constant(t);
    let value = |t: usize, a: AttributeId| seq.value(t, a).expect("target is observed");

    let rows = coordinate_rows(seq);
    if !rows.is_empty() {
        let pick = |a: AttributeId, pred: Var<'t>| -> Result<Var<'t>> {
            let m = column(&rows, |t| if seq.is_target(t, a) { 1.0 } else { 0.0 })?;
            let inv = m.map(|x| 1.0 - x);
            let vis = column(&rows, |t| seq.visible_value(t, a).unwrap_or(0.0))?;
            pred.index_select(&rows)?
                .mul(c(m))?
                .add(c(inv.zip_map(&vis, |a, b| a * b)))
        };
        let lon = pick(AttributeId::Lon, out.lon)?;
        let lat = pick(AttributeId::Lat, out.lat)?;
        let truth_lon = c(column(&rows, |t| value(t, AttributeId::Lon))?);
        let truth_lat = c(column(&rows, |t| value(t, AttributeId::Lat))?);
        sums[COO] = Some(haversine_tape(lon, lat, truth_lon, truth_lat)?.sum());
    }

    let rows = time_rows(seq);
    if !rows.is_empty() {
        let unit = model.stats.mean_interval.filter(|m| *m > 0.0).unwrap_or(1.0);
        let truth = column(&rows, |t| {
            (value(t, AttributeId::Time) - value(t - 1, AttributeId::Time)) / unit
        })?;
        let pred = out.eta.index_select(&rows)?.scale(unit).powf(-1.0);
        sums[TIME] = Some(pred.sub(c(truth))?.square().sum());
    }

    for a in class_attrs(TypeClass::Cyclical) {
        let rows = target_rows(seq, a);
        if rows.is_empty() {
            continue;
        }
        let mut enc = Vec::with_capacity(2 * rows.len());
        for &t in &rows {
            let r = value(t, a).to_radians();
            enc.extend([r.sin(), r.cos()]);
        }
        let diff = out
            .of(a)
            .index_select(&rows)?
            .sub(c(Tensor::new(&[rows.len(), 2], enc)?))?;
        accumulate(&mut sums[PERIOD], diff.l2norm()?.sum())?;
    }

    for a in class_attrs(TypeClass::Continuous) {
        let rows = target_rows(seq, a);
        if rows.is_empty() {
            continue;
        }
        let sd = model.stats.scale_of(a).1;
        let truth = column(&rows, |t| value(t, a) / sd)?;
        let err = out.of(a).index_select(&rows)?.scale(1.0 / sd).sub(c(truth))?;
        accumulate(&mut sums[CONT], err.square().sum())?;
    }

    for a in class_attrs(TypeClass::Discrete) {
        let rows = target_rows(seq, a);
        if rows.is_empty() {
            continue;
        }
        let probs = out.of(a).index_select(&rows)?;
        let classes = probs.shape()[1];
        let mut onehot = vec![0.0; rows.len() * classes];
        for (i, &t) in rows.iter().enumerate() {
            let y = value(t, a) as usize;
            if y >= classes {
                return Err(Error::invalid(format!("{a} label {y} out of range 0..{classes}")));
            }
            onehot[i * classes + y] = 1.0;
        }
        let picked = probs
            .mul(c(Tensor::new(&[rows.len(), classes], onehot)?))?
            .sum_axis(1)?;
        accumulate(&mut sums[DISC], picked.add_scalar(1e-12).log().neg().sum())?;
    }
    Ok(sums)
}

/// `Σ_j λ_j S_j / N_j` over the terms with targets.
fn combine<'t>(
    tape: &'t Tape,
    sums: &[Option<Var<'t>>; 5],
    counts: &[usize; 5],
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for j in 0..5 {
        if let Some(s) = sums[j] {
            total = total.add(s.scale(weight_of(weights, j) / counts[j] as f64))?;
        }
    }
    Ok(total)
}

fn batch_counts(batch: &[&RecordSequence]) -> [usize; 5] {
    let mut n = [0; 5];
    for s in batch {
        for (a, b) in n.iter_mut().zip(target_counts(s)) {
            *a += b;
        }
    }
    n
}

/// Whole-batch loss on a single tape, with parameters read from `store`.
pub fn batch_loss_tape<'t>(
    model: &Model,
    tape: &'t Tape,
    store: &ParamStore,
    batch: &[&RecordSequence],
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let counts = batch_counts(batch);
    let bound = Bound::new(tape, store);
    let mut total = tape.constant(Tensor::scalar(0.0));
    for seq in batch {
        let sums = sequence_terms(model, &bound, seq)?;
        total = total.add(combine(tape, &sums, &counts, weights)?)?;
    }
    Ok(total)
}

/// Loss value with its unweighted per-term means.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: [f64; 5],
    pub counts: [usize; 5],
}

impl LossBreakdown {
    fn from_sums(sums: [f64; 5], counts: [usize; 5], weights: &LossWeights) -> Self {
        let mut terms = [0.0; 5];
        let mut total = 0.0;
        for j in 0..5 {
            if counts[j] > 0 {
                terms[j] = sums[j] / counts[j] as f64;
                total += weight_of(weights, j) * terms[j];
            }
        }
        Self { total, terms, counts }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        (0..5).find(|&j| !self.terms[j].is_finite()).map(|j| TERMS[j])
    }
}

fn sequence_pass(
    model: &Model,
    seq: &RecordSequence,
    counts: &[usize; 5],
    weights: &LossWeights,
    grads: bool,
) -> Result<([f64; 5], Option<Gradients>)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.store);
    let sums = sequence_terms(model, &bound, seq)?;
    let values = sums.map(|s| s.map_or(0.0, |v| v.item()));
    let g = if grads {
        let loss = combine(&tape, &sums, counts, weights)?;
        Some(tape.backward(loss, model.store.len())?)
    } else {
        None
    };
    Ok((values, g))
}

fn batch_pass(
    model: &Model,
    batch: &[&RecordSequence],
    weights: &LossWeights,
    grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let counts = batch_counts(batch);
    let parts: Vec<([f64; 5], Option<Gradients>)> = batch
        .par_iter()
        .map(|s| sequence_pass(model, s, &counts, weights, grads))
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 5];
    let mut total: Option<Gradients> = grads.then(|| Gradients::empty(model.store.len()));
    for (v, g) in &parts {
        for j in 0..5 {
            sums[j] += v[j];
        }
        if let (Some(t), Some(g)) = (total.as_mut(), g) {
            t.merge(g);
        }
    }
    Ok((LossBreakdown::from_sums(sums, counts, weights), total))
}

/// Weighted composite loss of a batch (no gradients).
pub fn total_loss(model: &Model, batch: &[&RecordSequence], weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(batch_pass(model, batch, weights, false)?.0)
}

/// Loss and summed parameter gradients of a batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[&RecordSequence],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let (l, g) = batch_pass(model, batch, weights, true)?;
    Ok((l, g.expect("gradients requested")))
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if weight_decay > 0.0 {
                for x in p.data_mut() {
                    *x -= lr * weight_decay * *x;
                }
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            }
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean train per-term losses (unweighted).
    pub terms: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss");
    for t in TERMS {
        out += &format!(",{t}");
    }
    out.push('\n');
    for r in history {
        out += &format!("{},{},{}", r.epoch, r.train_loss, r.val_loss);
        for t in r.terms {
            out += &format!(",{t}");
        }
        out.push('\n');
    }
    out
}

/// Trains `model` on the train split, selecting parameters by validation
/// loss. The best parameters are left in `model.store`.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    adam: &mut AdamState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport> {
    let train = data.indices(Split::Train);
    let val: Vec<&RecordSequence> = data.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation splits must be non-empty"));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::invalid("batch size and patience must be positive"));
    }
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut order = train.clone();
        RngStream::new(seed, stream_id(&[hash_bytes(b"shuffle"), epoch as u64])).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut term_sum = [0.0; 5];
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&RecordSequence> = chunk.iter().map(|&i| &data.sequences[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, &cfg.weights)?;
            let bad_term = loss.non_finite_term().or((!grads.all_finite()).then_some("gradient"));
            if let Some(term) = bad_term {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    term: term.to_string(),
                });
            }
            adam.update(&mut model.store, &grads, cfg.lr, cfg.weight_decay);
            loss_sum += loss.total;
            for j in 0..5 {
                term_sum[j] += loss.terms[j];
            }
            n_batches += 1;
        }
        let val_loss = total_loss(model, &val, &cfg.weights)?;
        if let Some(term) = val_loss.non_finite_term() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                term: format!("validation {term}"),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss: val_loss.total,
            terms: term_sum.map(|s| s / n_batches as f64),
        };
        on_epoch(&rec);
        history.push(rec);
        if val_loss.total < best.0 {
            best = (val_loss.total, epoch, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.store = best.2;
    Ok(FitReport {
        history,
        best_epoch: best.1,
        best_val: best.0,
        stopped_early,
    })
}
