//! Adam, learning-rate schedules, early stopping and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{csv_error, TaggedDataset};
use crate::error::{config_err, data_err, Error, Result};
use crate::models::{Mode, Model, Param};
use crate::normalization::{Averaging, NormScheme};
use crate::rng::{stream, Purpose};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Smallest validation gain that counts as an improvement.
pub const IMPROVEMENT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(config_err!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(config_err!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            ));
        }
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].to_f64_lossy();
            let mj = BETA1 * m[j].to_f64_lossy() + (1.0 - BETA1) * gj;
            let vj = BETA2 * v[j].to_f64_lossy() + (1.0 - BETA2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPSILON);
            *w = T::from_f64_lossy(w.to_f64_lossy() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Piecewise constant: `(first epoch, lr)` pairs, ascending.
    Fixed { breakpoints: Vec<(usize, f64)> },
    /// Multiply by `factor` after `patience` epochs without improvement.
    Plateau {
        initial: f64,
        factor: f64,
        patience: usize,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Fixed {
            breakpoints: vec![(0, 5e-4), (35, 5e-5)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScheme {
    NonAdaptive,
    AdaptiveBatch,
    AdaptiveInstance,
}

impl EvalScheme {
    pub const ALL: [EvalScheme; 3] = [
        EvalScheme::NonAdaptive,
        EvalScheme::AdaptiveBatch,
        EvalScheme::AdaptiveInstance,
    ];

    pub fn scheme(self) -> NormScheme {
        match self {
            EvalScheme::NonAdaptive => NormScheme::NonAdaptive,
            _ => NormScheme::Adaptive,
        }
    }

    pub fn averaging(self) -> Averaging {
        match self {
            EvalScheme::AdaptiveInstance => Averaging::Instance,
            _ => Averaging::Batch,
        }
    }

    /// Forward mode implementing this scheme on `model`, if the model's
    /// training mode supports it.
    pub fn mode_for<T: Scalar>(self, model: &Model<T>) -> Result<Mode> {
        let trained = model.norm_spec().averaging();
        if trained != self.averaging() {
            return Err(config_err!(
                "{self} evaluation needs a model trained with {} averaging, this one used {trained}",
                self.averaging()
            ));
        }
        Ok(match self {
            EvalScheme::NonAdaptive => Mode::EvalNonAdaptive,
            _ => Mode::EvalAdaptive,
        })
    }
}

impl std::fmt::Display for EvalScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalScheme::NonAdaptive => "non_adaptive",
            EvalScheme::AdaptiveBatch => "adaptive_batch",
            EvalScheme::AdaptiveInstance => "adaptive_instance",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Stop after this many epochs without improvement; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub eval_scheme: EvalScheme,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr_schedule: LrSchedule::default(),
            batch_size: 32,
            early_stop_patience: 10,
            seed: 0,
            eval_scheme: EvalScheme::NonAdaptive,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err!("epochs and batch sizes must be at least 1"));
        }
        match &self.lr_schedule {
            LrSchedule::Fixed { breakpoints } => {
                if breakpoints.first().map(|b| b.0) != Some(0) {
                    return Err(config_err!("fixed schedule must start at epoch 0"));
                }
                if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(config_err!("schedule epochs must be strictly ascending"));
                }
                if breakpoints.iter().any(|b| !(b.1 >= 0.0 && b.1.is_finite())) {
                    return Err(config_err!("learning rates must be finite and non-negative"));
                }
            }
            LrSchedule::Plateau {
                initial,
                factor,
                patience,
            } => {
                if !(*initial >= 0.0 && initial.is_finite()) || !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(config_err!("plateau schedule needs lr ≥ 0 and factor in (0, 1]"));
                }
                if *patience == 0 {
                    return Err(config_err!("plateau patience must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, given validation accuracies of the epochs
/// before it.
pub fn schedule_lr(schedule: &LrSchedule, epoch: usize, val_history: &[f64]) -> f64 {
    match schedule {
        LrSchedule::Fixed { breakpoints } => breakpoints
            .iter()
            .take_while(|b| b.0 <= epoch)
            .last()
            .map_or(0.0, |b| b.1),
        LrSchedule::Plateau {
            initial,
            factor,
            patience,
        } => {
            let mut lr = *initial;
            let mut best = f64::NEG_INFINITY;
            let mut stale = 0;
            for &acc in val_history {
                if acc > best + IMPROVEMENT {
                    best = acc;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= *patience {
                        lr *= factor;
                        stale = 0;
                    }
                }
            }
            lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// First epoch attaining the maximum.
    pub best_epoch: usize,
}

pub fn early_stop_check(val_history: &[f64], patience: usize) -> EarlyStop {
    let mut best_epoch = 0;
    for (i, &v) in val_history.iter().enumerate() {
        if v > val_history[best_epoch] {
            best_epoch = i;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for &v in val_history {
        if v > best + IMPROVEMENT {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    EarlyStop {
        stop: patience > 0 && stale >= patience,
        best_epoch,
    }
}

/// Batches for evaluation. Adaptive batch statistics are computed per
/// extraneous group, so each group is cut into near-equal chunks of at
/// most `batch_size`; other schemes batch in order.
pub fn eval_batches(ds: &TaggedDataset, scheme: EvalScheme, batch_size: usize) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    match scheme {
        EvalScheme::AdaptiveBatch => {
            let mut out = Vec::new();
            for idx in ds.groups().into_values() {
                let chunks = idx.len().div_ceil(bs);
                for k in 0..chunks {
                    out.push(idx[k * idx.len() / chunks..(k + 1) * idx.len() / chunks].to_vec());
                }
            }
            out
        }
        _ => (0..ds.len())
            .collect::<Vec<_>>()
            .chunks(bs)
            .map(|c| c.to_vec())
            .collect(),
    }
}

fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let (nb, k) = (s[0], s[1]);
    let t = if s.len() == 3 { s[2] } else { 1 };
    let d = logits.data();
    let mut out = Vec::with_capacity(nb * t);
    for b in 0..nb {
        for ti in 0..t {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * t + ti] > d[(b * k + best) * t + ti] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Correct and total label counts; per-timestep for sequences.
pub fn evaluate_counts<T: Scalar>(
    model: &Model<T>,
    ds: &TaggedDataset,
    scheme: EvalScheme,
    batch_size: usize,
) -> Result<(usize, usize)> {
    if ds.is_empty() {
        return Err(data_err!("cannot evaluate on an empty dataset"));
    }
    let mode = scheme.mode_for(model)?;
    let batches = eval_batches(ds, scheme, batch_size);
    let counts: Vec<Result<(usize, usize)>> = batches
        .par_iter()
        .map(|idx| {
            let (x, labels) = ds.batch::<T>(idx);
            let logits = model.predict(x, mode)?;
            let pred = argmax_labels(&logits);
            let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            Ok((correct, labels.len()))
        })
        .collect();
    counts
        .into_iter()
        .try_fold((0, 0), |acc, c| c.map(|(a, b)| (acc.0 + a, acc.1 + b)))
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &TaggedDataset,
    scheme: EvalScheme,
    batch_size: usize,
) -> Result<f64> {
    let (correct, total) = evaluate_counts(model, ds, scheme, batch_size)?;
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// Everything except wall-clock time.
    pub fn deterministic_part(&self) -> (usize, u64, u64, u64) {
        (
            self.epoch,
            self.lr.to_bits(),
            self.train_loss.to_bits(),
            self.val_acc.to_bits(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

/// One optimization step on `indices`; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    ds: &TaggedDataset,
    indices: &[usize],
    lr: f64,
) -> Result<f64> {
    let (x, labels) = ds.batch::<T>(indices);
    let mut tape = Tape::new();
    let trace = model.forward_train(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
    let value = tape.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = trace
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    adam_step(model.params_mut(), &grads, state, lr)?;
    Ok(value)
}

/// Trains with Adam, keeping the parameters of the best validation epoch.
///
/// On success `model` holds the best snapshot. On a numerical failure it
/// holds the last good snapshot and the error is returned.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &TaggedDataset,
    val_set: &TaggedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(data_err!("training and validation sets must be nonempty"));
    }
    let expected = &model.input_shape(1, &train_set.sample_shape[1..])[1..];
    if train_set.sample_shape != expected || val_set.sample_shape != expected {
        return Err(data_err!(
            "sample shape {:?} does not fit model input {expected:?}",
            train_set.sample_shape
        ));
    }
    cfg.eval_scheme.mode_for(model)?;
    let mut state = AdamState::new(model.params());
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule_lr(&cfg.lr_schedule, epoch, &vals);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            match train_step(model, &mut state, train_set, batch, lr) {
                Ok(l) => loss_sum += l,
                Err(e) => {
                    *model = best;
                    return Err(e);
                }
            }
            steps += 1;
        }
        let val_acc = evaluate(model, val_set, cfg.eval_scheme, cfg.eval_batch_size)?;
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best = model.clone();
        }
        vals.push(val_acc);
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            val_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} val {:.4} ({} ms)",
            record.train_loss,
            val_acc,
            record.wall_ms
        );
        history.push(record);
        if early_stop_check(&vals, cfg.early_stop_patience).stop {
            stopped_early = true;
            break;
        }
    }
    *model = best;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_acc: best_acc,
        stopped_early,
    })
}

/// Per-epoch history without wall-clock times, so reruns reproduce it
/// byte for byte.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "lr", "train_loss", "val_acc"])
        .map_err(|e| csv_error(path, e))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_acc.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_timing(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "wall_ms"]).map_err(|e| csv_error(path, e))?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.wall_ms.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, Provenance, Sample};
    use crate::models::{build_model, DecoderConfig, ModelConfig, Task};
    use crate::normalization::NormSpec;
    use proptest::prelude::*;

    fn scalar_param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "p".into(),
            value: Tensor::scalar(v),
        }]
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.2, 1e-3] {
            let mut p = scalar_param(1.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, 0.01).unwrap();
            let delta = p[0].value.item() - 1.0;
            let expect = -0.01 * g.abs() / (g.abs() + ADAM_EPSILON) * g.signum();
            assert!((delta - expect).abs() < 1e-15);
            assert_eq!(s.t, 1);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_param(0.7);
        let mut s = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        }
        assert_eq!(p[0].value.item(), 0.7);
    }

    #[test]
    fn two_unit_steps() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.1).unwrap();
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.1).unwrap();
        // With a constant gradient both bias-corrected ratios equal 1.
        let expect = -2.0 * 0.1 / (1.0 + ADAM_EPSILON);
        assert!((p[0].value.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("p")));
    }

    proptest! {
        #[test]
        fn matches_scalar_reference(grads in prop::collection::vec(-5.0f64..5.0, 1..30), lr in 0.0f64..0.1) {
            let mut p = scalar_param(0.3);
            let mut s = AdamState::new(&p);
            let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
            for (i, &g) in grads.iter().enumerate() {
                adam_step(&mut p, &[Tensor::scalar(g)], &mut s, lr).unwrap();
                let t = (i + 1) as i32;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                w -= lr * mh / (vh.sqrt() + 1e-8);
                prop_assert!(s.v[0][0] >= 0.0);
            }
            prop_assert!((p[0].value.item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_schedule_breakpoints() {
        let s = LrSchedule::default();
        assert_eq!(schedule_lr(&s, 0, &[]), 5e-4);
        assert_eq!(schedule_lr(&s, 34, &[]), 5e-4);
        assert_eq!(schedule_lr(&s, 35, &[]), 5e-5);
        assert_eq!(schedule_lr(&s, 49, &[]), 5e-5);
    }

    #[test]
    fn plateau_schedule() {
        let s = LrSchedule::Plateau {
            initial: 1e-3,
            factor: 0.1,
            patience: 5,
        };
        let rising: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        assert_eq!(schedule_lr(&s, 20, &rising), 1e-3);
        let flat = vec![0.5; 6];
        assert_eq!(schedule_lr(&s, 6, &flat), 1e-3 * 0.1);
        // The counter resets after a decay: ten more flat epochs, one more cut.
        let flat = vec![0.5; 11];
        assert!((schedule_lr(&s, 11, &flat) - 1e-5).abs() < 1e-18);
        let flat = vec![0.5; 10];
        assert_eq!(schedule_lr(&s, 10, &flat), 1e-3 * 0.1);
    }

    #[test]
    fn early_stop_rules() {
        let rising = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(early_stop_check(&rising, 3), EarlyStop { stop: false, best_epoch: 4 });
        assert_eq!(early_stop_check(&[0.5; 4], 3), EarlyStop { stop: true, best_epoch: 0 });
        assert_eq!(
            early_stop_check(&[0.5, 0.6, 0.6, 0.6, 0.6], 3),
            EarlyStop { stop: true, best_epoch: 1 }
        );
        assert!(!early_stop_check(&[0.5, 0.6, 0.6, 0.6], 3).stop);
    }

    fn toy_sets() -> (TaggedDataset, TaggedDataset) {
        let mut rng = stream(5, Purpose::Subset, 0);
        let mk = |rng: &mut rand_chacha::ChaCha20Rng, n: usize| {
            let samples = (0..n)
                .map(|i| {
                    let label = i % 2;
                    let sign = if label == 0 { -1.0 } else { 1.0 };
                    let x: f32 = rand::Rng::gen_range(rng, 0.5..2.0);
                    let y: f32 = rand::Rng::gen_range(rng, -1.0..1.0);
                    Sample {
                        data: vec![sign * x + 0.3 * y, y],
                        labels: vec![label],
                        extraneous: 0,
                    }
                })
                .collect();
            TaggedDataset::new(
                DatasetKind::Features,
                vec![2],
                samples,
                2,
                1,
                Provenance {
                    source: "toy".into(),
                    standardized: false,
                },
            )
            .unwrap()
        };
        (mk(&mut rng, 64), mk(&mut rng, 32))
    }

    fn linear_model() -> Model<f64> {
        let mut cfg = ModelConfig::sensor(2, 2, NormSpec::batch_norm());
        cfg.task = Task::Decoder;
        cfg.decoder = DecoderConfig {
            feature_shape: vec![2],
            conv_widths: vec![],
            fc_widths: vec![],
        };
        build_model(&cfg).unwrap()
    }

    fn toy_config(lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 25,
            lr_schedule: LrSchedule::Fixed {
                breakpoints: vec![(0, lr)],
            },
            batch_size: 8,
            early_stop_patience: 0,
            ..Default::default()
        }
    }

    #[test]
    fn linear_toy_converges_within_200_steps() {
        let (tr, va) = toy_sets();
        let mut m = linear_model();
        // 25 epochs × 8 batches = 200 steps.
        train(&mut m, &tr, &va, &toy_config(0.05)).unwrap();
        assert_eq!(evaluate(&m, &tr, EvalScheme::NonAdaptive, 64).unwrap(), 1.0);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (tr, va) = toy_sets();
        let mut m = linear_model();
        let before = m.params().to_vec();
        let out = train(&mut m, &tr, &va, &toy_config(0.0)).unwrap();
        assert_eq!(m.params(), &before[..]);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn training_is_reproducible() {
        let (tr, va) = toy_sets();
        let run = || {
            let mut m = linear_model();
            let out = train(&mut m, &tr, &va, &toy_config(0.01)).unwrap();
            (m, out)
        };
        let (ma, a) = run();
        let (mb, b) = run();
        assert_eq!(ma, mb);
        let key = |h: &[EpochRecord]| h.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>();
        assert_eq!(key(&a.history), key(&b.history));
        let max = a.history.iter().map(|r| r.val_acc).fold(f64::MIN, f64::max);
        assert!((a.best_val_acc - max).abs() < 1e-12);
        assert!((evaluate(&ma, &va, EvalScheme::NonAdaptive, 64).unwrap() - max).abs() < 1e-12);
    }

    #[test]
    fn adaptive_batch_chunks_by_group() {
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample {
                data: vec![0.0],
                labels: vec![0],
                extraneous: if i < 7 { 0 } else { 1 },
            })
            .collect();
        let ds = TaggedDataset::new(
            DatasetKind::Features,
            vec![1],
            samples,
            2,
            2,
            Provenance {
                source: "t".into(),
                standardized: false,
            },
        )
        .unwrap();
        let b = eval_batches(&ds, EvalScheme::AdaptiveBatch, 4);
        assert_eq!(b, vec![vec![0, 1, 2], vec![3, 4, 5, 6], vec![7, 8, 9]]);
        assert_eq!(eval_batches(&ds, EvalScheme::NonAdaptive, 4).len(), 3);
    }

    #[test]
    fn scheme_compatibility() {
        let m = linear_model();
        assert!(EvalScheme::NonAdaptive.mode_for(&m).is_ok());
        assert!(EvalScheme::AdaptiveBatch.mode_for(&m).is_ok());
        assert!(EvalScheme::AdaptiveInstance.mode_for(&m).is_err());
    }
}
