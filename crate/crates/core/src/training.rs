//! Relative-L2 objective, AdamW, cosine schedule and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::geometry::{knn_indices_accelerated, GeometryError, KnnIndex};
use crate::model::{forward, ModelError, OperatorModel};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset does not fit the model: {0}")]
    Mismatch(String),
    #[error("target field has zero norm")]
    ZeroTarget,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `‖pred - target‖² / ‖target‖²`
    SquaredRatio,
    /// `‖pred - target‖ / ‖target‖`
    RootRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            loss: LossVariant::SquaredRatio,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) || !positive(self.lr_min) || self.lr_min > self.lr {
            return fail("learning rates must be positive with lr_min <= lr");
        }
        if !positive(self.clip_norm) || !positive(self.adam_eps) {
            return fail("clip norm and adam epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Relative L2 discrepancy between a prediction on the tape and a fixed
/// target of the same shape.
pub fn relative_l2_loss<'t>(pred: &Var<'t>, target: &Tensor, variant: LossVariant) -> Result<Var<'t>, TrainError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "relative_l2_loss",
            lhs: pred.shape(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let norm_sq: f64 = target.data().iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return Err(TrainError::ZeroTarget);
    }
    let diff = pred.sub(&pred.tape().constant(target.clone()))?;
    Ok(match variant {
        LossVariant::SquaredRatio => diff.mul(&diff)?.sum().scale(1.0 / norm_sq)?,
        LossVariant::RootRatio => diff
            .reshape(&[1, target.numel()])?
            .l2_lastdim()?
            .sum()
            .scale(1.0 / norm_sq.sqrt())?,
    })
}

/// `‖pred - target‖ / ‖target‖` on plain tensors.
pub fn relative_l2(pred: &Tensor, target: &Tensor) -> Result<f64, TrainError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "relative_l2",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let norm: f64 = target.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(TrainError::ZeroTarget);
    }
    let diff: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update. Weight decay is decoupled from the moments and applied
/// only where `decay[i]` is set.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(TrainError::Mismatch(format!(
            "{n} parameters but {} gradients, {} decay flags, {} moment slots",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *x -= cfg.lr * (update + wd * *x);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Cosine decay from `lr` at step 0 towards `lr_min` at `total_steps`.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total_steps: usize) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

fn check_fit(model: &OperatorModel, ds: &Dataset) -> Result<KnnIndex, TrainError> {
    let (cfg, man) = (&model.config, &ds.manifest);
    if cfg.in_channels != man.in_channels || cfg.coord_dim != man.coord_dim || cfg.out_channels != man.out_channels {
        return Err(TrainError::Mismatch(format!(
            "model expects (C_f, C_s, C_u) = ({}, {}, {}), dataset has ({}, {}, {})",
            cfg.in_channels, cfg.coord_dim, cfg.out_channels, man.in_channels, man.coord_dim, man.out_channels
        )));
    }
    if cfg.k > ds.num_points() {
        return Err(TrainError::Mismatch(format!(
            "patch size {} exceeds {} points",
            cfg.k,
            ds.num_points()
        )));
    }
    Ok(knn_indices_accelerated(&ds.geometry, cfg.k)?)
}

/// De-normalized prediction for sample `i`.
pub fn predict_sample(model: &OperatorModel, ds: &Dataset, knn: &KnnIndex, i: usize) -> Result<Tensor, TrainError> {
    let pred = model.predict(&ds.normalized_input(i), &ds.geometry, knn)?;
    Ok(ds.manifest.output_stats.denormalize(&pred))
}

/// Root-ratio relative L2 of de-normalized predictions on `indices`.
pub fn evaluate(model: &OperatorModel, ds: &Dataset, indices: &[usize]) -> Result<EvalMetrics, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty split".into()));
    }
    let knn = check_fit(model, ds)?;
    evaluate_with(model, ds, &knn, indices)
}

fn evaluate_with(
    model: &OperatorModel,
    ds: &Dataset,
    knn: &KnnIndex,
    indices: &[usize],
) -> Result<EvalMetrics, TrainError> {
    let per_sample = indices
        .iter()
        .map(|&i| relative_l2(&predict_sample(model, ds, knn, i)?, &ds.output(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(EvalMetrics { mean, per_sample })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_rel_l2: f64,
    pub mask_fractions: Vec<f64>,
    pub epoch_seconds: f64,
}

/// Initial metric, initial mask fractions, and `(epoch, train loss, test
/// metric, mask fractions)` per epoch.
pub type DeterministicReport = (f64, Vec<f64>, Vec<(usize, f64, f64, Vec<f64>)>);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Test metric of the model before any update.
    pub initial_test_rel_l2: f64,
    /// `σ(s)` per layer before any update.
    pub initial_mask_fractions: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// The report with wall times omitted, for reproducibility checks.
    pub fn deterministic_part(&self) -> DeterministicReport {
        let rows = self
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.test_rel_l2, e.mask_fractions.clone()))
            .collect();
        (self.initial_test_rel_l2, self.initial_mask_fractions.clone(), rows)
    }

    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .min_by(|a, b| a.test_rel_l2.total_cmp(&b.test_rel_l2))
    }

    pub fn to_csv(&self) -> String {
        let layers = self.epochs.first().map_or(0, |e| e.mask_fractions.len());
        let mut out = String::from("epoch,train_loss,test_rel_l2");
        for l in 1..=layers {
            let _ = write!(out, ",sigma_s_{l}");
        }
        out.push_str(",epoch_seconds\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{:e},{:e}", e.epoch, e.train_loss, e.test_rel_l2);
            for s in &e.mask_fractions {
                let _ = write!(out, ",{s:e}");
            }
            let _ = writeln!(out, ",{:.6}", e.epoch_seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters from the epoch with the lowest test error.
    pub best: OperatorModel,
}

/// Trains `model` in place; `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut OperatorModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let knn = check_fit(model, ds)?;
    let train_idx = ds.manifest.train_indices.clone();
    let test_idx = ds.manifest.test_indices.clone();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(TrainError::Config("train and test splits must both be non-empty".into()));
    }

    let out_stats = &ds.manifest.output_stats;
    let out_std = Tensor::new(&[out_stats.std.len()], out_stats.std.clone())?;
    let out_mean = Tensor::new(&[out_stats.mean.len()], out_stats.mean.clone())?;
    let decay: Vec<bool> = model.named_params().iter().map(|(_, t)| t.rank() >= 2).collect();
    let mut state = AdamState::new(model.named_params().iter().map(|(_, t)| t.shape()));
    let adam = cfg.adam();

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx;
    let mut report = TrainReport {
        initial_test_rel_l2: evaluate_with(model, ds, &knn, &test_idx)?.mean,
        initial_mask_fractions: model.mask_trajectory(),
        epochs: Vec::new(),
    };
    let mut best = model.clone();
    let mut best_metric = f64::INFINITY;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let f = tape.constant(ds.normalized_input(i));
                let pred = forward(&model.config, &bound, &f, &ds.geometry, &knn)?
                    .mul(&tape.constant(out_std.clone()))?
                    .add(&tape.constant(out_mean.clone()))?;
                let loss = relative_l2_loss(&pred, &ds.output(i), cfg.loss)?;
                let value = loss.value().data()[0];
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step, loss: value });
                }
                loss_sum += value;
                let g = tape.backward(&loss)?;
                let sample_grads = bound.vars().into_iter().map(|v| g.get(&v));
                match grads.as_mut() {
                    None => grads = Some(sample_grads.collect()),
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(sample_grads) {
                            a.data_mut().iter_mut().zip(s.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            clip_grad_norm(&mut grads, cfg.clip_norm);
            let step_cfg = AdamConfig {
                lr: cosine_lr(cfg.lr, cfg.lr_min, step, total_steps),
                ..adam
            };
            adam_step(&mut model.params_mut(), &grads, &decay, &mut state, &step_cfg)?;
            step += 1;
        }
        let epoch_seconds = started.elapsed().as_secs_f64();
        let metric = evaluate_with(model, ds, &knn, &test_idx)?.mean;
        if metric < best_metric {
            best_metric = metric;
            best = model.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            test_rel_l2: metric,
            mask_fractions: model.mask_trajectory(),
            epoch_seconds,
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(TrainOutcome { report, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_value(pred: &[f64], target: &[f64], variant: LossVariant) -> f64 {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(&[pred.len(), 1], pred.to_vec()).unwrap());
        let t = Tensor::new(&[target.len(), 1], target.to_vec()).unwrap();
        relative_l2_loss(&p, &t, variant).unwrap().value().data()[0]
    }

    #[test]
    fn loss_hand_values() {
        use LossVariant::*;
        assert_eq!(loss_value(&[1.0, 2.0], &[1.0, 2.0], SquaredRatio), 0.0);
        assert_eq!(loss_value(&[0.0, 0.0], &[1.0, 2.0], RootRatio), 1.0);
        assert!((loss_value(&[0.0, 0.0], &[1.0, 2.0], SquaredRatio) - 1.0).abs() < 1e-15);
        assert!((loss_value(&[3.0, 4.0], &[3.0, 0.0], RootRatio) - 4.0 / 3.0).abs() < 1e-15);
        assert!((loss_value(&[3.0, 4.0], &[3.0, 0.0], SquaredRatio) - 16.0 / 9.0).abs() < 1e-15);
        let tape = Tape::new();
        let p = tape.constant(Tensor::ones(&[2, 1]));
        assert!(matches!(
            relative_l2_loss(&p, &Tensor::zeros(&[2, 1]), LossVariant::RootRatio),
            Err(TrainError::ZeroTarget)
        ));
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = Tensor::full(&[2], 1.0);
        let mut state = AdamState::new([p.shape()]);
        adam_step(&mut [&mut p], &[Tensor::ones(&[2])], &[true], &mut state, &cfg).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!(p.data().iter().all(|&v| (v - expected).abs() < 1e-15));

        let mut q = Tensor::full(&[3], 2.5);
        let mut state = AdamState::new([q.shape()]);
        for _ in 0..3 {
            adam_step(&mut [&mut q], &[Tensor::zeros(&[3])], &[true], &mut state, &cfg).unwrap();
        }
        assert_eq!(q.data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn decoupled_decay_only_where_flagged() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let (mut a, mut b) = (Tensor::full(&[1], 2.0), Tensor::full(&[1], 2.0));
        let mut state = AdamState::new([a.shape(), b.shape()]);
        let zero = [Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        adam_step(&mut [&mut a, &mut b], &zero, &[true, false], &mut state, &cfg).unwrap();
        assert!((a.data()[0] - 1.9).abs() < 1e-15);
        assert_eq!(b.data()[0], 2.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 34f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-12);
        let mut small = vec![Tensor::full(&[1], 0.5)];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-5, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 100, 100) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 1e-5, 50, 100) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn csv_layout() {
        let report = TrainReport {
            initial_test_rel_l2: 1.0,
            initial_mask_fractions: vec![0.5, 0.5],
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                test_rel_l2: 0.25,
                mask_fractions: vec![0.5, 0.5],
                epoch_seconds: 1.0,
            }],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,test_rel_l2,sigma_s_1,sigma_s_2,epoch_seconds"
        );
        assert_eq!(lines.next().unwrap(), "1,5e-1,2.5e-1,5e-1,5e-1,1.000000");
    }
}
