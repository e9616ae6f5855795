//! Training: chronological splits, MSE loss, Adam with a plateau
//! learning-rate schedule, and early stopping on validation MSE.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{heart_forward, HeartModel, ModelParams};
use crate::tensor::{component_seed, Graph, Mode, Rng, Tensor};

fn default_lr() -> f64 {
    1e-3
}

fn default_decay() -> f64 {
    0.5
}

fn default_patience_decay() -> usize {
    5
}

fn default_patience_stop() -> usize {
    15
}

fn default_max_epochs() -> usize {
    500
}

fn default_batch() -> usize {
    32
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

/// Optimization protocol. Accepted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub lr_initial: f64,
    /// Multiplier applied to the learning rate after `patience_decay`
    /// epochs without validation improvement.
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_patience_decay")]
    pub patience_decay: usize,
    /// Epochs without improvement before training stops.
    #[serde(default = "default_patience_stop")]
    pub patience_stop: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl TrainingConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            lr_initial: default_lr(),
            lr_decay_factor: default_decay(),
            patience_decay: default_patience_decay(),
            patience_stop: default_patience_stop(),
            max_epochs: default_max_epochs(),
            batch_size: default_batch(),
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_initial <= 0.0 {
            return Err(Error::Config("lr_initial must be positive".into()));
        }
        if self.lr_decay_factor <= 0.0 || self.lr_decay_factor >= 1.0 {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        if self.patience_decay < 1 || self.patience_stop < self.patience_decay {
            return Err(Error::Config(format!(
                "need patience_stop >= patience_decay >= 1, got {} and {}",
                self.patience_stop, self.patience_decay
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Result of a training run. The model passed to [`train`] is left at
/// the best-validation checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_validation_mse: f64,
    /// Zero-based index into `epochs`.
    pub best_epoch: usize,
}

impl TrainingHistory {
    /// Emits `epoch,train_mse,val_mse,lr` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_mse", "val_mse", "lr"])
            .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
        for (i, e) in self.epochs.iter().enumerate() {
            w.write_record([
                i.to_string(),
                format!("{}", e.train_mse),
                format!("{}", e.val_mse),
                format!("{}", e.lr),
            ])
            .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
        }
        w.flush()
            .map_err(|e| Error::Data(format!("csv flush error: {e}")))?;
        Ok(())
    }
}

/// Splits ordered samples into the first `floor(fraction·N)` for
/// training and the remainder for validation, preserving order.
pub fn split_chronological<T>(samples: &[T], train_fraction: f64) -> Result<(&[T], &[T])> {
    if train_fraction <= 0.0 || train_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let cut = (train_fraction * samples.len() as f64).floor() as usize;
    let (train, validation) = samples.split_at(cut);
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data(format!(
            "split of {} samples at fraction {train_fraction} leaves an empty side",
            samples.len()
        )));
    }
    Ok((train, validation))
}

/// Mean squared error over all elements of two same-shaped tensors.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Adam optimizer state: one pair of moment tensors per parameter,
/// keyed by the parameter's stable name.
#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// L2 norm of the first moment of a parameter, if tracked.
    pub fn first_moment_norm(&self, name: &str) -> Option<f64> {
        self.moments
            .get(name)
            .map(|(m, _)| m.data().iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// One bias-corrected Adam update over every parameter named in
/// `grads`. Parameters without a gradient entry are untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams<Tensor>,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    params.for_each_mut(&mut |name, p| {
        let Some(g) = grads.get(name) else {
            return;
        };
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
}

/// Mean validation MSE in eval mode (dropout off), computed in chunks
/// so parameters are bound once per chunk.
pub fn evaluate(model: &HeartModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty sample set".into()));
    }
    let mut rng = Rng::seed(0); // eval mode draws nothing
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let mut g = Graph::new();
        let bound = model.params.bind_frozen(&mut g);
        for sample in chunk {
            let x = g.constant(sample.input.clone());
            let out = heart_forward(&mut g, x, &model.config, &bound, &mut rng, Mode::Eval)?;
            total += mse(g.value(out), &sample.target)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Runs mini-batch Adam with the plateau schedule and early stopping,
/// returning the history and leaving `model` at the best-validation
/// parameters.
pub fn train(
    model: &mut HeartModel,
    train_set: &[Sample],
    validation_set: &[Sample],
    config: &TrainingConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::Data("training requires non-empty splits".into()));
    }
    let expected = [
        model.config.stations,
        model.config.features,
        model.config.t_in,
    ];
    if train_set[0].input.shape() != expected {
        return Err(Error::Shape(format!(
            "samples have shape {:?}, model expects {expected:?}",
            train_set[0].input.shape()
        )));
    }

    let mut rng = Rng::seed(component_seed(config.seed, "train"));
    let mut adam = AdamState::new();
    let mut lr = config.lr_initial;
    let mut best_mse = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.snapshot();
    let mut since_improve = 0usize;
    let mut epochs = Vec::new();

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.max_epochs {
        rng.shuffle(&mut indices);
        let mut loss_acc = 0.0;
        for batch in indices.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut names = Vec::new();
            let bound = model.params.bind(&mut g, &mut names);
            let mut sample_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &train_set[i];
                let x = g.constant(sample.input.clone());
                let out = heart_forward(&mut g, x, &model.config, &bound, &mut rng, Mode::Train)?;
                let target = g.constant(sample.target.clone());
                let diff = g.sub(out, target)?;
                let sq = g.square(diff);
                sample_losses.push(g.mean_all(sq));
            }
            let batch_loss = g.mean_of(&sample_losses)?;
            let loss_val = g.value(batch_loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss at epoch {epoch} (lr {lr:e})"
                )));
            }
            loss_acc += loss_val * batch.len() as f64;
            let grads = g.backward(batch_loss)?;
            let grad_map: BTreeMap<String, Tensor> = names
                .iter()
                .filter_map(|(name, var)| grads.get(*var).map(|t| (name.clone(), t.clone())))
                .collect();
            adam_step(
                &mut adam,
                &mut model.params,
                &grad_map,
                lr,
                config.beta1,
                config.beta2,
                config.eps,
            );
        }
        let train_mse = loss_acc / train_set.len() as f64;
        let val_mse = evaluate(model, validation_set)?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        epochs.push(EpochStats { train_mse, val_mse, lr });

        if val_mse < best_mse {
            best_mse = val_mse;
            best_epoch = epoch;
            best_snapshot = model.snapshot();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve % config.patience_decay == 0 {
                lr *= config.lr_decay_factor;
            }
            if since_improve >= config.patience_stop {
                break;
            }
        }
    }

    model.restore(&best_snapshot)?;
    Ok(TrainingHistory {
        epochs,
        best_validation_mse: best_mse,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, AttentionVariant};
    use crate::model::ModelConfig;

    fn tiny_model(variant: AttentionVariant, seed: u64) -> HeartModel {
        let attention = if variant == AttentionVariant::NoAttention {
            AttentionConfig::none()
        } else {
            AttentionConfig::new(variant, 1, 1)
        };
        HeartModel::new(
            ModelConfig {
                stations: 2,
                features: 3,
                t_in: 8,
                t_out: 4,
                latent_features: 4,
                conv_lag: 2,
                encoder_dropout: 0.0,
                attention,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = Rng::seed(seed);
        (0..n)
            .map(|i| {
                let input: Vec<f64> = (0..2 * 3 * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                let target: Vec<f64> = (0..2 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                Sample {
                    input: Tensor::new(&[2, 3, 8], input).unwrap(),
                    target: Tensor::new(&[2, 4], target).unwrap(),
                    start_hour: i as i64,
                }
            })
            .collect()
    }

    #[test]
    fn split_ninety_ten() {
        let xs: Vec<usize> = (0..100).collect();
        let (train, val) = split_chronological(&xs, 0.9).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
        assert_eq!(train[89], 89);
        assert_eq!(val[0], 90);
    }

    #[test]
    fn split_even_and_floor_rule() {
        let xs: Vec<usize> = (0..10).collect();
        let (train, val) = split_chronological(&xs, 0.5).unwrap();
        assert_eq!((train.len(), val.len()), (5, 5));
        assert!(train.windows(2).all(|w| w[0] < w[1]));

        let xs: Vec<usize> = (0..9).collect();
        let (train, val) = split_chronological(&xs, 0.9).unwrap();
        assert_eq!((train.len(), val.len()), (8, 1));
    }

    #[test]
    fn split_rejects_empty_side() {
        let xs: Vec<usize> = vec![1];
        assert!(split_chronological(&xs, 0.9).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::vector(&[1.0, 3.0]);
        let b = Tensor::vector(&[0.0, 1.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 2.5);
        // flat accumulation oracle on random tensors
        let mut rng = Rng::seed(9);
        let xs: Vec<f64> = (0..24).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let ys: Vec<f64> = (0..24).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mut acc = 0.0;
        for i in 0..24 {
            acc += (xs[i] - ys[i]) * (xs[i] - ys[i]);
        }
        let x = Tensor::new(&[2, 3, 4], xs).unwrap();
        let y = Tensor::new(&[2, 3, 4], ys).unwrap();
        assert!((mse(&x, &y).unwrap() - acc / 24.0).abs() < 1e-12);
        // shape mismatch
        assert!(mse(&a, &x).is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_fresh_params() {
        let mut model = tiny_model(AttentionVariant::NoAttention, 1);
        let before = model.snapshot();
        let mut grads = BTreeMap::new();
        model.params.for_each(&mut |name, t| {
            grads.insert(name.to_string(), Tensor::zeros(t.shape()));
        });
        let mut state = AdamState::new();
        adam_step(&mut state, &mut model.params, &grads, 1e-3, 0.9, 0.999, 1e-8);
        for (name, t) in model.snapshot() {
            assert_eq!(t.data(), before[&name].data(), "{name}");
        }
    }

    #[test]
    fn adam_moments_decay_under_zero_grads() {
        let mut model = tiny_model(AttentionVariant::NoAttention, 2);
        let mut state = AdamState::new();
        let mut grads = BTreeMap::new();
        model.params.for_each(&mut |name, t| {
            grads.insert(name.to_string(), Tensor::full(t.shape(), 0.5));
        });
        adam_step(&mut state, &mut model.params, &grads, 1e-3, 0.9, 0.999, 1e-8);
        let m1 = state.first_moment_norm("decoder.w").unwrap();
        let mut zeros = BTreeMap::new();
        model.params.for_each(&mut |name, t| {
            zeros.insert(name.to_string(), Tensor::zeros(t.shape()));
        });
        adam_step(&mut state, &mut model.params, &zeros, 1e-3, 0.9, 0.999, 1e-8);
        let m2 = state.first_moment_norm("decoder.w").unwrap();
        assert!(m2 < m1, "first moment should decay: {m1} -> {m2}");
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // bias correction makes m_hat = g and v_hat = g² on step one,
        // so the update is -lr·g/(|g| + eps)
        let mut model = tiny_model(AttentionVariant::NoAttention, 3);
        let before = model.params.dec_b.data()[0];
        let mut grads = BTreeMap::new();
        grads.insert("decoder.b".to_string(), Tensor::vector(&[2.0]));
        let mut state = AdamState::new();
        adam_step(&mut state, &mut model.params, &grads, 1e-3, 0.9, 0.999, 1e-8);
        let delta = model.params.dec_b.data()[0] - before;
        let expect = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((delta - expect).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // minimize x² from x₀ = 1 with lr = 0.05
        let mut x = 1.0_f64;
        let mut m = 0.0;
        let mut v = 0.0;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        for t in 1..=500 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!(x.abs() < 0.01, "x = {x}");
    }

    #[test]
    fn overfits_eight_identical_samples() {
        let mut model = tiny_model(AttentionVariant::Att, 5);
        let one = tiny_samples(1, 6).remove(0);
        let train_set: Vec<Sample> = (0..8).map(|_| one.clone()).collect();
        let val_set = train_set.clone();
        let mut config = TrainingConfig::with_seed(7);
        config.max_epochs = 200;
        config.patience_stop = 200;
        config.patience_decay = 200;
        config.lr_initial = 1e-2;
        config.batch_size = 8;
        let initial = evaluate(&model, &train_set).unwrap();
        let history = train(&mut model, &train_set, &val_set, &config).unwrap();
        let last = history.epochs.last().unwrap().train_mse;
        assert!(
            last < 1e-3 * initial,
            "train mse {last} vs initial {initial}"
        );
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let run = || {
            let mut model = tiny_model(AttentionVariant::MAtt, 11);
            let samples = tiny_samples(24, 12);
            let (train_set, val_set) = split_chronological(&samples, 0.75).unwrap();
            let mut config = TrainingConfig::with_seed(13);
            config.max_epochs = 5;
            config.batch_size = 8;
            train(&mut model, train_set, val_set, &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn stops_after_patience_when_validation_is_flat() {
        // constant data: after the first epoch the validation MSE
        // cannot improve, so training runs 1 + patience_stop epochs
        let mut model = tiny_model(AttentionVariant::NoAttention, 21);
        // zero inputs and targets make every epoch identical
        let zero = Sample {
            input: Tensor::zeros(&[2, 3, 8]),
            target: Tensor::zeros(&[2, 4]),
            start_hour: 0,
        };
        let train_set: Vec<Sample> = (0..4).map(|_| zero.clone()).collect();
        let val_set = train_set.clone();
        let mut config = TrainingConfig::with_seed(1);
        config.max_epochs = 50;
        config.patience_decay = 1;
        config.patience_stop = 1;
        config.lr_initial = 0.0_f64.max(1e-12); // keep parameters frozen
        let history = train(&mut model, &train_set, &val_set, &config).unwrap();
        assert_eq!(history.epochs.len(), 2);
        assert_eq!(history.best_epoch, 0);
    }

    #[test]
    fn history_invariants_hold() {
        let mut model = tiny_model(AttentionVariant::NoAttention, 31);
        let samples = tiny_samples(20, 32);
        let (train_set, val_set) = split_chronological(&samples, 0.8).unwrap();
        let mut config = TrainingConfig::with_seed(33);
        config.max_epochs = 8;
        config.patience_decay = 2;
        config.patience_stop = 4;
        let history = train(&mut model, train_set, val_set, &config).unwrap();
        // best is the minimum of the series
        let min = history
            .epochs
            .iter()
            .map(|e| e.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(history.best_validation_mse, min);
        assert_eq!(
            history.epochs[history.best_epoch].val_mse,
            history.best_validation_mse
        );
        // learning rate never increases
        assert!(history.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
        // restored model reproduces the best validation MSE
        let val = evaluate(&model, val_set).unwrap();
        assert!((val - history.best_validation_mse).abs() < 1e-12);
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let history = TrainingHistory {
            epochs: vec![EpochStats { train_mse: 1.0, val_mse: 2.0, lr: 0.001 }],
            best_validation_mse: 2.0,
            best_epoch: 0,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        history.write_csv(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("epoch,train_mse,val_mse,lr\n"));
        assert!(text.contains("0,1,2,0.001"));
    }

    #[test]
    fn reports_divergence_as_error() {
        let mut model = tiny_model(AttentionVariant::NoAttention, 41);
        let samples = tiny_samples(8, 42);
        let (train_set, val_set) = split_chronological(&samples, 0.5).unwrap();
        let mut config = TrainingConfig::with_seed(43);
        config.lr_initial = 1e200; // overflows the forward pass after one step
        config.max_epochs = 50;
        let err = train(&mut model, train_set, val_set, &config);
        assert!(matches!(err, Err(Error::Diverged(_))));
    }
}
