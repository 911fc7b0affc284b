//! Mean-squared-error training with RMSProp, global-norm clipping and
//! validation-based model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamTensors};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, LstmModel};
use crate::model::{init_params, sequence_gradients, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer and loop settings. Field names double as the keys of the
/// training config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many parameter updates, if set.
    pub max_updates: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            clip_norm: 5.0,
            epochs: 100,
            batch_size: 16,
            patience: 10,
            seed: 0,
            shuffle: true,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T: Scalar> {
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new<P: ParamTensors<T>>(params: &P) -> Self {
        Self {
            second_moment: params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `v <- decay v + (1 - decay) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_update<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, v: &mut Tensor<T>, config: &TrainConfig) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != v.shape() {
        return Err(Error::dim(
            "rmsprop_update",
            format!("param {:?}, grad {:?}, state {:?}", param.shape(), grad.shape(), v.shape()),
        ));
    }
    let (lr, rho, eps) = (T::lit(config.learning_rate), T::lit(config.decay), T::lit(config.epsilon));
    let keep = T::one() - rho;
    for ((p, &g), s) in param.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(v.as_mut_slice()) {
        *s = rho * *s + keep * g * g;
        *p = *p - lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> Result<T> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    let limit = T::lit(max_norm);
    if norm > limit {
        grads.scale(limit / norm);
    }
    Ok(norm)
}

/// Applies one optimizer step to every parameter.
pub fn apply_update<T: Scalar, P: ParamTensors<T>>(
    params: &mut P,
    grads: &Gradients<T>,
    state: &mut OptState<T>,
    config: &TrainConfig,
) -> Result<()> {
    for (idx, ((name, p), v)) in params.named_mut().into_iter().zip(&mut state.second_moment).enumerate() {
        let g = grads
            .get(ParamId(idx))
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
        rmsprop_update(p, g, v, config)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sequence squared error over the epoch's updates.
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_rho: Option<f64>,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected parameters.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub updates: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// The report with timing zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Loss and averaged gradients of a batch. Per-sequence work may run in
/// parallel; the reduction follows batch order.
pub fn batch_gradients<T: Scalar>(
    dataset: &Dataset<T>,
    batch: &[usize],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(f64, Gradients<T>)> {
    let parts: Vec<(T, Gradients<T>)> = batch
        .par_iter()
        .map(|&i| sequence_gradients(&dataset.sequences[i], params, config).map(|(l, g, _)| (l, g)))
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (first_loss, mut total) = iter.next().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut loss = first_loss.as_f64();
    for (l, g) in iter {
        loss += l.as_f64();
        total.accumulate(&g)?;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(T::lit(inv));
    Ok((loss * inv, total))
}

/// Trains from a seeded initialization. See [`train_from`].
pub fn train<T: Scalar>(
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    let params = init_params(model_config, train_config.seed)?;
    train_from(params, train_set, val_set, model_config, train_config, |_| {})
}

/// Runs epochs of shuffled mini-batches until `epochs`, `max_updates` or
/// early stopping ends training, and returns the parameters of the epoch
/// with the lowest validation MSE.
pub fn train_from<T: Scalar>(
    mut params: ModelParams<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainReport)> {
    train_config.validate()?;
    model_config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and val splits".into()));
    }
    let start = Instant::now();
    let mut state = OptState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mse: f64::INFINITY,
        updates: 0,
        wall_time_secs: 0.0,
    };
    let mut best = params.clone();
    let mut since_best = 0;
    let update_cap = train_config.max_updates.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..train_config.epochs {
        if report.updates >= update_cap {
            break;
        }
        if train_config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(train_config.batch_size) {
            if report.updates >= update_cap {
                break;
            }
            let (loss, mut grads) = batch_gradients(train_set, batch, &params, model_config)?;
            if !loss.is_finite() || !grads.iter().all(|(_, g)| g.is_finite()) {
                report.wall_time_secs = start.elapsed().as_secs_f64();
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            clip_gradients(&mut grads, train_config.clip_norm)?;
            apply_update(&mut params, &grads, &mut state, train_config)?;
            report.updates += 1;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            break 'epochs;
        }
        let model = LstmModel {
            config: model_config.clone(),
            params,
        };
        let val = evaluate(&model, val_set, "val", "training", train_config.seed)?;
        params = model.params;
        if !val.mse.is_finite() {
            report.wall_time_secs = start.elapsed().as_secs_f64();
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_mse: val.mse,
            val_rho: val.rho,
            updates: report.updates,
        };
        on_epoch(&record);
        report.epochs.push(record);
        if val.mse < report.best_val_mse {
            report.best_val_mse = val.mse;
            report.best_epoch = report.epochs.len() - 1;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if train_config.patience > 0 && since_best >= train_config.patience {
                break;
            }
        }
    }
    if report.epochs.is_empty() {
        return Err(Error::InvalidArgument("training ran no epochs".into()));
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut v = Tensor::vector(vec![0.5, 0.25]).unwrap();
        rmsprop_update(&mut p, &g, &mut v, &cfg(1e-3)).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
        assert_eq!(v.as_slice(), &[0.45, 0.225]);
    }

    #[test]
    fn first_step_from_zero_state() {
        let mut p = Tensor::vector(vec![0.0f64]).unwrap();
        let g = Tensor::vector(vec![1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        rmsprop_update(&mut p, &g, &mut v, &cfg(1e-3)).unwrap();
        assert_abs_diff_eq!(v.item(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(-p.item(), 1e-3 / (0.1f64.sqrt() + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(-p.item(), 3.1623e-3, epsilon = 1e-7);
    }

    #[test]
    fn state_scales_quadratically() {
        for c in [0.5f64, 2.0, -3.0] {
            let mut p = Tensor::vector(vec![0.0f64]).unwrap();
            let mut v = Tensor::vector(vec![0.0]).unwrap();
            rmsprop_update(&mut p, &Tensor::vector(vec![c * 0.7]).unwrap(), &mut v, &cfg(1e-3)).unwrap();
            assert_abs_diff_eq!(v.item(), c * c * 0.1 * 0.49, epsilon = 1e-15);
        }
    }

    #[test]
    fn first_step_bounded() {
        let config = cfg(1e-2);
        let bound = config.learning_rate / (1.0 - config.decay).sqrt();
        for g in [1e-6f64, 0.3, 5.0, -1e4] {
            let mut p = Tensor::vector(vec![0.0f64]).unwrap();
            let mut v = Tensor::zeros(&[1]);
            rmsprop_update(&mut p, &Tensor::vector(vec![g]).unwrap(), &mut v, &config).unwrap();
            assert!(p.item().abs() <= bound);
        }
    }

    #[test]
    fn update_rejects_shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(rmsprop_update(&mut p, &Tensor::zeros(&[3]), &mut v, &cfg(1e-3)).is_err());
    }

    fn grads_with(values: &[f64]) -> Gradients<f64> {
        use crate::autodiff::Tape;
        let t = Tensor::vector(values.to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &t);
        // loss = 0.5 |t|^2 so the gradient equals t
        let sq = tape.dot(v, v).unwrap();
        let half = tape.input(Tensor::scalar(0.5).unwrap());
        let loss = tape.hadamard(sq, half).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn clipping() {
        let mut g = grads_with(&[6.0, 8.0]);
        let norm = clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(norm, 10.0);
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[3.0, 4.0]);

        let mut g = grads_with(&[1.8, 2.4]);
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[1.8, 2.4]);
        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    #[test]
    fn config_file_keys() {
        let c: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.01, "epochs": 3}"#).unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.batch_size, 16);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.01}"#).is_err());
        assert!(TrainConfig { decay: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    use crate::data::VolumeSequence;
    use crate::model::{FusionMode, HardSelection};
    use rand::Rng;

    fn toy_set(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = (0..n)
            .map(|i| {
                let t = rng.random_range(3..7);
                let steps = (0..t)
                    .map(|_| [3usize, 2, 2].map(|d| Some((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())))
                    .collect();
                VolumeSequence::from_steps(format!("s{i}"), [3, 2, 2], steps, rng.random_range(-1.0..1.0)).unwrap()
            })
            .collect();
        Dataset::new(seqs).unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig::small([3, 2, 2], 4, 3, 4)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = toy_set(8, 1);
        let config = small_model();
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let init: ModelParams<f64> = init_params(&config, tc.seed).unwrap();
        let (params, report) = train(&data, &data, &config, &tc).unwrap();
        assert_eq!(params, init);
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(report.updates, 9);
        assert!(report.best_epoch < report.epochs.len());
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let data = toy_set(10, 2);
        let config = small_model();
        for shuffle in [true, false] {
            let tc = TrainConfig {
                epochs: 3,
                batch_size: 4,
                shuffle,
                seed: 5,
                ..TrainConfig::default()
            };
            let (pa, ra) = train(&data, &data, &config, &tc).unwrap();
            let (pb, rb) = train(&data, &data, &config, &tc).unwrap();
            assert_eq!(pa, pb);
            assert_eq!(ra.without_timing(), rb.without_timing());
        }
    }

    #[test]
    fn early_stopping_and_update_cap() {
        let data = toy_set(6, 3);
        let config = small_model();
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 2,
            max_updates: Some(7),
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &data, &config, &tc).unwrap();
        assert_eq!(report.updates, 7);
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 50,
            patience: 2,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &data, &config, &tc).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = toy_set(4, 4);
        data.sequences[0].label = f64::NAN;
        let tc = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        match train(&data, &data, &small_model(), &tc) {
            Err(Error::Diverged { epoch, report }) => {
                assert_eq!(epoch, 0);
                assert_eq!(report.updates, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        let empty = Dataset::<f64>::new(vec![]).unwrap();
        assert!(train(&empty, &data, &small_model(), &tc).is_err());
    }

    #[test]
    fn single_sequence_loss_settles() {
        for (fusion, hard) in [
            (FusionMode::Soft, HardSelection::StraightThrough),
            (FusionMode::Hard, HardSelection::Surrogate),
            (FusionMode::Hard, HardSelection::StraightThrough),
        ] {
            let data = toy_set(1, 6);
            let mut config = small_model().with_fusion(fusion);
            config.hard_selection = hard;
            let tc = TrainConfig {
                epochs: 60,
                patience: 0,
                ..TrainConfig::default()
            };
            let (_, report) = train(&data, &data, &config, &tc).unwrap();
            let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
            for w in losses[10..].windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "{fusion:?}/{hard:?}: {} -> {}", w[0], w[1]);
            }
        }
    }
}
