//! Multi-task optimization with Adam and a plateau learning-rate schedule.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, VideoSample};
use crate::error::{Error, Result};
use crate::model::{LossTerms, LossWeights, Model};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `λ₁..λ₄`
    pub lambda: [f64; 4],
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Relative improvement below which an epoch counts as a plateau.
    pub plateau_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: LossWeights::default().0,
            learning_rate: 1e-4,
            plateau_patience: 5,
            plateau_factor: 0.1,
            plateau_epsilon: 1e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {:?}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must lie in (0, 1), got {}", self.plateau_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights(self.lambda)
    }
}

/// Adam moments, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Array2<T>> = store.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Array2<T>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::from_f64_lossy(lr * c2.sqrt() / c1);
        let eps = T::from_f64_lossy(self.eps * c2.sqrt());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() + eps);
            });
        }
    }
}

/// Mean of each loss term over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermMeans {
    pub class: f64,
    pub reg: f64,
    pub align: f64,
    pub boundary: f64,
    pub total: f64,
}

impl TermMeans {
    fn accumulate(&mut self, v: [f64; 5], weight: f64) {
        self.class += weight * v[0];
        self.reg += weight * v[1];
        self.align += weight * v[2];
        self.boundary += weight * v[3];
        self.total += weight * v[4];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: TermMeans,
    pub val: Option<TermMeans>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub learning_rate: f64,
    pub best_monitor: f64,
    pub bad_epochs: usize,
    pub adam: Adam<T>,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            learning_rate: config.learning_rate,
            best_monitor: f64::INFINITY,
            bad_epochs: 0,
            adam: Adam::new(store),
        }
    }

    /// Plateau rule on the monitored loss.
    fn observe(&mut self, monitor: f64, config: &TrainConfig) {
        if monitor < self.best_monitor * (1.0 - config.plateau_epsilon) || !self.best_monitor.is_finite() {
            self.best_monitor = monitor;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= config.plateau_patience {
                self.learning_rate *= config.plateau_factor;
                self.bad_epochs = 0;
                log::info!("loss plateau: learning rate now {:.3e}", self.learning_rate);
            }
        }
    }
}

fn term_values<T: Real>(ctx: &Ctx<'_, T>, terms: &LossTerms) -> [f64; 5] {
    terms.all().map(|v| ctx.tape.scalar(v).to_f64_lossy())
}

fn check_finite(values: [f64; 5], epoch: usize, batch: usize) -> Result<()> {
    for (v, name) in values.iter().zip(LossTerms::NAMES) {
        if !v.is_finite() {
            return Err(Error::Divergence { term: name, epoch, batch });
        }
    }
    Ok(())
}

/// Batch-weighted mean losses without updating parameters.
pub fn evaluate_loss<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[VideoSample],
    config: &TrainConfig,
) -> Result<TermMeans> {
    let mut means = TermMeans::default();
    let n = samples.len() as f64;
    for chunk in samples.chunks(config.batch_size) {
        let refs: Vec<&VideoSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let mut ctx = Ctx::new(store);
        let terms = model.loss(&mut ctx, &batch, config.loss_weights())?;
        means.accumulate(term_values(&ctx, &terms), chunk.len() as f64 / n);
    }
    Ok(means)
}

/// Deterministic sample order for an epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One optimizer step on a batch; returns the loss values before the step.
pub fn train_step<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    lambda: LossWeights,
    lr: f64,
) -> Result<[f64; 5]> {
    let (values, grads) = {
        let mut ctx = Ctx::new(store);
        let terms = model.loss(&mut ctx, batch, lambda)?;
        let values = term_values(&ctx, &terms);
        if values.iter().any(|v| !v.is_finite()) {
            return Ok(values);
        }
        (values, ctx.tape.backward(terms.total).params(store.len()))
    };
    adam.update(store, &grads, lr);
    Ok(values)
}

/// Runs epochs `state.epoch + 1 ..= config.epochs`, calling `on_epoch`
/// after each one.
pub fn train<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore<T>, &TrainState<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let mut logs = Vec::new();
    let n = train_set.len() as f64;
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let order = epoch_order(config.seed, epoch, train_set.len());
        let mut means = TermMeans::default();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&VideoSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            let values = train_step(
                model,
                store,
                &mut state.adam,
                &batch,
                config.loss_weights(),
                state.learning_rate,
            )?;
            check_finite(values, epoch, b)?;
            means.accumulate(values, idx.len() as f64 / n);
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, store, val_set, config)?)
        };
        let log = EpochLog {
            epoch,
            learning_rate: state.learning_rate,
            train: means,
            val,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {}",
            means.total,
            val.map_or("-".to_string(), |v| format!("{:.6}", v.total))
        );
        state.observe(val.map_or(means.total, |v| v.total), config);
        state.epoch = epoch;
        on_epoch(&log, store, state)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_range, SyntheticConfig};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            model_dim: 8,
            pos_dim: 4,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn data(n: usize) -> Vec<VideoSample> {
        let cfg = SyntheticConfig {
            frames: 20,
            segment_len_range: (4, 8),
            ..SyntheticConfig::default()
        };
        generate_range(&cfg, 0, n).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Array2::from_elem((1, 2), 1.0));
        let mut adam = Adam::new(&store);
        let g = Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        adam.update(&mut store, &[Some(g)], 0.01);
        let w = store.get(id);
        assert!((w[[0, 0]] - 0.99).abs() < 1e-9);
        assert!((w[[0, 1]] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn plateau_divides_learning_rate() {
        let store = ParamStore::<f64>::new();
        let config = TrainConfig {
            plateau_patience: 2,
            ..TrainConfig::default()
        };
        let mut state = TrainState::fresh(&store, &config);
        for loss in [1.0, 0.5, 0.4999, 0.5, 0.3] {
            state.observe(loss, &config);
        }
        assert!((state.learning_rate - 1e-5).abs() < 1e-18);
        assert_eq!(state.best_monitor, 0.3);
    }

    #[test]
    fn two_epochs_log_two_entries_and_are_deterministic() {
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let (model, mut store) = Model::new::<f32>(tiny(), 5).unwrap();
            let mut state = TrainState::fresh(&store, &config);
            let logs = train(&model, &mut store, &mut state, &data(8), &data(4), &config, |_, _, _| Ok(())).unwrap();
            (logs, store)
        };
        let (logs, a) = run();
        let (_, b) = run();
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[1].epoch, 2);
        assert!(logs[0].val.is_some());
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn divergence_names_the_term() {
        let (model, mut store) = Model::new::<f32>(tiny(), 0).unwrap();
        let id = store.id("cls.l1.w").unwrap();
        store.get_mut(id).fill(f32::NAN);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut state = TrainState::fresh(&store, &config);
        let err = train(&model, &mut store, &mut state, &data(4), &[], &config, |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Divergence { term: "class", epoch: 1, batch: 0 }), "{err}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = TrainConfig::default();
        c.plateau_factor = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.lambda[2] = -1.0;
        assert!(c.validate().is_err());
    }
}
