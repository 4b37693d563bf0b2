//! Mini-batch Adam on mean squared error in diopters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::network::{self, Prepared};
use crate::model::ModelParams;
use crate::par::{self, Exec};

const STREAM_SHUFFLE: u64 = 5;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the best training RMSE (diopters) improved by less than
    /// this over the last `early_stop_window` epochs.
    pub early_stop_tol: f64,
    pub early_stop_window: usize,
    pub seed: u64,
    /// Sum per-sample gradients in a fixed order. Turning this off lets the
    /// thread pool combine them in whatever order it likes.
    pub deterministic: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_epochs: 200,
            early_stop_tol: 1e-4,
            early_stop_window: 10,
            seed: 0,
            deterministic: true,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Network inputs paired with targets in diopters.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub inputs: Vec<Prepared<f32>>,
    pub targets_diopters: Vec<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean squared error over the epoch's mini-batches, diopters².
    pub loss: f64,
    pub rmse_diopters: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn update(&mut self, cfg: &TrainConfig, params: &mut [f32], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let step = cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
            *p = (*p as f64 - step) as f32;
        }
    }
}

/// Summed squared error and summed gradient of one mini-batch.
fn batch_gradient(
    params: &ModelParams,
    data: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let layout = params.config.layout();
    let per_sample = |j: usize| -> Result<(f64, Vec<f32>)> {
        let i = batch[j];
        let input = &data.inputs[i];
        let trace = network::forward(&layout, &params.values, input)?;
        let mut g = vec![0f32; layout.total];
        let target = data.targets_diopters[i] as f32;
        let se = network::backward(&layout, &params.values, input, &trace, target, 1.0, &mut g);
        Ok((se as f64, g))
    };

    if cfg.deterministic || !cfg.exec.is_parallel() {
        let parts = par::try_map_indexed(cfg.exec, batch.len(), per_sample)?;
        let mut sum = vec![0f64; layout.total];
        let mut se = 0.0;
        for (s, g) in parts {
            se += s;
            for (acc, v) in sum.iter_mut().zip(g) {
                *acc += v as f64;
            }
        }
        return Ok((se, sum));
    }
    reduce_unordered(batch.len(), layout.total, per_sample)
}

#[cfg(feature = "parallel")]
fn reduce_unordered<F>(n: usize, len: usize, per_sample: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize) -> Result<(f64, Vec<f32>)> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|j| per_sample(j).map(|(s, g)| (s, g.into_iter().map(f64::from).collect::<Vec<_>>())))
        .try_reduce(
            || (0.0, vec![0f64; len]),
            |(sa, mut ga), (sb, gb)| {
                for (a, b) in ga.iter_mut().zip(gb) {
                    *a += b;
                }
                Ok((sa + sb, ga))
            },
        )
}

#[cfg(not(feature = "parallel"))]
fn reduce_unordered<F>(_: usize, _: usize, _: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize) -> Result<(f64, Vec<f32>)> + Sync + Send,
{
    unreachable!("unordered reduction requires the parallel feature")
}

pub fn train<P>(mut params: ModelParams, data: &TrainingSet, cfg: &TrainConfig, mut progress: P) -> Result<ModelParams>
where
    P: FnMut(&EpochStats),
{
    cfg.validate()?;
    if data.is_empty() || data.inputs.len() != data.targets_diopters.len() {
        return Err(Error::Input("training set is empty or inconsistent".into()));
    }
    let n_params = params.values.len();
    let mut adam = Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best_history: Vec<f64> = Vec::new();
    let mut last = EpochStats { epoch: 0, loss: f64::NAN, rmse_diopters: f64::NAN };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_se = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (se, mut grads) = batch_gradient(&params, data, batch, cfg)?;
            let loss = se / batch.len() as f64;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.update(cfg, &mut params.values, &grads);
            epoch_se += se;
        }
        let mse = epoch_se / data.len() as f64;
        last = EpochStats { epoch, loss: mse, rmse_diopters: mse.sqrt() };
        progress(&last);

        let best = best_history.last().map_or(last.rmse_diopters, |b: &f64| b.min(last.rmse_diopters));
        best_history.push(best);
        if best_history.len() > cfg.early_stop_window {
            let earlier = best_history[best_history.len() - 1 - cfg.early_stop_window];
            if earlier - best < cfg.early_stop_tol {
                break;
            }
        }
    }

    let meta = &mut params.meta;
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("epochs".into(), last.epoch.to_string());
    meta.insert("final_loss".into(), last.loss.to_string());
    meta.insert("final_rmse_diopters".into(), last.rmse_diopters.to_string());
    meta.insert("batch_size".into(), cfg.batch_size.to_string());
    meta.insert("learning_rate".into(), cfg.learning_rate.to_string());
    meta.insert("train_samples".into(), data.len().to_string());
    Ok(params)
}
