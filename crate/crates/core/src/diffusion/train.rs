use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_noise_rows, ScheduleKind};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::scorenet::{Condition, DenoiserModel, NoisePredictor, ScoreNetConfig};
use crate::{BINS, FRAMES};

/// Teacher training settings, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub cond_drop: f64,
    pub dataset_size: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Cosine,
            steps: 20,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
            cond_drop: 0.1,
            dataset_size: 4000,
            hidden: 128,
            blocks: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn net_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            hidden: self.hidden,
            blocks: self.blocks,
            t_max: self.steps,
            ..ScoreNetConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.steps == 0 {
            return Err(Error::invalid("epochs, steps and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::invalid("cond_drop must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    pub model: DenoiserModel,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Packs rows of a dataset into one `[B, D]` tensor.
pub(crate) fn stack_rows(items: &[&Tensor]) -> Result<Tensor> {
    let d = BINS * FRAMES;
    let mut data = Vec::with_capacity(items.len() * d);
    for t in items {
        if t.len() != d {
            return Err(Error::shape("stack_rows", format!("sample of shape {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), d], data)
}

/// Fits the noise predictor by MSE score matching with condition dropout.
pub fn train_teacher(dataset: &[(Tensor, Condition)], config: &TrainConfig) -> Result<TrainedTeacher> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut model = DenoiserModel::new_teacher(config.net_config(), config.seed);
    let shapes = model.params().shapes();
    let mut adam = AdamState::new(
        AdamConfig::with_lr(config.learning_rate),
        shapes.iter().map(|s| s.as_slice()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7ea_c4e5);
    let d = BINS * FRAMES;
    let t_max = config.steps;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let rows: Vec<&Tensor> = chunk.iter().map(|&i| &dataset[i].0).collect();
            let x0 = stack_rows(&rows)?;
            let t: Vec<f64> = (0..b).map(|_| rng.random_range(1..=t_max) as f64).collect();
            let cond: Vec<Condition> = chunk
                .iter()
                .map(|&i| {
                    if rng.random::<f64>() < config.cond_drop {
                        Condition::Null
                    } else {
                        dataset[i].1
                    }
                })
                .collect();
            let eps = Tensor::randn(&[b, d], &mut rng);
            let xt = forward_noise_rows(model.schedule(), &x0, &t, &eps)?;

            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(xt);
            let target = g.constant(eps);
            let diverged = |detail: String| Error::Diverged { step, detail };
            let pred = bound
                .predict_eps(&mut g, x, &t, &cond, None)
                .map_err(|e| match e {
                    Error::NonFinite { context } => diverged(context),
                    e => e,
                })?;
            let diff = g.sub(pred, target)?;
            let sq = g.square(diff)?;
            let loss = g.mean(sq);
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("teacher loss is {lv} (batch of {b}, lr {})", config.learning_rate),
                });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .params()
                .iter()
                .map(|&p| grads.take(p).expect("trainable parameter"))
                .collect();
            drop(g);
            adam_step(model.params_mut().iter_mut(), &grads, &mut adam)?;
            total += lv;
            batches += 1;
            step += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    Ok(TrainedTeacher { model, loss_curve })
}

/// Mean squared noise-prediction error over a dataset at fixed draws.
/// With `force_null` every sample is evaluated under the null condition.
pub fn eps_mse(
    model: &DenoiserModel,
    dataset: &[(Tensor, Condition)],
    seed: u64,
    force_null: bool,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = BINS * FRAMES;
    let t_max = model.schedule().t_max();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in dataset.chunks(256) {
        let b = chunk.len();
        let rows: Vec<&Tensor> = chunk.iter().map(|(x, _)| x).collect();
        let x0 = stack_rows(&rows)?;
        let t: Vec<f64> = (0..b).map(|_| rng.random_range(1..=t_max) as f64).collect();
        let eps = Tensor::randn(&[b, d], &mut rng);
        let cond: Vec<Condition> = chunk
            .iter()
            .map(|(_, c)| if force_null { Condition::Null } else { *c })
            .collect();
        let xt = forward_noise_rows(model.schedule(), &x0, &t, &eps)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(xt);
        let pred = bound.predict_eps(&mut g, x, &t, &cond, None)?;
        total += g.value(pred).sq_dist(&eps)?;
        count += b * d;
    }
    Ok(total / count as f64)
}
