use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, Task};
use crate::error::{Error, Result};
use crate::param::sgd_step;
use crate::synth::{rasterize, rng_for, validate_scene, SceneRecord};

const SHUFFLE_STREAM: u64 = 0x5_4F00_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Seeds the per-epoch visiting order.
    pub seed: u64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.03,
            epochs: 10,
            seed: 0,
            task: Task::PredCls,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-scene loss of every epoch, measured before each update.
    pub loss_curve: Vec<f64>,
}

/// Plain SGD, one scene per step, scenes visited in a seeded shuffled order.
/// Training images are the clean renderings.
pub fn train(model: &mut Model, scenes: &[SceneRecord], config: &TrainConfig) -> Result<TrainReport> {
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {}", config.lr)));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        validate_scene(s)?;
        images.push(rasterize(s));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    model.params.zero_grad();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, SHUFFLE_STREAM + epoch as u64));
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let diverged = |loss: f64| Error::Diverged { epoch, step, loss };
            let loss = match model.accumulate_gradients(&images[i], &scenes[i], config.task) {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            sgd_step(&mut model.params, config.lr).map_err(|_| diverged(loss))?;
            total += loss;
        }
        loss_curve.push(total / scenes.len() as f64);
    }
    Ok(TrainReport { loss_curve })
}
