//! Mini-batch Adam training.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Object, Scenario};
use crate::detector::{detection_loss, images_to_tensor, Detector, LossWeights};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::param_rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            seed: 1,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.adam.validate()
    }
}

/// Mean weighted losses over one epoch's steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_total,loss_obj,loss_cls,loss_box,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                e.epoch, e.loss_total, e.loss_obj, e.loss_cls, e.loss_box, e.seconds
            );
        }
        out
    }
}

/// Losses of a single optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
}

/// One forward/backward/update on `batch`.
pub fn train_step<T: Scalar>(
    model: &mut Detector<T>,
    adam: &mut Adam<T>,
    batch: &[Scenario],
    weights: &LossWeights,
) -> Result<StepLoss> {
    let loss = {
        let tape = Tape::new();
        let images = tape.constant(images_to_tensor(batch)?);
        let fwd = model.forward(&tape, images)?;
        let truths: Vec<&[Object]> = batch.iter().map(|s| s.objects.as_slice()).collect();
        let loss = detection_loss(&fwd.predictions, &truths, model.config(), weights)?;
        tape.backward(loss.total)?;
        let step = StepLoss {
            total: loss.total.value().item().to_f64_lossy(),
            objectness: loss.objectness,
            class: loss.class,
            boxes: loss.boxes,
        };
        let store = model.store_mut();
        store.zero_grads();
        store.accumulate_grads(&tape);
        step
    };
    adam.step(model.store_mut())?;
    Ok(loss)
}

/// Trains for `config.epochs` epochs, reshuffling each epoch from
/// `(seed, epoch)`. `on_epoch` sees every finished epoch.
pub fn train<T: Scalar>(
    model: &mut Detector<T>,
    adam: &mut Adam<T>,
    scenes: &[Scenario],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut global_step = adam.step_count();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut param_rng(config.seed, &format!("shuffle.{epoch}")));
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for (i, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Scenario> = idx.iter().map(|&j| scenes[j].clone()).collect();
            global_step += 1;
            let step = train_step(model, adam, &batch, &config.loss_weights).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} at epoch {epoch}, batch {}, optimizer step {global_step}",
                    i + 1
                )),
                other => other,
            })?;
            if !step.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {} at epoch {epoch}, batch {}, optimizer step {global_step}",
                    step.total,
                    i + 1
                )));
            }
            sums[0] += step.total;
            sums[1] += step.objectness;
            sums[2] += step.class;
            sums[3] += step.boxes;
            steps += 1;
        }
        let n = steps as f64;
        let entry = EpochLog {
            epoch,
            loss_total: sums[0] / n,
            loss_obj: sums[1] / n,
            loss_cls: sums[2] / n,
            loss_box: sums[3] / n,
            learning_rate: config.adam.learning_rate,
            steps,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
