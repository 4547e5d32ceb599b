//! Single-writer training loop shared by the mappers and decoders: batch size
//! one, seeded shuffle per epoch, Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Parameters, ParametersExt};
use crate::numcore::SeededRng;

/// A model trainable on samples of type `S` with a masked objective.
pub trait Trainable<S>: Parameters + Clone {
    /// Loss and parameter gradients for one sample. `None` means the sample
    /// has no masked pixels and contributes nothing.
    fn loss_and_grad(&self, sample: &S) -> Result<Option<(f64, Self)>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the non-empty samples of each epoch, measured before
    /// each sample's update.
    pub loss_trace: Vec<f64>,
    pub steps: u64,
}

pub fn fit<S, M: Trainable<S>>(model: &mut M, samples: &[S], cfg: &TrainConfig, rng: &mut SeededRng) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    let mut adam = AdamState::new(model.num_params(), cfg.adam);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut n = 0usize;
        for &i in &order {
            let Some((loss, grads)) = model.loss_and_grad(&samples[i])? else { continue };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("loss became {loss} on sample {i}") });
            }
            adam.step_params(model, &grads).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
                other => other,
            })?;
            if !model.all_finite() {
                return Err(Error::Diverged { epoch, detail: "non-finite parameters".into() });
            }
            sum += loss;
            n += 1;
        }
        report.loss_trace.push(if n == 0 { 0.0 } else { sum / n as f64 });
        log::debug!("epoch {epoch}: loss {:.6}", report.loss_trace[epoch]);
    }
    report.steps = adam.step;
    Ok(report)
}
