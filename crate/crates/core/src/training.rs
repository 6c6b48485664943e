//! Minibatch training loop shared by the recurrent models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SequenceExample;
use crate::network::{
    apply_update_with_norm_projection, backward, forward, AdamConfig, AdamState, NetworkParams,
};

/// A per-sequence loss over the network outputs `o_j`.
pub trait Objective: Sync {
    /// Returns the loss summed over the sequence's terms, `∂loss/∂o_j` for every
    /// step, and the number of terms the loss sums.
    fn evaluate(&self, outputs: &[f64], example: &SequenceExample) -> Result<(f64, Vec<f64>, usize)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Mean loss per term after each epoch; entry 0 is the untrained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epoch_loss: Vec<f64>,
}

impl LossTrace {
    pub fn last(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// Mean loss per term over `examples`.
pub fn mean_loss(
    params: &NetworkParams,
    examples: &[SequenceExample],
    objective: &dyn Objective,
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let pass = forward(params, &ex.input)?;
            let (loss, _, terms) = objective.evaluate(&pass.outputs, ex)?;
            Ok((loss, terms))
        })
        .collect::<Result<_>>()?;
    let (total, terms) = parts
        .iter()
        .fold((0.0, 0usize), |(l, n), &(x, k)| (l + x, n + k));
    if terms == 0 {
        return Err(Error::InvalidInput("no loss terms to evaluate".into()));
    }
    Ok(total / terms as f64)
}

/// Loss and parameter gradient summed over `batch`, plus the term count.
pub fn batch_gradient(
    params: &NetworkParams,
    batch: &[&SequenceExample],
    objective: &dyn Objective,
) -> Result<(f64, NetworkParams, usize)> {
    let parts: Vec<(f64, NetworkParams, usize)> = batch
        .par_iter()
        .map(|ex| {
            let pass = forward(params, &ex.input)?;
            let (loss, grad_o, terms) = objective.evaluate(&pass.outputs, ex)?;
            let grads = backward(params, &pass, &grad_o)?;
            Ok((loss, grads, terms))
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut terms = 0;
    for (l, g, k) in &parts {
        loss += l;
        total.add_assign(g);
        terms += k;
    }
    Ok((loss, total, terms))
}

/// Runs `config.epochs` epochs of shuffled minibatch Adam on the mean loss per
/// term of each batch.
///
/// If an epoch produces a non-finite loss or parameters, or the objective
/// reports a numerical failure, the parameters and optimizer state from the
/// start of that epoch are restored and [`Error::Diverged`] is returned.
pub fn train_network(
    params: &mut NetworkParams,
    state: &mut AdamState,
    examples: &[SequenceExample],
    objective: &dyn Objective,
    config: &TrainConfig,
) -> Result<LossTrace> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training sequences".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut trace = LossTrace {
        epoch_loss: vec![mean_loss(params, examples, objective)?],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        let saved = (params.clone(), state.clone());
        order.shuffle(&mut rng);
        let outcome = run_epoch(params, state, examples, &order, objective, config)
            .and_then(|()| mean_loss(params, examples, objective));
        match outcome {
            Ok(loss) if loss.is_finite() && params.is_finite() => trace.epoch_loss.push(loss),
            Ok(_) | Err(Error::Numerical(_)) => {
                *params = saved.0;
                *state = saved.1;
                log::warn!("training diverged in epoch {epoch}");
                return Err(Error::Diverged {
                    epoch,
                    restored_epoch: epoch - 1,
                });
            }
            Err(e) => return Err(e),
        }
        log::debug!("epoch {epoch}: mean loss {:.6}", trace.epoch_loss[epoch]);
    }
    Ok(trace)
}

fn run_epoch(
    params: &mut NetworkParams,
    state: &mut AdamState,
    examples: &[SequenceExample],
    order: &[usize],
    objective: &dyn Objective,
    config: &TrainConfig,
) -> Result<()> {
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&SequenceExample> = chunk.iter().map(|&i| &examples[i]).collect();
        let (loss, mut grads, terms) = batch_gradient(params, &batch, objective)?;
        if !loss.is_finite() {
            return Err(Error::Numerical("minibatch loss is not finite".into()));
        }
        if terms == 0 {
            continue;
        }
        grads.scale(1.0 / terms as f64);
        apply_update_with_norm_projection(params, &grads, state, &config.adam)?;
    }
    Ok(())
}
