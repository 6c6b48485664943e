//! Reference models: the last-seen baseline and a recurrent regressor trained
//! on returning users only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::PredictionRecord;
use crate::features::{active_day_count, build_sequences, NormStats, SequenceConfig, SequenceExample};
use crate::network::{AdamConfig, AdamState, NetworkParams};
use crate::rnnsm::{init_network, mean_observed_target};
use crate::training::{train_network, LossTrace, Objective, TrainConfig};

/// Predicts the absence time at the start of the prediction window, which
/// never exceeds the true return time.
pub fn baseline_predict(dataset: &Dataset) -> Vec<PredictionRecord> {
    let window = dataset.window;
    dataset
        .users
        .iter()
        .map(|u| PredictionRecord::new(u, &window, u.absence_time(&window), active_day_count(u)))
        .collect()
}

/// Squared error of `o_j` against gaps divided by `scale`, on every step of a
/// returning user's sequence or on the final step only.
pub(crate) struct SquaredError {
    pub scale: f64,
    pub final_step_only: bool,
}

impl Objective for SquaredError {
    fn evaluate(&self, outputs: &[f64], ex: &SequenceExample) -> Result<(f64, Vec<f64>, usize)> {
        if outputs.len() != ex.targets.len() {
            return Err(Error::Mismatch(format!(
                "{} outputs for {} targets",
                outputs.len(),
                ex.targets.len()
            )));
        }
        if ex.censored {
            return Ok((0.0, vec![0.0; outputs.len()], 0));
        }
        let first = if self.final_step_only { outputs.len() - 1 } else { 0 };
        let mut loss = 0.0;
        let mut grad = vec![0.0; outputs.len()];
        for j in first..outputs.len() {
            let e = outputs[j] - ex.targets[j] / self.scale;
            loss += e * e;
            grad[j] = 2.0 * e;
        }
        Ok((loss, grad, outputs.len() - first))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimpleRnnConfig {
    pub hidden: usize,
    pub fused: usize,
    pub embedding_width: usize,
    /// Fit only the final gap instead of every observed gap.
    pub final_step_only: bool,
    pub sequence: SequenceConfig,
    pub train: TrainConfig,
}

impl Default for SimpleRnnConfig {
    fn default() -> Self {
        SimpleRnnConfig {
            hidden: 32,
            fused: 32,
            embedding_width: 4,
            final_step_only: true,
            sequence: SequenceConfig::default(),
            train: TrainConfig {
                adam: AdamConfig {
                    learning_rate: 1e-2,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

/// LSTM regressor of the gap in days, with a linear output.
///
/// The network regresses gaps divided by `target_scale`, the mean training
/// target, and predictions are multiplied back.
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleRnn {
    pub config: SimpleRnnConfig,
    pub target_scale: f64,
    pub params: NetworkParams,
    pub optimizer: AdamState,
    pub norm: NormStats,
}

/// Drops censored users; their returns are never observed.
pub fn returning_only(examples: &[SequenceExample]) -> Vec<SequenceExample> {
    examples.iter().filter(|e| !e.censored).cloned().collect()
}

impl SimpleRnn {
    /// Trains on the returning users of `dataset`. Normalization statistics
    /// are computed over all of its users.
    pub fn fit(dataset: &Dataset, config: &SimpleRnnConfig) -> Result<(Self, LossTrace)> {
        let (examples, norm) = build_sequences(dataset, &config.sequence, None)?;
        Self::fit_examples(&examples, norm, config)
    }

    pub fn fit_examples(
        examples: &[SequenceExample],
        norm: NormStats,
        config: &SimpleRnnConfig,
    ) -> Result<(Self, LossTrace)> {
        let train = returning_only(examples);
        if train.is_empty() {
            return Err(Error::InvalidInput("no returning users to train on".into()));
        }
        let dims = vec![config.embedding_width; norm.cardinalities.len()];
        let mut params = init_network(&norm, dims, config.hidden, config.fused, config.train.seed)?;
        let target_scale = if config.final_step_only {
            train.iter().map(|e| e.targets[e.targets.len() - 1]).sum::<f64>() / train.len() as f64
        } else {
            mean_observed_target(&train).unwrap_or(1.0)
        }
        .max(1e-6);
        params.head_b[0] = 1.0;
        let optimizer = AdamState::new(&params);
        let mut model = SimpleRnn {
            config: config.clone(),
            target_scale,
            params,
            optimizer,
            norm,
        };
        let objective = model.objective();
        let trace = train_network(
            &mut model.params,
            &mut model.optimizer,
            &train,
            &objective,
            &model.config.train,
        )?;
        Ok((model, trace))
    }

    pub(crate) fn objective(&self) -> SquaredError {
        SquaredError {
            scale: self.target_scale,
            final_step_only: self.config.final_step_only,
        }
    }

    /// Final-step output per user in days, clamped at zero.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<PredictionRecord>> {
        let (examples, _) = build_sequences(dataset, &self.config.sequence, Some(&self.norm))?;
        let window = dataset.window;
        dataset
            .users
            .par_iter()
            .zip(examples.par_iter())
            .map(|(user, ex)| {
                let pass = crate::network::forward(&self.params, &ex.input)?;
                let o = *pass.outputs.last().expect("sequences are non-empty");
                Ok(PredictionRecord::new(
                    user,
                    &window,
                    (o * self.target_scale).max(0.0),
                    ex.active_day_count,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_windows, MarkerSchema, Session, WindowConfig, DEVICE};
    use crate::evaluation::nonreturning_recall;
    use crate::network::{backward, forward, NetworkShape};
    use crate::rnnsm::tests::random_example;
    use crate::training::mean_loss;
    use chrono::DateTime;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset() -> Dataset {
        let schema = MarkerSchema::web_sessions(&["app", "desktop"]);
        let window = WindowConfig::new(20.0, 30.0, 50.0).unwrap();
        let mut sessions = Vec::new();
        for u in 0..12 {
            let id = format!("u{u:02}");
            for k in 0..4 {
                sessions.push(Session::new(id.clone(), 5.0 + 6.0 * k as f64 + u as f64 * 0.1, 0.01));
            }
            if u % 3 != 0 {
                sessions.push(Session::new(id.clone(), 33.0 + u as f64, 0.01));
            }
        }
        assign_windows(&sessions, &window, &schema, DateTime::UNIX_EPOCH).unwrap()
    }

    #[test]
    fn baseline_is_absence_time() {
        let ds = small_dataset();
        let preds = baseline_predict(&ds);
        for (p, u) in preds.iter().zip(&ds.users) {
            assert_eq!(p.predicted_return_days, ds.window.prediction_start - u.last_session_end);
            if let Some(t) = p.true_return_days {
                assert!(p.predicted_return_days <= t);
            }
        }
        assert_eq!(nonreturning_recall(&preds).unwrap(), 0.0);
    }

    #[test]
    fn baseline_predicts_zero_at_prediction_start() {
        let schema = MarkerSchema::web_sessions(&["app"]);
        let window = WindowConfig::new(1.0, 10.0, 20.0).unwrap();
        let s = [Session::new("a", 9.5, 0.5), Session::new("a", 12.0, 0.1)];
        let ds = assign_windows(&s, &window, &schema, DateTime::UNIX_EPOCH).unwrap();
        assert_eq!(baseline_predict(&ds)[0].predicted_return_days, 0.0);
    }

    #[test]
    fn censored_users_do_not_affect_training_loss() {
        let ds = small_dataset();
        let (examples, norm) = build_sequences(&ds, &SequenceConfig::default(), None).unwrap();
        assert_eq!(returning_only(&examples).len(), ds.returning().count());
        let params = init_network(&norm, vec![2; norm.cardinalities.len()], 3, 3, 1).unwrap();
        let objective = SquaredError { scale: 3.0, final_step_only: false };
        let all = mean_loss(&params, &examples, &objective).unwrap();
        let kept = mean_loss(&params, &returning_only(&examples), &objective).unwrap();
        assert_eq!(all, kept);
    }

    #[test]
    fn squared_error_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = NetworkShape {
            cardinalities: vec![3],
            embedding_dims: vec![2],
            n_continuous: 2,
            fused: 3,
            hidden: 3,
        };
        let mut params = NetworkParams::init(&shape, &mut rng).unwrap();
        let ex = random_example(&mut rng, &shape, 3, false);
        let objective = SquaredError { scale: 2.0, final_step_only: false };
        let loss = |p: &NetworkParams| {
            let pass = forward(p, &ex.input).unwrap();
            objective.evaluate(&pass.outputs, &ex).unwrap().0
        };
        let pass = forward(&params, &ex.input).unwrap();
        let (_, grad_o, _) = objective.evaluate(&pass.outputs, &ex).unwrap();
        let analytic = backward(&params, &pass, &grad_o).unwrap();
        let h = 1e-5;
        for t in 0..params.tensors().len() {
            for k in 0..params.tensors()[t].len() {
                let orig = params.tensors()[t][k];
                params.tensors_mut()[t][k] = orig + h;
                let up = loss(&params);
                params.tensors_mut()[t][k] = orig - h;
                let dn = loss(&params);
                params.tensors_mut()[t][k] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = analytic.tensors()[t][k];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4, "{fd} vs {an}");
            }
        }
    }

    /// Final gaps of 2 or 12 days, decided by the device marker.
    fn device_dependent_dataset() -> Dataset {
        let schema = MarkerSchema::web_sessions(&["app", "desktop"]);
        let window = WindowConfig::new(20.0, 30.0, 60.0).unwrap();
        let mut sessions = Vec::new();
        for u in 0..16 {
            let id = format!("u{u:02}");
            let device = (u % 2) as u32;
            for k in 0..4 {
                let start = 14.0 + 5.0 * k as f64 + u as f64 * 0.02;
                sessions.push(Session::new(id.clone(), start, 0.01).with_discrete(DEVICE, device));
            }
            let gap = if device == 0 { 2.0 } else { 12.0 };
            sessions.push(Session::new(id.clone(), 29.01 + u as f64 * 0.02 + gap, 0.01));
        }
        assign_windows(&sessions, &window, &schema, DateTime::UNIX_EPOCH).unwrap()
    }

    #[test]
    fn simple_rnn_trains_and_predicts_non_negative() {
        let ds = device_dependent_dataset();
        let config = SimpleRnnConfig {
            hidden: 4,
            fused: 4,
            embedding_width: 2,
            train: TrainConfig {
                epochs: 5,
                batch_size: 4,
                ..SimpleRnnConfig::default().train
            },
            ..SimpleRnnConfig::default()
        };
        assert_eq!(ds.returning().count(), 16);
        let (model, trace) = SimpleRnn::fit(&ds, &config).unwrap();
        assert_eq!(trace.epoch_loss.len(), 6);
        assert!(trace.last().unwrap() < trace.epoch_loss[0], "{:?}", trace.epoch_loss);
        let preds = model.predict(&ds).unwrap();
        assert_eq!(preds.len(), ds.len());
        assert!(preds.iter().all(|p| p.predicted_return_days >= 0.0));
    }
}
