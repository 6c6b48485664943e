//! The six-model comparison: Baseline, RNN, CPH, CPHA, RNNSM and RNNSMA,
//! trained on one split of a dataset and scored on the other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_predict, SimpleRnn, SimpleRnnConfig};
use crate::cox::{CoxConfig, CoxModel};
use crate::data::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{concordance_index, EvaluationReport, PredictionRecord};
use crate::features::build_sequences;
use crate::rnnsm::{known_rows, EmbeddingWidths, RnnsmConfig, RnnsmModel, W_GRID};
use crate::features::select_embedding_dims;
use crate::training::LossTrace;

pub const MODEL_NAMES: [&str; 6] = ["baseline", "rnn", "cph", "cpha", "rnnsm", "rnnsma"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub test_fraction: f64,
    /// Share of the training users held out to choose `w`.
    pub validation_fraction: f64,
    pub w_grid: Vec<f64>,
    /// Epochs per grid candidate; the final model uses `rnnsm.train.epochs`.
    pub grid_epochs: usize,
    pub rnnsm: RnnsmConfig,
    pub rnn: SimpleRnnConfig,
    pub cox: CoxConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            test_fraction: 0.2,
            validation_fraction: 0.2,
            w_grid: W_GRID.to_vec(),
            grid_epochs: 4,
            rnnsm: RnnsmConfig::default(),
            rnn: SimpleRnnConfig::default(),
            cox: CoxConfig::default(),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Propagates the run seed into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.rnnsm.train.seed = seed;
        self.rnn.train.seed = seed.wrapping_add(1);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WSelection {
    pub candidates: Vec<(f64, f64)>,
    pub chosen: f64,
    pub embedding_dims: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: EvaluationReport,
    pub predictions: BTreeMap<String, Vec<PredictionRecord>>,
    pub selection: WSelection,
    pub rnnsm_trace: LossTrace,
    pub rnn_trace: LossTrace,
    pub rnnsm: RnnsmModel,
    pub rnn: SimpleRnn,
    pub cox: CoxModel,
    pub test: Dataset,
}

/// Picks embedding widths from a preliminary model, then `w` by validation
/// concordance of the expected return time.
pub fn select_rnnsm_hyperparameters(train: &Dataset, config: &ExperimentConfig) -> Result<WSelection> {
    if config.w_grid.is_empty() {
        return Err(Error::Config("w_grid is empty".into()));
    }
    let (fit_part, val_part) =
        stratified_split(train, config.validation_fraction, config.seed.wrapping_add(17))?;
    let (examples, norm) = build_sequences(&fit_part, &config.rnnsm.sequence, None)?;
    let dims = match &config.rnnsm.embeddings {
        EmbeddingWidths::Fixed(d) => d.clone(),
        EmbeddingWidths::Pca {
            preliminary_width,
            variance_threshold,
            preliminary_epochs,
        } => {
            let mut pre = config.rnnsm.clone();
            pre.train.epochs = *preliminary_epochs;
            pre.embeddings = EmbeddingWidths::Fixed(vec![*preliminary_width; norm.cardinalities.len()]);
            let (model, _) = RnnsmModel::fit_examples(&examples, norm.clone(), &pre)?;
            select_embedding_dims(&known_rows(&model.params), *variance_threshold)
        }
    };
    log::info!("embedding widths {dims:?}");
    let mut candidates = Vec::new();
    for &w in &config.w_grid {
        let mut c = config.rnnsm.clone();
        c.w = w;
        c.train.epochs = config.grid_epochs;
        c.embeddings = EmbeddingWidths::Fixed(dims.clone());
        let score = RnnsmModel::fit_examples(&examples, norm.clone(), &c)
            .and_then(|(model, _)| model.predict(&val_part, false))
            .and_then(|p| concordance_index(&p));
        match score {
            Ok(s) => {
                log::info!("w = {w}: validation concordance {s:.4}");
                candidates.push((w, s));
            }
            Err(e @ (Error::Diverged { .. } | Error::Numerical(_))) => {
                log::warn!("w = {w} skipped: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    let chosen = candidates
        .iter()
        .fold(None::<(f64, f64)>, |best, &(w, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((w, s)),
        })
        .map(|(w, _)| w)
        .ok_or_else(|| Error::Numerical("every w candidate failed to train".into()))?;
    Ok(WSelection {
        candidates,
        chosen,
        embedding_dims: dims,
    })
}

/// Runs all six models and scores them on the held-out users.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (train, test) = stratified_split(dataset, config.test_fraction, config.seed)?;
    log::info!(
        "{} training and {} test users ({:.1}% censored)",
        train.len(),
        test.len(),
        100.0 * dataset.censored_fraction()
    );
    let mut predictions = BTreeMap::new();
    predictions.insert("baseline".to_string(), baseline_predict(&test));

    let (rnn, rnn_trace) = SimpleRnn::fit(&train, &config.rnn)?;
    predictions.insert("rnn".to_string(), rnn.predict(&test)?);

    let cox = CoxModel::fit_dataset(&train, &config.cox)?;
    predictions.insert("cph".to_string(), cox.predict(&test, false)?);
    predictions.insert("cpha".to_string(), cox.predict(&test, true)?);

    let selection = select_rnnsm_hyperparameters(&train, config)?;
    let mut final_config = config.rnnsm.clone();
    final_config.w = selection.chosen;
    final_config.embeddings = EmbeddingWidths::Fixed(selection.embedding_dims.clone());
    let (rnnsm, rnnsm_trace) = RnnsmModel::fit(&train, &final_config)?;
    predictions.insert("rnnsm".to_string(), rnnsm.predict(&test, false)?);
    predictions.insert("rnnsma".to_string(), rnnsm.predict(&test, true)?);

    let mut report = EvaluationReport::default();
    for (name, records) in &predictions {
        report.add(name, records)?;
    }
    Ok(ExperimentOutput {
        report,
        predictions,
        selection,
        rnnsm_trace,
        rnn_trace,
        rnnsm,
        rnn,
        cox,
        test,
    })
}
