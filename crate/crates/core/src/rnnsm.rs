//! Recurrent survival model.
//!
//! The network output `o_j` at step `j` sets the hazard of the next return,
//! `λ(t) = exp(o_j + w (t − t_j))`, whose survival function is
//! `S(g) = exp(−(e^{o_j}/w)(e^{w g} − 1))`. Every observed gap contributes
//! `log λ + log S`; a user who has not come back by the horizon contributes
//! only `log S` for the final gap.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WindowConfig};
use crate::error::{Error, Result};
use crate::evaluation::PredictionRecord;
use crate::features::{build_sequences, select_embedding_dims, NormStats, SequenceConfig, SequenceExample};
use crate::network::{forward, AdamState, NetworkParams, NetworkShape};
use crate::quadrature::{geometric_breaks, integrate_breaks};
use crate::training::{train_network, LossTrace, Objective, TrainConfig};

/// Largest exponent evaluated before a computation is reported as overflowing.
pub const MAX_EXPONENT: f64 = 700.0;

/// Candidate values of `w` for validation grid search.
pub const W_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

fn check_w(w: f64) -> Result<()> {
    if w > 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "w must be positive and finite, got {w}; for w <= 0 the return time has no finite mean"
        )))
    }
}

fn check_exponent(x: f64, o: f64, w: f64, t: f64) -> Result<()> {
    if x.is_nan() || x > MAX_EXPONENT {
        Err(Error::Numerical(format!(
            "hazard exponent {x} exceeds {MAX_EXPONENT} (o = {o}, w = {w}, t = {t})"
        )))
    } else {
        Ok(())
    }
}

/// `exp(o + w·dt)`.
pub fn hazard(o: f64, w: f64, dt: f64) -> Result<f64> {
    check_w(w)?;
    if !(dt >= 0.0) {
        return Err(Error::InvalidInput(format!("hazard at negative time {dt}")));
    }
    let x = o + w * dt;
    check_exponent(x, o, w, dt)?;
    Ok(x.exp())
}

/// Cumulative hazard `(e^o / w)·expm1(w·gap)`, assuming checked inputs.
fn cumulative_hazard(o: f64, w: f64, gap: f64) -> f64 {
    (o - w.ln()).exp() * (w * gap).exp_m1()
}

/// `log S(gap) = −(e^o / w)·expm1(w·gap)`. An infinite gap gives `−∞`.
pub fn log_survival(o: f64, w: f64, gap: f64) -> Result<f64> {
    check_w(w)?;
    if !(gap >= 0.0) {
        return Err(Error::InvalidInput(format!("survival at negative gap {gap}")));
    }
    if gap == f64::INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    check_exponent(o, o, w, gap)?;
    check_exponent(o + w * gap, o, w, gap)?;
    Ok(-cumulative_hazard(o, w, gap))
}

/// `log f(gap) = o + w·gap − (e^o / w)·expm1(w·gap)`.
pub fn log_density_return(o: f64, w: f64, gap: f64) -> Result<f64> {
    if !(gap > 0.0) || gap == f64::INFINITY {
        return Err(Error::InvalidInput(format!(
            "a return gap must be positive and finite, got {gap}"
        )));
    }
    let ls = log_survival(o, w, gap)?;
    Ok(o + w * gap + ls)
}

/// Negative log-likelihood of one sequence and its derivative in every `o_j`.
///
/// Every step is an observed return except the last one when `censored`.
pub fn sequence_loss(
    outputs: &[f64],
    targets: &[f64],
    censored: bool,
    w: f64,
) -> Result<(f64, Vec<f64>)> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::Mismatch(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let last = outputs.len() - 1;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(outputs.len());
    for (j, (&o, &g)) in outputs.iter().zip(targets).enumerate() {
        if censored && j == last {
            // d/do of log S equals log S itself.
            let ls = log_survival(o, w, g)?;
            loss -= ls;
            grad.push(-ls);
        } else {
            let lf = log_density_return(o, w, g)?;
            loss -= lf;
            grad.push(-(1.0 + (lf - o - w * g)));
        }
    }
    Ok((loss, grad))
}

/// Closed-form survival curve of one step, measured from its reference time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub t_ref: f64,
    pub o: f64,
    pub w: f64,
}

impl SurvivalCurve {
    pub fn new(t_ref: f64, o: f64, w: f64) -> Result<Self> {
        check_w(w)?;
        check_exponent(o, o, w, 0.0)?;
        Ok(SurvivalCurve { t_ref, o, w })
    }

    /// `S(t)`; 1 at and before `t_ref`. Values too small to represent are 0.
    pub fn survival(&self, t: f64) -> f64 {
        let gap = (t - self.t_ref).max(0.0);
        if self.o + self.w * gap > MAX_EXPONENT {
            return 0.0;
        }
        (-cumulative_hazard(self.o, self.w, gap)).exp()
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        hazard(self.o, self.w, (t - self.t_ref).max(0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpectationConfig {
    /// First upper limit tried; doubled until `S(U) < survival_floor`.
    pub initial_upper: f64,
    pub survival_floor: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for ExpectationConfig {
    fn default() -> Self {
        ExpectationConfig {
            initial_upper: 480.0,
            survival_floor: 1e-9,
            abs_tol: 1e-8,
            max_intervals: 4000,
        }
    }
}

impl ExpectationConfig {
    /// Starts the upper-limit search at four prediction-window lengths.
    pub fn for_window(window: &WindowConfig) -> Self {
        ExpectationConfig {
            initial_upper: 4.0 * window.prediction_length(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    /// `∫₀^U S`.
    pub value: f64,
    pub abs_error: f64,
    pub upper: f64,
    /// Upper bound on the omitted `∫_U^∞ S`, namely `S(U)/λ(U)`.
    pub tail_bound: f64,
}

/// Gap at which the cumulative hazard reaches 1; the natural time scale.
fn unit_hazard_gap(o: f64, w: f64) -> f64 {
    let a = (w.ln() - o).exp();
    if a.is_finite() {
        a.ln_1p() / w
    } else {
        (w.ln() - o) / w
    }
}

/// `∫₀^∞ S(gap) dgap` for the hazard `exp(o + w·gap)`.
pub fn expected_return_time(o: f64, w: f64) -> Result<f64> {
    Ok(expected_return_time_with(o, w, &ExpectationConfig::default())?.value)
}

pub fn expected_return_time_with(o: f64, w: f64, config: &ExpectationConfig) -> Result<Expectation> {
    let curve = SurvivalCurve::new(0.0, o, w)?;
    if !(config.initial_upper > 0.0) {
        return Err(Error::Config("initial_upper must be positive".into()));
    }
    let mut upper = config.initial_upper;
    while curve.survival(upper) >= config.survival_floor {
        upper *= 2.0;
        if !upper.is_finite() || upper > 1e15 {
            return Err(Error::Numerical(format!(
                "survival for o = {o}, w = {w} does not fall below {} at any finite gap",
                config.survival_floor
            )));
        }
    }
    let scale = unit_hazard_gap(o, w).min(upper);
    let breaks = geometric_breaks(0.0, upper, scale / 16.0);
    let quad = integrate_breaks(
        |t| curve.survival(t),
        &breaks,
        config.abs_tol,
        0.0,
        config.max_intervals,
    )
    .map_err(|e| Error::Numerical(format!("expected return time for o = {o}, w = {w}: {e}")))?;
    let s_upper = curve.survival(upper);
    let tail_bound = if s_upper == 0.0 {
        0.0
    } else {
        s_upper / curve.hazard(upper)?
    };
    Ok(Expectation {
        value: quad.value,
        abs_error: quad.abs_error,
        upper,
        tail_bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalExpectation {
    pub value: f64,
    /// `log S(t_s)`.
    pub log_survival_at_absence: f64,
    /// Set when `S(t_s) < 1e-300`; the value is then `t_s` plus a residual
    /// that is itself vanishingly small.
    pub underflow: bool,
}

/// `E[T | T > t_s] = t_s + ∫_{t_s}^∞ S(z) dz / S(t_s)`.
pub fn absence_conditioned_expectation(o: f64, w: f64, t_s: f64) -> Result<f64> {
    Ok(absence_conditioned_expectation_with(o, w, t_s, &ExpectationConfig::default())?.value)
}

pub fn absence_conditioned_expectation_with(
    o: f64,
    w: f64,
    t_s: f64,
    config: &ExpectationConfig,
) -> Result<ConditionalExpectation> {
    check_w(w)?;
    if !(t_s >= 0.0) || !t_s.is_finite() {
        return Err(Error::InvalidInput(format!("absence time {t_s} must be >= 0")));
    }
    check_exponent(o, o, w, 0.0)?;
    // Past t_s the conditional survival S(t_s + u)/S(t_s) is the survival of
    // the same model with o shifted by w·t_s.
    let shifted = o + w * t_s;
    let log_s = if shifted > MAX_EXPONENT {
        f64::NEG_INFINITY
    } else {
        -cumulative_hazard(o, w, t_s)
    };
    let underflow = log_s < 1e-300f64.ln();
    let residual = if shifted > MAX_EXPONENT {
        0.0
    } else {
        expected_return_time_with(shifted, w, config)?.value
    };
    if underflow {
        log::warn!("S({t_s}) underflows for o = {o}, w = {w}; returning t_s plus residual");
    }
    Ok(ConditionalExpectation {
        value: t_s + residual,
        log_survival_at_absence: log_s,
        underflow,
    })
}

struct RnnsmObjective {
    w: f64,
}

impl Objective for RnnsmObjective {
    fn evaluate(&self, outputs: &[f64], ex: &SequenceExample) -> Result<(f64, Vec<f64>, usize)> {
        let (loss, grad) = sequence_loss(outputs, &ex.targets, ex.censored, self.w)?;
        Ok((loss, grad, outputs.len()))
    }
}

/// Embedding widths: fixed, or chosen by principal components of a
/// preliminary model's embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingWidths {
    Fixed(Vec<usize>),
    Pca {
        preliminary_width: usize,
        variance_threshold: f64,
        preliminary_epochs: usize,
    },
}

impl Default for EmbeddingWidths {
    fn default() -> Self {
        EmbeddingWidths::Pca {
            preliminary_width: 10,
            variance_threshold: 0.9,
            preliminary_epochs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnsmConfig {
    pub w: f64,
    pub hidden: usize,
    pub fused: usize,
    pub embeddings: EmbeddingWidths,
    pub sequence: SequenceConfig,
    pub train: TrainConfig,
    pub expectation: ExpectationConfig,
}

impl Default for RnnsmConfig {
    fn default() -> Self {
        RnnsmConfig {
            w: 0.1,
            hidden: 32,
            fused: 32,
            embeddings: EmbeddingWidths::default(),
            sequence: SequenceConfig::default(),
            train: TrainConfig::default(),
            expectation: ExpectationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnsmModel {
    pub config: RnnsmConfig,
    pub params: NetworkParams,
    pub optimizer: AdamState,
    pub norm: NormStats,
}

/// Mean of every target that is an observed return.
pub(crate) fn mean_observed_target(examples: &[SequenceExample]) -> Option<f64> {
    let (sum, n) = examples
        .iter()
        .flat_map(|ex| {
            let observed = ex.targets.len() - usize::from(ex.censored);
            ex.targets[..observed].iter()
        })
        .fold((0.0, 0usize), |(s, n), &t| (s + t, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Builds a freshly initialized network for the given statistics and widths.
pub(crate) fn init_network(
    norm: &NormStats,
    embedding_dims: Vec<usize>,
    hidden: usize,
    fused: usize,
    seed: u64,
) -> Result<NetworkParams> {
    let shape = NetworkShape {
        cardinalities: norm.cardinalities.clone(),
        embedding_dims,
        n_continuous: norm.continuous_names.len(),
        fused,
        hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkParams::init(&shape, &mut rng)
}

/// Embedding tables without their unknown rows.
pub(crate) fn known_rows(params: &NetworkParams) -> Vec<DMatrix<f64>> {
    params
        .embeddings
        .iter()
        .zip(&params.shape.cardinalities)
        .map(|(table, &card)| table.rows(0, card).into_owned())
        .collect()
}

impl RnnsmModel {
    /// A model with freshly initialized parameters; the output bias starts at
    /// the log rate of an exponential fit to the observed training gaps.
    pub fn new(
        config: RnnsmConfig,
        norm: NormStats,
        embedding_dims: Vec<usize>,
        examples: &[SequenceExample],
    ) -> Result<Self> {
        check_w(config.w)?;
        let mut params = init_network(
            &norm,
            embedding_dims,
            config.hidden,
            config.fused,
            config.train.seed,
        )?;
        if let Some(mean) = mean_observed_target(examples) {
            params.head_b[0] = -mean.max(1e-3).ln();
        }
        let optimizer = AdamState::new(&params);
        Ok(RnnsmModel {
            config,
            params,
            optimizer,
            norm,
        })
    }

    /// Builds training sequences from `dataset`, picks embedding widths and
    /// trains a new model.
    pub fn fit(dataset: &Dataset, config: &RnnsmConfig) -> Result<(Self, LossTrace)> {
        let (examples, norm) = build_sequences(dataset, &config.sequence, None)?;
        Self::fit_examples(&examples, norm, config)
    }

    pub fn fit_examples(
        examples: &[SequenceExample],
        norm: NormStats,
        config: &RnnsmConfig,
    ) -> Result<(Self, LossTrace)> {
        if !examples.iter().any(|e| e.censored) || examples.iter().all(|e| e.censored) {
            log::warn!("training set lacks returning or non-returning users");
        }
        let dims = match &config.embeddings {
            EmbeddingWidths::Fixed(dims) => dims.clone(),
            EmbeddingWidths::Pca {
                preliminary_width,
                variance_threshold,
                preliminary_epochs,
            } => {
                let mut pre_config = config.clone();
                pre_config.train.epochs = *preliminary_epochs;
                let widths = vec![*preliminary_width; norm.cardinalities.len()];
                let mut pre = RnnsmModel::new(pre_config, norm.clone(), widths, examples)?;
                pre.train(examples)?;
                let dims = select_embedding_dims(&known_rows(&pre.params), *variance_threshold);
                log::info!("embedding widths chosen by PCA: {dims:?}");
                dims
            }
        };
        let mut model = RnnsmModel::new(config.clone(), norm, dims, examples)?;
        let trace = model.train(examples)?;
        Ok((model, trace))
    }

    /// Continues training for `config.train.epochs` epochs.
    pub fn train(&mut self, examples: &[SequenceExample]) -> Result<LossTrace> {
        let objective = RnnsmObjective { w: self.config.w };
        train_network(
            &mut self.params,
            &mut self.optimizer,
            examples,
            &objective,
            &self.config.train,
        )
    }

    pub fn sequence_loss(&self, example: &SequenceExample) -> Result<(f64, Vec<f64>)> {
        let pass = forward(&self.params, &example.input)?;
        sequence_loss(&pass.outputs, &example.targets, example.censored, self.config.w)
    }

    /// `o` at the last step of each example.
    pub fn last_outputs(&self, examples: &[SequenceExample]) -> Result<Vec<f64>> {
        examples
            .par_iter()
            .map(|ex| {
                let pass = forward(&self.params, &ex.input)?;
                Ok(*pass.outputs.last().expect("sequences are non-empty"))
            })
            .collect()
    }

    /// Predicted gap after each user's last session: the expected return time,
    /// or with `condition_on_absence` the expectation given no return before
    /// the prediction window starts.
    pub fn predict(&self, dataset: &Dataset, condition_on_absence: bool) -> Result<Vec<PredictionRecord>> {
        let (examples, _) = build_sequences(dataset, &self.config.sequence, Some(&self.norm))?;
        let outputs = self.last_outputs(&examples)?;
        let window = dataset.window;
        let config = ExpectationConfig {
            initial_upper: 4.0 * window.prediction_length(),
            ..self.config.expectation
        };
        let w = self.config.w;
        dataset
            .users
            .par_iter()
            .zip(outputs.par_iter())
            .zip(examples.par_iter())
            .map(|((user, &o), ex)| {
                let gap = if condition_on_absence {
                    absence_conditioned_expectation_with(o, w, user.absence_time(&window), &config)?.value
                } else {
                    expected_return_time_with(o, w, &config)?.value
                };
                Ok(PredictionRecord::new(user, &window, gap, ex.active_day_count))
            })
            .collect()
    }

    /// Model probability of no return before each user's horizon, an
    /// alternative non-returning score.
    pub fn survival_at_horizon(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let (examples, _) = build_sequences(dataset, &self.config.sequence, Some(&self.norm))?;
        let outputs = self.last_outputs(&examples)?;
        dataset
            .users
            .iter()
            .zip(outputs)
            .map(|(user, o)| Ok(SurvivalCurve::new(0.0, o, self.config.w)?.survival(user.horizon_gap(&dataset.window))))
            .collect()
    }
}
