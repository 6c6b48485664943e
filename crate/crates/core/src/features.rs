//! Aggregate covariates for the Cox models and per-step sequences for the
//! recurrent models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MarkerSchema, Session, UserHistory, MIN_GAP_DAYS};
use crate::error::{Error, Result};

/// One aggregate covariate row per user, in dataset order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateFeatures {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

fn day_index(t: f64) -> i64 {
    t.floor() as i64
}

pub fn active_day_count(user: &UserHistory) -> usize {
    let mut days: Vec<i64> = user.sessions.iter().map(|s| day_index(s.start_time)).collect();
    days.dedup();
    days.len()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn population_sd(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn aggregate_names(schema: &MarkerSchema) -> Vec<String> {
    let mut names: Vec<String> = [
        "session_count",
        "active_day_count",
        "mean_gap",
        "std_gap",
        "mean_duration",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(schema.continuous.iter().map(|c| format!("mean_{c}")));
    names.extend(
        ["absence_time", "observation_span", "gap_missing"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

/// Builds the per-user covariate vectors.
///
/// Single-session users get zero gap statistics and `gap_missing = 1`.
pub fn build_aggregates(dataset: &Dataset) -> AggregateFeatures {
    let window = &dataset.window;
    let rows = dataset
        .users
        .iter()
        .map(|u| {
            let gaps = &u.return_targets;
            let durations: Vec<f64> = u.sessions.iter().map(|s| s.duration).collect();
            let mut row = vec![
                u.sessions.len() as f64,
                active_day_count(u) as f64,
                mean(gaps),
                population_sd(gaps),
                mean(&durations),
            ];
            for c in &dataset.schema.continuous {
                let vals: Vec<f64> = u
                    .sessions
                    .iter()
                    .map(|s| s.continuous_markers.get(c).copied().unwrap_or(0.0))
                    .collect();
                row.push(mean(&vals));
            }
            let first = u.sessions.first().map_or(0.0, |s| s.start_time);
            row.push(u.absence_time(window));
            row.push(u.last_session().start_time - first);
            row.push(if gaps.is_empty() { 1.0 } else { 0.0 });
            row
        })
        .collect();
    AggregateFeatures {
        names: aggregate_names(&dataset.schema),
        rows,
    }
}

/// Column z-scoring with statistics frozen from a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Population moments per column. Constant columns get `sd = 0` and map to 0.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; p];
        let mut sd = vec![0.0; p];
        for k in 0..p {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            mean[k] = self::mean(&col);
            sd[k] = population_sd(&col);
        }
        Standardizer { mean, sd }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}

/// How sessions are grouped into recurrent steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepGranularity {
    #[default]
    ActiveDay,
    Session,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub max_steps: usize,
    #[serde(default)]
    pub granularity: StepGranularity,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            max_steps: 64,
            granularity: StepGranularity::ActiveDay,
        }
    }
}

/// Per-step recurrent input, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceInput {
    pub n_discrete: usize,
    pub n_continuous: usize,
    pub discrete: Vec<u32>,
    pub continuous: Vec<f64>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        if self.n_continuous > 0 {
            self.continuous.len() / self.n_continuous
        } else if self.n_discrete > 0 {
            self.discrete.len() / self.n_discrete
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step_discrete(&self, j: usize) -> &[u32] {
        &self.discrete[j * self.n_discrete..(j + 1) * self.n_discrete]
    }

    pub fn step_continuous(&self, j: usize) -> &[f64] {
        &self.continuous[j * self.n_continuous..(j + 1) * self.n_continuous]
    }

    /// The first `steps` steps.
    pub fn truncated(&self, steps: usize) -> SequenceInput {
        SequenceInput {
            n_discrete: self.n_discrete,
            n_continuous: self.n_continuous,
            discrete: self.discrete[..steps * self.n_discrete].to_vec(),
            continuous: self.continuous[..steps * self.n_continuous].to_vec(),
        }
    }
}

/// A user's recurrent input with its per-step return-time targets.
///
/// `targets[j]` is the gap from the end of step `j` to the start of step
/// `j + 1`; the last target is the user's final gap, censored iff `censored`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceExample {
    pub user_id: String,
    pub input: SequenceInput,
    pub targets: Vec<f64>,
    pub censored: bool,
    pub active_day_count: usize,
}

/// Frozen normalization statistics for the continuous channels plus the
/// discrete cardinalities seen at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub continuous_names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub discrete_names: Vec<String>,
    /// Declared cardinalities; index `cardinality` is the unknown slot.
    pub cardinalities: Vec<usize>,
}

pub fn continuous_channel_names(schema: &MarkerSchema) -> Vec<String> {
    let mut names: Vec<String> = ["elapsed_days", "sessions", "total_duration"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend(schema.continuous.iter().map(|c| format!("sum_{c}")));
    names
}

struct RawStep {
    discrete: Vec<u32>,
    continuous: Vec<f64>,
    target: f64,
}

fn group_steps(user: &UserHistory, granularity: StepGranularity) -> Vec<&[Session]> {
    match granularity {
        StepGranularity::Session => user.sessions.chunks(1).collect(),
        StepGranularity::ActiveDay => user
            .sessions
            .chunk_by(|a, b| day_index(a.start_time) == day_index(b.start_time))
            .collect(),
    }
}

fn raw_steps(
    user: &UserHistory,
    schema: &MarkerSchema,
    stats: &NormStats,
    config: &SequenceConfig,
    t_p: f64,
) -> Vec<RawStep> {
    let groups = group_steps(user, config.granularity);
    let ends: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(Session::end_time).fold(f64::MIN, f64::max).min(t_p))
        .collect();
    let mut steps = Vec::with_capacity(groups.len());
    for (j, group) in groups.iter().enumerate() {
        let first = &group[0];
        let elapsed = if j == 0 {
            0.0
        } else {
            (first.start_time - ends[j - 1]).max(MIN_GAP_DAYS)
        };
        let target = match groups.get(j + 1) {
            Some(next) => (next[0].start_time - ends[j]).max(MIN_GAP_DAYS),
            None => user.final_gap,
        };
        let discrete = stats
            .discrete_names
            .iter()
            .zip(&stats.cardinalities)
            .map(|(name, &card)| match first.discrete_markers.get(name) {
                Some(&ix) if (ix as usize) < card => ix,
                _ => card as u32,
            })
            .collect();
        let mut continuous = vec![
            elapsed,
            group.len() as f64,
            group.iter().map(|s| s.duration).sum(),
        ];
        for c in &schema.continuous {
            continuous.push(
                group
                    .iter()
                    .map(|s| s.continuous_markers.get(c).copied().unwrap_or(0.0))
                    .sum(),
            );
        }
        steps.push(RawStep {
            discrete,
            continuous,
            target,
        });
    }
    steps
}

/// Builds one sequence per user, keeping the most recent `max_steps` steps.
///
/// With `stats = None` the continuous statistics are computed from `dataset`
/// (training mode) and returned; otherwise the given statistics are applied
/// unchanged and returned as a copy. Discrete values outside the training
/// cardinality map to the reserved unknown index.
pub fn build_sequences(
    dataset: &Dataset,
    config: &SequenceConfig,
    stats: Option<&NormStats>,
) -> Result<(Vec<SequenceExample>, NormStats)> {
    if config.max_steps == 0 {
        return Err(Error::Config("max_steps must be at least 1".into()));
    }
    let schema = &dataset.schema;
    let channel_names = continuous_channel_names(schema);
    let mut frozen = match stats {
        Some(s) => {
            if s.continuous_names != channel_names {
                return Err(Error::Mismatch(format!(
                    "continuous channels {:?} do not match the frozen statistics {:?}",
                    channel_names, s.continuous_names
                )));
            }
            s.clone()
        }
        None => NormStats {
            continuous_names: channel_names.clone(),
            mean: vec![0.0; channel_names.len()],
            sd: vec![1.0; channel_names.len()],
            discrete_names: schema.discrete.iter().map(|m| m.name.clone()).collect(),
            cardinalities: schema.discrete.iter().map(|m| m.cardinality).collect(),
        },
    };

    let t_p = dataset.window.prediction_start;
    let per_user: Vec<(Vec<RawStep>, usize)> = dataset
        .users
        .iter()
        .map(|u| {
            let mut steps = raw_steps(u, schema, &frozen, config, t_p);
            let total = steps.len();
            if total > config.max_steps {
                steps.drain(..total - config.max_steps);
            }
            (steps, active_day_count(u))
        })
        .collect();

    if stats.is_none() {
        let nc = channel_names.len();
        let mut count = 0usize;
        let mut sum = vec![0.0; nc];
        for (steps, _) in &per_user {
            for s in steps {
                count += 1;
                for (acc, x) in sum.iter_mut().zip(&s.continuous) {
                    *acc += x;
                }
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; nc];
        for (steps, _) in &per_user {
            for s in steps {
                for k in 0..nc {
                    let d = s.continuous[k] - mean[k];
                    sq[k] += d * d;
                }
            }
        }
        frozen.mean = mean;
        frozen.sd = sq
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
    }

    let n_discrete = frozen.discrete_names.len();
    let n_continuous = frozen.continuous_names.len();
    let examples = dataset
        .users
        .iter()
        .zip(per_user)
        .map(|(u, (steps, active_days))| {
            let mut input = SequenceInput {
                n_discrete,
                n_continuous,
                discrete: Vec::with_capacity(steps.len() * n_discrete),
                continuous: Vec::with_capacity(steps.len() * n_continuous),
            };
            let mut targets = Vec::with_capacity(steps.len());
            for s in steps {
                input.discrete.extend_from_slice(&s.discrete);
                input.continuous.extend(
                    s.continuous
                        .iter()
                        .zip(frozen.mean.iter().zip(&frozen.sd))
                        .map(|(x, (m, sd))| (x - m) / sd),
                );
                targets.push(s.target);
            }
            SequenceExample {
                user_id: u.user_id.clone(),
                input,
                targets,
                censored: u.is_censored,
                active_day_count: active_days,
            }
        })
        .collect();
    Ok((examples, frozen))
}

/// Smallest number of principal components whose share of the total variance
/// exceeds `variance_threshold`, for each embedding matrix (rows = categories).
///
/// Rank-deficient matrices never need more than their rank; a matrix with no
/// variance at all yields 1.
pub fn select_embedding_dims(tables: &[DMatrix<f64>], variance_threshold: f64) -> Vec<usize> {
    tables
        .iter()
        .map(|table| {
            let rows = table.nrows().max(1) as f64;
            let means = table.row_mean();
            let mut centered = table.clone();
            for mut row in centered.row_iter_mut() {
                row -= &means;
            }
            let sv = centered.singular_values();
            let mut variances: Vec<f64> = sv.iter().map(|s| s * s / rows).collect();
            variances.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = variances.iter().sum();
            let largest = variances.first().copied().unwrap_or(0.0);
            if total <= 0.0 {
                return 1;
            }
            let rank = variances
                .iter()
                .filter(|&&v| v > largest * 1e-12)
                .count()
                .max(1);
            let mut acc = 0.0;
            for (k, v) in variances.iter().enumerate() {
                acc += v;
                if acc / total > variance_threshold {
                    return (k + 1).min(rank);
                }
            }
            rank
        })
        .collect()
}
