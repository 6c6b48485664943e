//! Synthetic session streams with known per-user dynamics.
//!
//! Each user belongs to a cohort and visits as a renewal process: the gap from
//! one session's end to the next session's start is log-normal. After a random
//! change-point, lapsing users' gaps grow geometrically. The
//! process is simulated past the horizon so the first return after the
//! prediction start is known even when it falls outside the data.

use std::io::Write;

use chrono::{DateTime, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    assign_windows, Dataset, MarkerSchema, Session, WindowConfig, DAY_OF_MONTH, DAY_OF_WEEK, DEVICE,
    HOUR_OF_DAY, PAGES_VIEWED,
};
use crate::error::{Error, Result};
use crate::ingest::{calendar_markers, instant_at};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    /// Change-point drawn uniformly from this range of days.
    pub earliest: f64,
    pub latest: f64,
    /// The k-th gap after the change-point is stretched by `gap_multiplier^k`.
    pub gap_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub name: String,
    pub fraction: f64,
    /// Log-normal location of the gap in log-days.
    pub gap_mu: f64,
    /// Log-normal scale of the gap in log-days.
    pub gap_sigma: f64,
    #[serde(default)]
    pub change_point: Option<ChangePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub user_count: usize,
    pub horizon_days: f64,
    pub activity_start: f64,
    pub prediction_start: f64,
    /// Calendar date of day 0 (`YYYY-MM-DD`, UTC).
    pub start_date: String,
    pub cohorts: Vec<Cohort>,
    /// First sessions fall uniformly in `[0, first_session_latest]`.
    pub first_session_latest: f64,
    /// Device labels with sampling weights.
    pub devices: Vec<(String, f64)>,
    /// Probability a session uses the user's preferred device.
    pub device_loyalty: f64,
    /// Replace the time of day with a draw from the hour mixture.
    pub diurnal: bool,
    pub night_share: f64,
    pub night_hour: (f64, f64),
    pub day_hour: (f64, f64),
    pub duration_minutes_mu: f64,
    pub duration_minutes_sigma: f64,
    pub pages_mu: f64,
    pub pages_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            user_count: 2000,
            horizon_days: 540.0,
            activity_start: 360.0,
            prediction_start: 420.0,
            start_date: "2017-01-01".into(),
            cohorts: vec![
                Cohort {
                    name: "heavy".into(),
                    fraction: 0.1,
                    gap_mu: 2f64.ln(),
                    gap_sigma: 0.8,
                    change_point: None,
                },
                Cohort {
                    name: "regular".into(),
                    fraction: 0.15,
                    gap_mu: 10f64.ln(),
                    gap_sigma: 0.9,
                    change_point: None,
                },
                Cohort {
                    name: "rare".into(),
                    fraction: 0.25,
                    gap_mu: 150f64.ln(),
                    gap_sigma: 0.5,
                    change_point: None,
                },
                Cohort {
                    name: "lapsing".into(),
                    fraction: 0.5,
                    gap_mu: 5f64.ln(),
                    gap_sigma: 0.8,
                    change_point: Some(ChangePoint {
                        earliest: 200.0,
                        latest: 400.0,
                        gap_multiplier: 4.0,
                    }),
                },
            ],
            first_session_latest: 300.0,
            devices: vec![
                ("app".into(), 0.3),
                ("desktop".into(), 0.3),
                ("mobile".into(), 0.3),
                ("tablet".into(), 0.1),
            ],
            device_loyalty: 0.8,
            diurnal: true,
            night_share: 0.3,
            night_hour: (22.0, 2.0),
            day_hour: (13.0, 3.0),
            duration_minutes_mu: 8f64.ln(),
            duration_minutes_sigma: 0.7,
            pages_mu: 5f64.ln(),
            pages_sigma: 0.6,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.user_count == 0 {
            return fail("user_count must be positive".into());
        }
        if self.cohorts.is_empty() {
            return fail("at least one cohort is required".into());
        }
        let total: f64 = self.cohorts.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 || self.cohorts.iter().any(|c| !(c.fraction >= 0.0)) {
            return fail(format!("cohort fractions must be non-negative and sum to 1, got {total}"));
        }
        for c in &self.cohorts {
            if !(c.gap_sigma > 0.0) || !c.gap_mu.is_finite() {
                return fail(format!("cohort {} needs finite mu and sigma > 0", c.name));
            }
            if let Some(cp) = &c.change_point {
                if !(cp.gap_multiplier > 0.0) || !(cp.earliest <= cp.latest) {
                    return fail(format!("cohort {} has an invalid change-point", c.name));
                }
            }
        }
        if self.devices.is_empty() || self.devices.iter().any(|(_, w)| !(*w >= 0.0)) {
            return fail("device weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.device_loyalty) || !(0.0..=1.0).contains(&self.night_share) {
            return fail("device_loyalty and night_share must lie in [0, 1]".into());
        }
        if !(self.duration_minutes_sigma > 0.0 && self.pages_sigma > 0.0) {
            return fail("duration and pages sigmas must be positive".into());
        }
        if !(self.first_session_latest >= 0.0 && self.first_session_latest.is_finite()) {
            return fail("first_session_latest must be a non-negative number of days".into());
        }
        self.window()?;
        self.epoch()?;
        Ok(())
    }

    pub fn window(&self) -> Result<WindowConfig> {
        WindowConfig::new(self.activity_start, self.prediction_start, self.horizon_days)
    }

    pub fn epoch(&self) -> Result<DateTime<Utc>> {
        let date = NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("start_date {:?}: {e}", self.start_date)))?;
        Ok(date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc())
    }

    pub fn schema(&self) -> MarkerSchema {
        let mut labels: Vec<&str> = self.devices.iter().map(|(l, _)| l.as_str()).collect();
        labels.sort_unstable();
        MarkerSchema::web_sessions(&labels)
    }
}

/// What the generator knows about one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user_id: String,
    pub cohort: String,
    /// Days from the prediction start to the first later session, possibly
    /// past the horizon; `None` if the user never visits after it.
    pub first_return_after_prediction_start: Option<f64>,
    pub returns_within_horizon: bool,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub sessions: Vec<Session>,
    pub truth: Vec<GroundTruth>,
    pub schema: MarkerSchema,
    pub epoch: DateTime<Utc>,
    pub window: WindowConfig,
}

impl Generated {
    pub fn dataset(&self) -> Result<Dataset> {
        assign_windows(&self.sessions, &self.window, &self.schema, self.epoch)
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

struct UserOutcome {
    sessions: Vec<Session>,
    truth: GroundTruth,
}

fn lognormal(mu: f64, sigma: f64) -> Result<LogNormal<f64>> {
    LogNormal::new(mu, sigma).map_err(|e| Error::Config(format!("log-normal({mu}, {sigma}): {e}")))
}

fn simulate_user(
    config: &GeneratorConfig,
    device_order: &[usize],
    epoch: DateTime<Utc>,
    index: usize,
) -> Result<UserOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let user_id = format!("u{index:05}");
    let fractions: Vec<f64> = config.cohorts.iter().map(|c| c.fraction).collect();
    let cohort = &config.cohorts[pick_weighted(&mut rng, &fractions)];
    let gap = lognormal(cohort.gap_mu, cohort.gap_sigma)?;
    let duration = lognormal(config.duration_minutes_mu, config.duration_minutes_sigma)?;
    let pages = lognormal(config.pages_mu, config.pages_sigma)?;
    let night = Normal::new(config.night_hour.0, config.night_hour.1)
        .map_err(|e| Error::Config(format!("night hour: {e}")))?;
    let day = Normal::new(config.day_hour.0, config.day_hour.1)
        .map_err(|e| Error::Config(format!("day hour: {e}")))?;
    let change = cohort
        .change_point
        .as_ref()
        .map(|cp| (rng.random_range(cp.earliest..=cp.latest), cp.gap_multiplier));
    let device_weights: Vec<f64> = config.devices.iter().map(|(_, w)| *w).collect();
    let preferred = pick_weighted(&mut rng, &device_weights);

    let t_p = config.prediction_start;
    let horizon = config.horizon_days;
    let mut t = rng.random_range(0.0..=config.first_session_latest);
    let mut sessions: Vec<Session> = Vec::new();
    let mut first_return = None;
    let mut lapsed = 0;
    // Run until the first start past both the prediction start and the horizon.
    while sessions.len() < 1_000_000 {
        let mut start = t;
        if config.diurnal {
            let hour = if rng.random_bool(config.night_share) {
                night.sample(&mut rng)
            } else {
                day.sample(&mut rng)
            };
            let within = (hour.rem_euclid(24.0) + rng.random_range(0.0..1.0 / 60.0)) / 24.0;
            start = t.floor() + within.min(1.0 - 1e-9);
            if let Some(prev) = sessions.last() {
                if start <= prev.end_time() {
                    start = t.max(prev.end_time() + 1.0 / 1440.0);
                }
            }
        }
        if start > t_p && first_return.is_none() {
            first_return = Some(start - t_p);
        }
        if start > horizon {
            break;
        }
        let dur = duration.sample(&mut rng) / 1440.0;
        let device = if rng.random_bool(config.device_loyalty) {
            preferred
        } else {
            pick_weighted(&mut rng, &device_weights)
        };
        sessions.push(make_session(
            &user_id,
            start,
            dur,
            device_order[device] as u32,
            pages.sample(&mut rng).round().max(1.0),
            epoch,
        ));
        let mut g = gap.sample(&mut rng);
        if let Some((cp, mult)) = change {
            if start + dur >= cp {
                lapsed += 1;
                g *= mult.powi(lapsed);
            }
        }
        t = start + dur + g;
    }
    Ok(UserOutcome {
        truth: GroundTruth {
            user_id: user_id.clone(),
            cohort: cohort.name.clone(),
            first_return_after_prediction_start: first_return,
            returns_within_horizon: first_return.is_some_and(|r| t_p + r <= horizon),
        },
        sessions,
    })
}

fn make_session(
    user_id: &str,
    start: f64,
    duration: f64,
    device: u32,
    pages: f64,
    epoch: DateTime<Utc>,
) -> Session {
    let (dow, dom, hour) = calendar_markers(instant_at(epoch, start));
    Session::new(user_id, start, duration)
        .with_discrete(DEVICE, device)
        .with_discrete(DAY_OF_WEEK, dow)
        .with_discrete(DAY_OF_MONTH, dom)
        .with_discrete(HOUR_OF_DAY, hour)
        .with_continuous(PAGES_VIEWED, pages)
}

/// Simulates every user; identical configs give identical output.
pub fn generate(config: &GeneratorConfig) -> Result<Generated> {
    config.validate()?;
    let epoch = config.epoch()?;
    let schema = config.schema();
    // Map configured device order to the sorted label order of the schema.
    let labels = &schema.discrete[0].labels;
    let device_order: Vec<usize> = config
        .devices
        .iter()
        .map(|(l, _)| labels.iter().position(|x| x == l).expect("label in schema"))
        .collect();
    let outcomes: Vec<UserOutcome> = (0..config.user_count)
        .into_par_iter()
        .map(|i| simulate_user(config, &device_order, epoch, i))
        .collect::<Result<_>>()?;
    let empty = outcomes.iter().filter(|o| o.sessions.is_empty()).count();
    if empty * 2 > config.user_count {
        return Err(Error::Config(format!(
            "{empty} of {} users have no sessions before the horizon; \
             start users earlier or shorten their gaps",
            config.user_count
        )));
    }
    let mut sessions = Vec::new();
    let mut truth = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        sessions.extend(o.sessions);
        truth.push(o.truth);
    }
    Ok(Generated {
        sessions,
        truth,
        schema,
        epoch,
        window: config.window()?,
    })
}

/// `user_id,cohort,true_return_days_or_censored`, days counted from the
/// prediction start.
pub fn write_ground_truth_csv<W: Write>(mut out: W, truth: &[GroundTruth]) -> Result<()> {
    writeln!(out, "user_id,cohort,true_return_days_or_censored")?;
    for t in truth {
        let value = match t.first_return_after_prediction_start {
            Some(r) if t.returns_within_horizon => r.to_string(),
            _ => "censored".to_string(),
        };
        writeln!(out, "{},{},{}", t.user_id, t.cohort, value)?;
    }
    Ok(())
}
