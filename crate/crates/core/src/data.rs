//! Sessions, users, time windows and censoring labels.
//!
//! All times are real-valued days since the dataset epoch. A user's return
//! time is measured from the *end* of a session (start + duration) to the
//! start of the next one.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest gap ever reported between two sessions (one second, in days).
///
/// Overlapping sessions would otherwise produce non-positive return times,
/// which the point-process likelihood cannot score.
pub const MIN_GAP_DAYS: f64 = 1.0 / 86_400.0;

/// One timestamped visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    /// Days since the dataset epoch.
    pub start_time: f64,
    /// Days.
    pub duration: f64,
    pub discrete_markers: BTreeMap<String, u32>,
    pub continuous_markers: BTreeMap<String, f64>,
}

impl Session {
    pub fn new(user_id: impl Into<String>, start_time: f64, duration: f64) -> Self {
        Session {
            user_id: user_id.into(),
            start_time,
            duration,
            discrete_markers: BTreeMap::new(),
            continuous_markers: BTreeMap::new(),
        }
    }

    pub fn with_discrete(mut self, name: &str, index: u32) -> Self {
        self.discrete_markers.insert(name.to_string(), index);
        self
    }

    pub fn with_continuous(mut self, name: &str, value: f64) -> Self {
        self.continuous_markers.insert(name.to_string(), value);
        self
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMarker {
    pub name: String,
    pub cardinality: usize,
    /// Category labels, when the marker comes from string-valued input.
    #[serde(default)]
    pub labels: Vec<String>,
}

/// Declares which markers a session may carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerSchema {
    pub discrete: Vec<DiscreteMarker>,
    pub continuous: Vec<String>,
}

pub const DEVICE: &str = "device";
pub const DAY_OF_WEEK: &str = "day_of_week";
pub const DAY_OF_MONTH: &str = "day_of_month";
pub const HOUR_OF_DAY: &str = "hour_of_day";
pub const PAGES_VIEWED: &str = "pages_viewed";

/// Markers derived from the session timestamp rather than read from input.
pub const CALENDAR_MARKERS: [&str; 3] = [DAY_OF_WEEK, DAY_OF_MONTH, HOUR_OF_DAY];

impl MarkerSchema {
    /// Device, the three calendar markers and pages viewed.
    pub fn web_sessions(device_labels: &[&str]) -> Self {
        MarkerSchema {
            discrete: vec![
                DiscreteMarker {
                    name: DEVICE.into(),
                    cardinality: device_labels.len(),
                    labels: device_labels.iter().map(|s| s.to_string()).collect(),
                },
                DiscreteMarker {
                    name: DAY_OF_WEEK.into(),
                    cardinality: 7,
                    labels: vec![],
                },
                DiscreteMarker {
                    name: DAY_OF_MONTH.into(),
                    cardinality: 31,
                    labels: vec![],
                },
                DiscreteMarker {
                    name: HOUR_OF_DAY.into(),
                    cardinality: 24,
                    labels: vec![],
                },
            ],
            continuous: vec![PAGES_VIEWED.into()],
        }
    }

    pub fn cardinality(&self, name: &str) -> Option<usize> {
        self.discrete
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.cardinality)
    }

    fn check_session(&self, session: &Session, record: &str) -> Result<()> {
        for (name, &index) in &session.discrete_markers {
            match self.cardinality(name) {
                Some(card) if (index as usize) < card => {}
                Some(card) => {
                    return Err(Error::record(
                        record,
                        format!("marker {name} index {index} outside cardinality {card}"),
                    ))
                }
                None => {
                    return Err(Error::record(
                        record,
                        format!("undeclared discrete marker {name}"),
                    ))
                }
            }
        }
        for (name, value) in &session.continuous_markers {
            if !self.continuous.iter().any(|c| c == name) {
                return Err(Error::record(
                    record,
                    format!("undeclared continuous marker {name}"),
                ));
            }
            if !value.is_finite() {
                return Err(Error::record(record, format!("marker {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Observation `[0, t_p]`, activity `[t_a, t_p]` and prediction `(t_p, t_n]` windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub activity_start: f64,
    pub prediction_start: f64,
    pub horizon_end: f64,
}

impl WindowConfig {
    pub fn new(activity_start: f64, prediction_start: f64, horizon_end: f64) -> Result<Self> {
        let w = WindowConfig {
            activity_start,
            prediction_start,
            horizon_end,
        };
        w.validate()?;
        Ok(w)
    }

    /// Windows given as calendar instants relative to `epoch`.
    pub fn from_instants(
        epoch: DateTime<Utc>,
        activity_start: DateTime<Utc>,
        prediction_start: DateTime<Utc>,
        horizon_end: DateTime<Utc>,
    ) -> Result<Self> {
        let days = |t: DateTime<Utc>| (t - epoch).num_milliseconds() as f64 / 86_400_000.0;
        WindowConfig::new(days(activity_start), days(prediction_start), days(horizon_end))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.activity_start.is_finite()
            && self.horizon_end.is_finite()
            && 0.0 < self.activity_start
            && self.activity_start < self.prediction_start
            && self.prediction_start < self.horizon_end;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "windows must satisfy 0 < t_a < t_p < t_n, got t_a={}, t_p={}, t_n={}",
                self.activity_start, self.prediction_start, self.horizon_end
            )))
        }
    }

    pub fn prediction_length(&self) -> f64 {
        self.horizon_end - self.prediction_start
    }
}

/// One user's observation-window history plus the censored or observed final return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    /// Observation-window sessions, strictly increasing in start time.
    pub sessions: Vec<Session>,
    pub return_targets: Vec<f64>,
    /// Gap from the last observation session end to the first prediction-window
    /// session, or to `horizon_end` when censored.
    pub final_gap: f64,
    pub is_censored: bool,
    /// End of the last observation session, clamped to `prediction_start`.
    pub last_session_end: f64,
    /// Start of the first prediction-window session, if any.
    pub first_return_start: Option<f64>,
}

impl UserHistory {
    pub fn absence_time(&self, window: &WindowConfig) -> f64 {
        (window.prediction_start - self.last_session_end).max(0.0)
    }

    /// Gap from the last session end to the end of the prediction window; the
    /// censoring threshold for this user.
    pub fn horizon_gap(&self, window: &WindowConfig) -> f64 {
        window.horizon_end - self.last_session_end
    }

    pub fn last_session(&self) -> &Session {
        self.sessions.last().expect("histories hold at least one session")
    }
}

/// Users active in the activity window, split into returning and non-returning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub window: WindowConfig,
    pub schema: MarkerSchema,
    /// Calendar instant of day 0.
    pub epoch: DateTime<Utc>,
    pub users: Vec<UserHistory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn returning(&self) -> impl Iterator<Item = &UserHistory> {
        self.users.iter().filter(|u| !u.is_censored)
    }

    pub fn non_returning(&self) -> impl Iterator<Item = &UserHistory> {
        self.users.iter().filter(|u| u.is_censored)
    }

    pub fn censored_fraction(&self) -> f64 {
        if self.users.is_empty() {
            return 0.0;
        }
        self.non_returning().count() as f64 / self.users.len() as f64
    }

    /// Sessions that rebuild this dataset through [`assign_windows`]: every
    /// stored observation session plus a marker-less stand-in for each user's
    /// first prediction-window session.
    pub fn to_sessions(&self) -> Vec<Session> {
        let mut out = Vec::new();
        for user in &self.users {
            out.extend(user.sessions.iter().cloned());
            if let Some(t) = user.first_return_start {
                out.push(Session::new(user.user_id.clone(), t, 0.0));
            }
        }
        out
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            window: self.window,
            schema: self.schema.clone(),
            epoch: self.epoch,
            users: indices.iter().map(|&i| self.users[i].clone()).collect(),
        }
    }
}

/// Groups raw sessions per user and labels each active user as returning or censored.
///
/// Users are emitted in ascending `user_id` order. Sessions sharing a start
/// time are merged (continuous markers summed, first session's discrete
/// markers kept, longest duration kept).
pub fn assign_windows(
    raw_sessions: &[Session],
    config: &WindowConfig,
    schema: &MarkerSchema,
    epoch: DateTime<Utc>,
) -> Result<Dataset> {
    config.validate()?;
    let mut per_user: BTreeMap<&str, Vec<&Session>> = BTreeMap::new();
    for (i, s) in raw_sessions.iter().enumerate() {
        let record = format!("#{i} (user {})", s.user_id);
        if !(s.start_time.is_finite() && s.start_time >= 0.0) {
            return Err(Error::record(record, format!("start_time {} < 0", s.start_time)));
        }
        if !(s.duration.is_finite() && s.duration >= 0.0) {
            return Err(Error::record(record, format!("duration {} < 0", s.duration)));
        }
        if s.start_time > config.horizon_end {
            return Err(Error::record(
                record,
                format!(
                    "start_time {} is after horizon_end {}",
                    s.start_time, config.horizon_end
                ),
            ));
        }
        schema.check_session(s, &record)?;
        per_user.entry(s.user_id.as_str()).or_default().push(s);
    }

    let mut users = Vec::new();
    for (user_id, mut sessions) in per_user {
        sessions.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
        let merged = merge_duplicates(&sessions);
        if let Some(history) = build_history(user_id, merged, config)? {
            users.push(history);
        }
    }
    Ok(Dataset {
        window: *config,
        schema: schema.clone(),
        epoch,
        users,
    })
}

fn merge_duplicates(sorted: &[&Session]) -> Vec<Session> {
    let mut out: Vec<Session> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match out.last_mut() {
            Some(prev) if prev.start_time == s.start_time => {
                prev.duration = prev.duration.max(s.duration);
                for (k, v) in &s.continuous_markers {
                    *prev.continuous_markers.entry(k.clone()).or_insert(0.0) += v;
                }
            }
            _ => out.push((*s).clone()),
        }
    }
    out
}

fn build_history(
    user_id: &str,
    sessions: Vec<Session>,
    window: &WindowConfig,
) -> Result<Option<UserHistory>> {
    let t_p = window.prediction_start;
    let active = sessions
        .iter()
        .any(|s| s.start_time >= window.activity_start && s.start_time <= t_p);
    if !active {
        return Ok(None);
    }
    let first_return_start = sessions
        .iter()
        .map(|s| s.start_time)
        .find(|&t| t > t_p && t <= window.horizon_end);
    let observed: Vec<Session> = sessions.into_iter().filter(|s| s.start_time <= t_p).collect();
    let last_session_end = observed
        .last()
        .map(|s| s.end_time().min(t_p))
        .expect("active users have an observation session");
    let (final_gap, is_censored) = match first_return_start {
        Some(t) => ((t - last_session_end).max(MIN_GAP_DAYS), false),
        None => (window.horizon_end - last_session_end, true),
    };
    let return_targets = gaps_between(user_id, &observed)?;
    Ok(Some(UserHistory {
        user_id: user_id.to_string(),
        sessions: observed,
        return_targets,
        final_gap,
        is_censored,
        last_session_end,
        first_return_start,
    }))
}

fn gaps_between(user_id: &str, sessions: &[Session]) -> Result<Vec<f64>> {
    sessions
        .windows(2)
        .enumerate()
        .map(|(j, pair)| {
            if pair[1].start_time <= pair[0].start_time {
                return Err(Error::record(
                    format!("user {user_id} session {}", j + 1),
                    "session start times are not strictly increasing",
                ));
            }
            Ok((pair[1].start_time - pair[0].end_time()).max(MIN_GAP_DAYS))
        })
        .collect()
}

/// Gaps `t_{j+1} - (t_j + duration_j)` between consecutive observation sessions.
pub fn compute_return_targets(history: &UserHistory) -> Result<Vec<f64>> {
    if history.sessions.is_empty() {
        return Err(Error::InvalidInput(format!(
            "user {} has no sessions",
            history.user_id
        )));
    }
    gaps_between(&history.user_id, &history.sessions)
}

/// Splits users into `(train, test)` keeping the censored ratio equal in both.
///
/// Each stratum contributes `round(n * test_fraction)` users to the test set,
/// clamped so both sides keep at least one user of each stratum.
pub fn stratified_split(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for censored in [false, true] {
        let mut stratum: Vec<usize> = (0..dataset.users.len())
            .filter(|&i| dataset.users[i].is_censored == censored)
            .collect();
        if stratum.len() < 2 {
            let name = if censored { "non-returning" } else { "returning" };
            return Err(Error::InvalidInput(format!(
                "the {name} stratum has {} users; at least 2 are required",
                stratum.len()
            )));
        }
        stratum.shuffle(&mut rng);
        let n_test = ((stratum.len() as f64 * test_fraction).round() as usize)
            .clamp(1, stratum.len() - 1);
        test.extend_from_slice(&stratum[..n_test]);
        train.extend_from_slice(&stratum[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn epoch() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap()
    }

    fn schema() -> MarkerSchema {
        MarkerSchema::web_sessions(&["desktop", "mobile"])
    }

    fn window() -> WindowConfig {
        WindowConfig::new(30.0, 100.0, 160.0).unwrap()
    }

    #[test]
    fn returning_user_gap_starts_at_session_end() {
        let sessions = vec![
            Session::new("a", 10.0, 0.0),
            Session::new("a", 50.0, 0.25),
            Session::new("a", 110.0, 0.0),
        ];
        let ds = assign_windows(&sessions, &window(), &schema(), epoch()).unwrap();
        assert_eq!(ds.len(), 1);
        let u = &ds.users[0];
        assert!(!u.is_censored);
        assert_eq!(u.final_gap, 110.0 - 50.25);
        assert_eq!(u.sessions.len(), 2);
        assert_eq!(u.return_targets, vec![40.0]);
    }

    #[test]
    fn censored_user_gap_runs_to_horizon() {
        let sessions = vec![Session::new("b", 20.0, 0.0), Session::new("b", 90.0, 0.0)];
        let ds = assign_windows(&sessions, &window(), &schema(), epoch()).unwrap();
        let u = &ds.users[0];
        assert!(u.is_censored);
        assert_eq!(u.final_gap, 70.0);
    }

    #[test]
    fn inactive_user_is_dropped() {
        let sessions = vec![Session::new("c", 1.0, 0.0), Session::new("c", 29.0, 0.0)];
        let ds = assign_windows(&sessions, &window(), &schema(), epoch()).unwrap();
        assert!(ds.is_empty());
        assert!(assign_windows(&[], &window(), &schema(), epoch())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn session_after_horizon_is_rejected_by_name() {
        let sessions = vec![Session::new("ok", 40.0, 0.0), Session::new("late", 161.0, 0.0)];
        let err = assign_windows(&sessions, &window(), &schema(), epoch()).unwrap_err();
        assert!(err.to_string().contains("late"), "{err}");
    }

    #[test]
    fn out_of_range_marker_is_rejected() {
        let sessions = vec![Session::new("m", 40.0, 0.0).with_discrete(DAY_OF_WEEK, 7)];
        assert!(assign_windows(&sessions, &window(), &schema(), epoch()).is_err());
    }

    #[test]
    fn session_straddling_prediction_start_is_clamped() {
        let sessions = vec![Session::new("s", 99.5, 1.0), Session::new("s", 120.0, 0.0)];
        let ds = assign_windows(&sessions, &window(), &schema(), epoch()).unwrap();
        let u = &ds.users[0];
        assert_eq!(u.last_session_end, 100.0);
        assert_eq!(u.final_gap, 20.0);
    }

    #[test]
    fn duplicate_timestamps_merge() {
        let sessions = vec![
            Session::new("d", 40.0, 0.1)
                .with_discrete(DEVICE, 0)
                .with_continuous(PAGES_VIEWED, 2.0),
            Session::new("d", 40.0, 0.2)
                .with_discrete(DEVICE, 1)
                .with_continuous(PAGES_VIEWED, 3.0),
        ];
        let ds = assign_windows(&sessions, &window(), &schema(), epoch()).unwrap();
        let s = &ds.users[0].sessions;
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].discrete_markers[DEVICE], 0);
        assert_eq!(s[0].continuous_markers[PAGES_VIEWED], 5.0);
        assert_eq!(s[0].duration, 0.2);
    }

    #[test]
    fn return_targets_examples() {
        let mut h = UserHistory {
            user_id: "x".into(),
            sessions: vec![Session::new("x", 0.0, 1.0), Session::new("x", 3.0, 0.5)],
            return_targets: vec![],
            final_gap: 1.0,
            is_censored: false,
            last_session_end: 3.5,
            first_return_start: None,
        };
        assert_eq!(compute_return_targets(&h).unwrap(), vec![2.0]);

        h.sessions.truncate(1);
        assert!(compute_return_targets(&h).unwrap().is_empty());

        h.sessions = vec![
            Session::new("x", 0.0, 0.0),
            Session::new("x", 2.0, 0.0),
            Session::new("x", 7.0, 0.0),
        ];
        assert_eq!(compute_return_targets(&h).unwrap(), vec![2.0, 5.0]);

        h.sessions.swap(1, 2);
        assert!(compute_return_targets(&h).is_err());
    }

    fn population(returning: usize, censored: usize) -> Dataset {
        let mut sessions = Vec::new();
        for i in 0..returning {
            let id = format!("r{i:03}");
            sessions.push(Session::new(id.clone(), 50.0, 0.0));
            sessions.push(Session::new(id, 120.0, 0.0));
        }
        for i in 0..censored {
            sessions.push(Session::new(format!("c{i:03}"), 60.0, 0.0));
        }
        assign_windows(&sessions, &window(), &schema(), epoch()).unwrap()
    }

    #[test]
    fn split_is_exactly_stratified() {
        let ds = population(60, 40);
        let (train, test) = stratified_split(&ds, 0.2, 11).unwrap();
        assert_eq!(test.returning().count(), 12);
        assert_eq!(test.non_returning().count(), 8);
        assert_eq!(train.len(), 80);
        let (train2, test2) = stratified_split(&ds, 0.2, 11).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_needs_two_users_per_stratum() {
        let ds = population(10, 1);
        assert!(stratified_split(&ds, 0.3, 1).is_err());
        assert!(stratified_split(&population(10, 10), 1.0, 1).is_err());
    }

    #[test]
    fn window_ordering_is_enforced() {
        assert!(WindowConfig::new(0.0, 1.0, 2.0).is_err());
        assert!(WindowConfig::new(3.0, 2.0, 4.0).is_err());
        assert!(WindowConfig::new(1.0, 2.0, 2.0).is_err());
    }
}
