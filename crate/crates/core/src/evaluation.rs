//! Metrics for censored return-time predictions and their error breakdowns.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::data::{UserHistory, WindowConfig};
use crate::error::{Error, Result};
use crate::ingest::instant_at;

/// Highest active-day bucket; users at or above it share one bucket.
pub const ACTIVE_DAY_CAP: usize = 64;

/// One model's prediction for one user, with the truth it is scored against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: String,
    /// Predicted gap after the last observed session, in days.
    pub predicted_return_days: f64,
    /// Observed gap to the first return; `None` iff censored.
    pub true_return_days: Option<f64>,
    /// Gap from the last session end to the horizon; the censoring threshold.
    pub horizon_gap_days: f64,
    pub active_day_count: usize,
    /// Day of the last observed session end, relative to the dataset epoch.
    pub last_session_end: f64,
}

impl PredictionRecord {
    pub fn new(
        user: &UserHistory,
        window: &WindowConfig,
        predicted_return_days: f64,
        active_day_count: usize,
    ) -> Self {
        PredictionRecord {
            user_id: user.user_id.clone(),
            predicted_return_days,
            true_return_days: (!user.is_censored).then_some(user.final_gap),
            horizon_gap_days: user.horizon_gap(window),
            active_day_count,
            last_session_end: user.last_session_end,
        }
    }

    pub fn is_censored(&self) -> bool {
        self.true_return_days.is_none()
    }

    /// Lower bound on the return time of a censored user.
    pub fn censored_lower_bound_days(&self) -> Option<f64> {
        self.is_censored().then_some(self.horizon_gap_days)
    }

    /// Observed time: the return gap, or the censoring bound.
    pub fn observed_days(&self) -> f64 {
        self.true_return_days.unwrap_or(self.horizon_gap_days)
    }

    pub fn true_return_week(&self) -> Option<usize> {
        self.true_return_days.map(|d| (d / 7.0).floor().max(0.0) as usize)
    }

    pub fn predicts_non_returning(&self) -> bool {
        self.predicted_return_days > self.horizon_gap_days
    }
}

fn require_finite(records: &[PredictionRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| !r.predicted_return_days.is_finite()) {
        return Err(Error::Numerical(format!(
            "prediction for user {} is not finite",
            r.user_id
        )));
    }
    Ok(())
}

pub fn rmse_returning(records: &[PredictionRecord]) -> Result<f64> {
    require_finite(records)?;
    let (sum, n) = records
        .iter()
        .filter_map(|r| r.true_return_days.map(|t| r.predicted_return_days - t))
        .fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        return Err(Error::InvalidInput(
            "RMSE needs at least one uncensored record".into(),
        ));
    }
    Ok((sum / n as f64).sqrt())
}

/// Fenwick tree over prediction ranks, counting inserted items.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C: over pairs where `a` is uncensored and its return precedes
/// `b`'s observed time, the share with `pred_a < pred_b`; prediction ties count
/// one half.
pub fn concordance_index(records: &[PredictionRecord]) -> Result<f64> {
    require_finite(records)?;
    let n = records.len();
    let mut preds: Vec<f64> = records.iter().map(|r| r.predicted_return_days).collect();
    preds.sort_by(f64::total_cmp);
    preds.dedup();
    let rank = |p: f64| preds.partition_point(|&x| x < p);

    // Visit by observed time descending; all records with a strictly larger
    // observed time are in the tree when an uncensored `a` is reached.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| records[j].observed_days().total_cmp(&records[i].observed_days()));
    let mut tree = Fenwick::new(preds.len());
    let mut inserted = 0u64;
    let mut concordant = 0.0;
    let mut comparable = 0u64;
    let mut start = 0;
    while start < n {
        let t = records[order[start]].observed_days();
        let mut end = start;
        while end < n && records[order[end]].observed_days() == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if records[i].is_censored() {
                continue;
            }
            let r = rank(records[i].predicted_return_days);
            let below = tree.prefix(r);
            let up_to = tree.prefix(r + 1);
            let ties = up_to - below;
            let above = inserted - up_to;
            concordant += above as f64 + 0.5 * ties as f64;
            comparable += inserted;
        }
        for &i in &order[start..end] {
            tree.add(rank(records[i].predicted_return_days));
            inserted += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::InvalidInput(
            "no comparable pairs for the concordance index".into(),
        ));
    }
    Ok(concordant / comparable as f64)
}

/// Mann–Whitney AUC of `scores` for the positive class, ties counted one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("AUC score {s} is not a number")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "AUC needs both returning and non-returning users".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (0-based) share their mean, 1-based.
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC for the non-returning class, scoring each user by how far the
/// predicted return lies beyond their own horizon.
pub fn nonreturning_auc(records: &[PredictionRecord]) -> Result<f64> {
    require_finite(records)?;
    let scores: Vec<f64> = records
        .iter()
        .map(|r| r.predicted_return_days - r.horizon_gap_days)
        .collect();
    let positive: Vec<bool> = records.iter().map(|r| r.is_censored()).collect();
    auc(&scores, &positive)
}

/// Share of censored users whose predicted return lies beyond the horizon.
pub fn nonreturning_recall(records: &[PredictionRecord]) -> Result<f64> {
    require_finite(records)?;
    let censored: Vec<&PredictionRecord> = records.iter().filter(|r| r.is_censored()).collect();
    if censored.is_empty() {
        return Err(Error::InvalidInput(
            "recall needs at least one censored record".into(),
        ));
    }
    let hits = censored.iter().filter(|r| r.predicts_non_returning()).count();
    Ok(hits as f64 / censored.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketError {
    pub count: usize,
    pub rmse: f64,
    pub mean_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdowns {
    /// Keyed by `floor(true_return_days / 7)`.
    pub by_week: BTreeMap<usize, BucketError>,
    /// Keyed by active-day count; key [`ACTIVE_DAY_CAP`] holds every user at or above it.
    pub by_active_days: BTreeMap<usize, BucketError>,
}

fn bucket_errors<K: Ord>(items: impl Iterator<Item = (K, f64)>) -> BTreeMap<K, BucketError> {
    let mut acc: BTreeMap<K, (usize, f64, f64)> = BTreeMap::new();
    for (key, err) in items {
        let e = acc.entry(key).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += err * err;
        e.2 += err;
    }
    acc.into_iter()
        .map(|(k, (n, sq, sum))| {
            (
                k,
                BucketError {
                    count: n,
                    rmse: (sq / n as f64).sqrt(),
                    mean_error: sum / n as f64,
                },
            )
        })
        .collect()
}

/// Errors of uncensored records grouped by true return week and by active days.
pub fn error_breakdowns(records: &[PredictionRecord]) -> Result<ErrorBreakdowns> {
    require_finite(records)?;
    let returning = || {
        records
            .iter()
            .filter_map(|r| r.true_return_days.map(|t| (r, r.predicted_return_days - t)))
    };
    Ok(ErrorBreakdowns {
        by_week: bucket_errors(returning().map(|(r, e)| (r.true_return_week().unwrap_or(0), e))),
        by_active_days: bucket_errors(
            returning().map(|(r, e)| (r.active_day_count.min(ACTIVE_DAY_CAP), e)),
        ),
    })
}

/// Pooled RMSE over uncensored records whose active-day count lies in `range`.
pub fn rmse_for_active_days(
    records: &[PredictionRecord],
    range: std::ops::RangeInclusive<usize>,
) -> Result<f64> {
    let subset: Vec<PredictionRecord> = records
        .iter()
        .filter(|r| range.contains(&r.active_day_count))
        .cloned()
        .collect();
    rmse_returning(&subset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub rmse_days: f64,
    pub concordance: f64,
    pub nonreturning_auc: f64,
    pub nonreturning_recall: f64,
    pub breakdowns: ErrorBreakdowns,
}

impl ModelMetrics {
    pub fn compute(records: &[PredictionRecord]) -> Result<Self> {
        Ok(ModelMetrics {
            rmse_days: rmse_returning(records)?,
            concordance: concordance_index(records)?,
            nonreturning_auc: nonreturning_auc(records)?,
            nonreturning_recall: nonreturning_recall(records)?,
            breakdowns: error_breakdowns(records)?,
        })
    }
}

/// Metrics for every evaluated model, keyed by model name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub models: BTreeMap<String, ModelMetrics>,
}

impl EvaluationReport {
    pub fn add(&mut self, model: &str, records: &[PredictionRecord]) -> Result<()> {
        self.models.insert(model.to_string(), ModelMetrics::compute(records)?);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table with one column per model.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<22}", "metric");
        for name in self.models.keys() {
            out.push_str(&format!("{name:>10}"));
        }
        out.push('\n');
        let rows: [(&str, fn(&ModelMetrics) -> f64); 4] = [
            ("rmse_days", |m| m.rmse_days),
            ("concordance", |m| m.concordance),
            ("nonreturning_auc", |m| m.nonreturning_auc),
            ("nonreturning_recall", |m| m.nonreturning_recall),
        ];
        for (label, get) in rows {
            out.push_str(&format!("{label:<22}"));
            for m in self.models.values() {
                out.push_str(&format!("{:>10.3}", get(m)));
            }
            out.push('\n');
        }
        out
    }

    /// Plot-ready CSVs: `(file name, contents)` for the per-week RMSE, per-week
    /// mean error and per-active-day RMSE tables.
    pub fn plot_csvs(&self) -> Vec<(String, String)> {
        let table = |title: &str,
                     key: &str,
                     pick: &dyn Fn(&ErrorBreakdowns) -> &BTreeMap<usize, BucketError>,
                     value: &dyn Fn(&BucketError) -> f64| {
            let mut text = format!("model,{key},count,{title}\n");
            for (name, m) in &self.models {
                for (k, b) in pick(&m.breakdowns) {
                    let label = if key == "active_days" && *k == ACTIVE_DAY_CAP {
                        format!("{ACTIVE_DAY_CAP}+")
                    } else {
                        k.to_string()
                    };
                    text.push_str(&format!("{name},{label},{},{}\n", b.count, value(b)));
                }
            }
            text
        };
        vec![
            (
                "rmse_by_week.csv".into(),
                table("rmse_days", "week", &|b| &b.by_week, &|b| b.rmse),
            ),
            (
                "mean_error_by_week.csv".into(),
                table("mean_error_days", "week", &|b| &b.by_week, &|b| b.mean_error),
            ),
            (
                "rmse_by_active_days.csv".into(),
                table("rmse_days", "active_days", &|b| &b.by_active_days, &|b| b.rmse),
            ),
        ]
    }
}

pub const PREDICTION_CSV_HEADER: &str = "user_id,predicted_return_days,predicted_return_date,\
is_censored_truth,true_return_days,horizon_gap_days,active_day_count,last_session_end";

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub fn write_predictions_csv<W: Write>(
    mut out: W,
    records: &[PredictionRecord],
    epoch: DateTime<Utc>,
) -> Result<()> {
    writeln!(out, "{PREDICTION_CSV_HEADER}")?;
    for r in records {
        let date = instant_at(epoch, r.last_session_end + r.predicted_return_days)
            .to_rfc3339_opts(SecondsFormat::Secs, true);
        let truth = r.true_return_days.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.user_id),
            r.predicted_return_days,
            date,
            r.is_censored(),
            truth,
            r.horizon_gap_days,
            r.active_day_count,
            r.last_session_end
        )?;
    }
    Ok(())
}

pub fn read_predictions_csv<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::InvalidInput("prediction file is empty".into()))?;
    if header.trim() != PREDICTION_CSV_HEADER {
        return Err(Error::Mismatch(format!(
            "unexpected prediction header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let where_ = || format!("line {}", i + 2);
        let f = split_csv_line(&line);
        if f.len() != 8 {
            return Err(Error::record(where_(), format!("expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::record(where_(), format!("{name} {s:?} is not a number")))
        };
        let censored: bool = f[3]
            .parse()
            .map_err(|_| Error::record(where_(), "is_censored_truth must be true or false"))?;
        let truth = if censored {
            None
        } else {
            Some(num(&f[4], "true_return_days")?)
        };
        out.push(PredictionRecord {
            user_id: f[0].clone(),
            predicted_return_days: num(&f[1], "predicted_return_days")?,
            true_return_days: truth,
            horizon_gap_days: num(&f[5], "horizon_gap_days")?,
            active_day_count: f[6]
                .parse()
                .map_err(|_| Error::record(where_(), "active_day_count must be an integer"))?,
            last_session_end: num(&f[7], "last_session_end")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(pred: f64, truth: Option<f64>, horizon: f64) -> PredictionRecord {
        PredictionRecord {
            user_id: "u".into(),
            predicted_return_days: pred,
            true_return_days: truth,
            horizon_gap_days: horizon,
            active_day_count: 1,
            last_session_end: 0.0,
        }
    }

    #[test]
    fn rmse_examples() {
        let perfect = [rec(1.0, Some(1.0), 9.0), rec(3.0, Some(3.0), 9.0)];
        assert_eq!(rmse_returning(&perfect).unwrap(), 0.0);
        let r = [
            rec(2.0, Some(1.0), 9.0),
            rec(2.0, Some(3.0), 9.0),
            rec(50.0, None, 9.0),
        ];
        assert_eq!(rmse_returning(&r).unwrap(), 1.0);
        assert!(rmse_returning(&[rec(1.0, None, 2.0)]).is_err());
    }

    #[test]
    fn concordance_examples() {
        let ordered = [
            rec(10.0, Some(1.0), 99.0),
            rec(20.0, Some(2.0), 99.0),
            rec(30.0, Some(3.0), 99.0),
        ];
        assert_eq!(concordance_index(&ordered).unwrap(), 1.0);
        let reversed = [
            rec(30.0, Some(1.0), 99.0),
            rec(20.0, Some(2.0), 99.0),
            rec(10.0, Some(3.0), 99.0),
        ];
        assert_eq!(concordance_index(&reversed).unwrap(), 0.0);
        // a: uncensored 5, b: censored at 3, c: uncensored 2. Comparable pairs
        // are (c, a) and (c, b); c < a in prediction, c ties b.
        let mixed = [
            rec(7.0, Some(5.0), 99.0),
            rec(4.0, None, 3.0),
            rec(4.0, Some(2.0), 99.0),
        ];
        assert_eq!(concordance_index(&mixed).unwrap(), 0.75);
        assert!(concordance_index(&[rec(1.0, None, 3.0), rec(2.0, None, 4.0)]).is_err());
    }

    #[test]
    fn equal_observed_times_are_not_comparable() {
        let r = [rec(1.0, Some(2.0), 9.0), rec(5.0, Some(2.0), 9.0), rec(3.0, None, 2.0)];
        assert!(concordance_index(&r).is_err());
    }

    #[test]
    fn auc_examples() {
        let sep = [
            rec(1.0, Some(1.0), 5.0),
            rec(2.0, Some(1.0), 5.0),
            rec(9.0, None, 5.0),
            rec(8.0, None, 5.0),
        ];
        assert_eq!(nonreturning_auc(&sep).unwrap(), 1.0);
        let flat = [rec(1.0, Some(1.0), 5.0), rec(1.0, None, 5.0), rec(1.0, None, 5.0)];
        assert_eq!(nonreturning_auc(&flat).unwrap(), 0.5);
        assert!(nonreturning_auc(&[rec(1.0, None, 5.0)]).is_err());
    }

    #[test]
    fn recall_examples() {
        let r = [
            rec(6.0, None, 5.0),
            rec(4.0, None, 5.0),
            rec(5.0, None, 5.0),
            rec(10.0, Some(1.0), 5.0),
            rec(20.0, None, 10.0),
        ];
        // Only the first and last censored records exceed their horizons.
        assert_eq!(nonreturning_recall(&r).unwrap(), 0.5);
        let all = [rec(6.0, None, 5.0), rec(11.0, None, 10.0)];
        assert_eq!(nonreturning_recall(&all).unwrap(), 1.0);
    }

    #[test]
    fn breakdown_examples() {
        let mut r = rec(12.0, Some(10.0), 50.0);
        r.active_day_count = 70;
        let b = error_breakdowns(&[r.clone()]).unwrap();
        assert_eq!(b.by_week[&1], BucketError { count: 1, rmse: 2.0, mean_error: 2.0 });
        assert!(b.by_active_days.contains_key(&ACTIVE_DAY_CAP));
        assert_eq!(rmse_for_active_days(&[r], 64..=usize::MAX).unwrap(), 2.0);
    }

    #[test]
    fn prediction_csv_round_trip() {
        let mut a = rec(1.5, Some(2.25), 30.0);
        a.user_id = "user,\"x\"".into();
        a.active_day_count = 4;
        a.last_session_end = 400.5;
        let b = rec(200.0, None, 130.0);
        let epoch = DateTime::<Utc>::UNIX_EPOCH;
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &[a.clone(), b.clone()], epoch).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("1971-02-07T00:00:00Z"), "{text}");
        assert_eq!(read_predictions_csv(buf.as_slice()).unwrap(), vec![a, b]);
    }

    #[test]
    fn wrong_header_is_a_mismatch() {
        let err = read_predictions_csv("a,b\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)));
    }
}
