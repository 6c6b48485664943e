//! JSON-lines session files.
//!
//! One session per line:
//!
//! ```json
//! {"user_id": "u0001", "start_ts": "2017-03-04T18:22:05.000Z", "duration_s": 412.0,
//!  "markers": {"device": "mobile", "pages_viewed": 7}}
//! ```
//!
//! String-valued markers become discrete markers with a sorted label
//! vocabulary, numeric markers become continuous markers. Day of week, day of
//! month and hour of day are always derived from `start_ts` (UTC). Day 0 is
//! midnight UTC of the earliest session's date.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{
    DiscreteMarker, MarkerSchema, Session, CALENDAR_MARKERS, DAY_OF_MONTH, DAY_OF_WEEK,
    HOUR_OF_DAY,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SessionLine {
    user_id: String,
    start_ts: String,
    duration_s: f64,
    #[serde(default)]
    markers: Map<String, Value>,
}

/// Sessions read from a file together with the schema and epoch they imply.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub sessions: Vec<Session>,
    pub schema: MarkerSchema,
    pub epoch: DateTime<Utc>,
}

pub fn parse_instant(text: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(t.and_utc());
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(text, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc());
    }
    Err(Error::record(text, "not an ISO-8601 timestamp"))
}

/// `(day_of_week, day_of_month, hour_of_day)` indices, Monday = 0, day 1 = 0.
pub fn calendar_markers(instant: DateTime<Utc>) -> (u32, u32, u32) {
    (
        instant.weekday().num_days_from_monday(),
        instant.day0(),
        instant.hour(),
    )
}

pub fn instant_at(epoch: DateTime<Utc>, days: f64) -> DateTime<Utc> {
    epoch + Duration::milliseconds((days * 86_400_000.0).round() as i64)
}

pub fn read_sessions_jsonl<R: BufRead>(reader: R) -> Result<Ingested> {
    let mut lines = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SessionLine = serde_json::from_str(&line)
            .map_err(|e| Error::record(format!("line {}", n + 1), e.to_string()))?;
        let instant = parse_instant(&parsed.start_ts)
            .map_err(|_| Error::record(format!("line {}", n + 1), "bad start_ts"))?;
        lines.push((n + 1, instant, parsed));
    }

    let Some(earliest) = lines.iter().map(|(_, t, _)| *t).min() else {
        return Ok(Ingested {
            sessions: vec![],
            schema: MarkerSchema::web_sessions(&[]),
            epoch: DateTime::<Utc>::UNIX_EPOCH,
        });
    };
    let epoch = earliest
        .date_naive()
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc();

    let mut vocab: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut continuous: BTreeSet<String> = BTreeSet::new();
    for (n, _, line) in &lines {
        for (name, value) in &line.markers {
            if CALENDAR_MARKERS.contains(&name.as_str()) {
                continue;
            }
            match value {
                Value::String(s) => {
                    vocab.entry(name.clone()).or_default().insert(s.clone());
                }
                Value::Bool(b) => {
                    vocab.entry(name.clone()).or_default().insert(b.to_string());
                }
                Value::Number(_) => {
                    continuous.insert(name.clone());
                }
                Value::Null => {}
                _ => {
                    return Err(Error::record(
                        format!("line {n}"),
                        format!("marker {name} must be a string, number or boolean"),
                    ))
                }
            }
        }
    }
    if let Some(name) = vocab.keys().find(|k| continuous.contains(*k)) {
        return Err(Error::InvalidInput(format!(
            "marker {name} mixes string and numeric values"
        )));
    }

    let mut discrete: Vec<DiscreteMarker> = vocab
        .iter()
        .map(|(name, labels)| DiscreteMarker {
            name: name.clone(),
            cardinality: labels.len(),
            labels: labels.iter().cloned().collect(),
        })
        .collect();
    for (name, card) in [(DAY_OF_WEEK, 7), (DAY_OF_MONTH, 31), (HOUR_OF_DAY, 24)] {
        discrete.push(DiscreteMarker {
            name: name.into(),
            cardinality: card,
            labels: vec![],
        });
    }
    let schema = MarkerSchema {
        discrete,
        continuous: continuous.into_iter().collect(),
    };

    let mut sessions = Vec::with_capacity(lines.len());
    for (n, instant, line) in lines {
        if !(line.duration_s.is_finite() && line.duration_s >= 0.0) {
            return Err(Error::record(format!("line {n}"), "duration_s must be >= 0"));
        }
        let start = (instant - epoch).num_milliseconds() as f64 / 86_400_000.0;
        let (dow, dom, hour) = calendar_markers(instant);
        let mut session = Session::new(line.user_id, start, line.duration_s / 86_400.0)
            .with_discrete(DAY_OF_WEEK, dow)
            .with_discrete(DAY_OF_MONTH, dom)
            .with_discrete(HOUR_OF_DAY, hour);
        for (name, value) in line.markers {
            if CALENDAR_MARKERS.contains(&name.as_str()) {
                continue;
            }
            let label = match &value {
                Value::String(s) => Some(s.clone()),
                Value::Bool(b) => Some(b.to_string()),
                _ => None,
            };
            if let Some(label) = label {
                let labels = &vocab[&name];
                let index = labels.iter().position(|l| *l == label).expect("label in vocab");
                session.discrete_markers.insert(name, index as u32);
            } else if let Some(x) = value.as_f64() {
                session.continuous_markers.insert(name, x);
            }
        }
        sessions.push(session);
    }
    Ok(Ingested {
        sessions,
        schema,
        epoch,
    })
}

/// Writes sessions in the format [`read_sessions_jsonl`] accepts.
pub fn write_sessions_jsonl<W: Write>(
    mut out: W,
    sessions: &[Session],
    schema: &MarkerSchema,
    epoch: DateTime<Utc>,
) -> Result<()> {
    for s in sessions {
        let mut markers = Map::new();
        for (name, &index) in &s.discrete_markers {
            if CALENDAR_MARKERS.contains(&name.as_str()) {
                continue;
            }
            let label = schema
                .discrete
                .iter()
                .find(|m| &m.name == name)
                .and_then(|m| m.labels.get(index as usize).cloned())
                .unwrap_or_else(|| index.to_string());
            markers.insert(name.clone(), Value::String(label));
        }
        for (name, &value) in &s.continuous_markers {
            markers.insert(name.clone(), serde_json::json!(value));
        }
        let line = SessionLine {
            user_id: s.user_id.clone(),
            start_ts: instant_at(epoch, s.start_time).to_rfc3339_opts(SecondsFormat::Millis, true),
            duration_s: (s.duration * 86_400.0 * 1000.0).round() / 1000.0,
            markers,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DEVICE, PAGES_VIEWED};
    use chrono::TimeZone;

    #[test]
    fn parses_lines_and_derives_calendar_markers() {
        let text = r#"{"user_id":"u1","start_ts":"2017-01-02T10:30:00Z","duration_s":600,"markers":{"device":"mobile","pages_viewed":4}}
{"user_id":"u1","start_ts":"2017-01-03T23:00:00Z","duration_s":0,"markers":{"device":"desktop"}}

{"user_id":"u2","start_ts":"2017-01-01T08:00:00+00:00","duration_s":60,"markers":{}}
"#;
        let ing = read_sessions_jsonl(text.as_bytes()).unwrap();
        assert_eq!(ing.epoch, Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap());
        assert_eq!(ing.sessions.len(), 3);
        assert_eq!(ing.schema.discrete[0].name, DEVICE);
        assert_eq!(ing.schema.discrete[0].labels, vec!["desktop", "mobile"]);
        assert_eq!(ing.schema.continuous, vec![PAGES_VIEWED.to_string()]);
        let s = &ing.sessions[0];
        assert!((s.start_time - (1.0 + 10.5 / 24.0)).abs() < 1e-12);
        assert!((s.duration - 600.0 / 86_400.0).abs() < 1e-15);
        assert_eq!(s.discrete_markers[DEVICE], 1);
        // 2017-01-02 was a Monday.
        assert_eq!(s.discrete_markers[DAY_OF_WEEK], 0);
        assert_eq!(s.discrete_markers[DAY_OF_MONTH], 1);
        assert_eq!(s.discrete_markers[HOUR_OF_DAY], 10);
        assert_eq!(s.continuous_markers[PAGES_VIEWED], 4.0);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let text = "{\"user_id\":\"u1\",\"start_ts\":\"2017-01-02T10:30:00Z\",\"duration_s\":1}\nnot json\n";
        let err = read_sessions_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn write_then_read_preserves_sessions() {
        let epoch = Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap();
        let schema = MarkerSchema::web_sessions(&["app", "desktop"]);
        let t = 3.25;
        let (dow, dom, hour) = calendar_markers(instant_at(epoch, t));
        let s = Session::new("u9", t, 0.01)
            .with_discrete(DEVICE, 1)
            .with_discrete(DAY_OF_WEEK, dow)
            .with_discrete(DAY_OF_MONTH, dom)
            .with_discrete(HOUR_OF_DAY, hour)
            .with_continuous(PAGES_VIEWED, 3.0);
        let other = Session::new("u8", 0.5, 0.0).with_discrete(DEVICE, 0);
        let mut buf = Vec::new();
        write_sessions_jsonl(&mut buf, &[s.clone(), other], &schema, epoch).unwrap();
        let ing = read_sessions_jsonl(buf.as_slice()).unwrap();
        assert_eq!(ing.epoch, epoch);
        assert_eq!(ing.schema, schema);
        let back = &ing.sessions[0];
        assert_eq!(back.discrete_markers, s.discrete_markers);
        assert!((back.start_time - t).abs() < 1e-8);
        assert!((back.duration - 0.01).abs() < 1e-8);
    }
}
