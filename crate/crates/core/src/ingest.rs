//! Loading event logs, assignments and device maps, and deriving the three
//! covariates every subgrouping downstream is built on.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Bucket, DeviceClass, Engagement, UserId};

/// Default minimum number of users for a device model to keep its own class.
pub const DEFAULT_DEVICE_USER_THRESHOLD: usize = 10_000;

/// Default length of the pre-period window used for engagement counts.
pub const DEFAULT_PRE_WINDOW_MS: i64 = 7 * 24 * 60 * 60 * 1000;

/// One logged performance observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEvent {
    pub user_id: UserId,
    pub metric_id: String,
    /// Latency in milliseconds; finite and non-negative.
    pub value: f64,
    /// Epoch milliseconds; positive.
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub user_id: UserId,
    pub bucket: Bucket,
}

/// Per-user covariates: bucket (X1), device class (X2), engagement (X3).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCovariates {
    pub user_id: UserId,
    pub bucket: Bucket,
    pub device_class: DeviceClass,
    pub engagement_level: Engagement,
    pub pre_period_event_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EventFormat::Csv),
            "jsonl" | "ndjson" => Ok(EventFormat::Jsonl),
            other => Err(format!("unknown event format `{other}` (expected csv or jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

/// Rows that parsed but violated a [`PerfEvent`] invariant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub rows_read: u64,
    pub rows_accepted: u64,
    pub rejected: Vec<RejectedRow>,
}

impl ParseSummary {
    pub fn rejected_count(&self) -> usize {
        self.rejected.len()
    }
}

const EVENT_FIELDS: [&str; 4] = ["user_id", "metric_id", "value", "timestamp"];

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for name in expected {
        if !found.iter().any(|h| h.trim() == *name) {
            return Err(Error::parse(1, name, "missing column in header"));
        }
    }
    Ok(())
}

fn column(header: &csv::StringRecord, name: &str) -> usize {
    header.iter().position(|h| h.trim() == name).expect("header validated")
}

enum RowCheck {
    Accept(PerfEvent),
    Reject(String),
}

fn validate_event(user_id: String, metric_id: String, value: f64, timestamp: i64) -> RowCheck {
    if !value.is_finite() {
        RowCheck::Reject(format!("value {value} is not finite"))
    } else if value < 0.0 {
        RowCheck::Reject(format!("value {value} is negative"))
    } else if timestamp <= 0 {
        RowCheck::Reject(format!("timestamp {timestamp} is not positive"))
    } else {
        RowCheck::Accept(PerfEvent {
            user_id: UserId::from(user_id),
            metric_id,
            value,
            timestamp,
        })
    }
}

fn parse_value(line: u64, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|e| Error::parse(line, "value", format!("`{raw}`: {e}")))
}

fn parse_timestamp(line: u64, raw: &str) -> Result<i64> {
    raw.trim()
        .parse::<i64>()
        .map_err(|e| Error::parse(line, "timestamp", format!("`{raw}`: {e}")))
}

fn nonempty(line: u64, field: &str, raw: &str) -> Result<String> {
    let s = raw.trim();
    if s.is_empty() {
        Err(Error::parse(line, field, "empty"))
    } else {
        Ok(s.to_string())
    }
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source)
}

/// Loads performance events. Malformed rows abort with the offending line and
/// field; rows that parse but violate an invariant (negative or non-finite
/// value, non-positive timestamp) are skipped and listed in the summary.
pub fn load_events<R: Read>(source: R, format: EventFormat) -> Result<(Vec<PerfEvent>, ParseSummary)> {
    match format {
        EventFormat::Csv => load_events_csv(source),
        EventFormat::Jsonl => load_events_jsonl(source),
    }
}

fn load_events_csv<R: Read>(source: R) -> Result<(Vec<PerfEvent>, ParseSummary)> {
    let mut rdr = csv_reader(source);
    let header = rdr.headers()?.clone();
    check_header(&header, &EVENT_FIELDS)?;
    let idx = EVENT_FIELDS.map(|f| column(&header, f));

    let mut events = Vec::new();
    let mut summary = ParseSummary::default();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        summary.rows_read += 1;
        let field = |i: usize| {
            record
                .get(idx[i])
                .ok_or_else(|| Error::parse(line, EVENT_FIELDS[i], "missing"))
        };
        let user_id = nonempty(line, "user_id", field(0)?)?;
        let metric_id = nonempty(line, "metric_id", field(1)?)?;
        let value = parse_value(line, field(2)?)?;
        let timestamp = parse_timestamp(line, field(3)?)?;
        match validate_event(user_id, metric_id, value, timestamp) {
            RowCheck::Accept(e) => {
                summary.rows_accepted += 1;
                events.push(e);
            }
            RowCheck::Reject(reason) => summary.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok((events, summary))
}

fn json_string(line: u64, obj: &serde_json::Map<String, serde_json::Value>, field: &str) -> Result<String> {
    match obj.get(field) {
        Some(serde_json::Value::String(s)) => nonempty(line, field, s),
        Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(Error::parse(line, field, format!("expected a string, got {other}"))),
        None => Err(Error::parse(line, field, "missing")),
    }
}

fn load_events_jsonl<R: Read>(source: R) -> Result<(Vec<PerfEvent>, ParseSummary)> {
    let mut events = Vec::new();
    let mut summary = ParseSummary::default();
    for (i, raw) in BufReader::new(source).lines().enumerate() {
        let raw = raw?;
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        summary.rows_read += 1;
        let value: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| Error::parse(line, "<record>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse(line, "<record>", "expected a JSON object"))?;
        let user_id = json_string(line, obj, "user_id")?;
        let metric_id = json_string(line, obj, "metric_id")?;
        let v = match obj.get("value") {
            Some(serde_json::Value::Number(n)) => n
                .as_f64()
                .ok_or_else(|| Error::parse(line, "value", "not representable"))?,
            Some(serde_json::Value::String(s)) => parse_value(line, s)?,
            Some(other) => return Err(Error::parse(line, "value", format!("expected a number, got {other}"))),
            None => return Err(Error::parse(line, "value", "missing")),
        };
        let ts = match obj.get("timestamp") {
            Some(serde_json::Value::Number(n)) => n
                .as_i64()
                .ok_or_else(|| Error::parse(line, "timestamp", format!("`{n}` is not an integer")))?,
            Some(serde_json::Value::String(s)) => parse_timestamp(line, s)?,
            Some(other) => {
                return Err(Error::parse(
                    line,
                    "timestamp",
                    format!("expected an integer, got {other}"),
                ))
            }
            None => return Err(Error::parse(line, "timestamp", "missing")),
        };
        match validate_event(user_id, metric_id, v, ts) {
            RowCheck::Accept(e) => {
                summary.rows_accepted += 1;
                events.push(e);
            }
            RowCheck::Reject(reason) => summary.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok((events, summary))
}

/// Loads `user_id,bucket` rows. A user listed twice is an error.
pub fn load_assignments<R: Read>(source: R) -> Result<Vec<Assignment>> {
    let mut rdr = csv_reader(source);
    let header = rdr.headers()?.clone();
    check_header(&header, &["user_id", "bucket"])?;
    let (iu, ib) = (column(&header, "user_id"), column(&header, "bucket"));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let user = nonempty(line, "user_id", record.get(iu).unwrap_or(""))?;
        let bucket = record
            .get(ib)
            .unwrap_or("")
            .parse::<Bucket>()
            .map_err(|e| Error::parse(line, "bucket", e))?;
        if !seen.insert(user.clone()) {
            return Err(Error::parse(
                line,
                "user_id",
                format!("user `{user}` assigned more than once"),
            ));
        }
        out.push(Assignment {
            user_id: UserId::from(user),
            bucket,
        });
    }
    Ok(out)
}

/// Loads `user_id,device_model` rows into a map. Later rows win.
pub fn load_device_map<R: Read>(source: R) -> Result<HashMap<UserId, String>> {
    let mut rdr = csv_reader(source);
    let header = rdr.headers()?.clone();
    check_header(&header, &["user_id", "device_model"])?;
    let (iu, id) = (column(&header, "user_id"), column(&header, "device_model"));
    let mut out = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let user = nonempty(line, "user_id", record.get(iu).unwrap_or(""))?;
        let model = nonempty(line, "device_model", record.get(id).unwrap_or(""))?;
        out.insert(UserId::from(user), model);
    }
    Ok(out)
}

/// Bookkeeping from [`derive_covariates`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateSummary {
    pub n_users: usize,
    /// Pre-period events from users that are not in the assignment list.
    pub excluded_events: u64,
    pub excluded_users: usize,
    /// Assigned users with no entry in the device map (classed as "Other").
    pub users_without_device: usize,
    /// Models collapsed into "Other" for having too few users.
    pub collapsed_models: usize,
    pub engagement_mean: f64,
}

/// Builds one [`UserCovariates`] per assignment, in assignment order.
///
/// * Device models with fewer than `device_user_threshold` assigned users,
///   and users absent from `device_map`, get the class `"Other"`.
/// * Engagement is high iff the user's pre-period event count is strictly
///   greater than the mean count over all assigned users (zeros included).
pub fn derive_covariates(
    pre_period_events: &[PerfEvent],
    assignments: &[Assignment],
    device_map: &HashMap<UserId, String>,
    device_user_threshold: usize,
) -> Result<(Vec<UserCovariates>, CovariateSummary)> {
    if assignments.is_empty() {
        return Err(Error::InsufficientData("no assigned users".into()));
    }
    let mut counts: HashMap<&UserId, u64> = HashMap::with_capacity(assignments.len());
    for a in assignments {
        if counts.insert(&a.user_id, 0).is_some() {
            return Err(Error::InvalidInput(format!(
                "user `{}` assigned more than once",
                a.user_id
            )));
        }
    }
    let mut summary = CovariateSummary {
        n_users: assignments.len(),
        ..Default::default()
    };
    let mut unassigned = HashSet::new();
    for e in pre_period_events {
        match counts.get_mut(&e.user_id) {
            Some(c) => *c += 1,
            None => {
                summary.excluded_events += 1;
                unassigned.insert(&e.user_id);
            }
        }
    }
    summary.excluded_users = unassigned.len();

    let mut model_users: HashMap<&str, usize> = HashMap::new();
    for a in assignments {
        if let Some(m) = device_map.get(&a.user_id) {
            *model_users.entry(m.as_str()).or_default() += 1;
        }
    }
    summary.collapsed_models = model_users.values().filter(|n| **n < device_user_threshold).count();
    let classes: HashMap<&str, DeviceClass> = model_users
        .iter()
        .map(|(m, n)| {
            let class = if *n >= device_user_threshold {
                DeviceClass::new(m)
            } else {
                DeviceClass::other()
            };
            (*m, class)
        })
        .collect();

    // count > mean  <=>  count * n > total, compared exactly in integers.
    let total: u128 = counts.values().map(|c| *c as u128).sum();
    let n = assignments.len() as u128;
    summary.engagement_mean = total as f64 / n as f64;

    let other = DeviceClass::other();
    let out = assignments
        .iter()
        .map(|a| {
            let count = counts[&a.user_id];
            let device_class = match device_map.get(&a.user_id) {
                Some(m) => classes[m.as_str()].clone(),
                None => {
                    summary.users_without_device += 1;
                    other.clone()
                }
            };
            UserCovariates {
                user_id: a.user_id.clone(),
                bucket: a.bucket,
                device_class,
                engagement_level: if count as u128 * n > total {
                    Engagement::High
                } else {
                    Engagement::Low
                },
                pre_period_event_count: count,
            }
        })
        .collect();
    Ok((out, summary))
}

/// Events of one metric split into pre-period (`[start - window, start)`) and
/// experiment (`>= start`) windows. Without a start, everything is
/// experiment-window data.
pub fn split_by_window(
    events: &[PerfEvent],
    metric_id: &str,
    experiment_start: Option<i64>,
    pre_window_ms: i64,
) -> (Vec<PerfEvent>, Vec<PerfEvent>) {
    let mut pre = Vec::new();
    let mut during = Vec::new();
    for e in events.iter().filter(|e| e.metric_id == metric_id) {
        match experiment_start {
            Some(start) if e.timestamp < start => {
                if e.timestamp >= start - pre_window_ms {
                    pre.push(e.clone());
                }
            }
            _ => during.push(e.clone()),
        }
    }
    (pre, during)
}
