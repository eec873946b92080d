//! Token, latency and cost accounting.
//!
//! Costs are kept as integer pico-units (1e-12 of a currency unit) so that
//! totals equal `tokens x price` exactly, whatever the summation order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelRole;
use crate::stats::Distribution;

const PICO: f64 = 1e12;

/// A monetary amount in pico-units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cost(pub u64);

impl Cost {
    pub fn from_units(units: f64) -> Cost {
        Cost((units * PICO).round().max(0.0) as u64)
    }

    pub fn units(&self) -> f64 {
        self.0 as f64 / PICO
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        Cost(iter.map(|c| c.0).sum())
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.units())
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Cost, D::Error> {
        let units = f64::deserialize(deserializer)?;
        if !units.is_finite() || units < 0.0 {
            return Err(serde::de::Error::custom(format!("invalid cost {units}")));
        }
        Ok(Cost::from_units(units))
    }
}

/// Per-token prices, stored in pico-units per token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Price {
    pub input_pico_per_token: u64,
    pub output_pico_per_token: u64,
}

impl Price {
    /// Builds a price from the usual "currency per million tokens" quotes.
    pub fn per_million(input: f64, output: f64) -> Price {
        // 1 unit per million tokens = 1e6 pico-units per token.
        Price {
            input_pico_per_token: (input * 1e6).round().max(0.0) as u64,
            output_pico_per_token: (output * 1e6).round().max(0.0) as u64,
        }
    }

    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> Cost {
        Cost(input_tokens * self.input_pico_per_token + output_tokens * self.output_pico_per_token)
    }
}

/// Usage attributed to one operation (a model call, possibly with retries).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Seconds.
    pub wall_time: f64,
    pub cost: Cost,
}

impl UsageRecord {
    pub fn add(&mut self, other: &UsageRecord) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.wall_time += other.wall_time;
        self.cost = self.cost + other.cost;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok,
    SchemaInvalid,
    Transport,
    RateLimited,
    Fatal,
}

/// One provider attempt, as written to the usage log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub call_id: u64,
    pub role: ModelRole,
    pub model: String,
    pub attempt: u32,
    pub outcome: AttemptOutcome,
    pub at: DateTime<Utc>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time: f64,
    pub price: Price,
    pub cost: Cost,
}

/// Append-only usage log, in memory and optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct UsageLog {
    next_call: AtomicU64,
    entries: Mutex<Vec<UsageEntry>>,
    file: Option<PathBuf>,
}

impl UsageLog {
    pub fn in_memory() -> Self {
        UsageLog::default()
    }

    pub fn with_file(path: impl Into<PathBuf>) -> Self {
        UsageLog { file: Some(path.into()), ..UsageLog::default() }
    }

    pub fn next_call_id(&self) -> u64 {
        self.next_call.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn append(&self, entry: UsageEntry) {
        let mut entries = self.entries.lock().expect("usage log poisoned");
        if let Some(path) = &self.file {
            // Written under the lock so lines never interleave.
            if let Err(err) = append_line(path, &entry) {
                tracing::warn!(path = %path.display(), %err, "failed to append usage entry");
            }
        }
        entries.push(entry);
    }

    pub fn entries(&self) -> Vec<UsageEntry> {
        self.entries.lock().expect("usage log poisoned").clone()
    }

    pub fn load(path: &Path) -> Result<Vec<UsageEntry>, crate::record::RecordError> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        crate::record::read_jsonl(path)
    }
}

fn append_line(path: &Path, entry: &UsageEntry) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
    line.push('\n');
    file.write_all(line.as_bytes())
}

#[derive(Debug, Clone, Default)]
pub struct UsageFilter {
    pub roles: Option<Vec<ModelRole>>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl UsageFilter {
    pub fn role(role: ModelRole) -> Self {
        UsageFilter { roles: Some(vec![role]), ..UsageFilter::default() }
    }

    fn matches(&self, entry: &UsageEntry) -> bool {
        self.roles.as_ref().is_none_or(|r| r.contains(&entry.role))
            && self.from.is_none_or(|from| entry.at >= from)
            && self.to.is_none_or(|to| entry.at <= to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub calls: usize,
    pub attempts: usize,
    pub total: UsageRecord,
    /// Per-call wall time; absent when no call matched.
    pub wall_time: Option<Distribution>,
    /// Per-call cost in currency units; absent when no call matched.
    pub cost: Option<Distribution>,
}

/// Aggregates matching log entries per call. Totals are exact sums.
pub fn usage_totals(entries: &[UsageEntry], filter: &UsageFilter) -> UsageSummary {
    let mut per_call: std::collections::BTreeMap<u64, UsageRecord> = std::collections::BTreeMap::new();
    let mut attempts = 0;
    for entry in entries.iter().filter(|e| filter.matches(e)) {
        attempts += 1;
        per_call.entry(entry.call_id).or_default().add(&UsageRecord {
            input_tokens: entry.input_tokens,
            output_tokens: entry.output_tokens,
            wall_time: entry.wall_time,
            cost: entry.cost,
        });
    }
    let mut total = UsageRecord::default();
    for record in per_call.values() {
        total.add(record);
    }
    let wall: Vec<f64> = per_call.values().map(|r| r.wall_time).collect();
    let cost: Vec<f64> = per_call.values().map(|r| r.cost.units()).collect();
    UsageSummary {
        calls: per_call.len(),
        attempts,
        total,
        wall_time: Distribution::from_samples(&wall),
        cost: Distribution::from_samples(&cost),
    }
}
