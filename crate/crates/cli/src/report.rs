//! `drift-report`: per-kind counts and per-series drift/promotion tallies
//! from an audit log.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use digit_core::audit::{AuditEvent, AuditKind};

#[derive(Debug, Default, PartialEq, Serialize)]
pub struct SeriesTally {
    pub drift_reports: usize,
    pub drift_triggered: usize,
    pub promoted: usize,
    pub rejected: usize,
    /// Version that became active last, if any.
    pub active_version: Option<u64>,
    pub last_rolling_rmse: Option<f64>,
}

#[derive(Debug, Default, PartialEq, Serialize)]
pub struct DriftSummary {
    pub events: usize,
    pub first_t: Option<f64>,
    pub last_t: Option<f64>,
    /// One entry per event kind that occurs.
    pub counts: BTreeMap<AuditKind, usize>,
    pub series: BTreeMap<String, SeriesTally>,
}

impl DriftSummary {
    pub fn from_events(events: &[AuditEvent]) -> Self {
        let mut s = DriftSummary { events: events.len(), ..Self::default() };
        s.first_t = events.first().map(|e| e.t);
        s.last_t = events.last().map(|e| e.t);
        for e in events {
            *s.counts.entry(e.event).or_default() += 1;
            let key = e.detail.get("key").and_then(Value::as_str);
            match (e.event, key) {
                (AuditKind::Drift, Some(k)) => {
                    let t = s.series.entry(k.to_string()).or_default();
                    t.drift_reports += 1;
                    if e.detail["triggered"].as_bool() == Some(true) {
                        t.drift_triggered += 1;
                    }
                    t.last_rolling_rmse = e.detail["rolling_rmse"].as_f64();
                }
                (AuditKind::Promote, Some(k)) => {
                    let t = s.series.entry(k.to_string()).or_default();
                    if e.detail["promoted"].as_bool() == Some(true) {
                        t.promoted += 1;
                        t.active_version = e.detail["new_version"].as_u64();
                    } else {
                        t.rejected += 1;
                    }
                }
                _ => {}
            }
        }
        s
    }
}
