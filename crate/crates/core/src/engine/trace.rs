use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ISO")]
    Iso,
    #[serde(rename = "RSO")]
    Rso,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Iso => "ISO",
            Phase::Rso => "RSO",
        }
    }
}

/// One completed optimization iteration. Losses are evaluated at the field
/// produced by that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: u64,
    pub phase: Phase,
    pub full_loss: f64,
    pub roi_loss: Option<f64>,
    pub roi_id: Option<usize>,
    pub wall_ms: u64,
}

/// Losses of the starting field, before any ISO/RSO iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub full_loss: f64,
    pub roi_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub initial: Option<Baseline>,
    pub entries: Vec<TraceEntry>,
    /// Iteration counts at which a run was cancelled.
    #[serde(default)]
    pub cancelled_at: Vec<u64>,
}

pub const CSV_HEADER: &str = "iteration,phase,full_loss,roi_loss,roi_id,wall_ms";

impl LossTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_iteration(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.iteration)
    }

    pub(crate) fn push(&mut self, entry: TraceEntry) {
        debug_assert!(entry.iteration > self.last_iteration() || self.entries.is_empty());
        self.entries.push(entry);
    }

    /// Entries with `iteration > since`. A negative `since` returns everything.
    pub fn since(&self, since: i64) -> &[TraceEntry] {
        if since < 0 {
            return &self.entries;
        }
        let start = self.entries.partition_point(|e| e.iteration as i64 <= since);
        &self.entries[start..]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.entries.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = write!(out, "{},{},{}", e.iteration, e.phase.as_str(), e.full_loss);
            match e.roi_loss {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
            match e.roi_id {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
            let _ = writeln!(out, ",{}", e.wall_ms);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::argument("trace", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: u64, phase: Phase, roi: Option<f64>) -> TraceEntry {
        TraceEntry {
            iteration: i,
            phase,
            full_loss: 0.125 / i as f64,
            roi_loss: roi,
            roi_id: roi.map(|_| 0),
            wall_ms: i * 3,
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(LossTrace::default().to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_rows_and_since() {
        let mut t = LossTrace::default();
        t.push(entry(1, Phase::Iso, None));
        t.push(entry(2, Phase::Rso, Some(0.5)));
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "1,ISO,0.125,,,3");
        assert_eq!(lines[2], "2,RSO,0.0625,0.5,0,6");
        assert_eq!(t.since(-1).len(), 2);
        assert_eq!(t.since(0).len(), 2);
        assert_eq!(t.since(1)[0].iteration, 2);
        assert!(t.since(2).is_empty());
    }

    #[test]
    fn json_round_trip() {
        let mut t = LossTrace {
            initial: Some(Baseline {
                full_loss: 0.3,
                roi_loss: Some(0.7),
            }),
            ..Default::default()
        };
        for i in 1..=5 {
            t.push(entry(i, if i > 2 { Phase::Rso } else { Phase::Iso }, (i > 2).then_some(1.0 / 3.0)));
        }
        t.cancelled_at.push(5);
        assert_eq!(LossTrace::from_json(&t.to_json()).unwrap(), t);
    }
}
