//! Operation process definitions, timestamp logs and the pure part of
//! capture segmentation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::TimelineError;
use crate::phase::PhaseLabel;
use crate::time::Timestamp;

/// One step the operator is prompted to perform.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    pub name: String,
    pub phase: PhaseLabel,
    #[serde(default)]
    pub instructions: String,
    /// Seconds that must elapse between start and confirmed end.
    #[serde(default)]
    pub min_duration: u64,
}

/// Predefined operation sequence for one device category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationProcess {
    pub device_category: String,
    pub operations: Vec<Operation>,
}

impl OperationProcess {
    pub fn validate(&self) -> Result<(), TimelineError> {
        if self.operations.is_empty() {
            return Err(TimelineError::EmptyProcess);
        }
        let mut seen = BTreeSet::new();
        for op in &self.operations {
            if !seen.insert(op.name.as_str()) {
                return Err(TimelineError::DuplicateOperation(op.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampEntry {
    pub operation: String,
    pub phase: PhaseLabel,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimestampEntry {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Log of the operations performed on one device.
///
/// Entries are closed intervals, sorted by start, and strictly disjoint:
/// each entry starts after the previous one ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampFile {
    pub device_id: String,
    pub entries: Vec<TimestampEntry>,
    /// False when the session was aborted before every operation finished.
    pub complete: bool,
}

impl TimestampFile {
    pub fn new(device_id: impl Into<String>) -> Self {
        TimestampFile {
            device_id: device_id.into(),
            entries: Vec::new(),
            complete: true,
        }
    }

    /// Appends an entry, rejecting anything that would break ordering.
    pub fn push(&mut self, entry: TimestampEntry) -> Result<(), TimelineError> {
        check_entry(self.entries.last(), &entry, self.entries.len())?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TimelineError> {
        let mut prev = None;
        for (i, e) in self.entries.iter().enumerate() {
            check_entry(prev, e, i)?;
            prev = Some(e);
        }
        Ok(())
    }

    pub fn windows(&self) -> Vec<(Timestamp, Timestamp)> {
        self.entries.iter().map(|e| (e.start, e.end)).collect()
    }
}

fn check_entry(
    prev: Option<&TimestampEntry>,
    e: &TimestampEntry,
    index: usize,
) -> Result<(), TimelineError> {
    if e.end < e.start {
        return Err(TimelineError::EndBeforeStart {
            index,
            operation: e.operation.clone(),
        });
    }
    if let Some(p) = prev {
        if e.start <= p.end {
            return Err(TimelineError::NotMonotonic {
                index,
                operation: e.operation.clone(),
            });
        }
    }
    Ok(())
}

/// Where every packet of a capture landed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowAssignment {
    /// Window index per packet, `None` for residue.
    pub window_of: Vec<Option<usize>>,
    pub counts: Vec<usize>,
    pub residue: usize,
}

/// Assigns each packet timestamp to the closed window containing it.
///
/// `windows` must be sorted and disjoint, as guaranteed by
/// [`TimestampFile::validate`].
pub fn assign_to_windows(
    timestamps: &[Timestamp],
    windows: &[(Timestamp, Timestamp)],
) -> WindowAssignment {
    let mut counts = alloc::vec![0usize; windows.len()];
    let mut residue = 0;
    let window_of = timestamps
        .iter()
        .map(|&t| {
            // Last window whose start is <= t.
            let idx = windows.partition_point(|w| w.0 <= t);
            let hit = idx.checked_sub(1).filter(|&i| t <= windows[i].1);
            match hit {
                Some(i) => counts[i] += 1,
                None => residue += 1,
            }
            hit
        })
        .collect();
    WindowAssignment {
        window_of,
        counts,
        residue,
    }
}

/// How a timestamp entry relates to the time span actually captured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanCoverage {
    Inside,
    PartiallyOutside,
    EntirelyOutside,
    /// The capture has no packets, so there is no span.
    EmptyCapture,
}

pub fn span_coverage(span: Option<(Timestamp, Timestamp)>, window: (Timestamp, Timestamp)) -> SpanCoverage {
    let Some((first, last)) = span else {
        return SpanCoverage::EmptyCapture;
    };
    if window.1 < first || window.0 > last {
        SpanCoverage::EntirelyOutside
    } else if window.0 < first || window.1 > last {
        SpanCoverage::PartiallyOutside
    } else {
        SpanCoverage::Inside
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(op: &str, start: i64, end: i64) -> TimestampEntry {
        TimestampEntry {
            operation: op.into(),
            phase: PhaseLabel::Setup,
            start: Timestamp::from_secs(start),
            end: Timestamp::from_secs(end),
        }
    }

    #[test]
    fn boundary_arithmetic() {
        let ts: Vec<_> = [1, 5, 9].iter().map(|&s| Timestamp::from_secs(s)).collect();
        let windows = vec![
            (Timestamp::from_secs(0), Timestamp::from_secs(4)),
            (Timestamp::from_secs(6), Timestamp::from_secs(10)),
        ];
        let a = assign_to_windows(&ts, &windows);
        assert_eq!(a.counts, vec![1, 1]);
        assert_eq!(a.residue, 1);
        assert_eq!(a.window_of, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn closed_interval_includes_both_ends() {
        let ts = [Timestamp::from_secs(2), Timestamp::from_secs(4)];
        let a = assign_to_windows(&ts, &[(Timestamp::from_secs(2), Timestamp::from_secs(4))]);
        assert_eq!(a.counts, vec![2]);
    }

    #[test]
    fn push_rejects_overlap_and_reversed() {
        let mut f = TimestampFile::new("cam");
        f.push(entry("a", 0, 10)).unwrap();
        assert!(matches!(f.push(entry("b", 10, 12)), Err(TimelineError::NotMonotonic { .. })));
        assert!(matches!(f.push(entry("c", 20, 15)), Err(TimelineError::EndBeforeStart { .. })));
        f.push(entry("d", 11, 12)).unwrap();
        assert_eq!(f.entries.len(), 2);
        f.validate().unwrap();
    }

    #[test]
    fn duplicate_operation_names_rejected() {
        let op = Operation {
            name: "bind".into(),
            phase: PhaseLabel::Setup,
            instructions: String::new(),
            min_duration: 0,
        };
        let p = OperationProcess {
            device_category: "camera".into(),
            operations: vec![op.clone(), op],
        };
        assert_eq!(p.validate(), Err(TimelineError::DuplicateOperation("bind".into())));
    }

    #[test]
    fn coverage_classes() {
        let span = Some((Timestamp::from_secs(10), Timestamp::from_secs(20)));
        let w = |a, b| (Timestamp::from_secs(a), Timestamp::from_secs(b));
        assert_eq!(span_coverage(span, w(12, 18)), SpanCoverage::Inside);
        assert_eq!(span_coverage(span, w(5, 15)), SpanCoverage::PartiallyOutside);
        assert_eq!(span_coverage(span, w(30, 40)), SpanCoverage::EntirelyOutside);
        assert_eq!(span_coverage(None, w(0, 1)), SpanCoverage::EmptyCapture);
    }
}
