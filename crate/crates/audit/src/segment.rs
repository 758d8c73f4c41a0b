//! Splits a raw capture into one file per logged operation window.

use std::path::{Path, PathBuf};

use lifecycle_audit_core::capture::{read_capture, CaptureFormat, CaptureWarning};
use lifecycle_audit_core::timeline::{assign_to_windows, span_coverage, SpanCoverage, TimestampFile};
use lifecycle_audit_core::{PhaseLabel, Timestamp};
use serde::{Deserialize, Serialize};

use crate::error::{self, AuditError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSegment {
    pub device_id: String,
    pub index: usize,
    pub operation: String,
    pub phase: PhaseLabel,
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub segment: PhaseSegment,
    /// File name inside the output directory.
    pub file: String,
    pub packets: usize,
    pub coverage: SpanCoverage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub device_id: String,
    pub total_records: usize,
    pub clock_offset_ms: i64,
    pub segments: Vec<SegmentOutput>,
    pub residue_file: String,
    pub residue_packets: usize,
    pub timestamps_complete: bool,
    pub capture_warnings: Vec<CaptureWarning>,
    pub warnings: Vec<String>,
}

impl SegmentReport {
    pub fn path_of(&self, out_dir: &Path, index: usize) -> PathBuf {
        out_dir.join(&self.segments[index].file)
    }
}

fn file_safe(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if cleaned.is_empty() {
        "op".into()
    } else {
        cleaned
    }
}

/// Writes `<idx>_<phase>_<operation>.<ext>` per entry, `residue.<ext>` and
/// `segments.json` into `out_dir`.
///
/// A packet belongs to an entry when `start <= t + offset <= end`, where
/// `offset` corrects a capture host clock that differs from the host that
/// logged the timestamps. Output files copy the input's record bytes, so
/// reruns are byte-identical.
pub fn segment_capture(
    raw: &Path,
    timestamps: &TimestampFile,
    out_dir: &Path,
    clock_offset_ms: i64,
) -> Result<SegmentReport, AuditError> {
    timestamps.validate().map_err(|e| AuditError::Validation(e.to_string()))?;
    let bytes = error::read(raw)?;
    let cap = read_capture(&bytes).map_err(|source| AuditError::Capture {
        path: raw.to_path_buf(),
        source,
    })?;
    error::create_dir(out_dir)?;
    let ext = match cap.format {
        CaptureFormat::PcapNg => "pcapng",
        CaptureFormat::Pcap { .. } => "pcap",
    };
    let times: Vec<Timestamp> = cap.records.iter().map(|r| r.timestamp.offset_millis(clock_offset_ms)).collect();
    let windows = timestamps.windows();
    let assignment = assign_to_windows(&times, &windows);
    let span = cap.span().map(|(a, b)| (a.offset_millis(clock_offset_ms), b.offset_millis(clock_offset_ms)));

    let mut report = SegmentReport {
        device_id: timestamps.device_id.clone(),
        total_records: cap.records.len(),
        clock_offset_ms,
        segments: Vec::new(),
        residue_file: format!("residue.{ext}"),
        residue_packets: assignment.residue,
        timestamps_complete: timestamps.complete,
        capture_warnings: cap.warnings.clone(),
        warnings: Vec::new(),
    };
    if !timestamps.complete {
        report.warnings.push("timestamp log is flagged incomplete".into());
    }
    for (i, e) in timestamps.entries.iter().enumerate() {
        let file = format!("{:02}_{}_{}.{ext}", i + 1, e.phase, file_safe(&e.operation));
        let data = cap.extract(|r| assignment.window_of[r] == Some(i));
        error::write_atomic(&out_dir.join(&file), &data)?;
        let coverage = span_coverage(span, (e.start, e.end));
        if coverage != SpanCoverage::Inside {
            report.warnings.push(format!("{file}: window {:?} relative to the capture span", coverage));
        }
        if assignment.counts[i] == 0 {
            report.warnings.push(format!("{file}: window holds no packets"));
        }
        report.segments.push(SegmentOutput {
            segment: PhaseSegment {
                device_id: timestamps.device_id.clone(),
                index: i + 1,
                operation: e.operation.clone(),
                phase: e.phase,
                start: e.start,
                end: e.end,
            },
            file,
            packets: assignment.counts[i],
            coverage,
        });
    }
    let residue = cap.extract(|r| assignment.window_of[r].is_none());
    error::write_atomic(&out_dir.join(&report.residue_file), &residue)?;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    error::write_atomic(&out_dir.join("segments.json"), &json)?;
    Ok(report)
}
