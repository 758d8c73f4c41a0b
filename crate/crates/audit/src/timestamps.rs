//! Line-oriented timestamp log.
//!
//! ```text
//! # device: cam-01
//! # status: complete
//! #device_id	operation	phase	start	end
//! cam-01	bind	SETUP	2026-03-02T09:14:05.120Z	2026-03-02T09:16:40.007Z
//! ```
//!
//! `# status: incomplete` marks a session the operator aborted.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use lifecycle_audit_core::timeline::{TimestampEntry, TimestampFile};
use lifecycle_audit_core::{PhaseLabel, TimelineError, Timestamp};

use crate::error::{self, AuditError};

pub const COLUMNS: &str = "#device_id\toperation\tphase\tstart\tend";

#[derive(Debug, thiserror::Error)]
pub enum TimestampFileError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("no device id in header or entries")]
    MissingDevice,
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

pub fn format_time(t: Timestamp) -> String {
    let dt = DateTime::<Utc>::from_timestamp(t.secs(), t.subsec_nanos()).unwrap_or(DateTime::<Utc>::MIN_UTC);
    dt.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_time(s: &str) -> Result<Timestamp, String> {
    let dt = DateTime::parse_from_rfc3339(s.trim()).map_err(|e| format!("bad timestamp {s:?}: {e}"))?;
    dt.timestamp_nanos_opt()
        .map(Timestamp::from_nanos)
        .ok_or_else(|| format!("timestamp {s:?} out of range"))
}

/// Serializes after re-checking ordering, so an invalid log is never written.
pub fn render(file: &TimestampFile) -> Result<String, TimelineError> {
    file.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "# device: {}", file.device_id);
    let _ = writeln!(out, "# status: {}", if file.complete { "complete" } else { "incomplete" });
    out.push_str(COLUMNS);
    out.push('\n');
    for e in &file.entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            file.device_id,
            e.operation,
            e.phase,
            format_time(e.start),
            format_time(e.end)
        );
    }
    Ok(out)
}

pub fn parse(text: &str) -> Result<TimestampFile, TimestampFileError> {
    let mut device: Option<String> = None;
    let mut complete = true;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| TimestampFileError::Line { line, message };
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() {
            continue;
        }
        if let Some(comment) = l.strip_prefix('#') {
            let c = comment.trim();
            if let Some(d) = c.strip_prefix("device:") {
                device = Some(d.trim().to_string());
            } else if let Some(s) = c.strip_prefix("status:") {
                complete = s.trim() != "incomplete";
            }
            continue;
        }
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(format!("expected 5 tab-separated columns, found {}", cols.len())));
        }
        match &device {
            Some(d) if d != cols[0] => return Err(err(format!("device {:?} differs from {d:?}", cols[0]))),
            Some(_) => {}
            None => device = Some(cols[0].to_string()),
        }
        let phase: PhaseLabel = cols[2].parse().map_err(|e| err(format!("{e}")))?;
        entries.push(TimestampEntry {
            operation: cols[1].to_string(),
            phase,
            start: parse_time(cols[3]).map_err(err)?,
            end: parse_time(cols[4]).map_err(err)?,
        });
    }
    let file = TimestampFile {
        device_id: device.ok_or(TimestampFileError::MissingDevice)?,
        entries,
        complete,
    };
    file.validate()?;
    Ok(file)
}

pub fn read(path: &Path) -> Result<TimestampFile, AuditError> {
    parse(&error::read_text(path)?).map_err(|e| AuditError::invalid(path, e))
}

pub fn write(path: &Path, file: &TimestampFile) -> Result<(), AuditError> {
    let text = render(file).map_err(|e| AuditError::invalid(path, e))?;
    error::write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TimestampFile {
        let mut f = TimestampFile::new("cam-01");
        f.push(TimestampEntry {
            operation: "bind".into(),
            phase: PhaseLabel::Setup,
            start: Timestamp::from_millis(1_772_442_845_120),
            end: Timestamp::from_millis(1_772_443_000_007),
        })
        .unwrap();
        f.push(TimestampEntry {
            operation: "idle".into(),
            phase: PhaseLabel::Idle,
            start: Timestamp::from_millis(1_772_443_000_008),
            end: Timestamp::from_millis(1_772_446_600_000),
        })
        .unwrap();
        f
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let text = render(&f).unwrap();
        assert!(text.contains("cam-01\tbind\tSETUP\t2026-03-02T09:14:05.120Z\t2026-03-02T09:16:40.007Z"));
        assert_eq!(parse(&text).unwrap(), f);
    }

    #[test]
    fn incomplete_flag_survives() {
        let mut f = sample();
        f.complete = false;
        let back = parse(&render(&f).unwrap()).unwrap();
        assert!(!back.complete);
    }

    #[test]
    fn empty_incomplete_log_keeps_device() {
        let mut f = TimestampFile::new("plug-7");
        f.complete = false;
        let back = parse(&render(&f).unwrap()).unwrap();
        assert_eq!(back.device_id, "plug-7");
        assert!(back.entries.is_empty());
    }

    #[test]
    fn overlap_rejected_on_read() {
        let text = "#device_id\toperation\tphase\tstart\tend\n\
                    d\ta\tSETUP\t2026-01-01T00:00:00.000Z\t2026-01-01T00:01:00.000Z\n\
                    d\tb\tIDLE\t2026-01-01T00:00:30.000Z\t2026-01-01T00:02:00.000Z\n";
        assert!(matches!(parse(text), Err(TimestampFileError::Timeline(TimelineError::NotMonotonic { .. }))));
    }

    #[test]
    fn bad_phase_names_line() {
        let text = "d\ta\tFIRMWARE\t2026-01-01T00:00:00.000Z\t2026-01-01T00:01:00.000Z\n";
        match parse(text) {
            Err(TimestampFileError::Line { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
