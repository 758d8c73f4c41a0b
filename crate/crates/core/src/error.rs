use alloc::string::String;

/// Failure to read a capture file at all. Per-record problems are reported
/// as warnings or skip counts instead.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CaptureError {
    #[error("capture is too short to hold a file header ({0} bytes)")]
    TooShort(usize),
    #[error("unrecognized capture magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported link type {0} ({1})")]
    UnsupportedLinkType(u32, &'static str),
    #[error("malformed pcapng block at offset {offset}: {reason}")]
    BadBlock { offset: usize, reason: &'static str },
    #[error("packet block at offset {offset} references undeclared interface {interface}")]
    UnknownInterface { offset: usize, interface: u32 },
}

/// Violations of operation-process and timestamp-file invariants.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TimelineError {
    #[error("operation name {0:?} appears more than once")]
    DuplicateOperation(String),
    #[error("operation process defines no operations")]
    EmptyProcess,
    #[error("entry {index} ({operation}) ends before it starts")]
    EndBeforeStart { index: usize, operation: String },
    #[error("entry {index} ({operation}) starts at or before the end of the previous entry")]
    NotMonotonic { index: usize, operation: String },
}
