//! Semi-automated collection: runs the packet capture, walks the operator
//! through an operation process, and logs when each operation ran.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use lifecycle_audit_core::timeline::{Operation, OperationProcess, TimestampEntry, TimestampFile};
use lifecycle_audit_core::Timestamp;

use crate::error::{self, AuditError};
use crate::timestamps;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Timestamp::from_nanos(d.as_nanos() as i64)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock that only moves when slept on.
pub struct MockClock {
    now: Mutex<Timestamp>,
}

impl MockClock {
    pub fn new(start: Timestamp) -> Self {
        MockClock { now: Mutex::new(start) }
    }
}

impl Clock for MockClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        let mut n = self.now.lock().unwrap();
        *n = Timestamp::from_nanos(n.as_nanos() + d.as_nanos() as i64);
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Prompt<'a> {
    /// Ready to begin `op`?
    Start { op: &'a Operation, index: usize, total: usize },
    /// Has `op` finished?
    Finish { op: &'a Operation, elapsed_secs: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reply {
    Proceed,
    Abort,
}

pub trait Operator {
    fn ask(&mut self, prompt: Prompt<'_>) -> Reply;
    /// The end was confirmed before the operation's minimum duration.
    fn refused(&mut self, op: &Operation, remaining_secs: f64);
}

/// Prompts on a terminal: Enter proceeds, `q` aborts.
pub struct TerminalOperator<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> TerminalOperator<R, W> {
    pub fn new(input: R, output: W) -> Self {
        TerminalOperator { input, output }
    }

    fn read_reply(&mut self) -> Reply {
        let mut line = String::new();
        match self.input.read_line(&mut line) {
            Ok(0) | Err(_) => Reply::Abort,
            Ok(_) if matches!(line.trim(), "q" | "quit" | "abort") => Reply::Abort,
            Ok(_) => Reply::Proceed,
        }
    }
}

impl<R: BufRead, W: Write> Operator for TerminalOperator<R, W> {
    fn ask(&mut self, prompt: Prompt<'_>) -> Reply {
        let _ = match prompt {
            Prompt::Start { op, index, total } => writeln!(
                self.output,
                "\n[{}/{}] {} ({})\n{}\nPress Enter to start, q to abort.",
                index + 1,
                total,
                op.name,
                op.phase,
                op.instructions
            ),
            Prompt::Finish { op, elapsed_secs } => writeln!(
                self.output,
                "{} running for {:.0}s. Press Enter when done, q to abort.",
                op.name, elapsed_secs
            ),
        };
        let _ = self.output.flush();
        self.read_reply()
    }

    fn refused(&mut self, op: &Operation, remaining_secs: f64) {
        let _ = writeln!(
            self.output,
            "{} needs at least {}s; {:.0}s to go.",
            op.name, op.min_duration, remaining_secs
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Start,
    Wait(Duration),
    Confirm,
    Abort,
}

/// Replays operator actions from a script, one per line:
/// `start`, `wait <seconds>`, `confirm`, `abort`. `#` starts a comment.
/// `wait` sleeps on the session clock, so a mock clock makes runs instant.
pub struct ScriptedOperator {
    steps: VecDeque<Step>,
    clock: Arc<dyn Clock>,
    pub refusals: Vec<(String, f64)>,
}

#[derive(Debug, thiserror::Error)]
#[error("operator script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

impl ScriptedOperator {
    pub fn parse(text: &str, clock: Arc<dyn Clock>) -> Result<Self, ScriptError> {
        let mut steps = VecDeque::new();
        for (i, raw) in text.lines().enumerate() {
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let mut parts = l.split_whitespace();
            let step = match (parts.next(), parts.next()) {
                (Some("start"), None) => Step::Start,
                (Some("confirm"), None) => Step::Confirm,
                (Some("abort"), None) => Step::Abort,
                (Some("wait"), Some(n)) => {
                    let secs: f64 = n.parse().map_err(|_| ScriptError {
                        line: i + 1,
                        message: format!("bad duration {n:?}"),
                    })?;
                    if !(secs >= 0.0 && secs.is_finite()) {
                        return Err(ScriptError {
                            line: i + 1,
                            message: format!("bad duration {n:?}"),
                        });
                    }
                    Step::Wait(Duration::from_secs_f64(secs))
                }
                _ => {
                    return Err(ScriptError {
                        line: i + 1,
                        message: format!("unknown step {l:?}"),
                    })
                }
            };
            steps.push_back(step);
        }
        Ok(ScriptedOperator {
            steps,
            clock,
            refusals: Vec::new(),
        })
    }
}

impl Operator for ScriptedOperator {
    fn ask(&mut self, _prompt: Prompt<'_>) -> Reply {
        loop {
            match self.steps.pop_front() {
                Some(Step::Wait(d)) => self.clock.sleep(d),
                Some(Step::Start) | Some(Step::Confirm) => return Reply::Proceed,
                Some(Step::Abort) | None => return Reply::Abort,
            }
        }
    }

    fn refused(&mut self, op: &Operation, remaining_secs: f64) {
        self.refusals.push((op.name.clone(), remaining_secs));
    }
}

pub trait RunningCapture {
    fn stop(self: Box<Self>) -> Result<(), AuditError>;
}

pub trait CaptureBackend {
    /// Starts writing packets from `iface` to `out`. Must fail if the
    /// capture cannot run, before anything is logged.
    fn start(&mut self, iface: &str, out: &Path) -> Result<Box<dyn RunningCapture>, AuditError>;
}

/// `tcpdump -i <iface> -w <out> -U -n`, stopped with SIGINT.
pub struct Tcpdump {
    pub program: PathBuf,
    /// How long the process must survive to count as started.
    pub startup_grace: Duration,
}

impl Default for Tcpdump {
    fn default() -> Self {
        Tcpdump {
            program: "tcpdump".into(),
            startup_grace: Duration::from_millis(500),
        }
    }
}

struct TcpdumpRun(Child);

impl RunningCapture for TcpdumpRun {
    fn stop(mut self: Box<Self>) -> Result<(), AuditError> {
        use nix::sys::signal::{kill, Signal};
        use nix::unistd::Pid;
        let _ = kill(Pid::from_raw(self.0.id() as i32), Signal::SIGINT);
        self.0
            .wait()
            .map(|_| ())
            .map_err(|e| AuditError::CaptureProcess(format!("waiting for capture: {e}")))
    }
}

impl CaptureBackend for Tcpdump {
    fn start(&mut self, iface: &str, out: &Path) -> Result<Box<dyn RunningCapture>, AuditError> {
        if iface != "any" && !Path::new("/sys/class/net").join(iface).exists() {
            return Err(AuditError::CaptureProcess(format!("interface {iface:?} does not exist")));
        }
        let mut child = Command::new(&self.program)
            .args(["-i", iface, "-w"])
            .arg(out)
            .args(["-U", "-n"])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| AuditError::CaptureProcess(format!("{}: {e}", self.program.display())))?;
        std::thread::sleep(self.startup_grace);
        if let Some(status) = child.try_wait().map_err(|e| AuditError::CaptureProcess(e.to_string()))? {
            let mut msg = String::new();
            if let Some(mut err) = child.stderr.take() {
                let _ = std::io::Read::read_to_string(&mut err, &mut msg);
            }
            return Err(AuditError::CaptureProcess(format!("exited with {status}: {}", msg.trim())));
        }
        Ok(Box::new(TcpdumpRun(child)))
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub raw_capture: PathBuf,
    pub timestamps_path: PathBuf,
    pub timestamps: TimestampFile,
}

pub const RAW_CAPTURE: &str = "raw.pcap";
pub const TIMESTAMPS: &str = "timestamps.tsv";

/// Runs one collection session. The timestamp log is rewritten after
/// every completed operation, so an abort leaves the finished entries on
/// disk flagged incomplete.
pub fn run_capture_session(
    process: &OperationProcess,
    device_id: &str,
    iface: &str,
    out_dir: &Path,
    backend: &mut dyn CaptureBackend,
    operator: &mut dyn Operator,
    clock: &dyn Clock,
) -> Result<SessionOutcome, AuditError> {
    process.validate().map_err(|e| AuditError::Validation(e.to_string()))?;
    error::create_dir(out_dir)?;
    let raw_capture = out_dir.join(RAW_CAPTURE);
    let timestamps_path = out_dir.join(TIMESTAMPS);
    let capture = backend.start(iface, &raw_capture)?;

    let mut log = TimestampFile::new(device_id);
    log.complete = false;
    let total = process.operations.len();
    let mut aborted = false;
    'ops: for (index, op) in process.operations.iter().enumerate() {
        if operator.ask(Prompt::Start { op, index, total }) == Reply::Abort {
            aborted = true;
            break;
        }
        let mut start = clock.now();
        if let Some(prev) = log.entries.last() {
            if start <= prev.end {
                start = prev.end.offset_millis(1);
            }
        }
        let end = loop {
            let elapsed = clock.now().secs_since(start);
            if operator.ask(Prompt::Finish { op, elapsed_secs: elapsed }) == Reply::Abort {
                aborted = true;
                break 'ops;
            }
            let now = clock.now();
            let elapsed = now.secs_since(start);
            if elapsed < op.min_duration as f64 {
                operator.refused(op, op.min_duration as f64 - elapsed);
                continue;
            }
            break now;
        };
        log.push(TimestampEntry {
            operation: op.name.clone(),
            phase: op.phase,
            start,
            end,
        })
        .map_err(|e| AuditError::Validation(e.to_string()))?;
        timestamps::write(&timestamps_path, &log)?;
    }
    log.complete = !aborted;
    let written = timestamps::write(&timestamps_path, &log);
    capture.stop()?;
    written?;
    Ok(SessionOutcome {
        raw_capture,
        timestamps_path,
        timestamps: log,
    })
}
