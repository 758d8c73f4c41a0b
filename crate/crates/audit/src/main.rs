use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lifecycle_audit::config::{self, FirmwareTag, PipelineConfig};
use lifecycle_audit::geo::GeoProvider;
use lifecycle_audit::model::flow::ByteMode;
use lifecycle_audit::model::mitm::ClassifyConfig;
use lifecycle_audit::orchestrator::{self, Clock, ScriptedOperator, SystemClock, Tcpdump, TerminalOperator};
use lifecycle_audit::pipeline::{self, Analysis};
use lifecycle_audit::probe::fleet::{self, FleetSpec};
use lifecycle_audit::probe::forge::{LocalCa, CA_CERT};
use lifecycle_audit::probe::{self, Interceptor, Resolver, Rules, Timeouts};
use lifecycle_audit::{report, segment, timestamps, trust, AuditError};

#[derive(Parser)]
#[command(name = "audit", version, about = "Smart-home device lifecycle traffic audit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = "AUDIT_CONFIG")]
    config: Option<PathBuf>,
    /// Offline geolocation snapshot (CSV); overrides the config.
    #[arg(long, global = true)]
    geo_db: Option<PathBuf>,
    /// Entropy threshold for TLS-framed payloads.
    #[arg(long, global = true)]
    th_ssl: Option<f64>,
    /// Entropy threshold for other encrypted payloads.
    #[arg(long, global = true)]
    th_enc: Option<f64>,
    /// Entropy ceiling for text.
    #[arg(long, global = true)]
    th_text: Option<f64>,
    #[arg(long, global = true, value_enum)]
    byte_mode: Option<ByteModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ByteModeArg {
    Wire,
    Payload,
}

#[derive(Clone, Copy, ValueEnum)]
enum FirmwareArg {
    Pre,
    Post,
}

#[derive(Subcommand)]
enum Command {
    /// Guide an operator through a device's operations while capturing.
    Capture {
        #[arg(long)]
        process: PathBuf,
        #[arg(long)]
        iface: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        device: String,
        /// Replay operator actions from a script instead of the terminal.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value = "tcpdump")]
        tcpdump: PathBuf,
    },
    /// Split a raw capture into per-operation files.
    Segment {
        #[arg(long)]
        pcap: PathBuf,
        #[arg(long)]
        timestamps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Added to capture timestamps before matching.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        clock_offset_ms: i64,
    },
    /// Run the interception probe.
    Probe {
        /// Required unless a simulated fleet is used.
        #[arg(long, required_unless_present = "simulated_fleet")]
        rules: Option<PathBuf>,
        #[arg(long, required_unless_present = "simulated_fleet")]
        duration: Option<u64>,
        #[arg(long)]
        state: PathBuf,
        /// Run against a loopback fleet described in this file.
        #[arg(long)]
        simulated_fleet: Option<PathBuf>,
        /// Write intercepted field values in clear.
        #[arg(long)]
        reveal_values: bool,
    },
    /// Analyze a capture corpus into a report bundle.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        firmware: Option<FirmwareArg>,
        /// Write PII excerpts in clear.
        #[arg(long)]
        reveal_pii: bool,
    },
    /// Compare behavior before and after a firmware update.
    DiffFirmware {
        /// Corpus with captures tagged pre and post.
        #[arg(long, conflicts_with_all = ["pre", "post"])]
        manifest: Option<PathBuf>,
        /// Bundle analyzed on the old firmware.
        #[arg(long, requires = "post")]
        pre: Option<PathBuf>,
        #[arg(long, requires = "pre")]
        post: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a bundle (and optionally a probe run) as Markdown.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        /// Probe state directory.
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Outcome {
    Done,
    Partial(usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(n)) => {
            eprintln!("warning: {n} capture(s) quarantined; see errors.json");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig, AuditError> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.thresholds.ssl = g.th_ssl.or(cfg.thresholds.ssl);
    cfg.thresholds.encrypted = g.th_enc.or(cfg.thresholds.encrypted);
    cfg.thresholds.text = g.th_text.or(cfg.thresholds.text);
    if let Some(m) = g.byte_mode {
        cfg.byte_mode = match m {
            ByteModeArg::Wire => ByteMode::Wire,
            ByteModeArg::Payload => ByteMode::Payload,
        };
    }
    Ok(cfg)
}

fn analysis_setup(g: &Global, reveal_pii: bool) -> Result<(Analysis, GeoProvider), AuditError> {
    let mut cfg = load_config(g)?;
    cfg.reveal_pii |= reveal_pii;
    let analysis = Analysis::from_config(&cfg)?;
    let t = &analysis.thresholds;
    if ![t.ssl, t.encrypted, t.text].iter().all(|v| (0.0..=1.0).contains(v)) || t.text >= t.encrypted {
        return Err(AuditError::Validation(format!(
            "thresholds must lie in [0, 1] with text below encrypted (ssl {}, enc {}, text {})",
            t.ssl, t.encrypted, t.text
        )));
    }
    let geo = GeoProvider::from_settings(&cfg.geo, g.geo_db.as_deref())?;
    Ok((analysis, geo))
}

fn write_text(path: &Path, text: &str) -> Result<(), AuditError> {
    std::fs::write(path, text).map_err(|e| AuditError::io(path, e))
}

fn run(cli: Cli) -> Result<Outcome, AuditError> {
    let g = &cli.global;
    match cli.command {
        Command::Capture {
            process,
            iface,
            out,
            device,
            script,
            tcpdump,
        } => {
            let proc = config::load_process(&process)?;
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let mut backend = Tcpdump {
                program: tcpdump,
                ..Tcpdump::default()
            };
            let outcome = match script {
                Some(s) => {
                    let text = std::fs::read_to_string(&s).map_err(|e| AuditError::io(&s, e))?;
                    let mut op = ScriptedOperator::parse(&text, clock.clone()).map_err(|e| AuditError::invalid(&s, e))?;
                    orchestrator::run_capture_session(&proc, &device, &iface, &out, &mut backend, &mut op, clock.as_ref())?
                }
                None => {
                    let mut op = TerminalOperator::new(BufReader::new(io::stdin()), io::stderr());
                    orchestrator::run_capture_session(&proc, &device, &iface, &out, &mut backend, &mut op, clock.as_ref())?
                }
            };
            eprintln!(
                "{} operation(s) logged to {}; capture in {}",
                outcome.timestamps.entries.len(),
                outcome.timestamps_path.display(),
                outcome.raw_capture.display()
            );
            if !outcome.timestamps.complete {
                return Err(AuditError::Validation("session aborted; timestamp log flagged incomplete".into()));
            }
            Ok(Outcome::Done)
        }
        Command::Segment {
            pcap,
            timestamps: ts,
            out,
            clock_offset_ms,
        } => {
            let file = timestamps::read(&ts)?;
            let r = segment::segment_capture(&pcap, &file, &out, clock_offset_ms)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} segment(s), {} of {} packet(s) in residue",
                r.segments.len(),
                r.residue_packets,
                r.total_records
            );
            Ok(Outcome::Done)
        }
        Command::Analyze {
            manifest,
            out,
            firmware,
            reveal_pii,
        } => {
            let m = config::CorpusManifest::load(&manifest)?;
            let (analysis, mut geo) = analysis_setup(g, reveal_pii)?;
            let tag = firmware.map(|f| match f {
                FirmwareArg::Pre => FirmwareTag::Pre,
                FirmwareArg::Post => FirmwareTag::Post,
            });
            let bundle = pipeline::run_pipeline(&m, &analysis, &mut geo, tag)?;
            if let Some(o) = geo.online() {
                o.persist()?;
            }
            let files = report::write_bundle(&out, &bundle)?;
            eprintln!("wrote {} file(s) to {}", files.len(), out.display());
            Ok(match bundle.quarantined() {
                0 => Outcome::Done,
                n => Outcome::Partial(n),
            })
        }
        Command::DiffFirmware {
            manifest,
            pre,
            post,
            out,
        } => {
            let (pre, post) = match (manifest, pre, post) {
                (Some(mp), _, _) => {
                    let m = config::CorpusManifest::load(&mp)?;
                    let (analysis, mut geo) = analysis_setup(g, false)?;
                    let a = pipeline::run_pipeline(&m, &analysis, &mut geo, Some(FirmwareTag::Pre))?;
                    let b = pipeline::run_pipeline(&m, &analysis, &mut geo, Some(FirmwareTag::Post))?;
                    report::write_bundle(&out.join("pre"), &a)?;
                    report::write_bundle(&out.join("post"), &b)?;
                    (a, b)
                }
                (None, Some(a), Some(b)) => (report::read_bundle(&a)?, report::read_bundle(&b)?),
                _ => return Err(AuditError::Validation("give --manifest or both --pre and --post".into())),
            };
            let diff = pipeline::diff_firmware(&pre, &post)?;
            std::fs::create_dir_all(&out).map_err(|e| AuditError::io(&out, e))?;
            let mut json = serde_json::to_string_pretty(&diff).expect("diff serializes");
            json.push('\n');
            write_text(&out.join("firmware_diff.json"), &json)?;
            write_text(&out.join("firmware_diff.md"), &report::render_diff(&diff))?;
            let quarantined = pre.quarantined() + post.quarantined();
            Ok(if quarantined == 0 {
                Outcome::Done
            } else {
                Outcome::Partial(quarantined)
            })
        }
        Command::Report { bundle, probe: p, out } => {
            let mut b = report::read_bundle(&bundle)?;
            if let Some(dir) = p {
                b.mitm_verdicts = probe::read_summary(&dir)?.verdicts;
            }
            let md = report::render_markdown(&b);
            match out {
                Some(o) => write_text(&o, &md)?,
                None => print!("{md}"),
            }
            Ok(Outcome::Done)
        }
        Command::Probe {
            rules,
            duration,
            state,
            simulated_fleet,
            reveal_values,
        } => run_probe(g, rules, duration, &state, simulated_fleet, reveal_values),
    }
}

fn run_probe(
    g: &Global,
    rules: Option<PathBuf>,
    duration: Option<u64>,
    state: &Path,
    fleet_spec: Option<PathBuf>,
    reveal: bool,
) -> Result<Outcome, AuditError> {
    let cfg = load_config(g)?;
    let rules = rules.as_deref().map(Rules::load).transpose()?;
    let ca = Arc::new(LocalCa::load_or_create(state)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| AuditError::Probe(format!("runtime: {e}")))?;
    if reveal {
        eprintln!("warning: intercepted values will be written in clear");
    }

    if let Some(spec_path) = fleet_spec {
        let spec = FleetSpec::load(&spec_path)?;
        let sensitive = rules.map_or_else(probe::default_sensitive, |r| r.sensitive_fields);
        let out = rt.block_on(fleet::run_fleet(&spec, ca, &sensitive, reveal))?;
        let mut summary = probe::summarize(&out.run, &out.analysis, &out.rules, reveal);
        let mismatches = out.check.mismatches;
        summary.fleet = Some(out.check);
        probe::write_state(state, &out.run, &out.analysis, &summary)?;
        eprintln!("{} session(s); state in {}", out.run.sessions.len(), state.display());
        if mismatches > 0 {
            return Err(AuditError::Validation(format!("{mismatches} fleet pair(s) got an unexpected verdict")));
        }
        return Ok(Outcome::Done);
    }

    let rules = rules.ok_or_else(|| AuditError::Validation("--rules is required".into()))?;
    let secs = duration.unwrap_or(0);
    let mut extra = Vec::new();
    for p in &cfg.extra_roots {
        extra.extend(trust::load_pem_certs(p)?);
    }
    let upstream = probe::upstream_config(&extra)?;
    let interceptor = Arc::new(Interceptor::new(
        ca,
        upstream,
        rules.clone(),
        Resolver::OriginalDst,
        Timeouts::default(),
    ));
    let run = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(rules.listen)
            .await
            .map_err(|e| AuditError::Probe(format!("bind {}: {e}", rules.listen)))?;
        eprintln!(
            "probe listening on {}; local CA certificate at {}",
            rules.listen,
            state.join(CA_CERT).display()
        );
        Ok::<_, AuditError>(interceptor.serve(listener, tokio::time::sleep(Duration::from_secs(secs))).await)
    })?;
    let analysis = probe::analyze_run(&run, &ClassifyConfig::default(), &rules.sensitive_fields, reveal);
    let summary = probe::summarize(&run, &analysis, &rules, reveal);
    for (d, n) in &summary.sessions_per_device {
        if *n == 0 {
            eprintln!("warning: no connections from {d}; check the redirect rules");
        }
    }
    probe::write_state(state, &run, &analysis, &summary)?;
    eprintln!("{} session(s); state in {}", run.sessions.len(), state.display());
    Ok(Outcome::Done)
}
