//! Interception-probe transcripts and their behavior verdicts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::http::{self, StartLine};
use crate::time::Timestamp;
use crate::tls::alert;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MitmVerdict {
    UnknownCa,
    DecryptError,
    BadCertificate,
    CloseNotify,
    DecodeError,
    DisconnectReconnect,
    ServerHandshakeFailed,
    NoInternet,
    CommunicatesNormally,
    Unclassified,
}

impl MitmVerdict {
    pub const ALL: [MitmVerdict; 10] = [
        MitmVerdict::UnknownCa,
        MitmVerdict::DecryptError,
        MitmVerdict::BadCertificate,
        MitmVerdict::CloseNotify,
        MitmVerdict::DecodeError,
        MitmVerdict::DisconnectReconnect,
        MitmVerdict::ServerHandshakeFailed,
        MitmVerdict::NoInternet,
        MitmVerdict::CommunicatesNormally,
        MitmVerdict::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MitmVerdict::UnknownCa => "UNKNOWN_CA",
            MitmVerdict::DecryptError => "DECRYPT_ERROR",
            MitmVerdict::BadCertificate => "BAD_CERTIFICATE",
            MitmVerdict::CloseNotify => "CLOSE_NOTIFY",
            MitmVerdict::DecodeError => "DECODE_ERROR",
            MitmVerdict::DisconnectReconnect => "DISCONNECT_RECONNECT",
            MitmVerdict::ServerHandshakeFailed => "SERVER_HANDSHAKE_FAILED",
            MitmVerdict::NoInternet => "NO_INTERNET",
            MitmVerdict::CommunicatesNormally => "COMMUNICATES_NORMALLY",
            MitmVerdict::Unclassified => "UNCLASSIFIED",
        }
    }

    pub fn parse(s: &str) -> Option<MitmVerdict> {
        MitmVerdict::ALL.into_iter().find(|v| v.as_str().eq_ignore_ascii_case(s))
    }

    /// Verdict for a fatal alert code sent by the device.
    pub fn from_alert(code: u8) -> Option<MitmVerdict> {
        Some(match code {
            alert::UNKNOWN_CA => MitmVerdict::UnknownCa,
            alert::DECRYPT_ERROR => MitmVerdict::DecryptError,
            alert::BAD_CERTIFICATE => MitmVerdict::BadCertificate,
            alert::CLOSE_NOTIFY => MitmVerdict::CloseNotify,
            alert::DECODE_ERROR => MitmVerdict::DecodeError,
            _ => return None,
        })
    }
}

impl fmt::Display for MitmVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leg {
    /// Between the device and the probe.
    Device,
    /// Between the probe and the genuine server.
    Upstream,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ConnectionOpened,
    ClientHello { sni: Option<String> },
    UpstreamConnected { certificate_sha256: String },
    UpstreamFailed { reason: String },
    ForgedCertificateSent { sha256: String },
    HandshakeComplete,
    Alert { from: Leg, level: u8, description: u8 },
    /// Application bytes moved through the probe.
    Relayed { from: Leg, bytes: u64 },
    /// Non-TLS bytes relayed verbatim.
    RawRelayed { from: Leg, bytes: u64 },
    Closed { by: Leg, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServerId {
    pub host: String,
    pub port: u16,
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    Tls,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSession {
    pub id: u64,
    pub device_id: String,
    pub server: ServerId,
    pub kind: SessionKind,
    pub start: Timestamp,
    pub end: Timestamp,
    pub transcript: Vec<TranscriptEvent>,
    /// Plaintext bytes received from the device after the forged handshake.
    pub device_bytes_received: u64,
    /// Bytes written upstream on the device's behalf.
    pub upstream_bytes_sent: u64,
    /// Leading device plaintext kept for API extraction.
    #[serde(default, skip_serializing_if = "Vec::is_empty", with = "b64")]
    pub device_plaintext: Vec<u8>,
}

mod b64 {
    use alloc::string::String;
    use alloc::vec::Vec;
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD.decode(String::deserialize(d)?).map_err(D::Error::custom)
    }
}

impl ProbeSession {
    pub fn is_time_ordered(&self) -> bool {
        self.transcript.windows(2).all(|w| w[0].at <= w[1].at)
            && self.transcript.first().is_none_or(|e| e.at >= self.start)
            && self.transcript.last().is_none_or(|e| e.at <= self.end)
    }

    pub fn handshake_completed(&self) -> bool {
        self.transcript.iter().any(|e| e.kind == EventKind::HandshakeComplete)
    }

    pub fn upstream_failed(&self) -> Option<&str> {
        self.transcript.iter().find_map(|e| match &e.kind {
            EventKind::UpstreamFailed { reason } => Some(reason.as_str()),
            _ => None,
        })
    }

    pub fn relayed_app_data(&self) -> bool {
        self.handshake_completed()
            && self
                .transcript
                .iter()
                .any(|e| matches!(e.kind, EventKind::Relayed { from: Leg::Device, bytes } if bytes > 0))
    }

    /// First alert the device sent before any application data moved.
    pub fn handshake_alert(&self) -> Option<u8> {
        for e in &self.transcript {
            match e.kind {
                EventKind::Relayed { .. } => return None,
                EventKind::Alert { from: Leg::Device, description, .. } => return Some(description),
                _ => {}
            }
        }
        None
    }

    /// Device gave up: no handshake completion, no alert, no upstream
    /// failure.
    pub fn abandoned(&self) -> bool {
        self.kind == SessionKind::Tls
            && !self.handshake_completed()
            && self.handshake_alert().is_none()
            && self.upstream_failed().is_none()
    }

    pub fn relay_fidelity_holds(&self) -> bool {
        self.device_bytes_received == self.upstream_bytes_sent
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    /// Longest pause between one abandoned attempt and the next.
    pub reconnect_window_secs: i64,
    /// Redials needed after the first attempt.
    pub min_redials: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            reconnect_window_secs: 30,
            min_redials: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitmObservation {
    pub session_id: u64,
    pub device_id: String,
    pub server: ServerId,
    pub verdict: MitmVerdict,
    pub evidence: String,
}

/// Classifies every TLS session; raw relayed sessions get no verdict.
/// `probe_end` bounds the NO_INTERNET silence check.
pub fn classify_sessions(sessions: &[ProbeSession], probe_end: Timestamp, cfg: &ClassifyConfig) -> Vec<MitmObservation> {
    let window_ns = cfg.reconnect_window_secs * 1_000_000_000;
    // Runs of abandoned attempts per (device, server), in start order.
    let mut by_pair: BTreeMap<(&str, &ServerId), Vec<&ProbeSession>> = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.kind == SessionKind::Tls) {
        by_pair.entry((&s.device_id, &s.server)).or_default().push(s);
    }
    let mut in_reconnect_run: BTreeMap<u64, usize> = BTreeMap::new();
    for list in by_pair.values_mut() {
        list.sort_by_key(|s| (s.start, s.id));
        let mut run: Vec<&ProbeSession> = Vec::new();
        let mut flush = |run: &mut Vec<&ProbeSession>| {
            if run.len() > cfg.min_redials {
                for s in run.iter() {
                    in_reconnect_run.insert(s.id, run.len());
                }
            }
            run.clear();
        };
        for s in list.iter() {
            let continues = run.last().is_some_and(|p| s.start - p.end <= window_ns);
            if !s.abandoned() {
                flush(&mut run);
                continue;
            }
            if !continues {
                flush(&mut run);
            }
            run.push(s);
        }
        flush(&mut run);
    }

    let mut last_start: BTreeMap<&str, Timestamp> = BTreeMap::new();
    for s in sessions {
        let e = last_start.entry(&s.device_id).or_insert(s.start);
        if s.start > *e {
            *e = s.start;
        }
    }

    let mut out = Vec::new();
    for s in sessions.iter().filter(|s| s.kind == SessionKind::Tls) {
        let (verdict, evidence) = if let Some(code) = s.handshake_alert().filter(|c| MitmVerdict::from_alert(*c).is_some()) {
            (MitmVerdict::from_alert(code).unwrap_or(MitmVerdict::Unclassified), format!("device sent alert {code}"))
        } else if let Some(n) = in_reconnect_run.get(&s.id) {
            (MitmVerdict::DisconnectReconnect, format!("{n} abandoned handshakes to {} within {}s gaps", s.server, cfg.reconnect_window_secs))
        } else if let Some(reason) = s.upstream_failed() {
            (MitmVerdict::ServerHandshakeFailed, format!("upstream failed: {reason}"))
        } else if s.abandoned() && last_start.get(s.device_id.as_str()) == Some(&s.start) {
            let silent = probe_end.secs_since(s.end);
            (MitmVerdict::NoInternet, format!("no further connections from device for {silent:.1}s until probe end"))
        } else if s.relayed_app_data() {
            (MitmVerdict::CommunicatesNormally, format!("{} bytes relayed from device", s.device_bytes_received))
        } else {
            (MitmVerdict::Unclassified, "no rule matched".to_string())
        };
        out.push(MitmObservation {
            session_id: s.id,
            device_id: s.device_id.clone(),
            server: s.server.clone(),
            verdict,
            evidence,
        });
    }
    out
}

/// One verdict per (device, server): normal communication if any session
/// got through, otherwise the earliest session's verdict.
pub fn pair_verdicts(sessions: &[ProbeSession], observations: &[MitmObservation]) -> BTreeMap<(String, ServerId), MitmVerdict> {
    let start: BTreeMap<u64, (Timestamp, u64)> = sessions.iter().map(|s| (s.id, (s.start, s.id))).collect();
    let mut first: BTreeMap<(String, ServerId), ((Timestamp, u64), MitmVerdict)> = BTreeMap::new();
    let mut normal: BTreeSet<(String, ServerId)> = BTreeSet::new();
    for o in observations {
        let key = (o.device_id.clone(), o.server.clone());
        if o.verdict == MitmVerdict::CommunicatesNormally {
            normal.insert(key.clone());
        }
        let order = start.get(&o.session_id).copied().unwrap_or((Timestamp::default(), o.session_id));
        match first.get(&key) {
            Some((t, _)) if *t <= order => {}
            _ => {
                first.insert(key, (order, o.verdict));
            }
        }
    }
    first
        .into_iter()
        .map(|(k, (_, v))| {
            let v = if normal.contains(&k) { MitmVerdict::CommunicatesNormally } else { v };
            (k, v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub verdict: MitmVerdict,
    pub device_count: usize,
    pub server_count: usize,
}

/// Per verdict: devices with at least one such pair, and the number of
/// such pairs.
pub fn verdict_table(pairs: &BTreeMap<(String, ServerId), MitmVerdict>) -> Vec<VerdictRow> {
    MitmVerdict::ALL
        .into_iter()
        .filter_map(|v| {
            let matching: Vec<&(String, ServerId)> = pairs.iter().filter(|(_, pv)| **pv == v).map(|(k, _)| k).collect();
            if matching.is_empty() {
                return None;
            }
            let devices: BTreeSet<&str> = matching.iter().map(|(d, _)| d.as_str()).collect();
            Some(VerdictRow {
                verdict: v,
                device_count: devices.len(),
                server_count: matching.len(),
            })
        })
        .collect()
}

/// Keeps the first and last character, masks the rest.
pub fn redact(value: &str) -> String {
    let chars: Vec<char> = value.chars().collect();
    match chars.len() {
        0 => String::new(),
        1 | 2 => "*".repeat(chars.len()),
        n => {
            let mut s = String::new();
            s.push(chars[0]);
            s.push_str(&"*".repeat(n - 2));
            s.push(chars[n - 1]);
            s
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiField {
    pub name: String,
    pub value: String,
    pub sensitive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiRecord {
    pub session_id: u64,
    pub device_id: String,
    pub endpoint: ServerId,
    pub http_method: Option<String>,
    pub path: Option<String>,
    pub header_names: Vec<String>,
    pub fields: Vec<ApiField>,
    /// For non-HTTP plaintext: byte count only.
    pub raw_bytes: Option<usize>,
}

fn field_pairs(s: &str) -> impl Iterator<Item = (String, String)> + '_ {
    s.split('&').filter(|kv| !kv.is_empty()).map(|kv| {
        let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
        (k.to_string(), v.to_string())
    })
}

fn json_fields(v: &serde_json::Value, prefix: &str, out: &mut Vec<(String, String)>) {
    if let serde_json::Value::Object(map) = v {
        for (k, v) in map {
            let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                serde_json::Value::Object(_) => json_fields(v, &name, out),
                serde_json::Value::String(s) => out.push((name, s.clone())),
                other => out.push((name, other.to_string())),
            }
        }
    }
}

/// API calls inside accepted forged sessions. Field names matching
/// `sensitive` (case-insensitive substrings) are flagged; all values are
/// redacted unless `reveal_values` is set.
pub fn decrypt_transcripts(sessions: &[ProbeSession], sensitive: &[String], reveal_values: bool) -> Vec<ApiRecord> {
    let mut out = Vec::new();
    let is_sensitive = |name: &str| {
        let n = name.to_lowercase();
        sensitive.iter().any(|p| n.contains(&p.to_lowercase()))
    };
    let shown = |v: &str| if reveal_values { v.to_string() } else { redact(v) };
    for s in sessions.iter().filter(|s| s.relayed_app_data()) {
        let data = &s.device_plaintext;
        let msgs = http::messages(data);
        if msgs.is_empty() {
            out.push(ApiRecord {
                session_id: s.id,
                device_id: s.device_id.clone(),
                endpoint: s.server.clone(),
                http_method: None,
                path: None,
                header_names: Vec::new(),
                fields: Vec::new(),
                raw_bytes: Some(data.len()),
            });
            continue;
        }
        for m in msgs {
            let StartLine::Request { method, target } = &m.head.start else { continue };
            let (path, query) = target.split_once('?').unwrap_or((target, ""));
            let mut raw_fields: Vec<(String, String)> = field_pairs(query).collect();
            let body = &data[m.body.clone()];
            match m.head.content_type().as_deref() {
                Some(ct) if ct.contains("json") => {
                    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(body) {
                        json_fields(&v, "", &mut raw_fields);
                    }
                }
                Some("application/x-www-form-urlencoded") => {
                    if let Ok(b) = core::str::from_utf8(body) {
                        raw_fields.extend(field_pairs(b));
                    }
                }
                _ => {}
            }
            let header_names: Vec<String> = m.head.headers.iter().map(|(k, _)| k.clone()).collect();
            let fields = raw_fields
                .into_iter()
                .map(|(name, value)| ApiField {
                    sensitive: is_sensitive(&name),
                    value: shown(&value),
                    name,
                })
                .collect();
            out.push(ApiRecord {
                session_id: s.id,
                device_id: s.device_id.clone(),
                endpoint: s.server.clone(),
                http_method: Some(method.clone()),
                path: Some(path.to_string()),
                header_names,
                fields,
                raw_bytes: None,
            });
        }
    }
    out
}
