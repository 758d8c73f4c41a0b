//! Encrypted / plaintext / unknown classification of flows and the
//! category by phase heatmap built from it.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::dns;
use crate::entropy::Histogram;
use crate::flow::{FlowKey, FlowRecord, ProtocolTag};
use crate::http;
use crate::phase::PhaseLabel;
use crate::tls;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Encrypted,
    Text,
    Media,
    Compressed,
    Unknown,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Encrypted => "ENCRYPTED",
            Verdict::Text => "TEXT",
            Verdict::Media => "MEDIA",
            Verdict::Compressed => "COMPRESSED",
            Verdict::Unknown => "UNKNOWN",
        }
    }

    pub fn is_unencrypted(self) -> bool {
        matches!(self, Verdict::Text | Verdict::Media | Verdict::Compressed)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rule {
    HttpContentType,
    SslEntropy,
    Dnskey,
    MagicNumber,
    EntropyThreshold,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::HttpContentType => "HTTP_CONTENT_TYPE",
            Rule::SslEntropy => "SSL_ENTROPY",
            Rule::Dnskey => "DNSKEY",
            Rule::MagicNumber => "MAGIC_NUMBER",
            Rule::EntropyThreshold => "ENTROPY_THRESHOLD",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Application-record entropy above which a TLS flow is encrypted.
    pub ssl: f64,
    pub encrypted: f64,
    pub text: f64,
    /// Stage-five floor: shorter windows are UNKNOWN.
    pub min_entropy_bytes: usize,
    /// Per-direction sample size for entropy.
    pub window: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            ssl: 0.8,
            encrypted: 0.9,
            text: 0.4,
            min_entropy_bytes: 64,
            window: 16 * 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MagicKind {
    Compressed,
    Media,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagicEntry {
    pub name: String,
    pub offset: usize,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    pub kind: MagicKind,
}

impl MagicEntry {
    fn matches(&self, data: &[u8]) -> bool {
        data.get(self.offset..self.offset + self.bytes.len()) == Some(&self.bytes[..])
    }
}

mod hex_bytes {
    use alloc::string::String;
    use alloc::vec::Vec;
    use core::fmt::Write;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(v.len() * 2);
        for b in v {
            let _ = write!(out, "{b:02X}");
        }
        s.serialize_str(&out)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s.is_empty() || s.len() % 2 != 0 {
            return Err(D::Error::custom("hex pattern must have an even, non-zero length"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(D::Error::custom))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagicNumberTable {
    pub version: String,
    pub entries: Vec<MagicEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MagicTableError {
    #[error("magic entry {0:?} has an empty pattern")]
    EmptyPattern(String),
}

impl MagicNumberTable {
    pub fn validate(&self) -> Result<(), MagicTableError> {
        match self.entries.iter().find(|e| e.bytes.is_empty()) {
            Some(e) => Err(MagicTableError::EmptyPattern(e.name.clone())),
            None => Ok(()),
        }
    }

    /// Longest matching pattern; earlier entries win ties.
    pub fn lookup(&self, data: &[u8]) -> Option<&MagicEntry> {
        let mut best: Option<&MagicEntry> = None;
        for e in self.entries.iter().filter(|e| e.matches(data)) {
            if best.is_none_or(|b| e.bytes.len() > b.bytes.len()) {
                best = Some(e);
            }
        }
        best
    }
}

impl Default for MagicNumberTable {
    fn default() -> Self {
        use MagicKind::*;
        let e = |name: &str, offset: usize, bytes: &[u8], kind| MagicEntry {
            name: name.into(),
            offset,
            bytes: bytes.into(),
            kind,
        };
        MagicNumberTable {
            version: "2026.1".into(),
            entries: alloc::vec![
                e("gzip", 0, &[0x1F, 0x8B], Compressed),
                e("zlib", 0, &[0x78, 0x01], Compressed),
                e("zlib", 0, &[0x78, 0x5E], Compressed),
                e("zlib", 0, &[0x78, 0x9C], Compressed),
                e("zlib", 0, &[0x78, 0xDA], Compressed),
                e("zip", 0, b"PK\x03\x04", Compressed),
                e("jpeg", 0, &[0xFF, 0xD8, 0xFF], Media),
                e("png", 0, &[0x89, b'P', b'N', b'G'], Media),
                e("gif", 0, b"GIF", Media),
                e("mp4", 4, b"ftyp", Media),
                e("riff", 0, b"RIFF", Media),
                e("matroska", 0, &[0x1A, 0x45, 0xDF, 0xA3], Media),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficClassification {
    pub flow_key: FlowKey,
    pub verdict: Verdict,
    pub rule: Rule,
    /// Entropy of the sample the deciding rule looked at, or of the flow's
    /// entropy window when the rule did not use entropy.
    pub entropy: f64,
    /// Format or content type behind a MAGIC_NUMBER / HTTP_CONTENT_TYPE
    /// verdict.
    pub detail: Option<String>,
}

/// Family of an HTTP content type, or `None` when it names nothing the
/// cascade knows.
pub fn content_type_family(content_type: &str, content_encoding: Option<&str>) -> Option<Verdict> {
    if let Some(enc) = content_encoding {
        let enc = enc.to_ascii_lowercase();
        if ["gzip", "deflate", "br", "compress", "x-gzip"].iter().any(|e| enc.contains(e)) {
            return Some(Verdict::Compressed);
        }
    }
    let ct = content_type.to_ascii_lowercase();
    let (top, sub) = ct.split_once('/').unwrap_or((&ct, ""));
    match top {
        "text" => Some(Verdict::Text),
        "image" | "audio" | "video" => Some(Verdict::Media),
        "application" => match sub {
            "json" | "xml" | "javascript" | "x-www-form-urlencoded" | "x-javascript" | "soap+xml" => Some(Verdict::Text),
            s if s.ends_with("+json") || s.ends_with("+xml") => Some(Verdict::Text),
            "gzip" | "x-gzip" | "zip" | "x-zip-compressed" | "x-compress" | "x-bzip2" | "x-xz" | "zstd" | "x-7z-compressed" => {
                Some(Verdict::Compressed)
            }
            "ogg" | "mp4" | "vnd.apple.mpegurl" | "x-mpegurl" | "dash+xml" => Some(Verdict::Media),
            _ => None,
        },
        "multipart" if sub == "form-data" => Some(Verdict::Text),
        _ => None,
    }
}

fn http_verdict(flow: &FlowRecord) -> Option<(Verdict, String)> {
    // Body bytes per family decide mixed conversations; the first family
    // seen wins a tie.
    let mut weights: Vec<(Verdict, usize, String)> = Vec::new();
    for stream in [&flow.initiator_payload, &flow.responder_payload] {
        for m in http::messages(stream) {
            let Some(ct) = m.head.content_type() else { continue };
            let Some(v) = content_type_family(&ct, m.head.header("content-encoding")) else { continue };
            match weights.iter_mut().find(|w| w.0 == v) {
                Some(w) => w.1 += m.body.len(),
                None => weights.push((v, m.body.len(), ct)),
            }
        }
    }
    let mut best: Option<&(Verdict, usize, String)> = None;
    for w in &weights {
        if best.is_none_or(|b| w.1 > b.1) {
            best = Some(w);
        }
    }
    best.map(|(v, _, ct)| (*v, ct.clone()))
}

fn window_entropy(flow: &FlowRecord, window: usize) -> (f64, usize) {
    let mut h = Histogram::new();
    for s in [&flow.initiator_payload, &flow.responder_payload] {
        h.add(&s[..s.len().min(window)]);
    }
    (h.entropy(), h.total() as usize)
}

fn ssl_app_entropy(flow: &FlowRecord, window: usize) -> Option<f64> {
    let mut h = Histogram::new();
    if flow.has_tag(ProtocolTag::Tls) {
        for s in [&flow.initiator_payload, &flow.responder_payload] {
            h.add(&tls::dissect(s, window).app_data);
        }
    } else {
        // SSL 2.0 encrypts everything after the hellos; skip each
        // direction's first record.
        for s in [&flow.initiator_payload, &flow.responder_payload] {
            if s.len() < 2 {
                continue;
            }
            let first = if s[0] & 0x80 != 0 {
                2 + ((((s[0] & 0x7F) as usize) << 8) | s[1] as usize)
            } else {
                s.len()
            };
            let rest = s.get(first..).unwrap_or(&[]);
            h.add(&rest[..rest.len().min(window)]);
        }
    }
    (h.total() > 0).then(|| h.entropy())
}

fn has_dnskey(flow: &FlowRecord) -> bool {
    flow.has_tag(ProtocolTag::Dns)
        && dns::flow_messages(flow)
            .iter()
            .any(|(_, m)| m.as_ref().is_ok_and(|m| m.has_dnskey()))
}

/// Runs the five-stage cascade. Returns `None` for flows without payload.
pub fn classify_flow(flow: &FlowRecord, magic: &MagicNumberTable, th: &Thresholds) -> Option<TrafficClassification> {
    if !flow.has_payload() {
        return None;
    }
    let (window_h, window_len) = window_entropy(flow, th.window);
    let done = |verdict, rule, entropy, detail| {
        Some(TrafficClassification {
            flow_key: flow.key,
            verdict,
            rule,
            entropy,
            detail,
        })
    };

    if flow.has_tag(ProtocolTag::Http) {
        if let Some((v, ct)) = http_verdict(flow) {
            return done(v, Rule::HttpContentType, window_h, Some(ct));
        }
    }
    if flow.has_tag(ProtocolTag::Tls) || flow.has_tag(ProtocolTag::Sslv2) {
        if let Some(h) = ssl_app_entropy(flow, th.window) {
            if h > th.ssl {
                return done(Verdict::Encrypted, Rule::SslEntropy, h, None);
            }
        }
    }
    if has_dnskey(flow) {
        return done(Verdict::Encrypted, Rule::Dnskey, window_h, None);
    }
    for s in [&flow.initiator_payload, &flow.responder_payload] {
        if let Some(e) = magic.lookup(s) {
            let v = match e.kind {
                MagicKind::Compressed => Verdict::Compressed,
                MagicKind::Media => Verdict::Media,
            };
            return done(v, Rule::MagicNumber, window_h, Some(e.name.clone()));
        }
    }
    let verdict = if window_len < th.min_entropy_bytes {
        Verdict::Unknown
    } else if window_h > th.encrypted {
        Verdict::Encrypted
    } else if window_h < th.text {
        Verdict::Text
    } else {
        Verdict::Unknown
    };
    done(verdict, Rule::EntropyThreshold, window_h, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HeatColumn {
    Phase(PhaseLabel),
    Lifecycle,
}

impl HeatColumn {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeatColumn::Phase(p) => p.as_str(),
            HeatColumn::Lifecycle => "LIFECYCLE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub encrypted: f64,
    pub unknown: f64,
    pub unencrypted: f64,
    /// Devices that contributed to the average.
    pub devices: usize,
}

/// One classified flow as seen by the heatmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifiedBytes<'a> {
    pub device_id: &'a str,
    pub category: &'a str,
    pub phase: Option<PhaseLabel>,
    pub verdict: Verdict,
    pub bytes: u64,
}

pub type Heatmap = BTreeMap<(String, HeatColumn), Option<HeatCell>>;

/// Per device, the byte-weighted split of its classified traffic in each
/// phase (and over its whole lifecycle); each cell averages those splits
/// over the category's devices with traffic there. Every category gets a
/// cell for every column; cells without traffic are `None`.
pub fn encryption_heatmap(items: &[ClassifiedBytes<'_>]) -> Heatmap {
    // (category, column, device) -> [encrypted, unknown, unencrypted]
    let mut per_device: BTreeMap<(&str, HeatColumn, &str), [u64; 3]> = BTreeMap::new();
    let mut categories: Vec<&str> = Vec::new();
    for it in items {
        if !categories.contains(&it.category) {
            categories.push(it.category);
        }
        let slot = match it.verdict {
            Verdict::Encrypted => 0,
            Verdict::Unknown => 1,
            _ => 2,
        };
        let mut cols = alloc::vec![HeatColumn::Lifecycle];
        if let Some(p) = it.phase {
            cols.push(HeatColumn::Phase(p));
        }
        for c in cols {
            per_device.entry((it.category, c, it.device_id)).or_default()[slot] += it.bytes;
        }
    }
    let mut sums: BTreeMap<(&str, HeatColumn), ([f64; 3], usize)> = BTreeMap::new();
    for ((cat, col, _), b) in &per_device {
        let total: u64 = b.iter().sum();
        if total == 0 {
            continue;
        }
        let e = sums.entry((cat, *col)).or_default();
        for i in 0..3 {
            e.0[i] += b[i] as f64 / total as f64;
        }
        e.1 += 1;
    }
    let mut out = Heatmap::new();
    for cat in categories {
        let cols = PhaseLabel::ALL.iter().map(|p| HeatColumn::Phase(*p)).chain([HeatColumn::Lifecycle]);
        for col in cols {
            let cell = sums.get(&(cat, col)).map(|(s, n)| {
                let k = 100.0 / *n as f64;
                HeatCell {
                    encrypted: s[0] * k,
                    unknown: s[1] * k,
                    unencrypted: s[2] * k,
                    devices: *n,
                }
            });
            out.insert((cat.into(), col), cell);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{assemble_flows, FlowConfig};
    use crate::packet::{PacketRecord, TcpMeta, Transport};
    use crate::time::Timestamp;
    use alloc::vec;
    use core::net::{IpAddr, Ipv4Addr};

    fn flow_with(payload_to_server: &[u8], payload_to_client: &[u8], dport: u16) -> FlowRecord {
        let mk = |t: i64, fwd: bool, seq: u32, data: &[u8]| {
            let (a, b) = (IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)), IpAddr::V4(Ipv4Addr::new(47, 1, 1, 1)));
            PacketRecord {
                timestamp: Timestamp::from_secs(t),
                src_mac: None,
                src_ip: if fwd { a } else { b },
                dst_ip: if fwd { b } else { a },
                src_port: Some(if fwd { 40000 } else { dport }),
                dst_port: Some(if fwd { dport } else { 40000 }),
                transport: Transport::Tcp,
                tcp: Some(TcpMeta { seq, ack: 0, flags: 0x18 }),
                payload: data.to_vec(),
                wire_length: 54 + data.len() as u32,
            }
        };
        let mut pk = vec![mk(1, true, 100, payload_to_server)];
        if !payload_to_client.is_empty() {
            pk.push(mk(2, false, 500, payload_to_client));
        }
        assemble_flows(pk, "d", &FlowConfig::default()).remove(0)
    }

    fn classify(f: &FlowRecord) -> TrafficClassification {
        classify_flow(f, &MagicNumberTable::default(), &Thresholds::default()).unwrap()
    }

    fn pseudo_random(n: usize, mut seed: u64) -> Vec<u8> {
        (0..n)
            .map(|_| {
                seed ^= seed << 13;
                seed ^= seed >> 7;
                seed ^= seed << 17;
                seed as u8
            })
            .collect()
    }

    #[test]
    fn http_text() {
        let f = flow_with(
            b"GET / HTTP/1.1\r\nHost: a\r\n\r\n",
            b"HTTP/1.1 200 OK\r\nContent-Type: text/html\r\nContent-Length: 4\r\n\r\n<a/>",
            80,
        );
        let c = classify(&f);
        assert_eq!((c.verdict, c.rule), (Verdict::Text, Rule::HttpContentType));
    }

    #[test]
    fn http_unknown_type_falls_through() {
        let body = pseudo_random(2000, 3);
        let mut resp = b"HTTP/1.1 200 OK\r\nContent-Type: application/x-vendor\r\nContent-Length: 2000\r\n\r\n".to_vec();
        resp.extend_from_slice(&body);
        let c = classify(&flow_with(b"GET / HTTP/1.1\r\n\r\n", &resp, 80));
        assert_eq!(c.rule, Rule::EntropyThreshold);
    }

    #[test]
    fn tls_app_data_encrypted() {
        use crate::tls::{build, ProtocolVersion, CONTENT_APPLICATION_DATA};
        let s = build::records(CONTENT_APPLICATION_DATA, ProtocolVersion::TLS12, &pseudo_random(4096, 9));
        let c = classify(&flow_with(&s, &[], 443));
        assert_eq!((c.verdict, c.rule), (Verdict::Encrypted, Rule::SslEntropy));
        assert!(c.entropy > 0.95);
    }

    #[test]
    fn gzip_beats_entropy() {
        let mut g = vec![0x1F, 0x8B];
        g.extend(pseudo_random(4096, 5));
        let c = classify(&flow_with(&g, &[], 9000));
        assert_eq!((c.verdict, c.rule), (Verdict::Compressed, Rule::MagicNumber));
        assert!(c.entropy > 0.9);
    }

    #[test]
    fn longest_magic_wins() {
        let mut t = MagicNumberTable::default();
        t.entries.push(MagicEntry {
            name: "gzip-deflate".into(),
            offset: 0,
            bytes: vec![0x1F, 0x8B, 0x08],
            kind: MagicKind::Compressed,
        });
        assert_eq!(t.lookup(&[0x1F, 0x8B, 0x08, 0]).unwrap().name, "gzip-deflate");
        assert_eq!(t.lookup(&[0x1F, 0x8B, 0x07]).unwrap().name, "gzip");
        assert_eq!(t.lookup(b"\0\0\0\x18ftypisom").unwrap().name, "mp4");
    }

    #[test]
    fn entropy_stage() {
        let c = classify(&flow_with(&pseudo_random(4096, 1), &[], 9000));
        assert_eq!(c.verdict, Verdict::Encrypted);
        let c = classify(&flow_with(&b"aaaabbbbaaaab".repeat(20), &[], 9000));
        assert_eq!(c.verdict, Verdict::Text);
        let c = classify(&flow_with(&pseudo_random(40, 1), &[], 9000));
        assert_eq!(c.verdict, Verdict::Unknown);
    }

    #[test]
    fn heatmap_equal_device_weight() {
        let items = [
            ClassifiedBytes { device_id: "a", category: "cam", phase: Some(PhaseLabel::Idle), verdict: Verdict::Encrypted, bytes: 1_000_000 },
            ClassifiedBytes { device_id: "b", category: "cam", phase: Some(PhaseLabel::Idle), verdict: Verdict::Unknown, bytes: 10 },
        ];
        let h = encryption_heatmap(&items);
        let cell = h[&("cam".into(), HeatColumn::Phase(PhaseLabel::Idle))].unwrap();
        assert_eq!((cell.encrypted, cell.unknown, cell.unencrypted), (50.0, 50.0, 0.0));
        assert!(h[&("cam".into(), HeatColumn::Phase(PhaseLabel::Setup))].is_none());
    }

    #[test]
    fn magic_table_serde() {
        let t = MagicNumberTable::default();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"1F8B\""));
        let back: MagicNumberTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
