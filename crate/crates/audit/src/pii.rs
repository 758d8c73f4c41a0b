//! PII search over unencrypted payloads: a literal dictionary plus a
//! regular-expression catalog, matched under UTF-8, GBK and URL-escaped
//! decodings of each stream.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use encoding_rs::GBK;
use lifecycle_audit_core::classify::Verdict;
use lifecycle_audit_core::flow::{Direction, FlowRecord};
use lifecycle_audit_core::mitm::redact;
use lifecycle_audit_core::{http, PhaseLabel};
use regex::bytes::Regex;
use serde::{Deserialize, Serialize};

use crate::error::AuditError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LiteralEntry {
    pub value: String,
    pub label: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PatternEntry {
    pub regex: String,
    pub label: String,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PiiCatalog {
    /// Free-form provenance label carried into report metadata.
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub literals: Vec<LiteralEntry>,
    #[serde(default)]
    pub patterns: Vec<PatternEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("literal for label {0:?} is empty")]
    EmptyLiteral(String),
    #[error("pattern for label {label:?} does not compile: {source}")]
    BadRegex {
        label: String,
        #[source]
        source: Box<regex::Error>,
    },
}

impl PiiCatalog {
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let text = crate::error::read_text(path)?;
        let cat: PiiCatalog = toml::from_str(&text).map_err(|e| AuditError::invalid(path, e.to_string()))?;
        cat.compile().map_err(|e| AuditError::invalid(path, e.to_string()))?;
        Ok(cat)
    }

    /// Literals match case-insensitively; scripts without case (CJK) are
    /// therefore matched exactly.
    pub fn compile(&self) -> Result<CompiledCatalog, CatalogError> {
        let mut matchers = Vec::with_capacity(self.literals.len() + self.patterns.len());
        for lit in &self.literals {
            if lit.value.is_empty() {
                return Err(CatalogError::EmptyLiteral(lit.label.clone()));
            }
            let re = Regex::new(&format!("(?i){}", regex::escape(&lit.value))).map_err(|e| CatalogError::BadRegex {
                label: lit.label.clone(),
                source: Box::new(e),
            })?;
            matchers.push((lit.label.clone(), re));
        }
        for p in &self.patterns {
            let re = Regex::new(&p.regex).map_err(|e| CatalogError::BadRegex {
                label: p.label.clone(),
                source: Box::new(e),
            })?;
            matchers.push((p.label.clone(), re));
        }
        Ok(CompiledCatalog {
            label: self.label.clone(),
            matchers,
        })
    }
}

pub struct CompiledCatalog {
    pub label: String,
    matchers: Vec<(String, Regex)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TextEncoding {
    #[serde(rename = "UTF-8")]
    Utf8,
    #[serde(rename = "GBK")]
    Gbk,
    #[serde(rename = "URL-escaped")]
    UrlEscaped,
}

impl TextEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            TextEncoding::Utf8 => "UTF-8",
            TextEncoding::Gbk => "GBK",
            TextEncoding::UrlEscaped => "URL-escaped",
        }
    }

    /// Decodes raw bytes the way the corresponding scan pass does.
    pub fn decode(self, raw: &[u8]) -> String {
        match self {
            TextEncoding::Utf8 => String::from_utf8_lossy(raw).into_owned(),
            TextEncoding::Gbk => gbk_decode(raw).text,
            TextEncoding::UrlEscaped => String::from_utf8_lossy(&url_decode(raw).bytes).into_owned(),
        }
    }
}

impl fmt::Display for TextEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSide {
    Initiator,
    Responder,
}

impl From<Direction> for StreamSide {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Initiator => StreamSide::Initiator,
            Direction::Responder => StreamSide::Responder,
        }
    }
}

impl StreamSide {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamSide::Initiator => "initiator",
            StreamSide::Responder => "responder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PiiHit {
    pub device_id: String,
    pub flow_key: String,
    pub phase: Option<PhaseLabel>,
    pub direction: StreamSide,
    /// Offset into the reassembled stream of `direction`.
    pub offset: usize,
    /// Raw bytes covered by the match.
    pub raw_len: usize,
    pub label: String,
    pub excerpt: String,
    pub encoding: TextEncoding,
}

/// Which flows get scanned and over which bytes.
pub fn scan_regions(stream: &[u8], verdict: Verdict) -> Vec<Range<usize>> {
    match verdict {
        Verdict::Text | Verdict::Unknown => vec![0..stream.len()],
        Verdict::Media => http::messages(stream)
            .into_iter()
            .map(|m| m.body.start - m.head.len..m.body.start)
            .collect(),
        Verdict::Encrypted | Verdict::Compressed => Vec::new(),
    }
}

struct Decoded {
    text: String,
    /// Raw offset of every decoded byte, plus one trailing entry for the end.
    map: Vec<usize>,
}

/// Decodes GBK one character at a time. Bytes that do not form a valid
/// character become U+FFFD, which no literal or word pattern crosses.
fn gbk_decode(raw: &[u8]) -> Decoded {
    let mut text = String::with_capacity(raw.len());
    let mut map = Vec::with_capacity(raw.len() + 1);
    let mut i = 0;
    while i < raw.len() {
        let b = raw[i];
        let width = if b < 0x80 {
            1
        } else if (0x81..=0xfe).contains(&b) && raw.get(i + 1).is_some_and(|n| (0x40..=0xfe).contains(n) && *n != 0x7f) {
            2
        } else {
            1
        };
        let (ch, bad) = GBK.decode_without_bom_handling(&raw[i..i + width]);
        let piece: &str = if bad { "\u{fffd}" } else { &ch };
        for _ in 0..piece.len() {
            map.push(i);
        }
        text.push_str(piece);
        i += width;
    }
    map.push(raw.len());
    Decoded { text, map }
}

struct UrlDecoded {
    bytes: Vec<u8>,
    map: Vec<usize>,
}

/// Percent-decoding (and `+` as space) that keeps an offset map back to
/// the raw bytes. Malformed escapes pass through unchanged.
fn url_decode(raw: &[u8]) -> UrlDecoded {
    fn hexval(b: u8) -> Option<u8> {
        (b as char).to_digit(16).map(|d| d as u8)
    }
    let mut bytes = Vec::with_capacity(raw.len());
    let mut map = Vec::with_capacity(raw.len() + 1);
    let mut i = 0;
    while i < raw.len() {
        match raw[i] {
            b'%' => match (raw.get(i + 1).and_then(|b| hexval(*b)), raw.get(i + 2).and_then(|b| hexval(*b))) {
                (Some(h), Some(l)) => {
                    bytes.push(h << 4 | l);
                    map.push(i);
                    i += 3;
                }
                _ => {
                    bytes.push(b'%');
                    map.push(i);
                    i += 1;
                }
            },
            b'+' => {
                bytes.push(b' ');
                map.push(i);
                i += 1;
            }
            b => {
                bytes.push(b);
                map.push(i);
                i += 1;
            }
        }
    }
    map.push(raw.len());
    UrlDecoded { bytes, map }
}

struct Match {
    start: usize,
    end: usize,
    label: usize,
    text: String,
}

fn matches_in(cat: &CompiledCatalog, hay: &[u8]) -> Vec<Match> {
    let mut out = Vec::new();
    for (li, (_, re)) in cat.matchers.iter().enumerate() {
        for m in re.find_iter(hay) {
            if m.is_empty() {
                continue;
            }
            out.push(Match {
                start: m.start(),
                end: m.end(),
                label: li,
                text: String::from_utf8_lossy(m.as_bytes()).into_owned(),
            });
        }
    }
    out
}

/// Raw-offset matches of every pass over one byte region, in pass order.
fn scan_bytes(cat: &CompiledCatalog, raw: &[u8]) -> Vec<(TextEncoding, usize, usize, usize, String)> {
    let mut out = Vec::new();
    for m in matches_in(cat, raw) {
        out.push((TextEncoding::Utf8, m.start, m.end - m.start, m.label, m.text));
    }
    if !raw.is_ascii() {
        let d = gbk_decode(raw);
        for m in matches_in(cat, d.text.as_bytes()) {
            let (s, e) = (d.map[m.start], d.map[m.end]);
            out.push((TextEncoding::Gbk, s, e - s, m.label, m.text));
        }
    }
    if raw.iter().any(|b| *b == b'%' || *b == b'+') {
        let d = url_decode(raw);
        for m in matches_in(cat, &d.bytes) {
            let (s, e) = (d.map[m.start], d.map[m.end]);
            out.push((TextEncoding::UrlEscaped, s, e - s, m.label, m.text));
        }
    }
    out
}

/// Scans one flow. The first pass to report a (direction, offset, label)
/// wins; later passes only add new positions.
pub fn scan_flow(flow: &FlowRecord, verdict: Verdict, cat: &CompiledCatalog, reveal: bool) -> Vec<PiiHit> {
    let mut seen = BTreeSet::new();
    let mut hits = Vec::new();
    let flow_key = flow.key.to_string();
    for dir in [Direction::Initiator, Direction::Responder] {
        let stream = flow.stream(dir);
        for region in scan_regions(stream, verdict) {
            let base = region.start;
            for (encoding, off, len, li, text) in scan_bytes(cat, &stream[region]) {
                let offset = base + off;
                let label = &cat.matchers[li].0;
                if !seen.insert((dir as u8, offset, li)) {
                    continue;
                }
                hits.push(PiiHit {
                    device_id: flow.device_id.clone(),
                    flow_key: flow_key.clone(),
                    phase: flow.phase,
                    direction: dir.into(),
                    offset,
                    raw_len: len,
                    label: label.clone(),
                    excerpt: if reveal { text } else { redact(&text) },
                    encoding,
                });
            }
        }
    }
    hits
}

pub fn scan<'a>(
    flows: impl IntoIterator<Item = (&'a FlowRecord, Verdict)>,
    cat: &CompiledCatalog,
    reveal: bool,
) -> Vec<PiiHit> {
    let mut hits: Vec<PiiHit> = flows
        .into_iter()
        .flat_map(|(f, v)| scan_flow(f, v, cat, reveal))
        .collect();
    hits.sort();
    hits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> CompiledCatalog {
        PiiCatalog {
            label: "test".into(),
            literals: vec![
                LiteralEntry {
                    value: "周杰伦".into(),
                    label: "singer".into(),
                },
                LiteralEntry {
                    value: "Alice Example".into(),
                    label: "name".into(),
                },
            ],
            patterns: vec![PatternEntry {
                regex: r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}".into(),
                label: "email".into(),
            }],
        }
        .compile()
        .unwrap()
    }

    #[test]
    fn literal_in_utf8_url() {
        let raw = "GET /song?artist=周杰伦 HTTP/1.1\r\n\r\n".as_bytes();
        let hits = scan_bytes(&catalog(), raw);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, TextEncoding::Utf8);
        assert_eq!(hits[0].4, "周杰伦");
    }

    #[test]
    fn latin_literal_ignores_case() {
        let hits = scan_bytes(&catalog(), b"user=alice example;");
        assert_eq!(hits.len(), 1);
    }

    #[test]
    fn gbk_literal() {
        let (gbk, _, _) = GBK.encode("歌手:周杰伦");
        let hits = scan_bytes(&catalog(), &gbk);
        let g: Vec<_> = hits.iter().filter(|h| h.0 == TextEncoding::Gbk).collect();
        assert_eq!(g.len(), 1);
        let (_, off, len, _, _) = g[0];
        assert_eq!(TextEncoding::Gbk.decode(&gbk[*off..off + len]), "周杰伦");
    }

    #[test]
    fn percent_escaped_email() {
        let raw = b"q=user%40example.com&x=1";
        let hits = scan_bytes(&catalog(), raw);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, TextEncoding::UrlEscaped);
        assert_eq!(hits[0].4, "user@example.com");
        assert_eq!(&raw[hits[0].1..hits[0].1 + hits[0].2], b"user%40example.com");
    }

    #[test]
    fn undecodable_run_is_a_boundary() {
        let mut raw = b"Alice ".to_vec();
        raw.push(0xff);
        raw.extend_from_slice(b"Example");
        assert!(scan_bytes(&catalog(), &raw).is_empty());
    }

    #[test]
    fn url_decoder_keeps_bad_escapes() {
        let d = url_decode(b"%4g%41+");
        assert_eq!(d.bytes, b"%4gA ");
        assert_eq!(d.map, vec![0, 1, 2, 3, 6, 7]);
    }

    #[test]
    fn empty_literal_rejected() {
        let cat = PiiCatalog {
            literals: vec![LiteralEntry {
                value: String::new(),
                label: "x".into(),
            }],
            ..Default::default()
        };
        assert!(matches!(cat.compile(), Err(CatalogError::EmptyLiteral(_))));
    }

    #[test]
    fn encrypted_and_compressed_skipped() {
        assert!(scan_regions(b"abc", Verdict::Encrypted).is_empty());
        assert!(scan_regions(b"abc", Verdict::Compressed).is_empty());
    }

    #[test]
    fn media_scans_heads_only() {
        let stream = b"HTTP/1.1 200 OK\r\nContent-Length: 4\r\nX-User: a@b.cn\r\n\r\nc@d.cn";
        let r = scan_regions(stream, Verdict::Media);
        assert_eq!(r, vec![0..stream.len() - 6]);
    }
}
