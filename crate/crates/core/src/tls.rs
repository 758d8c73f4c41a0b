//! SSL/TLS record layer and the handshake messages the audit needs:
//! hellos, certificate chains, alerts and application data.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub const CONTENT_CHANGE_CIPHER_SPEC: u8 = 20;
pub const CONTENT_ALERT: u8 = 21;
pub const CONTENT_HANDSHAKE: u8 = 22;
pub const CONTENT_APPLICATION_DATA: u8 = 23;

pub const HS_CLIENT_HELLO: u8 = 1;
pub const HS_SERVER_HELLO: u8 = 2;
pub const HS_CERTIFICATE: u8 = 11;

pub const EXT_SERVER_NAME: u16 = 0;
pub const EXT_SUPPORTED_VERSIONS: u16 = 43;

const MAX_RECORD: usize = (1 << 14) + 2048;

/// SHA-256 of "HelloRetryRequest", used as the ServerHello random of a
/// retry request.
const HRR_RANDOM: [u8; 32] = [
    0xCF, 0x21, 0xAD, 0x74, 0xE5, 0x9A, 0x61, 0x11, 0xBE, 0x1D, 0x8C, 0x02, 0x1E, 0x65, 0xB8, 0x91, 0xC2, 0xA2, 0x11,
    0x16, 0x7A, 0xBB, 0x8C, 0x5E, 0x07, 0x9E, 0x09, 0xE2, 0xC8, 0xA8, 0x33, 0x9C,
];

fn is_record_header(h: &[u8]) -> bool {
    h.len() >= 5
        && (CONTENT_CHANGE_CIPHER_SPEC..=CONTENT_APPLICATION_DATA).contains(&h[0])
        && h[1] == 3
        && h[2] <= 4
        && (u16::from_be_bytes([h[3], h[4]]) as usize) <= MAX_RECORD
}

/// Stream starts with an SSLv3/TLS record header.
pub fn looks_like_tls(stream: &[u8]) -> bool {
    is_record_header(stream)
}

/// Stream starts with an SSL 2.0 CLIENT-HELLO or SERVER-HELLO using the
/// two-byte record header.
pub fn looks_like_sslv2(stream: &[u8]) -> bool {
    if stream.len() < 5 || stream[0] & 0x80 == 0 {
        return false;
    }
    let len = (((stream[0] & 0x7F) as usize) << 8) | stream[1] as usize;
    match stream[2] {
        1 => len >= 9 && stream[3] == 0 && stream[4] == 2,
        4 => len >= 11 && stream.len() >= 7 && stream[5] == 0 && stream[6] == 2,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProtocolVersion(pub u16);

impl ProtocolVersion {
    pub const SSL3: ProtocolVersion = ProtocolVersion(0x0300);
    pub const TLS10: ProtocolVersion = ProtocolVersion(0x0301);
    pub const TLS11: ProtocolVersion = ProtocolVersion(0x0302);
    pub const TLS12: ProtocolVersion = ProtocolVersion(0x0303);
    pub const TLS13: ProtocolVersion = ProtocolVersion(0x0304);
}

impl fmt::Display for ProtocolVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::SSL3 => f.write_str("SSLv3"),
            Self::TLS10 => f.write_str("TLS1.0"),
            Self::TLS11 => f.write_str("TLS1.1"),
            Self::TLS12 => f.write_str("TLS1.2"),
            Self::TLS13 => f.write_str("TLS1.3"),
            ProtocolVersion(v) => write!(f, "0x{v:04x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record<'a> {
    pub content_type: u8,
    pub version: ProtocolVersion,
    pub fragment: &'a [u8],
}

/// Iterates records until the stream ends or stops looking like TLS.
/// The second value reports whether unparsed bytes remained.
pub fn records(stream: &[u8]) -> (Vec<Record<'_>>, bool) {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let h = &stream[pos..];
        if !is_record_header(h) {
            return (out, true);
        }
        let len = u16::from_be_bytes([h[3], h[4]]) as usize;
        let Some(fragment) = h.get(5..5 + len) else {
            return (out, true);
        };
        out.push(Record {
            content_type: h[0],
            version: ProtocolVersion(u16::from_be_bytes([h[1], h[2]])),
            fragment,
        });
        pos += 5 + len;
    }
    (out, false)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientHello {
    pub legacy_version: ProtocolVersion,
    pub cipher_suites: Vec<u16>,
    pub sni: Option<String>,
    pub supported_versions: Vec<ProtocolVersion>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerHello {
    pub legacy_version: ProtocolVersion,
    pub cipher_suite: u16,
    pub selected_version: Option<ProtocolVersion>,
    pub is_retry_request: bool,
}

impl ServerHello {
    pub fn negotiated(&self) -> ProtocolVersion {
        self.selected_version.unwrap_or(self.legacy_version)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub level: u8,
    pub description: u8,
}

impl Alert {
    pub fn is_fatal(&self) -> bool {
        self.level == 2
    }
}

/// Everything dissected from one direction of a TLS conversation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsDirection {
    pub client_hello: Option<ClientHello>,
    pub server_hello: Option<ServerHello>,
    /// DER certificates in the order sent.
    pub certificates: Vec<Vec<u8>>,
    pub alerts: Vec<Alert>,
    /// Concatenated application-data fragments, capped by the caller.
    pub app_data: Vec<u8>,
    pub app_records: usize,
    pub handshake_records: usize,
    /// Record-layer versions seen, in first-seen order.
    pub record_versions: Vec<ProtocolVersion>,
    /// Trailing bytes that were not valid records.
    pub trailing_garbage: bool,
    /// A ChangeCipherSpec was sent; later handshake records are encrypted.
    pub cipher_changed: bool,
}

/// Dissects one direction. Application-data bytes are kept up to
/// `app_data_cap`.
pub fn dissect(stream: &[u8], app_data_cap: usize) -> TlsDirection {
    let mut d = TlsDirection::default();
    let (recs, garbage) = records(stream);
    d.trailing_garbage = garbage;
    let mut hs_buf: Vec<u8> = Vec::new();
    let mut encrypted_hs = false;
    for r in recs {
        if !d.record_versions.contains(&r.version) {
            d.record_versions.push(r.version);
        }
        match r.content_type {
            CONTENT_HANDSHAKE => {
                d.handshake_records += 1;
                if encrypted_hs {
                    continue;
                }
                hs_buf.extend_from_slice(r.fragment);
                drain_handshake(&mut hs_buf, &mut d);
            }
            CONTENT_CHANGE_CIPHER_SPEC => {
                d.cipher_changed = true;
                encrypted_hs = true;
            }
            CONTENT_ALERT => {
                // Alerts after ChangeCipherSpec are encrypted; only the
                // plaintext two-byte form is decoded.
                if r.fragment.len() == 2 && !encrypted_hs {
                    d.alerts.push(Alert {
                        level: r.fragment[0],
                        description: r.fragment[1],
                    });
                }
            }
            CONTENT_APPLICATION_DATA => {
                d.app_records += 1;
                let room = app_data_cap.saturating_sub(d.app_data.len());
                d.app_data.extend_from_slice(&r.fragment[..r.fragment.len().min(room)]);
            }
            _ => {}
        }
    }
    d
}

fn drain_handshake(buf: &mut Vec<u8>, d: &mut TlsDirection) {
    let mut pos = 0;
    while buf.len() - pos >= 4 {
        let len = u32::from_be_bytes([0, buf[pos + 1], buf[pos + 2], buf[pos + 3]]) as usize;
        if buf.len() - pos - 4 < len {
            break;
        }
        let body = &buf[pos + 4..pos + 4 + len];
        match buf[pos] {
            HS_CLIENT_HELLO if d.client_hello.is_none() => d.client_hello = parse_client_hello(body),
            HS_SERVER_HELLO => {
                if let Some(sh) = parse_server_hello(body) {
                    if d.server_hello.as_ref().is_none_or(|prev| prev.is_retry_request) {
                        d.server_hello = Some(sh);
                    }
                }
            }
            HS_CERTIFICATE if d.certificates.is_empty() => d.certificates = parse_certificate_list(body),
            _ => {}
        }
        pos += 4 + len;
    }
    buf.drain(..pos);
}

struct Cur<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        Some(self.take(1)?[0])
    }
    fn u16(&mut self) -> Option<u16> {
        let s = self.take(2)?;
        Some(u16::from_be_bytes([s[0], s[1]]))
    }
    fn u24(&mut self) -> Option<usize> {
        let s = self.take(3)?;
        Some(u32::from_be_bytes([0, s[0], s[1], s[2]]) as usize)
    }
    fn vec8(&mut self) -> Option<&'a [u8]> {
        let n = self.u8()? as usize;
        self.take(n)
    }
    fn vec16(&mut self) -> Option<&'a [u8]> {
        let n = self.u16()? as usize;
        self.take(n)
    }
    fn rest(&self) -> usize {
        self.b.len().saturating_sub(self.pos)
    }
}

fn extensions(c: &mut Cur<'_>) -> Vec<(u16, Vec<u8>)> {
    let mut out = Vec::new();
    if c.rest() < 2 {
        return out;
    }
    let Some(block) = c.vec16() else { return out };
    let mut e = Cur { b: block, pos: 0 };
    while e.rest() >= 4 {
        let (Some(t), Some(data)) = (e.u16(), e.vec16()) else { break };
        out.push((t, data.to_vec()));
    }
    out
}

pub fn parse_client_hello(body: &[u8]) -> Option<ClientHello> {
    let mut c = Cur { b: body, pos: 0 };
    let legacy_version = ProtocolVersion(c.u16()?);
    c.take(32)?;
    c.vec8()?;
    let suites = c.vec16()?;
    c.vec8()?;
    let cipher_suites = suites.chunks_exact(2).map(|s| u16::from_be_bytes([s[0], s[1]])).collect();
    let mut sni = None;
    let mut supported_versions = Vec::new();
    for (t, data) in extensions(&mut c) {
        match t {
            EXT_SERVER_NAME => {
                let mut e = Cur { b: &data, pos: 0 };
                if let Some(list) = e.vec16() {
                    let mut l = Cur { b: list, pos: 0 };
                    while l.rest() >= 3 {
                        let (Some(kind), Some(name)) = (l.u8(), l.vec16()) else { break };
                        if kind == 0 {
                            sni = core::str::from_utf8(name).ok().map(|s| s.to_ascii_lowercase());
                            break;
                        }
                    }
                }
            }
            EXT_SUPPORTED_VERSIONS => {
                let mut e = Cur { b: &data, pos: 0 };
                if let Some(list) = e.vec8() {
                    supported_versions = list
                        .chunks_exact(2)
                        .map(|v| ProtocolVersion(u16::from_be_bytes([v[0], v[1]])))
                        .collect();
                }
            }
            _ => {}
        }
    }
    Some(ClientHello {
        legacy_version,
        cipher_suites,
        sni,
        supported_versions,
    })
}

pub fn parse_server_hello(body: &[u8]) -> Option<ServerHello> {
    let mut c = Cur { b: body, pos: 0 };
    let legacy_version = ProtocolVersion(c.u16()?);
    let random = c.take(32)?;
    c.vec8()?;
    let cipher_suite = c.u16()?;
    c.u8()?;
    let mut selected_version = None;
    for (t, data) in extensions(&mut c) {
        if t == EXT_SUPPORTED_VERSIONS && data.len() == 2 {
            selected_version = Some(ProtocolVersion(u16::from_be_bytes([data[0], data[1]])));
        }
    }
    Some(ServerHello {
        legacy_version,
        cipher_suite,
        selected_version,
        is_retry_request: random == HRR_RANDOM,
    })
}

/// TLS 1.2 Certificate body: a u24 list of u24-prefixed DER blobs.
pub fn parse_certificate_list(body: &[u8]) -> Vec<Vec<u8>> {
    let mut c = Cur { b: body, pos: 0 };
    let mut out = Vec::new();
    let Some(total) = c.u24() else { return out };
    let Some(list) = c.take(total) else { return out };
    let mut l = Cur { b: list, pos: 0 };
    while l.rest() >= 3 {
        let Some(n) = l.u24() else { break };
        let Some(der) = l.take(n) else { break };
        out.push(der.to_vec());
    }
    out
}

/// Cipher suites whose key exchange is a pre-shared key alone or combined
/// with (EC)DHE/RSA: the registry's PSK, DHE_PSK, RSA_PSK and ECDHE_PSK
/// families.
pub fn is_psk_suite(suite: u16) -> bool {
    matches!(
        suite,
        0x002C..=0x002E
            | 0x008A..=0x0095
            | 0x00A8..=0x00B9
            | 0xC033..=0xC03B
            | 0xC064..=0xC06F
            | 0xC08E..=0xC09B
            | 0xC0A4..=0xC0A5
            | 0xC0A8..=0xC0AB
            | 0xCCAB..=0xCCAE
            | 0xD001..=0xD005
    )
}

pub mod alert {
    pub const CLOSE_NOTIFY: u8 = 0;
    pub const BAD_CERTIFICATE: u8 = 42;
    pub const UNKNOWN_CA: u8 = 48;
    pub const DECODE_ERROR: u8 = 50;
    pub const DECRYPT_ERROR: u8 = 51;
}

/// Encoders for synthetic handshakes used in fixtures and the simulated
/// probe fleet.
pub mod build {
    use super::*;

    pub fn record(content_type: u8, version: ProtocolVersion, fragment: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(fragment.len() + 5);
        out.push(content_type);
        out.extend_from_slice(&version.0.to_be_bytes());
        out.extend_from_slice(&(fragment.len() as u16).to_be_bytes());
        out.extend_from_slice(fragment);
        out
    }

    /// Splits payloads over 16 KiB into several records.
    pub fn records(content_type: u8, version: ProtocolVersion, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for chunk in data.chunks(1 << 14) {
            out.extend(record(content_type, version, chunk));
        }
        out
    }

    pub fn handshake(msg_type: u8, body: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(body.len() + 4);
        out.push(msg_type);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        out.extend_from_slice(body);
        out
    }

    fn ext(out: &mut Vec<u8>, t: u16, data: &[u8]) {
        out.extend_from_slice(&t.to_be_bytes());
        out.extend_from_slice(&(data.len() as u16).to_be_bytes());
        out.extend_from_slice(data);
    }

    pub fn client_hello(sni: Option<&str>, suites: &[u16], versions: &[ProtocolVersion]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&ProtocolVersion::TLS12.0.to_be_bytes());
        b.extend_from_slice(&[0x11; 32]);
        b.push(0);
        b.extend_from_slice(&((suites.len() * 2) as u16).to_be_bytes());
        for s in suites {
            b.extend_from_slice(&s.to_be_bytes());
        }
        b.extend_from_slice(&[1, 0]);
        let mut exts = Vec::new();
        if let Some(name) = sni {
            let mut d = Vec::new();
            d.extend_from_slice(&((name.len() + 3) as u16).to_be_bytes());
            d.push(0);
            d.extend_from_slice(&(name.len() as u16).to_be_bytes());
            d.extend_from_slice(name.as_bytes());
            ext(&mut exts, EXT_SERVER_NAME, &d);
        }
        if !versions.is_empty() {
            let mut d = alloc::vec![(versions.len() * 2) as u8];
            for v in versions {
                d.extend_from_slice(&v.0.to_be_bytes());
            }
            ext(&mut exts, EXT_SUPPORTED_VERSIONS, &d);
        }
        b.extend_from_slice(&(exts.len() as u16).to_be_bytes());
        b.extend(exts);
        handshake(HS_CLIENT_HELLO, &b)
    }

    pub fn server_hello(legacy: ProtocolVersion, suite: u16, selected: Option<ProtocolVersion>) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&legacy.0.to_be_bytes());
        b.extend_from_slice(&[0x22; 32]);
        b.push(0);
        b.extend_from_slice(&suite.to_be_bytes());
        b.push(0);
        let mut exts = Vec::new();
        if let Some(v) = selected {
            ext(&mut exts, EXT_SUPPORTED_VERSIONS, &v.0.to_be_bytes());
        }
        b.extend_from_slice(&(exts.len() as u16).to_be_bytes());
        b.extend(exts);
        handshake(HS_SERVER_HELLO, &b)
    }

    pub fn certificate(chain: &[&[u8]]) -> Vec<u8> {
        let mut list = Vec::new();
        for der in chain {
            list.extend_from_slice(&(der.len() as u32).to_be_bytes()[1..]);
            list.extend_from_slice(der);
        }
        let mut b = Vec::new();
        b.extend_from_slice(&(list.len() as u32).to_be_bytes()[1..]);
        b.extend(list);
        handshake(HS_CERTIFICATE, &b)
    }

    pub fn alert(level: u8, description: u8) -> Vec<u8> {
        record(CONTENT_ALERT, ProtocolVersion::TLS12, &[level, description])
    }

    pub fn change_cipher_spec() -> Vec<u8> {
        record(CONTENT_CHANGE_CIPHER_SPEC, ProtocolVersion::TLS12, &[1])
    }

    /// Minimal SSL 2.0 CLIENT-HELLO.
    pub fn sslv2_client_hello() -> Vec<u8> {
        let body = [1u8, 0, 2, 0, 3, 0, 0, 0, 16, 0x01, 0x00, 0x80, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB, 0xAB];
        let mut out = alloc::vec![0x80 | (body.len() >> 8) as u8, body.len() as u8];
        out.extend_from_slice(&body);
        out
    }
}
