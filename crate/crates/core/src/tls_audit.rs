//! Protocol version inventory, certificate extraction and the static
//! certificate audit.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::classify::Verdict;
use crate::flow::{FlowRecord, ProtocolTag};
use crate::phase::PhaseLabel;
use crate::tls::{self, ProtocolVersion, TlsDirection};
use crate::x509::{parse_certificate, ParsedCertificate, X509Error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolLabel {
    #[serde(rename = "SSLv2")]
    Sslv2,
    #[serde(rename = "SSLv3")]
    Sslv3,
    /// SSL/TLS record framing whose handshake was never observed.
    #[serde(rename = "SSL")]
    SslGeneric,
    #[serde(rename = "TLS1.0")]
    Tls10,
    #[serde(rename = "TLS1.1")]
    Tls11,
    #[serde(rename = "TLS1.2")]
    Tls12,
    #[serde(rename = "TLS1.3")]
    Tls13,
    #[serde(rename = "PROPRIETARY")]
    Proprietary,
}

impl ProtocolLabel {
    pub const ALL: [ProtocolLabel; 8] = [
        ProtocolLabel::Sslv2,
        ProtocolLabel::Sslv3,
        ProtocolLabel::SslGeneric,
        ProtocolLabel::Tls10,
        ProtocolLabel::Tls11,
        ProtocolLabel::Tls12,
        ProtocolLabel::Tls13,
        ProtocolLabel::Proprietary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolLabel::Sslv2 => "SSLv2",
            ProtocolLabel::Sslv3 => "SSLv3",
            ProtocolLabel::SslGeneric => "SSL",
            ProtocolLabel::Tls10 => "TLS1.0",
            ProtocolLabel::Tls11 => "TLS1.1",
            ProtocolLabel::Tls12 => "TLS1.2",
            ProtocolLabel::Tls13 => "TLS1.3",
            ProtocolLabel::Proprietary => "PROPRIETARY",
        }
    }

    pub fn parse(s: &str) -> Option<ProtocolLabel> {
        ProtocolLabel::ALL.into_iter().find(|l| l.as_str().eq_ignore_ascii_case(s))
    }

    pub fn from_version(v: ProtocolVersion) -> Option<ProtocolLabel> {
        Some(match v {
            ProtocolVersion::SSL3 => ProtocolLabel::Sslv3,
            ProtocolVersion::TLS10 => ProtocolLabel::Tls10,
            ProtocolVersion::TLS11 => ProtocolLabel::Tls11,
            ProtocolVersion::TLS12 => ProtocolLabel::Tls12,
            ProtocolVersion::TLS13 => ProtocolLabel::Tls13,
            _ => return None,
        })
    }
}

impl fmt::Display for ProtocolLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Both directions of one TLS conversation, oriented client/server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TlsSession {
    pub client: TlsDirection,
    pub server: TlsDirection,
    pub server_ip: IpAddr,
    pub server_port: Option<u16>,
}

impl TlsSession {
    pub fn sni(&self) -> Option<&str> {
        self.client.client_hello.as_ref()?.sni.as_deref()
    }

    pub fn negotiated(&self) -> Option<ProtocolVersion> {
        let sh = self.server.server_hello.as_ref()?;
        (!sh.is_retry_request).then(|| sh.negotiated())
    }

    pub fn is_psk(&self) -> bool {
        self.server
            .server_hello
            .as_ref()
            .is_some_and(|sh| tls::is_psk_suite(sh.cipher_suite))
    }
}

/// Dissects a TLS-tagged flow. The side that sent the ClientHello is the
/// client; without one, the initiator is assumed to be.
pub fn tls_session(flow: &FlowRecord, app_data_cap: usize) -> Option<TlsSession> {
    if !flow.has_tag(ProtocolTag::Tls) {
        return None;
    }
    let a = tls::dissect(&flow.initiator_payload, app_data_cap);
    let b = tls::dissect(&flow.responder_payload, app_data_cap);
    let responder = flow.responder();
    let (client, server, server_ep) = if b.client_hello.is_some() && a.client_hello.is_none() {
        (b, a, flow.initiator)
    } else {
        (a, b, responder)
    };
    Some(TlsSession {
        client,
        server,
        server_ip: server_ep.ip,
        server_port: server_ep.port,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VersionOutcome {
    Label(ProtocolLabel),
    /// A handshake began but no ServerHello was seen.
    Undetermined,
}

/// Version evidence for one flow, or `None` when the flow carries no
/// SSL/TLS and is not an encrypted proprietary stream.
pub fn flow_protocol(flow: &FlowRecord, verdict: Option<Verdict>) -> Option<VersionOutcome> {
    if flow.has_tag(ProtocolTag::Sslv2) {
        return Some(VersionOutcome::Label(ProtocolLabel::Sslv2));
    }
    if let Some(s) = tls_session(flow, 0) {
        if let Some(v) = s.negotiated() {
            return Some(match ProtocolLabel::from_version(v) {
                Some(l) => VersionOutcome::Label(l),
                None => VersionOutcome::Undetermined,
            });
        }
        let handshake_seen = s.client.client_hello.is_some() || s.server.server_hello.is_some();
        return Some(if handshake_seen {
            VersionOutcome::Undetermined
        } else {
            VersionOutcome::Label(ProtocolLabel::SslGeneric)
        });
    }
    (verdict == Some(Verdict::Encrypted)).then_some(VersionOutcome::Label(ProtocolLabel::Proprietary))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolInventory {
    pub rows: BTreeMap<(String, Option<PhaseLabel>), BTreeSet<ProtocolLabel>>,
    pub undetermined: usize,
}

impl ProtocolInventory {
    pub fn add(&mut self, device_id: &str, phase: Option<PhaseLabel>, outcome: VersionOutcome) {
        match outcome {
            VersionOutcome::Label(l) => {
                self.rows.entry((device_id.into(), phase)).or_default().insert(l);
            }
            VersionOutcome::Undetermined => self.undetermined += 1,
        }
    }

    /// Devices using `label` in `phase`, or anywhere when `phase` is `None`.
    pub fn devices_using(&self, label: ProtocolLabel, phase: Option<PhaseLabel>) -> BTreeSet<&str> {
        self.rows
            .iter()
            .filter(|((_, p), set)| (phase.is_none() || *p == phase) && set.contains(&label))
            .map(|((d, _), _)| d.as_str())
            .collect()
    }

    /// Union over phases for one device.
    pub fn device_protocols(&self, device_id: &str) -> BTreeSet<ProtocolLabel> {
        self.rows
            .iter()
            .filter(|((d, _), _)| d == device_id)
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }
}

/// Flow input for the inventory and certificate extraction.
#[derive(Clone, Copy, Debug)]
pub struct AuditFlow<'a> {
    pub flow: &'a FlowRecord,
    pub verdict: Option<Verdict>,
}

pub fn detect_protocol_versions(flows: &[AuditFlow<'_>]) -> ProtocolInventory {
    let mut inv = ProtocolInventory::default();
    for f in flows {
        if let Some(o) = flow_protocol(f.flow, f.verdict) {
            inv.add(&f.flow.device_id, f.flow.phase, o);
        }
    }
    inv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainPosition {
    Leaf,
    Intermediate,
    Root,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEndpoint {
    pub ip: IpAddr,
    pub port: Option<u16>,
    pub sni: Option<String>,
}

impl fmt::Display for ServerEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ep = crate::flow::Endpoint {
            ip: self.ip,
            port: self.port,
        };
        match &self.sni {
            Some(s) => write!(f, "{ep} ({s})"),
            None => write!(f, "{ep}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub device_id: String,
    pub phase: Option<PhaseLabel>,
    pub server: ServerEndpoint,
    /// Chain this certificate arrived in; unique within one extraction.
    pub chain_id: usize,
    pub chain_position: ChainPosition,
    pub der: Vec<u8>,
    pub cert: ParsedCertificate,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertExtraction {
    pub records: Vec<CertificateRecord>,
    /// TLS 1.3 sessions whose certificates are encrypted.
    pub cert_opaque: usize,
    pub psk_model_devices: BTreeSet<String>,
    pub certificate_model_devices: BTreeSet<String>,
    /// Chains skipped because a certificate did not parse.
    pub warnings: Vec<String>,
}

/// Orders a chain leaf-first by following issuer links; certificates that
/// do not link up keep their input order at the end.
pub fn order_chain(certs: &[ParsedCertificate]) -> Vec<usize> {
    let n = certs.len();
    if n == 0 {
        return Vec::new();
    }
    let issues_other = |i: usize| (0..n).any(|j| j != i && !certs[j].is_self_issued() && certs[j].issuer_der == certs[i].subject_der);
    let leaf = (0..n).find(|&i| !issues_other(i)).unwrap_or(0);
    let mut order = alloc::vec![leaf];
    let mut used = alloc::vec![false; n];
    used[leaf] = true;
    let mut cur = leaf;
    while !certs[cur].is_self_issued() {
        let next = (0..n).find(|&j| !used[j] && certs[j].subject_der == certs[cur].issuer_der);
        match next {
            Some(j) => {
                used[j] = true;
                order.push(j);
                cur = j;
            }
            None => break,
        }
    }
    order.extend((0..n).filter(|&j| !used[j]));
    order
}

fn position(idx: usize, len: usize, cert: &ParsedCertificate) -> ChainPosition {
    if idx == 0 {
        ChainPosition::Leaf
    } else if idx + 1 == len && cert.is_self_issued() {
        ChainPosition::Root
    } else {
        ChainPosition::Intermediate
    }
}

/// Pulls certificate chains out of TLS 1.2-and-older handshakes and tags
/// certificate-less PSK devices.
pub fn extract_certificates(flows: &[AuditFlow<'_>]) -> CertExtraction {
    let mut out = CertExtraction::default();
    let mut psk_sessions: BTreeSet<&str> = BTreeSet::new();
    for f in flows {
        let Some(s) = tls_session(f.flow, 0) else { continue };
        let device = f.flow.device_id.as_str();
        if s.negotiated() == Some(ProtocolVersion::TLS13) {
            out.cert_opaque += 1;
            continue;
        }
        if !s.server.certificates.is_empty() {
            out.certificate_model_devices.insert(device.into());
            let parsed: Result<Vec<ParsedCertificate>, X509Error> =
                s.server.certificates.iter().map(|d| parse_certificate(d)).collect();
            let parsed = match parsed {
                Ok(p) => p,
                Err(e) => {
                    out.warnings.push(format!("{device} {}: chain skipped: {e}", f.flow.key));
                    continue;
                }
            };
            let chain_id = out.records.iter().map(|r| r.chain_id + 1).max().unwrap_or(0);
            let order = order_chain(&parsed);
            let server = ServerEndpoint {
                ip: s.server_ip,
                port: s.server_port,
                sni: s.sni().map(String::from),
            };
            let n = order.len();
            for (pos, &i) in order.iter().enumerate() {
                out.records.push(CertificateRecord {
                    device_id: device.into(),
                    phase: f.flow.phase,
                    server: server.clone(),
                    chain_id,
                    chain_position: position(pos, n, &parsed[i]),
                    der: s.server.certificates[i].clone(),
                    cert: parsed[i].clone(),
                });
            }
        } else if s.is_psk() {
            psk_sessions.insert(device);
        }
    }
    out.psk_model_devices = psk_sessions
        .into_iter()
        .filter(|d| !out.certificate_model_devices.contains(*d))
        .map(String::from)
        .collect();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingKind {
    WeakSignature,
    WeakKey,
    SelfSigned,
    ExcessiveValidity,
    UnrecognizedAlgorithm,
}

impl FindingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingKind::WeakSignature => "WEAK_SIGNATURE",
            FindingKind::WeakKey => "WEAK_KEY",
            FindingKind::SelfSigned => "SELF_SIGNED",
            FindingKind::ExcessiveValidity => "EXCESSIVE_VALIDITY",
            FindingKind::UnrecognizedAlgorithm => "UNRECOGNIZED_ALGORITHM",
        }
    }
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateFinding {
    pub device_id: String,
    pub phase: Option<PhaseLabel>,
    pub endpoint: String,
    pub finding: FindingKind,
    /// SHA-256 of the certificate that triggered the finding.
    pub fingerprint: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditPolicy {
    /// Case-insensitive substrings of signature algorithm names.
    pub weak_signature_patterns: Vec<String>,
    pub min_rsa_bits: u32,
    pub min_ec_bits: u32,
    pub min_dsa_bits: u32,
    pub max_validity_days: u32,
}

impl Default for AuditPolicy {
    fn default() -> Self {
        AuditPolicy {
            weak_signature_patterns: alloc::vec!["md2".into(), "md5".into(), "sha1".into()],
            min_rsa_bits: 2048,
            min_ec_bits: 224,
            min_dsa_bits: 2048,
            max_validity_days: 398,
        }
    }
}

/// Subject names (DER) of trusted roots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrustStore {
    pub label: String,
    subjects: BTreeSet<Vec<u8>>,
}

impl TrustStore {
    pub fn new(label: impl Into<String>, subjects: impl IntoIterator<Item = Vec<u8>>) -> Self {
        TrustStore {
            label: label.into(),
            subjects: subjects.into_iter().collect(),
        }
    }

    pub fn contains_subject(&self, name_der: &[u8]) -> bool {
        self.subjects.contains(name_der)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Findings for one chain, given leaf-first.
pub fn audit_chain(chain: &[&CertificateRecord], policy: &AuditPolicy, trust: &TrustStore) -> Vec<CertificateFinding> {
    let mut out = Vec::new();
    let Some(leaf) = chain.first() else { return out };
    let finding = |rec: &CertificateRecord, kind, detail: String| CertificateFinding {
        device_id: rec.device_id.clone(),
        phase: rec.phase,
        endpoint: format!("{}", rec.server),
        finding: kind,
        fingerprint: rec.cert.fingerprint.clone(),
        detail,
    };

    // A self-issued anchor on top of a longer chain is judged by the trust
    // decision alone, not by its own algorithms.
    let judged = if chain.len() > 1 && chain[chain.len() - 1].cert.is_self_issued() {
        &chain[..chain.len() - 1]
    } else {
        chain
    };
    for rec in judged {
        let c = &rec.cert;
        let sig = c.signature_algorithm.to_lowercase();
        if c.signature_algorithm == c.signature_oid {
            out.push(finding(rec, FindingKind::UnrecognizedAlgorithm, format!("signature algorithm OID {}", c.signature_oid)));
        } else if policy.weak_signature_patterns.iter().any(|p| sig.contains(&p.to_lowercase())) {
            out.push(finding(rec, FindingKind::WeakSignature, format!("signature algorithm {} (subject {})", c.signature_algorithm, c.subject)));
        }
        let k = &c.public_key;
        let min = match k.algorithm.as_str() {
            "RSA" => Some(policy.min_rsa_bits),
            "EC" => Some(policy.min_ec_bits),
            "DSA" => Some(policy.min_dsa_bits),
            "Ed25519" | "Ed448" => None,
            _ => {
                out.push(finding(rec, FindingKind::UnrecognizedAlgorithm, format!("public key algorithm {}", k.algorithm)));
                None
            }
        };
        if let Some(min) = min {
            if k.size_bits == 0 {
                out.push(finding(rec, FindingKind::UnrecognizedAlgorithm, format!("{} key of undetermined size", k.algorithm)));
            } else if k.size_bits < min {
                out.push(finding(rec, FindingKind::WeakKey, format!("{}-{} key (minimum {min})", k.algorithm, k.size_bits)));
            }
        }
    }

    let top = chain[chain.len() - 1];
    if leaf.cert.is_self_issued() {
        out.push(finding(leaf, FindingKind::SelfSigned, format!("subject equals issuer: {}", leaf.cert.subject)));
    } else {
        let anchor = if top.cert.is_self_issued() { &top.cert.subject_der } else { &top.cert.issuer_der };
        if !trust.contains_subject(anchor) {
            let name = if top.cert.is_self_issued() { &top.cert.subject } else { &top.cert.issuer };
            out.push(finding(leaf, FindingKind::SelfSigned, format!("chain anchor {name} not in trust store {}", trust.label)));
        }
    }

    let days = leaf.cert.validity_secs() as f64 / 86_400.0;
    if days > policy.max_validity_days as f64 {
        out.push(finding(
            leaf,
            FindingKind::ExcessiveValidity,
            format!(
                "valid {} to {} ({days:.0} days > {})",
                leaf.cert.not_before.format("%Y-%m-%d"),
                leaf.cert.not_after.format("%Y-%m-%d"),
                policy.max_validity_days
            ),
        ));
    }
    out
}

/// Audits every chain in `records`. Chains are re-ordered leaf-first
/// before judgment, so input order does not matter.
pub fn audit_certificates(records: &[CertificateRecord], policy: &AuditPolicy, trust: &TrustStore) -> Vec<CertificateFinding> {
    let mut chains: BTreeMap<usize, Vec<&CertificateRecord>> = BTreeMap::new();
    for r in records {
        chains.entry(r.chain_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (_, chain) in chains {
        let parsed: Vec<ParsedCertificate> = chain.iter().map(|r| r.cert.clone()).collect();
        let ordered: Vec<&CertificateRecord> = order_chain(&parsed).into_iter().map(|i| chain[i]).collect();
        out.extend(audit_chain(&ordered, policy, trust));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use crate::flow::{assemble_flows, FlowConfig};
    use crate::packet::{PacketRecord, TcpMeta, Transport};
    use crate::time::Timestamp;
    use crate::tls::build;
    use crate::tls::{CONTENT_APPLICATION_DATA, CONTENT_HANDSHAKE};
    use alloc::vec;
    use core::net::Ipv4Addr;
    use rcgen::{BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, KeyPair};

    fn tls_flow(client: Vec<u8>, server: Vec<u8>) -> FlowRecord {
        let mk = |t: i64, fwd: bool, data: Vec<u8>| {
            let (a, b) = (IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)), IpAddr::V4(Ipv4Addr::new(47, 1, 1, 1)));
            PacketRecord {
                timestamp: Timestamp::from_secs(t),
                src_mac: None,
                src_ip: if fwd { a } else { b },
                dst_ip: if fwd { b } else { a },
                src_port: Some(if fwd { 40000 } else { 443 }),
                dst_port: Some(if fwd { 443 } else { 40000 }),
                transport: Transport::Tcp,
                tcp: Some(TcpMeta { seq: if fwd { 1 } else { 9 }, ack: 0, flags: 0x18 }),
                wire_length: 54 + data.len() as u32,
                payload: data,
            }
        };
        let mut p = vec![mk(1, true, client)];
        if !server.is_empty() {
            p.push(mk(2, false, server));
        }
        assemble_flows(p, "dev", &FlowConfig::default()).remove(0)
    }

    fn hello() -> Vec<u8> {
        build::record(CONTENT_HANDSHAKE, ProtocolVersion::TLS10, &build::client_hello(Some("a.example"), &[0xC02F], &[]))
    }

    fn server_flight(version: ProtocolVersion, selected: Option<ProtocolVersion>, suite: u16, chain: &[&[u8]]) -> Vec<u8> {
        let mut hs = build::server_hello(version, suite, selected);
        if !chain.is_empty() {
            hs.extend(build::certificate(chain));
        }
        build::record(CONTENT_HANDSHAKE, version, &hs)
    }

    #[test]
    fn versions() {
        let f = tls_flow(hello(), server_flight(ProtocolVersion::TLS12, None, 0xC02F, &[]));
        assert_eq!(flow_protocol(&f, None), Some(VersionOutcome::Label(ProtocolLabel::Tls12)));
        let f = tls_flow(hello(), server_flight(ProtocolVersion::TLS12, Some(ProtocolVersion::TLS13), 0x1301, &[]));
        assert_eq!(flow_protocol(&f, None), Some(VersionOutcome::Label(ProtocolLabel::Tls13)));
        let f = tls_flow(hello(), vec![]);
        assert_eq!(flow_protocol(&f, None), Some(VersionOutcome::Undetermined));
        let app = build::record(CONTENT_APPLICATION_DATA, ProtocolVersion::TLS12, &[1; 100]);
        let f = tls_flow(app, vec![]);
        assert_eq!(flow_protocol(&f, None), Some(VersionOutcome::Label(ProtocolLabel::SslGeneric)));
        let f = tls_flow(vec![0x55; 300], vec![]);
        assert_eq!(flow_protocol(&f, Some(Verdict::Encrypted)), Some(VersionOutcome::Label(ProtocolLabel::Proprietary)));
        assert_eq!(flow_protocol(&f, Some(Verdict::Unknown)), None);
    }

    fn ca(name: &str) -> (CertificateParams, KeyPair) {
        let key = KeyPair::generate().unwrap();
        let mut p = CertificateParams::new(Vec::<String>::new()).unwrap();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, name);
        p.distinguished_name = dn;
        p.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        (p, key)
    }

    #[test]
    fn chain_extraction_and_order() {
        let (root_p, root_k) = ca("Root");
        let root = root_p.self_signed(&root_k).unwrap();
        let leaf_k = KeyPair::generate().unwrap();
        let mut lp = CertificateParams::new(vec!["a.example".to_string()]).unwrap();
        lp.not_before = rcgen::date_time_ymd(2024, 1, 1);
        lp.not_after = rcgen::date_time_ymd(2024, 12, 1);
        let leaf = lp.signed_by(&leaf_k, &root, &root_k).unwrap();
        // Sent root-first to check re-ordering.
        let f = tls_flow(hello(), server_flight(ProtocolVersion::TLS12, None, 0xC02F, &[root.der(), leaf.der()]));
        let ex = extract_certificates(&[AuditFlow { flow: &f, verdict: None }]);
        assert_eq!(ex.records.len(), 2);
        assert_eq!(ex.records[0].chain_position, ChainPosition::Leaf);
        assert_eq!(ex.records[1].chain_position, ChainPosition::Root);
        assert_eq!(ex.records[0].server.sni.as_deref(), Some("a.example"));

        let trusted = TrustStore::new("t", [ex.records[1].cert.subject_der.clone()]);
        assert!(audit_certificates(&ex.records, &AuditPolicy::default(), &trusted).is_empty());
        let untrusted = TrustStore::new("empty", []);
        let f = audit_certificates(&ex.records, &AuditPolicy::default(), &untrusted);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].finding, FindingKind::SelfSigned);
    }

    #[test]
    fn psk_and_opaque() {
        let psk = tls_flow(hello(), server_flight(ProtocolVersion::TLS12, None, 0x00A8, &[]));
        let t13 = tls_flow(hello(), server_flight(ProtocolVersion::TLS12, Some(ProtocolVersion::TLS13), 0x1301, &[]));
        let ex = extract_certificates(&[AuditFlow { flow: &psk, verdict: None }, AuditFlow { flow: &t13, verdict: None }]);
        assert_eq!(ex.cert_opaque, 1);
        assert!(ex.psk_model_devices.contains("dev"));
        assert!(ex.records.is_empty());
    }

    #[test]
    fn century_self_signed() {
        let k = KeyPair::generate().unwrap();
        let mut p = CertificateParams::new(vec!["cam.local".to_string()]).unwrap();
        p.not_before = rcgen::date_time_ymd(2020, 1, 1);
        p.not_after = rcgen::date_time_ymd(2120, 1, 1);
        let c = p.self_signed(&k).unwrap();
        let f = tls_flow(hello(), server_flight(ProtocolVersion::TLS12, None, 0xC02F, &[c.der()]));
        let ex = extract_certificates(&[AuditFlow { flow: &f, verdict: None }]);
        let kinds: BTreeSet<FindingKind> = audit_certificates(&ex.records, &AuditPolicy::default(), &TrustStore::default())
            .into_iter()
            .map(|f| f.finding)
            .collect();
        assert_eq!(kinds, [FindingKind::SelfSigned, FindingKind::ExcessiveValidity].into());
    }
}
