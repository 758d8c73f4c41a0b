//! Loopback fleet for exercising the probe without hardware. Each
//! simulated device reacts to the forged certificate in a scripted way,
//! against local upstream servers that are either trusted by the probe
//! or signed by an unknown CA.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use lifecycle_audit_core::mitm::{ClassifyConfig, MitmVerdict, ServerId};
use lifecycle_audit_core::tls::{self, alert};
use rcgen::{BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, KeyPair};
use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::{verify_tls12_signature, verify_tls13_signature, CryptoProvider};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::{CertificateError, ClientConfig, ClientConnection, DigitallySignedStruct, SignatureScheme};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpSocket, TcpStream};
use tokio::task::JoinSet;
use tokio_rustls::{TlsAcceptor, TlsConnector};

use super::forge::LocalCa;
use super::{analyze_run, upstream_config, Interceptor, ProbeAnalysis, ProbeRun, Resolver, RuleTarget, Rules, Timeouts};
use crate::error::{self, AuditError};

pub const HOST_SUFFIX: &str = "fleet.test";

/// How a simulated device treats the certificate it is shown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Behavior {
    /// Full validation against the public web roots.
    Strict,
    /// Rejects the certificate and sends this alert (TLS 1.2 only).
    Alert(u8),
    /// Accepts any certificate and talks to its API.
    Naive,
    /// Drops the connection without an alert and tries again.
    Redial,
    /// Drops the connection once and goes quiet.
    NoInternet,
}

const ALERT_NAMES: [(&str, u8); 5] = [
    ("unknown_ca", alert::UNKNOWN_CA),
    ("decrypt_error", alert::DECRYPT_ERROR),
    ("bad_certificate", alert::BAD_CERTIFICATE),
    ("close_notify", alert::CLOSE_NOTIFY),
    ("decode_error", alert::DECODE_ERROR),
];

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "strict" => Behavior::Strict,
            "naive" => Behavior::Naive,
            "redial" => Behavior::Redial,
            "no_internet" => Behavior::NoInternet,
            _ => {
                let name = s.strip_prefix("alert:").ok_or_else(|| format!("unknown behavior {s:?}"))?;
                let code = ALERT_NAMES
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, c)| *c)
                    .ok_or_else(|| format!("unknown alert {name:?}"))?;
                Behavior::Alert(code)
            }
        })
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::Strict => f.write_str("strict"),
            Behavior::Naive => f.write_str("naive"),
            Behavior::Redial => f.write_str("redial"),
            Behavior::NoInternet => f.write_str("no_internet"),
            Behavior::Alert(c) => {
                let name = ALERT_NAMES.iter().find(|(_, x)| x == c).map_or("?", |(n, _)| n);
                write!(f, "alert:{name}")
            }
        }
    }
}

impl Serialize for Behavior {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Behavior {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn yes() -> bool {
    true
}

fn default_redials() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetServer {
    pub name: String,
    /// Signed by a CA the probe trusts; otherwise by an unknown one.
    #[serde(default = "yes")]
    pub trusted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetPair {
    pub device: String,
    pub server: String,
    pub behavior: Behavior,
}

/// ```toml
/// redial_attempts = 3
/// [[servers]]
/// name = "cloud"
/// [[servers]]
/// name = "legacy"
/// trusted = false
/// [[pairs]]
/// device = "cam"
/// server = "cloud"
/// behavior = "alert:unknown_ca"
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    #[serde(default = "default_redials")]
    pub redial_attempts: usize,
    pub servers: Vec<FleetServer>,
    pub pairs: Vec<FleetPair>,
}

impl FleetSpec {
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let text = error::read_text(path)?;
        let spec: FleetSpec = toml::from_str(&text).map_err(|e| AuditError::invalid(path, e))?;
        spec.validate().map_err(|e| AuditError::invalid(path, e))?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.pairs.is_empty() {
            return Err("fleet has no pairs".into());
        }
        let servers: BTreeMap<&str, bool> = self.servers.iter().map(|s| (s.name.as_str(), s.trusted)).collect();
        if servers.len() != self.servers.len() {
            return Err("duplicate server name".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if !servers.contains_key(p.server.as_str()) {
                return Err(format!("pair {}/{} names an unknown server", p.device, p.server));
            }
            if !seen.insert((&p.device, &p.server)) {
                return Err(format!("pair {}/{} listed twice", p.device, p.server));
            }
        }
        for d in self.devices() {
            let quiet = self.pairs.iter().filter(|p| p.device == d && p.behavior == Behavior::NoInternet).count();
            if quiet > 1 {
                return Err(format!("device {d} goes quiet more than once"));
            }
        }
        if self.devices().len() > 200 {
            return Err("at most 200 simulated devices".into());
        }
        if self.redial_attempts < 3 {
            return Err("redial_attempts must be at least 3".into());
        }
        Ok(())
    }

    pub fn devices(&self) -> Vec<String> {
        let mut d: Vec<String> = self.pairs.iter().map(|p| p.device.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn host(server: &str) -> String {
        format!("{server}.{HOST_SUFFIX}")
    }

    /// The verdict the probe should reach for a pair.
    pub fn expected(&self, pair: &FleetPair) -> MitmVerdict {
        let trusted = self.servers.iter().find(|s| s.name == pair.server).is_some_and(|s| s.trusted);
        if !trusted {
            return MitmVerdict::ServerHandshakeFailed;
        }
        match pair.behavior {
            Behavior::Strict => MitmVerdict::UnknownCa,
            Behavior::Alert(c) => MitmVerdict::from_alert(c).unwrap_or(MitmVerdict::Unclassified),
            Behavior::Naive => MitmVerdict::CommunicatesNormally,
            Behavior::Redial => MitmVerdict::DisconnectReconnect,
            Behavior::NoInternet => MitmVerdict::NoInternet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetPairCheck {
    pub device: String,
    pub server: ServerId,
    pub behavior: Behavior,
    pub expected: MitmVerdict,
    pub observed: Option<MitmVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetCheck {
    pub pairs: Vec<FleetPairCheck>,
    pub mismatches: usize,
    /// Every relayed session forwarded exactly the bytes the device sent.
    pub relay_fidelity: bool,
    pub elapsed_secs: f64,
}

pub struct FleetOutcome {
    pub run: ProbeRun,
    pub rules: Rules,
    pub analysis: ProbeAnalysis,
    pub check: FleetCheck,
    /// Genuine leaf certificate of every server, by host.
    pub upstream_leaves: BTreeMap<String, CertificateDer<'static>>,
}

fn provider() -> Arc<CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn make_ca(name: &str) -> Result<(rcgen::Certificate, KeyPair), rcgen::Error> {
    let key = KeyPair::generate()?;
    let mut p = CertificateParams::default();
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, name);
    p.distinguished_name = dn;
    p.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    Ok((p.self_signed(&key)?, key))
}

struct Upstream {
    host: String,
    addr: SocketAddr,
    leaf: CertificateDer<'static>,
}

async fn start_upstream(
    tasks: &mut JoinSet<()>,
    host: String,
    ca: &(rcgen::Certificate, KeyPair),
) -> Result<Upstream, AuditError> {
    let fail = |e: &dyn fmt::Display| AuditError::Probe(format!("fleet server {host}: {e}"));
    let key = KeyPair::generate().map_err(|e| fail(&e))?;
    let params = CertificateParams::new(vec![host.clone()]).map_err(|e| fail(&e))?;
    let leaf = params.signed_by(&key, &ca.0, &ca.1).map_err(|e| fail(&e))?;
    let chain = vec![leaf.der().clone(), ca.0.der().clone()];
    let cfg = rustls::ServerConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| fail(&e))?
        .with_no_client_auth()
        .with_single_cert(chain, PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(key.serialize_der())))
        .map_err(|e| fail(&e))?;
    let acceptor = TlsAcceptor::from(Arc::new(cfg));
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).await.map_err(|e| fail(&e))?;
    let addr = listener.local_addr().map_err(|e| fail(&e))?;
    tasks.spawn(async move {
        let mut conns = JoinSet::new();
        while let Ok((s, _)) = listener.accept().await {
            let acceptor = acceptor.clone();
            conns.spawn(async move {
                if let Ok(mut tls) = acceptor.accept(s).await {
                    if read_request(&mut tls).await.is_some() {
                        let _ = tls
                            .write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\nConnection: close\r\n\r\nok")
                            .await;
                    }
                    let _ = tls.shutdown().await;
                }
            });
        }
    });
    Ok(Upstream {
        host,
        addr,
        leaf: leaf.der().clone(),
    })
}

/// Reads one HTTP request with a Content-Length body.
async fn read_request<S: tokio::io::AsyncRead + Unpin>(s: &mut S) -> Option<Vec<u8>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        if let Some(end) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            let head = String::from_utf8_lossy(&buf[..end]).to_ascii_lowercase();
            let len: usize = head
                .lines()
                .find_map(|l| l.strip_prefix("content-length:"))
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0);
            if buf.len() >= end + 4 + len {
                return Some(buf);
            }
        }
        let n = s.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

/// Accepts every certificate but still checks handshake signatures.
#[derive(Debug)]
struct AcceptAll {
    provider: Arc<CryptoProvider>,
    /// Set when the certificate is refused instead.
    reject: Option<Arc<AtomicBool>>,
}

impl ServerCertVerifier for AcceptAll {
    fn verify_server_cert(
        &self,
        _end_entity: &CertificateDer<'_>,
        _intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        _now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        match &self.reject {
            Some(flag) => {
                flag.store(true, Ordering::SeqCst);
                Err(rustls::Error::InvalidCertificate(CertificateError::UnknownIssuer))
            }
            None => Ok(ServerCertVerified::assertion()),
        }
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls12_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls13_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.provider.signature_verification_algorithms.supported_schemes()
    }
}

/// What a refusing device puts on the wire once it rejects the certificate.
#[derive(Clone, Copy)]
enum OnReject {
    /// Whatever alert the TLS stack queued.
    StackAlert,
    Raw(u8),
    Nothing,
}

fn io_err(e: impl fmt::Display) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

/// Drives a client handshake by hand so the device controls exactly
/// what it sends after the certificate check fails.
async fn refuse(sock: &mut TcpStream, mut conn: ClientConnection, on_reject: OnReject) -> std::io::Result<()> {
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        while conn.wants_write() {
            let mut out = Vec::new();
            conn.write_tls(&mut out)?;
            sock.write_all(&out).await?;
        }
        let n = sock.read(&mut buf).await?;
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        let mut rd = &buf[..n];
        while !rd.is_empty() {
            conn.read_tls(&mut rd)?;
            if let Err(e) = conn.process_new_packets() {
                match on_reject {
                    OnReject::StackAlert => {
                        let mut out = Vec::new();
                        while conn.wants_write() {
                            conn.write_tls(&mut out)?;
                        }
                        sock.write_all(&out).await?;
                    }
                    OnReject::Raw(code) => {
                        let level = if code == alert::CLOSE_NOTIFY { 1 } else { 2 };
                        sock.write_all(&tls::build::alert(level, code)).await?;
                    }
                    OnReject::Nothing => {}
                }
                let _ = sock.shutdown().await;
                // Wait for the probe to hang up so its transcript is final.
                let _ = tokio::time::timeout(Duration::from_secs(5), sock.read(&mut buf)).await;
                return Err(io_err(e));
            }
            if !conn.is_handshaking() {
                return Ok(());
            }
        }
    }
}

struct Clients {
    strict: Arc<ClientConfig>,
    naive: Arc<ClientConfig>,
    refusing_tls12: Arc<ClientConfig>,
}

impl Clients {
    fn new() -> Result<Self, rustls::Error> {
        let roots = rustls::RootCertStore {
            roots: webpki_roots::TLS_SERVER_ROOTS.to_vec(),
        };
        let strict = ClientConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()?
            .with_root_certificates(roots)
            .with_no_client_auth();
        let naive = ClientConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()?
            .dangerous()
            .with_custom_certificate_verifier(Arc::new(AcceptAll {
                provider: provider(),
                reject: None,
            }))
            .with_no_client_auth();
        let refusing = ClientConfig::builder_with_provider(provider())
            .with_protocol_versions(&[&rustls::version::TLS12])?
            .dangerous()
            .with_custom_certificate_verifier(Arc::new(AcceptAll {
                provider: provider(),
                reject: Some(Arc::new(AtomicBool::new(false))),
            }))
            .with_no_client_auth();
        Ok(Clients {
            strict: Arc::new(strict),
            naive: Arc::new(naive),
            refusing_tls12: Arc::new(refusing),
        })
    }
}

async fn dial(from: Ipv4Addr, probe: SocketAddr) -> std::io::Result<TcpStream> {
    let s = TcpSocket::new_v4()?;
    s.bind(SocketAddr::from((from, 0)))?;
    s.connect(probe).await
}

async fn device_attempt(
    clients: &Clients,
    from: Ipv4Addr,
    probe: SocketAddr,
    device: &str,
    host: &str,
    behavior: Behavior,
) -> std::io::Result<()> {
    let mut sock = dial(from, probe).await?;
    let name = ServerName::try_from(host.to_string()).map_err(io_err)?;
    let manual = |cfg: &Arc<ClientConfig>| ClientConnection::new(cfg.clone(), name.clone()).map_err(io_err);
    match behavior {
        Behavior::Strict => refuse(&mut sock, manual(&clients.strict)?, OnReject::StackAlert).await,
        Behavior::Alert(code) => refuse(&mut sock, manual(&clients.refusing_tls12)?, OnReject::Raw(code)).await,
        Behavior::Redial | Behavior::NoInternet => {
            refuse(&mut sock, manual(&clients.refusing_tls12)?, OnReject::Nothing).await
        }
        Behavior::Naive => {
            let mut tls = TlsConnector::from(clients.naive.clone()).connect(name, sock).await?;
            let body = serde_json::json!({
                "device_sk": format!("sk-{device}-5f2a9c"),
                "device_name": device,
                "ssid": "home-network",
                "firmware": "1.0.3",
            })
            .to_string();
            let req = format!(
                "POST /api/v1/device/register HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
                body.len()
            );
            tls.write_all(req.as_bytes()).await?;
            let mut resp = Vec::new();
            let _ = tls.read_to_end(&mut resp).await;
            let _ = tls.shutdown().await;
            Ok(())
        }
    }
}

fn device_ip(index: usize) -> Ipv4Addr {
    let n = 10 + index as u32;
    Ipv4Addr::new(127, 0, (n >> 8) as u8, n as u8)
}

/// Builds the fleet, runs every device against the probe and compares the
/// verdicts with what each scripted behavior should produce.
pub async fn run_fleet(spec: &FleetSpec, ca: Arc<LocalCa>, sensitive: &[String], reveal: bool) -> Result<FleetOutcome, AuditError> {
    spec.validate().map_err(AuditError::Validation)?;
    let t0 = Instant::now();
    let gen = |e: rcgen::Error| AuditError::Probe(format!("fleet CA: {e}"));
    let trusted_ca = make_ca("fleet upstream CA").map_err(gen)?;
    let rogue_ca = make_ca("unknown upstream CA").map_err(gen)?;

    let mut servers = JoinSet::new();
    let mut hosts = BTreeMap::new();
    let mut upstream_leaves = BTreeMap::new();
    for s in &spec.servers {
        let ca = if s.trusted { &trusted_ca } else { &rogue_ca };
        let up = start_upstream(&mut servers, FleetSpec::host(&s.name), ca).await?;
        hosts.insert(up.host.clone(), up.addr);
        upstream_leaves.insert(up.host, up.leaf);
    }

    let devices = spec.devices();
    let ips: BTreeMap<String, Ipv4Addr> = devices.iter().enumerate().map(|(i, d)| (d.clone(), device_ip(i))).collect();
    let rules = Rules {
        listen: SocketAddr::from((Ipv4Addr::LOCALHOST, 0)),
        sensitive_fields: sensitive.to_vec(),
        targets: devices
            .iter()
            .map(|d| RuleTarget {
                device_id: d.clone(),
                ip: Some(IpAddr::V4(ips[d])),
                mac: None,
                ports: Vec::new(),
            })
            .collect(),
    };

    let upstream = upstream_config(&[trusted_ca.0.der().clone()])?;
    let timeouts = Timeouts {
        handshake: Duration::from_secs(5),
        connect: Duration::from_secs(5),
        session: Duration::from_secs(20),
        grace: Duration::from_secs(2),
    };
    let interceptor = Arc::new(Interceptor::new(ca, upstream, rules.clone(), Resolver::HostMap(hosts), timeouts));
    let listener = TcpListener::bind(rules.listen)
        .await
        .map_err(|e| AuditError::Probe(format!("probe listener: {e}")))?;
    let probe_addr = listener.local_addr().map_err(|e| AuditError::Probe(e.to_string()))?;
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let probe = tokio::spawn(interceptor.serve(listener, async {
        let _ = stop_rx.await;
    }));

    let clients = Arc::new(Clients::new().map_err(|e| AuditError::Probe(e.to_string()))?);
    let mut fleet = JoinSet::new();
    for d in &devices {
        let mut pairs: Vec<FleetPair> = spec.pairs.iter().filter(|p| &p.device == d).cloned().collect();
        pairs.sort_by_key(|p| p.behavior == Behavior::NoInternet);
        let (clients, from, redials) = (clients.clone(), ips[d], spec.redial_attempts);
        fleet.spawn(async move {
            for p in pairs {
                let host = FleetSpec::host(&p.server);
                let attempts = if p.behavior == Behavior::Redial { redials } else { 1 };
                for i in 0..attempts {
                    if i > 0 {
                        tokio::time::sleep(Duration::from_millis(20)).await;
                    }
                    let _ = device_attempt(&clients, from, probe_addr, &p.device, &host, p.behavior).await;
                }
            }
        });
    }
    while fleet.join_next().await.is_some() {}
    tokio::time::sleep(Duration::from_millis(100)).await;
    let _ = stop_tx.send(());
    let run = probe.await.map_err(|e| AuditError::Probe(format!("probe task: {e}")))?;
    servers.abort_all();

    let analysis = analyze_run(&run, &ClassifyConfig::default(), sensitive, reveal);
    let observed: BTreeMap<(String, String), MitmVerdict> = analysis
        .pairs
        .iter()
        .map(|p| ((p.device_id.clone(), p.server.host.clone()), p.verdict))
        .collect();
    let pairs: Vec<FleetPairCheck> = spec
        .pairs
        .iter()
        .map(|p| {
            let host = FleetSpec::host(&p.server);
            let port = run
                .sessions
                .iter()
                .find(|s| s.device_id == p.device && s.server.host == host)
                .map_or(0, |s| s.server.port);
            FleetPairCheck {
                device: p.device.clone(),
                observed: observed.get(&(p.device.clone(), host.clone())).copied(),
                server: ServerId { host, port },
                behavior: p.behavior,
                expected: spec.expected(p),
            }
        })
        .collect();
    let mismatches = pairs.iter().filter(|p| p.observed != Some(p.expected)).count();
    let relay_fidelity = run
        .sessions
        .iter()
        .filter(|s| s.handshake_completed())
        .all(|s| s.relay_fidelity_holds());
    Ok(FleetOutcome {
        rules,
        analysis,
        check: FleetCheck {
            pairs,
            mismatches,
            relay_fidelity,
            elapsed_secs: t0.elapsed().as_secs_f64(),
        },
        run,
        upstream_leaves,
    })
}
