//! Transparent TLS interception probe. Device connections are terminated
//! with a forged copy of the genuine server certificate, the genuine
//! server is contacted with full validation, and everything the device
//! does is written to a per-connection transcript.

pub mod fleet;
pub mod forge;

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use lifecycle_audit_core::mitm::{
    classify_sessions, decrypt_transcripts, pair_verdicts, verdict_table, ApiRecord, ClassifyConfig, EventKind, Leg,
    MitmObservation, MitmVerdict, ProbeSession, ServerId, SessionKind, TranscriptEvent, VerdictRow,
};
use lifecycle_audit_core::tls;
use lifecycle_audit_core::x509::sha256_hex;
use lifecycle_audit_core::Timestamp;
use rustls::pki_types::{CertificateDer, ServerName};
use rustls::server::Acceptor;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, ReadBuf};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;
use tokio::time::timeout;
use tokio_rustls::server::StartHandshake;
use tokio_rustls::TlsConnector;

use crate::config::MacAddr;
use crate::error::{self, AuditError};
use forge::{ForgedLeaf, LocalCa};

/// Device plaintext kept per session for API extraction.
pub const PLAINTEXT_CAP: usize = 64 * 1024;
const TAP_CAP: usize = 256 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTarget {
    pub device_id: String,
    #[serde(default)]
    pub ip: Option<IpAddr>,
    #[serde(default)]
    pub mac: Option<MacAddr>,
    /// Destination ports to intercept; empty intercepts every port.
    #[serde(default)]
    pub ports: Vec<u16>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([0, 0, 0, 0], 8443))
}

/// Redirect rules (TOML):
///
/// ```toml
/// listen = "0.0.0.0:8443"
/// sensitive_fields = ["device_sk", "device_name", "token"]
///
/// [[targets]]
/// device_id = "cam-01"
/// ip = "192.168.8.21"
/// ports = [443, 8883]
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rules {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default)]
    pub sensitive_fields: Vec<String>,
    #[serde(default)]
    pub targets: Vec<RuleTarget>,
}

impl Default for Rules {
    fn default() -> Self {
        Rules {
            listen: default_listen(),
            sensitive_fields: default_sensitive(),
            targets: Vec::new(),
        }
    }
}

pub fn default_sensitive() -> Vec<String> {
    ["device_sk", "device_name", "token", "password", "secret", "ssid", "key"]
        .into_iter()
        .map(String::from)
        .collect()
}

impl Rules {
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let text = error::read_text(path)?;
        let mut r: Rules = toml::from_str(&text).map_err(|e| AuditError::invalid(path, e))?;
        if r.sensitive_fields.is_empty() {
            r.sensitive_fields = default_sensitive();
        }
        r.validate().map_err(|e| AuditError::invalid(path, e))?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.targets.is_empty() {
            return Err("no targets".into());
        }
        for t in &self.targets {
            if t.ip.is_none() && t.mac.is_none() {
                return Err(format!("target {:?} needs an ip or a mac", t.device_id));
            }
        }
        Ok(())
    }

    /// The device a connection belongs to, if it is to be intercepted.
    pub fn device_for(&self, peer: IpAddr, mac: Option<MacAddr>, port: Option<u16>) -> Option<&RuleTarget> {
        self.targets.iter().find(|t| {
            let who = t.ip == Some(peer) || (t.mac.is_some() && t.mac == mac);
            who && port.is_none_or(|p| t.ports.is_empty() || t.ports.contains(&p))
        })
    }
}

/// Neighbour table lookup for MAC-based rules.
fn arp_mac(ip: IpAddr) -> Option<MacAddr> {
    let text = std::fs::read_to_string("/proc/net/arp").ok()?;
    text.lines().skip(1).find_map(|l| {
        let cols: Vec<&str> = l.split_whitespace().collect();
        (cols.len() >= 4 && cols[0].parse::<IpAddr>().ok() == Some(ip))
            .then(|| cols[3].parse().ok())
            .flatten()
    })
}

/// Where intercepted connections were headed.
#[derive(Clone, Debug)]
pub enum Resolver {
    /// Destination recorded by the kernel for REDIRECTed connections.
    OriginalDst,
    /// Server name to address, for setups without NAT.
    HostMap(BTreeMap<String, SocketAddr>),
}

impl Resolver {
    fn target(&self, original: Option<SocketAddr>, sni: Option<&str>) -> Option<SocketAddr> {
        match self {
            Resolver::OriginalDst => original,
            Resolver::HostMap(m) => sni.and_then(|h| m.get(h).copied()),
        }
    }
}

fn original_dst(stream: &TcpStream) -> Option<SocketAddr> {
    use nix::sys::socket::{getsockopt, sockopt};
    let sa = getsockopt(stream, sockopt::OriginalDst).ok()?;
    let ip = std::net::Ipv4Addr::from(u32::from_be(sa.sin_addr.s_addr));
    let addr = SocketAddr::from((ip, u16::from_be(sa.sin_port)));
    (Some(addr) != stream.local_addr().ok()).then_some(addr)
}

/// Wall-clock timestamps that never run backwards within a run.
#[derive(Clone, Copy, Debug)]
pub struct ProbeClock {
    wall0: Timestamp,
    inst0: Instant,
}

impl ProbeClock {
    pub fn start() -> Self {
        let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        ProbeClock {
            wall0: Timestamp::from_nanos(d.as_nanos() as i64),
            inst0: Instant::now(),
        }
    }

    pub fn now(&self) -> Timestamp {
        Timestamp::from_nanos(self.wall0.as_nanos() + self.inst0.elapsed().as_nanos() as i64)
    }
}

struct Live {
    clock: ProbeClock,
    session: Mutex<ProbeSession>,
    finished: Mutex<bool>,
}

impl Live {
    fn push(&self, kind: EventKind) {
        let mut s = self.session.lock().unwrap();
        let at = self.clock.now();
        s.transcript.push(TranscriptEvent { at, kind });
    }

    fn update(&self, f: impl FnOnce(&mut ProbeSession)) {
        f(&mut self.session.lock().unwrap())
    }

    fn finish(&self) {
        let mut s = self.session.lock().unwrap();
        s.end = self.clock.now();
        *self.finished.lock().unwrap() = true;
    }

    fn snapshot(&self, probe_end: Timestamp) -> ProbeSession {
        let mut s = self.session.lock().unwrap().clone();
        if !*self.finished.lock().unwrap() {
            let last = s.transcript.last().map_or(s.start, |e| e.at);
            s.end = probe_end.max(last);
            s.transcript.push(TranscriptEvent {
                at: s.end,
                kind: EventKind::Closed {
                    by: Leg::Device,
                    reason: "probe stopped".into(),
                },
            });
        }
        s
    }
}

/// Records everything read from the device while the handshake runs.
struct Tap<S> {
    inner: S,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<S: AsyncRead + Unpin> AsyncRead for Tap<S> {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<std::io::Result<()>> {
        let before = buf.filled().len();
        let r = Pin::new(&mut self.inner).poll_read(cx, buf);
        if let Poll::Ready(Ok(())) = r {
            let mut log = self.log.lock().unwrap();
            let room = TAP_CAP.saturating_sub(log.len());
            let new = &buf.filled()[before..];
            log.extend_from_slice(&new[..new.len().min(room)]);
        }
        r
    }
}

impl<S: AsyncWrite + Unpin> AsyncWrite for Tap<S> {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &[u8]) -> Poll<std::io::Result<usize>> {
        Pin::new(&mut self.inner).poll_write(cx, buf)
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Timeouts {
    pub handshake: Duration,
    pub connect: Duration,
    /// Longest a relayed session may stay open.
    pub session: Duration,
    /// Time in-flight sessions get to finish once the probe stops.
    pub grace: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            handshake: Duration::from_secs(10),
            connect: Duration::from_secs(10),
            session: Duration::from_secs(120),
            grace: Duration::from_secs(5),
        }
    }
}

type ForgeCache = BTreeMap<(String, String), (ForgedLeaf, Arc<rustls::ServerConfig>)>;

pub struct Interceptor {
    ca: Arc<LocalCa>,
    upstream: TlsConnector,
    rules: Rules,
    resolver: Resolver,
    timeouts: Timeouts,
    clock: ProbeClock,
    next_id: AtomicU64,
    live: Mutex<Vec<Arc<Live>>>,
    forged: Mutex<ForgeCache>,
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

/// Upstream client config validating against the pinned roots plus `extra`.
pub fn upstream_config(extra: &[CertificateDer<'_>]) -> Result<rustls::ClientConfig, AuditError> {
    let roots = crate::trust::root_store(extra).map_err(|e| AuditError::Probe(e.to_string()))?;
    Ok(rustls::ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| AuditError::Probe(e.to_string()))?
        .with_root_certificates(roots)
        .with_no_client_auth())
}

fn io_tls_error(e: &std::io::Error) -> Option<&rustls::Error> {
    e.get_ref().and_then(|i| i.downcast_ref::<rustls::Error>())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub listen: SocketAddr,
    pub started: Timestamp,
    pub probe_end: Timestamp,
    pub sessions: Vec<ProbeSession>,
}

impl Interceptor {
    pub fn new(
        ca: Arc<LocalCa>,
        upstream: rustls::ClientConfig,
        rules: Rules,
        resolver: Resolver,
        timeouts: Timeouts,
    ) -> Self {
        Interceptor {
            ca,
            upstream: TlsConnector::from(Arc::new(upstream)),
            rules,
            resolver,
            timeouts,
            clock: ProbeClock::start(),
            next_id: AtomicU64::new(1),
            live: Mutex::new(Vec::new()),
            forged: Mutex::new(BTreeMap::new()),
        }
    }

    /// Accepts connections until `stop` resolves, then gives open
    /// sessions the grace period before cutting them off.
    pub async fn serve(self: Arc<Self>, listener: TcpListener, stop: impl std::future::Future<Output = ()>) -> ProbeRun {
        let listen = listener.local_addr().unwrap_or_else(|_| default_listen());
        let started = self.clock.now();
        let mut tasks = JoinSet::new();
        tokio::pin!(stop);
        loop {
            tokio::select! {
                r = listener.accept() => {
                    if let Ok((s, peer)) = r {
                        tasks.spawn(self.clone().handle(s, peer));
                    }
                }
                _ = &mut stop => break,
            }
        }
        drop(listener);
        let _ = timeout(self.timeouts.grace, async { while tasks.join_next().await.is_some() {} }).await;
        tasks.abort_all();
        while tasks.join_next().await.is_some() {}
        let probe_end = self.clock.now();
        let mut sessions: Vec<ProbeSession> = self.live.lock().unwrap().iter().map(|l| l.snapshot(probe_end)).collect();
        sessions.sort_by_key(|s| s.id);
        ProbeRun {
            listen,
            started,
            probe_end,
            sessions,
        }
    }

    fn open(&self, peer: SocketAddr) -> Arc<Live> {
        let now = self.clock.now();
        let device_id = self
            .rules
            .device_for(peer.ip(), None, None)
            .map_or_else(|| peer.ip().to_string(), |t| t.device_id.clone());
        let live = Arc::new(Live {
            clock: self.clock,
            session: Mutex::new(ProbeSession {
                id: self.next_id.fetch_add(1, Ordering::SeqCst),
                device_id,
                server: ServerId {
                    host: String::new(),
                    port: 0,
                },
                kind: SessionKind::Tls,
                start: now,
                end: now,
                transcript: Vec::new(),
                device_bytes_received: 0,
                upstream_bytes_sent: 0,
                device_plaintext: Vec::new(),
            }),
            finished: Mutex::new(false),
        });
        self.live.lock().unwrap().push(live.clone());
        live
    }

    async fn handle(self: Arc<Self>, stream: TcpStream, peer: SocketAddr) {
        let live = self.open(peer);
        live.push(EventKind::ConnectionOpened);
        let reason = self.intercept(&live, stream, peer).await;
        if let Err(reason) = reason {
            live.push(EventKind::Closed { by: Leg::Device, reason });
        }
        live.finish();
    }

    fn mac_of(&self, ip: IpAddr) -> Option<MacAddr> {
        if self.rules.targets.iter().any(|t| t.mac.is_some()) {
            arp_mac(ip)
        } else {
            None
        }
    }

    async fn intercept(&self, live: &Live, mut stream: TcpStream, peer: SocketAddr) -> Result<(), String> {
        let original = match self.resolver {
            Resolver::OriginalDst => original_dst(&stream),
            Resolver::HostMap(_) => None,
        };
        let mut first = [0u8; 1];
        let is_tls = matches!(
            timeout(self.timeouts.handshake, stream.peek(&mut first)).await,
            Ok(Ok(1)) if first[0] == tls::CONTENT_HANDSHAKE
        );
        if !is_tls {
            let target = original.ok_or("no original destination for non-TLS connection")?;
            live.update(|s| {
                s.kind = SessionKind::Raw;
                s.server = ServerId {
                    host: target.ip().to_string(),
                    port: target.port(),
                };
            });
            return self.relay_raw(live, stream, target, Vec::new()).await;
        }

        let (accepted, hello) = timeout(self.timeouts.handshake, read_client_hello(&mut stream))
            .await
            .map_err(|_| "timed out waiting for ClientHello".to_string())??;
        let sni = accepted.client_hello().server_name().map(String::from);
        live.push(EventKind::ClientHello { sni: sni.clone() });
        let target = self
            .resolver
            .target(original, sni.as_deref())
            .ok_or_else(|| format!("no upstream for server name {sni:?}"))?;
        let host = sni.unwrap_or_else(|| target.ip().to_string());
        live.update(|s| {
            s.server = ServerId {
                host: host.clone(),
                port: target.port(),
            }
        });
        let mac = self.mac_of(peer.ip());
        match self.rules.device_for(peer.ip(), mac, Some(target.port())) {
            Some(t) => live.update(|s| s.device_id = t.device_id.clone()),
            None => {
                live.update(|s| s.kind = SessionKind::Raw);
                return self.relay_raw(live, stream, target, hello).await;
            }
        }

        let upstream = match self.connect_upstream(target, &host).await {
            Ok(u) => u,
            Err(reason) => {
                live.push(EventKind::UpstreamFailed { reason: reason.clone() });
                live.push(EventKind::Closed {
                    by: Leg::Upstream,
                    reason,
                });
                return Ok(());
            }
        };
        let leaf = upstream
            .get_ref()
            .1
            .peer_certificates()
            .and_then(|c| c.first())
            .map(|c| c.as_ref().to_vec())
            .ok_or("upstream presented no certificate")?;
        live.push(EventKind::UpstreamConnected {
            certificate_sha256: sha256_hex(&leaf),
        });
        let (forged, server_cfg) = self.forged_for(&host, &leaf)?;
        live.push(EventKind::ForgedCertificateSent {
            sha256: sha256_hex(&forged.chain[0]),
        });

        let log = Arc::new(Mutex::new(hello));
        let tap = Tap {
            inner: stream,
            log: log.clone(),
        };
        let handshake = StartHandshake::from_parts(accepted, tap).into_stream(server_cfg);
        match timeout(self.timeouts.handshake, handshake).await {
            Ok(Ok(device)) => {
                live.push(EventKind::HandshakeComplete);
                self.relay_tls(live, device, upstream).await;
                Ok(())
            }
            Ok(Err(e)) => {
                let tapped = tls::dissect(&log.lock().unwrap(), 0).alerts;
                if tapped.is_empty() {
                    if let Some(rustls::Error::AlertReceived(d)) = io_tls_error(&e) {
                        live.push(EventKind::Alert {
                            from: Leg::Device,
                            level: 2,
                            description: u8::from(*d),
                        });
                    }
                }
                for a in tapped {
                    live.push(EventKind::Alert {
                        from: Leg::Device,
                        level: a.level,
                        description: a.description,
                    });
                }
                Err(format!("forged handshake: {e}"))
            }
            Err(_) => {
                let tapped = tls::dissect(&log.lock().unwrap(), 0).alerts;
                for a in tapped {
                    live.push(EventKind::Alert {
                        from: Leg::Device,
                        level: a.level,
                        description: a.description,
                    });
                }
                Err("forged handshake timed out".into())
            }
        }
    }

    async fn connect_upstream(
        &self,
        target: SocketAddr,
        host: &str,
    ) -> Result<tokio_rustls::client::TlsStream<TcpStream>, String> {
        let tcp = timeout(self.timeouts.connect, TcpStream::connect(target))
            .await
            .map_err(|_| format!("connect to {target} timed out"))?
            .map_err(|e| format!("connect to {target}: {e}"))?;
        let name = ServerName::try_from(host.to_string()).map_err(|e| format!("server name {host:?}: {e}"))?;
        timeout(self.timeouts.handshake, self.upstream.connect(name, tcp))
            .await
            .map_err(|_| "upstream handshake timed out".to_string())?
            .map_err(|e| format!("upstream handshake: {e}"))
    }

    fn forged_for(&self, host: &str, leaf: &[u8]) -> Result<(ForgedLeaf, Arc<rustls::ServerConfig>), String> {
        let key = (host.to_string(), sha256_hex(leaf));
        if let Some(hit) = self.forged.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let forged = self.ca.forge(leaf).map_err(|e| e.to_string())?;
        let cfg = rustls::ServerConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()
            .map_err(|e| e.to_string())?
            .with_no_client_auth()
            .with_single_cert(forged.chain.clone(), forged.private_key())
            .map_err(|e| e.to_string())?;
        let entry = (forged, Arc::new(cfg));
        self.forged.lock().unwrap().insert(key, entry.clone());
        Ok(entry)
    }

    async fn relay_tls<D, U>(&self, live: &Live, device: D, upstream: U)
    where
        D: AsyncRead + AsyncWrite + Unpin,
        U: AsyncRead + AsyncWrite + Unpin,
    {
        let (mut dr, mut dw) = tokio::io::split(device);
        let (mut ur, mut uw) = tokio::io::split(upstream);
        let to_upstream = async {
            let mut buf = vec![0u8; 16 * 1024];
            let reason = loop {
                let n = match dr.read(&mut buf).await {
                    Ok(0) => break "device closed".to_string(),
                    Ok(n) => n,
                    Err(e) => break format!("device read: {e}"),
                };
                live.push(EventKind::Relayed {
                    from: Leg::Device,
                    bytes: n as u64,
                });
                live.update(|s| {
                    s.device_bytes_received += n as u64;
                    let room = PLAINTEXT_CAP.saturating_sub(s.device_plaintext.len());
                    s.device_plaintext.extend_from_slice(&buf[..n.min(room)]);
                });
                if let Err(e) = uw.write_all(&buf[..n]).await {
                    break format!("upstream write: {e}");
                }
                live.update(|s| s.upstream_bytes_sent += n as u64);
            };
            let _ = uw.shutdown().await;
            live.push(EventKind::Closed { by: Leg::Device, reason });
        };
        let to_device = async {
            let mut buf = vec![0u8; 16 * 1024];
            let reason = loop {
                let n = match ur.read(&mut buf).await {
                    Ok(0) => break "upstream closed".to_string(),
                    Ok(n) => n,
                    Err(e) => break format!("upstream read: {e}"),
                };
                live.push(EventKind::Relayed {
                    from: Leg::Upstream,
                    bytes: n as u64,
                });
                if let Err(e) = dw.write_all(&buf[..n]).await {
                    break format!("device write: {e}");
                }
            };
            let _ = dw.shutdown().await;
            live.push(EventKind::Closed {
                by: Leg::Upstream,
                reason,
            });
        };
        if timeout(self.timeouts.session, async { tokio::join!(to_upstream, to_device) })
            .await
            .is_err()
        {
            live.push(EventKind::Closed {
                by: Leg::Device,
                reason: "session time limit".into(),
            });
        }
    }

    async fn relay_raw(&self, live: &Live, mut device: TcpStream, target: SocketAddr, prefix: Vec<u8>) -> Result<(), String> {
        let mut up = timeout(self.timeouts.connect, TcpStream::connect(target))
            .await
            .map_err(|_| format!("connect to {target} timed out"))?
            .map_err(|e| format!("connect to {target}: {e}"))?;
        up.write_all(&prefix).await.map_err(|e| format!("upstream write: {e}"))?;
        let copied = timeout(self.timeouts.session, tokio::io::copy_bidirectional(&mut device, &mut up)).await;
        let (d2u, u2d) = match copied {
            Ok(Ok(v)) => v,
            Ok(Err(_)) | Err(_) => (0, 0),
        };
        let sent = prefix.len() as u64 + d2u;
        live.update(|s| {
            s.device_bytes_received = sent;
            s.upstream_bytes_sent = sent;
        });
        live.push(EventKind::RawRelayed {
            from: Leg::Device,
            bytes: sent,
        });
        live.push(EventKind::RawRelayed {
            from: Leg::Upstream,
            bytes: u2d,
        });
        live.push(EventKind::Closed {
            by: Leg::Device,
            reason: "relay finished".into(),
        });
        Ok(())
    }
}

/// Reads until rustls has a complete ClientHello; returns it along with
/// every byte consumed.
async fn read_client_hello(stream: &mut TcpStream) -> Result<(rustls::server::Accepted, Vec<u8>), String> {
    let mut acceptor = Acceptor::default();
    let mut seen = Vec::new();
    let mut buf = [0u8; 4096];
    loop {
        let n = stream.read(&mut buf).await.map_err(|e| format!("device read: {e}"))?;
        if n == 0 {
            return Err("device closed before ClientHello".into());
        }
        seen.extend_from_slice(&buf[..n]);
        let mut rd: &[u8] = &buf[..n];
        while !rd.is_empty() {
            acceptor.read_tls(&mut rd).map_err(|e| format!("ClientHello: {e}"))?;
        }
        match acceptor.accept() {
            Ok(Some(a)) => return Ok((a, seen)),
            Ok(None) => {}
            Err((e, _)) => return Err(format!("ClientHello: {e}")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairVerdict {
    pub device_id: String,
    pub server: ServerId,
    pub verdict: MitmVerdict,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeAnalysis {
    pub observations: Vec<MitmObservation>,
    pub pairs: Vec<PairVerdict>,
    pub table: Vec<VerdictRow>,
    pub api_records: Vec<ApiRecord>,
}

pub fn analyze_run(run: &ProbeRun, cfg: &ClassifyConfig, sensitive: &[String], reveal_values: bool) -> ProbeAnalysis {
    let observations = classify_sessions(&run.sessions, run.probe_end, cfg);
    let pairs = pair_verdicts(&run.sessions, &observations);
    let table = verdict_table(&pairs);
    ProbeAnalysis {
        api_records: decrypt_transcripts(&run.sessions, sensitive, reveal_values),
        observations,
        pairs: pairs
            .into_iter()
            .map(|((device_id, server), verdict)| PairVerdict {
                device_id,
                server,
                verdict,
            })
            .collect(),
        table,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeStatus {
    Ok,
    NoTraffic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub tool: String,
    pub status: ProbeStatus,
    pub listen: SocketAddr,
    pub started: Timestamp,
    pub probe_end: Timestamp,
    pub sessions: usize,
    pub tls_sessions: usize,
    /// Sessions per rule target; zero means the redirection never
    /// delivered that device's connections.
    pub sessions_per_device: BTreeMap<String, usize>,
    pub values_revealed: bool,
    pub verdicts: Vec<VerdictRow>,
    pub pairs: Vec<PairVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<fleet::FleetCheck>,
}

pub const SESSIONS: &str = "mitm_sessions.jsonl";
pub const VERDICTS: &str = "mitm_verdicts.csv";
pub const API_RECORDS: &str = "api_records.jsonl";
pub const SUMMARY: &str = "probe_run.json";

pub fn summarize(run: &ProbeRun, analysis: &ProbeAnalysis, rules: &Rules, reveal: bool) -> ProbeSummary {
    let mut per_device: BTreeMap<String, usize> = rules.targets.iter().map(|t| (t.device_id.clone(), 0)).collect();
    for s in &run.sessions {
        if let Some(n) = per_device.get_mut(&s.device_id) {
            *n += 1;
        }
    }
    ProbeSummary {
        tool: concat!("lifecycle-audit ", env!("CARGO_PKG_VERSION")).into(),
        status: if per_device.values().all(|n| *n == 0) {
            ProbeStatus::NoTraffic
        } else {
            ProbeStatus::Ok
        },
        listen: run.listen,
        started: run.started,
        probe_end: run.probe_end,
        sessions: run.sessions.len(),
        tls_sessions: run.sessions.iter().filter(|s| s.kind == SessionKind::Tls).count(),
        sessions_per_device: per_device,
        values_revealed: reveal,
        verdicts: analysis.table.clone(),
        pairs: analysis.pairs.clone(),
        fleet: None,
    }
}

/// Writes transcripts, the verdict table, API records and the summary.
/// Device plaintext is only kept in transcripts when values are revealed.
pub fn write_state(
    dir: &Path,
    run: &ProbeRun,
    analysis: &ProbeAnalysis,
    summary: &ProbeSummary,
) -> Result<(), AuditError> {
    error::create_dir(dir)?;
    let mut sessions = String::new();
    for s in &run.sessions {
        let mut s = s.clone();
        if !summary.values_revealed {
            s.device_plaintext.clear();
        }
        sessions.push_str(&serde_json::to_string(&s).expect("session serializes"));
        sessions.push('\n');
    }
    error::write_atomic(&dir.join(SESSIONS), sessions.as_bytes())?;
    let meta = serde_json::json!({
        "tool": summary.tool,
        "status": summary.status,
        "values_revealed": summary.values_revealed,
    });
    error::write_atomic(&dir.join(VERDICTS), &crate::report::verdict_csv(&meta, &analysis.table)?)?;
    let mut api = String::new();
    for r in &analysis.api_records {
        api.push_str(&serde_json::to_string(r).expect("record serializes"));
        api.push('\n');
    }
    error::write_atomic(&dir.join(API_RECORDS), api.as_bytes())?;
    let mut s = serde_json::to_vec_pretty(summary).expect("summary serializes");
    s.push(b'\n');
    error::write_atomic(&dir.join(SUMMARY), &s)
}

pub fn read_summary(dir: &Path) -> Result<ProbeSummary, AuditError> {
    let p = if dir.is_dir() { dir.join(SUMMARY) } else { dir.to_path_buf() };
    serde_json::from_str(&error::read_text(&p)?).map_err(|e| AuditError::invalid(&p, e))
}
