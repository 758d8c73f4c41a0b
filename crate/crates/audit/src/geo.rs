//! Offline geolocation snapshots, the rate-limited online client and the
//! provider that combines them.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lifecycle_audit_core::geo::{is_global, GeoAnswer, GeoTable, OrgAliases, UNKNOWN};
use serde::{Deserialize, Serialize};

use crate::config::GeoSettings;
use crate::error::{self, AuditError};

#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("{0} is not a globally routable address")]
    NotGlobal(IpAddr),
}

#[derive(Deserialize)]
struct SnapshotRow {
    start_ip: IpAddr,
    end_ip: IpAddr,
    country: String,
    asn: Option<u32>,
    organization: String,
}

/// Loads a CSV snapshot:
///
/// ```text
/// # snapshot=2026-09-01
/// start_ip,end_ip,country,asn,organization
/// 8.8.8.0,8.8.8.255,US,15169,Google LLC
/// ```
///
/// The `snapshot=` stamp is required; it ends up in every report.
pub fn load_snapshot(path: &Path) -> Result<GeoTable, AuditError> {
    let text = error::read_text(path)?;
    let stamp = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.trim_start_matches('#').trim().strip_prefix("snapshot=").map(|s| s.trim().to_string()))
        .ok_or_else(|| AuditError::invalid(path, "missing `# snapshot=` header"))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for r in rdr.deserialize::<SnapshotRow>() {
        let r = r.map_err(|e| AuditError::invalid(path, e))?;
        let country = if r.country.is_empty() { UNKNOWN.into() } else { r.country.to_ascii_uppercase() };
        rows.push((
            r.start_ip,
            r.end_ip,
            GeoAnswer {
                country,
                organization: r.organization,
                asn: r.asn,
            },
        ));
    }
    GeoTable::new(format!("{} ({})", stamp, file_name(path)), rows).map_err(|e| AuditError::invalid(path, e))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedAnswer {
    pub country: String,
    pub organization: String,
    pub asn: Option<u32>,
    /// RFC 3339 time of the online fetch.
    pub fetched_at: String,
}

#[derive(Deserialize)]
struct OnlineResponse {
    #[serde(default)]
    country: Option<String>,
    #[serde(default)]
    org: Option<String>,
}

/// Splits `"AS15169 Google LLC"` into the ASN and the organization.
fn split_asn(org: &str) -> (Option<u32>, String) {
    let t = org.trim();
    if let Some(rest) = t.strip_prefix("AS") {
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if !digits.is_empty() {
            return (digits.parse().ok(), rest[digits.len()..].trim().to_string());
        }
    }
    (None, t.to_string())
}

/// HTTP client for `GET {endpoint}/{ip}` returning JSON with `country` and
/// `org`. Requests are spaced by the rate limit; answers persist in a
/// JSON cache file, and every IP is requested at most once per process.
pub struct OnlineClient {
    endpoint: String,
    agent: ureq::Agent,
    interval: Duration,
    last: Mutex<Option<Instant>>,
    cache: Mutex<BTreeMap<IpAddr, CachedAnswer>>,
    attempted: Mutex<BTreeMap<IpAddr, Option<GeoAnswer>>>,
    cache_path: Option<PathBuf>,
    requests: Mutex<usize>,
}

impl OnlineClient {
    pub fn new(endpoint: &str, requests_per_sec: f64, cache_path: Option<PathBuf>) -> Result<Self, AuditError> {
        let cache = match &cache_path {
            Some(p) if p.exists() => {
                serde_json::from_str(&error::read_text(p)?).map_err(|e| AuditError::invalid(p, e))?
            }
            _ => BTreeMap::new(),
        };
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .http_status_as_error(true)
            .build();
        let rate = if requests_per_sec > 0.0 { requests_per_sec } else { 1.0 };
        Ok(OnlineClient {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent: config.into(),
            interval: Duration::from_secs_f64(1.0 / rate),
            last: Mutex::new(None),
            cache: Mutex::new(cache),
            attempted: Mutex::new(BTreeMap::new()),
            cache_path,
            requests: Mutex::new(0),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Network requests issued so far.
    pub fn requests(&self) -> usize {
        *self.requests.lock().unwrap()
    }

    /// Cached answer, or one fetch; `None` when the service has nothing.
    pub fn lookup(&self, ip: IpAddr) -> (Option<GeoAnswer>, bool) {
        if let Some(c) = self.cache.lock().unwrap().get(&ip) {
            let a = GeoAnswer {
                country: c.country.clone(),
                organization: c.organization.clone(),
                asn: c.asn,
            };
            return (Some(a), true);
        }
        if let Some(prev) = self.attempted.lock().unwrap().get(&ip) {
            return (prev.clone(), false);
        }
        let answer = self.fetch(ip);
        self.attempted.lock().unwrap().insert(ip, answer.clone());
        if let Some(a) = &answer {
            self.cache.lock().unwrap().insert(
                ip,
                CachedAnswer {
                    country: a.country.clone(),
                    organization: a.organization.clone(),
                    asn: a.asn,
                    fetched_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                },
            );
        }
        (answer, false)
    }

    fn fetch(&self, ip: IpAddr) -> Option<GeoAnswer> {
        {
            let mut last = self.last.lock().unwrap();
            if let Some(t) = *last {
                let wait = self.interval.saturating_sub(t.elapsed());
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            *last = Some(Instant::now());
        }
        *self.requests.lock().unwrap() += 1;
        let url = format!("{}/{}", self.endpoint, ip);
        let resp: OnlineResponse = self.agent.get(&url).call().ok()?.body_mut().read_json().ok()?;
        let country = resp.country.filter(|c| !c.trim().is_empty())?.trim().to_ascii_uppercase();
        let (asn, organization) = split_asn(resp.org.as_deref().unwrap_or(""));
        Some(GeoAnswer {
            country,
            organization: if organization.is_empty() { UNKNOWN.into() } else { organization },
            asn,
        })
    }

    /// Writes the cache file, if one is configured.
    pub fn persist(&self) -> Result<(), AuditError> {
        let Some(p) = &self.cache_path else { return Ok(()) };
        let json = serde_json::to_vec_pretty(&*self.cache.lock().unwrap()).expect("cache serializes");
        error::write_atomic(p, &json)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoCoverage {
    pub offline: usize,
    pub online_cache: usize,
    pub online: usize,
    pub unknown: usize,
}

/// Offline snapshot first, online service on a miss, `UNKNOWN` otherwise.
/// Organizations are normalized through the alias table.
pub struct GeoProvider {
    table: Option<GeoTable>,
    online: Option<OnlineClient>,
    aliases: OrgAliases,
    memo: BTreeMap<IpAddr, GeoAnswer>,
    coverage: GeoCoverage,
}

impl GeoProvider {
    pub fn new(table: Option<GeoTable>, online: Option<OnlineClient>, aliases: OrgAliases) -> Self {
        GeoProvider {
            table,
            online,
            aliases,
            memo: BTreeMap::new(),
            coverage: GeoCoverage::default(),
        }
    }

    /// Provider described by the `[geo]` config section. `snapshot`
    /// overrides the configured offline file.
    pub fn from_settings(settings: &GeoSettings, snapshot: Option<&Path>) -> Result<Self, AuditError> {
        let table = match snapshot.or(settings.snapshot.as_deref()) {
            Some(p) => Some(load_snapshot(p)?),
            None => None,
        };
        let online = match &settings.online_endpoint {
            Some(e) => Some(OnlineClient::new(e, settings.requests_per_sec, settings.cache.clone())?),
            None => None,
        };
        let mut aliases = OrgAliases::with_defaults();
        for (raw, name) in &settings.aliases {
            aliases.insert(raw, name);
        }
        Ok(GeoProvider::new(table, online, aliases))
    }

    /// Provenance string recorded in run metadata.
    pub fn describe(&self) -> String {
        let offline = self.table.as_ref().map_or_else(|| "no offline snapshot".to_string(), |t| t.snapshot.clone());
        match &self.online {
            Some(o) => format!("{offline}; online {}", o.endpoint()),
            None => offline,
        }
    }

    pub fn coverage(&self) -> GeoCoverage {
        self.coverage
    }

    pub fn online(&self) -> Option<&OnlineClient> {
        self.online.as_ref()
    }

    pub fn geolocate(&mut self, ip: IpAddr) -> Result<GeoAnswer, GeoError> {
        if !is_global(&ip) {
            return Err(GeoError::NotGlobal(ip));
        }
        if let Some(a) = self.memo.get(&ip) {
            return Ok(a.clone());
        }
        let offline = self.table.as_ref().and_then(|t| t.lookup(&ip)).cloned();
        let raw = match offline {
            Some(a) => {
                self.coverage.offline += 1;
                Some(a)
            }
            None => match &self.online {
                Some(o) => {
                    let (a, cached) = o.lookup(ip);
                    match (&a, cached) {
                        (Some(_), true) => self.coverage.online_cache += 1,
                        (Some(_), false) => self.coverage.online += 1,
                        (None, _) => {}
                    }
                    a
                }
                None => None,
            },
        };
        let answer = match raw {
            Some(a) => GeoAnswer {
                organization: self.aliases.normalize(&a.organization),
                ..a
            },
            None => {
                self.coverage.unknown += 1;
                GeoAnswer::unknown()
            }
        };
        self.memo.insert(ip, answer.clone());
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn snapshot_file(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("geo.csv");
        std::fs::write(&p, body).unwrap();
        (dir, p)
    }

    #[test]
    fn offline_lookup_and_aliases() {
        let (_d, p) = snapshot_file(
            "# snapshot=2026-09-01\nstart_ip,end_ip,country,asn,organization\n8.8.8.0,8.8.8.255,US,15169,Google LLC\n",
        );
        let t = load_snapshot(&p).unwrap();
        let mut g = GeoProvider::new(Some(t), None, OrgAliases::with_defaults());
        let a = g.geolocate("8.8.8.8".parse().unwrap()).unwrap();
        assert_eq!((a.country.as_str(), a.organization.as_str()), ("US", "Google"));
        assert!(g.describe().starts_with("2026-09-01"));
    }

    #[test]
    fn private_address_is_a_precondition_error() {
        let mut g = GeoProvider::new(None, None, OrgAliases::new());
        assert!(matches!(g.geolocate("10.0.0.1".parse().unwrap()), Err(GeoError::NotGlobal(_))));
    }

    #[test]
    fn miss_without_online_is_unknown_and_counted() {
        let mut g = GeoProvider::new(None, None, OrgAliases::new());
        let a = g.geolocate("203.0.114.9".parse().unwrap()).unwrap();
        assert!(a.is_unknown());
        assert_eq!(a.organization, UNKNOWN);
        assert_eq!(g.coverage().unknown, 1);
    }

    #[test]
    fn snapshot_requires_stamp() {
        let (_d, p) = snapshot_file("start_ip,end_ip,country,asn,organization\n");
        assert!(load_snapshot(&p).is_err());
    }

    #[test]
    fn asn_prefix_split() {
        assert_eq!(split_asn("AS15169 Google LLC"), (Some(15169), "Google LLC".into()));
        assert_eq!(split_asn("Tencent"), (None, "Tencent".into()));
    }

    /// Serves `n` canned JSON answers and reports the request paths.
    fn serve(n: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut paths = Vec::new();
            for _ in 0..n {
                let (mut s, _) = l.accept().unwrap();
                let mut buf = [0u8; 2048];
                let k = s.read(&mut buf).unwrap();
                let req = String::from_utf8_lossy(&buf[..k]).to_string();
                paths.push(req.split_whitespace().nth(1).unwrap_or("").to_string());
                let body = r#"{"country":"cn","org":"AS37963 Hangzhou Alibaba Advertising Co.,Ltd."}"#;
                let resp = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                s.write_all(resp.as_bytes()).unwrap();
            }
            paths
        });
        (format!("http://{addr}"), h)
    }

    #[test]
    fn online_client_rate_limits_and_caches() {
        let (endpoint, server) = serve(2);
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache.json");
        let client = OnlineClient::new(&endpoint, 20.0, Some(cache.clone())).unwrap();
        let mut g = GeoProvider::new(None, Some(client), OrgAliases::with_defaults());
        let t0 = Instant::now();
        let a = g.geolocate("47.96.1.1".parse().unwrap()).unwrap();
        let b = g.geolocate("47.96.1.2".parse().unwrap()).unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(45));
        // Repeats come from memory, not the network.
        g.geolocate("47.96.1.1".parse().unwrap()).unwrap();
        assert_eq!(g.online().unwrap().requests(), 2);
        assert_eq!(a.country, "CN");
        assert_eq!(a.organization, "Alibaba Cloud");
        assert_eq!(a.asn, Some(37963));
        assert_eq!(b.organization, "Alibaba Cloud");
        g.online().unwrap().persist().unwrap();
        assert_eq!(server.join().unwrap(), vec!["/47.96.1.1", "/47.96.1.2"]);

        // A fresh run answers from the persisted cache without a server.
        let client = OnlineClient::new("http://127.0.0.1:9", 1.0, Some(cache)).unwrap();
        let mut g = GeoProvider::new(None, Some(client), OrgAliases::with_defaults());
        let again = g.geolocate("47.96.1.2".parse().unwrap()).unwrap();
        assert_eq!(again.country, "CN");
        assert_eq!(g.coverage().online_cache, 1);
        assert_eq!(g.online().unwrap().requests(), 0);
    }
}
