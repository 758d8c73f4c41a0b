//! Configuration files: operation processes, device metadata, corpus
//! manifests, party policy, and the pipeline settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lifecycle_audit_core::classify::{MagicNumberTable, Thresholds};
use lifecycle_audit_core::destination::{DeviceCategory, FirstPartyPatterns, PartyPolicyMap};
use lifecycle_audit_core::flow::{ByteMode, FlowConfig};
use lifecycle_audit_core::timeline::OperationProcess;
use lifecycle_audit_core::tls_audit::AuditPolicy;
use lifecycle_audit_core::PhaseLabel;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{self, AuditError};

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, AuditError> {
    let text = error::read_text(path)?;
    toml::from_str(&text).map_err(|e| AuditError::invalid(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Operation process file (TOML):
///
/// ```toml
/// device_category = "camera"
///
/// [[operations]]
/// name = "bind"
/// phase = "SETUP"
/// instructions = "Reset the camera and bind it in the vendor app."
/// min_duration = 0
/// ```
pub fn load_process(path: &Path) -> Result<OperationProcess, AuditError> {
    let p: OperationProcess = load_toml(path)?;
    p.validate().map_err(|e| AuditError::invalid(path, e))?;
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddr(pub [u8; 6]);

#[derive(Debug, thiserror::Error)]
#[error("malformed MAC address {0:?}")]
pub struct BadMac(String);

impl FromStr for MacAddr {
    type Err = BadMac;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split([':', '-']).collect();
        if parts.len() != 6 {
            return Err(BadMac(s.into()));
        }
        let mut out = [0u8; 6];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = u8::from_str_radix(p, 16).map_err(|_| BadMac(s.into()))?;
        }
        Ok(MacAddr(out))
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", m[0], m[1], m[2], m[3], m[4], m[5])
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceMeta {
    pub device_id: String,
    #[serde(default)]
    pub name: String,
    pub category: DeviceCategory,
    #[serde(default)]
    pub brand: String,
    #[serde(default)]
    pub mac: Option<MacAddr>,
    #[serde(default)]
    pub ip: Vec<IpAddr>,
    #[serde(default)]
    pub first_party: FirstPartyPatterns,
    /// Companion-app vendors; matched like first-party organizations.
    #[serde(default)]
    pub app_vendors: Vec<String>,
}

impl DeviceMeta {
    /// Organization patterns from the brand, the app vendors and the
    /// explicit list.
    pub fn first_party_patterns(&self) -> FirstPartyPatterns {
        let mut p = self.first_party.clone();
        let extra = std::iter::once(&self.brand).chain(&self.app_vendors);
        for o in extra.filter(|o| !o.trim().is_empty()) {
            if !p.organizations.iter().any(|x| x.eq_ignore_ascii_case(o)) {
                p.organizations.push(o.clone());
            }
        }
        p
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FirmwareTag {
    Pre,
    Post,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureEntry {
    pub device_id: String,
    pub phase: PhaseLabel,
    pub path: PathBuf,
    #[serde(default)]
    pub firmware_tag: FirmwareTag,
}

/// Corpus manifest (TOML). Capture paths are relative to the manifest.
///
/// ```toml
/// [[devices]]
/// device_id = "cam-01"
/// category = "camera"
/// brand = "Xiaomi"
/// ip = ["192.168.8.21"]
///
/// [[captures]]
/// device_id = "cam-01"
/// phase = "SETUP"
/// path = "cam-01/setup.pcap"
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub devices: Vec<DeviceMeta>,
    pub captures: Vec<CaptureEntry>,
    /// Directory capture paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let mut m: CorpusManifest = load_toml(path)?;
        m.base_dir = parent(path).to_path_buf();
        m.validate().map_err(|e| AuditError::invalid(path, e))?;
        Ok(m)
    }

    pub fn capture_path(&self, c: &CaptureEntry) -> PathBuf {
        resolve(&self.base_dir, &c.path)
    }

    pub fn device(&self, id: &str) -> Option<&DeviceMeta> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if d.device_id.trim().is_empty() {
                return Err("device with empty device_id".into());
            }
            if !ids.insert(d.device_id.as_str()) {
                return Err(format!("device {:?} listed twice", d.device_id));
            }
        }
        let mut seen = BTreeSet::new();
        for c in &self.captures {
            if !ids.contains(c.device_id.as_str()) {
                return Err(format!("capture {} names unknown device {:?}", c.path.display(), c.device_id));
            }
            let p = self.capture_path(c);
            if !p.is_file() {
                return Err(format!("capture file {} does not exist", p.display()));
            }
            if !seen.insert((c.device_id.as_str(), c.phase, c.firmware_tag)) {
                return Err(format!(
                    "duplicate capture for device {:?}, phase {}, firmware {:?}",
                    c.device_id, c.phase, c.firmware_tag
                ));
            }
        }
        Ok(())
    }
}

/// Party policy map (TOML):
///
/// ```toml
/// [[entries]]
/// pattern = { domain_suffix = "aliyuncs.com" }
/// note = "vendor privacy policy, cloud storage section"
/// ```
pub fn load_policy(path: &Path) -> Result<PartyPolicyMap, AuditError> {
    let p: PartyPolicyMap = load_toml(path)?;
    p.validate().map_err(|e| AuditError::invalid(path, e))?;
    Ok(p)
}

pub fn load_magic_table(path: &Path) -> Result<MagicNumberTable, AuditError> {
    let t: MagicNumberTable = load_toml(path)?;
    t.validate().map_err(|e| AuditError::invalid(path, e))?;
    Ok(t)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSettings {
    pub ssl: Option<f64>,
    pub encrypted: Option<f64>,
    pub text: Option<f64>,
    pub min_entropy_bytes: Option<usize>,
    pub window: Option<usize>,
}

impl ThresholdSettings {
    pub fn apply(&self, mut t: Thresholds) -> Thresholds {
        t.ssl = self.ssl.unwrap_or(t.ssl);
        t.encrypted = self.encrypted.unwrap_or(t.encrypted);
        t.text = self.text.unwrap_or(t.text);
        t.min_entropy_bytes = self.min_entropy_bytes.unwrap_or(t.min_entropy_bytes);
        t.window = self.window.unwrap_or(t.window);
        t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub udp_timeout_secs: Option<u64>,
    pub reassembly_cap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoSettings {
    /// Offline snapshot CSV.
    pub snapshot: Option<PathBuf>,
    /// Online lookup base URL; requests go to `{endpoint}/{ip}`.
    pub online_endpoint: Option<String>,
    pub cache: Option<PathBuf>,
    pub requests_per_sec: f64,
    /// Extra organization aliases, raw spelling to display name.
    pub aliases: BTreeMap<String, String>,
}

impl Default for GeoSettings {
    fn default() -> Self {
        GeoSettings {
            snapshot: None,
            online_endpoint: None,
            cache: None,
            requests_per_sec: 1.0,
            aliases: BTreeMap::new(),
        }
    }
}

/// Pipeline configuration (TOML). Every key is optional; paths are
/// relative to the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub thresholds: ThresholdSettings,
    pub byte_mode: ByteMode,
    pub flow: FlowSettings,
    pub geo: GeoSettings,
    pub policy: Option<PathBuf>,
    pub pii_catalog: Option<PathBuf>,
    pub magic_table: Option<PathBuf>,
    pub audit_policy: Option<AuditPolicy>,
    /// PEM bundles whose certificates count as trusted roots in addition
    /// to the pinned public store.
    pub extra_roots: Vec<PathBuf>,
    pub reveal_pii: bool,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let mut c: PipelineConfig = load_toml(path)?;
        let base = parent(path);
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                *x = resolve(base, x);
            }
        };
        fix(&mut c.geo.snapshot);
        fix(&mut c.geo.cache);
        fix(&mut c.policy);
        fix(&mut c.pii_catalog);
        fix(&mut c.magic_table);
        for r in &mut c.extra_roots {
            *r = resolve(base, r);
        }
        Ok(c)
    }

    pub fn flow_config(&self) -> FlowConfig {
        let d = FlowConfig::default();
        FlowConfig {
            udp_timeout_secs: self.flow.udp_timeout_secs.unwrap_or(d.udp_timeout_secs),
            reassembly_cap: self.flow.reassembly_cap.unwrap_or(d.reassembly_cap),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_parsing() {
        let m: MacAddr = "02:00:00:AB:cd:01".parse().unwrap();
        assert_eq!(m.0, [2, 0, 0, 0xab, 0xcd, 1]);
        assert_eq!(m.to_string(), "02:00:00:ab:cd:01");
        assert!("02:00:00".parse::<MacAddr>().is_err());
    }

    #[test]
    fn brand_and_vendors_feed_first_party() {
        let d: DeviceMeta = toml::from_str(
            r#"
            device_id = "spk-1"
            category = "speaker"
            brand = "Xiaomi"
            app_vendors = ["Mi Home"]
            first_party = { domains = ["mi.com"] }
            "#,
        )
        .unwrap();
        let p = d.first_party_patterns();
        assert_eq!(p.organizations, vec!["Xiaomi".to_string(), "Mi Home".to_string()]);
        assert_eq!(p.domains, vec!["mi.com".to_string()]);
    }

    #[test]
    fn manifest_rejects_missing_file_and_duplicates() {
        let dir = std::env::temp_dir().join(format!("la-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("a.pcap"), b"").unwrap();
        let text = r#"
            [[devices]]
            device_id = "d1"
            category = "plug"
            [[captures]]
            device_id = "d1"
            phase = "SETUP"
            path = "missing.pcap"
        "#;
        std::fs::write(dir.join("m.toml"), text).unwrap();
        let err = CorpusManifest::load(&dir.join("m.toml")).unwrap_err().to_string();
        assert!(err.contains("missing.pcap"), "{err}");

        let text = text.replace("missing.pcap", "a.pcap");
        let dup = format!("{text}\n[[captures]]\ndevice_id = \"d1\"\nphase = \"SETUP\"\npath = \"a.pcap\"\n");
        std::fs::write(dir.join("m.toml"), dup).unwrap();
        let err = CorpusManifest::load(&dir.join("m.toml")).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn config_paths_resolve_against_file() {
        let dir = std::env::temp_dir().join(format!("la-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("c.toml"),
            "byte_mode = \"payload\"\npolicy = \"policy.toml\"\n[thresholds]\nssl = 0.7\n[geo]\nsnapshot = \"/abs/geo.csv\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(&dir.join("c.toml")).unwrap();
        assert_eq!(c.byte_mode, ByteMode::Payload);
        assert_eq!(c.policy, Some(dir.join("policy.toml")));
        assert_eq!(c.geo.snapshot, Some(PathBuf::from("/abs/geo.csv")));
        assert_eq!(c.thresholds.apply(Thresholds::default()).ssl, 0.7);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
