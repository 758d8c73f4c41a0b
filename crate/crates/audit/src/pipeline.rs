//! Corpus-level analysis: every capture in a manifest through ingest,
//! destination, encryption, TLS and PII analysis into one bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::path::PathBuf;

use lifecycle_audit_core::classify::{
    classify_flow, encryption_heatmap, ClassifiedBytes, HeatCell, MagicNumberTable, Rule, Thresholds, Verdict,
};
use lifecycle_audit_core::destination::{
    classify_party, organization_ranking, proportion_table, sankey_links, server_party_counts, Contact,
    DestinationRecord, DeviceCategory, DeviceTraffic, Party, PartyPolicyMap, ProportionTable, SankeyLink,
};
use lifecycle_audit_core::dns::{build_dns_map, DnsStats};
use lifecycle_audit_core::flow::{assemble_flows, ByteMode, FlowConfig, FlowRecord};
use lifecycle_audit_core::mitm::VerdictRow;
use lifecycle_audit_core::packet::{parse_capture, ParseStats};
use lifecycle_audit_core::tls_audit::{
    audit_certificates, detect_protocol_versions, extract_certificates, AuditFlow, AuditPolicy, CertificateFinding,
    CertificateRecord, ChainPosition, ProtocolLabel, TrustStore,
};
use lifecycle_audit_core::PhaseLabel;
use serde::{Deserialize, Serialize};

use crate::config::{self, CorpusManifest, DeviceMeta, FirmwareTag, PipelineConfig};
use crate::error::{self, AuditError};
use crate::geo::{GeoCoverage, GeoProvider};
use crate::pii::{self, CompiledCatalog, PiiCatalog, PiiHit};
use crate::trust;

/// Everything the analysis needs besides the corpus and geolocation.
pub struct Analysis {
    pub thresholds: Thresholds,
    pub byte_mode: ByteMode,
    pub flow: FlowConfig,
    pub magic: MagicNumberTable,
    pub policy: PartyPolicyMap,
    pub pii: Option<CompiledCatalog>,
    pub audit_policy: AuditPolicy,
    pub trust: TrustStore,
    pub reveal_pii: bool,
}

impl Default for Analysis {
    fn default() -> Self {
        Analysis {
            thresholds: Thresholds::default(),
            byte_mode: ByteMode::default(),
            flow: FlowConfig::default(),
            magic: MagicNumberTable::default(),
            policy: PartyPolicyMap::default(),
            pii: None,
            audit_policy: AuditPolicy::default(),
            trust: trust::audit_trust_store(&[]),
            reveal_pii: false,
        }
    }
}

impl Analysis {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, AuditError> {
        let mut extra = Vec::new();
        for p in &cfg.extra_roots {
            extra.extend(trust::load_pem_certs(p)?);
        }
        let pii = match &cfg.pii_catalog {
            Some(p) => {
                let cat = PiiCatalog::load(p)?;
                Some(cat.compile().map_err(|e| AuditError::invalid(p, e))?)
            }
            None => None,
        };
        Ok(Analysis {
            thresholds: cfg.thresholds.apply(Thresholds::default()),
            byte_mode: cfg.byte_mode,
            flow: cfg.flow_config(),
            magic: match &cfg.magic_table {
                Some(p) => config::load_magic_table(p)?,
                None => MagicNumberTable::default(),
            },
            policy: match &cfg.policy {
                Some(p) => config::load_policy(p)?,
                None => PartyPolicyMap::default(),
            },
            pii,
            audit_policy: cfg.audit_policy.clone().unwrap_or_default(),
            trust: trust::audit_trust_store(&extra),
            reveal_pii: cfg.reveal_pii,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: String,
    pub geo_snapshot: String,
    pub thresholds: Thresholds,
    pub byte_mode: ByteMode,
    pub magic_table: String,
    pub policy_entries: usize,
    pub pii_catalog: Option<String>,
    pub trust_store: String,
    pub firmware: Option<FirmwareTag>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CaptureStatus {
    Analyzed { packets: usize, flows: usize, stats: ParseStats },
    Quarantined { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub device_id: String,
    pub phase: PhaseLabel,
    pub firmware_tag: FirmwareTag,
    /// As written in the manifest.
    pub path: PathBuf,
    #[serde(flatten)]
    pub status: CaptureStatus,
}

impl CaptureReport {
    pub fn is_quarantined(&self) -> bool {
        matches!(self.status, CaptureStatus::Quarantined { .. })
    }
}

/// One remote server as seen by one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationRow {
    pub device_id: String,
    pub category: DeviceCategory,
    pub ip: IpAddr,
    pub domains: BTreeSet<String>,
    pub country: String,
    pub organization: String,
    pub asn: Option<u32>,
    pub party: Party,
    pub evidence: String,
    pub phases: BTreeSet<PhaseLabel>,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartyCountRow {
    pub row: String,
    pub group: String,
    pub party: Party,
    pub mean_servers: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgRow {
    pub organization: String,
    pub devices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub device_id: String,
    pub phase: Option<PhaseLabel>,
    pub flow_key: String,
    pub verdict: Verdict,
    pub rule: Rule,
    pub entropy: f64,
    pub bytes: u64,
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub category: String,
    pub column: String,
    pub cell: Option<HeatCell>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub device_id: String,
    pub phase: Option<PhaseLabel>,
    pub protocols: BTreeSet<ProtocolLabel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub device_id: String,
    pub phase: Option<PhaseLabel>,
    pub server: String,
    pub chain_id: usize,
    pub chain_position: ChainPosition,
    pub fingerprint: String,
    pub subject: String,
    pub issuer: String,
    pub signature_algorithm: String,
    pub key: String,
    pub not_before: String,
    pub not_after: String,
}

impl From<&CertificateRecord> for CertificateRow {
    fn from(r: &CertificateRecord) -> Self {
        let k = &r.cert.public_key;
        CertificateRow {
            device_id: r.device_id.clone(),
            phase: r.phase,
            server: r.server.to_string(),
            chain_id: r.chain_id,
            chain_position: r.chain_position,
            fingerprint: r.cert.fingerprint.clone(),
            subject: r.cert.subject.clone(),
            issuer: r.cert.issuer.clone(),
            signature_algorithm: r.cert.signature_algorithm.clone(),
            key: match &k.curve {
                Some(c) => format!("{} {} ({c})", k.algorithm, k.size_bits),
                None => format!("{} {}", k.algorithm, k.size_bits),
            },
            not_before: r.cert.not_before.to_rfc3339(),
            not_after: r.cert.not_after.to_rfc3339(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertSummary {
    pub certificates: usize,
    pub cert_opaque_sessions: usize,
    pub psk_model_devices: BTreeSet<String>,
    pub certificate_model_devices: BTreeSet<String>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub device_id: String,
    pub category: DeviceCategory,
    pub protocols: BTreeSet<ProtocolLabel>,
    pub classified_bytes: u64,
    pub encrypted_bytes: u64,
    /// Percent of classified bytes judged encrypted; `None` without any.
    pub encrypted_share: Option<f64>,
    /// Domain names where known, otherwise addresses.
    pub destinations: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metadata: RunMetadata,
    pub captures: Vec<CaptureReport>,
    pub dns: DnsStats,
    pub geo_coverage: GeoCoverage,
    pub destinations: Vec<DestinationRow>,
    pub proportions: ProportionTable,
    pub sankey: Vec<SankeyLink>,
    pub party_counts: Vec<PartyCountRow>,
    pub org_ranking: Vec<OrgRow>,
    pub classifications: Vec<ClassificationRow>,
    pub heatmap: Vec<HeatmapRow>,
    pub protocol_inventory: Vec<ProtocolRow>,
    pub protocol_undetermined: usize,
    pub certificates: Vec<CertificateRow>,
    pub cert_summary: CertSummary,
    pub cert_findings: Vec<CertificateFinding>,
    pub pii_hits: Vec<PiiHit>,
    pub mitm_verdicts: Vec<VerdictRow>,
    pub devices: Vec<DeviceSummary>,
    /// Percent of all classified bytes judged encrypted.
    pub encrypted_share: Option<f64>,
    /// Certificate DER for the JSONL export, in `certificates` order.
    #[serde(skip)]
    pub certificate_der: Vec<Vec<u8>>,
}

impl ReportBundle {
    pub fn quarantined(&self) -> usize {
        self.captures.iter().filter(|c| c.is_quarantined()).count()
    }
}

struct Ingested {
    flows: Vec<FlowRecord>,
    report: CaptureReport,
}

fn ingest(manifest: &CorpusManifest, entry: &config::CaptureEntry, flow_cfg: &FlowConfig) -> Ingested {
    let path = manifest.capture_path(entry);
    let report = |status| CaptureReport {
        device_id: entry.device_id.clone(),
        phase: entry.phase,
        firmware_tag: entry.firmware_tag,
        path: entry.path.clone(),
        status,
    };
    let parsed = error::read(&path).and_then(|bytes| {
        parse_capture(&bytes, &entry.device_id).map_err(|source| AuditError::Capture {
            path: path.clone(),
            source,
        })
    });
    match parsed {
        Ok(p) => {
            let n = p.packets.len();
            let mut flows = assemble_flows(p.packets, &entry.device_id, flow_cfg);
            for f in &mut flows {
                f.phase = Some(entry.phase);
            }
            Ingested {
                report: report(CaptureStatus::Analyzed {
                    packets: n,
                    flows: flows.len(),
                    stats: p.stats,
                }),
                flows,
            }
        }
        Err(e) => Ingested {
            flows: Vec::new(),
            report: report(CaptureStatus::Quarantined { reason: e.to_string() }),
        },
    }
}

/// Reads and assembles captures on all cores; results keep manifest order.
fn ingest_all(manifest: &CorpusManifest, entries: &[&config::CaptureEntry], flow_cfg: &FlowConfig) -> Vec<Ingested> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(entries.len().max(1));
    let chunk = entries.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| ingest(manifest, e, flow_cfg)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("ingest worker panicked")).collect()
    })
}

/// The address on the far side of the device, or `None` for flows that
/// stay on the local network.
pub fn remote_ip(flow: &FlowRecord, device: &DeviceMeta) -> Option<IpAddr> {
    let (a, b) = (flow.key.lower.ip, flow.key.upper.ip);
    let remote = if device.ip.contains(&a) {
        b
    } else if device.ip.contains(&b) {
        a
    } else if let Some(mac) = device.mac {
        let p = flow.packets.iter().find(|p| p.src_mac.is_some())?;
        if p.src_mac == Some(mac.0) {
            p.dst_ip
        } else {
            p.src_ip
        }
    } else {
        match (lifecycle_audit_core::geo::is_global(&a), lifecycle_audit_core::geo::is_global(&b)) {
            (true, false) => a,
            (false, true) => b,
            _ => return None,
        }
    };
    lifecycle_audit_core::geo::is_global(&remote).then_some(remote)
}

fn share(part: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| part as f64 * 100.0 / total as f64)
}

/// Runs the analysis. `firmware` selects captures with that tag plus
/// untagged ones; `None` takes every capture.
pub fn run_pipeline(
    manifest: &CorpusManifest,
    analysis: &Analysis,
    geo: &mut GeoProvider,
    firmware: Option<FirmwareTag>,
) -> Result<ReportBundle, AuditError> {
    manifest
        .validate()
        .map_err(|e| AuditError::invalid(&manifest.base_dir, e))?;
    let entries: Vec<&config::CaptureEntry> = manifest
        .captures
        .iter()
        .filter(|c| match firmware {
            Some(t) => c.firmware_tag == t || c.firmware_tag == FirmwareTag::None,
            None => true,
        })
        .collect();
    let ingested = ingest_all(manifest, &entries, &analysis.flow);
    let quarantined = ingested.iter().filter(|i| i.report.is_quarantined()).count();
    if quarantined == ingested.len() {
        return Err(AuditError::NoUsableCaptures { quarantined });
    }
    let mut captures = Vec::with_capacity(ingested.len());
    let mut flows = Vec::new();
    for i in ingested {
        captures.push(i.report);
        flows.extend(i.flows);
    }

    let (dns_map, dns_stats) = build_dns_map(&flows);

    // Destinations.
    let mut dest_rows: BTreeMap<(String, IpAddr), DestinationRow> = BTreeMap::new();
    let mut traffic: BTreeMap<&str, DeviceTraffic> = BTreeMap::new();
    for d in &manifest.devices {
        traffic.insert(
            &d.device_id,
            DeviceTraffic {
                device_id: d.device_id.clone(),
                category: d.category.as_str().into(),
                bytes_by_country: BTreeMap::new(),
            },
        );
    }
    for f in &flows {
        let Some(dev) = manifest.device(&f.device_id) else { continue };
        if f.is_local() {
            continue;
        }
        let Some(ip) = remote_ip(f, dev) else { continue };
        let bytes = f.bytes(analysis.byte_mode);
        let row = match dest_rows.entry((dev.device_id.clone(), ip)) {
            std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => {
                let answer = geo.geolocate(ip).map_err(|e| AuditError::Validation(e.to_string()))?;
                let domains: BTreeSet<String> = dns_map.domains(&ip).into_iter().map(String::from).collect();
                let rec = DestinationRecord {
                    ip,
                    domains: domains.clone(),
                    country: answer.country.clone(),
                    organization: answer.organization.clone(),
                    party: Party::Unresolved,
                    evidence: String::new(),
                };
                let (party, evidence) = classify_party(
                    &rec,
                    &dev.device_id,
                    dev.category.as_str(),
                    &dev.first_party_patterns(),
                    &analysis.policy,
                );
                v.insert(DestinationRow {
                    device_id: dev.device_id.clone(),
                    category: dev.category,
                    ip,
                    domains,
                    country: answer.country,
                    organization: answer.organization,
                    asn: answer.asn,
                    party,
                    evidence,
                    phases: BTreeSet::new(),
                    bytes: 0,
                })
            }
        };
        row.bytes += bytes;
        if let Some(p) = f.phase {
            row.phases.insert(p);
        }
        if let Some(t) = traffic.get_mut(dev.device_id.as_str()) {
            *t.bytes_by_country.entry(row.country.clone()).or_default() += bytes;
        }
    }
    if let Some(o) = geo.online() {
        o.persist()?;
    }
    let destinations: Vec<DestinationRow> = dest_rows.into_values().collect();
    let traffic: Vec<DeviceTraffic> = traffic.into_values().collect();
    let proportions = proportion_table(&traffic);
    let sankey = sankey_links(&proportions);

    let contacts: Vec<Contact<'_>> = destinations
        .iter()
        .flat_map(|d| {
            let phases: Vec<Option<PhaseLabel>> = if d.phases.is_empty() {
                vec![None]
            } else {
                d.phases.iter().map(|p| Some(*p)).collect()
            };
            phases.into_iter().map(move |phase| Contact {
                device_id: &d.device_id,
                phase,
                ip: d.ip,
                party: d.party,
            })
        })
        .collect();
    let groups: Vec<(&str, &str)> = manifest
        .devices
        .iter()
        .map(|d| (d.device_id.as_str(), d.category.table_group()))
        .collect();
    let party_counts = server_party_counts(&groups, &contacts)
        .into_iter()
        .map(|((row, group, party), mean)| PartyCountRow {
            row: row.as_str().into(),
            group,
            party,
            mean_servers: mean,
        })
        .collect();
    let org_ranking = organization_ranking(
        destinations
            .iter()
            .map(|d| (d.device_id.as_str(), d.organization.as_str())),
    )
    .into_iter()
    .map(|(organization, devices)| OrgRow { organization, devices })
    .collect();

    // Encryption.
    let mut verdicts: Vec<Option<Verdict>> = Vec::with_capacity(flows.len());
    let mut classifications = Vec::new();
    for f in &flows {
        let c = if f.has_payload() {
            classify_flow(f, &analysis.magic, &analysis.thresholds)
        } else {
            None
        };
        verdicts.push(c.as_ref().map(|c| c.verdict));
        if let Some(c) = c {
            classifications.push(ClassificationRow {
                device_id: f.device_id.clone(),
                phase: f.phase,
                flow_key: c.flow_key.to_string(),
                verdict: c.verdict,
                rule: c.rule,
                entropy: c.entropy,
                bytes: f.bytes(analysis.byte_mode),
                detail: c.detail,
            });
        }
    }
    let category_of: BTreeMap<&str, &'static str> = manifest
        .devices
        .iter()
        .map(|d| (d.device_id.as_str(), d.category.as_str()))
        .collect();
    let heat_items: Vec<ClassifiedBytes<'_>> = classifications
        .iter()
        .filter_map(|c| {
            Some(ClassifiedBytes {
                device_id: &c.device_id,
                category: category_of.get(c.device_id.as_str())?,
                phase: c.phase,
                verdict: c.verdict,
                bytes: c.bytes,
            })
        })
        .collect();
    let heatmap = encryption_heatmap(&heat_items)
        .into_iter()
        .map(|((category, col), cell)| HeatmapRow {
            category,
            column: col.as_str().into(),
            cell,
        })
        .collect();

    // TLS.
    let audit_flows: Vec<AuditFlow<'_>> = flows
        .iter()
        .zip(&verdicts)
        .map(|(flow, v)| AuditFlow { flow, verdict: *v })
        .collect();
    let inventory = detect_protocol_versions(&audit_flows);
    let extraction = extract_certificates(&audit_flows);
    let cert_findings = audit_certificates(&extraction.records, &analysis.audit_policy, &analysis.trust);
    let certificates = extraction.records.iter().map(CertificateRow::from).collect();
    let certificate_der = extraction.records.iter().map(|r| r.der.clone()).collect();
    let cert_summary = CertSummary {
        certificates: extraction.records.len(),
        cert_opaque_sessions: extraction.cert_opaque,
        psk_model_devices: extraction.psk_model_devices,
        certificate_model_devices: extraction.certificate_model_devices,
        warnings: extraction.warnings,
    };

    // PII.
    let pii_hits = match &analysis.pii {
        Some(cat) => pii::scan(
            flows.iter().zip(&verdicts).filter_map(|(f, v)| Some((f, (*v)?))),
            cat,
            analysis.reveal_pii,
        ),
        None => Vec::new(),
    };

    // Per-device summary.
    let mut devices = Vec::new();
    let (mut all_enc, mut all_cls) = (0u64, 0u64);
    for d in &manifest.devices {
        let mine = classifications.iter().filter(|c| c.device_id == d.device_id);
        let (mut enc, mut cls) = (0u64, 0u64);
        for c in mine {
            cls += c.bytes;
            if c.verdict == Verdict::Encrypted {
                enc += c.bytes;
            }
        }
        all_enc += enc;
        all_cls += cls;
        devices.push(DeviceSummary {
            device_id: d.device_id.clone(),
            category: d.category,
            protocols: inventory.device_protocols(&d.device_id),
            classified_bytes: cls,
            encrypted_bytes: enc,
            encrypted_share: share(enc, cls),
            destinations: destinations
                .iter()
                .filter(|r| r.device_id == d.device_id)
                .flat_map(|r| {
                    if r.domains.is_empty() {
                        vec![r.ip.to_string()]
                    } else {
                        r.domains.iter().cloned().collect()
                    }
                })
                .collect(),
        });
    }

    Ok(ReportBundle {
        metadata: RunMetadata {
            tool: concat!("lifecycle-audit ", env!("CARGO_PKG_VERSION")).into(),
            geo_snapshot: geo.describe(),
            thresholds: analysis.thresholds,
            byte_mode: analysis.byte_mode,
            magic_table: analysis.magic.version.clone(),
            policy_entries: analysis.policy.entries.len(),
            pii_catalog: analysis.pii.as_ref().map(|c| c.label.clone()),
            trust_store: analysis.trust.label.clone(),
            firmware,
        },
        captures,
        dns: dns_stats,
        geo_coverage: geo.coverage(),
        destinations,
        proportions,
        sankey,
        party_counts,
        org_ranking,
        classifications,
        heatmap,
        protocol_inventory: inventory
            .rows
            .into_iter()
            .map(|((device_id, phase), protocols)| ProtocolRow {
                device_id,
                phase,
                protocols,
            })
            .collect(),
        protocol_undetermined: inventory.undetermined,
        certificates,
        cert_summary,
        cert_findings,
        pii_hits,
        mitm_verdicts: Vec::new(),
        devices,
        encrypted_share: share(all_enc, all_cls),
        certificate_der,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDelta {
    pub device_id: String,
    pub protocols_added: BTreeSet<ProtocolLabel>,
    pub protocols_removed: BTreeSet<ProtocolLabel>,
    pub encrypted_share_pre: Option<f64>,
    pub encrypted_share_post: Option<f64>,
    /// Percentage points, rounded to two decimals.
    pub encrypted_share_delta: Option<f64>,
    pub destinations_added: BTreeSet<String>,
    pub destinations_removed: BTreeSet<String>,
}

impl DeviceDelta {
    pub fn is_empty(&self) -> bool {
        self.protocols_added.is_empty()
            && self.protocols_removed.is_empty()
            && self.encrypted_share_delta.is_none_or(|d| d == 0.0)
            && self.destinations_added.is_empty()
            && self.destinations_removed.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirmwareDiff {
    pub pre: RunMetadata,
    pub post: RunMetadata,
    pub devices: Vec<DeviceDelta>,
    /// Devices present in only one bundle.
    pub unmatched: BTreeSet<String>,
    pub encrypted_share_pre: Option<f64>,
    pub encrypted_share_post: Option<f64>,
    pub encrypted_share_delta: Option<f64>,
}

pub fn share_delta(pre: Option<f64>, post: Option<f64>) -> Option<f64> {
    Some(((post? - pre?) * 100.0).round() / 100.0)
}

/// Per-device change between a pre-update and a post-update bundle, over
/// the devices both cover. Only devices with a change are listed.
pub fn diff_firmware(pre: &ReportBundle, post: &ReportBundle) -> Result<FirmwareDiff, AuditError> {
    let by_id = |b: &ReportBundle| -> BTreeMap<String, DeviceSummary> {
        b.devices.iter().map(|d| (d.device_id.clone(), d.clone())).collect()
    };
    let (a, b) = (by_id(pre), by_id(post));
    let common: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    if common.is_empty() {
        return Err(AuditError::DisjointDevices);
    }
    let unmatched = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .cloned()
        .collect();
    let mut devices = Vec::new();
    for id in common {
        let (x, y) = (&a[id], &b[id]);
        let d = DeviceDelta {
            device_id: id.clone(),
            protocols_added: y.protocols.difference(&x.protocols).copied().collect(),
            protocols_removed: x.protocols.difference(&y.protocols).copied().collect(),
            encrypted_share_pre: x.encrypted_share,
            encrypted_share_post: y.encrypted_share,
            encrypted_share_delta: share_delta(x.encrypted_share, y.encrypted_share),
            destinations_added: y.destinations.difference(&x.destinations).cloned().collect(),
            destinations_removed: x.destinations.difference(&y.destinations).cloned().collect(),
        };
        if !d.is_empty() {
            devices.push(d);
        }
    }
    Ok(FirmwareDiff {
        pre: pre.metadata.clone(),
        post: post.metadata.clone(),
        devices,
        unmatched,
        encrypted_share_pre: pre.encrypted_share,
        encrypted_share_post: post.encrypted_share,
        encrypted_share_delta: share_delta(pre.encrypted_share, post.encrypted_share),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_rounding() {
        assert_eq!(share_delta(Some(65.75), Some(72.56)), Some(6.81));
        assert_eq!(share_delta(None, Some(1.0)), None);
    }
}
