//! Report artifacts. CSV files open with a `# metadata: {...}` line,
//! JSON files carry a `metadata` member and JSONL files start with a
//! metadata record, so every artifact names the run that produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use base64::Engine;
use lifecycle_audit_core::mitm::VerdictRow;
use lifecycle_audit_core::PhaseLabel;
use serde::Serialize;

use crate::error::{self, AuditError};
use crate::pipeline::{CaptureStatus, FirmwareDiff, ReportBundle};

pub const BUNDLE: &str = "bundle.json";

fn phase_str(p: Option<PhaseLabel>) -> &'static str {
    p.map_or("", |p| p.as_str())
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn csv_with_metadata<M: Serialize>(meta: &M, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, AuditError> {
    let mut out = format!("# metadata: {}\n", serde_json::to_string(meta).expect("metadata serializes")).into_bytes();
    let mut w = csv::Writer::from_writer(&mut out);
    let to_err = |e: csv::Error| AuditError::Validation(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    w.flush().map_err(|e| AuditError::Validation(format!("csv: {e}")))?;
    drop(w);
    Ok(out)
}

fn json_with_metadata<M: Serialize, T: Serialize>(meta: &M, key: &str, value: &T) -> Vec<u8> {
    let mut v = serde_json::Map::new();
    v.insert("metadata".into(), serde_json::to_value(meta).expect("metadata serializes"));
    v.insert(key.into(), serde_json::to_value(value).expect("report serializes"));
    let mut out = serde_json::to_vec_pretty(&v).expect("report serializes");
    out.push(b'\n');
    out
}

pub fn verdict_csv<M: Serialize>(meta: &M, rows: &[VerdictRow]) -> Result<Vec<u8>, AuditError> {
    csv_with_metadata(
        meta,
        &["verdict", "devices", "servers"],
        rows.iter()
            .map(|r| vec![r.verdict.as_str().into(), r.device_count.to_string(), r.server_count.to_string()])
            .collect(),
    )
}

/// Writes every artifact of a bundle into `out`; returns the paths.
pub fn write_bundle(out: &Path, b: &ReportBundle) -> Result<Vec<PathBuf>, AuditError> {
    error::create_dir(out)?;
    let m = &b.metadata;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();

    let mut bundle = serde_json::to_vec_pretty(b).expect("bundle serializes");
    bundle.push(b'\n');
    files.push((BUNDLE, bundle));

    files.push((
        "destinations.csv",
        csv_with_metadata(
            m,
            &[
                "device_id", "category", "ip", "domains", "country", "organization", "asn", "party", "phases", "bytes",
                "evidence",
            ],
            b.destinations
                .iter()
                .map(|d| {
                    vec![
                        d.device_id.clone(),
                        d.category.as_str().into(),
                        d.ip.to_string(),
                        d.domains.iter().cloned().collect::<Vec<_>>().join(";"),
                        d.country.clone(),
                        d.organization.clone(),
                        d.asn.map_or_else(String::new, |a| a.to_string()),
                        d.party.as_str().into(),
                        d.phases.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(";"),
                        d.bytes.to_string(),
                        d.evidence.clone(),
                    ]
                })
                .collect(),
        )?,
    ));
    files.push(("proportions.json", json_with_metadata(m, "proportions", &b.proportions)));
    files.push(("sankey.json", json_with_metadata(m, "links", &b.sankey)));
    files.push((
        "party_counts.csv",
        csv_with_metadata(
            m,
            &["row", "group", "party", "mean_servers"],
            b.party_counts
                .iter()
                .map(|r| vec![r.row.clone(), r.group.clone(), r.party.as_str().into(), r.mean_servers.to_string()])
                .collect(),
        )?,
    ));
    files.push((
        "org_ranking.csv",
        csv_with_metadata(
            m,
            &["rank", "organization", "devices"],
            b.org_ranking
                .iter()
                .enumerate()
                .map(|(i, r)| vec![(i + 1).to_string(), r.organization.clone(), r.devices.to_string()])
                .collect(),
        )?,
    ));
    files.push((
        "encryption.csv",
        csv_with_metadata(
            m,
            &["device_id", "phase", "flow", "verdict", "rule", "entropy", "bytes", "detail"],
            b.classifications
                .iter()
                .map(|c| {
                    vec![
                        c.device_id.clone(),
                        phase_str(c.phase).into(),
                        c.flow_key.clone(),
                        c.verdict.as_str().into(),
                        c.rule.as_str().into(),
                        format!("{:.6}", c.entropy),
                        c.bytes.to_string(),
                        c.detail.clone().unwrap_or_default(),
                    ]
                })
                .collect(),
        )?,
    ));
    files.push(("heatmap.json", json_with_metadata(m, "cells", &b.heatmap)));
    files.push((
        "protocols.csv",
        csv_with_metadata(
            m,
            &["device_id", "phase", "protocols"],
            b.protocol_inventory
                .iter()
                .map(|r| {
                    vec![
                        r.device_id.clone(),
                        phase_str(r.phase).into(),
                        r.protocols.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(";"),
                    ]
                })
                .collect(),
        )?,
    ));
    let mut jsonl = serde_json::to_string(&serde_json::json!({ "metadata": m })).expect("metadata serializes");
    jsonl.push('\n');
    let b64 = base64::engine::general_purpose::STANDARD;
    for (row, der) in b.certificates.iter().zip(&b.certificate_der) {
        let mut v = serde_json::to_value(row).expect("certificate serializes");
        v["der"] = b64.encode(der).into();
        jsonl.push_str(&v.to_string());
        jsonl.push('\n');
    }
    files.push(("certificates.jsonl", jsonl.into_bytes()));
    files.push((
        "cert_findings.csv",
        csv_with_metadata(
            m,
            &["device_id", "phase", "endpoint", "finding", "fingerprint", "detail"],
            b.cert_findings
                .iter()
                .map(|f| {
                    vec![
                        f.device_id.clone(),
                        phase_str(f.phase).into(),
                        f.endpoint.clone(),
                        f.finding.as_str().into(),
                        f.fingerprint.clone(),
                        f.detail.clone(),
                    ]
                })
                .collect(),
        )?,
    ));
    files.push((
        "pii_hits.csv",
        csv_with_metadata(
            m,
            &["device_id", "flow", "phase", "direction", "offset", "length", "label", "excerpt", "encoding"],
            b.pii_hits
                .iter()
                .map(|h| {
                    vec![
                        h.device_id.clone(),
                        h.flow_key.clone(),
                        phase_str(h.phase).into(),
                        h.direction.as_str().into(),
                        h.offset.to_string(),
                        h.raw_len.to_string(),
                        h.label.clone(),
                        h.excerpt.clone(),
                        h.encoding.as_str().into(),
                    ]
                })
                .collect(),
        )?,
    ));
    files.push(("mitm_verdicts.csv", verdict_csv(m, &b.mitm_verdicts)?));
    let errors: Vec<_> = b
        .captures
        .iter()
        .filter_map(|c| match &c.status {
            CaptureStatus::Quarantined { reason } => Some(serde_json::json!({
                "device_id": c.device_id,
                "phase": c.phase,
                "firmware_tag": c.firmware_tag,
                "path": c.path,
                "reason": reason,
            })),
            CaptureStatus::Analyzed { .. } => None,
        })
        .collect();
    files.push(("errors.json", json_with_metadata(m, "quarantined", &errors)));

    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = out.join(name);
        error::write_atomic(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_bundle(path: &Path) -> Result<ReportBundle, AuditError> {
    let p = if path.is_dir() { path.join(BUNDLE) } else { path.to_path_buf() };
    let text = error::read_text(&p)?;
    serde_json::from_str(&text).map_err(|e| AuditError::invalid(&p, e))
}

fn md_table(out: &mut String, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

/// Human-readable summary tables.
pub fn render_markdown(b: &ReportBundle) -> String {
    let mut s = String::new();
    let m = &b.metadata;
    let _ = writeln!(s, "# Traffic audit report\n");
    let _ = writeln!(s, "- tool: {}", m.tool);
    let _ = writeln!(s, "- geolocation: {}", m.geo_snapshot);
    let _ = writeln!(
        s,
        "- thresholds: ssl {} / encrypted {} / text {}",
        m.thresholds.ssl, m.thresholds.encrypted, m.thresholds.text
    );
    let _ = writeln!(s, "- trust store: {}", m.trust_store);
    let _ = writeln!(
        s,
        "- captures: {} analyzed, {} quarantined\n",
        b.captures.len() - b.quarantined(),
        b.quarantined()
    );

    let _ = writeln!(s, "## Traffic share by destination country (per-device mean)\n");
    let countries: Vec<&String> = b.proportions.per_device_mean.overall.keys().collect();
    let mut header = vec!["category", "devices"];
    header.extend(countries.iter().map(|c| c.as_str()));
    let rows = b.proportions.per_device_mean.per_category.iter().map(|(cat, shares)| {
        let mut r = vec![cat.clone(), b.proportions.devices.get(cat).copied().unwrap_or(0).to_string()];
        r.extend(countries.iter().map(|c| shares.get(*c).map_or_else(|| "-".into(), |v| pct(*v))));
        r
    });
    let mut rows: Vec<Vec<String>> = rows.collect();
    let mut all = vec!["all".into(), b.proportions.devices.values().sum::<usize>().to_string()];
    all.extend(countries.iter().map(|c| pct(b.proportions.per_device_mean.overall[*c])));
    rows.push(all);
    md_table(&mut s, &header, rows);

    let _ = writeln!(s, "## Mean distinct servers per device\n");
    md_table(
        &mut s,
        &["row", "group", "party", "mean"],
        b.party_counts
            .iter()
            .map(|r| vec![r.row.clone(), r.group.clone(), r.party.as_str().into(), format!("{:.2}", r.mean_servers)]),
    );

    let _ = writeln!(s, "## Organizations by devices contacting them\n");
    md_table(
        &mut s,
        &["organization", "devices"],
        b.org_ranking.iter().take(20).map(|r| vec![r.organization.clone(), r.devices.to_string()]),
    );

    let _ = writeln!(s, "## Encryption by category and phase\n");
    md_table(
        &mut s,
        &["category", "column", "encrypted", "unknown", "unencrypted", "devices"],
        b.heatmap.iter().map(|h| match &h.cell {
            Some(c) => vec![
                h.category.clone(),
                h.column.clone(),
                pct(c.encrypted),
                pct(c.unknown),
                pct(c.unencrypted),
                c.devices.to_string(),
            ],
            None => vec![h.category.clone(), h.column.clone(), "-".into(), "-".into(), "-".into(), "0".into()],
        }),
    );

    let _ = writeln!(s, "## Protocol versions\n");
    md_table(
        &mut s,
        &["device", "protocols", "encrypted share"],
        b.devices.iter().map(|d| {
            vec![
                d.device_id.clone(),
                d.protocols.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", "),
                d.encrypted_share.map_or_else(|| "-".into(), |v| format!("{v:.2}%")),
            ]
        }),
    );

    let _ = writeln!(s, "## Certificate findings\n");
    md_table(
        &mut s,
        &["device", "endpoint", "finding", "detail"],
        b.cert_findings.iter().map(|f| {
            vec![
                f.device_id.clone(),
                f.endpoint.clone(),
                f.finding.as_str().into(),
                f.detail.clone(),
            ]
        }),
    );

    let _ = writeln!(s, "## PII hits\n");
    md_table(
        &mut s,
        &["device", "phase", "label", "excerpt", "encoding"],
        b.pii_hits.iter().map(|h| {
            vec![
                h.device_id.clone(),
                phase_str(h.phase).into(),
                h.label.clone(),
                h.excerpt.clone(),
                h.encoding.as_str().into(),
            ]
        }),
    );

    let _ = writeln!(s, "## Interception probe\n");
    if b.mitm_verdicts.is_empty() {
        let _ = writeln!(s, "No probe results merged.\n");
    } else {
        md_table(
            &mut s,
            &["verdict", "devices", "servers"],
            b.mitm_verdicts
                .iter()
                .map(|r| vec![r.verdict.as_str().into(), r.device_count.to_string(), r.server_count.to_string()]),
        );
    }
    s
}

pub fn render_diff(d: &FirmwareDiff) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Firmware update diff\n");
    let _ = writeln!(
        s,
        "Encrypted share: {} -> {} ({})\n",
        opt_f64(d.encrypted_share_pre.map(|v| (v * 100.0).round() / 100.0)),
        opt_f64(d.encrypted_share_post.map(|v| (v * 100.0).round() / 100.0)),
        d.encrypted_share_delta.map_or_else(String::new, |v| format!("{v:+.2}"))
    );
    let join = |s: &std::collections::BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(", ");
    md_table(
        &mut s,
        &["device", "protocols added", "protocols removed", "share delta", "destinations added", "destinations removed"],
        d.devices.iter().map(|x| {
            vec![
                x.device_id.clone(),
                x.protocols_added.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", "),
                x.protocols_removed.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", "),
                x.encrypted_share_delta.map_or_else(String::new, |v| format!("{v:+.2}")),
                join(&x.destinations_added),
                join(&x.destinations_removed),
            ]
        }),
    );
    if !d.unmatched.is_empty() {
        let _ = writeln!(s, "Devices in only one bundle: {}", join(&d.unmatched));
    }
    s
}
