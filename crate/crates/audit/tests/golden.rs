//! The committed golden corpus and its expected analysis. Set
//! `UPDATE_GOLDEN=1` to rewrite both after an intentional change.

mod support;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use lifecycle_audit::pipeline::ReportBundle;
use lifecycle_audit::report;
use support::golden::{self, EMAIL, OWNER, OWNER_ZH, SSID};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn updating() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(expected: &Path, actual: &Path) {
    assert_eq!(files(expected), files(actual), "file sets differ");
    for f in files(expected) {
        let (a, b) = (std::fs::read(expected.join(&f)).unwrap(), std::fs::read(actual.join(&f)).unwrap());
        assert!(a == b, "{} differs from the committed copy", f.display());
    }
}

fn audit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_audit")).args(args).output().unwrap()
}

fn analyze(corpus: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    let cfg = corpus.join("config.toml");
    let man = corpus.join("manifest.toml");
    let mut args = vec![
        "--config",
        cfg.to_str().unwrap(),
        "analyze",
        "--manifest",
        man.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    audit(&args)
}

#[test]
fn corpus_regenerates_identically() {
    let committed = golden_dir().join("corpus");
    if updating() {
        let _ = std::fs::remove_dir_all(&committed);
        golden::write_corpus(&committed);
    }
    let tmp = tempfile::tempdir().unwrap();
    golden::write_corpus(tmp.path());
    assert_same_tree(&committed, tmp.path());
}

#[test]
fn analysis_matches_expected_bundle() {
    let corpus = golden_dir().join("corpus");
    let expected = golden_dir().join("expected");
    let tmp = tempfile::tempdir().unwrap();
    let out = analyze(&corpus, tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    if updating() {
        let _ = std::fs::remove_dir_all(&expected);
        std::fs::create_dir_all(&expected).unwrap();
        for f in files(tmp.path()) {
            std::fs::copy(tmp.path().join(&f), expected.join(&f)).unwrap();
        }
    }
    assert_same_tree(&expected, tmp.path());
}

fn bundle() -> ReportBundle {
    report::read_bundle(&golden_dir().join("expected").join(report::BUNDLE)).unwrap()
}

#[test]
fn planted_pii_found_once_each_and_redacted() {
    let b = bundle();
    let got: BTreeSet<(&str, &str, &str)> = b
        .pii_hits
        .iter()
        .map(|h| (h.device_id.as_str(), h.label.as_str(), h.encoding.as_str()))
        .collect();
    let want: BTreeSet<(&str, &str, &str)> = [
        ("cam-01", "owner_name", "UTF-8"),
        ("cam-01", "email", "UTF-8"),
        ("plug-01", "ssid", "UTF-8"),
        ("plug-01", "email", "URL-escaped"),
        ("plug-01", "owner_name", "URL-escaped"),
        ("hum-01", "owner_name", "GBK"),
        ("spk-01", "ssid", "UTF-8"),
    ]
    .into_iter()
    .collect();
    assert_eq!(got, want);
    assert_eq!(b.pii_hits.len(), 9);
    let bundle_text = std::fs::read_to_string(golden_dir().join("expected").join(report::BUNDLE)).unwrap();
    for secret in [OWNER, OWNER_ZH, SSID, EMAIL] {
        assert!(!bundle_text.contains(secret), "{secret} leaked into the bundle");
    }
}

#[test]
fn reveal_flag_writes_excerpts_in_clear() {
    let tmp = tempfile::tempdir().unwrap();
    let out = analyze(&golden_dir().join("corpus"), tmp.path(), &["--reveal-pii"]);
    assert!(out.status.success());
    let b = report::read_bundle(&tmp.path().join(report::BUNDLE)).unwrap();
    let excerpts: BTreeSet<&str> = b.pii_hits.iter().map(|h| h.excerpt.as_str()).collect();
    assert!(excerpts.contains(OWNER_ZH) && excerpts.contains(EMAIL), "{excerpts:?}");
}

#[test]
fn certificate_defects_per_chain() {
    let b = bundle();
    let kinds = |dev: &str| -> BTreeSet<String> {
        b.cert_findings
            .iter()
            .filter(|f| f.device_id == dev)
            .map(|f| format!("{:?}", f.finding))
            .collect()
    };
    assert!(kinds("cam-01").is_empty());
    assert!(kinds("spk-01").is_empty());
    assert_eq!(
        kinds("hum-01"),
        ["WeakSignature", "WeakKey", "SelfSigned", "ExcessiveValidity"].map(String::from).into()
    );
    assert_eq!(kinds("plug-01"), ["SelfSigned", "ExcessiveValidity"].map(String::from).into());
}

#[test]
fn destinations_and_parties() {
    let b = bundle();
    let row = |dev: &str, ip: &str| {
        b.destinations
            .iter()
            .find(|d| d.device_id == dev && d.ip.to_string() == ip)
            .unwrap_or_else(|| panic!("{dev} {ip}"))
    };
    assert_eq!(format!("{:?}", row("cam-01", "120.92.65.10").party), "First");
    assert_eq!(format!("{:?}", row("cam-01", "47.96.10.20").party), "Support");
    assert_eq!(format!("{:?}", row("cam-01", "216.239.35.4").party), "Support");
    assert_eq!(format!("{:?}", row("plug-01", "52.1.2.3").party), "Third");
    assert_eq!(row("hum-01", "47.96.10.20").organization, "Alibaba Cloud");
    assert!(b.destinations.iter().all(|d| !d.ip.to_string().starts_with("192.168.")));
    let top = &b.org_ranking[0];
    assert_eq!((top.organization.as_str(), top.devices), ("Alibaba Cloud", 2));
    let shares = &b.proportions.per_device_mean.per_category["humidifier"];
    assert_eq!(shares.get("CN"), Some(&1.0));
}

#[test]
fn firmware_diff_reports_the_speaker_update() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = golden_dir().join("corpus");
    let cfg = corpus.join("config.toml");
    let man = corpus.join("manifest.toml");
    let out = audit(&[
        "--config",
        cfg.to_str().unwrap(),
        "diff-firmware",
        "--manifest",
        man.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("firmware_diff.json")).unwrap()).unwrap();
    let devices = v["firmware_diff"]["devices"].as_array().or(v["devices"].as_array()).unwrap().clone();
    assert_eq!(devices.len(), 1, "{devices:?}");
    assert_eq!(devices[0]["device_id"], "spk-01");
    assert_eq!(devices[0]["protocols_added"], serde_json::json!(["TLS1.3"]));
    assert!(devices[0]["encrypted_share_delta"].as_f64().unwrap() > 0.0);
    assert!(tmp.path().join("firmware_diff.md").is_file());
    assert!(tmp.path().join("pre").join(report::BUNDLE).is_file());
}

#[test]
fn report_renders_markdown_from_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = golden_dir().join("expected");
    let md_path = tmp.path().join("report.md");
    let out = audit(&["report", "--bundle", bundle.to_str().unwrap(), "--out", md_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(&md_path).unwrap();
    assert!(md.contains("hum-01") && md.contains("WEAK_SIGNATURE"), "{md}");
}
