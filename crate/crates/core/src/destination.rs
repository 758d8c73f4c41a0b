//! Destination records, server party attribution, and the normalized
//! traffic-share and server-count statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::net::IpAddr;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geo::UNKNOWN;
use crate::phase::PhaseLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceCategory {
    Camera,
    Doorbell,
    Hub,
    Humidifier,
    Light,
    Plug,
    Sensor,
    Speaker,
    Mirror,
    Tv,
    Cleaner,
    PetFeeder,
}

impl DeviceCategory {
    pub const ALL: [DeviceCategory; 12] = [
        DeviceCategory::Camera,
        DeviceCategory::Doorbell,
        DeviceCategory::Hub,
        DeviceCategory::Humidifier,
        DeviceCategory::Light,
        DeviceCategory::Plug,
        DeviceCategory::Sensor,
        DeviceCategory::Speaker,
        DeviceCategory::Mirror,
        DeviceCategory::Tv,
        DeviceCategory::Cleaner,
        DeviceCategory::PetFeeder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceCategory::Camera => "camera",
            DeviceCategory::Doorbell => "doorbell",
            DeviceCategory::Hub => "hub",
            DeviceCategory::Humidifier => "humidifier",
            DeviceCategory::Light => "light",
            DeviceCategory::Plug => "plug",
            DeviceCategory::Sensor => "sensor",
            DeviceCategory::Speaker => "speaker",
            DeviceCategory::Mirror => "mirror",
            DeviceCategory::Tv => "tv",
            DeviceCategory::Cleaner => "cleaner",
            DeviceCategory::PetFeeder => "pet_feeder",
        }
    }

    /// Column used in aggregated tables; the four single-device kinds
    /// share one "other" column.
    pub fn table_group(self) -> &'static str {
        match self {
            DeviceCategory::Mirror | DeviceCategory::Tv | DeviceCategory::Cleaner | DeviceCategory::PetFeeder => "other",
            c => c.as_str(),
        }
    }
}

impl fmt::Display for DeviceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown device category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for DeviceCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let singular = norm.strip_suffix('s').unwrap_or(&norm);
        DeviceCategory::ALL
            .into_iter()
            .find(|c| {
                let name: String = c.as_str().chars().filter(|c| *c != '_').collect();
                name == norm || name == singular
            })
            .ok_or_else(|| UnknownCategory(s.into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Party {
    First,
    Support,
    Third,
    /// Not yet attributed.
    Unresolved,
}

impl Party {
    pub fn as_str(self) -> &'static str {
        match self {
            Party::First => "FIRST",
            Party::Support => "SUPPORT",
            Party::Third => "THIRD",
            Party::Unresolved => "UNRESOLVED",
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationRecord {
    pub ip: IpAddr,
    pub domains: BTreeSet<String>,
    pub country: String,
    pub organization: String,
    pub party: Party,
    pub evidence: String,
}

impl DestinationRecord {
    pub fn unresolved(ip: IpAddr) -> Self {
        DestinationRecord {
            ip,
            domains: BTreeSet::new(),
            country: UNKNOWN.into(),
            organization: UNKNOWN.into(),
            party: Party::Unresolved,
            evidence: String::new(),
        }
    }
}

/// `domain` equals `suffix` or ends with `.suffix`, ignoring case.
pub fn domain_has_suffix(domain: &str, suffix: &str) -> bool {
    let d = domain.trim_end_matches('.').to_ascii_lowercase();
    let s = suffix.trim_start_matches('.').trim_end_matches('.').to_ascii_lowercase();
    !s.is_empty() && (d == s || d.ends_with(&format!(".{s}")))
}

/// Manufacturer and companion-app identity of one device.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstPartyPatterns {
    /// Matched case-insensitively as substrings of the organization.
    #[serde(default)]
    pub organizations: Vec<String>,
    /// Matched as domain suffixes.
    #[serde(default)]
    pub domains: Vec<String>,
}

impl FirstPartyPatterns {
    fn matches(&self, dest: &DestinationRecord) -> Option<String> {
        let org = dest.organization.to_lowercase();
        if dest.organization != UNKNOWN {
            for p in &self.organizations {
                let pl = p.trim().to_lowercase();
                if !pl.is_empty() && org.contains(&pl) {
                    return Some(format!("organization {:?} matches first-party pattern {:?}", dest.organization, p));
                }
            }
        }
        for d in &dest.domains {
            for p in &self.domains {
                if domain_has_suffix(d, p) {
                    return Some(format!("domain {d:?} matches first-party suffix {p:?}"));
                }
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyPattern {
    DomainSuffix(String),
    /// Exact organization string, compared case-insensitively.
    Organization(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub pattern: PolicyPattern,
    /// Where the support relationship is documented.
    pub note: String,
    /// Device ids or category names this entry is limited to; empty means
    /// every device.
    #[serde(default)]
    pub scope: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy entry {0} has no source note")]
    MissingNote(usize),
    #[error("policy entry {0} has an empty pattern")]
    EmptyPattern(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyPolicyMap {
    pub entries: Vec<PolicyEntry>,
}

impl PartyPolicyMap {
    pub fn validate(&self) -> Result<(), PolicyError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.note.trim().is_empty() {
                return Err(PolicyError::MissingNote(i));
            }
            let p = match &e.pattern {
                PolicyPattern::DomainSuffix(s) | PolicyPattern::Organization(s) => s,
            };
            if p.trim().is_empty() {
                return Err(PolicyError::EmptyPattern(i));
            }
        }
        Ok(())
    }

    fn matches(&self, dest: &DestinationRecord, device_id: &str, category: &str) -> Option<String> {
        // Device-scoped entries are consulted before general ones.
        let scoped = self.entries.iter().filter(|e| !e.scope.is_empty());
        let general = self.entries.iter().filter(|e| e.scope.is_empty());
        for e in scoped.chain(general) {
            if !e.scope.is_empty() && !e.scope.iter().any(|s| s == device_id || s.eq_ignore_ascii_case(category)) {
                continue;
            }
            match &e.pattern {
                PolicyPattern::DomainSuffix(suffix) => {
                    if let Some(d) = dest.domains.iter().find(|d| domain_has_suffix(d, suffix)) {
                        return Some(format!("domain {d:?} matches policy suffix {suffix:?} ({})", e.note));
                    }
                }
                PolicyPattern::Organization(org) => {
                    if dest.organization != UNKNOWN && dest.organization.to_lowercase() == org.trim().to_lowercase() {
                        return Some(format!("organization {:?} listed in policy ({})", dest.organization, e.note));
                    }
                }
            }
        }
        None
    }
}

/// First-party patterns, then the policy map, then third party.
pub fn classify_party(
    dest: &DestinationRecord,
    device_id: &str,
    category: &str,
    first: &FirstPartyPatterns,
    policy: &PartyPolicyMap,
) -> (Party, String) {
    if let Some(ev) = first.matches(dest) {
        return (Party::First, ev);
    }
    if let Some(ev) = policy.matches(dest, device_id, category) {
        return (Party::Support, ev);
    }
    (Party::Third, "no match".into())
}

/// Bytes a device sent to or received from each country.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTraffic {
    pub device_id: String,
    pub category: String,
    pub bytes_by_country: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShareTable {
    pub per_category: BTreeMap<String, BTreeMap<String, f64>>,
    pub overall: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProportionTable {
    /// Each device's country split averaged with equal device weight.
    pub per_device_mean: ShareTable,
    /// Plain byte totals per country over all bytes.
    pub raw_bytes: ShareTable,
    /// Devices that contributed, per category.
    pub devices: BTreeMap<String, usize>,
    /// Devices left out because they had no bytes.
    pub excluded: Vec<String>,
}

pub fn proportion_table(devices: &[DeviceTraffic]) -> ProportionTable {
    let mut t = ProportionTable::default();
    let mut mean_sum: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut overall_sum: BTreeMap<&str, f64> = BTreeMap::new();
    let mut raw_cat: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    let mut raw_all: BTreeMap<&str, u64> = BTreeMap::new();
    let mut n_all = 0usize;
    for d in devices {
        let n: u64 = d.bytes_by_country.values().sum();
        if n == 0 {
            t.excluded.push(d.device_id.clone());
            continue;
        }
        n_all += 1;
        *t.devices.entry(d.category.clone()).or_default() += 1;
        let cat = mean_sum.entry(&d.category).or_default();
        for (country, &m) in &d.bytes_by_country {
            let share = m as f64 / n as f64;
            *cat.entry(country).or_default() += share;
            *overall_sum.entry(country).or_default() += share;
            *raw_cat.entry(&d.category).or_default().entry(country).or_default() += m;
            *raw_all.entry(country).or_default() += m;
        }
    }
    for (cat, sums) in mean_sum {
        let k = t.devices[cat] as f64;
        t.per_device_mean
            .per_category
            .insert(cat.into(), sums.into_iter().map(|(c, s)| (c.to_string(), s / k)).collect());
    }
    t.per_device_mean.overall = overall_sum
        .into_iter()
        .map(|(c, s)| (c.to_string(), s / n_all as f64))
        .collect();
    let ratio = |m: BTreeMap<&str, u64>| {
        let total: u64 = m.values().sum();
        m.into_iter()
            .map(|(c, b)| (c.to_string(), b as f64 / total as f64))
            .collect::<BTreeMap<_, _>>()
    };
    t.raw_bytes.per_category = raw_cat.into_iter().map(|(c, m)| (c.to_string(), ratio(m))).collect();
    t.raw_bytes.overall = ratio(raw_all);
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: String,
    pub target: String,
    pub value: f64,
}

/// Category to country links weighted by the per-device-mean shares.
pub fn sankey_links(t: &ProportionTable) -> Vec<SankeyLink> {
    let mut out = Vec::new();
    for (cat, shares) in &t.per_device_mean.per_category {
        for (country, v) in shares {
            out.push(SankeyLink {
                source: cat.clone(),
                target: country.clone(),
                value: *v,
            });
        }
    }
    out
}

/// One contacted server as seen by one device in one phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contact<'a> {
    pub device_id: &'a str,
    pub phase: Option<PhaseLabel>,
    pub ip: IpAddr,
    pub party: Party,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CountRow {
    Phase(PhaseLabel),
    Total,
}

impl CountRow {
    pub fn as_str(&self) -> &'static str {
        match self {
            CountRow::Phase(p) => p.as_str(),
            CountRow::Total => "TOTAL",
        }
    }
}

pub type PartyCounts = BTreeMap<(CountRow, String, Party), f64>;

/// Mean number of distinct server IPs per device, by phase, category group
/// and party. `devices` lists every device with its group; devices that
/// never contacted a party in a phase count as zero. The TOTAL row counts
/// distinct IPs over the whole lifecycle.
pub fn server_party_counts(devices: &[(&str, &str)], contacts: &[Contact<'_>]) -> PartyCounts {
    let mut distinct: BTreeMap<(CountRow, &str, Party), BTreeSet<IpAddr>> = BTreeMap::new();
    for c in contacts {
        if c.party == Party::Unresolved {
            continue;
        }
        if let Some(p) = c.phase {
            distinct.entry((CountRow::Phase(p), c.device_id, c.party)).or_default().insert(c.ip);
        }
        distinct.entry((CountRow::Total, c.device_id, c.party)).or_default().insert(c.ip);
    }
    let mut group_size: BTreeMap<&str, usize> = BTreeMap::new();
    let mut group_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, group) in devices {
        if group_of.insert(id, group).is_none() {
            *group_size.entry(group).or_default() += 1;
        }
    }
    let rows = PhaseLabel::ALL.iter().map(|p| CountRow::Phase(*p)).chain([CountRow::Total]);
    let mut out = PartyCounts::new();
    for row in rows {
        for (&group, &n) in &group_size {
            for party in [Party::First, Party::Support, Party::Third] {
                let sum: usize = group_of
                    .iter()
                    .filter(|(_, g)| **g == group)
                    .map(|(id, _)| distinct.get(&(row, id, party)).map_or(0, |s| s.len()))
                    .sum();
                out.insert((row, group.into(), party), sum as f64 / n as f64);
            }
        }
    }
    out
}

/// Organizations by number of distinct devices contacting them, most
/// first, ties alphabetical. UNKNOWN organizations are left out.
pub fn organization_ranking<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<(String, usize)> {
    let mut by_org: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (device, org) in pairs {
        if org != UNKNOWN && !org.is_empty() {
            by_org.entry(org).or_default().insert(device);
        }
    }
    let mut out: Vec<(String, usize)> = by_org.into_iter().map(|(o, d)| (o.into(), d.len())).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dest(org: &str, domains: &[&str]) -> DestinationRecord {
        DestinationRecord {
            ip: "47.1.1.1".parse().unwrap(),
            domains: domains.iter().map(|d| d.to_string()).collect(),
            country: "CN".into(),
            organization: org.into(),
            party: Party::Unresolved,
            evidence: String::new(),
        }
    }

    fn policy(suffix: &str) -> PartyPolicyMap {
        PartyPolicyMap {
            entries: vec![PolicyEntry {
                pattern: PolicyPattern::DomainSuffix(suffix.into()),
                note: "vendor privacy policy, cloud storage".into(),
                scope: vec![],
            }],
        }
    }

    #[test]
    fn party_rules() {
        let first = FirstPartyPatterns { organizations: vec!["xiaomi".into()], domains: vec!["mi.com".into()] };
        let (p, _) = classify_party(&dest("Xiaomi", &[]), "cam1", "camera", &first, &PartyPolicyMap::default());
        assert_eq!(p, Party::First);
        let (p, ev) = classify_party(
            &dest("Alibaba Cloud", &["oss-cn-beijing.aliyuncs.com"]),
            "cam1",
            "camera",
            &FirstPartyPatterns::default(),
            &policy("aliyuncs.com"),
        );
        assert_eq!(p, Party::Support);
        assert!(ev.contains("aliyuncs.com"));
        let (p, ev) = classify_party(&dest("Baidu", &["www.baidu.com"]), "spk", "speaker", &FirstPartyPatterns::default(), &PartyPolicyMap::default());
        assert_eq!((p, ev.as_str()), (Party::Third, "no match"));
    }

    #[test]
    fn first_party_precedes_policy() {
        let first = FirstPartyPatterns { organizations: vec![], domains: vec!["aliyuncs.com".into()] };
        let (p, _) = classify_party(&dest("Alibaba Cloud", &["x.aliyuncs.com"]), "d", "plug", &first, &policy("aliyuncs.com"));
        assert_eq!(p, Party::First);
    }

    #[test]
    fn suffix_is_label_aligned() {
        assert!(domain_has_suffix("oss-cn-beijing.aliyuncs.com", "aliyuncs.com"));
        assert!(domain_has_suffix("ALIYUNCS.com.", "aliyuncs.com"));
        assert!(!domain_has_suffix("evilaliyuncs.com", "aliyuncs.com"));
    }

    #[test]
    fn scoped_policy_entry() {
        let mut p = policy("tuyacn.com");
        p.entries[0].scope = vec!["plug-7".into()];
        let d = dest("X", &["a1.tuyacn.com"]);
        let none = FirstPartyPatterns::default();
        assert_eq!(classify_party(&d, "plug-7", "plug", &none, &p).0, Party::Support);
        assert_eq!(classify_party(&d, "plug-8", "plug", &none, &p).0, Party::Third);
    }

    #[test]
    fn two_device_shares() {
        let dt = |id: &str, cn: u64, us: u64| DeviceTraffic {
            device_id: id.into(),
            category: "camera".into(),
            bytes_by_country: [("CN".to_string(), cn), ("US".to_string(), us)].into_iter().filter(|x| x.1 > 0).collect(),
        };
        let t = proportion_table(&[dt("a", 100, 0), dt("b", 50, 50)]);
        let cat = &t.per_device_mean.per_category["camera"];
        assert_eq!(cat["CN"], 0.75);
        assert_eq!(cat["US"], 0.25);
        assert_eq!(t.raw_bytes.overall["US"], 0.25);
    }

    #[test]
    fn zero_byte_device_excluded() {
        let t = proportion_table(&[
            DeviceTraffic { device_id: "z".into(), category: "plug".into(), bytes_by_country: BTreeMap::new() },
            DeviceTraffic { device_id: "a".into(), category: "plug".into(), bytes_by_country: [("CN".to_string(), 5)].into() },
        ]);
        assert_eq!(t.excluded, vec!["z".to_string()]);
        assert_eq!(t.per_device_mean.per_category["plug"]["CN"], 1.0);
    }

    #[test]
    fn total_row_is_distinct() {
        let ip: IpAddr = "1.2.3.4".parse().unwrap();
        let c = [
            Contact { device_id: "a", phase: Some(PhaseLabel::Setup), ip, party: Party::First },
            Contact { device_id: "a", phase: Some(PhaseLabel::Idle), ip, party: Party::First },
        ];
        let t = server_party_counts(&[("a", "camera")], &c);
        assert_eq!(t[&(CountRow::Phase(PhaseLabel::Setup), "camera".into(), Party::First)], 1.0);
        assert_eq!(t[&(CountRow::Total, "camera".into(), Party::First)], 1.0);
        assert_eq!(t[&(CountRow::Phase(PhaseLabel::Deletion), "camera".into(), Party::First)], 0.0);
    }

    #[test]
    fn ranking_order() {
        let r = organization_ranking([("a", "Xiaomi"), ("b", "Google"), ("a", "Google"), ("b", "Xiaomi"), ("c", "Google"), ("c", UNKNOWN)]);
        assert_eq!(r, vec![("Google".to_string(), 3), ("Xiaomi".to_string(), 2)]);
        assert!(organization_ranking([]).is_empty());
    }

    #[test]
    fn category_parsing() {
        assert_eq!("Cameras".parse::<DeviceCategory>().unwrap(), DeviceCategory::Camera);
        assert_eq!("pet feeder".parse::<DeviceCategory>().unwrap(), DeviceCategory::PetFeeder);
        assert_eq!("TV".parse::<DeviceCategory>().unwrap(), DeviceCategory::Tv);
        assert_eq!(DeviceCategory::Mirror.table_group(), "other");
        assert!("toaster".parse::<DeviceCategory>().is_err());
    }
}
