//! Address scope checks and the in-memory offline geolocation table.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

pub const UNKNOWN: &str = "UNKNOWN";

/// True for addresses reachable on the public internet.
///
/// Private, loopback, link-local, multicast, broadcast, shared (CGNAT),
/// documentation, benchmarking and reserved ranges are all non-global.
pub fn is_global(ip: &IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => is_global_v4(v4),
        IpAddr::V6(v6) => is_global_v6(v6),
    }
}

fn is_global_v4(ip: &Ipv4Addr) -> bool {
    let o = ip.octets();
    !(ip.is_unspecified()
        || ip.is_private()
        || ip.is_loopback()
        || ip.is_link_local()
        || ip.is_multicast()
        || ip.is_broadcast()
        || ip.is_documentation()
        || o[0] == 0
        || (o[0] == 100 && (o[1] & 0xC0) == 64)
        || (o[0] == 192 && o[1] == 0 && o[2] == 0)
        || (o[0] == 198 && (o[1] & 0xFE) == 18)
        || o[0] >= 240)
}

fn is_global_v6(ip: &Ipv6Addr) -> bool {
    if let Some(v4) = ip.to_ipv4_mapped() {
        return is_global_v4(&v4);
    }
    let s = ip.segments();
    !(ip.is_unspecified()
        || ip.is_loopback()
        || ip.is_multicast()
        || (s[0] & 0xFE00) == 0xFC00
        || (s[0] & 0xFFC0) == 0xFE80
        || (s[0] == 0x2001 && s[1] == 0x0DB8)
        || (s[0] == 0x0064 && s[1] == 0xFF9B))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoAnswer {
    /// ISO 3166-1 alpha-2 code, or [`UNKNOWN`].
    pub country: String,
    pub organization: String,
    pub asn: Option<u32>,
}

impl GeoAnswer {
    pub fn unknown() -> Self {
        GeoAnswer {
            country: UNKNOWN.into(),
            organization: UNKNOWN.into(),
            asn: None,
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.country == UNKNOWN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    V4(u32),
    V6(u128),
}

fn key(ip: &IpAddr) -> Key {
    match ip {
        IpAddr::V4(v) => Key::V4(u32::from(*v)),
        IpAddr::V6(v) => match v.to_ipv4_mapped() {
            Some(m) => Key::V4(u32::from(m)),
            None => Key::V6(u128::from(*v)),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GeoTableError {
    #[error("range {0} - {1} mixes address families or is reversed")]
    BadRange(IpAddr, IpAddr),
    #[error("range starting at {0} overlaps the previous range")]
    Overlap(IpAddr),
}

/// Sorted, non-overlapping IP ranges with their country and organization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GeoTable {
    /// Snapshot label carried into every answer's provenance.
    pub snapshot: String,
    ranges: Vec<(Key, Key, GeoAnswer)>,
}

impl GeoTable {
    pub fn new(snapshot: impl Into<String>, mut rows: Vec<(IpAddr, IpAddr, GeoAnswer)>) -> Result<Self, GeoTableError> {
        rows.sort_by_key(|r| key(&r.0));
        let mut ranges: Vec<(Key, Key, GeoAnswer)> = Vec::with_capacity(rows.len());
        for (start, end, answer) in rows {
            let (ks, ke) = (key(&start), key(&end));
            let same_family = matches!((ks, ke), (Key::V4(_), Key::V4(_)) | (Key::V6(_), Key::V6(_)));
            if !same_family || ke < ks {
                return Err(GeoTableError::BadRange(start, end));
            }
            if let Some(prev) = ranges.last() {
                if ks <= prev.1 {
                    return Err(GeoTableError::Overlap(start));
                }
            }
            ranges.push((ks, ke, answer));
        }
        Ok(GeoTable {
            snapshot: snapshot.into(),
            ranges,
        })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn lookup(&self, ip: &IpAddr) -> Option<&GeoAnswer> {
        let k = key(ip);
        let idx = self.ranges.partition_point(|r| r.0 <= k);
        let r = self.ranges.get(idx.checked_sub(1)?)?;
        (k <= r.1).then_some(&r.2)
    }
}

/// Case-insensitive organization alias table; collapses the many raw
/// registry spellings of one company into a single display name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgAliases {
    map: BTreeMap<String, String>,
}

impl OrgAliases {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, raw: &str, canonical: &str) {
        self.map.insert(raw.trim().to_lowercase(), canonical.into());
    }

    /// Canonical name for `raw`; unknown spellings pass through trimmed.
    pub fn normalize(&self, raw: &str) -> String {
        let t = raw.trim();
        if t.is_empty() {
            return UNKNOWN.into();
        }
        self.map.get(&t.to_lowercase()).cloned().unwrap_or_else(|| t.to_string())
    }

    pub fn with_defaults() -> Self {
        let mut a = Self::new();
        for (raw, canon) in [
            ("Google LLC", "Google"),
            ("GOOGLE", "Google"),
            ("Google Cloud", "Google"),
            ("Alibaba (US) Technology Co., Ltd.", "Alibaba Cloud"),
            ("Alibaba (US) Technology", "Alibaba Cloud"),
            ("Hangzhou Alibaba Advertising Co.,Ltd.", "Alibaba Cloud"),
            ("Aliyun Computing Co., LTD", "Alibaba Cloud"),
            ("ALIBABA-CN-NET", "Alibaba Cloud"),
            ("Beijing Xiaomi Mobile Software Co., Ltd", "Xiaomi"),
            ("Xiaomi Communications Co Ltd", "Xiaomi"),
            ("Shenzhen Tencent Computer Systems Company Limited", "Tencent"),
            ("Tencent Cloud Computing (Beijing) Co., Ltd", "Tencent"),
            ("TENCENT-NET-AP", "Tencent"),
            ("Beijing Baidu Netcom Science and Technology Co., Ltd.", "Baidu"),
            ("Huawei Cloud Service data center", "Huawei"),
            ("HUAWEI CLOUDS", "Huawei"),
            ("Greatbit Technology", "Greatbit"),
            ("Amazon.com, Inc.", "Amazon"),
            ("Amazon Technologies Inc.", "Amazon"),
            ("Cloudflare, Inc.", "Cloudflare"),
        ] {
            a.insert(raw, canon);
        }
        a
    }
}
