//! DNS message parsing and the passive IP to domain map.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::flow::{Direction, FlowRecord, ProtocolTag};
use crate::packet::Transport;
use crate::time::Timestamp;

pub const TYPE_A: u16 = 1;
pub const TYPE_CNAME: u16 = 5;
pub const TYPE_AAAA: u16 = 28;
pub const TYPE_DNSKEY: u16 = 48;

const MAX_POINTER_HOPS: usize = 32;
const MAX_NAME_LEN: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DnsError {
    #[error("message truncated")]
    Truncated,
    #[error("bad name encoding")]
    BadName,
    #[error("compression pointer loop")]
    PointerLoop,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub name: String,
    pub qtype: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RData {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Cname(String),
    Dnskey { flags: u16, algorithm: u8 },
    Other(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceRecord {
    pub name: String,
    pub rtype: u16,
    pub ttl: u32,
    pub data: RData,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub id: u16,
    pub is_response: bool,
    pub rcode: u8,
    pub questions: Vec<Question>,
    pub answers: Vec<ResourceRecord>,
    pub authority: Vec<ResourceRecord>,
    pub additional: Vec<ResourceRecord>,
}

impl Message {
    pub fn records(&self) -> impl Iterator<Item = &ResourceRecord> {
        self.answers.iter().chain(&self.authority).chain(&self.additional)
    }

    pub fn has_dnskey(&self) -> bool {
        self.records().any(|r| r.rtype == TYPE_DNSKEY)
    }
}

struct Reader<'a> {
    msg: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DnsError> {
        let s = self.msg.get(self.pos..self.pos + n).ok_or(DnsError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DnsError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DnsError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn name(&mut self) -> Result<String, DnsError> {
        let (name, next) = read_name(self.msg, self.pos)?;
        self.pos = next;
        Ok(name)
    }
}

/// Reads a possibly compressed name at `start`; returns the lowercased
/// dotted name and the offset just past it in the original position.
fn read_name(msg: &[u8], start: usize) -> Result<(String, usize), DnsError> {
    let mut name = String::new();
    let mut pos = start;
    let mut resume = None;
    let mut hops = 0;
    loop {
        let len = *msg.get(pos).ok_or(DnsError::Truncated)? as usize;
        match len & 0xC0 {
            0x00 => {
                if len == 0 {
                    pos += 1;
                    break;
                }
                let label = msg.get(pos + 1..pos + 1 + len).ok_or(DnsError::Truncated)?;
                if !name.is_empty() {
                    name.push('.');
                }
                for &c in label {
                    name.push(c.to_ascii_lowercase() as char);
                }
                if name.len() > MAX_NAME_LEN {
                    return Err(DnsError::BadName);
                }
                pos += 1 + len;
            }
            0xC0 => {
                let lo = *msg.get(pos + 1).ok_or(DnsError::Truncated)? as usize;
                if resume.is_none() {
                    resume = Some(pos + 2);
                }
                hops += 1;
                if hops > MAX_POINTER_HOPS {
                    return Err(DnsError::PointerLoop);
                }
                pos = ((len & 0x3F) << 8) | lo;
            }
            _ => return Err(DnsError::BadName),
        }
    }
    Ok((name, resume.unwrap_or(pos)))
}

fn read_record(r: &mut Reader<'_>) -> Result<ResourceRecord, DnsError> {
    let name = r.name()?;
    let rtype = r.u16()?;
    let _class = r.u16()?;
    let ttl = r.u32()?;
    let rdlen = r.u16()? as usize;
    let rdata_start = r.pos;
    let raw = r.take(rdlen)?;
    let data = match (rtype, rdlen) {
        (TYPE_A, 4) => RData::A(Ipv4Addr::new(raw[0], raw[1], raw[2], raw[3])),
        (TYPE_AAAA, 16) => {
            let mut o = [0u8; 16];
            o.copy_from_slice(raw);
            RData::Aaaa(Ipv6Addr::from(o))
        }
        (TYPE_CNAME, _) => RData::Cname(read_name(r.msg, rdata_start)?.0),
        (TYPE_DNSKEY, n) if n >= 4 => RData::Dnskey {
            flags: u16::from_be_bytes([raw[0], raw[1]]),
            algorithm: raw[3],
        },
        _ => RData::Other(raw.to_vec()),
    };
    Ok(ResourceRecord { name, rtype, ttl, data })
}

pub fn parse_message(msg: &[u8]) -> Result<Message, DnsError> {
    let mut r = Reader { msg, pos: 0 };
    let id = r.u16()?;
    let flags = r.u16()?;
    let counts = [r.u16()?, r.u16()?, r.u16()?, r.u16()?];
    let mut questions = Vec::new();
    for _ in 0..counts[0] {
        let name = r.name()?;
        let qtype = r.u16()?;
        let _class = r.u16()?;
        questions.push(Question { name, qtype });
    }
    let mut sections: [Vec<ResourceRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, section) in sections.iter_mut().enumerate() {
        for _ in 0..counts[i + 1] {
            section.push(read_record(&mut r)?);
        }
    }
    let [answers, authority, additional] = sections;
    Ok(Message {
        id,
        is_response: flags & 0x8000 != 0,
        rcode: (flags & 0x000F) as u8,
        questions,
        answers,
        authority,
        additional,
    })
}

/// Splits a DNS-over-TCP stream into its length-prefixed messages.
pub fn split_tcp_messages(stream: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut pos = 0;
    core::iter::from_fn(move || {
        let hdr = stream.get(pos..pos + 2)?;
        let len = u16::from_be_bytes([hdr[0], hdr[1]]) as usize;
        let m = stream.get(pos + 2..pos + 2 + len)?;
        pos += 2 + len;
        (len >= 12).then_some(m)
    })
}

/// DNS messages carried by a flow with their send time, whatever the
/// transport. Parse failures are returned so callers can count them.
pub fn flow_messages(flow: &FlowRecord) -> Vec<(Timestamp, Result<Message, DnsError>)> {
    let mut out = Vec::new();
    match flow.key.transport {
        Transport::Udp => {
            for p in flow.packets.iter().filter(|p| !p.payload.is_empty()) {
                out.push((p.timestamp, parse_message(&p.payload)));
            }
        }
        Transport::Tcp => {
            let t = flow.first_seen();
            for dir in [Direction::Initiator, Direction::Responder] {
                for m in split_tcp_messages(flow.stream(dir)) {
                    out.push((t, parse_message(m)));
                }
            }
        }
        _ => {}
    }
    out
}

/// IP address to the set of domain names it was observed answering for.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsMap {
    /// domain -> first time it was seen for this address.
    entries: BTreeMap<IpAddr, BTreeMap<String, Timestamp>>,
}

impl DnsMap {
    pub fn insert(&mut self, ip: IpAddr, domain: &str, seen: Timestamp) {
        let domain = domain.trim_end_matches('.').to_lowercase();
        let slot = self.entries.entry(ip).or_default().entry(domain).or_insert(seen);
        if seen < *slot {
            *slot = seen;
        }
    }

    /// Domains for `ip`, alphabetical. Empty for unmapped addresses.
    pub fn domains(&self, ip: &IpAddr) -> Vec<&str> {
        self.entries
            .get(ip)
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn first_seen(&self, ip: &IpAddr, domain: &str) -> Option<Timestamp> {
        self.entries.get(ip)?.get(domain).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: &DnsMap) {
        for (ip, names) in &other.entries {
            for (d, t) in names {
                self.insert(*ip, d, *t);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&IpAddr, &BTreeMap<String, Timestamp>)> {
        self.entries.iter()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsStats {
    pub responses: usize,
    pub malformed: usize,
}

/// Adds every A/AAAA answer of every response to the map, keyed to the
/// name originally asked for (CNAME chains are walked back to it).
pub fn add_response(map: &mut DnsMap, msg: &Message, seen: Timestamp) {
    // target -> owner, to walk CNAME chains backwards.
    let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
    for rr in &msg.answers {
        if let RData::Cname(target) = &rr.data {
            parent.insert(target.as_str(), rr.name.as_str());
        }
    }
    for rr in &msg.answers {
        let ip = match rr.data {
            RData::A(v4) => IpAddr::V4(v4),
            RData::Aaaa(v6) => IpAddr::V6(v6),
            _ => continue,
        };
        let mut name = rr.name.as_str();
        for _ in 0..MAX_POINTER_HOPS {
            match parent.get(name) {
                Some(&up) if up != name => name = up,
                _ => break,
            }
        }
        map.insert(ip, name, seen);
    }
}

pub fn build_dns_map<'a>(flows: impl IntoIterator<Item = &'a FlowRecord>) -> (DnsMap, DnsStats) {
    let mut map = DnsMap::default();
    let mut stats = DnsStats::default();
    for flow in flows {
        if !flow.has_tag(ProtocolTag::Dns) {
            continue;
        }
        for (t, m) in flow_messages(flow) {
            match m {
                Ok(m) if m.is_response => {
                    stats.responses += 1;
                    add_response(&mut map, &m, t);
                }
                Ok(_) => {}
                Err(_) => stats.malformed += 1,
            }
        }
    }
    (map, stats)
}

/// Minimal DNS message encoder for fixtures.
pub mod build {
    use super::*;

    pub fn encode_name(out: &mut Vec<u8>, name: &str) {
        for label in name.split('.').filter(|l| !l.is_empty()) {
            out.push(label.len() as u8);
            out.extend_from_slice(label.as_bytes());
        }
        out.push(0);
    }

    pub enum Answer<'a> {
        A(&'a str, Ipv4Addr),
        Aaaa(&'a str, Ipv6Addr),
        Cname(&'a str, &'a str),
        Dnskey(&'a str),
    }

    pub fn query(id: u16, qname: &str, qtype: u16) -> Vec<u8> {
        let mut m = Vec::new();
        m.extend_from_slice(&id.to_be_bytes());
        m.extend_from_slice(&[0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0]);
        encode_name(&mut m, qname);
        m.extend_from_slice(&qtype.to_be_bytes());
        m.extend_from_slice(&1u16.to_be_bytes());
        m
    }

    pub fn response(id: u16, qname: &str, qtype: u16, answers: &[Answer<'_>]) -> Vec<u8> {
        let mut m = Vec::new();
        m.extend_from_slice(&id.to_be_bytes());
        m.extend_from_slice(&[0x81, 0x80, 0, 1]);
        m.extend_from_slice(&(answers.len() as u16).to_be_bytes());
        m.extend_from_slice(&[0, 0, 0, 0]);
        encode_name(&mut m, qname);
        m.extend_from_slice(&qtype.to_be_bytes());
        m.extend_from_slice(&1u16.to_be_bytes());
        for a in answers {
            let (owner, rtype, rdata) = match a {
                Answer::A(n, ip) => (*n, TYPE_A, ip.octets().to_vec()),
                Answer::Aaaa(n, ip) => (*n, TYPE_AAAA, ip.octets().to_vec()),
                Answer::Cname(n, target) => {
                    let mut r = Vec::new();
                    encode_name(&mut r, target);
                    (*n, TYPE_CNAME, r)
                }
                Answer::Dnskey(n) => (*n, TYPE_DNSKEY, alloc::vec![1, 1, 3, 8, 0xAA, 0xBB]),
            };
            encode_name(&mut m, owner);
            m.extend_from_slice(&rtype.to_be_bytes());
            m.extend_from_slice(&1u16.to_be_bytes());
            m.extend_from_slice(&300u32.to_be_bytes());
            m.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
            m.extend_from_slice(&rdata);
        }
        m
    }
}
