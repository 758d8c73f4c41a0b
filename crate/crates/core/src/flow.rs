//! Bidirectional flow assembly and TCP stream reassembly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::geo::is_global;
use crate::packet::{PacketRecord, Transport};
use crate::phase::PhaseLabel;
use crate::time::Timestamp;
use crate::{dns, http, tls};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: Option<u16>,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.ip, self.port) {
            (IpAddr::V6(ip), Some(p)) => write!(f, "[{ip}]:{p}"),
            (ip, Some(p)) => write!(f, "{ip}:{p}"),
            (ip, None) => write!(f, "{ip}"),
        }
    }
}

/// Canonical flow identity: the lower endpoint always comes first, so both
/// directions of a conversation share one key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub transport: Transport,
    pub lower: Endpoint,
    pub upper: Endpoint,
}

impl FlowKey {
    pub fn of(p: &PacketRecord) -> FlowKey {
        let (sp, dp) = if p.transport.has_ports() {
            (p.src_port, p.dst_port)
        } else {
            (None, None)
        };
        let a = Endpoint { ip: p.src_ip, port: sp };
        let b = Endpoint { ip: p.dst_ip, port: dp };
        let (lower, upper) = if a <= b { (a, b) } else { (b, a) };
        FlowKey {
            transport: p.transport,
            lower,
            upper,
        }
    }

    pub fn involves_port(&self, port: u16) -> bool {
        self.lower.port == Some(port) || self.upper.port == Some(port)
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}-{}", self.transport, self.lower, self.upper)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProtocolTag {
    Dns,
    Http,
    Ntp,
    Tls,
    /// SSL 2.0 framing (two-byte record header).
    Sslv2,
}

/// Which byte count feeds traffic shares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteMode {
    /// Captured frame lengths, headers included.
    #[default]
    Wire,
    /// Transport payload only.
    Payload,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Sent by the endpoint that sent the first observed packet.
    Initiator,
    Responder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub device_id: String,
    pub phase: Option<PhaseLabel>,
    /// Sender of the first observed packet.
    pub initiator: Endpoint,
    pub packets: Vec<PacketRecord>,
    /// Sum of member wire lengths.
    pub bytes_total: u64,
    /// Sum of member payload lengths.
    pub payload_len_total: u64,
    pub initiator_payload: Vec<u8>,
    pub responder_payload: Vec<u8>,
    /// A reassembled direction hit the reassembly cap.
    pub truncated: bool,
    pub protocol_tags: BTreeSet<ProtocolTag>,
}

impl FlowRecord {
    pub fn first_seen(&self) -> Timestamp {
        self.packets.first().map(|p| p.timestamp).unwrap_or_default()
    }

    pub fn last_seen(&self) -> Timestamp {
        self.packets.last().map(|p| p.timestamp).unwrap_or_default()
    }

    pub fn responder(&self) -> Endpoint {
        if self.initiator == self.key.lower {
            self.key.upper
        } else {
            self.key.lower
        }
    }

    pub fn direction_of(&self, p: &PacketRecord) -> Direction {
        if p.src_ip == self.initiator.ip && (self.initiator.port.is_none() || p.src_port == self.initiator.port) {
            Direction::Initiator
        } else {
            Direction::Responder
        }
    }

    pub fn stream(&self, dir: Direction) -> &[u8] {
        match dir {
            Direction::Initiator => &self.initiator_payload,
            Direction::Responder => &self.responder_payload,
        }
    }

    pub fn bytes(&self, mode: ByteMode) -> u64 {
        match mode {
            ByteMode::Wire => self.bytes_total,
            ByteMode::Payload => self.payload_len_total,
        }
    }

    pub fn has_payload(&self) -> bool {
        !self.initiator_payload.is_empty() || !self.responder_payload.is_empty()
    }

    pub fn has_tag(&self, tag: ProtocolTag) -> bool {
        self.protocol_tags.contains(&tag)
    }

    /// No endpoint of the flow has a globally routable address.
    pub fn is_local(&self) -> bool {
        !(is_global(&self.key.lower.ip) || is_global(&self.key.upper.ip))
    }

    /// Individual datagram payloads, in capture order.
    pub fn datagrams(&self) -> impl Iterator<Item = (Direction, &[u8])> + '_ {
        self.packets
            .iter()
            .filter(|p| !p.payload.is_empty())
            .map(move |p| (self.direction_of(p), p.payload.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// UDP packets further apart than this start a new flow.
    pub udp_timeout_secs: u64,
    /// Per-direction reassembly limit.
    pub reassembly_cap: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            udp_timeout_secs: 120,
            reassembly_cap: 1 << 20,
        }
    }
}

struct Building {
    key: FlowKey,
    created: usize,
    packets: Vec<PacketRecord>,
    syn_seq: Option<u32>,
}

/// Groups packets into flows.
///
/// TCP packets sharing a key stay in one flow until a new pure SYN with a
/// different initial sequence number arrives (port reuse). UDP packets
/// further apart than the configured timeout start a new flow. Everything
/// without ports is bucketed per (transport, IP pair).
///
/// Output is ordered by first-packet timestamp, then key.
pub fn assemble_flows(packets: Vec<PacketRecord>, device_id: &str, config: &FlowConfig) -> Vec<FlowRecord> {
    let timeout_ns = config.udp_timeout_secs as i64 * 1_000_000_000;
    let mut done: Vec<Building> = Vec::new();
    let mut active: BTreeMap<FlowKey, Building> = BTreeMap::new();
    let mut created = 0usize;

    for p in packets {
        let key = FlowKey::of(&p);
        let split = match active.get(&key) {
            None => false,
            Some(b) => match p.transport {
                Transport::Udp => {
                    let last = b.packets.last().map(|q| q.timestamp).unwrap_or(p.timestamp);
                    p.timestamp - last > timeout_ns
                }
                Transport::Tcp => match p.tcp {
                    Some(t) if t.is_pure_syn() => b.syn_seq != Some(t.seq),
                    _ => false,
                },
                _ => false,
            },
        };
        if split {
            if let Some(old) = active.remove(&key) {
                done.push(old);
            }
        }
        let b = active.entry(key).or_insert_with(|| {
            created += 1;
            Building {
                key,
                created,
                packets: Vec::new(),
                syn_seq: None,
            }
        });
        if let Some(t) = p.tcp {
            if t.is_pure_syn() && b.syn_seq.is_none() {
                b.syn_seq = Some(t.seq);
            }
        }
        b.packets.push(p);
    }
    done.extend(active.into_values());
    done.sort_by(|a, b| {
        let ta = a.packets[0].timestamp;
        let tb = b.packets[0].timestamp;
        ta.cmp(&tb).then(a.key.cmp(&b.key)).then(a.created.cmp(&b.created))
    });
    done.into_iter().map(|b| finish(b, device_id, config)).collect()
}

fn finish(b: Building, device_id: &str, config: &FlowConfig) -> FlowRecord {
    let first = &b.packets[0];
    let initiator = Endpoint {
        ip: first.src_ip,
        port: if first.transport.has_ports() { first.src_port } else { None },
    };
    let is_init = |p: &PacketRecord| {
        p.src_ip == initiator.ip && (initiator.port.is_none() || p.src_port == initiator.port)
    };
    let bytes_total = b.packets.iter().map(|p| p.wire_length as u64).sum();
    let payload_len_total = b.packets.iter().map(|p| p.payload.len() as u64).sum();
    let (initiator_payload, responder_payload, truncated) = if b.key.transport == Transport::Tcp {
        let (i, ti) = reassemble_tcp(b.packets.iter().filter(|p| is_init(p)), config.reassembly_cap);
        let (r, tr) = reassemble_tcp(b.packets.iter().filter(|p| !is_init(p)), config.reassembly_cap);
        (i, r, ti || tr)
    } else {
        let mut i = Vec::new();
        let mut r = Vec::new();
        for p in &b.packets {
            if is_init(p) {
                i.extend_from_slice(&p.payload);
            } else {
                r.extend_from_slice(&p.payload);
            }
        }
        (i, r, false)
    };
    let mut flow = FlowRecord {
        key: b.key,
        device_id: device_id.into(),
        phase: None,
        initiator,
        packets: b.packets,
        bytes_total,
        payload_len_total,
        initiator_payload,
        responder_payload,
        truncated,
        protocol_tags: BTreeSet::new(),
    };
    flow.protocol_tags = detect_protocols(&flow);
    flow
}

/// Orders one direction's segments by sequence number and concatenates
/// them, dropping bytes already emitted. Gaps are skipped. Returns the
/// stream and whether the cap cut it short.
pub fn reassemble_tcp<'a>(segments: impl Iterator<Item = &'a PacketRecord>, cap: usize) -> (Vec<u8>, bool) {
    let mut segs: Vec<(i64, usize, &[u8])> = Vec::new();
    let mut base: Option<u32> = None;
    for (arrival, p) in segments.enumerate() {
        let Some(t) = p.tcp else { continue };
        if p.payload.is_empty() {
            continue;
        }
        let b = *base.get_or_insert(t.seq);
        // Signed distance handles wraparound and segments older than base.
        let rel = t.seq.wrapping_sub(b) as i32 as i64;
        segs.push((rel, arrival, &p.payload));
    }
    segs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    let mut cursor: Option<i64> = None;
    for (rel, _, data) in segs {
        let end = rel + data.len() as i64;
        let skip = match cursor {
            Some(c) if end <= c => continue,
            Some(c) if rel < c => (c - rel) as usize,
            _ => 0,
        };
        let fresh = &data[skip..];
        if out.len() + fresh.len() > cap {
            let room = cap - out.len();
            out.extend_from_slice(&fresh[..room]);
            return (out, true);
        }
        out.extend_from_slice(fresh);
        cursor = Some(end);
    }
    (out, false)
}

fn detect_protocols(flow: &FlowRecord) -> BTreeSet<ProtocolTag> {
    let mut tags = BTreeSet::new();
    let key = &flow.key;
    match key.transport {
        Transport::Udp => {
            if key.involves_port(53) || key.involves_port(5353) {
                if flow.datagrams().any(|(_, d)| dns::parse_message(d).is_ok()) {
                    tags.insert(ProtocolTag::Dns);
                }
            }
            if key.involves_port(123) && flow.datagrams().any(|(_, d)| looks_like_ntp(d)) {
                tags.insert(ProtocolTag::Ntp);
            }
        }
        Transport::Tcp => {
            let streams = [&flow.initiator_payload, &flow.responder_payload];
            if key.involves_port(53) && streams.iter().any(|s| dns::split_tcp_messages(s).next().is_some()) {
                tags.insert(ProtocolTag::Dns);
            }
            if streams.iter().any(|s| tls::looks_like_tls(s)) {
                tags.insert(ProtocolTag::Tls);
            } else if streams.iter().any(|s| tls::looks_like_sslv2(s)) {
                tags.insert(ProtocolTag::Sslv2);
            }
            if streams.iter().any(|s| http::looks_like_http(s)) {
                tags.insert(ProtocolTag::Http);
            }
        }
        _ => {}
    }
    tags
}

fn looks_like_ntp(d: &[u8]) -> bool {
    if d.len() < 48 {
        return false;
    }
    let version = (d[0] >> 3) & 0x7;
    let mode = d[0] & 0x7;
    (1..=4).contains(&version) && mode != 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::tcp_flags::*;
    use alloc::vec;
    use core::net::Ipv4Addr;

    fn tcp(t: i64, src: [u8; 4], sp: u16, dst: [u8; 4], dp: u16, seq: u32, flags: u8, payload: &[u8]) -> PacketRecord {
        PacketRecord {
            timestamp: Timestamp::from_secs(t),
            src_mac: None,
            src_ip: IpAddr::V4(Ipv4Addr::from(src)),
            dst_ip: IpAddr::V4(Ipv4Addr::from(dst)),
            src_port: Some(sp),
            dst_port: Some(dp),
            transport: Transport::Tcp,
            tcp: Some(crate::packet::TcpMeta { seq, ack: 0, flags }),
            payload: payload.to_vec(),
            wire_length: 54 + payload.len() as u32,
        }
    }

    fn udp(t: i64, sp: u16, payload: &[u8]) -> PacketRecord {
        PacketRecord {
            timestamp: Timestamp::from_secs(t),
            src_mac: None,
            src_ip: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)),
            dst_ip: IpAddr::V4(Ipv4Addr::new(1, 2, 3, 4)),
            src_port: Some(sp),
            dst_port: Some(9999),
            transport: Transport::Udp,
            tcp: None,
            payload: payload.to_vec(),
            wire_length: 42 + payload.len() as u32,
        }
    }

    const DEV: [u8; 4] = [10, 0, 0, 2];
    const SRV: [u8; 4] = [1, 2, 3, 4];

    #[test]
    fn handshake_and_two_segments_form_one_flow() {
        let pkts = vec![
            tcp(0, DEV, 40000, SRV, 80, 100, SYN, b""),
            tcp(0, SRV, 80, DEV, 40000, 500, SYN | ACK, b""),
            tcp(0, DEV, 40000, SRV, 80, 101, ACK, b""),
            tcp(1, DEV, 40000, SRV, 80, 101, ACK | PSH, b"hello "),
            tcp(1, DEV, 40000, SRV, 80, 107, ACK | PSH, b"world"),
        ];
        let flows = assemble_flows(pkts, "d", &FlowConfig::default());
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].initiator_payload, b"hello world");
        assert_eq!(flows[0].initiator.port, Some(40000));
        assert!(flows[0].responder_payload.is_empty());
    }

    #[test]
    fn out_of_order_and_duplicate_segments() {
        let pkts = vec![
            tcp(0, DEV, 1, SRV, 2, 10, ACK, b"cd"),
            tcp(0, DEV, 1, SRV, 2, 8, ACK, b"ab"),
            tcp(0, DEV, 1, SRV, 2, 10, ACK, b"cd"),
            tcp(0, DEV, 1, SRV, 2, 11, ACK, b"def"),
        ];
        let flows = assemble_flows(pkts, "d", &FlowConfig::default());
        assert_eq!(flows[0].initiator_payload, b"abcdef");
    }

    #[test]
    fn sequence_wraparound() {
        let pkts = vec![
            tcp(0, DEV, 1, SRV, 2, u32::MAX - 1, ACK, b"ab"),
            tcp(0, DEV, 1, SRV, 2, 0, ACK, b"cd"),
        ];
        let flows = assemble_flows(pkts, "d", &FlowConfig::default());
        assert_eq!(flows[0].initiator_payload, b"abcd");
    }

    #[test]
    fn reassembly_cap_truncates_and_flags() {
        let pkts = vec![
            tcp(0, DEV, 1, SRV, 2, 0, ACK, &[1u8; 8]),
            tcp(0, DEV, 1, SRV, 2, 8, ACK, &[2u8; 8]),
        ];
        let cfg = FlowConfig { reassembly_cap: 12, ..FlowConfig::default() };
        let flows = assemble_flows(pkts, "d", &cfg);
        assert_eq!(flows[0].initiator_payload.len(), 12);
        assert!(flows[0].truncated);
    }

    #[test]
    fn udp_timeout_splits() {
        let flows = assemble_flows(vec![udp(0, 7, b"a"), udp(300, 7, b"b")], "d", &FlowConfig::default());
        assert_eq!(flows.len(), 2);
        let flows = assemble_flows(vec![udp(0, 7, b"a"), udp(120, 7, b"b")], "d", &FlowConfig::default());
        assert_eq!(flows.len(), 1);
    }

    #[test]
    fn port_reuse_with_new_syn_starts_new_flow() {
        let pkts = vec![
            tcp(0, DEV, 1, SRV, 2, 100, SYN, b""),
            tcp(1, DEV, 1, SRV, 2, 100, SYN, b""),
            tcp(2, DEV, 1, SRV, 2, 101, ACK, b"x"),
            tcp(9, DEV, 1, SRV, 2, 7000, SYN, b""),
        ];
        let flows = assemble_flows(pkts, "d", &FlowConfig::default());
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0].packets.len(), 3);
    }

    #[test]
    fn bytes_are_conserved() {
        let pkts = vec![udp(0, 1, b"aaa"), udp(1, 2, b"bb"), tcp(2, DEV, 3, SRV, 4, 0, ACK, b"c")];
        let total: u64 = pkts.iter().map(|p| p.wire_length as u64).sum();
        let flows = assemble_flows(pkts, "d", &FlowConfig::default());
        assert_eq!(flows.iter().map(|f| f.bytes_total).sum::<u64>(), total);
    }

    #[test]
    fn responder_traffic_first_packet_sets_initiator() {
        let pkts = vec![tcp(0, SRV, 443, DEV, 5000, 1, ACK, b"mid"), tcp(1, DEV, 5000, SRV, 443, 1, ACK, b"flow")];
        let flows = assemble_flows(pkts, "d", &FlowConfig::default());
        assert_eq!(flows[0].initiator.port, Some(443));
        assert_eq!(flows[0].initiator_payload, b"mid");
        assert_eq!(flows[0].responder_payload, b"flow");
    }
}
