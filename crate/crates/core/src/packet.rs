//! Link, network and transport header decoding.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::capture::{read_capture, CaptureWarning, LinkType, RawRecord};
use crate::error::CaptureError;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Transport {
    Tcp,
    Udp,
    Icmp,
    Other,
}

impl Transport {
    pub fn has_ports(self) -> bool {
        matches!(self, Transport::Tcp | Transport::Udp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Tcp => "TCP",
            Transport::Udp => "UDP",
            Transport::Icmp => "ICMP",
            Transport::Other => "OTHER",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpMeta {
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
}

impl TcpMeta {
    pub fn is_pure_syn(&self) -> bool {
        self.flags & tcp_flags::SYN != 0 && self.flags & tcp_flags::ACK == 0
    }
}

/// A decoded IP packet.
///
/// Ports are present exactly when the transport is TCP or UDP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp: Timestamp,
    pub src_mac: Option<[u8; 6]>,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub transport: Transport,
    pub tcp: Option<TcpMeta>,
    pub payload: Vec<u8>,
    pub wire_length: u32,
}

/// Why a frame was not turned into a [`PacketRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skip {
    /// Well-formed frame carrying something other than IP (ARP, LLDP...).
    NonIp,
    Malformed(&'static str),
}

/// Decodes one captured frame according to its link type.
pub fn decode_record(record: &RawRecord<'_>) -> Result<PacketRecord, Skip> {
    let data = record.data;
    let (mac, ip) = match record.link_type {
        LinkType::ETHERNET => strip_ethernet(data)?,
        LinkType::LINUX_SLL => strip_sll(data)?,
        LinkType::LINUX_SLL2 => strip_sll2(data)?,
        LinkType::RAW | LinkType::IPV4 | LinkType::IPV6 => (None, data),
        _ => return Err(Skip::Malformed("unsupported link type")),
    };
    let mut pkt = decode_ip(ip)?;
    pkt.timestamp = record.timestamp;
    pkt.src_mac = mac;
    pkt.wire_length = record.orig_len.max(pkt.payload.len() as u32);
    Ok(pkt)
}

fn strip_ethernet(data: &[u8]) -> Result<(Option<[u8; 6]>, &[u8]), Skip> {
    if data.len() < 14 {
        return Err(Skip::Malformed("short ethernet header"));
    }
    let mut mac = [0u8; 6];
    mac.copy_from_slice(&data[6..12]);
    let mut ethertype = u16::from_be_bytes([data[12], data[13]]);
    let mut off = 14;
    // 802.1Q and 802.1ad tags.
    while ethertype == 0x8100 || ethertype == 0x88A8 {
        if data.len() < off + 4 {
            return Err(Skip::Malformed("short vlan tag"));
        }
        ethertype = u16::from_be_bytes([data[off + 2], data[off + 3]]);
        off += 4;
    }
    match ethertype {
        0x0800 | 0x86DD => Ok((Some(mac), &data[off..])),
        _ => Err(Skip::NonIp),
    }
}

fn strip_sll(data: &[u8]) -> Result<(Option<[u8; 6]>, &[u8]), Skip> {
    if data.len() < 16 {
        return Err(Skip::Malformed("short linux cooked header"));
    }
    let addr_len = u16::from_be_bytes([data[4], data[5]]) as usize;
    let proto = u16::from_be_bytes([data[14], data[15]]);
    let mac = (addr_len == 6).then(|| {
        let mut m = [0u8; 6];
        m.copy_from_slice(&data[6..12]);
        m
    });
    match proto {
        0x0800 | 0x86DD => Ok((mac, &data[16..])),
        _ => Err(Skip::NonIp),
    }
}

fn strip_sll2(data: &[u8]) -> Result<(Option<[u8; 6]>, &[u8]), Skip> {
    if data.len() < 20 {
        return Err(Skip::Malformed("short linux cooked v2 header"));
    }
    let proto = u16::from_be_bytes([data[0], data[1]]);
    let addr_len = data[11] as usize;
    let mac = (addr_len == 6).then(|| {
        let mut m = [0u8; 6];
        m.copy_from_slice(&data[12..18]);
        m
    });
    match proto {
        0x0800 | 0x86DD => Ok((mac, &data[20..])),
        _ => Err(Skip::NonIp),
    }
}

fn blank(src: IpAddr, dst: IpAddr) -> PacketRecord {
    PacketRecord {
        timestamp: Timestamp::default(),
        src_mac: None,
        src_ip: src,
        dst_ip: dst,
        src_port: None,
        dst_port: None,
        transport: Transport::Other,
        tcp: None,
        payload: Vec::new(),
        wire_length: 0,
    }
}

/// Decodes an IPv4 or IPv6 packet starting at the network header.
pub fn decode_ip(data: &[u8]) -> Result<PacketRecord, Skip> {
    let version = data.first().ok_or(Skip::Malformed("empty network payload"))? >> 4;
    match version {
        4 => decode_ipv4(data),
        6 => decode_ipv6(data),
        _ => Err(Skip::Malformed("bad ip version")),
    }
}

fn decode_ipv4(data: &[u8]) -> Result<PacketRecord, Skip> {
    if data.len() < 20 {
        return Err(Skip::Malformed("short ipv4 header"));
    }
    let ihl = (data[0] & 0x0F) as usize * 4;
    let total = u16::from_be_bytes([data[2], data[3]]) as usize;
    if ihl < 20 || total < ihl || data.len() < ihl {
        return Err(Skip::Malformed("bad ipv4 lengths"));
    }
    // Trim link-layer padding; tolerate snap-length truncation.
    let end = total.min(data.len());
    let frag = u16::from_be_bytes([data[6], data[7]]);
    let src = IpAddr::V4(Ipv4Addr::new(data[12], data[13], data[14], data[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(data[16], data[17], data[18], data[19]));
    let mut pkt = blank(src, dst);
    if frag & 0x1FFF != 0 {
        // Non-first fragment: no transport header available.
        pkt.payload = data[ihl..end].to_vec();
        return Ok(pkt);
    }
    decode_transport(&mut pkt, data[9], &data[ihl..end])?;
    Ok(pkt)
}

fn decode_ipv6(data: &[u8]) -> Result<PacketRecord, Skip> {
    if data.len() < 40 {
        return Err(Skip::Malformed("short ipv6 header"));
    }
    let payload_len = u16::from_be_bytes([data[4], data[5]]) as usize;
    let mut next = data[6];
    let mut s = [0u8; 16];
    let mut d = [0u8; 16];
    s.copy_from_slice(&data[8..24]);
    d.copy_from_slice(&data[24..40]);
    let mut pkt = blank(IpAddr::V6(Ipv6Addr::from(s)), IpAddr::V6(Ipv6Addr::from(d)));
    let end = (40 + payload_len).min(data.len());
    let mut off = 40;
    loop {
        match next {
            // Hop-by-hop, routing, destination options.
            0 | 43 | 60 => {
                if end < off + 2 {
                    return Err(Skip::Malformed("short ipv6 extension header"));
                }
                next = data[off];
                off += (data[off + 1] as usize + 1) * 8;
            }
            44 => {
                if end < off + 8 {
                    return Err(Skip::Malformed("short ipv6 fragment header"));
                }
                let frag_off = u16::from_be_bytes([data[off + 2], data[off + 3]]) >> 3;
                next = data[off];
                off += 8;
                if frag_off != 0 {
                    pkt.payload = data[off.min(end)..end].to_vec();
                    return Ok(pkt);
                }
            }
            51 => {
                if end < off + 2 {
                    return Err(Skip::Malformed("short authentication header"));
                }
                next = data[off];
                off += (data[off + 1] as usize + 2) * 4;
            }
            _ => break,
        }
        if off > end {
            return Err(Skip::Malformed("ipv6 extension header overruns packet"));
        }
    }
    decode_transport(&mut pkt, next, &data[off..end])?;
    Ok(pkt)
}

fn decode_transport(pkt: &mut PacketRecord, proto: u8, seg: &[u8]) -> Result<(), Skip> {
    match proto {
        6 => {
            if seg.len() < 20 {
                return Err(Skip::Malformed("short tcp header"));
            }
            let doff = (seg[12] >> 4) as usize * 4;
            if doff < 20 || doff > seg.len() {
                return Err(Skip::Malformed("bad tcp data offset"));
            }
            pkt.transport = Transport::Tcp;
            pkt.src_port = Some(u16::from_be_bytes([seg[0], seg[1]]));
            pkt.dst_port = Some(u16::from_be_bytes([seg[2], seg[3]]));
            pkt.tcp = Some(TcpMeta {
                seq: u32::from_be_bytes([seg[4], seg[5], seg[6], seg[7]]),
                ack: u32::from_be_bytes([seg[8], seg[9], seg[10], seg[11]]),
                flags: seg[13],
            });
            pkt.payload = seg[doff..].to_vec();
        }
        17 => {
            if seg.len() < 8 {
                return Err(Skip::Malformed("short udp header"));
            }
            let ulen = u16::from_be_bytes([seg[4], seg[5]]) as usize;
            if ulen != 0 && ulen < 8 {
                return Err(Skip::Malformed("bad udp length"));
            }
            let end = if ulen == 0 { seg.len() } else { ulen.min(seg.len()) };
            pkt.transport = Transport::Udp;
            pkt.src_port = Some(u16::from_be_bytes([seg[0], seg[1]]));
            pkt.dst_port = Some(u16::from_be_bytes([seg[2], seg[3]]));
            pkt.payload = seg[8..end].to_vec();
        }
        1 | 58 => {
            pkt.transport = Transport::Icmp;
            pkt.payload = seg.get(4..).unwrap_or(&[]).to_vec();
        }
        _ => {
            pkt.transport = Transport::Other;
            pkt.payload = seg.to_vec();
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub records: usize,
    pub packets: usize,
    pub non_ip: usize,
    pub malformed: usize,
    /// Wire bytes of every record in the file.
    pub total_wire_bytes: u64,
    /// Wire bytes of records that did not become packets.
    pub unflowed_bytes: u64,
    pub warnings: Vec<CaptureWarning>,
}

#[derive(Clone, Debug)]
pub struct ParsedCapture {
    pub device_id: String,
    pub packets: Vec<PacketRecord>,
    pub stats: ParseStats,
}

/// Reads a capture and decodes every record, in file order.
///
/// Malformed frames are counted and skipped; they never abort the file.
pub fn parse_capture(bytes: &[u8], device_id: &str) -> Result<ParsedCapture, CaptureError> {
    let cap = read_capture(bytes)?;
    let mut stats = ParseStats {
        records: cap.records.len(),
        warnings: cap.warnings.clone(),
        ..ParseStats::default()
    };
    let mut packets = Vec::with_capacity(cap.records.len());
    for rec in &cap.records {
        stats.total_wire_bytes += rec.orig_len as u64;
        match decode_record(rec) {
            Ok(p) => packets.push(p),
            Err(skip) => {
                stats.unflowed_bytes += rec.orig_len as u64;
                match skip {
                    Skip::NonIp => stats.non_ip += 1,
                    Skip::Malformed(_) => stats.malformed += 1,
                }
            }
        }
    }
    stats.packets = packets.len();
    Ok(ParsedCapture {
        device_id: device_id.into(),
        packets,
        stats,
    })
}

/// Frame construction for fixtures and simulations.
pub mod synth {
    use super::*;

    pub const DEVICE_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x01];
    pub const GATEWAY_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0xFE];

    /// Transport layer of a synthesized packet.
    #[derive(Clone, Copy, Debug)]
    pub enum L4<'a> {
        Tcp { sport: u16, dport: u16, seq: u32, ack: u32, flags: u8, payload: &'a [u8] },
        Udp { sport: u16, dport: u16, payload: &'a [u8] },
        Icmp { payload: &'a [u8] },
    }

    fn checksum_free_tcp(sport: u16, dport: u16, seq: u32, ack: u32, flags: u8, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::with_capacity(20 + payload.len());
        v.extend_from_slice(&sport.to_be_bytes());
        v.extend_from_slice(&dport.to_be_bytes());
        v.extend_from_slice(&seq.to_be_bytes());
        v.extend_from_slice(&ack.to_be_bytes());
        v.push(5 << 4);
        v.push(flags);
        v.extend_from_slice(&65535u16.to_be_bytes());
        v.extend_from_slice(&[0, 0, 0, 0]);
        v.extend_from_slice(payload);
        v
    }

    fn l4_bytes(l4: &L4<'_>) -> (u8, Vec<u8>) {
        match *l4 {
            L4::Tcp { sport, dport, seq, ack, flags, payload } => {
                (6, checksum_free_tcp(sport, dport, seq, ack, flags, payload))
            }
            L4::Udp { sport, dport, payload } => {
                let mut v = Vec::with_capacity(8 + payload.len());
                v.extend_from_slice(&sport.to_be_bytes());
                v.extend_from_slice(&dport.to_be_bytes());
                v.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
                v.extend_from_slice(&[0, 0]);
                v.extend_from_slice(payload);
                (17, v)
            }
            L4::Icmp { payload } => {
                let mut v = alloc::vec![8, 0, 0, 0];
                v.extend_from_slice(payload);
                (1, v)
            }
        }
    }

    /// IP packet (no link layer). IPv4 and IPv6 are chosen from the
    /// address family; mixed families panic.
    pub fn ip_packet(src: IpAddr, dst: IpAddr, l4: &L4<'_>) -> Vec<u8> {
        let (proto, seg) = l4_bytes(l4);
        match (src, dst) {
            (IpAddr::V4(s), IpAddr::V4(d)) => {
                let total = (20 + seg.len()) as u16;
                let mut v = Vec::with_capacity(total as usize);
                v.extend_from_slice(&[0x45, 0]);
                v.extend_from_slice(&total.to_be_bytes());
                v.extend_from_slice(&[0, 0, 0x40, 0, 64, proto, 0, 0]);
                v.extend_from_slice(&s.octets());
                v.extend_from_slice(&d.octets());
                v.extend_from_slice(&seg);
                v
            }
            (IpAddr::V6(s), IpAddr::V6(d)) => {
                let proto = if proto == 1 { 58 } else { proto };
                let mut v = Vec::with_capacity(40 + seg.len());
                v.extend_from_slice(&[0x60, 0, 0, 0]);
                v.extend_from_slice(&(seg.len() as u16).to_be_bytes());
                v.push(proto);
                v.push(64);
                v.extend_from_slice(&s.octets());
                v.extend_from_slice(&d.octets());
                v.extend_from_slice(&seg);
                v
            }
            _ => panic!("mixed address families"),
        }
    }

    /// Ethernet frame around an IP packet.
    pub fn ethernet(src_mac: [u8; 6], dst_mac: [u8; 6], ip: &[u8]) -> Vec<u8> {
        let ethertype: u16 = if ip.first().map(|b| b >> 4) == Some(6) { 0x86DD } else { 0x0800 };
        let mut v = Vec::with_capacity(14 + ip.len());
        v.extend_from_slice(&dst_mac);
        v.extend_from_slice(&src_mac);
        v.extend_from_slice(&ethertype.to_be_bytes());
        v.extend_from_slice(ip);
        v
    }

    pub fn eth_frame(src_mac: [u8; 6], dst_mac: [u8; 6], src: IpAddr, dst: IpAddr, l4: &L4<'_>) -> Vec<u8> {
        ethernet(src_mac, dst_mac, &ip_packet(src, dst, l4))
    }
}
