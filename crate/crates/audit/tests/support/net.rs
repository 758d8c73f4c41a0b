//! Frame-level traffic synthesis: TCP conversations with real handshakes
//! and sequence numbers, UDP datagrams, DNS answers, pcap output.

use std::net::{IpAddr, Ipv4Addr};

use lifecycle_audit_core::capture::{LinkType, PcapWriter};
use lifecycle_audit_core::packet::synth::{eth_frame, DEVICE_MAC, GATEWAY_MAC, L4};
use lifecycle_audit_core::Timestamp;

pub const SYN: u8 = 0x02;
pub const ACK: u8 = 0x10;
pub const PSH: u8 = 0x08;
pub const FIN: u8 = 0x01;
pub const MSS: usize = 1400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Device,
    Server,
}

#[derive(Clone, Copy, Debug)]
pub struct Endpoints {
    pub device: Ipv4Addr,
    pub dport_local: u16,
    pub server: Ipv4Addr,
    pub port: u16,
}

impl Endpoints {
    pub fn new(device: Ipv4Addr, local_port: u16, server: Ipv4Addr, port: u16) -> Self {
        Endpoints {
            device,
            dport_local: local_port,
            server,
            port,
        }
    }

    fn frame(&self, from: Side, l4: &L4<'_>) -> Vec<u8> {
        let (d, s) = (IpAddr::V4(self.device), IpAddr::V4(self.server));
        match from {
            Side::Device => eth_frame(DEVICE_MAC, GATEWAY_MAC, d, s, l4),
            Side::Server => eth_frame(GATEWAY_MAC, DEVICE_MAC, s, d, l4),
        }
    }
}

/// Frames for a complete TCP conversation. Each message is segmented at
/// `MSS` and acknowledged.
pub fn tcp_conversation(ep: &Endpoints, messages: &[(Side, Vec<u8>)]) -> Vec<(Side, Vec<u8>)> {
    let (cport, sport) = (ep.dport_local, ep.port);
    let mut seq_c: u32 = 1000 + u32::from(cport);
    let mut seq_s: u32 = 50_000 + u32::from(sport);
    let mut out = Vec::new();
    let mut push = |from: Side, seq: u32, ack: u32, flags: u8, payload: &[u8]| {
        let (a, b) = match from {
            Side::Device => (cport, sport),
            Side::Server => (sport, cport),
        };
        let l4 = L4::Tcp {
            sport: a,
            dport: b,
            seq,
            ack,
            flags,
            payload,
        };
        out.push((from, ep.frame(from, &l4)));
    };
    push(Side::Device, seq_c, 0, SYN, &[]);
    push(Side::Server, seq_s, seq_c + 1, SYN | ACK, &[]);
    seq_c += 1;
    seq_s += 1;
    push(Side::Device, seq_c, seq_s, ACK, &[]);
    for (side, msg) in messages {
        for chunk in msg.chunks(MSS) {
            match side {
                Side::Device => {
                    push(Side::Device, seq_c, seq_s, ACK | PSH, chunk);
                    seq_c = seq_c.wrapping_add(chunk.len() as u32);
                    push(Side::Server, seq_s, seq_c, ACK, &[]);
                }
                Side::Server => {
                    push(Side::Server, seq_s, seq_c, ACK | PSH, chunk);
                    seq_s = seq_s.wrapping_add(chunk.len() as u32);
                    push(Side::Device, seq_c, seq_s, ACK, &[]);
                }
            }
        }
    }
    push(Side::Device, seq_c, seq_s, FIN | ACK, &[]);
    push(Side::Server, seq_s, seq_c + 1, FIN | ACK, &[]);
    push(Side::Device, seq_c + 1, seq_s + 1, ACK, &[]);
    out
}

pub fn udp_datagram(ep: &Endpoints, from: Side, payload: &[u8]) -> Vec<u8> {
    let (a, b) = match from {
        Side::Device => (ep.dport_local, ep.port),
        Side::Server => (ep.port, ep.dport_local),
    };
    ep.frame(
        from,
        &L4::Udp {
            sport: a,
            dport: b,
            payload,
        },
    )
}

fn qname(name: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for label in name.split('.') {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
    out
}

pub fn dns_query(id: u16, name: &str) -> Vec<u8> {
    let mut m = id.to_be_bytes().to_vec();
    m.extend_from_slice(&[0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0]);
    m.extend(qname(name));
    m.extend_from_slice(&[0, 1, 0, 1]);
    m
}

pub fn dns_response(id: u16, name: &str, answers: &[Ipv4Addr]) -> Vec<u8> {
    let mut m = id.to_be_bytes().to_vec();
    m.extend_from_slice(&[0x81, 0x80, 0, 1]);
    m.extend_from_slice(&(answers.len() as u16).to_be_bytes());
    m.extend_from_slice(&[0, 0, 0, 0]);
    m.extend(qname(name));
    m.extend_from_slice(&[0, 1, 0, 1]);
    for ip in answers {
        m.extend_from_slice(&[0xC0, 0x0C, 0, 1, 0, 1, 0, 0, 0x01, 0x2C, 0, 4]);
        m.extend_from_slice(&ip.octets());
    }
    m
}

/// An ordered sequence of frames with a millisecond clock.
pub struct Trace {
    pub frames: Vec<(Timestamp, Vec<u8>)>,
    now_ms: i64,
}

impl Trace {
    pub fn new(start_secs: i64) -> Self {
        Trace {
            frames: Vec::new(),
            now_ms: start_secs * 1000,
        }
    }

    pub fn push(&mut self, frame: Vec<u8>) {
        self.now_ms += 1;
        self.frames.push((Timestamp::from_millis(self.now_ms), frame));
    }

    pub fn extend(&mut self, frames: impl IntoIterator<Item = (Side, Vec<u8>)>) {
        for (_, f) in frames {
            self.push(f);
        }
    }

    pub fn pause(&mut self, ms: i64) {
        self.now_ms += ms;
    }

    pub fn tcp(&mut self, ep: &Endpoints, messages: &[(Side, Vec<u8>)]) {
        let frames = tcp_conversation(ep, messages);
        self.extend(frames);
    }

    pub fn dns(&mut self, device: Ipv4Addr, resolver: Ipv4Addr, id: u16, name: &str, answers: &[Ipv4Addr]) {
        let ep = Endpoints::new(device, 40_000 + id, resolver, 53);
        self.push(udp_datagram(&ep, Side::Device, &dns_query(id, name)));
        self.push(udp_datagram(&ep, Side::Server, &dns_response(id, name, answers)));
    }

    pub fn pcap(&self) -> Vec<u8> {
        let mut w = PcapWriter::new(LinkType::ETHERNET);
        for (ts, f) in &self.frames {
            w.push(*ts, f);
        }
        w.finish()
    }
}

/// Deterministic pseudo-random bytes (xorshift).
pub fn noise(seed: u64, n: usize) -> Vec<u8> {
    let mut x = seed.wrapping_mul(0x2545_F491_4F6C_DD1D) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 24) as u8
        })
        .collect()
}
