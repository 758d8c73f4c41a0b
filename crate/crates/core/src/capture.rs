//! pcap and pcapng framing.
//!
//! The reader keeps byte ranges for every record and every non-packet
//! block so that [`Capture::extract`] can write subsets of a capture in the
//! original format without re-encoding anything.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::CaptureError;
use crate::time::Timestamp;

pub const PCAP_MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const PCAP_MAGIC_NANOS: u32 = 0xA1B2_3C4D;
pub const PCAPNG_SHB: u32 = 0x0A0D_0D0A;
const PCAPNG_BYTE_ORDER_MAGIC: u32 = 0x1A2B_3C4D;

const PCAP_HEADER_LEN: usize = 24;
const PCAP_RECORD_HEADER_LEN: usize = 16;
/// Records claiming more than this are treated as corrupt framing.
const MAX_RECORD_LEN: u32 = 0x0400_0000;

/// Data link type as declared by the capture file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkType(pub u32);

impl LinkType {
    pub const ETHERNET: LinkType = LinkType(1);
    pub const RAW: LinkType = LinkType(101);
    pub const LINUX_SLL: LinkType = LinkType(113);
    pub const IPV4: LinkType = LinkType(228);
    pub const IPV6: LinkType = LinkType(229);
    pub const LINUX_SLL2: LinkType = LinkType(276);

    pub fn is_supported(self) -> bool {
        matches!(self.0, 1 | 101 | 113 | 228 | 229 | 276)
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "NULL",
            1 => "ETHERNET",
            101 => "RAW",
            105 => "IEEE802_11",
            113 => "LINUX_SLL",
            127 => "IEEE802_11_RADIOTAP",
            228 => "IPV4",
            229 => "IPV6",
            276 => "LINUX_SLL2",
            _ => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureFormat {
    Pcap { big_endian: bool, nanos: bool },
    PcapNg,
}

/// Sniffs the format from the leading magic bytes.
pub fn detect_format(bytes: &[u8]) -> Result<CaptureFormat, CaptureError> {
    if bytes.len() < 4 {
        return Err(CaptureError::TooShort(bytes.len()));
    }
    let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    match (le, be) {
        (PCAP_MAGIC_MICROS, _) => Ok(CaptureFormat::Pcap { big_endian: false, nanos: false }),
        (PCAP_MAGIC_NANOS, _) => Ok(CaptureFormat::Pcap { big_endian: false, nanos: true }),
        (_, PCAP_MAGIC_MICROS) => Ok(CaptureFormat::Pcap { big_endian: true, nanos: false }),
        (_, PCAP_MAGIC_NANOS) => Ok(CaptureFormat::Pcap { big_endian: true, nanos: true }),
        (PCAPNG_SHB, _) => Ok(CaptureFormat::PcapNg),
        _ => Err(CaptureError::BadMagic(be)),
    }
}

/// One captured frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord<'a> {
    pub timestamp: Timestamp,
    pub link_type: LinkType,
    pub data: &'a [u8],
    /// Length of the frame on the wire; at least `data.len()`.
    pub orig_len: u32,
    /// Byte range of the whole record or block in the file.
    pub block: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Element {
    Framing(Range<usize>),
    Record(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CaptureWarning {
    /// The file ends in the middle of a record; everything before it was kept.
    TruncatedTail { offset: usize },
    /// A pcapng block type this reader does not interpret; copied through.
    SkippedBlock { offset: usize, block_type: u32 },
}

#[derive(Clone, Debug)]
pub struct Capture<'a> {
    pub format: CaptureFormat,
    pub records: Vec<RawRecord<'a>>,
    pub warnings: Vec<CaptureWarning>,
    bytes: &'a [u8],
    layout: Vec<Element>,
}

impl<'a> Capture<'a> {
    /// First and last record timestamps.
    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        let first = self.records.iter().map(|r| r.timestamp).min()?;
        let last = self.records.iter().map(|r| r.timestamp).max()?;
        Some((first, last))
    }

    /// Writes a capture in the same format holding only the records for
    /// which `keep(index)` is true. Headers and non-packet blocks are always
    /// kept, so the output is valid even when no record is selected.
    pub fn extract(&self, mut keep: impl FnMut(usize) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for el in &self.layout {
            match el {
                Element::Framing(r) => out.extend_from_slice(&self.bytes[r.clone()]),
                Element::Record(i) => {
                    if keep(*i) {
                        out.extend_from_slice(&self.bytes[self.records[*i].block.clone()]);
                    }
                }
            }
        }
        out
    }
}

/// Parses a pcap or pcapng file held in memory.
///
/// Unsupported link types are a hard error; a truncated final record is a
/// warning.
pub fn read_capture(bytes: &[u8]) -> Result<Capture<'_>, CaptureError> {
    match detect_format(bytes)? {
        CaptureFormat::Pcap { big_endian, nanos } => read_pcap(bytes, big_endian, nanos),
        CaptureFormat::PcapNg => read_pcapng(bytes),
    }
}

#[derive(Clone, Copy)]
struct Endian(bool);

impl Endian {
    fn u16(self, b: &[u8], at: usize) -> u16 {
        let v = [b[at], b[at + 1]];
        if self.0 {
            u16::from_be_bytes(v)
        } else {
            u16::from_le_bytes(v)
        }
    }

    fn u32(self, b: &[u8], at: usize) -> u32 {
        let v = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.0 {
            u32::from_be_bytes(v)
        } else {
            u32::from_le_bytes(v)
        }
    }
}

fn read_pcap(bytes: &[u8], big_endian: bool, nanos: bool) -> Result<Capture<'_>, CaptureError> {
    if bytes.len() < PCAP_HEADER_LEN {
        return Err(CaptureError::TooShort(bytes.len()));
    }
    let e = Endian(big_endian);
    // The FCS-length bits live in the upper nibble of the link type field.
    let link_type = LinkType(e.u32(bytes, 20) & 0x0FFF_FFFF);
    if !link_type.is_supported() {
        return Err(CaptureError::UnsupportedLinkType(link_type.0, link_type.name()));
    }
    let mut records = Vec::new();
    let mut layout = alloc::vec![Element::Framing(0..PCAP_HEADER_LEN)];
    let mut warnings = Vec::new();
    let mut off = PCAP_HEADER_LEN;
    while off < bytes.len() {
        if bytes.len() - off < PCAP_RECORD_HEADER_LEN {
            warnings.push(CaptureWarning::TruncatedTail { offset: off });
            break;
        }
        let secs = e.u32(bytes, off) as i64;
        let frac = e.u32(bytes, off + 4) as i64;
        let incl = e.u32(bytes, off + 8);
        let orig = e.u32(bytes, off + 12);
        let data_start = off + PCAP_RECORD_HEADER_LEN;
        if incl > MAX_RECORD_LEN || bytes.len() - data_start < incl as usize {
            warnings.push(CaptureWarning::TruncatedTail { offset: off });
            break;
        }
        let end = data_start + incl as usize;
        let timestamp = if nanos {
            Timestamp::from_nanos(secs * 1_000_000_000 + frac)
        } else {
            Timestamp::from_nanos(secs * 1_000_000_000 + frac * 1_000)
        };
        layout.push(Element::Record(records.len()));
        records.push(RawRecord {
            timestamp,
            link_type,
            data: &bytes[data_start..end],
            orig_len: orig.max(incl),
            block: off..end,
        });
        off = end;
    }
    Ok(Capture {
        format: CaptureFormat::Pcap { big_endian, nanos },
        records,
        warnings,
        bytes,
        layout,
    })
}

#[derive(Clone, Copy)]
struct Interface {
    link_type: LinkType,
    /// Timestamp resolution: `(is_power_of_two, exponent)`.
    tsresol: (bool, u8),
}

impl Interface {
    fn to_timestamp(self, high: u32, low: u32) -> Timestamp {
        let units = ((high as u64) << 32 | low as u64) as u128;
        let (pow2, exp) = self.tsresol;
        let nanos = if pow2 {
            (units * 1_000_000_000) >> exp.min(127)
        } else if exp <= 9 {
            units * 10u128.pow(9 - exp as u32)
        } else {
            units / 10u128.pow((exp as u32 - 9).min(38))
        };
        Timestamp::from_nanos(nanos.min(i64::MAX as u128) as i64)
    }
}

fn read_pcapng(bytes: &[u8]) -> Result<Capture<'_>, CaptureError> {
    let mut records = Vec::new();
    let mut layout = Vec::new();
    let mut warnings = Vec::new();
    let mut interfaces: Vec<Interface> = Vec::new();
    let mut e = Endian(false);
    let mut last_ts = Timestamp::default();
    let mut off = 0;
    while off < bytes.len() {
        if bytes.len() - off < 12 {
            warnings.push(CaptureWarning::TruncatedTail { offset: off });
            break;
        }
        let raw_type = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if raw_type == PCAPNG_SHB {
            // Byte order of the section is given by its byte-order magic.
            let bom = &bytes[off + 8..off + 12];
            e = match u32::from_le_bytes([bom[0], bom[1], bom[2], bom[3]]) {
                PCAPNG_BYTE_ORDER_MAGIC => Endian(false),
                _ if u32::from_be_bytes([bom[0], bom[1], bom[2], bom[3]]) == PCAPNG_BYTE_ORDER_MAGIC => {
                    Endian(true)
                }
                _ => {
                    return Err(CaptureError::BadBlock {
                        offset: off,
                        reason: "bad byte-order magic",
                    })
                }
            };
            interfaces.clear();
        } else if off == 0 {
            return Err(CaptureError::BadBlock {
                offset: 0,
                reason: "first block is not a section header",
            });
        }
        let block_type = e.u32(bytes, off);
        let block_len = e.u32(bytes, off + 4) as usize;
        if block_len < 12 || block_len % 4 != 0 {
            if off + block_len > bytes.len() || block_len < 12 {
                warnings.push(CaptureWarning::TruncatedTail { offset: off });
                break;
            }
            return Err(CaptureError::BadBlock {
                offset: off,
                reason: "block length not a multiple of 4",
            });
        }
        if bytes.len() - off < block_len {
            warnings.push(CaptureWarning::TruncatedTail { offset: off });
            break;
        }
        let end = off + block_len;
        let body = &bytes[off + 8..end - 4];
        match block_type {
            // Interface description.
            1 => {
                if body.len() < 8 {
                    return Err(CaptureError::BadBlock {
                        offset: off,
                        reason: "short interface description",
                    });
                }
                let link_type = LinkType(e.u16(body, 0) as u32);
                if !link_type.is_supported() {
                    return Err(CaptureError::UnsupportedLinkType(link_type.0, link_type.name()));
                }
                let mut tsresol = (false, 6u8);
                let mut opt = 8;
                while opt + 4 <= body.len() {
                    let code = e.u16(body, opt);
                    let len = e.u16(body, opt + 2) as usize;
                    if code == 0 || opt + 4 + len > body.len() {
                        break;
                    }
                    if code == 9 && len >= 1 {
                        let v = body[opt + 4];
                        tsresol = (v & 0x80 != 0, v & 0x7F);
                    }
                    opt += 4 + ((len + 3) & !3);
                }
                interfaces.push(Interface { link_type, tsresol });
                layout.push(Element::Framing(off..end));
            }
            // Enhanced packet and obsolete packet blocks.
            6 | 2 => {
                if body.len() < 20 {
                    return Err(CaptureError::BadBlock {
                        offset: off,
                        reason: "short packet block",
                    });
                }
                let iface_id = if block_type == 6 {
                    e.u32(body, 0)
                } else {
                    e.u16(body, 0) as u32
                };
                let iface = *interfaces
                    .get(iface_id as usize)
                    .ok_or(CaptureError::UnknownInterface { offset: off, interface: iface_id })?;
                let ts = iface.to_timestamp(e.u32(body, 4), e.u32(body, 8));
                let cap_len = e.u32(body, 12) as usize;
                let orig_len = e.u32(body, 16);
                if 20 + cap_len > body.len() {
                    return Err(CaptureError::BadBlock {
                        offset: off,
                        reason: "captured length exceeds block",
                    });
                }
                last_ts = ts;
                layout.push(Element::Record(records.len()));
                records.push(RawRecord {
                    timestamp: ts,
                    link_type: iface.link_type,
                    data: &body[20..20 + cap_len],
                    orig_len: orig_len.max(cap_len as u32),
                    block: off..end,
                });
            }
            // Simple packet block: no timestamp, inherits the previous one.
            3 => {
                let iface = *interfaces
                    .first()
                    .ok_or(CaptureError::UnknownInterface { offset: off, interface: 0 })?;
                if body.len() < 4 {
                    return Err(CaptureError::BadBlock {
                        offset: off,
                        reason: "short simple packet block",
                    });
                }
                let orig_len = e.u32(body, 0);
                let cap_len = (orig_len as usize).min(body.len() - 4);
                layout.push(Element::Record(records.len()));
                records.push(RawRecord {
                    timestamp: last_ts,
                    link_type: iface.link_type,
                    data: &body[4..4 + cap_len],
                    orig_len: orig_len.max(cap_len as u32),
                    block: off..end,
                });
            }
            PCAPNG_SHB => layout.push(Element::Framing(off..end)),
            other => {
                // Name resolution, statistics, custom blocks and so on.
                if !matches!(other, 4 | 5) {
                    warnings.push(CaptureWarning::SkippedBlock { offset: off, block_type: other });
                }
                layout.push(Element::Framing(off..end));
            }
        }
        off = end;
    }
    Ok(Capture {
        format: CaptureFormat::PcapNg,
        records,
        warnings,
        bytes,
        layout,
    })
}

/// Builds classic little-endian microsecond pcap files in memory.
#[derive(Clone, Debug)]
pub struct PcapWriter {
    buf: Vec<u8>,
}

impl PcapWriter {
    pub fn new(link_type: LinkType) -> Self {
        let mut buf = Vec::with_capacity(4096);
        buf.extend_from_slice(&PCAP_MAGIC_MICROS.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes());
        buf.extend_from_slice(&4u16.to_le_bytes());
        buf.extend_from_slice(&0i32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&262_144u32.to_le_bytes());
        buf.extend_from_slice(&link_type.0.to_le_bytes());
        PcapWriter { buf }
    }

    pub fn push(&mut self, ts: Timestamp, frame: &[u8]) {
        self.push_with_orig_len(ts, frame, frame.len() as u32);
    }

    pub fn push_with_orig_len(&mut self, ts: Timestamp, frame: &[u8], orig_len: u32) {
        self.buf.extend_from_slice(&(ts.secs() as u32).to_le_bytes());
        self.buf.extend_from_slice(&ts.subsec_micros().to_le_bytes());
        self.buf.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(&orig_len.to_le_bytes());
        self.buf.extend_from_slice(frame);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}
