//! Core of the lifecycle traffic auditing toolkit.
//!
//! Everything in this crate works on in-memory byte slices and owned
//! collections; there is no file, socket or clock access. The companion
//! `lifecycle-audit` crate supplies IO, the CLI, the capture orchestrator,
//! the online geolocation client and the interception probe.
//!
//! Pipeline order as used by the companion crate:
//!
//! 1. [`capture`] reads pcap/pcapng bytes, [`packet`] decodes link, IP and
//!    transport headers.
//! 2. [`flow`] groups packets into bidirectional flows and reassembles TCP.
//! 3. [`dns`] builds the IP to domain map, [`geo`] and [`destination`]
//!    attribute countries, organizations and parties.
//! 4. [`entropy`] and [`classify`] decide encrypted/plaintext/unknown.
//! 5. [`tls`], [`x509`] and [`tls_audit`] inventory protocol versions and
//!    audit certificates.
//! 6. [`mitm`] classifies interception-probe transcripts.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod capture;
pub mod classify;
pub mod destination;
pub mod dns;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod geo;
pub mod http;
pub mod mitm;
pub mod packet;
pub mod phase;
pub mod time;
pub mod timeline;
pub mod tls;
pub mod tls_audit;
pub mod x509;

pub use error::{CaptureError, TimelineError};
pub use phase::PhaseLabel;
pub use time::Timestamp;
