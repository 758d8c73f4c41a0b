#![allow(dead_code)]

pub mod certs;
pub mod golden;
pub mod net;

use lifecycle_audit_core::tls::build::{
    certificate, change_cipher_spec, client_hello, handshake, record, records, server_hello,
};
use lifecycle_audit_core::tls::{ProtocolVersion, CONTENT_APPLICATION_DATA, CONTENT_HANDSHAKE};

use net::{noise, Side};

const SERVER_HELLO_DONE: u8 = 14;
const CLIENT_KEY_EXCHANGE: u8 = 16;

/// A TLS 1.2 session: full handshake with a visible certificate chain,
/// then application records of the given sizes.
pub fn tls12_session(sni: &str, chain: &[Vec<u8>], app: &[(Side, usize)], seed: u64) -> Vec<(Side, Vec<u8>)> {
    let v = ProtocolVersion::TLS12;
    let refs: Vec<&[u8]> = chain.iter().map(Vec::as_slice).collect();
    let mut flight = server_hello(v, 0xC02F, None);
    flight.extend(certificate(&refs));
    flight.extend(handshake(SERVER_HELLO_DONE, &[]));
    let mut cke = record(CONTENT_HANDSHAKE, v, &handshake(CLIENT_KEY_EXCHANGE, &noise(seed, 66)));
    cke.extend(change_cipher_spec());
    cke.extend(record(CONTENT_HANDSHAKE, v, &noise(seed + 1, 40)));
    let mut fin = change_cipher_spec();
    fin.extend(record(CONTENT_HANDSHAKE, v, &noise(seed + 2, 40)));
    let mut out = vec![
        (Side::Device, record(CONTENT_HANDSHAKE, ProtocolVersion::TLS10, &client_hello(Some(sni), &[0xC02F, 0xC030], &[]))),
        (Side::Server, records(CONTENT_HANDSHAKE, v, &flight)),
        (Side::Device, cke),
        (Side::Server, fin),
    ];
    for (i, (side, n)) in app.iter().enumerate() {
        out.push((*side, records(CONTENT_APPLICATION_DATA, v, &noise(seed + 10 + i as u64, *n))));
    }
    out
}

/// A TLS 1.3 session; certificates travel encrypted.
pub fn tls13_session(sni: &str, app: &[(Side, usize)], seed: u64) -> Vec<(Side, Vec<u8>)> {
    let v = ProtocolVersion::TLS12;
    let ch = client_hello(Some(sni), &[0x1301, 0x1302], &[ProtocolVersion::TLS13, ProtocolVersion::TLS12]);
    let mut sh = record(CONTENT_HANDSHAKE, v, &server_hello(v, 0x1301, Some(ProtocolVersion::TLS13)));
    sh.extend(change_cipher_spec());
    sh.extend(record(CONTENT_APPLICATION_DATA, v, &noise(seed, 900)));
    let mut fin = change_cipher_spec();
    fin.extend(record(CONTENT_APPLICATION_DATA, v, &noise(seed + 1, 53)));
    let mut out = vec![
        (Side::Device, record(CONTENT_HANDSHAKE, ProtocolVersion::TLS10, &ch)),
        (Side::Server, sh),
        (Side::Device, fin),
    ];
    for (i, (side, n)) in app.iter().enumerate() {
        out.push((*side, records(CONTENT_APPLICATION_DATA, v, &noise(seed + 10 + i as u64, *n))));
    }
    out
}

pub fn http_request(method: &str, host: &str, path: &str, content_type: &str, body: &[u8]) -> Vec<u8> {
    let mut m = format!(
        "{method} {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\n\r\n",
        body.len()
    )
    .into_bytes();
    m.extend_from_slice(body);
    m
}

pub fn http_response(content_type: &str, body: &[u8]) -> Vec<u8> {
    let mut m = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\n\r\n",
        body.len()
    )
    .into_bytes();
    m.extend_from_slice(body);
    m
}

pub fn gzip(data: &[u8]) -> Vec<u8> {
    use std::io::Write;
    let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    e.write_all(data).unwrap();
    e.finish().unwrap()
}

/// Subject of a root in the pinned public store, as issuer bytes.
pub fn public_root_name(cn_fragment: &str) -> Vec<u8> {
    use der::Decode;
    lifecycle_audit::trust::pinned_subjects()
        .into_iter()
        .find(|s| {
            x509_cert::name::Name::from_der(s)
                .map(|n| n.to_string().contains(cn_fragment))
                .unwrap_or(false)
        })
        .expect("root present in pinned store")
}
