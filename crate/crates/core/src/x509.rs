//! X.509 field extraction for the certificate audit.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use der::asn1::{ObjectIdentifier, UintRef};
use der::{Decode, Encode, Sequence};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use x509_cert::ext::pkix::name::GeneralName;
use x509_cert::ext::pkix::{BasicConstraints, SubjectAltName};
use x509_cert::Certificate;

use chrono::{DateTime, Utc};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum X509Error {
    #[error("DER decode failed: {0}")]
    Der(String),
    #[error("validity ends before it starts")]
    InvertedValidity,
}

impl From<der::Error> for X509Error {
    fn from(e: der::Error) -> Self {
        X509Error::Der(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyInfo {
    /// `RSA`, `EC`, `Ed25519`, `Ed448`, `DSA` or the dotted OID.
    pub algorithm: String,
    /// Zero when the size could not be determined.
    pub size_bits: u32,
    /// Named curve for EC keys.
    pub curve: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCertificate {
    pub subject: String,
    pub issuer: String,
    pub subject_der: Vec<u8>,
    pub issuer_der: Vec<u8>,
    pub serial: String,
    /// Conventional name, or the dotted OID when unrecognized.
    pub signature_algorithm: String,
    pub signature_oid: String,
    pub public_key: PublicKeyInfo,
    pub not_before: DateTime<Utc>,
    pub not_after: DateTime<Utc>,
    pub san: Vec<String>,
    pub is_ca: bool,
    /// Hex SHA-256 of the DER encoding.
    pub fingerprint: String,
}

impl ParsedCertificate {
    pub fn is_self_issued(&self) -> bool {
        self.subject_der == self.issuer_der
    }

    pub fn validity_secs(&self) -> i64 {
        (self.not_after - self.not_before).num_seconds()
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

pub fn hex(data: &[u8]) -> String {
    data.iter().map(|b| format!("{b:02x}")).collect()
}

const SIGNATURE_ALGORITHMS: &[(&str, &str)] = &[
    ("1.2.840.113549.1.1.2", "md2WithRSAEncryption"),
    ("1.2.840.113549.1.1.4", "md5WithRSAEncryption"),
    ("1.2.840.113549.1.1.5", "sha1WithRSAEncryption"),
    ("1.3.14.3.2.29", "sha1WithRSASignature"),
    ("1.2.840.113549.1.1.10", "rsassaPss"),
    ("1.2.840.113549.1.1.11", "sha256WithRSAEncryption"),
    ("1.2.840.113549.1.1.12", "sha384WithRSAEncryption"),
    ("1.2.840.113549.1.1.13", "sha512WithRSAEncryption"),
    ("1.2.840.113549.1.1.14", "sha224WithRSAEncryption"),
    ("1.2.840.10045.4.1", "ecdsa-with-SHA1"),
    ("1.2.840.10045.4.3.1", "ecdsa-with-SHA224"),
    ("1.2.840.10045.4.3.2", "ecdsa-with-SHA256"),
    ("1.2.840.10045.4.3.3", "ecdsa-with-SHA384"),
    ("1.2.840.10045.4.3.4", "ecdsa-with-SHA512"),
    ("1.2.840.10040.4.3", "dsa-with-sha1"),
    ("2.16.840.1.101.3.4.3.2", "dsa-with-sha256"),
    ("1.3.101.112", "Ed25519"),
    ("1.3.101.113", "Ed448"),
    ("1.2.156.10197.1.501", "SM2-with-SM3"),
];

const CURVES: &[(&str, &str, u32)] = &[
    ("1.2.840.10045.3.1.1", "P-192", 192),
    ("1.3.132.0.33", "P-224", 224),
    ("1.2.840.10045.3.1.7", "P-256", 256),
    ("1.3.132.0.34", "P-384", 384),
    ("1.3.132.0.35", "P-521", 521),
    ("1.3.132.0.10", "secp256k1", 256),
    ("1.2.156.10197.1.301", "SM2", 256),
];

const OID_RSA: &str = "1.2.840.113549.1.1.1";
const OID_EC: &str = "1.2.840.10045.2.1";
const OID_DSA: &str = "1.2.840.10040.4.1";

pub fn signature_algorithm_name(oid: &str) -> Option<&'static str> {
    SIGNATURE_ALGORITHMS.iter().find(|(o, _)| *o == oid).map(|(_, n)| *n)
}

#[derive(Sequence)]
struct RsaPublicKey<'a> {
    modulus: UintRef<'a>,
    _exponent: UintRef<'a>,
}

#[derive(Sequence)]
struct DsaParams<'a> {
    p: UintRef<'a>,
    _q: UintRef<'a>,
    _g: UintRef<'a>,
}

fn bit_len(be: &[u8]) -> u32 {
    match be.iter().position(|b| *b != 0) {
        Some(i) => (be.len() - i) as u32 * 8 - be[i].leading_zeros(),
        None => 0,
    }
}

fn public_key_info(cert: &Certificate) -> PublicKeyInfo {
    let spki = &cert.tbs_certificate.subject_public_key_info;
    let oid = spki.algorithm.oid.to_string();
    let key = spki.subject_public_key.raw_bytes();
    match oid.as_str() {
        OID_RSA => PublicKeyInfo {
            algorithm: "RSA".into(),
            size_bits: RsaPublicKey::from_der(key).map(|k| bit_len(k.modulus.as_bytes())).unwrap_or(0),
            curve: None,
        },
        OID_EC => {
            let curve_oid = spki
                .algorithm
                .parameters
                .as_ref()
                .and_then(|p| p.decode_as::<ObjectIdentifier>().ok())
                .map(|o| o.to_string());
            let known = curve_oid
                .as_deref()
                .and_then(|c| CURVES.iter().find(|(o, _, _)| *o == c));
            let (curve, size_bits) = match known {
                Some((_, name, bits)) => (Some(name.to_string()), *bits),
                // Uncompressed point: 04 || X || Y.
                None => (curve_oid, key.len().saturating_sub(1) as u32 / 2 * 8),
            };
            PublicKeyInfo {
                algorithm: "EC".into(),
                size_bits,
                curve,
            }
        }
        "1.3.101.112" => PublicKeyInfo {
            algorithm: "Ed25519".into(),
            size_bits: 256,
            curve: None,
        },
        "1.3.101.113" => PublicKeyInfo {
            algorithm: "Ed448".into(),
            size_bits: 456,
            curve: None,
        },
        OID_DSA => PublicKeyInfo {
            algorithm: "DSA".into(),
            size_bits: spki
                .algorithm
                .parameters
                .as_ref()
                .and_then(|p| p.to_der().ok())
                .and_then(|d| DsaParams::from_der(&d).ok().map(|p| bit_len(p.p.as_bytes())))
                .unwrap_or(0),
            curve: None,
        },
        _ => PublicKeyInfo {
            algorithm: oid,
            size_bits: 0,
            curve: None,
        },
    }
}

fn time_of(t: &x509_cert::time::Time) -> DateTime<Utc> {
    let d = t.to_unix_duration();
    DateTime::from_timestamp(d.as_secs() as i64, d.subsec_nanos()).unwrap_or(DateTime::<Utc>::MAX_UTC)
}

pub fn parse_certificate(der_bytes: &[u8]) -> Result<ParsedCertificate, X509Error> {
    let cert = Certificate::from_der(der_bytes)?;
    let tbs = &cert.tbs_certificate;
    let not_before = time_of(&tbs.validity.not_before);
    let not_after = time_of(&tbs.validity.not_after);
    if not_after < not_before {
        return Err(X509Error::InvertedValidity);
    }
    let signature_oid = cert.signature_algorithm.oid.to_string();
    let signature_algorithm = signature_algorithm_name(&signature_oid)
        .map(String::from)
        .unwrap_or_else(|| signature_oid.clone());
    let mut san = Vec::new();
    let mut is_ca = false;
    for ext in tbs.extensions.iter().flatten() {
        match ext.extn_id.to_string().as_str() {
            "2.5.29.17" => {
                if let Ok(names) = SubjectAltName::from_der(ext.extn_value.as_bytes()) {
                    for n in names.0 {
                        match n {
                            GeneralName::DnsName(d) => san.push(d.as_str().to_string()),
                            GeneralName::IpAddress(ip) => san.push(format!("ip:{}", hex(ip.as_bytes()))),
                            _ => {}
                        }
                    }
                }
            }
            "2.5.29.19" => {
                if let Ok(bc) = BasicConstraints::from_der(ext.extn_value.as_bytes()) {
                    is_ca = bc.ca;
                }
            }
            _ => {}
        }
    }
    Ok(ParsedCertificate {
        subject: tbs.subject.to_string(),
        issuer: tbs.issuer.to_string(),
        subject_der: tbs.subject.to_der()?,
        issuer_der: tbs.issuer.to_der()?,
        serial: hex(tbs.serial_number.as_bytes()),
        signature_algorithm,
        signature_oid,
        public_key: public_key_info(&cert),
        not_before,
        not_after,
        san,
        is_ca,
        fingerprint: sha256_hex(der_bytes),
    })
}

/// DER of the subject name of a certificate, for building trust stores
/// from root certificates.
pub fn subject_der(der_bytes: &[u8]) -> Result<Vec<u8>, X509Error> {
    Ok(Certificate::from_der(der_bytes)?.tbs_certificate.subject.to_der()?)
}
