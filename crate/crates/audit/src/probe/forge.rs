//! Local CA and forged leaves that mirror the genuine server certificate.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;
use std::sync::Arc;

use der::{Decode, Tag, Tagged};
use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, DnValue, ExtendedKeyUsagePurpose, IsCa, KeyPair,
    KeyUsagePurpose, SanType,
};
use rustls::client::danger::ServerCertVerifier;
use rustls::client::WebPkiServerVerifier;
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::RootCertStore;
use x509_cert::ext::pkix::name::GeneralName;
use x509_cert::ext::pkix::SubjectAltName;
use x509_cert::Certificate;

use crate::error::{self, AuditError};

pub const CA_KEY: &str = "ca_key.pem";
pub const CA_CERT: &str = "ca_cert.pem";

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("upstream certificate does not parse: {0}")]
    Parse(#[from] der::Error),
    #[error("certificate generation failed: {0}")]
    Generate(#[from] rcgen::Error),
}

/// Subject, validity window and key usage never change, so the CA
/// certificate can be rebuilt from the stored key alone.
fn ca_params() -> CertificateParams {
    let mut p = CertificateParams::default();
    let mut dn = DistinguishedName::new();
    dn.push(DnType::OrganizationName, "lifecycle-audit");
    dn.push(DnType::CommonName, "lifecycle-audit interception CA");
    p.distinguished_name = dn;
    p.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    p.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign, KeyUsagePurpose::DigitalSignature];
    p.not_before = rcgen::date_time_ymd(2024, 1, 1);
    p.not_after = rcgen::date_time_ymd(2044, 1, 1);
    p
}

pub struct LocalCa {
    key: KeyPair,
    issuer: rcgen::Certificate,
    /// Certificate presented in forged chains.
    cert_der: CertificateDer<'static>,
}

#[derive(Clone)]
pub struct ForgedLeaf {
    /// Leaf followed by the local CA.
    pub chain: Vec<CertificateDer<'static>>,
    pub key: Arc<PrivatePkcs8KeyDer<'static>>,
}

impl ForgedLeaf {
    pub fn private_key(&self) -> PrivateKeyDer<'static> {
        PrivateKeyDer::Pkcs8(self.key.as_ref().clone_key())
    }
}

impl LocalCa {
    pub fn generate() -> Result<Self, ForgeError> {
        let key = KeyPair::generate()?;
        let issuer = ca_params().self_signed(&key)?;
        let cert_der = issuer.der().clone();
        Ok(LocalCa { key, issuer, cert_der })
    }

    /// Loads the CA from `dir`, creating the key on first use. A missing
    /// certificate is rebuilt from the key.
    pub fn load_or_create(dir: &Path) -> Result<Self, AuditError> {
        error::create_dir(dir)?;
        let key_path = dir.join(CA_KEY);
        let cert_path = dir.join(CA_CERT);
        let key = if key_path.is_file() {
            KeyPair::from_pem(&error::read_text(&key_path)?).map_err(|e| AuditError::invalid(&key_path, e))?
        } else {
            let k = KeyPair::generate().map_err(|e| AuditError::Probe(e.to_string()))?;
            error::write_atomic(&key_path, k.serialize_pem().as_bytes())?;
            k
        };
        let issuer = ca_params()
            .self_signed(&key)
            .map_err(|e| AuditError::Probe(e.to_string()))?;
        let cert_der = if cert_path.is_file() {
            CertificateDer::from_pem_file(&cert_path).map_err(|e| AuditError::invalid(&cert_path, e))?
        } else {
            error::write_atomic(&cert_path, issuer.pem().as_bytes())?;
            issuer.der().clone()
        };
        Ok(LocalCa { key, issuer, cert_der })
    }

    pub fn cert_der(&self) -> &CertificateDer<'static> {
        &self.cert_der
    }

    /// A leaf with the upstream leaf's subject, SANs and validity window,
    /// signed by this CA under a fresh key.
    pub fn forge(&self, upstream_leaf: &[u8]) -> Result<ForgedLeaf, ForgeError> {
        let up = Certificate::from_der(upstream_leaf)?;
        let tbs = &up.tbs_certificate;
        let mut p = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        for rdn in tbs.subject.0.iter() {
            for atv in rdn.0.iter() {
                if let Some(v) = string_value(&atv.value) {
                    let arcs: Vec<u64> = atv.oid.arcs().map(u64::from).collect();
                    dn.push(DnType::CustomDnType(arcs), DnValue::Utf8String(v));
                }
            }
        }
        p.distinguished_name = dn;
        p.subject_alt_names = upstream_sans(&up)?;
        p.not_before = at(tbs.validity.not_before.to_unix_duration().as_secs());
        p.not_after = at(tbs.validity.not_after.to_unix_duration().as_secs());
        p.is_ca = IsCa::NoCa;
        p.key_usages = vec![KeyUsagePurpose::DigitalSignature, KeyUsagePurpose::KeyEncipherment];
        p.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
        p.use_authority_key_identifier_extension = true;
        let leaf_key = KeyPair::generate()?;
        let leaf = p.signed_by(&leaf_key, &self.issuer, &self.key)?;
        Ok(ForgedLeaf {
            chain: vec![leaf.der().clone(), self.cert_der.clone()],
            key: Arc::new(PrivatePkcs8KeyDer::from(leaf_key.serialize_der())),
        })
    }
}

fn at(unix_secs: u64) -> time::OffsetDateTime {
    time::OffsetDateTime::from_unix_timestamp(unix_secs as i64).unwrap_or(time::OffsetDateTime::UNIX_EPOCH)
}

fn string_value(v: &der::Any) -> Option<String> {
    match v.tag() {
        Tag::Utf8String | Tag::PrintableString | Tag::Ia5String | Tag::TeletexString | Tag::VisibleString => {
            std::str::from_utf8(v.value()).ok().map(String::from)
        }
        _ => None,
    }
}

fn upstream_sans(cert: &Certificate) -> Result<Vec<SanType>, ForgeError> {
    let mut out = Vec::new();
    for ext in cert.tbs_certificate.extensions.iter().flatten() {
        if ext.extn_id.to_string() != "2.5.29.17" {
            continue;
        }
        let names = SubjectAltName::from_der(ext.extn_value.as_bytes())?;
        for n in names.0 {
            match n {
                GeneralName::DnsName(d) => {
                    if let Ok(s) = rcgen::Ia5String::try_from(d.as_str()) {
                        out.push(SanType::DnsName(s));
                    }
                }
                GeneralName::IpAddress(ip) => match ip.as_bytes().len() {
                    4 => {
                        let b: [u8; 4] = ip.as_bytes().try_into().expect("length checked");
                        out.push(SanType::IpAddress(IpAddr::V4(Ipv4Addr::from(b))));
                    }
                    16 => {
                        let b: [u8; 16] = ip.as_bytes().try_into().expect("length checked");
                        out.push(SanType::IpAddress(IpAddr::V6(Ipv6Addr::from(b))));
                    }
                    _ => {}
                },
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Validates `chain` for `host` against `roots` the way a strict client
/// would.
pub fn verify_chain(chain: &[CertificateDer<'_>], host: &str, roots: RootCertStore) -> Result<(), rustls::Error> {
    let provider = Arc::new(rustls::crypto::ring::default_provider());
    let verifier = WebPkiServerVerifier::builder_with_provider(Arc::new(roots), provider)
        .build()
        .map_err(|e| rustls::Error::General(e.to_string()))?;
    let name = ServerName::try_from(host.to_string()).map_err(|e| rustls::Error::General(e.to_string()))?;
    let (leaf, rest) = chain.split_first().ok_or(rustls::Error::NoCertificatesPresented)?;
    verifier
        .verify_server_cert(leaf, rest, &name, &[], UnixTime::now())
        .map(|_| ())
}
