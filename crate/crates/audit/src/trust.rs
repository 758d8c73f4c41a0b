//! Trust anchors: the pinned public root bundle plus optional local PEM
//! roots, in the two shapes the toolkit needs (subject names for the
//! static audit, a rustls root store for live validation).

use std::path::Path;

use der::asn1::AnyRef;
use der::{Encode, Tag};
use lifecycle_audit_core::tls_audit::TrustStore;
use lifecycle_audit_core::x509;
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::CertificateDer;
use rustls::RootCertStore;

use crate::error::AuditError;

pub const PINNED_LABEL: &str = "webpki-roots 1.0";

/// Trust-anchor subjects are stored without their outer SEQUENCE header;
/// certificates carry it.
fn wrap_name(inner: &[u8]) -> Option<Vec<u8>> {
    AnyRef::new(Tag::Sequence, inner).ok()?.to_der().ok()
}

pub fn load_pem_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, AuditError> {
    let certs: Result<Vec<_>, _> = CertificateDer::pem_file_iter(path)
        .map_err(|e| AuditError::invalid(path, e))?
        .collect();
    let certs = certs.map_err(|e| AuditError::invalid(path, e))?;
    if certs.is_empty() {
        return Err(AuditError::invalid(path, "no certificates in PEM file"));
    }
    Ok(certs)
}

pub fn pinned_subjects() -> Vec<Vec<u8>> {
    webpki_roots::TLS_SERVER_ROOTS
        .iter()
        .filter_map(|a| wrap_name(a.subject.as_ref()))
        .collect()
}

/// Subject-name trust store for the certificate audit.
pub fn audit_trust_store(extra: &[CertificateDer<'_>]) -> TrustStore {
    let mut subjects = pinned_subjects();
    subjects.extend(extra.iter().filter_map(|c| x509::subject_der(c).ok()));
    let label = if extra.is_empty() {
        PINNED_LABEL.to_string()
    } else {
        format!("{PINNED_LABEL} + {} local roots", extra.len())
    };
    TrustStore::new(label, subjects)
}

/// rustls root store: pinned bundle plus `extra`.
pub fn root_store(extra: &[CertificateDer<'_>]) -> Result<RootCertStore, rustls::Error> {
    let mut store = RootCertStore {
        roots: webpki_roots::TLS_SERVER_ROOTS.to_vec(),
    };
    for c in extra {
        store.add(c.clone().into_owned())?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use der::Decode;
    use x509_cert::name::Name;

    #[test]
    fn pinned_subjects_decode_as_names() {
        let subjects = pinned_subjects();
        assert_eq!(subjects.len(), webpki_roots::TLS_SERVER_ROOTS.len());
        assert!(subjects.len() > 100);
        let names: Vec<String> = subjects.iter().map(|s| Name::from_der(s).unwrap().to_string()).collect();
        assert!(names.iter().any(|n| n.contains("ISRG Root X1")), "{:?}", &names[..3]);
    }
}
