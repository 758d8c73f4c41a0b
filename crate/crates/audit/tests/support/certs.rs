//! Minimal DER writer for certificates with chosen algorithms, key sizes
//! and validity. Signatures are filler; nothing here is verifiable.

fn tlv(tag: u8, content: &[u8]) -> Vec<u8> {
    let mut out = vec![tag];
    let n = content.len();
    if n < 0x80 {
        out.push(n as u8);
    } else {
        let len = n.to_be_bytes();
        let skip = len.iter().take_while(|b| **b == 0).count();
        out.push(0x80 | (len.len() - skip) as u8);
        out.extend_from_slice(&len[skip..]);
    }
    out.extend_from_slice(content);
    out
}

fn seq(parts: &[Vec<u8>]) -> Vec<u8> {
    tlv(0x30, &parts.concat())
}

fn oid(arcs: &[u64]) -> Vec<u8> {
    let mut body = vec![(arcs[0] * 40 + arcs[1]) as u8];
    for &a in &arcs[2..] {
        let mut chunk = vec![(a & 0x7f) as u8];
        let mut v = a >> 7;
        while v > 0 {
            chunk.push(0x80 | (v & 0x7f) as u8);
            v >>= 7;
        }
        chunk.reverse();
        body.extend(chunk);
    }
    tlv(0x06, &body)
}

fn uint(bytes: &[u8]) -> Vec<u8> {
    let skip = bytes.iter().take_while(|b| **b == 0).count().min(bytes.len().saturating_sub(1));
    let mut v = bytes[skip..].to_vec();
    if v.first().is_some_and(|b| b & 0x80 != 0) {
        v.insert(0, 0);
    }
    tlv(0x02, &v)
}

const NULL: [u8; 2] = [0x05, 0x00];

/// `CN=<cn>` as a full Name encoding.
pub fn name_der(cn: &str) -> Vec<u8> {
    seq(&[tlv(0x31, &seq(&[oid(&[2, 5, 4, 3]), tlv(0x0c, cn.as_bytes())]))])
}

fn time(y: i32, m: u32, d: u32) -> Vec<u8> {
    if (1950..2050).contains(&y) {
        tlv(0x17, format!("{:02}{m:02}{d:02}000000Z", y % 100).as_bytes())
    } else {
        tlv(0x18, format!("{y:04}{m:02}{d:02}000000Z").as_bytes())
    }
}

#[derive(Clone, Debug)]
pub enum Issuer {
    /// Issuer equals subject.
    SelfIssued,
    Cn(String),
    /// Pre-encoded Name.
    Raw(Vec<u8>),
}

#[derive(Clone, Debug)]
pub struct CertSpec {
    pub serial: u64,
    pub subject_cn: String,
    pub issuer: Issuer,
    pub sha1: bool,
    pub rsa_bits: usize,
    pub not_before: (i32, u32, u32),
    pub not_after: (i32, u32, u32),
    pub san: Vec<String>,
    pub ca: bool,
}

impl CertSpec {
    pub fn leaf(serial: u64, cn: &str, issuer: Issuer) -> Self {
        CertSpec {
            serial,
            subject_cn: cn.into(),
            issuer,
            sha1: false,
            rsa_bits: 2048,
            not_before: (2024, 1, 1),
            not_after: (2024, 12, 1),
            san: vec![cn.into()],
            ca: false,
        }
    }
}

/// Deterministic filler derived from the serial.
fn filler(seed: u64, n: usize) -> Vec<u8> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

pub fn build(spec: &CertSpec) -> Vec<u8> {
    let sig_oid: &[u64] = if spec.sha1 {
        &[1, 2, 840, 113549, 1, 1, 5]
    } else {
        &[1, 2, 840, 113549, 1, 1, 11]
    };
    let alg = seq(&[oid(sig_oid), NULL.to_vec()]);
    let subject = name_der(&spec.subject_cn);
    let issuer = match &spec.issuer {
        Issuer::SelfIssued => subject.clone(),
        Issuer::Cn(cn) => name_der(cn),
        Issuer::Raw(n) => n.clone(),
    };
    let mut modulus = filler(spec.serial ^ 0xA5A5, spec.rsa_bits / 8);
    modulus[0] |= 0x80;
    let rsa_key = seq(&[uint(&modulus), uint(&[0x01, 0x00, 0x01])]);
    let mut bits = vec![0u8];
    bits.extend(rsa_key);
    let spki = seq(&[seq(&[oid(&[1, 2, 840, 113549, 1, 1, 1]), NULL.to_vec()]), tlv(0x03, &bits)]);
    let (y0, m0, d0) = spec.not_before;
    let (y1, m1, d1) = spec.not_after;
    let mut exts = Vec::new();
    if !spec.san.is_empty() {
        let names: Vec<u8> = spec.san.iter().flat_map(|n| tlv(0x82, n.as_bytes())).collect();
        exts.push(seq(&[oid(&[2, 5, 29, 17]), tlv(0x04, &tlv(0x30, &names))]));
    }
    if spec.ca {
        let bc = seq(&[tlv(0x01, &[0xff])]);
        exts.push(seq(&[oid(&[2, 5, 29, 19]), tlv(0x01, &[0xff]), tlv(0x04, &bc)]));
    }
    let mut tbs_parts = vec![
        tlv(0xa0, &uint(&[2])),
        uint(&spec.serial.to_be_bytes()),
        alg.clone(),
        issuer,
        seq(&[time(y0, m0, d0), time(y1, m1, d1)]),
        subject,
        spki,
    ];
    if !exts.is_empty() {
        tbs_parts.push(tlv(0xa3, &seq(&exts)));
    }
    let tbs = seq(&tbs_parts);
    let mut sig = vec![0u8];
    sig.extend(filler(spec.serial, 256));
    seq(&[tbs, alg, tlv(0x03, &sig)])
}

pub fn pem(der: &[u8]) -> String {
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(der);
    let mut out = String::from("-----BEGIN CERTIFICATE-----\n");
    for line in b64.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(line).unwrap());
        out.push('\n');
    }
    out.push_str("-----END CERTIFICATE-----\n");
    out
}
