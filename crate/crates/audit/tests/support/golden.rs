//! The golden corpus: four devices across the four phases, with DNS,
//! TLS 1.2 and 1.3, plaintext HTTP carrying planted PII, media,
//! compressed and medium-entropy payloads, weak and self-signed
//! certificates, and one device captured before and after an update.

use std::net::Ipv4Addr;
use std::path::Path;

use super::certs::{build, CertSpec, Issuer};
use super::net::{noise, Endpoints, Side, Trace};
use super::{gzip, http_request, http_response, public_root_name, tls12_session, tls13_session};

pub const RESOLVER: Ipv4Addr = Ipv4Addr::new(192, 168, 8, 1);
pub const CAM: Ipv4Addr = Ipv4Addr::new(192, 168, 8, 21);
pub const PLUG: Ipv4Addr = Ipv4Addr::new(192, 168, 8, 22);
pub const HUM: Ipv4Addr = Ipv4Addr::new(192, 168, 8, 23);
pub const SPK: Ipv4Addr = Ipv4Addr::new(192, 168, 8, 24);

pub const MI: Ipv4Addr = Ipv4Addr::new(120, 92, 65, 10);
pub const ALI: Ipv4Addr = Ipv4Addr::new(47, 96, 10, 20);
pub const GOOGLE: Ipv4Addr = Ipv4Addr::new(216, 239, 35, 4);
pub const TUYA: Ipv4Addr = Ipv4Addr::new(18, 196, 20, 30);
pub const BAIDU: Ipv4Addr = Ipv4Addr::new(180, 76, 76, 76);
pub const BARE: Ipv4Addr = Ipv4Addr::new(52, 1, 2, 3);

pub const OWNER: &str = "Wang Xiaoming";
pub const OWNER_ZH: &str = "王小明";
pub const SSID: &str = "HomeWiFi-5G";
pub const EMAIL: &str = "alice.w@example.com";

const MANIFEST: &str = r#"[[devices]]
device_id = "cam-01"
name = "Indoor camera"
category = "camera"
brand = "Xiaomi"
ip = ["192.168.8.21"]

[[devices]]
device_id = "plug-01"
name = "Smart plug"
category = "plug"
brand = "Tuya"
ip = ["192.168.8.22"]
first_party = { domains = ["tuyaeu.com"] }

[[devices]]
device_id = "hum-01"
name = "Humidifier"
category = "humidifier"
brand = "Deerma"
ip = ["192.168.8.23"]

[[devices]]
device_id = "spk-01"
name = "Speaker"
category = "speaker"
brand = "Baidu"
ip = ["192.168.8.24"]
"#;

const CONFIG: &str = r#"policy = "policy.toml"
pii_catalog = "pii_catalog.toml"

[geo]
snapshot = "geo.csv"
"#;

const GEO: &str = "# snapshot=2026-09-01
start_ip,end_ip,country,asn,organization
18.196.0.0,18.197.255.255,DE,16509,\"Amazon.com, Inc.\"
47.96.0.0,47.96.255.255,CN,37963,\"Hangzhou Alibaba Advertising Co.,Ltd.\"
52.0.0.0,52.3.255.255,US,14618,\"Amazon.com, Inc.\"
120.92.0.0,120.92.255.255,CN,59019,Xiaomi Communications Co Ltd
180.76.0.0,180.76.255.255,CN,38365,\"Beijing Baidu Netcom Science and Technology Co., Ltd.\"
216.239.32.0,216.239.63.255,US,15169,Google LLC
";

const POLICY: &str = r#"[[entries]]
pattern = { domain_suffix = "aliyuncs.com" }
note = "vendor privacy policy, cloud hosting section"

[[entries]]
pattern = { organization = "Google" }
note = "vendor privacy policy, time service"
scope = ["camera"]
"#;

const PII: &str = r#"label = "test catalog"

[[literals]]
value = "Wang Xiaoming"
label = "owner_name"

[[literals]]
value = "王小明"
label = "owner_name"

[[literals]]
value = "HomeWiFi-5G"
label = "ssid"

[[patterns]]
regex = '[A-Za-z0-9._+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}'
label = "email"
"#;

fn ep(dev: Ipv4Addr, port: u16, srv: Ipv4Addr, sport: u16) -> Endpoints {
    Endpoints::new(dev, port, srv, sport)
}

fn clean_leaf(serial: u64, cn: &str) -> Vec<u8> {
    let mut s = CertSpec::leaf(serial, cn, Issuer::Raw(public_root_name("ISRG Root X1")));
    s.not_before = (2026, 6, 1);
    s.not_after = (2026, 8, 30);
    build(&s)
}

fn weak_chain() -> Vec<Vec<u8>> {
    let mut leaf = CertSpec::leaf(301, "iot.aliyuncs.com", Issuer::Cn("Deerma Device CA".into()));
    leaf.sha1 = true;
    leaf.rsa_bits = 1024;
    leaf.not_before = (2025, 1, 1);
    leaf.not_after = (2027, 1, 1);
    let mut ca = CertSpec::leaf(302, "Deerma Device CA", Issuer::SelfIssued);
    ca.ca = true;
    ca.san.clear();
    ca.not_after = (2040, 1, 1);
    vec![build(&leaf), build(&ca)]
}

fn self_signed_long() -> Vec<u8> {
    let mut s = CertSpec::leaf(401, "mqtt.plug.local", Issuer::SelfIssued);
    s.not_before = (2020, 1, 1);
    s.not_after = (2120, 1, 1);
    build(&s)
}

fn write_trace(dir: &Path, name: &str, t: Trace) {
    std::fs::write(dir.join("captures").join(name), t.pcap()).unwrap();
}

fn cam(dir: &Path) {
    let leaf = clean_leaf(101, "api.io.mi.com");
    let mut t = Trace::new(1_780_000_000);
    t.dns(CAM, RESOLVER, 1, "api.io.mi.com", &[MI]);
    t.tcp(
        &ep(CAM, 50001, MI, 443),
        &tls12_session("api.io.mi.com", &[leaf.clone()], &[(Side::Device, 6000), (Side::Server, 3000)], 11),
    );
    let body = format!("{{\"owner\":\"{OWNER}\",\"contact\":\"{EMAIL}\",\"model\":\"cam.v3\"}}");
    t.tcp(
        &ep(CAM, 50002, MI, 80),
        &[
            (Side::Device, http_request("POST", "api.io.mi.com", "/bind", "application/json", body.as_bytes())),
            (Side::Server, http_response("application/json", b"{\"code\":0}")),
        ],
    );
    write_trace(dir, "cam-01-setup.pcap", t);

    let mut t = Trace::new(1_780_000_600);
    let mut jpeg = vec![0xFF, 0xD8, 0xFF, 0xE0];
    jpeg.extend(noise(12, 20_000));
    t.tcp(
        &ep(CAM, 50010, ALI, 80),
        &[
            (Side::Device, http_request("GET", "47.96.10.20", "/snap.jpg", "text/plain", b"")),
            (Side::Server, http_response("image/jpeg", &jpeg)),
        ],
    );
    t.tcp(
        &ep(CAM, 50011, MI, 443),
        &tls12_session("api.io.mi.com", &[leaf.clone()], &[(Side::Device, 30_000)], 13),
    );
    write_trace(dir, "cam-01-interaction.pcap", t);

    let mut t = Trace::new(1_780_001_200);
    t.dns(CAM, RESOLVER, 2, "time.google.com", &[GOOGLE]);
    let ntp = ep(CAM, 50020, GOOGLE, 123);
    t.push(super::net::udp_datagram(&ntp, Side::Device, &noise(14, 48)));
    t.push(super::net::udp_datagram(&ntp, Side::Server, &noise(15, 48)));
    t.tcp(
        &ep(CAM, 50021, MI, 443),
        &tls12_session("api.io.mi.com", &[leaf.clone()], &[(Side::Device, 400)], 16),
    );
    write_trace(dir, "cam-01-idle.pcap", t);

    let mut t = Trace::new(1_780_001_800);
    t.tcp(
        &ep(CAM, 50030, MI, 443),
        &tls12_session("api.io.mi.com", &[leaf], &[(Side::Device, 900)], 17),
    );
    write_trace(dir, "cam-01-deletion.pcap", t);
}

fn plug(dir: &Path) {
    let mut t = Trace::new(1_780_010_000);
    t.dns(PLUG, RESOLVER, 3, "a2.tuyaeu.com", &[TUYA]);
    let form = "ssid=HomeWiFi-5G&email=alice.w%40example.com&name=Wang+Xiaoming";
    t.tcp(
        &ep(PLUG, 51001, TUYA, 80),
        &[
            (
                Side::Device,
                http_request("POST", "a2.tuyaeu.com", "/activate", "application/x-www-form-urlencoded", form.as_bytes()),
            ),
            (Side::Server, http_response("text/plain", b"ok")),
        ],
    );
    write_trace(dir, "plug-01-setup.pcap", t);

    let mut t = Trace::new(1_780_010_600);
    t.tcp(
        &ep(PLUG, 51010, TUYA, 443),
        &tls13_session("a2.tuyaeu.com", &[(Side::Device, 2000), (Side::Server, 1500)], 21),
    );
    write_trace(dir, "plug-01-interaction.pcap", t);

    let mut t = Trace::new(1_780_011_200);
    t.tcp(
        &ep(PLUG, 51020, BARE, 8883),
        &tls12_session("mqtt.plug.local", &[self_signed_long()], &[(Side::Device, 700)], 22),
    );
    write_trace(dir, "plug-01-idle.pcap", t);

    let mut t = Trace::new(1_780_011_800);
    t.tcp(&ep(PLUG, 51030, TUYA, 443), &tls13_session("a2.tuyaeu.com", &[(Side::Device, 300)], 23));
    write_trace(dir, "plug-01-deletion.pcap", t);
}

fn hum(dir: &Path) {
    let text = format!("用户={OWNER_ZH};型号=jsq5;");
    let (gbk, _, _) = encoding_rs::GBK.encode(&text);
    let mut t = Trace::new(1_780_020_000);
    t.dns(HUM, RESOLVER, 4, "iot.aliyuncs.com", &[ALI]);
    t.tcp(
        &ep(HUM, 52001, ALI, 80),
        &[
            (Side::Device, http_request("POST", "iot.aliyuncs.com", "/reg", "text/plain; charset=gbk", &gbk)),
            (Side::Server, http_response("text/plain", b"ok")),
        ],
    );
    write_trace(dir, "hum-01-setup.pcap", t);

    let mut t = Trace::new(1_780_020_600);
    t.tcp(
        &ep(HUM, 52010, ALI, 443),
        &tls12_session("iot.aliyuncs.com", &weak_chain(), &[(Side::Device, 5000), (Side::Server, 800)], 31),
    );
    write_trace(dir, "hum-01-interaction.pcap", t);

    let log: String = (0..400).map(|i| format!("t={i} humidity={} level=2\n", 40 + i % 17)).collect();
    let mut t = Trace::new(1_780_021_200);
    t.tcp(&ep(HUM, 52020, ALI, 9000), &[(Side::Device, gzip(log.as_bytes()))]);
    write_trace(dir, "hum-01-idle.pcap", t);

    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(noise(33, 3000));
    let mut t = Trace::new(1_780_021_800);
    t.tcp(&ep(HUM, 52030, ALI, 7000), &[(Side::Device, b64.into_bytes())]);
    write_trace(dir, "hum-01-deletion.pcap", t);
}

fn spk(dir: &Path) {
    let leaf = clean_leaf(501, "iot.baidu.com");
    let mut t = Trace::new(1_780_030_000);
    t.dns(SPK, RESOLVER, 5, "iot.baidu.com", &[BAIDU]);
    t.tcp(
        &ep(SPK, 53001, BAIDU, 443),
        &tls12_session("iot.baidu.com", &[leaf], &[(Side::Device, 2500), (Side::Server, 2500)], 41),
    );
    write_trace(dir, "spk-01-setup.pcap", t);

    let text = format!("network={SSID}\nvolume=7\nwake=xiaodu\n").repeat(3);
    let mut t = Trace::new(1_780_030_600);
    t.dns(SPK, RESOLVER, 6, "iot.baidu.com", &[BAIDU]);
    t.tcp(
        &ep(SPK, 53010, BAIDU, 80),
        &[
            (Side::Device, http_request("POST", "iot.baidu.com", "/status", "text/plain", text.as_bytes())),
            (Side::Server, http_response("text/plain", b"ok")),
        ],
    );
    write_trace(dir, "spk-01-idle-pre.pcap", t);

    let mut t = Trace::new(1_780_040_600);
    t.dns(SPK, RESOLVER, 7, "iot.baidu.com", &[BAIDU]);
    t.tcp(
        &ep(SPK, 53020, BAIDU, 443),
        &tls13_session("iot.baidu.com", &[(Side::Device, 900), (Side::Server, 300)], 42),
    );
    write_trace(dir, "spk-01-idle-post.pcap", t);
}

fn captures_toml() -> String {
    let mut s = String::new();
    for dev in ["cam-01", "plug-01", "hum-01"] {
        for (phase, file) in [("SETUP", "setup"), ("INTERACTION", "interaction"), ("IDLE", "idle"), ("DELETION", "deletion")] {
            s.push_str(&format!(
                "\n[[captures]]\ndevice_id = \"{dev}\"\nphase = \"{phase}\"\npath = \"captures/{dev}-{file}.pcap\"\n"
            ));
        }
    }
    s.push_str("\n[[captures]]\ndevice_id = \"spk-01\"\nphase = \"SETUP\"\npath = \"captures/spk-01-setup.pcap\"\n");
    for tag in ["pre", "post"] {
        s.push_str(&format!(
            "\n[[captures]]\ndevice_id = \"spk-01\"\nphase = \"IDLE\"\npath = \"captures/spk-01-idle-{tag}.pcap\"\nfirmware_tag = \"{tag}\"\n"
        ));
    }
    s
}

/// Writes the corpus into `dir` (created if needed).
pub fn write_corpus(dir: &Path) {
    std::fs::create_dir_all(dir.join("captures")).unwrap();
    std::fs::write(dir.join("manifest.toml"), format!("{MANIFEST}{}", captures_toml())).unwrap();
    std::fs::write(dir.join("config.toml"), CONFIG).unwrap();
    std::fs::write(dir.join("geo.csv"), GEO).unwrap();
    std::fs::write(dir.join("policy.toml"), POLICY).unwrap();
    std::fs::write(dir.join("pii_catalog.toml"), PII).unwrap();
    cam(dir);
    plug(dir);
    hum(dir);
    spk(dir);
}
