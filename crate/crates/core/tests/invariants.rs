use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};

use lifecycle_audit_core::capture::{LinkType, PcapWriter};
use lifecycle_audit_core::classify::{encryption_heatmap, ClassifiedBytes, Verdict};
use lifecycle_audit_core::destination::{proportion_table, sankey_links, DeviceTraffic};
use lifecycle_audit_core::entropy::{payload_entropy, Histogram};
use lifecycle_audit_core::flow::{assemble_flows, ByteMode, FlowConfig};
use lifecycle_audit_core::mitm::redact;
use lifecycle_audit_core::packet::parse_capture;
use lifecycle_audit_core::packet::synth::{eth_frame, DEVICE_MAC, GATEWAY_MAC, L4};
use lifecycle_audit_core::timeline::assign_to_windows;
use lifecycle_audit_core::{PhaseLabel, Timestamp};
use proptest::prelude::*;

proptest! {
    #[test]
    fn entropy_within_unit_interval(data in proptest::collection::vec(any::<u8>(), 0..4096)) {
        let e = payload_entropy(&data);
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn histogram_is_order_independent(mut data in proptest::collection::vec(any::<u8>(), 1..2048), split in 0usize..2048) {
        let whole = payload_entropy(&data);
        let cut = split.min(data.len());
        let mut h = Histogram::new();
        h.add(&data[cut..]);
        h.add(&data[..cut]);
        prop_assert!((h.entropy() - whole).abs() < 1e-12);
        data.reverse();
        prop_assert!((payload_entropy(&data) - whole).abs() < 1e-12);
    }

    #[test]
    fn flows_conserve_bytes(
        packets in proptest::collection::vec((0u8..4, 0u16..6, any::<bool>(), any::<bool>(), 0usize..600), 1..80)
    ) {
        let dev = IpAddr::V4(Ipv4Addr::new(192, 168, 1, 2));
        let mut w = PcapWriter::new(LinkType::ETHERNET);
        let mut payload_total = 0u64;
        for (i, (host, port, tcp, outbound, len)) in packets.iter().enumerate() {
            let srv = IpAddr::V4(Ipv4Addr::new(8, 8, 8, *host + 1));
            let payload = vec![i as u8; *len];
            payload_total += *len as u64;
            let (sport, dport) = if *outbound { (40_000 + port, 443) } else { (443, 40_000 + port) };
            let l4 = if *tcp {
                L4::Tcp { sport, dport, seq: i as u32 * 1000, ack: 0, flags: 0x18, payload: &payload }
            } else {
                L4::Udp { sport, dport, payload: &payload }
            };
            let (s, d) = if *outbound { (dev, srv) } else { (srv, dev) };
            w.push(Timestamp::from_millis(1_700_000_000_000 + i as i64), &eth_frame(DEVICE_MAC, GATEWAY_MAC, s, d, &l4));
        }
        let parsed = parse_capture(&w.finish(), "dev").unwrap();
        let stats = parsed.stats.clone();
        let flows = assemble_flows(parsed.packets, "dev", &FlowConfig::default());
        let wire: u64 = flows.iter().map(|f| f.bytes(ByteMode::Wire)).sum();
        let payload: u64 = flows.iter().map(|f| f.bytes(ByteMode::Payload)).sum();
        prop_assert_eq!(wire + stats.unflowed_bytes, stats.total_wire_bytes);
        prop_assert_eq!(payload, payload_total);
        let counted: usize = flows.iter().map(|f| f.packets.len()).sum();
        prop_assert_eq!(counted, packets.len());
    }

    #[test]
    fn window_assignment_matches_linear_scan(
        mut times in proptest::collection::vec(0i64..10_000, 0..300),
        mut cuts in proptest::collection::vec(0i64..10_000, 0..20),
    ) {
        times.sort();
        cuts.sort();
        cuts.dedup();
        let windows: Vec<(Timestamp, Timestamp)> = cuts
            .chunks_exact(2)
            .map(|c| (Timestamp::from_millis(c[0]), Timestamp::from_millis(c[1] - 1)))
            .filter(|w| w.0 <= w.1)
            .collect();
        let ts: Vec<Timestamp> = times.iter().map(|&t| Timestamp::from_millis(t)).collect();
        let a = assign_to_windows(&ts, &windows);
        for (t, got) in ts.iter().zip(&a.window_of) {
            let want = windows.iter().position(|w| w.0 <= *t && *t <= w.1);
            prop_assert_eq!(*got, want);
        }
        prop_assert_eq!(a.counts.iter().sum::<usize>() + a.residue, ts.len());
    }

    #[test]
    fn proportions_sum_to_one(
        devices in proptest::collection::vec(
            (0usize..3, proptest::collection::btree_map("[A-E][A-E]", 0u64..1_000_000, 0..5)),
            1..30,
        )
    ) {
        let traffic: Vec<DeviceTraffic> = devices
            .iter()
            .enumerate()
            .map(|(i, (cat, bytes))| DeviceTraffic {
                device_id: format!("d{i}"),
                category: ["camera", "plug", "tv"][*cat].into(),
                bytes_by_country: bytes.clone(),
            })
            .collect();
        let t = proportion_table(&traffic);
        let sums = |m: &BTreeMap<String, f64>| m.values().sum::<f64>();
        if !t.per_device_mean.overall.is_empty() {
            prop_assert!((sums(&t.per_device_mean.overall) - 1.0).abs() < 1e-9);
            prop_assert!((sums(&t.raw_bytes.overall) - 1.0).abs() < 1e-9);
        }
        for row in t.per_device_mean.per_category.values().chain(t.raw_bytes.per_category.values()) {
            prop_assert!((sums(row) - 1.0).abs() < 1e-9);
        }
        for l in sankey_links(&t) {
            prop_assert!((0.0..=1.0).contains(&l.value));
        }
    }

    #[test]
    fn heat_cells_sum_to_hundred(
        items in proptest::collection::vec((0usize..4, 0usize..2, 0usize..4, 0usize..5, 0u64..100_000), 1..60)
    ) {
        let verdicts = [Verdict::Encrypted, Verdict::Text, Verdict::Media, Verdict::Compressed, Verdict::Unknown];
        let ids = ["a", "b", "c", "d"];
        let rows: Vec<ClassifiedBytes<'_>> = items
            .iter()
            .map(|&(d, c, p, v, bytes)| ClassifiedBytes {
                device_id: ids[d],
                category: ["camera", "plug"][c],
                phase: Some(PhaseLabel::ALL[p]),
                verdict: verdicts[v],
                bytes,
            })
            .collect();
        for cell in encryption_heatmap(&rows).values().flatten() {
            let total = cell.encrypted + cell.unknown + cell.unencrypted;
            prop_assert!((total - 100.0).abs() < 1e-9);
            prop_assert!(cell.devices >= 1);
        }
    }

    #[test]
    fn redaction_keeps_length_and_hides_middle(value in "\\PC{0,40}") {
        let r = redact(&value);
        let n = value.chars().count();
        prop_assert_eq!(r.chars().count(), n);
        if n > 2 {
            prop_assert_eq!(r.chars().next(), value.chars().next());
            prop_assert_eq!(r.chars().last(), value.chars().last());
            prop_assert!(r.chars().skip(1).take(n - 2).all(|c| c == '*'));
        } else {
            prop_assert!(r.chars().all(|c| c == '*'));
        }
    }
}
