use proptest::prelude::*;

use aqlog_core::blocks::{block_digest, AirQualityBlock, SensorTable, Variable};
use aqlog_core::merkle::{rebuild_root, verify_inclusion, MerkleLog};
use aqlog_core::monitor::{Monitor, MonitorSettings};
use aqlog_core::sim::{run, SimConfig};
use aqlog_core::verifier::{audit, decode_stream, IngestMessage, Reason, Verifier};
use aqlog_core::PolicySet;

const SECRET: &[u8] = b"gw-secret";

fn verifier() -> Verifier {
    let sensors = SensorTable::default();
    let monitor = Monitor::new(&sensors, PolicySet::default(), MonitorSettings::default());
    let mut v = Verifier::new(b"srv".to_vec(), sensors, monitor);
    v.register_gateway("gw", SECRET, "zone", ["s1".to_string()]).unwrap();
    v
}

fn block(ts: u64, co2: i64, pm10: i64) -> AirQualityBlock {
    AirQualityBlock::new(ts, "s1", "zone", [co2, 2500, 100, 200, 32000, 900, pm10, 2250, 5600], 90)
}

#[derive(Debug, Clone, Copy)]
enum Fault {
    Field(i64),
    PathBit(usize),
    RootBit(usize),
    Key,
    Stale,
    IndexShift,
}

fn fault() -> impl Strategy<Value = Fault> {
    prop_oneof![
        (1i64..500).prop_map(Fault::Field),
        (0usize..256).prop_map(Fault::PathBit),
        (0usize..256).prop_map(Fault::RootBit),
        Just(Fault::Key),
        Just(Fault::Stale),
        Just(Fault::IndexShift),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Honest messages are accepted; a faulty one is rejected and leaves
    /// mirror, audit log and monitor exactly as they were.
    #[test]
    fn rejection_is_atomic(
        values in prop::collection::vec((40_000i64..200_000, 0i64..30_000), 2..40),
        faults in prop::collection::vec(prop::option::of(fault()), 2..40),
    ) {
        let mut v = verifier();
        let mut gw = MerkleLog::new();
        for (i, &(co2, pm10)) in values.iter().enumerate() {
            let ts = 600 * (i as u64 + 1);
            let b = block(ts, co2, pm10);
            let mut next = gw.clone();
            let (root, path) = next.append(block_digest(&b).unwrap());
            let honest = IngestMessage::seal("gw", b.clone(), path.clone(), root, SECRET).unwrap();

            if let Some(f) = faults.get(i).copied().flatten() {
                let mut m = honest.clone();
                match f {
                    Fault::Field(d) => {
                        *m.block.value_mut(Variable::Co2).unwrap() += d;
                        m.reseal(SECRET).unwrap();
                    }
                    Fault::PathBit(bit) => {
                        if m.auth_path.steps.is_empty() {
                            m.proposed_root = m.proposed_root.with_bit_flipped(bit);
                        } else {
                            let s = &mut m.auth_path.steps[0];
                            s.digest = s.digest.with_bit_flipped(bit);
                        }
                        m.reseal(SECRET).unwrap();
                    }
                    Fault::RootBit(bit) => {
                        m.proposed_root = m.proposed_root.with_bit_flipped(bit);
                        m.reseal(SECRET).unwrap();
                    }
                    Fault::Key => m.reseal(b"not-the-secret").unwrap(),
                    Fault::Stale => {
                        m.block.timestamp = if i == 0 { 0 } else { ts - 600 };
                        if i == 0 {
                            // nothing accepted yet, so a stale copy cannot exist; force a root fault
                            m.proposed_root = m.proposed_root.with_bit_flipped(0);
                        }
                        m.reseal(SECRET).unwrap();
                    }
                    Fault::IndexShift => {
                        m.auth_path.leaf_index += 1;
                        m.reseal(SECRET).unwrap();
                    }
                }
                let mirror = v.mirror("zone").unwrap().clone();
                let log = v.audit_log().clone();
                let monitor = v.monitor().clone();
                let verdict = v.ingest(&m);
                prop_assert!(!verdict.accepted(), "{f:?} accepted");
                prop_assert!(verdict.security.is_some());
                prop_assert_ne!(verdict.reason, Reason::Ok);
                prop_assert_eq!(v.mirror("zone").unwrap(), &mirror);
                prop_assert_eq!(v.audit_log(), &log);
                prop_assert_eq!(v.monitor(), &monitor);
            }

            let verdict = v.ingest(&honest);
            prop_assert!(verdict.accepted(), "{:?}", verdict.security);
            gw = next;
        }
        prop_assert_eq!(v.mirror("zone").unwrap(), &gw);
        let report = audit(v.audit_log().as_bytes()).unwrap();
        prop_assert!(report.is_clean());
        prop_assert_eq!(report.zones["zone"].root, gw.root().unwrap());
    }

    /// Every path the log ever handed out still verifies against the root
    /// of its time, and the final root matches a from-scratch rebuild.
    #[test]
    fn historical_paths_verify(n in 1usize..120) {
        let mut log = MerkleLog::new();
        let mut issued = Vec::new();
        for i in 0..n {
            let d = block_digest(&block(i as u64, 45_000 + i as i64, 1_400)).unwrap();
            let (root, path) = log.append(d);
            issued.push((d, path, root));
        }
        for (d, path, root) in &issued {
            prop_assert!(verify_inclusion(d, path, root));
        }
        prop_assert_eq!(log.root(), rebuild_root(log.leaves()));
    }
}

#[test]
fn replaying_sim_messages_reproduces_verdicts() {
    let text = r#"
seed = 3
duration_secs = 30000
[[zones]]
zone_id = "z"
master_id = "m"
slaves = ["a", "b"]
[[injections]]
at_secs = 1800
kind = "corrupt_root"
[[injections]]
at_secs = 5400
kind = "wrong_device_key"
target = "b"
"#;
    let config = SimConfig::from_toml_str(text).unwrap();
    let out = run(&config);
    let mut fresh = config.build_verifier();
    let mut verdicts = Vec::new();
    for msg in decode_stream(&out.messages) {
        let v = fresh.ingest(&msg.unwrap());
        verdicts.push(format!("{} {}", v.status, v.reason));
    }
    let recorded: Vec<String> = out
        .lines("VERDICT")
        .map(|l| {
            let status = l.split(" status=").nth(1).unwrap().split(' ').next().unwrap();
            let reason = l.split(" reason=").nth(1).unwrap();
            format!("{status} {reason}")
        })
        .collect();
    assert_eq!(verdicts, recorded);
    assert_eq!(fresh.audit_log(), out.verifier.audit_log());
    assert_eq!(fresh.mirror("z").unwrap().root(), Some(out.roots["z"]));
    assert_eq!(out.summary.tampered_rejected, 2);
}

#[test]
fn transcript_kinds_and_order() {
    let text = r#"
seed = 9
duration_secs = 3600
[[zones]]
zone_id = "z"
master_id = "m"
slaves = ["a"]
"#;
    let out = run(&SimConfig::from_toml_str(text).unwrap());
    let kinds: Vec<&str> = out.transcript.lines().map(|l| l.split(' ').nth(1).unwrap()).collect();
    assert_eq!(&kinds[..5], ["MEASURE", "APPEND", "INGEST", "VERDICT", "ACK"]);
    assert_eq!(kinds.last(), Some(&"SUMMARY"));
    let mut last = 0u64;
    for line in out.transcript.lines() {
        let t: u64 = line.split(' ').next().unwrap().parse().unwrap();
        assert!(t >= last, "{line}");
        last = t;
    }
}
