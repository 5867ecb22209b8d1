//! Randomized invariants checked against independent oracles.

mod common;

use bolted_core::node::FirmwareKind;
use bolted_core::orchestrator::{Cloud, FleetSpec, NodeState, TrustProfile};
use bolted_core::state_file::{load_from_str, save_to_string};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn reference_sha256_matches_known_vectors() {
    assert_eq!(
        hex::encode(common::sha256(b"abc")),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
    assert_eq!(
        hex::encode(common::sha256(&[0x61; 1000])),
        "41edece42d63e8d9bf515a9ba6932e1c20cbc9f5a5d134645adb5db1b9737ea3"
    );
}

#[test]
fn fold_matches_frozen_values() {
    let abc: Vec<[u8; 32]> = [b"a", b"b", b"c"].iter().map(|m| common::sha256(*m)).collect();
    assert_eq!(hex::encode(common::oracle_fold(&abc)), common::FOLD_ABC);
    assert_eq!(hex::encode(common::bank_fold(7, &abc)), common::FOLD_ABC);
    let ramp: Vec<[u8; 32]> = (0u8..16).map(|i| [i; 32]).collect();
    assert_eq!(hex::encode(common::bank_fold(0, &ramp)), common::FOLD_RAMP16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extend_fold_matches_oracle(
        pcr in 0u32..24,
        seq in prop::collection::vec(any::<[u8; 32]>(), 0..=16),
    ) {
        prop_assert_eq!(common::bank_fold(pcr, &seq), common::oracle_fold(&seq));
    }

    #[test]
    fn cow_matches_flat_model(seed in any::<u64>(), ops in 1usize..80) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        common::run_cow_script(&mut rng, ops).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn switch_matches_ticket_order_replay(seed in any::<u64>(), ops in 20usize..60) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = common::run_interleaving(&mut rng, ops).map_err(TestCaseError::fail)?;
        prop_assert!(n >= ops);
    }
}

#[derive(Clone, Debug)]
enum CloudOp {
    Admit { tenant: usize, count: usize },
    Release { pick: usize },
    Clean { pick: usize },
    Tick,
    Tamper { pick: usize, value: u8 },
}

fn cloud_op() -> impl Strategy<Value = CloudOp> {
    prop_oneof![
        (0usize..3, 1usize..3).prop_map(|(tenant, count)| CloudOp::Admit { tenant, count }),
        any::<usize>().prop_map(|pick| CloudOp::Release { pick }),
        any::<usize>().prop_map(|pick| CloudOp::Clean { pick }),
        Just(CloudOp::Tick),
        (any::<usize>(), 1u8..).prop_map(|(pick, value)| CloudOp::Tamper { pick, value }),
    ]
}

const TENANTS: [&str; 3] = ["alice", "bob", "carol"];

fn in_state(cloud: &Cloud, state: NodeState, pick: usize) -> Option<String> {
    let uuids: Vec<String> = cloud
        .records()
        .filter(|r| r.state == state)
        .map(|r| r.uuid.clone())
        .collect();
    (!uuids.is_empty()).then(|| uuids[pick % uuids.len()].clone())
}

fn apply(cloud: &mut Cloud, op: &CloudOp) {
    match op {
        CloudOp::Admit { tenant, count } => {
            cloud.admit(TENANTS[*tenant], *count).unwrap();
        }
        CloudOp::Release { pick } => {
            if let Some(u) = in_state(cloud, NodeState::Allocated, *pick) {
                cloud.release_node(&u).unwrap();
            }
        }
        CloudOp::Clean { pick } => {
            if let Some(u) = in_state(cloud, NodeState::Rejected, *pick) {
                cloud.clean_node(&u).unwrap();
            }
        }
        CloudOp::Tick => {
            cloud.tick().unwrap();
        }
        CloudOp::Tamper { pick, value } => {
            if let Some(u) = in_state(cloud, NodeState::Free, *pick) {
                cloud.tamper(&u, "heads-kernel", 0, *value).unwrap();
            }
        }
    }
}

fn fresh_cloud(seed: u64) -> Cloud {
    let mut c = Cloud::new(FleetSpec::uniform(4, FirmwareKind::HeadsFlashed), seed).unwrap();
    c.add_tenant("alice", TrustProfile::full(), 1).unwrap();
    c.add_tenant("bob", TrustProfile::attested(), 2).unwrap();
    c.add_tenant("carol", TrustProfile::unattested(), 1).unwrap();
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any reachable state survives save/load byte-for-byte, and a reloaded
    /// cloud behaves exactly like the one that never left memory.
    #[test]
    fn state_file_round_trip(
        seed in any::<u64>(),
        before in prop::collection::vec(cloud_op(), 0..8),
        after in prop::collection::vec(cloud_op(), 0..6),
    ) {
        let mut live = fresh_cloud(seed);
        for op in &before {
            apply(&mut live, op);
        }
        let first = save_to_string(&live).unwrap();
        let mut loaded = load_from_str(&first, seed ^ 1).unwrap();
        prop_assert_eq!(&save_to_string(&loaded).unwrap(), &first);

        live.reseed(seed ^ 1);
        for op in &after {
            apply(&mut live, op);
            apply(&mut loaded, op);
        }
        prop_assert_eq!(save_to_string(&live).unwrap(), save_to_string(&loaded).unwrap());
        prop_assert!(loaded.violations().is_empty(), "{:?}", loaded.violations());
    }
}
