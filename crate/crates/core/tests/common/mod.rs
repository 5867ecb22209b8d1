//! Independent oracles and randomized script drivers shared by the
//! property tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use bolted_core::isolation::{IsolationService, NetId, OpKind, PortId, Visibility};
use bolted_core::provisioning::{ImageId, ProvisioningError, ProvisioningService};
use bolted_core::tpm::{Digest, PcrBank, PcrIndex};
use rand::seq::IteratorRandom;
use rand::Rng;

/// Fold of extends from an all-zero register, frozen from Python hashlib.
pub const FOLD_ABC: &str = "202baab0d9ef5820d6d9c8d82fb5c7a18bb9fa436d42bc0961ed55c3f3f36b17";
/// Fold of `[i; 32]` for i in 0..16.
pub const FOLD_RAMP16: &str = "079e5e2b2aae0ac12fdeb6b1cd634f64a1b8ad2213437680c226545499857fa7";

/// Straight FIPS 180-4 SHA-256, written without the `sha2` crate so it can
/// check the implementation under test.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
        0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
        0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
        0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
        0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
        0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
        0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2,
    ];
    let mut h: [u32; 8] = [
        0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
    ];
    let mut msg = data.to_vec();
    let bit_len = (data.len() as u64).wrapping_mul(8);
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&bit_len.to_be_bytes());
    for chunk in msg.chunks(64) {
        let mut w = [0u32; 64];
        for (i, word) in chunk.chunks(4).enumerate() {
            w[i] = u32::from_be_bytes([word[0], word[1], word[2], word[3]]);
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16].wrapping_add(s0).wrapping_add(w[i - 7]).wrapping_add(s1);
        }
        let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh] = h;
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ (!e & g);
            let t1 = hh.wrapping_add(s1).wrapping_add(ch).wrapping_add(K[i]).wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            hh = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }
        for (x, y) in h.iter_mut().zip([a, b, c, d, e, f, g, hh]) {
            *x = x.wrapping_add(y);
        }
    }
    let mut out = [0u8; 32];
    for (i, word) in h.iter().enumerate() {
        out[i * 4..i * 4 + 4].copy_from_slice(&word.to_be_bytes());
    }
    out
}

/// Reference register value after extending each measurement in order.
pub fn oracle_fold(measurements: &[[u8; 32]]) -> [u8; 32] {
    measurements.iter().fold([0u8; 32], |pcr, m| {
        let mut buf = [0u8; 64];
        buf[..32].copy_from_slice(&pcr);
        buf[32..].copy_from_slice(m);
        sha256(&buf)
    })
}

/// Register value produced by the implementation under test.
pub fn bank_fold(pcr: u32, measurements: &[[u8; 32]]) -> [u8; 32] {
    let index = PcrIndex::new(pcr).unwrap();
    let mut bank = PcrBank::new();
    for m in measurements {
        bank.extend(index, &Digest::from_bytes(*m));
    }
    *bank.read(index).as_bytes()
}

pub fn random_digests<R: Rng>(rng: &mut R, max_len: usize) -> Vec<[u8; 32]> {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| rng.gen()).collect()
}

pub const COW_BLOCK: usize = 8;
pub const COW_BLOCKS: u64 = 6;
pub const COW_MAX_DEPTH: usize = 4;

/// Flat-array model: every image is a full copy of its bytes.
#[derive(Clone)]
struct FlatImage {
    blocks: Vec<Vec<u8>>,
    frozen: bool,
    depth: usize,
}

/// Runs one random read/write/clone/snapshot script against the service
/// and the flat model. Returns the number of operations executed.
pub fn run_cow_script<R: Rng>(rng: &mut R, ops: usize) -> Result<usize, String> {
    let mut svc = ProvisioningService::new();
    let base: Vec<u8> = (0..COW_BLOCK * COW_BLOCKS as usize).map(|_| rng.gen()).collect();
    let root = svc
        .create_image_with_block_size(&base, COW_BLOCK)
        .map_err(|e| e.to_string())?;
    let mut ids: Vec<ImageId> = vec![root];
    let mut flat = vec![FlatImage {
        blocks: base.chunks(COW_BLOCK).map(<[u8]>::to_vec).collect(),
        frozen: false,
        depth: 0,
    }];
    for step in 0..ops {
        let i = rng.gen_range(0..ids.len());
        match rng.gen_range(0..10) {
            0..=3 => {
                let block = rng.gen_range(0..COW_BLOCKS);
                let bytes: Vec<u8> = (0..COW_BLOCK).map(|_| rng.gen()).collect();
                let got = svc.write_image_block(ids[i], block, &bytes);
                if flat[i].frozen {
                    if !matches!(got, Err(ProvisioningError::Frozen(_))) {
                        return Err(format!("step {step}: write to frozen image gave {got:?}"));
                    }
                } else {
                    got.map_err(|e| format!("step {step}: write failed: {e}"))?;
                    flat[i].blocks[block as usize] = bytes;
                }
            }
            4..=6 => {
                let block = rng.gen_range(0..COW_BLOCKS);
                let got = svc
                    .read_image_block(ids[i], block)
                    .map_err(|e| format!("step {step}: read failed: {e}"))?;
                if got != flat[i].blocks[block as usize] {
                    return Err(format!("step {step}: {} block {block} differs from the model", ids[i]));
                }
            }
            kind => {
                if flat[i].depth >= COW_MAX_DEPTH {
                    continue;
                }
                let frozen = kind == 9;
                let id = if frozen {
                    svc.snapshot_image(ids[i])
                } else {
                    svc.clone_image(ids[i])
                }
                .map_err(|e| format!("step {step}: clone failed: {e}"))?;
                let mut copy = flat[i].clone();
                copy.frozen = frozen;
                copy.depth += 1;
                ids.push(id);
                flat.push(copy);
            }
        }
    }
    for (id, model) in ids.iter().zip(&flat) {
        let got = svc.read_all(*id).map_err(|e| e.to_string())?;
        if got != model.blocks {
            return Err(format!("final contents of {id} differ from the model"));
        }
    }
    Ok(ops)
}

/// One client's view of the networks it may touch.
struct Client {
    project: String,
    nodes: Vec<String>,
    nets: Vec<NetId>,
}

pub const NICS: [&str; 2] = ["eth0", "eth1"];

/// Issues at least `min_ops` switch operations from two projects in a
/// random interleaving, applying queued operations at random points.
/// Compares the final switch with an independent replay of the enqueued
/// operations in ticket order.
pub fn run_interleaving<R: Rng>(rng: &mut R, min_ops: usize) -> Result<usize, String> {
    let mut svc = IsolationService::new((100, 160));
    let mut clients = Vec::new();
    for p in ["red", "blue"] {
        svc.create_project(p).map_err(|e| e.to_string())?;
        let mut nodes = Vec::new();
        for n in 0..3 {
            let uuid = format!("{p}-{n}");
            svc.add_node(&uuid, NICS.iter().map(|s| s.to_string()).collect())
                .map_err(|e| e.to_string())?;
            svc.allocate_specific(p, &uuid).map_err(|e| e.to_string())?;
            nodes.push(uuid);
        }
        clients.push(Client {
            project: p.to_string(),
            nodes,
            nets: Vec::new(),
        });
    }
    let public = {
        let c = &mut clients[0];
        let net = svc.create_network(&c.project, Visibility::Public).map_err(|e| e.to_string())?;
        c.nets.push(net.clone());
        net
    };
    clients[1].nets.push(public);

    let mut enqueued: BTreeMap<u64, OpKind> = BTreeMap::new();
    let mut applied: Vec<u64> = Vec::new();
    record(&svc, &mut enqueued);

    let mut attempts = 0;
    while enqueued.len() < min_ops && attempts < min_ops * 50 {
        attempts += 1;
        if rng.gen_bool(0.3) {
            if let Some(op) = svc.apply_next() {
                applied.push(op.seq);
            }
            continue;
        }
        let c = &mut clients[rng.gen_range(0..2)];
        let node = c.nodes.iter().choose(rng).unwrap().clone();
        let nic = NICS[rng.gen_range(0..NICS.len())];
        let outcome = match rng.gen_range(0..5) {
            0 => svc
                .create_network(&c.project, Visibility::Private(c.project.clone()))
                .map(|n| c.nets.push(n)),
            1 | 2 => match c.nets.iter().choose(rng) {
                Some(net) => svc.connect(&node, nic, net).map(drop),
                None => continue,
            },
            3 => match c.nets.iter().choose(rng) {
                Some(net) => svc.detach(&node, nic, net).map(drop),
                None => continue,
            },
            _ => {
                let private: Vec<usize> = (0..c.nets.len())
                    .filter(|&i| {
                        svc.network(&c.nets[i])
                            .is_none_or(|d| d.visibility != Visibility::Public)
                    })
                    .collect();
                match private.iter().choose(rng) {
                    Some(&i) => {
                        let net = c.nets[i].clone();
                        let r = svc.teardown_network(&net).map(drop);
                        if r.is_ok() {
                            c.nets.remove(i);
                        }
                        r
                    }
                    None => continue,
                }
            }
        };
        // Refused requests (already a member, not a member) enqueue nothing.
        let _ = outcome;
        record(&svc, &mut enqueued);
    }
    while let Some(op) = svc.apply_next() {
        applied.push(op.seq);
    }

    let order: Vec<u64> = enqueued.keys().copied().collect();
    if applied != order {
        return Err(format!("applied order {applied:?} is not ticket order {order:?}"));
    }
    let mut model: BTreeMap<PortId, BTreeSet<u16>> = BTreeMap::new();
    for kind in enqueued.values() {
        match kind {
            OpKind::Connect { port, vlan, .. } => {
                model.entry(port.clone()).or_default().insert(*vlan);
            }
            OpKind::Detach { port, vlan, .. } => {
                if let Some(set) = model.get_mut(port) {
                    set.remove(vlan);
                    if set.is_empty() {
                        model.remove(port);
                    }
                }
            }
            OpKind::CreateNet { .. } | OpKind::DeleteNet { .. } => {}
        }
    }
    if svc.switch_config().port_map != model {
        return Err("final switch config differs from ticket-order replay".into());
    }
    let problems = svc.check_invariants();
    if !problems.is_empty() {
        return Err(format!("isolation invariants broken: {problems:?}"));
    }
    Ok(enqueued.len())
}

fn record(svc: &IsolationService, enqueued: &mut BTreeMap<u64, OpKind>) {
    for op in svc.pending_operations() {
        enqueued.entry(op.seq).or_insert_with(|| op.kind.clone());
    }
}
