//! Persisted cloud state.
//!
//! Three header lines followed by a TOML body:
//!
//! ```text
//! # bolted-state
//! version = 1
//! checksum = "<sha256 of the body, hex>"
//! ```
//!
//! The body is plain text so successive states diff cleanly. Loading
//! refuses a body whose digest does not match the header.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::attestation::{
    AttestationResult, EnrollmentState, Registrar, RegistrarEntry, Verifier, VerifierRecord,
    Whitelist,
};
use crate::isolation::{IsolationService, IsolationSnapshot, NetId, NetworkDef, PortId, Visibility};
use crate::node::{BootPhase, EnclaveKey, FirmwareKind, NodeSim, NodeSnapshot, Stage, StageOrigin};
use crate::orchestrator::{Cloud, CloudParts, NodeRecord, NodeState, Tenant, TrustProfile};
use crate::provisioning::{BootTarget, Encryption, Image, ImageId, ProvisioningService, ProvisioningSnapshot};
use crate::tpm::{AikPublic, Digest, EkPublic, PcrIndex, NONCE_LEN};

pub const MAGIC: &str = "# bolted-state";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a state file: {0}")]
    BadHeader(String),
    #[error("unsupported state file version {0}")]
    Version(u32),
    #[error("checksum mismatch: header says {expected}, body hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("state body line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid state: {0}")]
    Invalid(String),
    #[error("cloud is not quiescent; switch operations are still pending")]
    NotQuiescent,
}

fn invalid(e: impl std::fmt::Display) -> StateError {
    StateError::Invalid(e.to_string())
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Body {
    meta: Meta,
    tenant_kernel: StageDto,
    whitelist: String,
    node: Vec<NodeDto>,
    record: Vec<RecordDto>,
    tenant: Vec<TenantDto>,
    isolation: IsolationDto,
    provisioning: ProvisioningDto,
    registrar: Vec<RegistrarDto>,
    verifier: VerifierDto,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Meta {
    tick: u64,
    trace_seq: u64,
    base_image: u64,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct StageDto {
    name: String,
    pcr: u32,
    origin: String,
    payload: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct SpanDto {
    offset: usize,
    bytes: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct NodeDto {
    uuid: String,
    firmware: String,
    tpm_seed: String,
    phase: String,
    responsive: bool,
    key: Option<String>,
    nics: Vec<String>,
    memory_size: usize,
    /// Non-zero stretches of memory.
    memory: Vec<SpanDto>,
    /// `<pcr> <digest>` per extend, in order.
    measurement_log: Vec<String>,
    pcrs: Vec<String>,
    stages: Vec<StageDto>,
    pristine: Vec<StageDto>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ProfileDto {
    name: String,
    attested: bool,
    encrypt_storage: bool,
    encrypt_network: bool,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct RecordDto {
    uuid: String,
    state: String,
    tenant: Option<String>,
    profile: Option<ProfileDto>,
    image: Option<u64>,
    reason: Option<String>,
    history: Vec<u64>,
    session_writes: Vec<u64>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ShareDto {
    node: String,
    share: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct TenantDto {
    name: String,
    project: String,
    profile: ProfileDto,
    key: String,
    shares: Vec<ShareDto>,
    enclave_nets: Vec<String>,
    admitted: Vec<String>,
    retained_images: Vec<u64>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct PoolNodeDto {
    uuid: String,
    nics: Vec<String>,
    project: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct NetworkDto {
    id: String,
    vlan: u16,
    visibility: String,
    airlock: bool,
    members: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct IsolationDto {
    vlan_range: [u16; 2],
    next_net: u64,
    next_ticket: u64,
    projects: Vec<String>,
    nodes: Vec<PoolNodeDto>,
    networks: Vec<NetworkDto>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct BlockDto {
    index: u64,
    bytes: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ImageDto {
    id: u64,
    parent: Option<u64>,
    block_size: usize,
    length: u64,
    wrapped_key: Option<String>,
    unlocked: bool,
    frozen: bool,
    children: Vec<u64>,
    blocks: Vec<BlockDto>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct TargetDto {
    node: String,
    image: u64,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ProvisioningDto {
    next_id: u64,
    images: Vec<ImageDto>,
    targets: Vec<TargetDto>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct RegistrarDto {
    uuid: String,
    ek: String,
    aik: String,
    state: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct VerifierRecordDto {
    uuid: String,
    policy: String,
    pending_nonce: Option<String>,
    last_nonce: Option<String>,
    last_result: Option<String>,
    share: String,
    cycle: u64,
    passed_this_cycle: bool,
    share_released: bool,
    revoked: bool,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct VerifierDto {
    poll_interval: u64,
    issued_nonces: Vec<String>,
    records: Vec<VerifierRecordDto>,
}

fn stage_dto(s: &Stage) -> StageDto {
    StageDto {
        name: s.name().to_string(),
        pcr: u32::from(s.pcr().get()),
        origin: s.origin().as_str().to_string(),
        payload: hex::encode(s.payload()),
    }
}

fn stage_from(d: &StageDto) -> Result<Stage, StateError> {
    let origin: StageOrigin = d.origin.parse().map_err(invalid)?;
    let pcr = PcrIndex::new(d.pcr).map_err(invalid)?;
    let payload = hex::decode(&d.payload).map_err(invalid)?;
    Stage::new(d.name.clone(), payload, pcr, origin).map_err(invalid)
}

fn profile_dto(p: &TrustProfile) -> ProfileDto {
    ProfileDto {
        name: p.name.clone(),
        attested: p.attested,
        encrypt_storage: p.encrypt_storage,
        encrypt_network: p.encrypt_network,
    }
}

fn profile_from(d: &ProfileDto) -> Result<TrustProfile, StateError> {
    TrustProfile::new(d.name.clone(), d.attested, d.encrypt_storage, d.encrypt_network).map_err(invalid)
}

fn bytes32(s: &str) -> Result<[u8; 32], StateError> {
    hex::decode(s)
        .map_err(invalid)?
        .try_into()
        .map_err(|_| invalid(format!("expected 32 bytes of hex, got {s:?}")))
}

fn nonce(s: &str) -> Result<[u8; NONCE_LEN], StateError> {
    hex::decode(s)
        .map_err(invalid)?
        .try_into()
        .map_err(|_| invalid(format!("expected a {NONCE_LEN}-byte nonce, got {s:?}")))
}

fn log_line(i: &PcrIndex, d: &Digest) -> String {
    format!("{i} {d}")
}

fn parse_log_line(s: &str) -> Result<(PcrIndex, Digest), StateError> {
    let (i, d) = s
        .split_once(' ')
        .ok_or_else(|| invalid(format!("bad register line {s:?}")))?;
    let i = PcrIndex::new(i.parse().map_err(invalid)?).map_err(invalid)?;
    Ok((i, Digest::from_hex(d).map_err(invalid)?))
}

/// Maximal runs of non-zero bytes.
fn memory_spans(mem: &[u8]) -> Vec<SpanDto> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < mem.len() {
        if mem[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < mem.len() && mem[i] != 0 {
            i += 1;
        }
        spans.push(SpanDto {
            offset: start,
            bytes: hex::encode(&mem[start..i]),
        });
    }
    spans
}

fn to_body(cloud: &Cloud) -> Result<Body, StateError> {
    if !cloud.is_quiescent() {
        return Err(StateError::NotQuiescent);
    }
    let node = cloud
        .nodes()
        .map(|n| {
            let s = n.snapshot();
            NodeDto {
                uuid: s.uuid.clone(),
                firmware: s.firmware.as_str().to_string(),
                tpm_seed: hex::encode(s.tpm_seed),
                phase: s.phase.as_str().to_string(),
                responsive: s.responsive,
                key: s.key.map(|k| hex::encode(k.0)),
                nics: s.nics.clone(),
                memory_size: s.memory.len(),
                memory: memory_spans(&s.memory),
                measurement_log: s.measurement_log.iter().map(|(i, d)| log_line(i, d)).collect(),
                pcrs: s.pcrs.iter().map(|(i, d)| log_line(i, d)).collect(),
                stages: s.stages.iter().map(stage_dto).collect(),
                pristine: cloud
                    .pristine_stages(&s.uuid)
                    .unwrap_or_default()
                    .iter()
                    .map(stage_dto)
                    .collect(),
            }
        })
        .collect();
    let record = cloud
        .records()
        .map(|r| RecordDto {
            uuid: r.uuid.clone(),
            state: r.state.to_string(),
            tenant: r.tenant.clone(),
            profile: r.profile.as_ref().map(profile_dto),
            image: r.image.map(|i| i.0),
            reason: r.reason.clone(),
            history: r.history.clone(),
            session_writes: r.session_writes.iter().copied().collect(),
        })
        .collect();
    let tenant = cloud
        .tenants()
        .map(|t| TenantDto {
            name: t.name.clone(),
            project: t.project.clone(),
            profile: profile_dto(&t.profile),
            key: hex::encode(t.key.0),
            shares: t
                .shares
                .iter()
                .map(|(n, s)| ShareDto {
                    node: n.clone(),
                    share: hex::encode(s),
                })
                .collect(),
            enclave_nets: t.enclave_nets.iter().map(|n| n.0.clone()).collect(),
            admitted: t.admitted.clone(),
            retained_images: t.retained_images.iter().map(|i| i.0).collect(),
        })
        .collect();

    let iso = cloud.isolation().snapshot().map_err(invalid)?;
    let isolation = IsolationDto {
        vlan_range: [iso.vlan_range.0, iso.vlan_range.1],
        next_net: iso.next_net,
        next_ticket: iso.next_ticket,
        projects: iso.projects,
        nodes: iso
            .nodes
            .into_iter()
            .map(|(uuid, nics, project)| PoolNodeDto { uuid, nics, project })
            .collect(),
        networks: iso
            .networks
            .into_iter()
            .map(|n| NetworkDto {
                id: n.id.0,
                vlan: n.vlan,
                visibility: n.visibility.to_string(),
                airlock: n.airlock,
                members: n.members.iter().map(ToString::to_string).collect(),
            })
            .collect(),
    };

    let prov = cloud.provisioning().snapshot();
    let provisioning = ProvisioningDto {
        next_id: prov.next_id,
        images: prov
            .images
            .into_iter()
            .map(|img| ImageDto {
                id: img.id.0,
                parent: img.parent.map(|p| p.0),
                block_size: img.block_size,
                length: img.length,
                wrapped_key: match &img.encryption {
                    Encryption::None => None,
                    Encryption::Wrapped { wrapped_content_key } => Some(hex::encode(wrapped_content_key)),
                },
                unlocked: img.unlocked,
                frozen: img.frozen,
                children: img.children.iter().map(|c| c.0).collect(),
                blocks: img
                    .blocks
                    .iter()
                    .map(|(i, b)| BlockDto {
                        index: *i,
                        bytes: hex::encode(b),
                    })
                    .collect(),
            })
            .collect(),
        targets: prov
            .targets
            .into_iter()
            .map(|t| TargetDto {
                node: t.node,
                image: t.image.0,
            })
            .collect(),
    };

    let att = cloud.attestation();
    let registrar = att
        .registrar
        .entries()
        .map(|(uuid, e)| RegistrarDto {
            uuid: uuid.clone(),
            ek: e.ek_pub.to_hex(),
            aik: e.aik_pub.to_hex(),
            state: e.state.as_str().to_string(),
        })
        .collect();
    let v = &att.verifier;
    let verifier = VerifierDto {
        poll_interval: v.poll_interval(),
        issued_nonces: v.issued_nonces().iter().map(hex::encode).collect(),
        records: v
            .records()
            .map(|(uuid, r)| VerifierRecordDto {
                uuid: uuid.clone(),
                policy: r.policy.clone(),
                pending_nonce: r.pending_nonce.map(hex::encode),
                last_nonce: r.last_nonce.map(hex::encode),
                last_result: r.last_result.map(|x| x.to_string()),
                share: hex::encode(r.verifier_share),
                cycle: r.cycle,
                passed_this_cycle: r.passed_this_cycle,
                share_released: r.share_released,
                revoked: r.revoked,
            })
            .collect(),
    };

    Ok(Body {
        meta: Meta {
            tick: cloud.current_tick(),
            trace_seq: cloud.trace().next_seq(),
            base_image: cloud.base_image().0,
        },
        tenant_kernel: stage_dto(cloud.tenant_kernel()),
        whitelist: v.whitelist().to_string(),
        node,
        record,
        tenant,
        isolation,
        provisioning,
        registrar,
        verifier,
    })
}

fn from_body(b: Body, seed: u64) -> Result<Cloud, StateError> {
    let mut nodes = BTreeMap::new();
    let mut pristine = BTreeMap::new();
    for n in &b.node {
        let mut memory = vec![0u8; n.memory_size];
        for span in &n.memory {
            let bytes = hex::decode(&span.bytes).map_err(invalid)?;
            let end = span.offset + bytes.len();
            if end > memory.len() {
                return Err(invalid(format!("node {}: memory span past end", n.uuid)));
            }
            memory[span.offset..end].copy_from_slice(&bytes);
        }
        let snap = NodeSnapshot {
            uuid: n.uuid.clone(),
            firmware: n.firmware.parse::<FirmwareKind>().map_err(invalid)?,
            tpm_seed: bytes32(&n.tpm_seed)?,
            pcrs: n.pcrs.iter().map(|l| parse_log_line(l)).collect::<Result<_, _>>()?,
            measurement_log: n
                .measurement_log
                .iter()
                .map(|l| parse_log_line(l))
                .collect::<Result<_, _>>()?,
            stages: n.stages.iter().map(stage_from).collect::<Result<_, _>>()?,
            memory,
            nics: n.nics.clone(),
            phase: n.phase.parse::<BootPhase>().map_err(invalid)?,
            key: n.key.as_deref().map(bytes32).transpose()?.map(EnclaveKey),
            responsive: n.responsive,
        };
        let node = NodeSim::from_snapshot(snap).map_err(invalid)?;
        if nodes.insert(n.uuid.clone(), node).is_some() {
            return Err(invalid(format!("duplicate node {}", n.uuid)));
        }
        pristine.insert(
            n.uuid.clone(),
            n.pristine.iter().map(stage_from).collect::<Result<Vec<_>, _>>()?,
        );
    }

    let mut records = BTreeMap::new();
    for r in &b.record {
        if !nodes.contains_key(&r.uuid) {
            return Err(invalid(format!("record for unknown node {}", r.uuid)));
        }
        records.insert(
            r.uuid.clone(),
            NodeRecord {
                uuid: r.uuid.clone(),
                state: r.state.parse::<NodeState>().map_err(invalid)?,
                tenant: r.tenant.clone(),
                profile: r.profile.as_ref().map(profile_from).transpose()?,
                airlock_net: None,
                image: r.image.map(ImageId),
                history: r.history.clone(),
                session_writes: r.session_writes.iter().copied().collect::<BTreeSet<_>>(),
                reason: r.reason.clone(),
            },
        );
    }
    if records.len() != nodes.len() {
        return Err(invalid("every node needs exactly one record"));
    }

    let mut tenants = BTreeMap::new();
    for t in &b.tenant {
        let shares = t
            .shares
            .iter()
            .map(|s| Ok((s.node.clone(), bytes32(&s.share)?)))
            .collect::<Result<BTreeMap<_, _>, StateError>>()?;
        tenants.insert(
            t.name.clone(),
            Tenant {
                name: t.name.clone(),
                profile: profile_from(&t.profile)?,
                project: t.project.clone(),
                key: EnclaveKey(bytes32(&t.key)?),
                shares,
                enclave_nets: t.enclave_nets.iter().cloned().map(NetId).collect(),
                admitted: t.admitted.clone(),
                retained_images: t.retained_images.iter().copied().map(ImageId).collect(),
            },
        );
    }

    let i = &b.isolation;
    let mut networks = Vec::new();
    for n in &i.networks {
        networks.push(NetworkDef {
            id: NetId(n.id.clone()),
            vlan: n.vlan,
            visibility: n.visibility.parse::<Visibility>().map_err(invalid)?,
            airlock: n.airlock,
            members: n
                .members
                .iter()
                .map(|m| m.parse::<PortId>())
                .collect::<Result<_, _>>()
                .map_err(invalid)?,
        });
    }
    let isolation = IsolationService::from_snapshot(IsolationSnapshot {
        vlan_range: (i.vlan_range[0], i.vlan_range[1]),
        next_net: i.next_net,
        next_ticket: i.next_ticket,
        nodes: i
            .nodes
            .iter()
            .map(|n| (n.uuid.clone(), n.nics.clone(), n.project.clone()))
            .collect(),
        projects: i.projects.clone(),
        networks,
    })
    .map_err(invalid)?;

    let p = &b.provisioning;
    let mut images = Vec::new();
    for img in &p.images {
        let blocks = img
            .blocks
            .iter()
            .map(|blk| Ok((blk.index, hex::decode(&blk.bytes).map_err(invalid)?)))
            .collect::<Result<BTreeMap<_, _>, StateError>>()?;
        images.push(Image {
            id: ImageId(img.id),
            parent: img.parent.map(ImageId),
            block_size: img.block_size,
            length: img.length,
            blocks,
            encryption: match &img.wrapped_key {
                None => Encryption::None,
                Some(h) => Encryption::Wrapped {
                    wrapped_content_key: hex::decode(h).map_err(invalid)?,
                },
            },
            unlocked: img.unlocked,
            frozen: img.frozen,
            children: img.children.iter().copied().map(ImageId).collect(),
        });
    }
    let provisioning = ProvisioningService::from_snapshot(ProvisioningSnapshot {
        next_id: p.next_id,
        images,
        targets: p
            .targets
            .iter()
            .map(|t| BootTarget {
                node: t.node.clone(),
                image: ImageId(t.image),
            })
            .collect(),
    })
    .map_err(invalid)?;

    let mut registrar = Registrar::new();
    for r in &b.registrar {
        registrar.restore_entry(
            &r.uuid,
            RegistrarEntry {
                ek_pub: r.ek.parse::<EkPublic>().map_err(invalid)?,
                aik_pub: r.aik.parse::<AikPublic>().map_err(invalid)?,
                state: r.state.parse::<EnrollmentState>().map_err(invalid)?,
            },
        );
    }
    let whitelist = Whitelist::parse(&b.whitelist).map_err(invalid)?;
    let mut verifier = Verifier::new(whitelist);
    verifier.set_poll_interval(b.verifier.poll_interval);
    for n in &b.verifier.issued_nonces {
        verifier.restore_issued_nonce(nonce(n)?);
    }
    for r in &b.verifier.records {
        verifier.restore_record(
            &r.uuid,
            VerifierRecord {
                policy: r.policy.clone(),
                pending_nonce: r.pending_nonce.as_deref().map(nonce).transpose()?,
                last_nonce: r.last_nonce.as_deref().map(nonce).transpose()?,
                last_result: r
                    .last_result
                    .as_deref()
                    .map(str::parse::<AttestationResult>)
                    .transpose()
                    .map_err(invalid)?,
                verifier_share: bytes32(&r.share)?,
                cycle: r.cycle,
                passed_this_cycle: r.passed_this_cycle,
                share_released: r.share_released,
                revoked: r.revoked,
            },
        );
    }

    let base_image = ImageId(b.meta.base_image);
    provisioning.image(base_image).map_err(invalid)?;
    let parts = CloudParts {
        isolation,
        provisioning,
        registrar,
        verifier,
        nodes,
        pristine,
        records,
        tenants,
        base_image,
        tenant_kernel: stage_from(&b.tenant_kernel)?,
        tick: b.meta.tick,
    };
    Ok(Cloud::restore(parts, b.meta.trace_seq, seed))
}

fn checksum(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

/// Renders the state file text for a quiescent cloud.
pub fn save_to_string(cloud: &Cloud) -> Result<String, StateError> {
    let body = toml::to_string(&to_body(cloud)?).map_err(invalid)?;
    Ok(format!(
        "{MAGIC}\nversion = {VERSION}\nchecksum = \"{}\"\n{body}",
        checksum(&body)
    ))
}

/// Parses state file text. `seed` drives randomness from here on.
pub fn load_from_str(text: &str, seed: u64) -> Result<Cloud, StateError> {
    let mut lines = text.splitn(4, '\n');
    let magic = lines.next().unwrap_or("");
    if magic != MAGIC {
        return Err(StateError::BadHeader(format!("first line is {magic:?}")));
    }
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("version = "))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| StateError::BadHeader("missing version line".into()))?;
    if version != VERSION {
        return Err(StateError::Version(version));
    }
    let expected = lines
        .next()
        .and_then(|l| l.strip_prefix("checksum = \""))
        .and_then(|l| l.strip_suffix('"'))
        .ok_or_else(|| StateError::BadHeader("missing checksum line".into()))?
        .to_string();
    let body = lines.next().unwrap_or("");
    let actual = checksum(body);
    if actual != expected {
        return Err(StateError::Checksum { expected, actual });
    }
    let parsed: Body = toml::from_str(body).map_err(|e| StateError::Parse {
        line: e.span().map_or(0, |s| crate::config::line_of(body, s.start)) + 3,
        message: e.message().to_string(),
    })?;
    from_body(parsed, seed)
}

pub fn save(cloud: &Cloud, path: &Path) -> Result<(), StateError> {
    let text = save_to_string(cloud)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, seed: u64) -> Result<Cloud, StateError> {
    load_from_str(&std::fs::read_to_string(path)?, seed)
}
