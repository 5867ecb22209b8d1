//! Simulated bare-metal node: firmware stages, measured boot, volatile
//! memory and the node-side half of attestation and key receipt.
//!
//! Stage payloads are opaque byte strings. "Executing" a stage means
//! advancing the boot phase and emitting an [`NodeEvent::Execute`]; each
//! stage is measured into its PCR before it executes.

use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::tpm::{
    attested_selection, Digest, PcrIndex, Quote, Tpm, TpmError, TpmIdentity, ATTESTED_PCRS,
    NONCE_LEN, PCR_BOOTLOADER, PCR_FIRMWARE, PCR_PAYLOADS,
};

pub const DEFAULT_MEMORY_SIZE: usize = 64 * 1024;
pub const DEFAULT_NIC: &str = "eth0";

/// Label of the hardware root of trust that measures the first stage.
pub const ROOT_OF_TRUST: &str = "rtm";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NodeError {
    #[error("node {0} is already powered")]
    AlreadyPowered(String),
    #[error("node {0} is not awaiting attestation")]
    NotAwaitingAttestation(String),
    #[error("node {node} is in phase {actual}, expected {expected}")]
    WrongPhase {
        node: String,
        expected: BootPhase,
        actual: BootPhase,
    },
    #[error("node {node} has no stage named {stage:?}")]
    NoSuchStage { node: String, stage: String },
    #[error("position {position} is outside stage {stage:?} ({len} bytes)")]
    PositionOutOfRange {
        stage: String,
        position: usize,
        len: usize,
    },
    #[error("memory access {offset}+{len} outside {size}-byte region")]
    MemoryOutOfRange {
        offset: usize,
        len: usize,
        size: usize,
    },
    #[error("node {0} did not answer")]
    Unresponsive(String),
    #[error("invalid node configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tpm(#[from] TpmError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageOrigin {
    Flashed,
    Downloaded,
}

impl StageOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            StageOrigin::Flashed => "flashed",
            StageOrigin::Downloaded => "downloaded",
        }
    }
}

impl std::str::FromStr for StageOrigin {
    type Err = NodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flashed" => Ok(StageOrigin::Flashed),
            "downloaded" => Ok(StageOrigin::Downloaded),
            other => Err(NodeError::InvalidConfig(format!("unknown stage origin {other:?}"))),
        }
    }
}

/// One measured boot component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    name: String,
    payload: Vec<u8>,
    pcr: PcrIndex,
    origin: StageOrigin,
}

impl Stage {
    pub fn new(
        name: impl Into<String>,
        payload: Vec<u8>,
        pcr: PcrIndex,
        origin: StageOrigin,
    ) -> Result<Self, NodeError> {
        let name = name.into();
        if payload.is_empty() {
            return Err(NodeError::InvalidConfig(format!("stage {name:?} has an empty payload")));
        }
        if !ATTESTED_PCRS.contains(&pcr) {
            return Err(NodeError::InvalidConfig(format!(
                "stage {name:?} extends PCR {pcr}, which is not in the allocation map"
            )));
        }
        Ok(Stage {
            name,
            payload,
            pcr,
            origin,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn pcr(&self) -> PcrIndex {
        self.pcr
    }

    pub fn origin(&self) -> StageOrigin {
        self.origin
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.payload)
    }
}

/// Deterministic stand-in image for a named component.
pub fn default_payload(name: &str) -> Vec<u8> {
    let line = format!("{name} image v1\n");
    line.bytes().cycle().take(512).collect()
}

/// The tenant kernel every bundled configuration boots into.
pub fn default_tenant_kernel() -> Stage {
    Stage::new(
        "tenant-kernel",
        default_payload("tenant-kernel"),
        PCR_PAYLOADS,
        StageOrigin::Downloaded,
    )
    .expect("valid built-in stage")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FirmwareKind {
    /// Vendor UEFI that network-boots iPXE, which downloads Heads.
    StockUefi,
    /// Heads (coreboot/NERF) flashed into the platform ROM.
    HeadsFlashed,
}

impl FirmwareKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FirmwareKind::StockUefi => "stock-uefi",
            FirmwareKind::HeadsFlashed => "heads",
        }
    }

    /// Whitelist entry that covers this firmware path's boot chain.
    pub fn policy_name(self) -> &'static str {
        match self {
            FirmwareKind::StockUefi => "uefi-default",
            FirmwareKind::HeadsFlashed => "heads-default",
        }
    }

    /// Stage layout (name, pcr, origin) of the boot chain.
    pub fn stage_layout(self) -> &'static [(&'static str, PcrIndex, StageOrigin)] {
        use StageOrigin::*;
        match self {
            FirmwareKind::StockUefi => &[
                ("uefi", PCR_FIRMWARE, Flashed),
                ("ipxe", PCR_BOOTLOADER, Flashed),
                ("heads-kernel", PCR_PAYLOADS, Downloaded),
                ("heads-initramfs", PCR_PAYLOADS, Downloaded),
                ("attestation-client", PCR_PAYLOADS, Downloaded),
            ],
            FirmwareKind::HeadsFlashed => &[
                ("acm", PCR_FIRMWARE, Flashed),
                ("boot-block", PCR_FIRMWARE, Flashed),
                ("nerf-ram-stage", PCR_FIRMWARE, Flashed),
                ("heads-kernel", PCR_BOOTLOADER, Flashed),
                ("heads-initramfs", PCR_BOOTLOADER, Flashed),
                ("attestation-client", PCR_PAYLOADS, Downloaded),
            ],
        }
    }

    pub fn pristine_stages(self) -> Vec<Stage> {
        self.stage_layout()
            .iter()
            .map(|(name, pcr, origin)| {
                Stage::new(*name, default_payload(name), *pcr, *origin).expect("valid layout")
            })
            .collect()
    }
}

impl fmt::Display for FirmwareKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FirmwareKind {
    type Err = NodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stock-uefi" | "uefi" => Ok(FirmwareKind::StockUefi),
            "heads" | "heads-flashed" => Ok(FirmwareKind::HeadsFlashed),
            other => Err(NodeError::InvalidConfig(format!("unknown firmware kind {other:?}"))),
        }
    }
}

/// Boot phases in the order they are reached within one power cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BootPhase {
    Off,
    Measuring,
    AwaitingAttestation,
    KeyReceived,
    TenantOs,
}

impl BootPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            BootPhase::Off => "Off",
            BootPhase::Measuring => "Measuring",
            BootPhase::AwaitingAttestation => "AwaitingAttestation",
            BootPhase::KeyReceived => "KeyReceived",
            BootPhase::TenantOs => "TenantOs",
        }
    }
}

impl fmt::Display for BootPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BootPhase {
    type Err = NodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            BootPhase::Off,
            BootPhase::Measuring,
            BootPhase::AwaitingAttestation,
            BootPhase::KeyReceived,
            BootPhase::TenantOs,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| NodeError::InvalidConfig(format!("unknown boot phase {s:?}")))
    }
}

/// 32-byte symmetric enclave key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct EnclaveKey(pub [u8; 32]);

impl EnclaveKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        EnclaveKey(k)
    }

    /// Recombines a two-party XOR split.
    pub fn combine(tenant_share: &[u8; 32], verifier_share: &[u8; 32]) -> Self {
        let mut k = [0u8; 32];
        for (i, b) in k.iter_mut().enumerate() {
            *b = tenant_share[i] ^ verifier_share[i];
        }
        EnclaveKey(k)
    }

    /// Splits into `(tenant_share, verifier_share)` with a random tenant share.
    pub fn split<R: RngCore + CryptoRng>(&self, rng: &mut R) -> ([u8; 32], [u8; 32]) {
        let mut u = [0u8; 32];
        rng.fill_bytes(&mut u);
        let v = EnclaveKey::combine(&u, &self.0).0;
        (u, v)
    }
}

impl fmt::Debug for EnclaveKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EnclaveKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeEvent {
    Measure {
        stage: String,
        pcr: PcrIndex,
        digest: Digest,
        by: String,
    },
    Execute {
        stage: String,
    },
    Scrub {
        bytes: usize,
    },
    KeyCombined,
    Kexec {
        stage: String,
    },
}

impl NodeEvent {
    pub fn name(&self) -> &'static str {
        match self {
            NodeEvent::Measure { .. } => "MeasureEvent",
            NodeEvent::Execute { .. } => "ExecuteEvent",
            NodeEvent::Scrub { .. } => "ScrubEvent",
            NodeEvent::KeyCombined => "KeyCombinedEvent",
            NodeEvent::Kexec { .. } => "KexecEvent",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            NodeEvent::Measure {
                stage,
                pcr,
                digest,
                by,
            } => format!("{stage}/pcr{pcr}/{digest}/by:{by}"),
            NodeEvent::Execute { stage } | NodeEvent::Kexec { stage } => stage.clone(),
            NodeEvent::Scrub { bytes } => format!("{bytes}"),
            NodeEvent::KeyCombined => "-".to_string(),
        }
    }
}

/// Everything needed to re-create a node, including the TPM's
/// manufacturing seed and its volatile register contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSnapshot {
    pub uuid: String,
    pub firmware: FirmwareKind,
    pub tpm_seed: [u8; 32],
    pub pcrs: Vec<(PcrIndex, Digest)>,
    pub measurement_log: Vec<(PcrIndex, Digest)>,
    pub stages: Vec<Stage>,
    pub memory: Vec<u8>,
    pub nics: Vec<String>,
    pub phase: BootPhase,
    pub key: Option<EnclaveKey>,
    pub responsive: bool,
}

#[derive(Debug)]
pub struct NodeSim {
    uuid: String,
    tpm: Tpm,
    firmware: FirmwareKind,
    stages: Vec<Stage>,
    memory: Vec<u8>,
    nics: Vec<String>,
    phase: BootPhase,
    key: Option<EnclaveKey>,
    responsive: bool,
    measurement_log: Vec<(PcrIndex, Digest)>,
}

impl NodeSim {
    pub fn new(
        identity: TpmIdentity,
        firmware: FirmwareKind,
        stages: Vec<Stage>,
        memory_size: usize,
    ) -> Result<Self, NodeError> {
        if stages.is_empty() {
            return Err(NodeError::InvalidConfig(format!(
                "node {} has an empty stage list",
                identity.uuid()
            )));
        }
        Ok(NodeSim {
            uuid: identity.uuid().to_string(),
            tpm: Tpm::new(identity),
            firmware,
            stages,
            memory: vec![0; memory_size],
            nics: vec![DEFAULT_NIC.to_string()],
            phase: BootPhase::Off,
            key: None,
            responsive: true,
            measurement_log: Vec::new(),
        })
    }

    /// A node with its firmware path's pristine stage payloads.
    pub fn pristine<R: RngCore + CryptoRng>(
        uuid: impl Into<String>,
        firmware: FirmwareKind,
        rng: &mut R,
    ) -> Self {
        NodeSim::new(
            TpmIdentity::generate(uuid, rng),
            firmware,
            firmware.pristine_stages(),
            DEFAULT_MEMORY_SIZE,
        )
        .expect("pristine stage list is non-empty")
    }

    pub fn uuid(&self) -> &str {
        &self.uuid
    }

    pub fn firmware(&self) -> FirmwareKind {
        self.firmware
    }

    pub fn phase(&self) -> BootPhase {
        self.phase
    }

    pub fn tpm(&self) -> &Tpm {
        &self.tpm
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn nics(&self) -> &[String] {
        &self.nics
    }

    pub fn key(&self) -> Option<&EnclaveKey> {
        self.key.as_ref()
    }

    pub fn memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn is_responsive(&self) -> bool {
        self.responsive
    }

    /// Fault injection: an unresponsive node returns no quotes.
    pub fn set_responsive(&mut self, responsive: bool) {
        self.responsive = responsive;
    }

    /// Extends performed since the last reset, in order.
    pub fn measurement_log(&self) -> &[(PcrIndex, Digest)] {
        &self.measurement_log
    }

    fn measure(&mut self, stage: usize, by: &str) -> NodeEvent {
        let (pcr, digest, name) = {
            let s = &self.stages[stage];
            (s.pcr, s.digest(), s.name.clone())
        };
        self.extend(pcr, digest);
        NodeEvent::Measure {
            stage: name,
            pcr,
            digest,
            by: by.to_string(),
        }
    }

    fn extend(&mut self, pcr: PcrIndex, digest: Digest) {
        self.tpm.bank.extend(pcr, &digest);
        self.measurement_log.push((pcr, digest));
    }

    /// Runs the measured boot chain: every stage is measured by its
    /// predecessor (the first by the hardware root of trust) and then
    /// executed. Heads zeroes memory once its kernel runs.
    pub fn power_on(&mut self) -> Result<Vec<NodeEvent>, NodeError> {
        if self.phase != BootPhase::Off {
            return Err(NodeError::AlreadyPowered(self.uuid.clone()));
        }
        self.tpm.bank.reset();
        self.measurement_log.clear();
        self.phase = BootPhase::Measuring;

        let mut events = Vec::with_capacity(self.stages.len() * 2 + 1);
        let mut scrubbed = false;
        let mut measured_by = ROOT_OF_TRUST.to_string();
        for i in 0..self.stages.len() {
            events.push(self.measure(i, &measured_by));
            let name = self.stages[i].name.clone();
            events.push(NodeEvent::Execute {
                stage: name.clone(),
            });
            if !scrubbed && name == "heads-kernel" {
                events.push(self.scrub_memory());
                scrubbed = true;
            }
            measured_by = name;
        }
        if !scrubbed {
            events.push(self.scrub_memory());
        }
        self.phase = BootPhase::AwaitingAttestation;
        Ok(events)
    }

    pub fn power_off(&mut self) {
        self.phase = BootPhase::Off;
        self.key = None;
    }

    pub fn scrub_memory(&mut self) -> NodeEvent {
        self.memory.fill(0);
        NodeEvent::Scrub {
            bytes: self.memory.len(),
        }
    }

    pub fn write_memory(&mut self, offset: usize, data: &[u8]) -> Result<(), NodeError> {
        let range = self.memory_range(offset, data.len())?;
        self.memory[range].copy_from_slice(data);
        Ok(())
    }

    pub fn read_memory(&self, offset: usize, len: usize) -> Result<&[u8], NodeError> {
        let range = self.memory_range(offset, len)?;
        Ok(&self.memory[range])
    }

    fn memory_range(&self, offset: usize, len: usize) -> Result<std::ops::Range<usize>, NodeError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.memory.len() => Ok(offset..end),
            _ => Err(NodeError::MemoryOutOfRange {
                offset,
                len,
                size: self.memory.len(),
            }),
        }
    }

    /// Boot-time quote over PCRs {0, 4, 7}, served by the attestation client
    /// while the node waits in the airlock.
    pub fn send_attestation_quote(&self, nonce: [u8; NONCE_LEN]) -> Result<Quote, NodeError> {
        if self.phase != BootPhase::AwaitingAttestation {
            return Err(NodeError::NotAwaitingAttestation(self.uuid.clone()));
        }
        self.quote(nonce)
    }

    /// Quote served by the continuous-attestation agent of a running tenant OS.
    pub fn runtime_quote(&self, nonce: [u8; NONCE_LEN]) -> Result<Quote, NodeError> {
        if self.phase != BootPhase::TenantOs {
            return Err(NodeError::WrongPhase {
                node: self.uuid.clone(),
                expected: BootPhase::TenantOs,
                actual: self.phase,
            });
        }
        self.quote(nonce)
    }

    fn quote(&self, nonce: [u8; NONCE_LEN]) -> Result<Quote, NodeError> {
        if !self.responsive {
            return Err(NodeError::Unresponsive(self.uuid.clone()));
        }
        Ok(self.tpm.quote(nonce, &attested_selection())?)
    }

    pub fn activate_credential(&self, challenge: &[u8]) -> Result<Vec<u8>, NodeError> {
        Ok(self.tpm.identity.activate_credential(challenge)?)
    }

    /// Combines the two key shares, measures the tenant kernel into PCR 7
    /// and kexecs into it.
    pub fn receive_key_and_boot_os(
        &mut self,
        tenant_share: &[u8; 32],
        verifier_share: &[u8; 32],
        os_kernel: &Stage,
    ) -> Result<Vec<NodeEvent>, NodeError> {
        self.expect_phase(BootPhase::AwaitingAttestation)?;
        self.key = Some(EnclaveKey::combine(tenant_share, verifier_share));
        self.phase = BootPhase::KeyReceived;
        let mut events = vec![NodeEvent::KeyCombined];
        events.extend(self.kexec(os_kernel));
        Ok(events)
    }

    /// Kexec path for profiles that skip key bootstrap.
    pub fn boot_os(&mut self, os_kernel: &Stage) -> Result<Vec<NodeEvent>, NodeError> {
        self.expect_phase(BootPhase::AwaitingAttestation)?;
        Ok(self.kexec(os_kernel))
    }

    fn kexec(&mut self, os_kernel: &Stage) -> Vec<NodeEvent> {
        let by = self
            .stages
            .last()
            .map(|s| s.name.clone())
            .unwrap_or_else(|| ROOT_OF_TRUST.to_string());
        let digest = os_kernel.digest();
        self.extend(os_kernel.pcr, digest);
        self.phase = BootPhase::TenantOs;
        vec![
            NodeEvent::Measure {
                stage: os_kernel.name.clone(),
                pcr: os_kernel.pcr,
                digest,
                by,
            },
            NodeEvent::Kexec {
                stage: os_kernel.name.clone(),
            },
        ]
    }

    fn expect_phase(&self, expected: BootPhase) -> Result<(), NodeError> {
        if self.phase == expected {
            Ok(())
        } else {
            Err(NodeError::WrongPhase {
                node: self.uuid.clone(),
                expected,
                actual: self.phase,
            })
        }
    }

    /// Overwrites one byte of a stage payload.
    ///
    /// On a powered node the changed component is re-measured into its PCR
    /// (runtime integrity measurement), so the next quote reflects it. A
    /// write of the byte already present changes nothing.
    pub fn tamper(
        &mut self,
        stage_name: &str,
        position: usize,
        value: u8,
    ) -> Result<Option<NodeEvent>, NodeError> {
        let idx = self
            .stages
            .iter()
            .position(|s| s.name == stage_name)
            .ok_or_else(|| NodeError::NoSuchStage {
                node: self.uuid.clone(),
                stage: stage_name.to_string(),
            })?;
        let stage = &mut self.stages[idx];
        let len = stage.payload.len();
        let byte = stage
            .payload
            .get_mut(position)
            .ok_or_else(|| NodeError::PositionOutOfRange {
                stage: stage_name.to_string(),
                position,
                len,
            })?;
        if *byte == value {
            return Ok(None);
        }
        *byte = value;
        if self.phase == BootPhase::Off {
            return Ok(None);
        }
        Ok(Some(self.measure(idx, "runtime-agent")))
    }

    /// Provider cleaning: reflash every stage with the given pristine set.
    pub fn restore_stages(&mut self, stages: Vec<Stage>) -> Result<(), NodeError> {
        if stages.is_empty() {
            return Err(NodeError::InvalidConfig("empty stage list".into()));
        }
        self.stages = stages;
        Ok(())
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            uuid: self.uuid.clone(),
            firmware: self.firmware,
            tpm_seed: self.tpm.identity.primary_seed(),
            pcrs: self
                .tpm
                .bank
                .registers()
                .iter()
                .enumerate()
                .filter(|(_, d)| **d != Digest::ZERO)
                .map(|(i, d)| (PcrIndex::new(i as u32).expect("bank index"), *d))
                .collect(),
            measurement_log: self.measurement_log.clone(),
            stages: self.stages.clone(),
            memory: self.memory.clone(),
            nics: self.nics.clone(),
            phase: self.phase,
            key: self.key,
            responsive: self.responsive,
        }
    }

    pub fn from_snapshot(s: NodeSnapshot) -> Result<Self, NodeError> {
        let mut node = NodeSim::new(
            TpmIdentity::from_primary_seed(s.uuid.clone(), s.tpm_seed),
            s.firmware,
            s.stages,
            s.memory.len(),
        )?;
        node.memory = s.memory;
        node.nics = s.nics;
        node.phase = s.phase;
        node.key = s.key;
        node.responsive = s.responsive;
        // The bank is a pure function of the log; check the stored values agree.
        let replayed = crate::tpm::PcrBank::replay(&s.measurement_log);
        for (i, d) in &s.pcrs {
            if replayed.read(*i) != *d {
                return Err(NodeError::InvalidConfig(format!(
                    "node {}: stored PCR {i} does not match its measurement log",
                    node.uuid
                )));
            }
        }
        node.tpm.bank = replayed;
        node.measurement_log = s.measurement_log;
        Ok(node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::{verify_quote_signature, PcrBank};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn node(kind: FirmwareKind) -> NodeSim {
        NodeSim::pristine("node-00", kind, &mut ChaCha20Rng::seed_from_u64(1))
    }

    fn golden(kind: FirmwareKind) -> PcrBank {
        let log: Vec<_> = kind
            .pristine_stages()
            .iter()
            .map(|s| (s.pcr(), Digest::of(s.payload())))
            .collect();
        PcrBank::replay(&log)
    }

    #[test]
    fn heads_boot_measures_six_stages() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        let events = n.power_on().unwrap();
        let measures: Vec<_> = events
            .iter()
            .filter(|e| matches!(e, NodeEvent::Measure { .. }))
            .collect();
        assert_eq!(measures.len(), 6);
        assert_eq!(n.phase(), BootPhase::AwaitingAttestation);
        assert_eq!(&n.tpm().bank, &golden(FirmwareKind::HeadsFlashed));
    }

    #[test]
    fn stock_uefi_puts_three_downloads_in_pcr7() {
        let mut n = node(FirmwareKind::StockUefi);
        let events = n.power_on().unwrap();
        let pcr7: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                NodeEvent::Measure { stage, pcr, .. } if *pcr == PCR_PAYLOADS => Some(stage.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(pcr7, ["heads-kernel", "heads-initramfs", "attestation-client"]);
        assert_eq!(n.tpm().bank.read(PCR_PAYLOADS), golden(FirmwareKind::StockUefi).read(PCR_PAYLOADS));
    }

    #[test]
    fn measure_precedes_execute_in_chain_order() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        let events = n.power_on().unwrap();
        let mut prev = ROOT_OF_TRUST.to_string();
        let mut expect_measure = true;
        for e in events.iter().filter(|e| !matches!(e, NodeEvent::Scrub { .. })) {
            match e {
                NodeEvent::Measure { stage, by, .. } => {
                    assert!(expect_measure);
                    assert_eq!(by, &prev);
                    prev = stage.clone();
                    expect_measure = false;
                }
                NodeEvent::Execute { stage } => {
                    assert!(!expect_measure);
                    assert_eq!(stage, &prev);
                    expect_measure = true;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn empty_stage_list_is_invalid() {
        let id = TpmIdentity::generate("n", &mut ChaCha20Rng::seed_from_u64(0));
        let err = NodeSim::new(id, FirmwareKind::HeadsFlashed, vec![], 16).unwrap_err();
        assert!(matches!(err, NodeError::InvalidConfig(_)));
    }

    #[test]
    fn stage_rejects_unmapped_pcr_and_empty_payload() {
        let pcr3 = PcrIndex::new(3).unwrap();
        assert!(Stage::new("x", vec![1], pcr3, StageOrigin::Flashed).is_err());
        assert!(Stage::new("x", vec![], PCR_FIRMWARE, StageOrigin::Flashed).is_err());
    }

    #[test]
    fn double_power_on_fails() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.power_on().unwrap();
        assert_eq!(n.power_on(), Err(NodeError::AlreadyPowered("node-00".into())));
    }

    #[test]
    fn scrub_zeroes_memory() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.write_memory(0, &vec![0xff; DEFAULT_MEMORY_SIZE]).unwrap();
        n.scrub_memory();
        assert!(n.memory().iter().all(|b| *b == 0));
        n.scrub_memory();
        assert!(n.memory().iter().all(|b| *b == 0));
    }

    #[test]
    fn power_on_scrubs_prior_contents() {
        let mut n = node(FirmwareKind::StockUefi);
        n.write_memory(100, b"secret").unwrap();
        let events = n.power_on().unwrap();
        assert!(events.iter().any(|e| matches!(e, NodeEvent::Scrub { .. })));
        assert_eq!(n.read_memory(100, 6).unwrap(), &[0; 6]);
    }

    #[test]
    fn quote_verifies_and_tracks_tamper() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.power_on().unwrap();
        let q = n.send_attestation_quote([5; 16]).unwrap();
        assert!(verify_quote_signature(&n.tpm().identity.aik_public(), &q));
        assert_eq!(q.value_of(PCR_BOOTLOADER), Some(golden(FirmwareKind::HeadsFlashed).read(PCR_BOOTLOADER)));

        let mut t = node(FirmwareKind::HeadsFlashed);
        t.tamper("heads-kernel", 10, 0x00).unwrap();
        t.power_on().unwrap();
        let q = t.send_attestation_quote([5; 16]).unwrap();
        assert_ne!(q.value_of(PCR_BOOTLOADER), Some(golden(FirmwareKind::HeadsFlashed).read(PCR_BOOTLOADER)));
        assert_eq!(q.value_of(PCR_FIRMWARE), Some(golden(FirmwareKind::HeadsFlashed).read(PCR_FIRMWARE)));
    }

    #[test]
    fn identical_byte_tamper_is_noop() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        let original = n.stages()[1].payload()[0];
        n.tamper("boot-block", 0, original).unwrap();
        n.power_on().unwrap();
        assert_eq!(n.tpm().bank, golden(FirmwareKind::HeadsFlashed));
    }

    #[test]
    fn tamper_errors() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        assert!(matches!(n.tamper("bios", 0, 1), Err(NodeError::NoSuchStage { .. })));
        assert!(matches!(
            n.tamper("acm", 10_000, 1),
            Err(NodeError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn runtime_tamper_extends_immediately() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.power_on().unwrap();
        let before = n.tpm().bank.read(PCR_FIRMWARE);
        let ev = n.tamper("acm", 0, b'X').unwrap();
        assert!(matches!(ev, Some(NodeEvent::Measure { .. })));
        assert_ne!(n.tpm().bank.read(PCR_FIRMWARE), before);
    }

    #[test]
    fn key_receipt_and_kexec() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.power_on().unwrap();
        let pcr7_extends = |n: &NodeSim| n.measurement_log().iter().filter(|(i, _)| *i == PCR_PAYLOADS).count();
        let before = pcr7_extends(&n);
        let (u, v) = ([0x0f; 32], [0xf0; 32]);
        let events = n
            .receive_key_and_boot_os(&u, &v, &default_tenant_kernel())
            .unwrap();
        assert_eq!(n.key(), Some(&EnclaveKey([0xff; 32])));
        assert_eq!(pcr7_extends(&n), before + 1);
        assert_eq!(n.phase(), BootPhase::TenantOs);
        let names: Vec<_> = events.iter().map(NodeEvent::name).collect();
        assert_eq!(names, ["KeyCombinedEvent", "MeasureEvent", "KexecEvent"]);
        assert_eq!(
            n.send_attestation_quote([0; 16]),
            Err(NodeError::NotAwaitingAttestation("node-00".into()))
        );
    }

    #[test]
    fn key_receipt_requires_awaiting_phase() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        let err = n
            .receive_key_and_boot_os(&[0; 32], &[0; 32], &default_tenant_kernel())
            .unwrap_err();
        assert!(matches!(err, NodeError::WrongPhase { .. }));
        assert!(n.key().is_none());
    }

    #[test]
    fn power_off_erases_key_and_reboot_is_reproducible() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.power_on().unwrap();
        let first = n.tpm().bank.clone();
        n.receive_key_and_boot_os(&[1; 32], &[2; 32], &default_tenant_kernel())
            .unwrap();
        n.power_off();
        assert!(n.key().is_none());
        n.power_off();
        assert_eq!(n.phase(), BootPhase::Off);
        n.power_on().unwrap();
        assert_eq!(n.tpm().bank, first);
    }

    #[test]
    fn unresponsive_node_returns_no_quote() {
        let mut n = node(FirmwareKind::HeadsFlashed);
        n.power_on().unwrap();
        n.set_responsive(false);
        assert!(matches!(n.send_attestation_quote([0; 16]), Err(NodeError::Unresponsive(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut n = node(FirmwareKind::StockUefi);
        n.power_on().unwrap();
        n.write_memory(3, b"abc").unwrap();
        let snap = n.snapshot();
        let back = NodeSim::from_snapshot(snap.clone()).unwrap();
        assert_eq!(back.snapshot(), snap);
        assert_eq!(back.tpm().identity.aik_public(), n.tpm().identity.aik_public());
    }
}
