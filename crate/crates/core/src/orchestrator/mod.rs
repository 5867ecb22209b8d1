//! Tenant-side workflow driver.
//!
//! [`Cloud`] hosts every service of the simulated cloud and plays the
//! tenant role: it walks nodes through the Free → Airlock → Allocated
//! lifecycle, releases and cleans them, and reacts to revocations raised
//! by continuous attestation.
//!
//! Node state changes that depend on switch programming are attached to the
//! ticket of the operation that makes them true and fire in the same engine
//! step, so a node's recorded state and its port set never disagree.

mod admission;
pub mod invariants;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::attestation::{
    AttestationError, AttestationResult, AttestationService, Whitelist,
};
use crate::isolation::{
    Endpoint, IsolationError, IsolationService, NetId, OpKind, Ticket, Visibility,
    DEFAULT_VLAN_RANGE,
};
use crate::node::{
    default_tenant_kernel, BootPhase, EnclaveKey, FirmwareKind, NodeError, NodeEvent, NodeSim,
    Stage, DEFAULT_MEMORY_SIZE,
};
use crate::provisioning::{ImageId, ProvisioningError, ProvisioningService};
use crate::tpm::TpmIdentity;

pub use admission::AdmitOutcome;
use invariants::{TrackSeed, Violation};
use trace::{EventKind, NetRole, Trace};

/// Trace attribution for events that belong to no node.
pub const CLOUD_ACTOR: &str = "-";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CloudError {
    #[error(transparent)]
    Isolation(#[from] IsolationError),
    #[error(transparent)]
    Provisioning(#[from] ProvisioningError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("node {uuid}: cannot {op} in state {state}")]
    InvalidTransition {
        uuid: String,
        state: NodeState,
        op: &'static str,
    },
    #[error("no such node {0}")]
    NoSuchNode(String),
    #[error("no such tenant {0}")]
    NoSuchTenant(String),
    #[error("tenant {0} already exists")]
    TenantExists(String),
    #[error("duplicate node uuid {0}")]
    DuplicateNode(String),
    #[error("invalid trust profile {0}")]
    InvalidProfile(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeState {
    Free,
    Airlock,
    Allocated,
    Rejected,
}

impl NodeState {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Free => "Free",
            NodeState::Airlock => "Airlock",
            NodeState::Allocated => "Allocated",
            NodeState::Rejected => "Rejected",
        }
    }

    pub fn can_transition_to(self, to: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (self, to),
            (Free, Airlock)
                | (Airlock, Allocated)
                | (Airlock, Rejected)
                | (Allocated, Rejected)
                | (Allocated, Free)
                | (Rejected, Free)
        )
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NodeState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Free" => Ok(NodeState::Free),
            "Airlock" => Ok(NodeState::Airlock),
            "Allocated" => Ok(NodeState::Allocated),
            "Rejected" => Ok(NodeState::Rejected),
            other => Err(format!("unknown node state {other:?}")),
        }
    }
}

/// A tenant's point on the cost/security spectrum.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrustProfile {
    pub name: String,
    pub attested: bool,
    pub encrypt_storage: bool,
    pub encrypt_network: bool,
}

impl TrustProfile {
    pub fn new(
        name: impl Into<String>,
        attested: bool,
        encrypt_storage: bool,
        encrypt_network: bool,
    ) -> Result<Self, CloudError> {
        let name = name.into();
        // Both encryptions need the key that only attestation bootstraps.
        if (encrypt_storage || encrypt_network) && !attested {
            return Err(CloudError::InvalidProfile(name));
        }
        Ok(TrustProfile {
            name,
            attested,
            encrypt_storage,
            encrypt_network,
        })
    }

    pub fn full() -> Self {
        TrustProfile::new("full", true, true, true).expect("valid")
    }

    pub fn attested() -> Self {
        TrustProfile::new("attested", true, false, false).expect("valid")
    }

    pub fn unattested() -> Self {
        TrustProfile::new("unattested", false, false, false).expect("valid")
    }

    pub fn builtin(name: &str) -> Result<Self, CloudError> {
        match name {
            "full" => Ok(Self::full()),
            "attested" => Ok(Self::attested()),
            "unattested" => Ok(Self::unattested()),
            other => Err(CloudError::InvalidProfile(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub uuid: String,
    pub state: NodeState,
    pub tenant: Option<String>,
    pub profile: Option<TrustProfile>,
    pub airlock_net: Option<NetId>,
    pub image: Option<ImageId>,
    /// Trace sequence numbers of this node's events.
    pub history: Vec<u64>,
    /// Blocks written by the current storage session.
    pub session_writes: BTreeSet<u64>,
    pub reason: Option<String>,
}

impl NodeRecord {
    fn free(uuid: &str) -> Self {
        NodeRecord {
            uuid: uuid.to_string(),
            state: NodeState::Free,
            tenant: None,
            profile: None,
            airlock_net: None,
            image: None,
            history: Vec::new(),
            session_writes: BTreeSet::new(),
            reason: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tenant {
    pub name: String,
    pub profile: TrustProfile,
    pub project: String,
    /// Enclave-wide key K; each node gets K split as U (kept here) and V
    /// (deposited with the verifier).
    pub key: EnclaveKey,
    pub shares: BTreeMap<String, [u8; 32]>,
    pub enclave_nets: Vec<NetId>,
    /// Every node ever handed to this tenant, in admission order.
    pub admitted: Vec<String>,
    pub retained_images: Vec<ImageId>,
}

/// One physical node as delivered by the provider.
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub uuid: String,
    pub firmware: FirmwareKind,
    /// Provider-pristine stages, restored on cleaning.
    pub stages: Vec<Stage>,
    pub memory: usize,
    /// (stage, position, value) mutations present at delivery.
    pub preboot_tampers: Vec<(String, usize, u8)>,
}

impl NodeSpec {
    pub fn pristine(uuid: impl Into<String>, firmware: FirmwareKind) -> Self {
        NodeSpec {
            uuid: uuid.into(),
            firmware,
            stages: firmware.pristine_stages(),
            memory: DEFAULT_MEMORY_SIZE,
            preboot_tampers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FleetSpec {
    pub nodes: Vec<NodeSpec>,
    pub vlan_range: (u16, u16),
    pub base_image: Vec<u8>,
    pub tenant_kernel: Stage,
    pub whitelist: Whitelist,
    pub poll_interval: u64,
}

pub const DEFAULT_BASE_IMAGE_SIZE: usize = 64 * 1024;

/// Deterministic base OS image: each 4 KiB block carries its own label.
pub fn default_base_image(len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut block = 0;
    while out.len() < len {
        let label = format!("base-image block {block:04}|");
        out.extend(label.bytes().cycle().take(4096.min(len - out.len())));
        block += 1;
    }
    out
}

/// Runtime policy name for a boot policy: the boot chain plus the tenant kernel.
pub fn runtime_policy(boot_policy: &str) -> String {
    format!("{boot_policy}+os")
}

/// Whitelist of the pristine chains of both firmware paths, each with and
/// without the tenant kernel.
pub fn default_whitelist(tenant_kernel: &Stage) -> Whitelist {
    let mut wl = Whitelist::new();
    for kind in [FirmwareKind::HeadsFlashed, FirmwareKind::StockUefi] {
        let stages = kind.pristine_stages();
        wl.insert_stages(kind.policy_name(), &stages);
        wl.insert_stages(
            runtime_policy(kind.policy_name()),
            stages.iter().chain(std::iter::once(tenant_kernel)),
        );
    }
    wl
}

impl FleetSpec {
    pub fn uniform(count: usize, firmware: FirmwareKind) -> Self {
        let nodes = (0..count)
            .map(|i| NodeSpec::pristine(format!("node-{i:02}"), firmware))
            .collect();
        Self::with_nodes(nodes)
    }

    pub fn with_nodes(nodes: Vec<NodeSpec>) -> Self {
        let tenant_kernel = default_tenant_kernel();
        FleetSpec {
            nodes,
            vlan_range: DEFAULT_VLAN_RANGE,
            base_image: default_base_image(DEFAULT_BASE_IMAGE_SIZE),
            whitelist: default_whitelist(&tenant_kernel),
            tenant_kernel,
            poll_interval: 1,
        }
    }
}

/// Persisted pieces of a quiescent [`Cloud`].
pub(crate) struct CloudParts {
    pub isolation: IsolationService,
    pub provisioning: ProvisioningService,
    pub registrar: crate::attestation::Registrar,
    pub verifier: crate::attestation::Verifier,
    pub nodes: BTreeMap<String, NodeSim>,
    pub pristine: BTreeMap<String, Vec<Stage>>,
    pub records: BTreeMap<String, NodeRecord>,
    pub tenants: BTreeMap<String, Tenant>,
    pub base_image: ImageId,
    pub tenant_kernel: Stage,
    pub tick: u64,
}

struct Transition {
    uuid: String,
    to: NodeState,
    free_in_pool: bool,
}

pub struct Cloud {
    pub(crate) isolation: IsolationService,
    pub(crate) provisioning: ProvisioningService,
    pub(crate) attestation: AttestationService<ChaCha20Rng>,
    pub(crate) nodes: BTreeMap<String, NodeSim>,
    pub(crate) pristine: BTreeMap<String, Vec<Stage>>,
    pub(crate) records: BTreeMap<String, NodeRecord>,
    pub(crate) tenants: BTreeMap<String, Tenant>,
    pub(crate) base_image: ImageId,
    pub(crate) tenant_kernel: Stage,
    pub(crate) tick: u64,
    pub(crate) airlock_owner: BTreeMap<NetId, String>,
    rng: ChaCha20Rng,
    trace: Trace,
    hooks: BTreeMap<u64, Transition>,
    live_violations: Vec<Violation>,
    monitor: bool,
    trace_seed: BTreeMap<String, TrackSeed>,
    watchers: BTreeSet<String>,
    probes: ProbeStats,
}

/// Reachability probes issued by watched attacker nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProbeStats {
    pub probes: u64,
    pub hits: u64,
}

impl fmt::Debug for Cloud {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cloud")
            .field("nodes", &self.nodes.len())
            .field("tenants", &self.tenants.keys().collect::<Vec<_>>())
            .field("tick", &self.tick)
            .finish_non_exhaustive()
    }
}

impl Cloud {
    pub fn new(fleet: FleetSpec, seed: u64) -> Result<Self, CloudError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut isolation = IsolationService::new(fleet.vlan_range);
        let mut provisioning = ProvisioningService::new();
        let base_image = provisioning.create_image(&fleet.base_image);
        let mut nodes = BTreeMap::new();
        let mut pristine = BTreeMap::new();
        let mut records = BTreeMap::new();
        for spec in fleet.nodes {
            if nodes.contains_key(&spec.uuid) {
                return Err(CloudError::DuplicateNode(spec.uuid));
            }
            let identity = TpmIdentity::generate(spec.uuid.clone(), &mut rng);
            let mut node = NodeSim::new(identity, spec.firmware, spec.stages.clone(), spec.memory)?;
            for (stage, position, value) in &spec.preboot_tampers {
                node.tamper(stage, *position, *value)?;
            }
            isolation.add_node(&spec.uuid, node.nics().to_vec())?;
            records.insert(spec.uuid.clone(), NodeRecord::free(&spec.uuid));
            pristine.insert(spec.uuid.clone(), spec.stages);
            nodes.insert(spec.uuid, node);
        }
        let attestation_rng = ChaCha20Rng::seed_from_u64(rng.gen());
        let mut attestation = AttestationService::new(fleet.whitelist, attestation_rng);
        attestation.verifier.set_poll_interval(fleet.poll_interval);
        Ok(Cloud {
            isolation,
            provisioning,
            attestation,
            nodes,
            pristine,
            records,
            tenants: BTreeMap::new(),
            base_image,
            tenant_kernel: fleet.tenant_kernel,
            tick: 0,
            airlock_owner: BTreeMap::new(),
            rng,
            trace: Trace::default(),
            hooks: BTreeMap::new(),
            live_violations: Vec::new(),
            monitor: true,
            trace_seed: BTreeMap::new(),
            watchers: BTreeSet::new(),
            probes: ProbeStats::default(),
        })
    }

    /// Rebuilds a quiescent cloud from persisted parts. Trace numbering
    /// resumes at `trace_seq` and trace checks start from the restored state.
    pub(crate) fn restore(parts: CloudParts, trace_seq: u64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let attestation_rng = ChaCha20Rng::seed_from_u64(rng.gen());
        let mut attestation = AttestationService::new(Whitelist::new(), attestation_rng);
        attestation.registrar = parts.registrar;
        attestation.verifier = parts.verifier;
        let mut cloud = Cloud {
            isolation: parts.isolation,
            provisioning: parts.provisioning,
            attestation,
            nodes: parts.nodes,
            pristine: parts.pristine,
            records: parts.records,
            tenants: parts.tenants,
            base_image: parts.base_image,
            tenant_kernel: parts.tenant_kernel,
            tick: parts.tick,
            airlock_owner: BTreeMap::new(),
            rng,
            trace: Trace::starting_at(trace_seq),
            hooks: BTreeMap::new(),
            live_violations: Vec::new(),
            monitor: true,
            trace_seed: BTreeMap::new(),
            watchers: BTreeSet::new(),
            probes: ProbeStats::default(),
        };
        cloud.seed_trace_tracking();
        cloud
    }

    /// Reseeds the workflow randomness (allocation choice, key splits,
    /// nonces). Used when a persisted cloud is reloaded.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        let att = ChaCha20Rng::seed_from_u64(self.rng.gen());
        *self.attestation.rng() = att;
    }

    /// Toggles the per-step live invariant monitor.
    pub fn set_monitor(&mut self, on: bool) {
        self.monitor = on;
    }

    pub fn isolation(&self) -> &IsolationService {
        &self.isolation
    }

    pub fn provisioning(&self) -> &ProvisioningService {
        &self.provisioning
    }

    pub fn attestation(&self) -> &AttestationService<ChaCha20Rng> {
        &self.attestation
    }

    pub fn node(&self, uuid: &str) -> Option<&NodeSim> {
        self.nodes.get(uuid)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSim> {
        self.nodes.values()
    }

    pub fn record(&self, uuid: &str) -> Option<&NodeRecord> {
        self.records.get(uuid)
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.records.values()
    }

    pub fn state_of(&self, uuid: &str) -> Option<NodeState> {
        self.records.get(uuid).map(|r| r.state)
    }

    pub fn tenant(&self, name: &str) -> Option<&Tenant> {
        self.tenants.get(name)
    }

    pub fn tenants(&self) -> impl Iterator<Item = &Tenant> {
        self.tenants.values()
    }

    pub fn base_image(&self) -> ImageId {
        self.base_image
    }

    pub fn tenant_kernel(&self) -> &Stage {
        &self.tenant_kernel
    }

    pub fn current_tick(&self) -> u64 {
        self.tick
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// True when no switch operation is pending, as after every public call.
    pub fn is_quiescent(&self) -> bool {
        self.isolation.is_drained() && self.hooks.is_empty()
    }

    pub fn pristine_stages(&self, uuid: &str) -> Option<&[Stage]> {
        self.pristine.get(uuid).map(Vec::as_slice)
    }

    pub fn live_violations(&self) -> &[Violation] {
        &self.live_violations
    }

    pub fn reachable(&self, a: &str, b: &str) -> bool {
        self.isolation.reachable(&Endpoint::node(a), &Endpoint::node(b))
    }

    fn node_mut(&mut self, uuid: &str) -> Result<&mut NodeSim, CloudError> {
        self.nodes
            .get_mut(uuid)
            .ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))
    }

    fn expect_state(&self, uuid: &str, state: NodeState, op: &'static str) -> Result<(), CloudError> {
        let current = self
            .state_of(uuid)
            .ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))?;
        if current == state {
            Ok(())
        } else {
            Err(CloudError::InvalidTransition {
                uuid: uuid.to_string(),
                state: current,
                op,
            })
        }
    }

    pub(crate) fn emit(&mut self, uuid: &str, kind: EventKind) -> u64 {
        let phase = self.nodes.get(uuid).map_or(BootPhase::Off, NodeSim::phase);
        let seq = self.trace.push(uuid, phase, kind);
        if let Some(r) = self.records.get_mut(uuid) {
            r.history.push(seq);
        }
        seq
    }

    fn emit_node_events(&mut self, uuid: &str, events: Vec<NodeEvent>) {
        for e in events {
            self.emit(uuid, EventKind::Node(e));
        }
    }

    pub(crate) fn power_off(&mut self, uuid: &str) {
        let Some(node) = self.nodes.get_mut(uuid) else {
            return;
        };
        let had_key = node.key().is_some();
        let was_on = node.phase() != BootPhase::Off;
        node.power_off();
        if was_on {
            self.emit(uuid, EventKind::PowerOff);
        }
        if had_key {
            self.emit(uuid, EventKind::KeyErased);
        }
    }

    /// Creates the tenant's project and its private enclave networks.
    pub fn add_tenant(
        &mut self,
        name: &str,
        profile: TrustProfile,
        enclave_networks: usize,
    ) -> Result<(), CloudError> {
        if self.tenants.contains_key(name) {
            return Err(CloudError::TenantExists(name.to_string()));
        }
        self.isolation.create_project(name)?;
        let mut nets = Vec::with_capacity(enclave_networks);
        for _ in 0..enclave_networks {
            nets.push(
                self.isolation
                    .create_network(name, Visibility::Private(name.to_string()))?,
            );
        }
        self.drain_engine();
        let key = EnclaveKey::random(&mut self.rng);
        self.tenants.insert(
            name.to_string(),
            Tenant {
                name: name.to_string(),
                profile,
                project: name.to_string(),
                key,
                shares: BTreeMap::new(),
                enclave_nets: nets,
                admitted: Vec::new(),
                retained_images: Vec::new(),
            },
        );
        Ok(())
    }

    /// Applies one queued switch operation, logs it and fires any state
    /// transition waiting on its ticket.
    pub(crate) fn engine_step(&mut self) -> bool {
        let Some(op) = self.isolation.apply_next() else {
            return false;
        };
        let port_event = match &op.kind {
            OpKind::Connect { port, net, vlan } => Some((true, port, net, *vlan)),
            OpKind::Detach { port, net, vlan } => Some((false, port, net, *vlan)),
            OpKind::CreateNet { .. } | OpKind::DeleteNet { .. } => None,
        };
        if let Some((connect, port, net, vlan)) = port_event {
            let airlock_node = self.airlock_owner.get(net).cloned();
            let role = if airlock_node.is_some() {
                NetRole::Airlock
            } else {
                NetRole::Enclave
            };
            let actor = match (&port.endpoint, airlock_node) {
                (Endpoint::Node(u), _) => u.clone(),
                (Endpoint::Service(_), Some(owner)) => owner,
                (Endpoint::Service(_), None) => CLOUD_ACTOR.to_string(),
            };
            let (net, port) = (net.clone(), port.to_string());
            let kind = if connect {
                EventKind::Connect { net, role, port, vlan }
            } else {
                EventKind::Detach { net, role, port, vlan }
            };
            self.emit(&actor, kind);
        }
        if let OpKind::DeleteNet { net, .. } = &op.kind {
            self.airlock_owner.remove(net);
        }
        if let Some(t) = self.hooks.remove(&op.seq) {
            self.apply_transition(t);
        }
        self.after_step();
        true
    }

    pub(crate) fn drain_engine(&mut self) -> usize {
        let mut n = 0;
        while self.engine_step() {
            n += 1;
        }
        n
    }

    fn apply_transition(&mut self, t: Transition) {
        let record = self.records.get_mut(&t.uuid).expect("transition for known node");
        let from = record.state;
        record.state = t.to;
        self.emit(&t.uuid, EventKind::State { from, to: t.to });
        if t.free_in_pool {
            // All detaches for this node have been applied by now.
            if let Err(e) = self.isolation.free_node(&t.uuid) {
                self.emit(&t.uuid, EventKind::Abort { reason: e.to_string() });
            }
            let record = self.records.get_mut(&t.uuid).expect("known");
            record.tenant = None;
            record.profile = None;
        }
    }

    /// Runs `to` as soon as `after` has been applied (immediately when
    /// there is nothing to wait for).
    pub(crate) fn transition_after(
        &mut self,
        after: Option<Ticket>,
        uuid: &str,
        to: NodeState,
        free_in_pool: bool,
    ) {
        let t = Transition {
            uuid: uuid.to_string(),
            to,
            free_in_pool,
        };
        match after {
            Some(ticket) if ticket.0 > self.isolation.applied_through() => {
                self.hooks.insert(ticket.0, t);
            }
            _ => self.apply_transition(t),
        }
    }

    /// Marks a node as an attacker: after every step its reachability to
    /// each Airlock or Allocated node of another project is probed.
    pub fn watch(&mut self, uuid: &str) -> Result<(), CloudError> {
        if !self.nodes.contains_key(uuid) {
            return Err(CloudError::NoSuchNode(uuid.to_string()));
        }
        self.watchers.insert(uuid.to_string());
        Ok(())
    }

    pub fn probe_stats(&self) -> ProbeStats {
        self.probes
    }

    fn probe_watchers(&mut self) {
        let seq = (self.trace.len() as u64).checked_sub(1);
        for w in &self.watchers {
            let mine = self.isolation.project_of(w);
            let from = Endpoint::node(w);
            for r in self.records.values() {
                let exposed = matches!(r.state, NodeState::Airlock | NodeState::Allocated);
                if r.uuid == *w || !exposed || self.isolation.project_of(&r.uuid) == mine {
                    continue;
                }
                self.probes.probes += 1;
                if self.isolation.reachable(&from, &Endpoint::node(&r.uuid)) {
                    self.probes.hits += 1;
                    self.live_violations.push(Violation {
                        seq,
                        invariant: "eavesdropper",
                        detail: format!("{w} reaches {} node {}", r.state, r.uuid),
                    });
                }
            }
        }
    }

    /// Starts trace checking from the current state, for a cloud whose
    /// earlier history is not part of its trace (e.g. one reloaded from disk).
    pub(crate) fn seed_trace_tracking(&mut self) {
        self.trace_seed = self
            .records
            .values()
            .map(|r| {
                let v = self.attestation.verifier.record(&r.uuid);
                let seed = TrackSeed {
                    state: r.state,
                    attested: r.profile.as_ref().is_some_and(|p| p.attested),
                    passed: v.is_some_and(|v| v.passed_this_cycle),
                    share: v.is_some_and(|v| v.share_released),
                    key: self.nodes.get(&r.uuid).is_some_and(|n| n.key().is_some()),
                    powered: self.nodes.get(&r.uuid).is_some_and(|n| n.phase() != BootPhase::Off),
                };
                (r.uuid.clone(), seed)
            })
            .collect();
    }

    pub(crate) fn after_step(&mut self) {
        if !self.watchers.is_empty() {
            self.probe_watchers();
        }
        if self.monitor {
            let seq = self.trace.len() as u64;
            for detail in invariants::live_check(self) {
                self.live_violations.push(Violation {
                    seq: seq.checked_sub(1),
                    invariant: "live",
                    detail,
                });
            }
        }
    }

    /// Release: scrub memory, end the storage session, power off (erasing
    /// the key), detach every network and return the node to the pool.
    pub fn release_node(&mut self, uuid: &str) -> Result<(), CloudError> {
        self.expect_state(uuid, NodeState::Allocated, "release")?;
        let node = self.node_mut(uuid)?;
        let scrub = node.scrub_memory();
        self.emit(uuid, EventKind::Node(scrub));
        self.end_storage_session(uuid);
        self.power_off(uuid);
        self.attestation.verifier.remove_node(uuid);
        if let Some(t) = self.records[uuid].tenant.clone() {
            if let Some(tenant) = self.tenants.get_mut(&t) {
                tenant.shares.remove(uuid);
            }
        }
        let last = self.isolation.detach_all(uuid)?.last().map(|(_, t)| *t);
        self.transition_after(last, uuid, NodeState::Free, true);
        self.drain_engine();
        self.after_step();
        Ok(())
    }

    fn end_storage_session(&mut self, uuid: &str) {
        if let Some(image) = self.provisioning.detach_boot_target(uuid) {
            self.emit(uuid, EventKind::DetachTarget { image });
            let record = self.records.get_mut(uuid).expect("known node");
            record.image = None;
            record.session_writes.clear();
            if let Some(t) = record.tenant.clone() {
                if let Some(tenant) = self.tenants.get_mut(&t) {
                    tenant.retained_images.push(image);
                }
            }
        }
    }

    /// Ousts an Allocated node whose attestation failed. Passing results and
    /// nodes that are not Allocated are ignored.
    pub fn handle_revocation(&mut self, uuid: &str, result: AttestationResult) -> Result<(), CloudError> {
        let Some(reason) = result.reason() else {
            return Ok(());
        };
        if self.state_of(uuid).ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))?
            != NodeState::Allocated
        {
            return Ok(());
        }
        self.emit(uuid, EventKind::Revoke { reason: reason.to_string() });
        self.attestation.verifier.revoke(uuid);
        self.end_storage_session(uuid);
        self.power_off(uuid);
        self.records.get_mut(uuid).expect("known").reason = Some(reason.to_string());
        let last = self.isolation.detach_all(uuid)?.last().map(|(_, t)| *t);
        self.transition_after(last, uuid, NodeState::Rejected, false);
        self.drain_engine();
        self.after_step();
        Ok(())
    }

    /// Provider cleaning of a Rejected node: reflash pristine firmware,
    /// scrub, power off and return it to the free pool.
    pub fn clean_node(&mut self, uuid: &str) -> Result<(), CloudError> {
        self.expect_state(uuid, NodeState::Rejected, "clean")?;
        let stages = self.pristine[uuid].clone();
        self.emit(uuid, EventKind::Clean);
        let node = self.node_mut(uuid)?;
        node.restore_stages(stages)?;
        node.set_responsive(true);
        let scrub = node.scrub_memory();
        self.emit(uuid, EventKind::Node(scrub));
        self.end_storage_session(uuid);
        self.power_off(uuid);
        self.attestation.verifier.remove_node(uuid);
        if let Some(t) = self.records[uuid].tenant.clone() {
            if let Some(tenant) = self.tenants.get_mut(&t) {
                tenant.shares.remove(uuid);
            }
        }
        let last = self.isolation.detach_all(uuid)?.last().map(|(_, t)| *t);
        self.records.get_mut(uuid).expect("known").reason = None;
        self.transition_after(last, uuid, NodeState::Free, true);
        self.drain_engine();
        self.after_step();
        Ok(())
    }

    /// Advances simulated time by one tick and, on poll ticks, re-attests
    /// every Allocated node admitted under an attested profile. Failures are
    /// revoked before this returns.
    pub fn tick(&mut self) -> Result<Vec<(String, AttestationResult)>, CloudError> {
        self.tick += 1;
        let tick = self.tick;
        self.emit(CLOUD_ACTOR, EventKind::Tick { tick });
        if !tick.is_multiple_of(self.attestation.verifier.poll_interval()) {
            return Ok(Vec::new());
        }
        let polled: Vec<String> = self
            .records
            .values()
            .filter(|r| r.state == NodeState::Allocated)
            .filter(|r| r.profile.as_ref().is_some_and(|p| p.attested))
            .map(|r| r.uuid.clone())
            .collect();
        let nodes = &self.nodes;
        let results = self
            .attestation
            .poll_tick(&polled, |uuid, nonce| nodes.get(uuid)?.runtime_quote(nonce).ok());
        for (uuid, result) in &results {
            self.emit(uuid, EventKind::Attest(*result));
        }
        for (uuid, result) in &results {
            self.handle_revocation(uuid, *result)?;
        }
        self.after_step();
        Ok(results)
    }

    /// Overwrites one byte of a node's stage. On a running node the change
    /// is measured immediately.
    pub fn tamper(&mut self, uuid: &str, stage: &str, position: usize, value: u8) -> Result<(), CloudError> {
        let measured = self.node_mut(uuid)?.tamper(stage, position, value)?;
        self.emit(
            uuid,
            EventKind::Tamper {
                stage: stage.to_string(),
                position,
                value,
            },
        );
        if let Some(e) = measured {
            self.emit(uuid, EventKind::Node(e));
        }
        Ok(())
    }

    pub fn set_responsive(&mut self, uuid: &str, responsive: bool) -> Result<(), CloudError> {
        self.node_mut(uuid)?.set_responsive(responsive);
        Ok(())
    }

    pub fn write_memory(&mut self, uuid: &str, offset: usize, data: &[u8]) -> Result<(), CloudError> {
        Ok(self.node_mut(uuid)?.write_memory(offset, data)?)
    }

    /// True iff every byte of the node's memory reads 0x00.
    pub fn probe_memory(&mut self, uuid: &str) -> Result<bool, CloudError> {
        let zero = self
            .nodes
            .get(uuid)
            .ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))?
            .memory()
            .iter()
            .all(|b| *b == 0);
        self.emit(uuid, EventKind::MemoryProbe { zero });
        Ok(zero)
    }

    /// Block write by the tenant workload through the node's boot target.
    pub fn write_block(&mut self, uuid: &str, index: u64, bytes: &[u8]) -> Result<(), CloudError> {
        self.provisioning.write_block(uuid, index, bytes)?;
        self.records
            .get_mut(uuid)
            .ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))?
            .session_writes
            .insert(index);
        Ok(())
    }

    pub fn read_block(&self, uuid: &str, index: u64) -> Result<Vec<u8>, CloudError> {
        Ok(self.provisioning.read_block(uuid, index)?)
    }

    /// Blocks of the node's attached image that differ from the base image
    /// but were not written during the current session.
    pub fn audit_storage(&mut self, uuid: &str) -> Result<Vec<u64>, CloudError> {
        let image = self
            .provisioning
            .target_of(uuid)
            .ok_or_else(|| ProvisioningError::NotAttached(uuid.to_string()))?;
        let written = &self
            .records
            .get(uuid)
            .ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))?
            .session_writes;
        let foreign: Vec<u64> = self
            .provisioning
            .diff_blocks(image, self.base_image)?
            .into_iter()
            .filter(|i| !written.contains(i))
            .collect();
        self.emit(
            uuid,
            EventKind::StorageAudit {
                foreign_blocks: foreign.len(),
            },
        );
        Ok(foreign)
    }

    /// Tries `key` against the node's attached encrypted image without
    /// touching its lock state. Failures are traced.
    pub fn try_key(&mut self, uuid: &str, key: &EnclaveKey) -> Result<bool, CloudError> {
        let image = self
            .provisioning
            .target_of(uuid)
            .ok_or_else(|| ProvisioningError::NotAttached(uuid.to_string()))?;
        match self.provisioning.check_key(image, key) {
            Ok(()) => Ok(true),
            Err(ProvisioningError::UnlockFailed(_)) => {
                self.emit(uuid, EventKind::UnlockFailed { image });
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Asks the verifier for a node's share as an outsider would. The share
    /// itself is discarded; only whether it was released matters.
    pub fn request_share(&mut self, uuid: &str) -> bool {
        let released = self.attestation.verifier.bootstrap_key(uuid).is_ok();
        let kind = if released {
            EventKind::ShareReleased
        } else {
            EventKind::ShareRefused
        };
        self.emit(uuid, kind);
        released
    }

    /// Every invariant violation: live ones seen so far plus a full check
    /// of the trace.
    pub fn violations(&self) -> Vec<Violation> {
        let mut all = self.live_violations.clone();
        all.extend(invariants::check_trace_from(&self.trace_seed, self.trace.events()));
        all
    }
}
