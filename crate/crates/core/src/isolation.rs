//! Provider isolation service: node allocation, VLAN networks and a
//! simulated switch whose port map is programmed by a strictly serial
//! operation engine.
//!
//! Requests are validated against the *projected* membership (the state
//! after every enqueued operation has been applied) and then queued with a
//! monotonically increasing ticket. [`IsolationService::drain_operations`]
//! applies the queue in ticket order. Only this module mutates the
//! [`SwitchConfig`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::IteratorRandom;
use rand::Rng;
use thiserror::Error;

pub const DEFAULT_VLAN_RANGE: (u16, u16) = (100, 199);
pub const SERVICE_NIC: &str = "svc0";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsolationError {
    #[error("no free nodes")]
    NoFreeNodes,
    #[error("no VLANs available")]
    NoVlansAvailable,
    #[error("{0} may not join network {1}")]
    Forbidden(Endpoint, NetId),
    #[error("{0}/{1} is not a member of {2}")]
    NotAMember(Endpoint, String, NetId),
    #[error("{0}/{1} is already a member of {2}")]
    AlreadyMember(Endpoint, String, NetId),
    #[error("no such network {0}")]
    NoSuchNetwork(NetId),
    #[error("no such node {0}")]
    NoSuchNode(String),
    #[error("node {0} has no nic {1}")]
    NoSuchNic(String, String),
    #[error("no such project {0}")]
    NoSuchProject(String),
    #[error("project {0} already exists")]
    ProjectExists(String),
    #[error("node {0} already exists")]
    NodeExists(String),
    #[error("network {0} still has members")]
    NetworkInUse(NetId),
    #[error("node {0} is still connected")]
    StillConnected(String),
    #[error("node {0} is not allocated to project {1}")]
    NotInProject(String, String),
    #[error("invalid isolation state: {0}")]
    InvalidState(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ServiceEndpoint {
    Attestation,
    Provisioning,
}

/// Anything with a switch port.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Node(String),
    Service(ServiceEndpoint),
}

impl Endpoint {
    pub fn node(uuid: impl Into<String>) -> Self {
        Endpoint::Node(uuid.into())
    }

    pub fn node_id(&self) -> Option<&str> {
        match self {
            Endpoint::Node(u) => Some(u),
            Endpoint::Service(_) => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(u) => write!(f, "node:{u}"),
            Endpoint::Service(ServiceEndpoint::Attestation) => f.write_str("svc:attestation"),
            Endpoint::Service(ServiceEndpoint::Provisioning) => f.write_str("svc:provisioning"),
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = IsolationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svc:attestation" => Ok(Endpoint::Service(ServiceEndpoint::Attestation)),
            "svc:provisioning" => Ok(Endpoint::Service(ServiceEndpoint::Provisioning)),
            _ => s
                .strip_prefix("node:")
                .map(Endpoint::node)
                .ok_or_else(|| IsolationError::InvalidState(format!("bad endpoint {s:?}"))),
        }
    }
}

/// A switch port: an endpoint's NIC.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortId {
    pub endpoint: Endpoint,
    pub nic: String,
}

impl PortId {
    pub fn new(endpoint: Endpoint, nic: impl Into<String>) -> Self {
        PortId {
            endpoint,
            nic: nic.into(),
        }
    }

    pub fn service(s: ServiceEndpoint) -> Self {
        PortId::new(Endpoint::Service(s), SERVICE_NIC)
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.endpoint, self.nic)
    }
}

impl std::str::FromStr for PortId {
    type Err = IsolationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ep, nic) = s
            .rsplit_once('/')
            .ok_or_else(|| IsolationError::InvalidState(format!("bad port {s:?}")))?;
        Ok(PortId::new(ep.parse()?, nic))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NetId(pub String);

impl fmt::Display for NetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Visibility {
    Private(String),
    Public,
}

impl fmt::Display for Visibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Visibility::Private(p) => write!(f, "private:{p}"),
            Visibility::Public => f.write_str("public"),
        }
    }
}

impl std::str::FromStr for Visibility {
    type Err = IsolationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "public" {
            return Ok(Visibility::Public);
        }
        s.strip_prefix("private:")
            .map(|p| Visibility::Private(p.to_string()))
            .ok_or_else(|| IsolationError::InvalidState(format!("bad visibility {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkDef {
    pub id: NetId,
    pub vlan: u16,
    pub visibility: Visibility,
    /// Airlock networks additionally admit the service endpoints.
    pub airlock: bool,
    pub members: BTreeSet<PortId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Project {
    pub id: String,
    pub nodes: BTreeSet<String>,
    pub networks: BTreeSet<NetId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SwitchConfig {
    pub port_map: BTreeMap<PortId, BTreeSet<u16>>,
}

impl SwitchConfig {
    fn add(&mut self, port: &PortId, vlan: u16) {
        self.port_map.entry(port.clone()).or_default().insert(vlan);
    }

    fn remove(&mut self, port: &PortId, vlan: u16) {
        if let Some(set) = self.port_map.get_mut(port) {
            set.remove(&vlan);
            if set.is_empty() {
                self.port_map.remove(port);
            }
        }
    }

    pub fn vlans_of(&self, port: &PortId) -> Option<&BTreeSet<u16>> {
        self.port_map.get(port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    CreateNet { net: NetId, vlan: u16 },
    DeleteNet { net: NetId, vlan: u16 },
    Connect { port: PortId, net: NetId, vlan: u16 },
    Detach { port: PortId, net: NetId, vlan: u16 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub seq: u64,
    pub kind: OpKind,
}

/// Receipt for an enqueued operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(pub u64);

#[derive(Clone, Debug, PartialEq, Eq)]
struct NodeEntry {
    nics: Vec<String>,
    project: Option<String>,
}

/// Persisted form of the service. Only taken with an empty queue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsolationSnapshot {
    pub vlan_range: (u16, u16),
    pub next_net: u64,
    pub next_ticket: u64,
    pub nodes: Vec<(String, Vec<String>, Option<String>)>,
    pub projects: Vec<String>,
    pub networks: Vec<NetworkDef>,
}

#[derive(Debug, Clone)]
pub struct IsolationService {
    vlan_range: (u16, u16),
    free_vlans: BTreeSet<u16>,
    nodes: BTreeMap<String, NodeEntry>,
    free_pool: BTreeSet<String>,
    projects: BTreeMap<String, Project>,
    networks: BTreeMap<NetId, NetworkDef>,
    /// Membership once every queued operation has been applied.
    projected: BTreeMap<NetId, BTreeSet<PortId>>,
    deleting: BTreeSet<NetId>,
    switch: SwitchConfig,
    queue: VecDeque<Operation>,
    next_ticket: u64,
    next_net: u64,
}

impl Default for IsolationService {
    fn default() -> Self {
        Self::new(DEFAULT_VLAN_RANGE)
    }
}

impl IsolationService {
    pub fn new(vlan_range: (u16, u16)) -> Self {
        IsolationService {
            vlan_range,
            free_vlans: (vlan_range.0..=vlan_range.1).collect(),
            nodes: BTreeMap::new(),
            free_pool: BTreeSet::new(),
            projects: BTreeMap::new(),
            networks: BTreeMap::new(),
            projected: BTreeMap::new(),
            deleting: BTreeSet::new(),
            switch: SwitchConfig::default(),
            queue: VecDeque::new(),
            next_ticket: 1,
            next_net: 1,
        }
    }

    /// Adds a physical node to the free pool.
    pub fn add_node(&mut self, uuid: &str, nics: Vec<String>) -> Result<(), IsolationError> {
        if self.nodes.contains_key(uuid) {
            return Err(IsolationError::NodeExists(uuid.to_string()));
        }
        self.nodes.insert(uuid.to_string(), NodeEntry { nics, project: None });
        self.free_pool.insert(uuid.to_string());
        Ok(())
    }

    pub fn create_project(&mut self, id: &str) -> Result<(), IsolationError> {
        if self.projects.contains_key(id) {
            return Err(IsolationError::ProjectExists(id.to_string()));
        }
        self.projects.insert(
            id.to_string(),
            Project {
                id: id.to_string(),
                ..Project::default()
            },
        );
        Ok(())
    }

    pub fn ensure_project(&mut self, id: &str) {
        let _ = self.create_project(id);
    }

    pub fn project(&self, id: &str) -> Option<&Project> {
        self.projects.get(id)
    }

    pub fn free_pool(&self) -> &BTreeSet<String> {
        &self.free_pool
    }

    pub fn project_of(&self, uuid: &str) -> Option<&str> {
        self.nodes.get(uuid).and_then(|n| n.project.as_deref())
    }

    pub fn nics_of(&self, uuid: &str) -> Option<&[String]> {
        self.nodes.get(uuid).map(|n| n.nics.as_slice())
    }

    /// Assigns a node drawn uniformly from the free pool to `project`.
    pub fn allocate_node<R: Rng>(&mut self, project: &str, rng: &mut R) -> Result<String, IsolationError> {
        if !self.projects.contains_key(project) {
            return Err(IsolationError::NoSuchProject(project.to_string()));
        }
        let uuid = self
            .free_pool
            .iter()
            .choose(rng)
            .cloned()
            .ok_or(IsolationError::NoFreeNodes)?;
        self.assign(&uuid, project);
        Ok(uuid)
    }

    /// Assigns a specific free node.
    pub fn allocate_specific(&mut self, project: &str, uuid: &str) -> Result<(), IsolationError> {
        if !self.projects.contains_key(project) {
            return Err(IsolationError::NoSuchProject(project.to_string()));
        }
        if !self.free_pool.contains(uuid) {
            return Err(if self.nodes.contains_key(uuid) {
                IsolationError::NoFreeNodes
            } else {
                IsolationError::NoSuchNode(uuid.to_string())
            });
        }
        self.assign(uuid, project);
        Ok(())
    }

    fn assign(&mut self, uuid: &str, project: &str) {
        self.free_pool.remove(uuid);
        self.nodes.get_mut(uuid).expect("pooled node exists").project = Some(project.to_string());
        self.projects
            .get_mut(project)
            .expect("checked")
            .nodes
            .insert(uuid.to_string());
    }

    /// Returns a node to the free pool. Every port must already be detached.
    pub fn free_node(&mut self, uuid: &str) -> Result<(), IsolationError> {
        let entry = self
            .nodes
            .get(uuid)
            .ok_or_else(|| IsolationError::NoSuchNode(uuid.to_string()))?;
        let ep = Endpoint::node(uuid);
        let connected = self
            .projected
            .values()
            .any(|m| m.iter().any(|p| p.endpoint == ep))
            || self.port_set(uuid).iter().next().is_some();
        if connected {
            return Err(IsolationError::StillConnected(uuid.to_string()));
        }
        if let Some(p) = entry.project.clone() {
            if let Some(project) = self.projects.get_mut(&p) {
                project.nodes.remove(uuid);
            }
        }
        self.nodes.get_mut(uuid).expect("exists").project = None;
        self.free_pool.insert(uuid.to_string());
        Ok(())
    }

    fn enqueue(&mut self, kind: OpKind) -> Ticket {
        let seq = self.next_ticket;
        self.next_ticket += 1;
        self.queue.push_back(Operation { seq, kind });
        Ticket(seq)
    }

    /// Creates an empty network with a fresh VLAN tag. The switch learns
    /// about it when the returned ticket is applied.
    pub fn create_network(
        &mut self,
        project: &str,
        visibility: Visibility,
    ) -> Result<NetId, IsolationError> {
        self.create_network_inner(project, visibility, false)
    }

    fn create_network_inner(
        &mut self,
        project: &str,
        visibility: Visibility,
        airlock: bool,
    ) -> Result<NetId, IsolationError> {
        if !self.projects.contains_key(project) {
            return Err(IsolationError::NoSuchProject(project.to_string()));
        }
        let vlan = *self.free_vlans.iter().next().ok_or(IsolationError::NoVlansAvailable)?;
        self.free_vlans.remove(&vlan);
        let id = NetId(format!("net-{:04}", self.next_net));
        self.next_net += 1;
        self.networks.insert(
            id.clone(),
            NetworkDef {
                id: id.clone(),
                vlan,
                visibility,
                airlock,
                members: BTreeSet::new(),
            },
        );
        self.projected.insert(id.clone(), BTreeSet::new());
        self.projects
            .get_mut(project)
            .expect("checked")
            .networks
            .insert(id.clone());
        self.enqueue(OpKind::CreateNet {
            net: id.clone(),
            vlan,
        });
        Ok(id)
    }

    /// Fresh private quarantine network holding the node and the attestation
    /// and provisioning endpoints.
    pub fn create_airlock_network(
        &mut self,
        project: &str,
        uuid: &str,
        nic: &str,
    ) -> Result<(NetId, Vec<Ticket>), IsolationError> {
        self.check_node_in_project(uuid, project)?;
        self.check_nic(uuid, nic)?;
        let net = self.create_network_inner(project, Visibility::Private(project.to_string()), true)?;
        let tickets = vec![
            self.connect_port(PortId::service(ServiceEndpoint::Attestation), &net)?,
            self.connect_port(PortId::service(ServiceEndpoint::Provisioning), &net)?,
            self.connect(uuid, nic, &net)?,
        ];
        Ok((net, tickets))
    }

    pub fn delete_network(&mut self, net: &NetId) -> Result<Ticket, IsolationError> {
        let def = self.live_network(net)?;
        let vlan = def.vlan;
        if !self.projected[net].is_empty() {
            return Err(IsolationError::NetworkInUse(net.clone()));
        }
        self.deleting.insert(net.clone());
        Ok(self.enqueue(OpKind::DeleteNet {
            net: net.clone(),
            vlan,
        }))
    }

    fn live_network(&self, net: &NetId) -> Result<&NetworkDef, IsolationError> {
        match self.networks.get(net) {
            Some(def) if !self.deleting.contains(net) => Ok(def),
            _ => Err(IsolationError::NoSuchNetwork(net.clone())),
        }
    }

    fn check_node_in_project(&self, uuid: &str, project: &str) -> Result<(), IsolationError> {
        let entry = self
            .nodes
            .get(uuid)
            .ok_or_else(|| IsolationError::NoSuchNode(uuid.to_string()))?;
        if entry.project.as_deref() == Some(project) {
            Ok(())
        } else {
            Err(IsolationError::NotInProject(uuid.to_string(), project.to_string()))
        }
    }

    fn check_nic(&self, uuid: &str, nic: &str) -> Result<(), IsolationError> {
        let entry = self
            .nodes
            .get(uuid)
            .ok_or_else(|| IsolationError::NoSuchNode(uuid.to_string()))?;
        if entry.nics.iter().any(|n| n == nic) {
            Ok(())
        } else {
            Err(IsolationError::NoSuchNic(uuid.to_string(), nic.to_string()))
        }
    }

    /// Enqueues attaching a node NIC to a network.
    ///
    /// Private networks accept only nodes of the owning project; public
    /// networks accept any allocated node. Free nodes join nothing.
    pub fn connect(&mut self, uuid: &str, nic: &str, net: &NetId) -> Result<Ticket, IsolationError> {
        self.check_nic(uuid, nic)?;
        let def = self.live_network(net)?;
        let project = self.nodes[uuid].project.as_deref();
        let allowed = match (&def.visibility, project) {
            (_, None) => false,
            (Visibility::Public, Some(_)) => true,
            (Visibility::Private(owner), Some(p)) => owner == p,
        };
        if !allowed {
            return Err(IsolationError::Forbidden(Endpoint::node(uuid), net.clone()));
        }
        self.connect_port(PortId::new(Endpoint::node(uuid), nic), net)
    }

    fn connect_port(&mut self, port: PortId, net: &NetId) -> Result<Ticket, IsolationError> {
        let def = self.live_network(net)?;
        if matches!(port.endpoint, Endpoint::Service(_)) && !def.airlock {
            return Err(IsolationError::Forbidden(port.endpoint, net.clone()));
        }
        let vlan = def.vlan;
        let members = self.projected.get_mut(net).expect("live network is projected");
        if !members.insert(port.clone()) {
            return Err(IsolationError::AlreadyMember(port.endpoint, port.nic, net.clone()));
        }
        Ok(self.enqueue(OpKind::Connect {
            port,
            net: net.clone(),
            vlan,
        }))
    }

    pub fn detach(&mut self, uuid: &str, nic: &str, net: &NetId) -> Result<Ticket, IsolationError> {
        self.check_nic(uuid, nic)?;
        self.detach_port(PortId::new(Endpoint::node(uuid), nic), net)
    }

    fn detach_port(&mut self, port: PortId, net: &NetId) -> Result<Ticket, IsolationError> {
        let vlan = self.live_network(net)?.vlan;
        let members = self.projected.get_mut(net).expect("live network is projected");
        if !members.remove(&port) {
            return Err(IsolationError::NotAMember(port.endpoint, port.nic, net.clone()));
        }
        Ok(self.enqueue(OpKind::Detach {
            port,
            net: net.clone(),
            vlan,
        }))
    }

    /// Detaches every port of a node from every network it is (or will be) on.
    pub fn detach_all(&mut self, uuid: &str) -> Result<Vec<(NetId, Ticket)>, IsolationError> {
        if !self.nodes.contains_key(uuid) {
            return Err(IsolationError::NoSuchNode(uuid.to_string()));
        }
        let ep = Endpoint::node(uuid);
        let targets: Vec<(PortId, NetId)> = self
            .projected
            .iter()
            .filter(|(net, _)| !self.deleting.contains(*net))
            .flat_map(|(net, members)| {
                members
                    .iter()
                    .filter(|p| p.endpoint == ep)
                    .map(move |p| (p.clone(), net.clone()))
            })
            .collect();
        targets
            .into_iter()
            .map(|(port, net)| self.detach_port(port, &net).map(|t| (net, t)))
            .collect()
    }

    /// Detaches the service endpoints and the node, then deletes the network.
    pub fn teardown_network(&mut self, net: &NetId) -> Result<Vec<Ticket>, IsolationError> {
        let ports: Vec<PortId> = self
            .projected
            .get(net)
            .ok_or_else(|| IsolationError::NoSuchNetwork(net.clone()))?
            .iter()
            .cloned()
            .collect();
        let mut tickets = Vec::with_capacity(ports.len() + 1);
        for port in ports {
            tickets.push(self.detach_port(port, net)?);
        }
        tickets.push(self.delete_network(net)?);
        Ok(tickets)
    }

    pub fn pending_operations(&self) -> impl Iterator<Item = &Operation> {
        self.queue.iter()
    }

    pub fn is_drained(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn applied_through(&self) -> u64 {
        self.queue.front().map_or(self.next_ticket - 1, |op| op.seq - 1)
    }

    /// Applies every queued operation in ticket order.
    pub fn drain_operations(&mut self) -> usize {
        let mut applied = 0;
        while self.apply_next().is_some() {
            applied += 1;
        }
        applied
    }

    /// Applies the single oldest queued operation.
    pub fn apply_next(&mut self) -> Option<Operation> {
        let op = self.queue.pop_front()?;
        match &op.kind {
            OpKind::CreateNet { .. } => {}
            OpKind::DeleteNet { net, vlan } => {
                if let Some(def) = self.networks.remove(net) {
                    debug_assert!(def.members.is_empty());
                    for p in self.projects.values_mut() {
                        p.networks.remove(net);
                    }
                }
                self.projected.remove(net);
                self.deleting.remove(net);
                self.free_vlans.insert(*vlan);
            }
            OpKind::Connect { port, net, vlan } => {
                if let Some(def) = self.networks.get_mut(net) {
                    def.members.insert(port.clone());
                }
                self.switch.add(port, *vlan);
            }
            OpKind::Detach { port, net, vlan } => {
                if let Some(def) = self.networks.get_mut(net) {
                    def.members.remove(port);
                }
                self.switch.remove(port, *vlan);
            }
        }
        Some(op)
    }

    pub fn switch_config(&self) -> &SwitchConfig {
        &self.switch
    }

    pub fn network(&self, id: &NetId) -> Option<&NetworkDef> {
        self.networks.get(id)
    }

    pub fn networks(&self) -> impl Iterator<Item = &NetworkDef> {
        self.networks.values()
    }

    /// VLAN tags on any port of the endpoint, per the switch.
    pub fn endpoint_vlans(&self, ep: &Endpoint) -> BTreeSet<u16> {
        self.switch
            .port_map
            .iter()
            .filter(|(p, _)| &p.endpoint == ep)
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }

    pub fn port_set(&self, uuid: &str) -> BTreeSet<u16> {
        self.endpoint_vlans(&Endpoint::node(uuid))
    }

    /// True iff the two endpoints share a VLAN on the switch.
    pub fn reachable(&self, a: &Endpoint, b: &Endpoint) -> bool {
        if a == b {
            return false;
        }
        let va = self.endpoint_vlans(a);
        if va.is_empty() {
            return false;
        }
        self.endpoint_vlans(b).iter().any(|v| va.contains(v))
    }

    /// Every other endpoint sharing a VLAN with `ep`.
    pub fn reachable_set(&self, ep: &Endpoint) -> BTreeSet<Endpoint> {
        let mine = self.endpoint_vlans(ep);
        self.switch
            .port_map
            .iter()
            .filter(|(p, vlans)| &p.endpoint != ep && vlans.iter().any(|v| mine.contains(v)))
            .map(|(p, _)| p.endpoint.clone())
            .collect()
    }

    /// Switch port map rebuilt from logical memberships.
    pub fn membership_union(&self) -> BTreeMap<PortId, BTreeSet<u16>> {
        let mut map: BTreeMap<PortId, BTreeSet<u16>> = BTreeMap::new();
        for def in self.networks.values() {
            for m in &def.members {
                map.entry(m.clone()).or_default().insert(def.vlan);
            }
        }
        map
    }

    /// Structural invariants: unique VLANs, switch mirrors memberships,
    /// free nodes have no ports, private networks hold only owners' nodes.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for def in self.networks.values() {
            if !seen.insert(def.vlan) {
                problems.push(format!("vlan {} shared by two live networks", def.vlan));
            }
            if let Visibility::Private(owner) = &def.visibility {
                for m in &def.members {
                    if let Endpoint::Node(u) = &m.endpoint {
                        if self.project_of(u) != Some(owner.as_str()) {
                            problems.push(format!("{m} on private network {} of {owner}", def.id));
                        }
                    } else if !def.airlock {
                        problems.push(format!("service {m} on non-airlock network {}", def.id));
                    }
                }
            }
        }
        if self.is_drained() && self.membership_union() != self.switch.port_map {
            problems.push("switch port map diverges from network membership".into());
        }
        for uuid in &self.free_pool {
            if !self.port_set(uuid).is_empty() {
                problems.push(format!("free node {uuid} has switch ports"));
            }
        }
        problems
    }

    pub fn snapshot(&self) -> Result<IsolationSnapshot, IsolationError> {
        if !self.is_drained() {
            return Err(IsolationError::InvalidState("operation queue not drained".into()));
        }
        Ok(IsolationSnapshot {
            vlan_range: self.vlan_range,
            next_net: self.next_net,
            next_ticket: self.next_ticket,
            nodes: self
                .nodes
                .iter()
                .map(|(u, e)| (u.clone(), e.nics.clone(), e.project.clone()))
                .collect(),
            projects: self.projects.keys().cloned().collect(),
            networks: self.networks.values().cloned().collect(),
        })
    }

    pub fn from_snapshot(s: IsolationSnapshot) -> Result<Self, IsolationError> {
        let mut svc = IsolationService::new(s.vlan_range);
        svc.next_net = s.next_net;
        svc.next_ticket = s.next_ticket;
        for p in &s.projects {
            svc.create_project(p)?;
        }
        for (uuid, nics, project) in s.nodes {
            svc.add_node(&uuid, nics)?;
            if let Some(p) = project {
                svc.allocate_specific(&p, &uuid)?;
            }
        }
        for def in s.networks {
            if !svc.free_vlans.remove(&def.vlan) {
                return Err(IsolationError::InvalidState(format!(
                    "vlan {} of {} is outside the pool or duplicated",
                    def.vlan, def.id
                )));
            }
            let owner = match &def.visibility {
                Visibility::Private(p) => Some(p.clone()),
                Visibility::Public => None,
            };
            if let Some(p) = owner {
                svc.projects
                    .get_mut(&p)
                    .ok_or_else(|| IsolationError::NoSuchProject(p.clone()))?
                    .networks
                    .insert(def.id.clone());
            }
            for m in &def.members {
                svc.switch.add(m, def.vlan);
            }
            svc.projected.insert(def.id.clone(), def.members.clone());
            svc.networks.insert(def.id.clone(), def);
        }
        let problems = svc.check_invariants();
        if let Some(p) = problems.into_iter().next() {
            return Err(IsolationError::InvalidState(p));
        }
        Ok(svc)
    }
}

/// Requests accepted by the isolation service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IsolationRequest {
    AllocateNode { project: String },
    CreateNetwork { project: String, visibility: Visibility },
    Connect { node: String, nic: String, net: NetId },
    Detach { node: String, nic: String, net: NetId },
    Reachable { a: Endpoint, b: Endpoint },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IsolationResponse {
    Node { uuid: String },
    Net { id: NetId, vlan: u16 },
    Ticket { seq: u64 },
    Bool(bool),
    Err(IsolationError),
}

impl IsolationService {
    pub fn handle<R: Rng>(&mut self, request: IsolationRequest, rng: &mut R) -> IsolationResponse {
        use IsolationRequest as Rq;
        use IsolationResponse as Rs;
        let result = match request {
            Rq::AllocateNode { project } => self.allocate_node(&project, rng).map(|uuid| Rs::Node { uuid }),
            Rq::CreateNetwork {
                project,
                visibility,
            } => self.create_network(&project, visibility).map(|id| {
                let vlan = self.networks[&id].vlan;
                Rs::Net { id, vlan }
            }),
            Rq::Connect { node, nic, net } => self.connect(&node, &nic, &net).map(|t| Rs::Ticket { seq: t.0 }),
            Rq::Detach { node, nic, net } => self.detach(&node, &nic, &net).map(|t| Rs::Ticket { seq: t.0 }),
            Rq::Reachable { a, b } => Ok(Rs::Bool(self.reachable(&a, &b))),
        };
        result.unwrap_or_else(Rs::Err)
    }
}
