//! Linearized global event trace.

use std::fmt;

use crate::attestation::AttestationResult;
use crate::isolation::NetId;
use crate::node::{BootPhase, NodeEvent};
use crate::provisioning::ImageId;

use super::NodeState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetRole {
    Airlock,
    Enclave,
}

impl NetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NetRole::Airlock => "airlock",
            NetRole::Enclave => "enclave",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    Admit { tenant: String, profile: String, attested: bool },
    State { from: NodeState, to: NodeState },
    PowerOn,
    PowerOff,
    Node(NodeEvent),
    Connect { net: NetId, role: NetRole, port: String, vlan: u16 },
    Detach { net: NetId, role: NetRole, port: String, vlan: u16 },
    Enrolled,
    Nonce { hex: String },
    Attest(AttestationResult),
    ShareReleased,
    ShareRefused,
    KeyErased,
    AttachTarget { image: ImageId },
    DetachTarget { image: ImageId },
    Unlock { image: ImageId },
    UnlockFailed { image: ImageId },
    Revoke { reason: String },
    Tamper { stage: String, position: usize, value: u8 },
    MemoryProbe { zero: bool },
    StorageAudit { foreign_blocks: usize },
    Clean,
    Tick { tick: u64 },
    Abort { reason: String },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Admit { .. } => "AdmitEvent",
            EventKind::State { .. } => "StateEvent",
            EventKind::PowerOn => "PowerOnEvent",
            EventKind::PowerOff => "PowerOffEvent",
            EventKind::Node(e) => e.name(),
            EventKind::Connect { .. } => "ConnectEvent",
            EventKind::Detach { .. } => "DetachEvent",
            EventKind::Enrolled => "EnrollEvent",
            EventKind::Nonce { .. } => "NonceEvent",
            EventKind::Attest(_) => "AttestEvent",
            EventKind::ShareReleased => "ShareEvent",
            EventKind::ShareRefused => "ShareRefusedEvent",
            EventKind::KeyErased => "KeyEraseEvent",
            EventKind::AttachTarget { .. } => "AttachEvent",
            EventKind::DetachTarget { .. } => "DetachTargetEvent",
            EventKind::Unlock { .. } => "UnlockEvent",
            EventKind::UnlockFailed { .. } => "UnlockFailedEvent",
            EventKind::Revoke { .. } => "RevokeEvent",
            EventKind::Tamper { .. } => "TamperEvent",
            EventKind::MemoryProbe { .. } => "ProbeEvent",
            EventKind::StorageAudit { .. } => "AuditEvent",
            EventKind::Clean => "CleanEvent",
            EventKind::Tick { .. } => "TickEvent",
            EventKind::Abort { .. } => "AbortEvent",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            EventKind::Admit {
                tenant,
                profile,
                attested,
            } => format!("tenant:{tenant}/profile:{profile}/attested:{attested}"),
            EventKind::State { from, to } => format!("{from}->{to}"),
            EventKind::PowerOn | EventKind::PowerOff | EventKind::Enrolled => "-".into(),
            EventKind::Node(e) => e.detail(),
            EventKind::Connect {
                net,
                role,
                port,
                vlan,
            }
            | EventKind::Detach {
                net,
                role,
                port,
                vlan,
            } => format!("{net}/{}/vlan{vlan}/{port}", role.as_str()),
            EventKind::Nonce { hex } => hex.clone(),
            EventKind::Attest(r) => r.to_string(),
            EventKind::ShareReleased | EventKind::ShareRefused | EventKind::KeyErased => "-".into(),
            EventKind::AttachTarget { image }
            | EventKind::DetachTarget { image }
            | EventKind::Unlock { image }
            | EventKind::UnlockFailed { image } => image.to_string(),
            EventKind::Revoke { reason } | EventKind::Abort { reason } => reason.replace(' ', "_"),
            EventKind::Tamper {
                stage,
                position,
                value,
            } => format!("{stage}/{position}/{value:02x}"),
            EventKind::MemoryProbe { zero } => if *zero { "zero" } else { "nonzero" }.into(),
            EventKind::StorageAudit { foreign_blocks } => format!("foreign:{foreign_blocks}"),
            EventKind::Clean => "-".into(),
            EventKind::Tick { tick } => tick.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub node: String,
    pub phase: BootPhase,
    pub kind: EventKind,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seq={} node={} phase={} event={} detail={}",
            self.seq,
            self.node,
            self.phase,
            self.kind.name(),
            self.kind.detail()
        )
    }
}

/// Serialized collector; the sequence number is the linearization order.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    events: Vec<TraceEvent>,
    next_seq: u64,
}

impl Trace {
    /// Empty trace whose first event gets sequence number `seq`.
    pub fn starting_at(seq: u64) -> Self {
        Trace {
            events: Vec::new(),
            next_seq: seq,
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn push(&mut self, node: &str, phase: BootPhase, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(TraceEvent {
            seq,
            node: node.to_string(),
            phase,
            kind,
        });
        seq
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// One line per event.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}
