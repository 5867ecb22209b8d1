//! Safety invariants, checked live after every scheduler step and
//! post hoc over the recorded trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::attestation::AttestationResult;
use crate::isolation::{Endpoint, ServiceEndpoint};
use crate::node::NodeEvent;

use super::trace::{EventKind, NetRole, TraceEvent};
use super::{Cloud, NodeState};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Trace position at (or just before) which the violation was seen.
    pub seq: Option<u64>,
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(s) => write!(f, "[{}] seq={s}: {}", self.invariant, self.detail),
            None => write!(f, "[{}] {}", self.invariant, self.detail),
        }
    }
}

/// Checks that must hold in every reachable cloud state.
pub fn live_check(cloud: &Cloud) -> Vec<String> {
    let iso = &cloud.isolation;
    let mut problems = iso.check_invariants();
    let services: BTreeSet<Endpoint> = [ServiceEndpoint::Attestation, ServiceEndpoint::Provisioning]
        .into_iter()
        .map(Endpoint::Service)
        .collect();
    for r in cloud.records.values() {
        let ep = Endpoint::node(&r.uuid);
        let reach = iso.reachable_set(&ep);
        match r.state {
            NodeState::Airlock => {
                if reach != services {
                    problems.push(format!(
                        "airlock node {} reaches {}",
                        r.uuid,
                        fmt_set(&reach)
                    ));
                }
            }
            NodeState::Free | NodeState::Rejected => {
                let ports = iso.port_set(&r.uuid);
                if !ports.is_empty() {
                    problems.push(format!("{} node {} still on vlans {ports:?}", r.state, r.uuid));
                }
            }
            NodeState::Allocated => {
                if let Some(s) = reach.iter().find(|e| services.contains(e)) {
                    problems.push(format!("allocated node {} reaches {s}", r.uuid));
                }
            }
        }
        let mine = iso.project_of(&r.uuid);
        for other in reach.iter().filter_map(Endpoint::node_id) {
            if iso.project_of(other) != mine {
                problems.push(format!("node {} reaches node {other} of another project", r.uuid));
            }
        }
    }
    problems
}

fn fmt_set(set: &BTreeSet<Endpoint>) -> String {
    let items: Vec<String> = set.iter().map(ToString::to_string).collect();
    format!("{{{}}}", items.join(","))
}

/// Per-node facts established before the first traced event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackSeed {
    pub state: NodeState,
    pub attested: bool,
    pub passed: bool,
    pub share: bool,
    pub key: bool,
    /// A node powered before tracing began ran stages the trace never saw
    /// measured; execute checks for it start at its next power-on.
    pub powered: bool,
}

#[derive(Default)]
struct NodeTrack {
    state: Option<NodeState>,
    attested: bool,
    /// Latest attestation outcome of the current power cycle.
    passed: bool,
    share: bool,
    key: bool,
    measured: BTreeSet<String>,
    unknown_boot: bool,
}

impl NodeTrack {
    fn power_cycle(&mut self) {
        self.passed = false;
        self.share = false;
        self.key = false;
        self.measured.clear();
        self.unknown_boot = false;
    }
}

/// Replays a trace and reports every ordering or state rule it breaks.
pub fn check_trace(events: &[TraceEvent]) -> Vec<Violation> {
    check_trace_from(&BTreeMap::new(), events)
}

/// Like [`check_trace`] for a trace that starts from the seeded states;
/// unseeded nodes start Free and powered off.
pub fn check_trace_from(seed: &BTreeMap<String, TrackSeed>, events: &[TraceEvent]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut nodes: BTreeMap<&str, NodeTrack> = seed
        .iter()
        .map(|(uuid, s)| {
            let t = NodeTrack {
                state: Some(s.state),
                attested: s.attested,
                passed: s.passed,
                share: s.share,
                key: s.key,
                measured: BTreeSet::new(),
                unknown_boot: s.powered,
            };
            (uuid.as_str(), t)
        })
        .collect();
    for e in events {
        let t = nodes.entry(e.node.as_str()).or_default();
        let mut fail = |invariant: &'static str, detail: String| {
            out.push(Violation {
                seq: Some(e.seq),
                invariant,
                detail: format!("node {}: {detail}", e.node),
            })
        };
        match &e.kind {
            EventKind::Admit { attested, .. } => {
                t.attested = *attested;
                t.passed = false;
            }
            EventKind::State { from, to } => {
                let current = t.state.unwrap_or(NodeState::Free);
                if current != *from {
                    fail("state", format!("transition from {from} while in {current}"));
                }
                if !from.can_transition_to(*to) {
                    fail("state", format!("illegal transition {from}->{to}"));
                }
                t.state = Some(*to);
            }
            EventKind::PowerOn | EventKind::PowerOff => t.power_cycle(),
            EventKind::Attest(r) => t.passed = *r == AttestationResult::Pass,
            EventKind::Revoke { .. } => t.passed = false,
            EventKind::Connect { role: NetRole::Enclave, port, .. } if port.starts_with("node:") => {
                let state = t.state.unwrap_or(NodeState::Free);
                if state != NodeState::Allocated {
                    fail("admission", format!("enclave connect {port} in state {state}"));
                }
                if t.attested && !t.passed {
                    fail("admission", format!("enclave connect {port} without a passing attestation"));
                }
            }
            EventKind::ShareReleased if !t.passed => {
                fail("key-gating", "verifier share released without a pass".into());
            }
            EventKind::ShareReleased => t.share = true,
            EventKind::Node(NodeEvent::KeyCombined) => {
                if !t.share {
                    fail("key-gating", "key combined without a released share".into());
                }
                t.key = true;
            }
            EventKind::KeyErased => t.key = false,
            EventKind::Unlock { image } if !t.key => {
                fail("key-gating", format!("{image} unlocked without a live key"));
            }
            EventKind::Node(NodeEvent::Measure { stage, .. }) => {
                t.measured.insert(stage.clone());
            }
            EventKind::Node(NodeEvent::Execute { stage } | NodeEvent::Kexec { stage })
                if !t.unknown_boot && !t.measured.contains(stage) =>
            {
                fail("measured-boot", format!("{stage} ran before being measured"));
            }
            _ => {}
        }
    }
    out
}
