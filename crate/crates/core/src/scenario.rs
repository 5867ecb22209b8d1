//! Scripted scenarios: a fleet, tenants, an action script and expected
//! outcomes, run against a fresh [`Cloud`] with a fixed seed.
//!
//! ```toml
//! name = "tamper-firmware"
//! seed = 7
//!
//! [fleet]
//! nodes = 2
//!
//! [[tamper]]
//! node = "node-01"
//! stage = "boot-block"
//! position = 3
//! value = 0x00
//!
//! [[tenant]]
//! name = "alice"
//! profile = "full"
//!
//! [[action]]
//! do = "admit"
//! tenant = "alice"
//! count = 2
//!
//! [[expect]]
//! node = "node-01"
//! state = "Rejected"
//! ```
//!
//! Nodes are named by uuid or as `tenant#i`, the i-th node handed to that
//! tenant in this scenario.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use crate::attestation::AttestationResult;
use crate::config::{
    parse_payload, ConfigError, FleetConfig, FleetSection, NodeSection, TamperSection,
    WhitelistSection,
};
use crate::node::EnclaveKey;
use crate::orchestrator::invariants::Violation;
use crate::orchestrator::{AdmitOutcome, Cloud, CloudError, FleetSpec, NodeState, ProbeStats, TrustProfile};

pub const BUNDLED: &[(&str, &str)] = &[
    ("tamper-firmware", include_str!("../scenarios/tamper-firmware.toml")),
    ("concurrent-16", include_str!("../scenarios/concurrent-16.toml")),
    ("eavesdropper", include_str!("../scenarios/eavesdropper.toml")),
    ("release-readmit", include_str!("../scenarios/release-readmit.toml")),
    ("runtime-revocation", include_str!("../scenarios/runtime-revocation.toml")),
    ("key-gating", include_str!("../scenarios/key-gating.toml")),
    ("stock-uefi", include_str!("../scenarios/stock-uefi.toml")),
    ("unattested", include_str!("../scenarios/unattested.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    description: Option<String>,
    seed: Option<u64>,
    #[serde(default)]
    fleet: FleetSection,
    #[serde(default)]
    node: Vec<NodeSection>,
    #[serde(default)]
    tamper: Vec<TamperSection>,
    #[serde(default)]
    whitelist: Vec<WhitelistSection>,
    #[serde(default)]
    tenant: Vec<TenantSection>,
    #[serde(default)]
    action: Vec<Action>,
    #[serde(default)]
    expect: Vec<Expect>,
}

#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct TenantSection {
    name: String,
    #[serde(default = "full")]
    profile: String,
    attested: Option<bool>,
    encrypt_storage: Option<bool>,
    encrypt_network: Option<bool>,
    #[serde(default = "one_usize")]
    enclave_networks: usize,
}

fn full() -> String {
    "full".into()
}

fn one_usize() -> usize {
    1
}

fn one() -> u64 {
    1
}

#[derive(Debug, Deserialize, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AdmitRequest {
    pub tenant: String,
    pub count: usize,
}

#[derive(Debug, Deserialize, Clone, PartialEq, Eq)]
#[serde(tag = "do", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Action {
    /// `tenant` + `count`, `tenant` + `node`, or a concurrent `batch`.
    Admit {
        tenant: Option<String>,
        count: Option<usize>,
        node: Option<String>,
        #[serde(default)]
        batch: Vec<AdmitRequest>,
    },
    Release { node: String },
    Clean { node: String },
    Tick {
        #[serde(default = "one")]
        count: u64,
        /// Nodes that must be revoked by the first of these ticks.
        #[serde(default)]
        expect_revoked: Vec<String>,
    },
    Tamper { node: String, stage: String, position: usize, value: u8 },
    WriteMemory { node: String, offset: usize, data: String },
    ProbeMemory { node: String, expect_zero: Option<bool> },
    WriteBlock { node: String, index: u64, fill: u8 },
    AuditStorage { node: String, expect_foreign: Option<usize> },
    ProbeReach { from: String, to: String, expect: Option<bool> },
    SetResponsive { node: String, value: bool },
    /// Probe every later step for reachability from this node.
    Watch { node: String },
    /// Try `count` random keys against the node's encrypted image.
    WrongKeys { node: String, count: usize },
    /// Ask the verifier for the node's share as an outsider.
    RequestShare { node: String, expect_released: Option<bool> },
    /// Mid-script state check; `reason` is a substring of the recorded
    /// rejection reason.
    AssertState { node: String, state: String, reason: Option<String> },
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::Admit { .. } => "admit",
            Action::Release { .. } => "release",
            Action::Clean { .. } => "clean",
            Action::Tick { .. } => "tick",
            Action::Tamper { .. } => "tamper",
            Action::WriteMemory { .. } => "write-memory",
            Action::ProbeMemory { .. } => "probe-memory",
            Action::WriteBlock { .. } => "write-block",
            Action::AuditStorage { .. } => "audit-storage",
            Action::ProbeReach { .. } => "probe-reach",
            Action::SetResponsive { .. } => "set-responsive",
            Action::Watch { .. } => "watch",
            Action::WrongKeys { .. } => "wrong-keys",
            Action::RequestShare { .. } => "request-share",
            Action::AssertState { .. } => "assert-state",
        }
    }
}

#[derive(Debug, Deserialize, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// A single node, or every node handed to `tenant`.
    pub node: Option<String>,
    pub tenant: Option<String>,
    pub state: String,
    /// With `tenant`: how many of its nodes must be in `state`
    /// (default: all of them).
    pub count: Option<usize>,
    /// With `node`: substring of the recorded rejection reason.
    pub reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub fleet: FleetSpec,
    tenants: Vec<(String, TrustProfile, usize)>,
    actions: Vec<(usize, Action)>,
    expects: Vec<(usize, Expect, NodeState)>,
}

/// Line of the n-th (0-based) `[[table]]` header.
fn header_line(text: &str, table: &str, n: usize) -> usize {
    let header = format!("[[{table}]]");
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with(&header))
        .nth(n)
        .map_or(0, |(i, _)| i + 1)
}

impl Scenario {
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ConfigError::from_toml(text, &e))?;
        let line_err = |table: &str, i: usize, m: String| ConfigError {
            line: Some(header_line(text, table, i)),
            message: m,
        };
        let fleet = FleetConfig {
            fleet: file.fleet,
            node: file.node,
            tamper: file.tamper,
            whitelist: file.whitelist,
        }
        .build(text, base_dir)?;

        let mut tenants = Vec::new();
        for (i, t) in file.tenant.iter().enumerate() {
            let base = TrustProfile::builtin(&t.profile).map_err(|e| line_err("tenant", i, e.to_string()))?;
            let custom = t.attested.is_some() || t.encrypt_storage.is_some() || t.encrypt_network.is_some();
            let profile = if custom {
                TrustProfile::new(
                    format!("{}-custom", base.name),
                    t.attested.unwrap_or(base.attested),
                    t.encrypt_storage.unwrap_or(base.encrypt_storage),
                    t.encrypt_network.unwrap_or(base.encrypt_network),
                )
                .map_err(|_| line_err("tenant", i, format!("tenant {}: encryption requires attestation", t.name)))?
            } else {
                base
            };
            if tenants.iter().any(|(n, _, _)| *n == t.name) {
                return Err(line_err("tenant", i, format!("duplicate tenant {}", t.name)));
            }
            tenants.push((t.name.clone(), profile, t.enclave_networks));
        }
        let known = |name: &str| tenants.iter().any(|(n, _, _)| n == name);

        let mut actions = Vec::new();
        for (i, a) in file.action.into_iter().enumerate() {
            let line = header_line(text, "action", i);
            let err = |m: String| ConfigError {
                line: Some(line),
                message: m,
            };
            if let Action::Admit {
                tenant,
                count,
                node,
                batch,
            } = &a
            {
                let single = tenant.is_some();
                if single == !batch.is_empty() {
                    return Err(err("admit needs either tenant or batch".into()));
                }
                if single && count.is_some() == node.is_some() {
                    return Err(err("admit with tenant needs exactly one of count or node".into()));
                }
                if !single && (count.is_some() || node.is_some()) {
                    return Err(err("count and node do not combine with batch".into()));
                }
                for t in tenant.iter().chain(batch.iter().map(|b| &b.tenant)) {
                    if !known(t) {
                        return Err(err(format!("unknown tenant {t}")));
                    }
                }
            }
            if let Action::WriteMemory { data, .. } = &a {
                parse_payload(data, base_dir).map_err(err)?;
            }
            if let Action::AssertState { state, .. } = &a {
                state.parse::<NodeState>().map_err(err)?;
            }
            actions.push((line, a));
        }

        let mut expects = Vec::new();
        for (i, e) in file.expect.into_iter().enumerate() {
            let line = header_line(text, "expect", i);
            let err = |m: String| ConfigError {
                line: Some(line),
                message: m,
            };
            let state: NodeState = e.state.parse().map_err(err)?;
            match (&e.node, &e.tenant) {
                (Some(_), None) if e.count.is_none() => {}
                (None, Some(t)) if e.reason.is_none() => {
                    if !known(t) {
                        return Err(err(format!("unknown tenant {t}")));
                    }
                }
                _ => return Err(err("expect needs node (with optional reason) or tenant (with optional count)".into())),
            }
            expects.push((line, e, state));
        }

        Ok(Scenario {
            name: file.name.unwrap_or_else(|| "scenario".into()),
            description: file.description.unwrap_or_default(),
            seed: file.seed.unwrap_or(DEFAULT_SEED),
            fleet,
            tenants,
            actions,
            expects,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(format!("{}: {e}", path.display())))?;
        let mut s = Self::parse(&text, path.parent())?;
        if s.name == "scenario" {
            if let Some(stem) = path.file_stem() {
                s.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(s)
    }

    pub fn bundled(name: &str) -> Option<Self> {
        let mut s = Self::parse(bundled(name)?, None).expect("bundled scenarios parse");
        s.name = name.to_string();
        Some(s)
    }

    /// Runs with the scenario's own seed.
    pub fn run(&self) -> Report {
        self.run_with_seed(self.seed)
    }

    pub fn run_with_seed(&self, seed: u64) -> Report {
        let mut report = Report {
            name: self.name.clone(),
            seed,
            ..Report::default()
        };
        let mut cloud = match Cloud::new(self.fleet.clone(), seed) {
            Ok(c) => c,
            Err(e) => {
                report.check("fleet", false, e.to_string());
                return report;
            }
        };
        for (name, profile, nets) in &self.tenants {
            if let Err(e) = cloud.add_tenant(name, profile.clone(), *nets) {
                report.check(format!("tenant {name}"), false, e.to_string());
                return report;
            }
        }
        let mut run = Run {
            cloud,
            handed: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x5eed),
        };
        for (n, (line, action)) in self.actions.iter().enumerate() {
            let label = format!("action {} (line {line}) {}", n + 1, action.name());
            if let Err(e) = run.exec(action, &label, &mut report) {
                report.check(label, false, e);
            }
        }
        for (line, e, state) in &self.expects {
            run.expect(*line, e, *state, &mut report);
        }
        let cloud = run.cloud;
        report.violations = cloud.violations();
        report.probes = cloud.probe_stats();
        report.final_states = cloud
            .records()
            .map(|r| (r.uuid.clone(), r.state, r.tenant.clone()))
            .collect();
        report.trace = cloud.trace().to_text();
        report.cloud = Some(cloud);
        report
    }
}

/// Parses text (or a bundled name) and runs it.
pub fn run_scenario(text: &str, base_dir: Option<&Path>, seed: Option<u64>) -> Result<Report, ConfigError> {
    let s = Scenario::parse(text, base_dir)?;
    Ok(s.run_with_seed(seed.unwrap_or(s.seed)))
}

struct Run {
    cloud: Cloud,
    /// Nodes handed to each tenant, in order.
    handed: BTreeMap<String, Vec<String>>,
    rng: ChaCha20Rng,
}

impl Run {
    fn resolve(&self, r: &str) -> Result<String, String> {
        if let Some((tenant, idx)) = r.split_once('#') {
            let i: usize = idx.parse().map_err(|_| format!("bad node reference {r:?}"))?;
            return self
                .handed
                .get(tenant)
                .and_then(|v| v.get(i))
                .cloned()
                .ok_or_else(|| format!("{tenant} has no node #{i}"));
        }
        if self.cloud.record(r).is_some() {
            Ok(r.to_string())
        } else {
            Err(format!("unknown node {r:?}"))
        }
    }

    fn record_outcomes(&mut self, tenants: &[String], out: &[AdmitOutcome], report: &mut Report) {
        for (t, o) in tenants.iter().zip(out) {
            if let Some(u) = o.uuid() {
                let handed = self.handed.entry(t.clone()).or_default();
                if !handed.iter().any(|x| x == u) {
                    handed.push(u.to_string());
                }
            }
            let line = match o {
                AdmitOutcome::Allocated { uuid } => format!("{t}: {uuid} Allocated"),
                AdmitOutcome::Rejected { uuid, reason } => format!("{t}: {uuid} Rejected ({reason})"),
                AdmitOutcome::NoFreeNodes => format!("{t}: NoFreeNodes"),
                AdmitOutcome::Failed { uuid, reason } => {
                    format!("{t}: {} failed ({reason})", uuid.as_deref().unwrap_or("-"))
                }
            };
            report.log.push(line);
        }
    }

    fn exec(&mut self, action: &Action, label: &str, report: &mut Report) -> Result<(), String> {
        let cloud_err = |e: CloudError| e.to_string();
        match action {
            Action::Admit {
                tenant,
                count,
                node,
                batch,
            } => {
                let (tenants, out) = match (tenant, count, node) {
                    (Some(t), _, Some(n)) => {
                        let uuid = self.resolve(n)?;
                        (vec![t.clone()], vec![self.cloud.admit_node(t, &uuid).map_err(cloud_err)?])
                    }
                    (Some(t), Some(c), None) => (vec![t.clone(); *c], self.cloud.admit(t, *c).map_err(cloud_err)?),
                    _ => {
                        let reqs: Vec<(String, usize)> = batch.iter().map(|b| (b.tenant.clone(), b.count)).collect();
                        let tenants = reqs.iter().flat_map(|(t, c)| vec![t.clone(); *c]).collect();
                        (tenants, self.cloud.admit_concurrently(&reqs).map_err(cloud_err)?)
                    }
                };
                self.record_outcomes(&tenants, &out, report);
            }
            Action::Release { node } => {
                let u = self.resolve(node)?;
                self.cloud.release_node(&u).map_err(cloud_err)?;
                report.log.push(format!("released {u}"));
            }
            Action::Clean { node } => {
                let u = self.resolve(node)?;
                self.cloud.clean_node(&u).map_err(cloud_err)?;
                report.log.push(format!("cleaned {u}"));
            }
            Action::Tick { count, expect_revoked } => {
                let targets = expect_revoked
                    .iter()
                    .map(|r| self.resolve(r))
                    .collect::<Result<Vec<_>, _>>()?;
                for i in 0..*count {
                    let results = self.cloud.tick().map_err(cloud_err)?;
                    let fails: Vec<String> = results
                        .iter()
                        .filter(|(_, r)| !r.is_pass())
                        .map(|(u, r)| format!("{u}:{r}"))
                        .collect();
                    report.log.push(format!(
                        "tick {}: {} polled, failures [{}]",
                        self.cloud.current_tick(),
                        results.len(),
                        fails.join(",")
                    ));
                    if i == 0 {
                        for u in &targets {
                            let failed = results.iter().any(|(x, r)| x == u && *r != AttestationResult::Pass);
                            let state = self.cloud.state_of(u);
                            let ports = self.cloud.isolation().port_set(u);
                            report.check(
                                format!("{label}: {u} revoked within 1 tick"),
                                failed && state == Some(NodeState::Rejected) && ports.is_empty(),
                                format!("state {state:?}, ports {ports:?}"),
                            );
                        }
                    }
                }
            }
            Action::Tamper {
                node,
                stage,
                position,
                value,
            } => {
                let u = self.resolve(node)?;
                self.cloud.tamper(&u, stage, *position, *value).map_err(cloud_err)?;
                report.log.push(format!("tampered {u} {stage}[{position}]={value:#04x}"));
            }
            Action::WriteMemory { node, offset, data } => {
                let u = self.resolve(node)?;
                let bytes = parse_payload(data, None)?;
                self.cloud.write_memory(&u, *offset, &bytes).map_err(cloud_err)?;
            }
            Action::ProbeMemory { node, expect_zero } => {
                let u = self.resolve(node)?;
                let zero = self.cloud.probe_memory(&u).map_err(cloud_err)?;
                report.log.push(format!("memory of {u}: {}", if zero { "zero" } else { "nonzero" }));
                if let Some(want) = expect_zero {
                    report.check(format!("{label}: {u} memory zero == {want}"), zero == *want, format!("zero = {zero}"));
                }
            }
            Action::WriteBlock { node, index, fill } => {
                let u = self.resolve(node)?;
                let bs = self
                    .cloud
                    .provisioning()
                    .target_of(&u)
                    .and_then(|id| self.cloud.provisioning().image(id).ok())
                    .map_or(crate::provisioning::DEFAULT_BLOCK_SIZE, |img| img.block_size);
                self.cloud.write_block(&u, *index, &vec![*fill; bs]).map_err(cloud_err)?;
            }
            Action::AuditStorage { node, expect_foreign } => {
                let u = self.resolve(node)?;
                let foreign = self.cloud.audit_storage(&u).map_err(cloud_err)?;
                report.log.push(format!("storage of {u}: foreign blocks {foreign:?}"));
                if let Some(want) = expect_foreign {
                    report.check(
                        format!("{label}: {u} foreign blocks == {want}"),
                        foreign.len() == *want,
                        format!("{foreign:?}"),
                    );
                }
            }
            Action::ProbeReach { from, to, expect } => {
                let (a, b) = (self.resolve(from)?, self.resolve(to)?);
                let r = self.cloud.reachable(&a, &b);
                report.log.push(format!("reachable({a}, {b}) = {r}"));
                if let Some(want) = expect {
                    report.check(format!("{label}: reachable({a}, {b}) == {want}"), r == *want, format!("got {r}"));
                }
            }
            Action::SetResponsive { node, value } => {
                let u = self.resolve(node)?;
                self.cloud.set_responsive(&u, *value).map_err(cloud_err)?;
            }
            Action::Watch { node } => {
                let u = self.resolve(node)?;
                self.cloud.watch(&u).map_err(cloud_err)?;
            }
            Action::WrongKeys { node, count } => {
                let u = self.resolve(node)?;
                let real = self
                    .cloud
                    .node(&u)
                    .and_then(|n| n.key().copied())
                    .ok_or_else(|| format!("{u} holds no key"))?;
                let mut accepted = 0;
                for _ in 0..*count {
                    let mut k = EnclaveKey::random(&mut self.rng);
                    if k == real {
                        k.0[0] ^= 1;
                    }
                    if self.cloud.try_key(&u, &k).map_err(cloud_err)? {
                        accepted += 1;
                    }
                }
                let real_ok = self.cloud.try_key(&u, &real).map_err(cloud_err)?;
                report.check(
                    format!("{label}: {count} wrong keys refused, real key accepted"),
                    accepted == 0 && real_ok,
                    format!("{accepted} wrong keys accepted, real key ok = {real_ok}"),
                );
            }
            Action::RequestShare { node, expect_released } => {
                let u = self.resolve(node)?;
                let released = self.cloud.request_share(&u);
                report.log.push(format!("share request for {u}: released = {released}"));
                if let Some(want) = expect_released {
                    report.check(
                        format!("{label}: {u} share released == {want}"),
                        released == *want,
                        format!("released = {released}"),
                    );
                }
            }
            Action::AssertState { node, state, reason } => {
                let u = self.resolve(node)?;
                let want: NodeState = state.parse()?;
                let rec = self.cloud.record(&u).expect("resolved");
                let mut ok = rec.state == want;
                if let Some(r) = reason {
                    ok &= rec.reason.as_deref().is_some_and(|got| got.contains(r.as_str()));
                }
                report.check(
                    format!("{label}: {u} {want}"),
                    ok,
                    format!("{u} is {} (reason {})", rec.state, rec.reason.as_deref().unwrap_or("-")),
                );
            }
        }
        Ok(())
    }

    fn expect(&self, line: usize, e: &Expect, state: NodeState, report: &mut Report) {
        if let Some(r) = &e.node {
            let label = format!("expect (line {line}) {r} {state}");
            match self.resolve(r) {
                Ok(u) => {
                    let rec = self.cloud.record(&u).expect("resolved");
                    let mut ok = rec.state == state;
                    if let Some(want) = &e.reason {
                        ok &= rec.reason.as_deref().is_some_and(|got| got.contains(want.as_str()));
                    }
                    report.check(
                        label,
                        ok,
                        format!("{u} is {} (reason {})", rec.state, rec.reason.as_deref().unwrap_or("-")),
                    );
                }
                Err(m) => report.check(label, false, m),
            }
        } else if let Some(t) = &e.tenant {
            let nodes = self.handed.get(t).cloned().unwrap_or_default();
            let n = nodes
                .iter()
                .filter(|u| self.cloud.state_of(u) == Some(state))
                .count();
            let want = e.count.unwrap_or(nodes.len());
            report.check(
                format!("expect (line {line}) {t}: {want} {state}"),
                n == want && (e.count.is_some() || !nodes.is_empty()),
                format!("{n} of {} handed nodes are {state}", nodes.len()),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub label: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub log: Vec<String>,
    pub checks: Vec<Check>,
    pub violations: Vec<Violation>,
    pub final_states: Vec<(String, NodeState, Option<String>)>,
    pub probes: ProbeStats,
    pub trace: String,
    /// The cloud as the scenario left it.
    pub cloud: Option<Cloud>,
}

impl Report {
    fn check(&mut self, label: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            label: label.into(),
            ok,
            detail: detail.into(),
        });
    }

    pub fn expectations_met(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn passed(&self) -> bool {
        self.expectations_met() && self.violations.is_empty() && self.cloud.is_some()
    }

    /// Human-readable report.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} (seed {})", self.name, self.seed);
        for l in &self.log {
            let _ = writeln!(s, "  {l}");
        }
        let _ = writeln!(s, "final states:");
        for (u, st, t) in &self.final_states {
            let _ = writeln!(s, "  {u} {st} {}", t.as_deref().unwrap_or("-"));
        }
        let _ = writeln!(s, "checks:");
        for c in &self.checks {
            let _ = writeln!(s, "  [{}] {} ({})", if c.ok { "PASS" } else { "FAIL" }, c.label, c.detail);
        }
        if self.probes.probes > 0 {
            let _ = writeln!(s, "eavesdropper probes: {} issued, {} reached", self.probes.probes, self.probes.hits);
        }
        let _ = writeln!(s, "invariant violations: {}", self.violations.len());
        for v in &self.violations {
            let _ = writeln!(s, "  {v}");
        }
        let _ = writeln!(s, "result: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}
