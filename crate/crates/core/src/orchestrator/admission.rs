//! Admission as resumable per-node jobs.
//!
//! Each admission is a small state machine. A seeded scheduler interleaves
//! job steps with single switch operations, so concurrent admissions race
//! for nodes and VLANs exactly as independent tenants would, yet every run
//! with the same seed produces the same trace.

use rand::Rng;

use crate::attestation::{AttestationRequest, AttestationResponse, AttestationResult, EnrollmentState};
use crate::isolation::{IsolationError, Ticket};
use crate::node::NodeSim;

use super::trace::EventKind;
use super::{runtime_policy, Cloud, CloudError, NodeState};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdmitOutcome {
    Allocated { uuid: String },
    Rejected { uuid: String, reason: String },
    NoFreeNodes,
    Failed { uuid: Option<String>, reason: String },
}

impl AdmitOutcome {
    pub fn uuid(&self) -> Option<&str> {
        match self {
            AdmitOutcome::Allocated { uuid } | AdmitOutcome::Rejected { uuid, .. } => Some(uuid),
            AdmitOutcome::Failed { uuid, .. } => uuid.as_deref(),
            AdmitOutcome::NoFreeNodes => None,
        }
    }

    pub fn is_allocated(&self) -> bool {
        matches!(self, AdmitOutcome::Allocated { .. })
    }
}

#[derive(Debug)]
enum Step {
    Allocate,
    Airlock,
    PowerOn,
    Enroll,
    Attest,
    Provision,
    Boot,
    Enter,
    Finish,
    Reject(String),
    RejectFinish(String),
    Done,
}

#[derive(Debug)]
pub(super) struct AdmitJob {
    tenant: String,
    target: Option<String>,
    uuid: Option<String>,
    step: Step,
    wait: Option<Ticket>,
    quarantined: bool,
    outcome: Option<AdmitOutcome>,
}

impl AdmitJob {
    fn new(tenant: &str, target: Option<String>) -> Self {
        AdmitJob {
            tenant: tenant.to_string(),
            target,
            uuid: None,
            step: Step::Allocate,
            wait: None,
            quarantined: false,
            outcome: None,
        }
    }

    fn uuid(&self) -> String {
        self.uuid.clone().expect("allocated before use")
    }
}

impl Cloud {
    /// Admits `count` nodes for one tenant.
    pub fn admit(&mut self, tenant: &str, count: usize) -> Result<Vec<AdmitOutcome>, CloudError> {
        self.admit_concurrently(&[(tenant.to_string(), count)])
    }

    /// Admits a specific free node.
    pub fn admit_node(&mut self, tenant: &str, uuid: &str) -> Result<AdmitOutcome, CloudError> {
        self.check_tenant(tenant)?;
        if !self.nodes.contains_key(uuid) {
            return Err(CloudError::NoSuchNode(uuid.to_string()));
        }
        let mut out = self.run_jobs(vec![AdmitJob::new(tenant, Some(uuid.to_string()))]);
        Ok(out.remove(0))
    }

    /// Runs every requested admission concurrently. Outcomes are returned
    /// in request order.
    pub fn admit_concurrently(&mut self, requests: &[(String, usize)]) -> Result<Vec<AdmitOutcome>, CloudError> {
        let mut jobs = Vec::new();
        for (tenant, count) in requests {
            self.check_tenant(tenant)?;
            jobs.extend((0..*count).map(|_| AdmitJob::new(tenant, None)));
        }
        Ok(self.run_jobs(jobs))
    }

    fn check_tenant(&self, tenant: &str) -> Result<(), CloudError> {
        if self.tenants.contains_key(tenant) {
            Ok(())
        } else {
            Err(CloudError::NoSuchTenant(tenant.to_string()))
        }
    }

    fn run_jobs(&mut self, mut jobs: Vec<AdmitJob>) -> Vec<AdmitOutcome> {
        // None stands for the switch engine.
        let mut actors: Vec<Option<usize>> = Vec::with_capacity(jobs.len() + 1);
        loop {
            actors.clear();
            let applied = self.isolation.applied_through();
            for (i, job) in jobs.iter().enumerate() {
                let ready = job.wait.is_none_or(|t| t.0 <= applied);
                if !matches!(job.step, Step::Done) && ready {
                    actors.push(Some(i));
                }
            }
            if !self.isolation.is_drained() {
                actors.push(None);
            }
            if actors.is_empty() {
                break;
            }
            match actors[self.rng.gen_range(0..actors.len())] {
                None => {
                    self.engine_step();
                }
                Some(i) => {
                    self.job_step(&mut jobs[i]);
                    self.after_step();
                }
            }
        }
        jobs.into_iter()
            .map(|j| j.outcome.expect("finished jobs carry an outcome"))
            .collect()
    }

    fn job_step(&mut self, job: &mut AdmitJob) {
        job.wait = None;
        let step = std::mem::replace(&mut job.step, Step::Done);
        let rejecting = matches!(step, Step::Reject(_) | Step::RejectFinish(_));
        job.step = match self.run_step(job, step) {
            Ok(next) => next,
            Err(e) if job.quarantined && !rejecting => Step::Reject(e.to_string()),
            Err(e) => {
                if let Some(uuid) = &job.uuid {
                    self.emit(uuid, EventKind::Abort { reason: e.to_string() });
                }
                job.outcome = Some(AdmitOutcome::Failed {
                    uuid: job.uuid.clone(),
                    reason: e.to_string(),
                });
                Step::Done
            }
        };
    }

    fn node_ref(&self, uuid: &str) -> Result<&NodeSim, CloudError> {
        self.nodes
            .get(uuid)
            .ok_or_else(|| CloudError::NoSuchNode(uuid.to_string()))
    }

    fn run_step(&mut self, job: &mut AdmitJob, step: Step) -> Result<Step, CloudError> {
        let tenant = self.tenants[&job.tenant].clone();
        let profile = tenant.profile.clone();
        match step {
            Step::Allocate => {
                let allocated = match &job.target {
                    Some(u) => self.isolation.allocate_specific(&tenant.project, u).map(|_| u.clone()),
                    None => self.isolation.allocate_node(&tenant.project, &mut self.rng),
                };
                let uuid = match allocated {
                    Ok(u) => u,
                    Err(IsolationError::NoFreeNodes) => {
                        job.outcome = Some(AdmitOutcome::NoFreeNodes);
                        return Ok(Step::Done);
                    }
                    Err(e) => return Err(e.into()),
                };
                let record = self.records.get_mut(&uuid).expect("pooled node has a record");
                record.tenant = Some(tenant.name.clone());
                record.profile = Some(profile.clone());
                record.reason = None;
                record.session_writes.clear();
                job.uuid = Some(uuid.clone());
                self.emit(
                    &uuid,
                    EventKind::Admit {
                        tenant: tenant.name.clone(),
                        profile: profile.name.clone(),
                        attested: profile.attested,
                    },
                );
                Ok(Step::Airlock)
            }
            Step::Airlock => {
                let uuid = job.uuid();
                let nic = self.node_ref(&uuid)?.nics()[0].clone();
                let (net, tickets) = self.isolation.create_airlock_network(&tenant.project, &uuid, &nic)?;
                self.airlock_owner.insert(net.clone(), uuid.clone());
                self.records.get_mut(&uuid).expect("known").airlock_net = Some(net);
                let last = *tickets.last().expect("airlock has members");
                self.transition_after(Some(last), &uuid, NodeState::Airlock, false);
                job.quarantined = true;
                job.wait = Some(last);
                Ok(Step::PowerOn)
            }
            Step::PowerOn => {
                let uuid = job.uuid();
                self.emit(&uuid, EventKind::PowerOn);
                let events = self.node_mut(&uuid)?.power_on()?;
                self.emit_node_events(&uuid, events);
                Ok(if profile.attested { Step::Enroll } else { Step::Provision })
            }
            Step::Enroll => {
                let uuid = job.uuid();
                let node = self.node_ref(&uuid)?;
                let (ek_pub, aik_pub) = (node.tpm().identity.ek_public(), node.tpm().identity.aik_public());
                let policy = node.firmware().policy_name();
                if self.attestation.registrar.state_of(&uuid) != Some(EnrollmentState::Enrolled) {
                    let ct = match self.attestation.handle(AttestationRequest::Register {
                        uuid: uuid.clone(),
                        ek_pub,
                        aik_pub,
                    }) {
                        AttestationResponse::Challenge { ct } => ct,
                        AttestationResponse::Err(e) => return Err(e.into()),
                        other => unreachable!("register answered {other:?}"),
                    };
                    let secret = self.node_ref(&uuid)?.activate_credential(&ct)?;
                    if let AttestationResponse::Err(e) = self.attestation.handle(AttestationRequest::Confirm {
                        uuid: uuid.clone(),
                        secret,
                    }) {
                        return Err(e.into());
                    }
                    self.emit(&uuid, EventKind::Enrolled);
                }
                let (u, v) = tenant.key.split(&mut self.rng);
                self.tenants
                    .get_mut(&tenant.name)
                    .expect("known")
                    .shares
                    .insert(uuid.clone(), u);
                self.attestation.verifier.add_node(&uuid, policy, v)?;
                Ok(Step::Attest)
            }
            Step::Attest => {
                let uuid = job.uuid();
                let nonce = match self.attestation.handle(AttestationRequest::IssueNonce { uuid: uuid.clone() }) {
                    AttestationResponse::Nonce { n } => n,
                    AttestationResponse::Err(e) => return Err(e.into()),
                    other => unreachable!("nonce request answered {other:?}"),
                };
                self.emit(&uuid, EventKind::Nonce { hex: hex::encode(nonce) });
                let quote = self.node_ref(&uuid)?.send_attestation_quote(nonce);
                let att = &mut self.attestation;
                let result = match quote {
                    Ok(q) => att.verifier.attest_once(&att.registrar, &uuid, &q)?,
                    Err(_) => att.verifier.record_no_quote(&uuid)?,
                };
                self.emit(&uuid, EventKind::Attest(result));
                Ok(match result {
                    AttestationResult::Pass => Step::Provision,
                    AttestationResult::Fail(reason) => Step::Reject(reason.to_string()),
                })
            }
            Step::Provision => {
                let uuid = job.uuid();
                let image = self.provisioning.clone_image(self.base_image)?;
                if profile.encrypt_storage {
                    self.provisioning.encrypt_image(image, &tenant.key, &mut self.rng)?;
                }
                self.provisioning.attach_boot_target(&uuid, image)?;
                self.records.get_mut(&uuid).expect("known").image = Some(image);
                self.emit(&uuid, EventKind::AttachTarget { image });
                Ok(Step::Boot)
            }
            Step::Boot => {
                let uuid = job.uuid();
                let kernel = self.tenant_kernel.clone();
                if profile.encrypt_storage || profile.encrypt_network {
                    let v = match self.attestation.handle(AttestationRequest::FetchShare { uuid: uuid.clone() }) {
                        AttestationResponse::Share { v } => {
                            self.emit(&uuid, EventKind::ShareReleased);
                            v
                        }
                        _ => {
                            self.emit(&uuid, EventKind::ShareRefused);
                            return Ok(Step::Reject("share refused".into()));
                        }
                    };
                    let u = self.tenants[&tenant.name].shares[&uuid];
                    let events = self.node_mut(&uuid)?.receive_key_and_boot_os(&u, &v, &kernel)?;
                    self.emit_node_events(&uuid, events);
                    if profile.encrypt_storage {
                        let key = *self.node_ref(&uuid)?.key().expect("key just combined");
                        let image = self.records[&uuid].image.expect("attached");
                        match self.provisioning.unlock_encrypted_image(image, &key) {
                            Ok(()) => {
                                self.emit(&uuid, EventKind::Unlock { image });
                            }
                            Err(e) => {
                                self.emit(&uuid, EventKind::UnlockFailed { image });
                                return Ok(Step::Reject(e.to_string()));
                            }
                        }
                    }
                } else {
                    let events = self.node_mut(&uuid)?.boot_os(&kernel)?;
                    self.emit_node_events(&uuid, events);
                }
                if profile.attested {
                    let policy = runtime_policy(self.node_ref(&uuid)?.firmware().policy_name());
                    self.attestation.verifier.set_policy(&uuid, &policy)?;
                }
                Ok(Step::Enter)
            }
            Step::Enter => {
                let uuid = job.uuid();
                let nic = self.node_ref(&uuid)?.nics()[0].clone();
                let airlock = self.records[&uuid].airlock_net.clone().expect("in airlock");
                // Leave the airlock first so the node never sees the services
                // and its enclave at once.
                let out = self.isolation.detach(&uuid, &nic, &airlock)?;
                self.transition_after(Some(out), &uuid, NodeState::Allocated, false);
                let mut last = out;
                for net in &tenant.enclave_nets {
                    last = self.isolation.connect(&uuid, &nic, net)?;
                }
                if let Some(t) = self.isolation.teardown_network(&airlock)?.last() {
                    last = *t;
                }
                job.wait = Some(last);
                Ok(Step::Finish)
            }
            Step::Finish => {
                let uuid = job.uuid();
                self.records.get_mut(&uuid).expect("known").airlock_net = None;
                self.tenants
                    .get_mut(&tenant.name)
                    .expect("known")
                    .admitted
                    .push(uuid.clone());
                job.outcome = Some(AdmitOutcome::Allocated { uuid });
                Ok(Step::Done)
            }
            Step::Reject(reason) => {
                let uuid = job.uuid();
                self.power_off(&uuid);
                self.end_storage_session(&uuid);
                self.attestation.verifier.revoke(&uuid);
                if let Some(t) = self.tenants.get_mut(&tenant.name) {
                    t.shares.remove(&uuid);
                }
                self.records.get_mut(&uuid).expect("known").reason = Some(reason.clone());
                let detached = self.isolation.detach_all(&uuid)?;
                let node_out = detached.last().map(|(_, t)| *t);
                self.transition_after(node_out, &uuid, NodeState::Rejected, false);
                let mut last = node_out;
                if let Some(net) = self.records[&uuid].airlock_net.clone() {
                    if let Some(t) = self.isolation.teardown_network(&net)?.last() {
                        last = Some(*t);
                    }
                }
                job.wait = last;
                Ok(Step::RejectFinish(reason))
            }
            Step::RejectFinish(reason) => {
                let uuid = job.uuid();
                self.records.get_mut(&uuid).expect("known").airlock_net = None;
                job.outcome = Some(AdmitOutcome::Rejected { uuid, reason });
                Ok(Step::Done)
            }
            Step::Done => Ok(Step::Done),
        }
    }
}
