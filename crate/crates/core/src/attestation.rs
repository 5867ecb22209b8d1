//! Tenant-operated attestation service.
//!
//! The [`Registrar`] binds node identifiers to TPM keys through a
//! credential-activation handshake. The [`Verifier`] keeps the whitelist,
//! checks quotes against golden PCR composites, gates release of the
//! verifier key share and re-attests running nodes on every poll tick.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::node::Stage;
use crate::tpm::{
    make_credential, verify_quote_signature, AikPublic, Digest, EkPublic, PcrBank, PcrIndex,
    Quote, NONCE_LEN,
};

pub const CHALLENGE_SECRET_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("node {0} is already enrolled")]
    AlreadyEnrolled(String),
    #[error("enrollment of node {0} failed: secret mismatch")]
    EnrollmentFailed(String),
    #[error("no such node {0}")]
    NoSuchNode(String),
    #[error("no whitelist entry named {0:?}")]
    NoSuchEntry(String),
    #[error("no attestation round pending for node {0}")]
    NoPendingRound(String),
    #[error("verifier share refused for node {0}")]
    KeyRefused(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnrollmentState {
    Pending,
    Enrolled,
}

impl EnrollmentState {
    pub fn as_str(self) -> &'static str {
        match self {
            EnrollmentState::Pending => "pending",
            EnrollmentState::Enrolled => "enrolled",
        }
    }
}

impl std::str::FromStr for EnrollmentState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(EnrollmentState::Pending),
            "enrolled" => Ok(EnrollmentState::Enrolled),
            other => Err(format!("unknown enrollment state {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrarEntry {
    pub ek_pub: EkPublic,
    pub aik_pub: AikPublic,
    pub state: EnrollmentState,
}

/// Node-to-TPM mapping.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Registrar {
    entries: BTreeMap<String, RegistrarEntry>,
    pending_challenges: BTreeMap<String, Vec<u8>>,
}

impl Registrar {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the node as Pending and returns a fresh secret encrypted to
    /// `ek_pub` with `aik_pub` bound inside. Re-registering a Pending node
    /// replaces its challenge; an Enrolled node cannot be re-registered.
    pub fn register_node<R: RngCore + CryptoRng>(
        &mut self,
        uuid: &str,
        ek_pub: EkPublic,
        aik_pub: AikPublic,
        rng: &mut R,
    ) -> Result<Vec<u8>, AttestationError> {
        if matches!(self.entries.get(uuid), Some(e) if e.state == EnrollmentState::Enrolled) {
            return Err(AttestationError::AlreadyEnrolled(uuid.to_string()));
        }
        let mut secret = vec![0u8; CHALLENGE_SECRET_LEN];
        rng.fill_bytes(&mut secret);
        let challenge = make_credential(&ek_pub, &aik_pub, &secret, rng);
        self.entries.insert(
            uuid.to_string(),
            RegistrarEntry {
                ek_pub,
                aik_pub,
                state: EnrollmentState::Pending,
            },
        );
        self.pending_challenges.insert(uuid.to_string(), secret);
        Ok(challenge)
    }

    pub fn confirm_enrollment(&mut self, uuid: &str, secret: &[u8]) -> Result<(), AttestationError> {
        let entry = self
            .entries
            .get_mut(uuid)
            .ok_or_else(|| AttestationError::NoSuchNode(uuid.to_string()))?;
        if entry.state == EnrollmentState::Enrolled {
            return Err(AttestationError::AlreadyEnrolled(uuid.to_string()));
        }
        match self.pending_challenges.get(uuid) {
            Some(expected) if expected.as_slice() == secret => {
                entry.state = EnrollmentState::Enrolled;
                self.pending_challenges.remove(uuid);
                Ok(())
            }
            _ => Err(AttestationError::EnrollmentFailed(uuid.to_string())),
        }
    }

    /// The AIK of an Enrolled node; Pending entries are never handed out.
    pub fn enrolled_aik(&self, uuid: &str) -> Option<AikPublic> {
        self.entries
            .get(uuid)
            .filter(|e| e.state == EnrollmentState::Enrolled)
            .map(|e| e.aik_pub)
    }

    pub fn state_of(&self, uuid: &str) -> Option<EnrollmentState> {
        self.entries.get(uuid).map(|e| e.state)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &RegistrarEntry)> {
        self.entries.iter()
    }

    /// Restores an entry from persisted state. Pending challenges are not
    /// persisted, so a restored Pending node must register again.
    pub fn restore_entry(&mut self, uuid: &str, entry: RegistrarEntry) {
        self.entries.insert(uuid.to_string(), entry);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("whitelist line {line}: {message}")]
pub struct WhitelistParseError {
    pub line: usize,
    pub message: String,
}

/// Named golden measurement sequences.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Whitelist {
    entries: BTreeMap<String, Vec<(PcrIndex, Digest)>>,
}

impl Whitelist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, events: Vec<(PcrIndex, Digest)>) {
        self.entries.insert(name.into(), events);
    }

    /// Entry whose events are the measurements of `stages` in boot order.
    pub fn insert_stages<'a>(
        &mut self,
        name: impl Into<String>,
        stages: impl IntoIterator<Item = &'a Stage>,
    ) {
        let events = stages.into_iter().map(|s| (s.pcr(), s.digest())).collect();
        self.insert(name, events);
    }

    pub fn get(&self, name: &str) -> Option<&[(PcrIndex, Digest)]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Folds the entry's extends over a zeroed bank and returns the final
    /// value of every register the entry touches.
    pub fn replay_golden(&self, name: &str) -> Result<BTreeMap<PcrIndex, Digest>, AttestationError> {
        let events = self
            .entries
            .get(name)
            .ok_or_else(|| AttestationError::NoSuchEntry(name.to_string()))?;
        let bank = PcrBank::replay(events);
        Ok(events
            .iter()
            .map(|(i, _)| *i)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|i| (i, bank.read(i)))
            .collect())
    }

    /// Parses `entry <name>` blocks of `<pcr_index> <64-hex-digest>` lines.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, WhitelistParseError> {
        let mut wl = Whitelist::new();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |message: String| WhitelistParseError {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let first = parts.next().expect("non-empty line");
            if first == "entry" {
                let name = parts
                    .next()
                    .ok_or_else(|| err("entry without a name".into()))?;
                if parts.next().is_some() {
                    return Err(err("trailing tokens after entry name".into()));
                }
                if wl.entries.contains_key(name) {
                    return Err(err(format!("duplicate entry {name:?}")));
                }
                wl.entries.insert(name.to_string(), Vec::new());
                current = Some(name.to_string());
                continue;
            }
            let name = current
                .as_ref()
                .ok_or_else(|| err("measurement line before any entry".into()))?;
            let index: u32 = first
                .parse()
                .map_err(|_| err(format!("bad PCR index {first:?}")))?;
            let index = PcrIndex::new(index).map_err(|e| err(e.to_string()))?;
            let digest = parts.next().ok_or_else(|| err("missing digest".into()))?;
            if digest.len() != 64 {
                return Err(err(format!("digest must be 64 hex characters, got {}", digest.len())));
            }
            let digest = Digest::from_hex(digest).map_err(|e| err(e.to_string()))?;
            if parts.next().is_some() {
                return Err(err("trailing tokens after digest".into()));
            }
            wl.entries
                .get_mut(name)
                .expect("current entry exists")
                .push((index, digest));
        }
        Ok(wl)
    }
}

impl fmt::Display for Whitelist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, events) in &self.entries {
            writeln!(f, "entry {name}")?;
            for (i, d) in events {
                writeln!(f, "{i} {d}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FailReason {
    BadSignature,
    UnknownAik,
    NonceMismatch,
    MeasurementMismatch(PcrIndex),
    NotEnrolled,
    /// The node produced no quote within the round.
    NoQuote,
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailReason::BadSignature => f.write_str("BadSignature"),
            FailReason::UnknownAik => f.write_str("UnknownAik"),
            FailReason::NonceMismatch => f.write_str("NonceMismatch"),
            FailReason::MeasurementMismatch(i) => write!(f, "MeasurementMismatch({i})"),
            FailReason::NotEnrolled => f.write_str("NotEnrolled"),
            FailReason::NoQuote => f.write_str("NoQuote"),
        }
    }
}

impl std::str::FromStr for FailReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "BadSignature" => FailReason::BadSignature,
            "UnknownAik" => FailReason::UnknownAik,
            "NonceMismatch" => FailReason::NonceMismatch,
            "NotEnrolled" => FailReason::NotEnrolled,
            "NoQuote" => FailReason::NoQuote,
            other => {
                let idx = other
                    .strip_prefix("MeasurementMismatch(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|i| i.parse::<u32>().ok())
                    .and_then(|i| PcrIndex::new(i).ok())
                    .ok_or_else(|| format!("unknown failure reason {other:?}"))?;
                FailReason::MeasurementMismatch(idx)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Pass,
    Fail,
}

/// Outcome of one attestation round. A reason exists exactly when the
/// verdict is Fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttestationResult {
    Pass,
    Fail(FailReason),
}

impl AttestationResult {
    pub fn verdict(&self) -> Verdict {
        match self {
            AttestationResult::Pass => Verdict::Pass,
            AttestationResult::Fail(_) => Verdict::Fail,
        }
    }

    pub fn reason(&self) -> Option<FailReason> {
        match self {
            AttestationResult::Pass => None,
            AttestationResult::Fail(r) => Some(*r),
        }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, AttestationResult::Pass)
    }
}

impl fmt::Display for AttestationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttestationResult::Pass => f.write_str("Pass"),
            AttestationResult::Fail(r) => write!(f, "Fail({r})"),
        }
    }
}

impl std::str::FromStr for AttestationResult {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "Pass" {
            return Ok(AttestationResult::Pass);
        }
        s.strip_prefix("Fail(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("bad attestation result {s:?}"))?
            .parse()
            .map(AttestationResult::Fail)
    }
}

/// Per-node verifier bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifierRecord {
    pub policy: String,
    pub pending_nonce: Option<[u8; NONCE_LEN]>,
    pub last_nonce: Option<[u8; NONCE_LEN]>,
    pub last_result: Option<AttestationResult>,
    pub verifier_share: [u8; 32],
    pub cycle: u64,
    pub passed_this_cycle: bool,
    pub share_released: bool,
    pub revoked: bool,
}

#[derive(Debug, Clone)]
pub struct Verifier {
    whitelist: Whitelist,
    records: BTreeMap<String, VerifierRecord>,
    issued_nonces: HashSet<[u8; NONCE_LEN]>,
    poll_interval: u64,
}

impl Verifier {
    pub fn new(whitelist: Whitelist) -> Self {
        Verifier {
            whitelist,
            records: BTreeMap::new(),
            issued_nonces: HashSet::new(),
            poll_interval: 1,
        }
    }

    pub fn whitelist(&self) -> &Whitelist {
        &self.whitelist
    }

    pub fn whitelist_mut(&mut self) -> &mut Whitelist {
        &mut self.whitelist
    }

    pub fn poll_interval(&self) -> u64 {
        self.poll_interval
    }

    pub fn set_poll_interval(&mut self, ticks: u64) {
        self.poll_interval = ticks.max(1);
    }

    pub fn record(&self, uuid: &str) -> Option<&VerifierRecord> {
        self.records.get(uuid)
    }

    pub fn records(&self) -> impl Iterator<Item = (&String, &VerifierRecord)> {
        self.records.iter()
    }

    /// Every nonce issued so far, sorted.
    pub fn issued_nonces(&self) -> Vec<[u8; NONCE_LEN]> {
        let mut v: Vec<_> = self.issued_nonces.iter().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn restore_issued_nonce(&mut self, nonce: [u8; NONCE_LEN]) {
        self.issued_nonces.insert(nonce);
    }

    pub fn restore_record(&mut self, uuid: &str, record: VerifierRecord) {
        if let Some(n) = record.last_nonce {
            self.issued_nonces.insert(n);
        }
        if let Some(n) = record.pending_nonce {
            self.issued_nonces.insert(n);
        }
        self.records.insert(uuid.to_string(), record);
    }

    /// Tenant request to verify a node under `policy`, depositing the
    /// verifier half of the node's key split.
    pub fn add_node(
        &mut self,
        uuid: &str,
        policy: &str,
        verifier_share: [u8; 32],
    ) -> Result<(), AttestationError> {
        if !self.whitelist.contains(policy) {
            return Err(AttestationError::NoSuchEntry(policy.to_string()));
        }
        let cycle = self.records.get(uuid).map_or(0, |r| r.cycle);
        self.records.insert(
            uuid.to_string(),
            VerifierRecord {
                policy: policy.to_string(),
                pending_nonce: None,
                last_nonce: None,
                last_result: None,
                verifier_share,
                cycle: cycle + 1,
                passed_this_cycle: false,
                share_released: false,
                revoked: false,
            },
        );
        Ok(())
    }

    /// Switches the node to another whitelist entry, e.g. once it has
    /// kexec'd into the tenant OS.
    pub fn set_policy(&mut self, uuid: &str, policy: &str) -> Result<(), AttestationError> {
        if !self.whitelist.contains(policy) {
            return Err(AttestationError::NoSuchEntry(policy.to_string()));
        }
        self.record_mut(uuid)?.policy = policy.to_string();
        Ok(())
    }

    pub fn remove_node(&mut self, uuid: &str) -> Option<VerifierRecord> {
        self.records.remove(uuid)
    }

    fn record_mut(&mut self, uuid: &str) -> Result<&mut VerifierRecord, AttestationError> {
        self.records
            .get_mut(uuid)
            .ok_or_else(|| AttestationError::NoSuchNode(uuid.to_string()))
    }

    /// Draws a nonce never issued before in this verifier's lifetime.
    pub fn issue_nonce<R: RngCore + CryptoRng>(
        &mut self,
        uuid: &str,
        rng: &mut R,
    ) -> Result<[u8; NONCE_LEN], AttestationError> {
        if !self.records.contains_key(uuid) {
            return Err(AttestationError::NoSuchNode(uuid.to_string()));
        }
        let nonce = loop {
            let mut n = [0u8; NONCE_LEN];
            rng.fill_bytes(&mut n);
            if self.issued_nonces.insert(n) {
                break n;
            }
        };
        self.record_mut(uuid)?.pending_nonce = Some(nonce);
        Ok(nonce)
    }

    /// Checks, in order: enrollment, AIK signature, nonce freshness, then
    /// each golden register of the node's policy.
    pub fn attest_once(
        &mut self,
        registrar: &Registrar,
        uuid: &str,
        quote: &Quote,
    ) -> Result<AttestationResult, AttestationError> {
        let record = self
            .records
            .get(uuid)
            .ok_or_else(|| AttestationError::NoPendingRound(uuid.to_string()))?;
        let issued = record
            .pending_nonce
            .ok_or_else(|| AttestationError::NoPendingRound(uuid.to_string()))?;
        let golden = self.whitelist.replay_golden(&record.policy)?;
        let result = evaluate(registrar, uuid, quote, &issued, &golden);
        self.finish_round(uuid, issued, result);
        Ok(result)
    }

    /// Closes the pending round of a node that produced no quote.
    pub fn record_no_quote(&mut self, uuid: &str) -> Result<AttestationResult, AttestationError> {
        let issued = self
            .records
            .get(uuid)
            .and_then(|r| r.pending_nonce)
            .ok_or_else(|| AttestationError::NoPendingRound(uuid.to_string()))?;
        let result = AttestationResult::Fail(FailReason::NoQuote);
        self.finish_round(uuid, issued, result);
        Ok(result)
    }

    fn finish_round(&mut self, uuid: &str, nonce: [u8; NONCE_LEN], result: AttestationResult) {
        let record = self.records.get_mut(uuid).expect("checked by caller");
        record.pending_nonce = None;
        record.last_nonce = Some(nonce);
        record.last_result = Some(result);
        record.passed_this_cycle = result.is_pass();
    }

    /// Releases the verifier share once per cycle, only after a Pass.
    pub fn bootstrap_key(&mut self, uuid: &str) -> Result<[u8; 32], AttestationError> {
        let refused = || AttestationError::KeyRefused(uuid.to_string());
        let record = self.records.get_mut(uuid).ok_or_else(refused)?;
        let passed = record.passed_this_cycle && record.last_result == Some(AttestationResult::Pass);
        if !passed || record.share_released || record.revoked {
            return Err(refused());
        }
        record.share_released = true;
        Ok(record.verifier_share)
    }

    /// Marks the node's enclave key invalid; no share is released for it again.
    pub fn revoke(&mut self, uuid: &str) {
        if let Some(r) = self.records.get_mut(uuid) {
            r.revoked = true;
            r.passed_this_cycle = false;
        }
    }

    pub fn is_revoked(&self, uuid: &str) -> bool {
        self.records.get(uuid).is_some_and(|r| r.revoked)
    }
}

fn evaluate(
    registrar: &Registrar,
    uuid: &str,
    quote: &Quote,
    issued: &[u8; NONCE_LEN],
    golden: &BTreeMap<PcrIndex, Digest>,
) -> AttestationResult {
    use AttestationResult::Fail;
    let aik = match registrar.state_of(uuid) {
        None => return Fail(FailReason::UnknownAik),
        Some(EnrollmentState::Pending) => return Fail(FailReason::NotEnrolled),
        Some(EnrollmentState::Enrolled) => registrar.enrolled_aik(uuid).expect("enrolled"),
    };
    if !verify_quote_signature(&aik, quote) {
        return Fail(FailReason::BadSignature);
    }
    if &quote.nonce != issued {
        return Fail(FailReason::NonceMismatch);
    }
    for (index, expected) in golden {
        if quote.value_of(*index) != Some(*expected) {
            return Fail(FailReason::MeasurementMismatch(*index));
        }
    }
    // Selected registers the policy never touches must still be in reset state.
    for (index, value) in quote.selection.iter().zip(&quote.values) {
        if !golden.contains_key(index) && *value != Digest::ZERO {
            return Fail(FailReason::MeasurementMismatch(*index));
        }
    }
    AttestationResult::Pass
}

/// Requests accepted by the attestation service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttestationRequest {
    Register {
        uuid: String,
        ek_pub: EkPublic,
        aik_pub: AikPublic,
    },
    Confirm {
        uuid: String,
        secret: Vec<u8>,
    },
    IssueNonce {
        uuid: String,
    },
    SubmitQuote {
        uuid: String,
        quote: Quote,
    },
    FetchShare {
        uuid: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttestationResponse {
    Challenge { ct: Vec<u8> },
    Ok,
    Err(AttestationError),
    Nonce { n: [u8; NONCE_LEN] },
    Result { verdict: Verdict, reason: Option<FailReason> },
    Share { v: [u8; 32] },
    Refused,
}

/// Registrar and verifier behind one serialized inbox.
#[derive(Debug)]
pub struct AttestationService<R> {
    pub registrar: Registrar,
    pub verifier: Verifier,
    rng: R,
}

impl<R: RngCore + CryptoRng> AttestationService<R> {
    pub fn new(whitelist: Whitelist, rng: R) -> Self {
        AttestationService {
            registrar: Registrar::new(),
            verifier: Verifier::new(whitelist),
            rng,
        }
    }

    pub fn handle(&mut self, request: AttestationRequest) -> AttestationResponse {
        use AttestationRequest as Rq;
        use AttestationResponse as Rs;
        match request {
            Rq::Register {
                uuid,
                ek_pub,
                aik_pub,
            } => match self
                .registrar
                .register_node(&uuid, ek_pub, aik_pub, &mut self.rng)
            {
                Ok(ct) => Rs::Challenge { ct },
                Err(e) => Rs::Err(e),
            },
            Rq::Confirm { uuid, secret } => match self.registrar.confirm_enrollment(&uuid, &secret) {
                Ok(()) => Rs::Ok,
                Err(e) => Rs::Err(e),
            },
            Rq::IssueNonce { uuid } => match self.verifier.issue_nonce(&uuid, &mut self.rng) {
                Ok(n) => Rs::Nonce { n },
                Err(e) => Rs::Err(e),
            },
            Rq::SubmitQuote { uuid, quote } => {
                match self.verifier.attest_once(&self.registrar, &uuid, &quote) {
                    Ok(r) => Rs::Result {
                        verdict: r.verdict(),
                        reason: r.reason(),
                    },
                    Err(e) => Rs::Err(e),
                }
            }
            Rq::FetchShare { uuid } => match self.verifier.bootstrap_key(&uuid) {
                Ok(v) => Rs::Share { v },
                Err(_) => Rs::Refused,
            },
        }
    }

    /// One continuous-attestation round: a fresh nonce per node, a quote
    /// from `fetch_quote` (None when the node does not answer), then
    /// `attest_once`. Nodes unknown to the verifier are skipped.
    pub fn poll_tick<F>(&mut self, nodes: &[String], mut fetch_quote: F) -> Vec<(String, AttestationResult)>
    where
        F: FnMut(&str, [u8; NONCE_LEN]) -> Option<Quote>,
    {
        let mut results = Vec::with_capacity(nodes.len());
        for uuid in nodes {
            let Ok(nonce) = self.verifier.issue_nonce(uuid, &mut self.rng) else {
                continue;
            };
            let result = match fetch_quote(uuid, nonce) {
                Some(q) => self.verifier.attest_once(&self.registrar, uuid, &q),
                None => self.verifier.record_no_quote(uuid),
            };
            if let Ok(r) = result {
                results.push((uuid.clone(), r));
            }
        }
        results
    }

    pub fn rng(&mut self) -> &mut R {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::{FirmwareKind, NodeSim};
    use crate::tpm::{PCR_BOOTLOADER, PCR_FIRMWARE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn heads_whitelist() -> Whitelist {
        let mut wl = Whitelist::new();
        wl.insert_stages("heads-default", &FirmwareKind::HeadsFlashed.pristine_stages());
        wl
    }

    fn enrolled(svc: &mut AttestationService<ChaCha20Rng>, node: &NodeSim) {
        let id = &node.tpm().identity;
        let ct = svc
            .registrar
            .register_node(node.uuid(), id.ek_public(), id.aik_public(), &mut ChaCha20Rng::seed_from_u64(99))
            .unwrap();
        let secret = node.activate_credential(&ct).unwrap();
        svc.registrar.confirm_enrollment(node.uuid(), &secret).unwrap();
    }

    fn setup() -> (AttestationService<ChaCha20Rng>, NodeSim) {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let node = NodeSim::pristine("node-00", FirmwareKind::HeadsFlashed, &mut rng);
        let mut svc = AttestationService::new(heads_whitelist(), rng);
        enrolled(&mut svc, &node);
        svc.verifier.add_node("node-00", "heads-default", [7; 32]).unwrap();
        (svc, node)
    }

    #[test]
    fn registration_lifecycle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let node = NodeSim::pristine("n", FirmwareKind::HeadsFlashed, &mut rng);
        let other = NodeSim::pristine("m", FirmwareKind::HeadsFlashed, &mut rng);
        let id = &node.tpm().identity;
        let mut reg = Registrar::new();

        let ct1 = reg.register_node("n", id.ek_public(), id.aik_public(), &mut rng).unwrap();
        assert_eq!(reg.state_of("n"), Some(EnrollmentState::Pending));
        assert_eq!(reg.enrolled_aik("n"), None);
        assert!(other.activate_credential(&ct1).is_err());

        // Re-registering a pending node replaces the challenge.
        let ct2 = reg.register_node("n", id.ek_public(), id.aik_public(), &mut rng).unwrap();
        let stale = node.activate_credential(&ct1).unwrap();
        assert_eq!(
            reg.confirm_enrollment("n", &stale),
            Err(AttestationError::EnrollmentFailed("n".into()))
        );
        assert_eq!(
            reg.confirm_enrollment("n", &[0; 32]),
            Err(AttestationError::EnrollmentFailed("n".into()))
        );
        let fresh = node.activate_credential(&ct2).unwrap();
        reg.confirm_enrollment("n", &fresh).unwrap();
        assert_eq!(reg.enrolled_aik("n"), Some(id.aik_public()));

        assert_eq!(
            reg.register_node("n", id.ek_public(), id.aik_public(), &mut rng),
            Err(AttestationError::AlreadyEnrolled("n".into()))
        );
        assert_eq!(
            reg.confirm_enrollment("zz", &fresh),
            Err(AttestationError::NoSuchNode("zz".into()))
        );
    }

    #[test]
    fn replay_golden_cases() {
        let mut wl = Whitelist::new();
        wl.insert("empty", vec![]);
        wl.insert("one", vec![(PCR_FIRMWARE, Digest::of(b"acm"))]);
        assert!(wl.replay_golden("empty").unwrap().is_empty());
        let one = wl.replay_golden("one").unwrap();
        // Frozen with Python hashlib: sha256(zero32 || sha256("acm")).
        assert_eq!(
            one[&PCR_FIRMWARE].to_hex(),
            "74d8e2ffb758de3bcc55e7bf06cc98b62506d9fad1b812170f7c988da0ee8b08"
        );
        assert_eq!(wl.replay_golden("nope"), Err(AttestationError::NoSuchEntry("nope".into())));
        assert_eq!(wl.replay_golden("one"), wl.replay_golden("one"));
    }

    #[test]
    fn golden_matches_pristine_boot() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut node = NodeSim::pristine("n", FirmwareKind::HeadsFlashed, &mut rng);
        node.power_on().unwrap();
        let golden = heads_whitelist().replay_golden("heads-default").unwrap();
        assert_eq!(golden.len(), 3);
        for (i, d) in golden {
            assert_eq!(node.tpm().bank.read(i), d);
        }
    }

    #[test]
    fn whitelist_text_round_trip_and_errors() {
        let wl = heads_whitelist();
        let text = wl.to_string();
        assert!(text.starts_with("entry heads-default\n0 "));
        assert_eq!(Whitelist::parse(&text).unwrap(), wl);

        let bad = "entry a\n0 00\n";
        assert_eq!(Whitelist::parse(bad).unwrap_err().line, 2);
        let orphan = "# header\n\n4 ".to_string() + &"0".repeat(64);
        assert_eq!(Whitelist::parse(&orphan).unwrap_err().line, 3);
        let range = format!("entry a\n24 {}\n", "0".repeat(64));
        assert_eq!(Whitelist::parse(&range).unwrap_err().line, 2);
    }

    #[test]
    fn pristine_passes_and_key_released_once() {
        let (mut svc, mut node) = setup();
        node.power_on().unwrap();
        let n = svc.verifier.issue_nonce("node-00", &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        let q = node.send_attestation_quote(n).unwrap();
        let r = svc.verifier.attest_once(&svc.registrar, "node-00", &q).unwrap();
        assert_eq!(r, AttestationResult::Pass);
        assert_eq!(r.reason(), None);
        assert_eq!(svc.verifier.bootstrap_key("node-00"), Ok([7; 32]));
        assert_eq!(
            svc.verifier.bootstrap_key("node-00"),
            Err(AttestationError::KeyRefused("node-00".into()))
        );
    }

    #[test]
    fn tampered_boot_block_fails_on_pcr0() {
        let (mut svc, mut node) = setup();
        node.tamper("boot-block", 0, 0xff).unwrap();
        node.power_on().unwrap();
        let n = svc.verifier.issue_nonce("node-00", &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let q = node.send_attestation_quote(n).unwrap();
        let r = svc.verifier.attest_once(&svc.registrar, "node-00", &q).unwrap();
        assert_eq!(r, AttestationResult::Fail(FailReason::MeasurementMismatch(PCR_FIRMWARE)));
        assert!(svc.verifier.bootstrap_key("node-00").is_err());
    }

    #[test]
    fn tampered_heads_fails_on_pcr4() {
        let (mut svc, mut node) = setup();
        node.tamper("heads-initramfs", 3, 0).unwrap();
        node.power_on().unwrap();
        let n = svc.verifier.issue_nonce("node-00", &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let q = node.send_attestation_quote(n).unwrap();
        let r = svc.verifier.attest_once(&svc.registrar, "node-00", &q).unwrap();
        assert_eq!(r, AttestationResult::Fail(FailReason::MeasurementMismatch(PCR_BOOTLOADER)));
    }

    #[test]
    fn unknown_and_foreign_aik() {
        let (mut svc, _) = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut imposter = NodeSim::pristine("node-00", FirmwareKind::HeadsFlashed, &mut rng);
        imposter.power_on().unwrap();

        // Registered uuid, quote signed by a different TPM.
        let n = svc.verifier.issue_nonce("node-00", &mut rng).unwrap();
        let q = imposter.send_attestation_quote(n).unwrap();
        assert_eq!(
            svc.verifier.attest_once(&svc.registrar, "node-00", &q).unwrap(),
            AttestationResult::Fail(FailReason::BadSignature)
        );

        // A node the registrar has never seen.
        svc.verifier.add_node("ghost", "heads-default", [0; 32]).unwrap();
        let n = svc.verifier.issue_nonce("ghost", &mut rng).unwrap();
        let q = imposter.send_attestation_quote(n).unwrap();
        assert_eq!(
            svc.verifier.attest_once(&svc.registrar, "ghost", &q).unwrap(),
            AttestationResult::Fail(FailReason::UnknownAik)
        );
    }

    #[test]
    fn pending_node_is_not_enrolled() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut node = NodeSim::pristine("p", FirmwareKind::HeadsFlashed, &mut rng);
        let mut svc = AttestationService::new(heads_whitelist(), rng.clone());
        let id = &node.tpm().identity;
        svc.registrar.register_node("p", id.ek_public(), id.aik_public(), &mut rng).unwrap();
        svc.verifier.add_node("p", "heads-default", [0; 32]).unwrap();
        node.power_on().unwrap();
        let n = svc.verifier.issue_nonce("p", &mut rng).unwrap();
        let q = node.send_attestation_quote(n).unwrap();
        assert_eq!(
            svc.verifier.attest_once(&svc.registrar, "p", &q).unwrap(),
            AttestationResult::Fail(FailReason::NotEnrolled)
        );
    }

    #[test]
    fn stale_quote_replay_is_rejected() {
        let (mut svc, mut node) = setup();
        node.power_on().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let n = svc.verifier.issue_nonce("node-00", &mut rng).unwrap();
        let q = node.send_attestation_quote(n).unwrap();
        assert!(svc.verifier.attest_once(&svc.registrar, "node-00", &q).unwrap().is_pass());
        // Round closed: the same quote without a new nonce is not accepted.
        assert_eq!(
            svc.verifier.attest_once(&svc.registrar, "node-00", &q),
            Err(AttestationError::NoPendingRound("node-00".into()))
        );
        svc.verifier.issue_nonce("node-00", &mut rng).unwrap();
        assert_eq!(
            svc.verifier.attest_once(&svc.registrar, "node-00", &q).unwrap(),
            AttestationResult::Fail(FailReason::NonceMismatch)
        );
    }

    #[test]
    fn no_pending_round_without_nonce() {
        let (mut svc, mut node) = setup();
        node.power_on().unwrap();
        let q = node.send_attestation_quote([0; 16]).unwrap();
        assert_eq!(
            svc.verifier.attest_once(&svc.registrar, "node-00", &q),
            Err(AttestationError::NoPendingRound("node-00".into()))
        );
    }

    #[test]
    fn nonces_are_unique_even_with_a_repeating_rng() {
        let (mut svc, _) = setup();
        let a = svc.verifier.issue_nonce("node-00", &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = svc.verifier.issue_nonce("node-00", &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn share_refused_after_fail_and_after_revoke() {
        let (mut svc, _) = setup();
        assert!(svc.verifier.bootstrap_key("node-00").is_err());
        svc.verifier.issue_nonce("node-00", &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        svc.verifier.record_no_quote("node-00").unwrap();
        assert!(svc.verifier.bootstrap_key("node-00").is_err());
        svc.verifier.revoke("node-00");
        assert!(svc.verifier.is_revoked("node-00"));
        assert!(svc.verifier.bootstrap_key("nobody").is_err());
    }

    #[test]
    fn service_messages() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut node = NodeSim::pristine("node-00", FirmwareKind::HeadsFlashed, &mut rng);
        let mut svc = AttestationService::new(heads_whitelist(), rng);
        let id = &node.tpm().identity;
        let ct = match svc.handle(AttestationRequest::Register {
            uuid: "node-00".into(),
            ek_pub: id.ek_public(),
            aik_pub: id.aik_public(),
        }) {
            AttestationResponse::Challenge { ct } => ct,
            other => panic!("{other:?}"),
        };
        let secret = node.activate_credential(&ct).unwrap();
        assert_eq!(
            svc.handle(AttestationRequest::Confirm { uuid: "node-00".into(), secret }),
            AttestationResponse::Ok
        );
        svc.verifier.add_node("node-00", "heads-default", [9; 32]).unwrap();
        assert_eq!(
            svc.handle(AttestationRequest::FetchShare { uuid: "node-00".into() }),
            AttestationResponse::Refused
        );
        node.power_on().unwrap();
        let n = match svc.handle(AttestationRequest::IssueNonce { uuid: "node-00".into() }) {
            AttestationResponse::Nonce { n } => n,
            other => panic!("{other:?}"),
        };
        let quote = node.send_attestation_quote(n).unwrap();
        assert_eq!(
            svc.handle(AttestationRequest::SubmitQuote { uuid: "node-00".into(), quote }),
            AttestationResponse::Result { verdict: Verdict::Pass, reason: None }
        );
        assert_eq!(
            svc.handle(AttestationRequest::FetchShare { uuid: "node-00".into() }),
            AttestationResponse::Share { v: [9; 32] }
        );
        assert_eq!(
            svc.handle(AttestationRequest::IssueNonce { uuid: "x".into() }),
            AttestationResponse::Err(AttestationError::NoSuchNode("x".into()))
        );
    }

    #[test]
    fn poll_tick_detects_runtime_tamper() {
        let (mut svc, mut node) = setup();
        node.power_on().unwrap();
        let nodes = vec!["node-00".to_string()];
        let results = svc.poll_tick(&nodes, |_, n| node.send_attestation_quote(n).ok());
        assert_eq!(results, vec![("node-00".to_string(), AttestationResult::Pass)]);

        node.tamper("attestation-client", 0, 0).unwrap();
        let results = svc.poll_tick(&nodes, |_, n| node.send_attestation_quote(n).ok());
        assert!(!results[0].1.is_pass());

        let results = svc.poll_tick(&nodes, |_, _| None);
        assert_eq!(results[0].1, AttestationResult::Fail(FailReason::NoQuote));
        assert!(svc.poll_tick(&[], |_, _| None).is_empty());
    }

    #[test]
    fn fail_reason_text_round_trip() {
        for r in [
            FailReason::BadSignature,
            FailReason::UnknownAik,
            FailReason::NonceMismatch,
            FailReason::MeasurementMismatch(PCR_BOOTLOADER),
            FailReason::NotEnrolled,
            FailReason::NoQuote,
        ] {
            assert_eq!(r.to_string().parse::<FailReason>(), Ok(r));
        }
    }
}
