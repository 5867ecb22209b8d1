//! Emulated Trusted Platform Module.
//!
//! Each simulated node owns one [`Tpm`]: a bank of 24 SHA-256 platform
//! configuration registers, an endorsement key (EK, X25519, used only to
//! decrypt enrollment challenges) and an attestation identity key (AIK,
//! Ed25519, used only to sign quotes). Private key halves stay inside
//! [`TpmIdentity`]; callers only ever see [`EkPublic`] and [`AikPublic`].
//!
//! PCR allocation:
//!
//! | PCR | Contents                                               |
//! |-----|--------------------------------------------------------|
//! | 0   | platform firmware stages (UEFI, ACM, coreboot/NERF)    |
//! | 4   | bootloader / Heads stages                              |
//! | 7   | downloaded payloads (attestation client, tenant kernel) |

use std::collections::BTreeSet;
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier as _, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};

pub const PCR_COUNT: usize = 24;
pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;

pub const PCR_FIRMWARE: PcrIndex = PcrIndex(0);
pub const PCR_BOOTLOADER: PcrIndex = PcrIndex(4);
pub const PCR_PAYLOADS: PcrIndex = PcrIndex(7);

/// The registers every attestation quote covers.
pub const ATTESTED_PCRS: [PcrIndex; 3] = [PCR_FIRMWARE, PCR_BOOTLOADER, PCR_PAYLOADS];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TpmError {
    #[error("PCR index {0} out of range 0..=23")]
    PcrIndexOutOfRange(u32),
    #[error("quote selection is empty")]
    EmptySelection,
    #[error("credential activation failed")]
    ActivationFailed,
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
}

/// A 32-byte SHA-256 measurement value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    /// Measures a byte string.
    pub fn of(data: &[u8]) -> Self {
        Digest(Sha256::digest(data).into())
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, TpmError> {
        let raw = hex::decode(s).map_err(|e| TpmError::Malformed {
            what: "digest",
            detail: e.to_string(),
        })?;
        Self::try_from(raw.as_slice())
    }
}

impl TryFrom<&[u8]> for Digest {
    type Error = TpmError;

    fn try_from(value: &[u8]) -> Result<Self, Self::Error> {
        let bytes: [u8; DIGEST_LEN] = value.try_into().map_err(|_| TpmError::Malformed {
            what: "digest",
            detail: format!("expected {DIGEST_LEN} bytes, got {}", value.len()),
        })?;
        Ok(Digest(bytes))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Index of a PCR, guaranteed to be in `0..24`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PcrIndex(u8);

impl PcrIndex {
    pub fn new(index: u32) -> Result<Self, TpmError> {
        if (index as usize) < PCR_COUNT {
            Ok(PcrIndex(index as u8))
        } else {
            Err(TpmError::PcrIndexOutOfRange(index))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for PcrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `H(old || measurement)`, the single PCR update rule.
pub fn extend_digest(old: &Digest, measurement: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update(old.0);
    h.update(measurement.0);
    Digest(h.finalize().into())
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PcrBank {
    registers: [Digest; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        PcrBank {
            registers: [Digest::ZERO; PCR_COUNT],
        }
    }
}

impl PcrBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.registers = [Digest::ZERO; PCR_COUNT];
    }

    pub fn extend(&mut self, index: PcrIndex, measurement: &Digest) {
        let slot = &mut self.registers[index.0 as usize];
        *slot = extend_digest(slot, measurement);
    }

    pub fn read(&self, index: PcrIndex) -> Digest {
        self.registers[index.0 as usize]
    }

    pub fn registers(&self) -> &[Digest; PCR_COUNT] {
        &self.registers
    }

    /// Rebuilds a bank from a reset state by replaying an extend log.
    pub fn replay<'a, I>(events: I) -> Self
    where
        I: IntoIterator<Item = &'a (PcrIndex, Digest)>,
    {
        let mut bank = PcrBank::new();
        for (index, digest) in events {
            bank.extend(*index, digest);
        }
        bank
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AikPublic(pub [u8; 32]);

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EkPublic(pub [u8; 32]);

impl AikPublic {
    /// The name bound into enrollment challenges.
    pub fn digest(&self) -> Digest {
        Digest::of(&self.0)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl EkPublic {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for AikPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AikPublic({})", self.to_hex())
    }
}

impl fmt::Debug for EkPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EkPublic({})", self.to_hex())
    }
}

fn parse_key32(s: &str, what: &'static str) -> Result<[u8; 32], TpmError> {
    let raw = hex::decode(s).map_err(|e| TpmError::Malformed {
        what,
        detail: e.to_string(),
    })?;
    raw.as_slice().try_into().map_err(|_| TpmError::Malformed {
        what,
        detail: format!("expected 32 bytes, got {}", raw.len()),
    })
}

impl std::str::FromStr for AikPublic {
    type Err = TpmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_key32(s, "aik public key").map(AikPublic)
    }
}

impl std::str::FromStr for EkPublic {
    type Err = TpmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_key32(s, "ek public key").map(EkPublic)
    }
}

/// Endorsement and attestation keys of one TPM.
pub struct TpmIdentity {
    uuid: String,
    seed: [u8; 32],
    ek: StaticSecret,
    aik: SigningKey,
}

impl fmt::Debug for TpmIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TpmIdentity")
            .field("uuid", &self.uuid)
            .field("ek_pub", &self.ek_public())
            .field("aik_pub", &self.aik_public())
            .finish_non_exhaustive()
    }
}

impl TpmIdentity {
    /// Manufactures a TPM with a fresh primary seed.
    pub fn generate<R: RngCore + CryptoRng>(uuid: impl Into<String>, rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_primary_seed(uuid, seed)
    }

    /// Re-creates the chip from its primary seed. Both keys are derived from
    /// the seed under distinct labels, so EK and AIK never coincide.
    pub fn from_primary_seed(uuid: impl Into<String>, seed: [u8; 32]) -> Self {
        let derive = |label: &[u8]| -> [u8; 32] {
            let mut h = Sha256::new();
            h.update(label);
            h.update(seed);
            h.finalize().into()
        };
        TpmIdentity {
            uuid: uuid.into(),
            seed,
            ek: StaticSecret::from(derive(b"bolted/ek")),
            aik: SigningKey::from_bytes(&derive(b"bolted/aik")),
        }
    }

    pub fn uuid(&self) -> &str {
        &self.uuid
    }

    /// The manufacturing seed of the simulated chip. Only the persistence layer
    /// uses this, to re-instantiate the same hardware on load.
    pub fn primary_seed(&self) -> [u8; 32] {
        self.seed
    }

    pub fn ek_public(&self) -> EkPublic {
        EkPublic(XPublicKey::from(&self.ek).to_bytes())
    }

    pub fn aik_public(&self) -> AikPublic {
        AikPublic(self.aik.verifying_key().to_bytes())
    }

    pub fn quote(
        &self,
        bank: &PcrBank,
        nonce: [u8; NONCE_LEN],
        selection: &BTreeSet<PcrIndex>,
    ) -> Result<Quote, TpmError> {
        if selection.is_empty() {
            return Err(TpmError::EmptySelection);
        }
        let selection: Vec<PcrIndex> = selection.iter().copied().collect();
        let values = selection.iter().map(|i| bank.read(*i)).collect();
        let mut quote = Quote {
            nonce,
            selection,
            values,
            signature: [0u8; 64],
        };
        quote.signature = self.aik.sign(&quote.canonical_bytes()).to_bytes();
        Ok(quote)
    }

    /// Decrypts an enrollment challenge and returns its secret iff the AIK
    /// name bound inside it is this TPM's AIK.
    pub fn activate_credential(&self, challenge: &[u8]) -> Result<Vec<u8>, TpmError> {
        if challenge.len() < 32 + 12 {
            return Err(TpmError::ActivationFailed);
        }
        let (eph, rest) = challenge.split_at(32);
        let (nonce, ct) = rest.split_at(12);
        let eph: [u8; 32] = eph.try_into().expect("split at 32");
        let shared = self.ek.diffie_hellman(&XPublicKey::from(eph));
        let key = credential_key(shared.as_bytes(), &eph);
        let plain = ChaCha20Poly1305::new(&key)
            .decrypt(AeadNonce::from_slice(nonce), ct)
            .map_err(|_| TpmError::ActivationFailed)?;
        if plain.len() < DIGEST_LEN {
            return Err(TpmError::ActivationFailed);
        }
        let (bound_name, secret) = plain.split_at(DIGEST_LEN);
        if bound_name != self.aik_public().digest().as_bytes() {
            return Err(TpmError::ActivationFailed);
        }
        Ok(secret.to_vec())
    }
}

fn credential_key(shared: &[u8; 32], eph: &[u8; 32]) -> Key {
    let mut h = Sha256::new();
    h.update(b"bolted/credential");
    h.update(shared);
    h.update(eph);
    let k: [u8; 32] = h.finalize().into();
    Key::from(k)
}

/// Encrypts `secret` to `ek` and binds the name of `aik` into the
/// ciphertext. Layout: ephemeral X25519 public (32) || AEAD nonce (12) ||
/// ChaCha20-Poly1305(aik digest || secret).
pub fn make_credential<R: RngCore + CryptoRng>(
    ek: &EkPublic,
    aik: &AikPublic,
    secret: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let eph_secret = StaticSecret::random_from_rng(&mut *rng);
    let eph_pub = XPublicKey::from(&eph_secret).to_bytes();
    let shared = eph_secret.diffie_hellman(&XPublicKey::from(ek.0));
    let key = credential_key(shared.as_bytes(), &eph_pub);
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let mut plain = aik.digest().as_bytes().to_vec();
    plain.extend_from_slice(secret);
    let ct = ChaCha20Poly1305::new(&key)
        .encrypt(AeadNonce::from_slice(&nonce), plain.as_slice())
        .expect("chacha20poly1305 encryption of in-memory buffer");
    let mut out = Vec::with_capacity(32 + 12 + ct.len());
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

/// Signed statement of selected PCR values bound to a verifier nonce.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Quote {
    pub nonce: [u8; NONCE_LEN],
    pub selection: Vec<PcrIndex>,
    pub values: Vec<Digest>,
    pub signature: [u8; 64],
}

impl Quote {
    /// `nonce (16) || count (1) || ascending indices (1 each) || digests (32 each)`.
    ///
    /// This is exactly the byte string the AIK signs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(NONCE_LEN + 1 + self.selection.len() * (1 + DIGEST_LEN));
        out.extend_from_slice(&self.nonce);
        out.push(self.selection.len() as u8);
        out.extend(self.selection.iter().map(|i| i.0));
        for v in &self.values {
            out.extend_from_slice(&v.0);
        }
        out
    }

    pub fn value_of(&self, index: PcrIndex) -> Option<Digest> {
        self.selection
            .iter()
            .position(|i| *i == index)
            .and_then(|pos| self.values.get(pos).copied())
    }

    fn well_formed(&self) -> bool {
        !self.selection.is_empty()
            && self.selection.len() == self.values.len()
            && self.selection.len() <= PCR_COUNT
            && self.selection.windows(2).all(|w| w[0] < w[1])
    }
}

pub fn verify_quote_signature(aik: &AikPublic, quote: &Quote) -> bool {
    if !quote.well_formed() {
        return false;
    }
    let Ok(key) = VerifyingKey::from_bytes(&aik.0) else {
        return false;
    };
    key.verify(&quote.canonical_bytes(), &Signature::from_bytes(&quote.signature))
        .is_ok()
}

/// A TPM as installed in a node: identity plus its volatile register bank.
#[derive(Debug)]
pub struct Tpm {
    pub identity: TpmIdentity,
    pub bank: PcrBank,
}

impl Tpm {
    pub fn new(identity: TpmIdentity) -> Self {
        Tpm {
            identity,
            bank: PcrBank::new(),
        }
    }

    pub fn quote(
        &self,
        nonce: [u8; NONCE_LEN],
        selection: &BTreeSet<PcrIndex>,
    ) -> Result<Quote, TpmError> {
        self.identity.quote(&self.bank, nonce, selection)
    }
}

pub fn attested_selection() -> BTreeSet<PcrIndex> {
    ATTESTED_PCRS.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    fn d(hex: &str) -> Digest {
        Digest::from_hex(hex).unwrap()
    }

    // Frozen with Python hashlib.sha256.
    const H_ACM: &str = "62380b77e7bbd9ac3cef5b652d9ded048f2cc860fa9ebdf52b0d9bb375c9ce8f";
    const EXT_ZERO_ACM: &str = "74d8e2ffb758de3bcc55e7bf06cc98b62506d9fad1b812170f7c988da0ee8b08";
    const EXT_D1_D2: &str = "8efcc423857a978bfd936b16d8ea0e27c90392edc774db227d8e30ff47b260d7";
    const EXT_D2_D1: &str = "47fab443bca5381a3fa596d301371560c44af5d3b69e741428f7e96a7fc1f942";

    #[test]
    fn reset_zeroes_every_register() {
        let mut bank = PcrBank::new();
        bank.extend(PcrIndex::new(3).unwrap(), &Digest::of(b"x"));
        bank.reset();
        assert!(bank.registers().iter().all(|r| *r == Digest::ZERO));
        let once = bank.clone();
        bank.reset();
        assert_eq!(bank, once);
    }

    #[test]
    fn extend_matches_reference_values() {
        assert_eq!(Digest::of(b"acm"), d(H_ACM));
        let mut bank = PcrBank::new();
        bank.extend(PCR_FIRMWARE, &Digest::of(b"acm"));
        assert_eq!(bank.read(PCR_FIRMWARE), d(EXT_ZERO_ACM));

        let (d1, d2) = (Digest::of(b"d1"), Digest::of(b"d2"));
        let mut a = PcrBank::new();
        a.extend(PCR_FIRMWARE, &d1);
        a.extend(PCR_FIRMWARE, &d2);
        let mut b = PcrBank::new();
        b.extend(PCR_FIRMWARE, &d2);
        b.extend(PCR_FIRMWARE, &d1);
        assert_eq!(a.read(PCR_FIRMWARE), d(EXT_D1_D2));
        assert_eq!(b.read(PCR_FIRMWARE), d(EXT_D2_D1));
    }

    #[test]
    fn extend_is_local() {
        let mut bank = PcrBank::new();
        let five = PcrIndex::new(5).unwrap();
        bank.extend(five, &Digest::of(b"x"));
        for i in 0..PCR_COUNT as u32 {
            let idx = PcrIndex::new(i).unwrap();
            if idx != five {
                assert_eq!(bank.read(idx), Digest::ZERO);
            }
        }
    }

    #[test]
    fn index_out_of_range_is_rejected() {
        assert_eq!(PcrIndex::new(24), Err(TpmError::PcrIndexOutOfRange(24)));
        assert!(PcrIndex::new(23).is_ok());
    }

    #[test]
    fn reset_state_quote_verifies() {
        let tpm = TpmIdentity::generate("n0", &mut rng());
        let bank = PcrBank::new();
        let sel: BTreeSet<_> = [PCR_FIRMWARE].into_iter().collect();
        let q = tpm.quote(&bank, [1; 16], &sel).unwrap();
        assert_eq!(q.values, vec![Digest::ZERO]);
        assert!(verify_quote_signature(&tpm.aik_public(), &q));
        let q2 = tpm.quote(&bank, [2; 16], &sel).unwrap();
        assert_ne!(q.signature, q2.signature);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let tpm = TpmIdentity::generate("n0", &mut rng());
        let err = tpm.quote(&PcrBank::new(), [0; 16], &BTreeSet::new());
        assert_eq!(err, Err(TpmError::EmptySelection));
    }

    #[test]
    fn tampered_quote_or_foreign_aik_fails() {
        let mut r = rng();
        let tpm = TpmIdentity::generate("n0", &mut r);
        let other = TpmIdentity::generate("n1", &mut r);
        let mut bank = PcrBank::new();
        bank.extend(PCR_BOOTLOADER, &Digest::of(b"heads"));
        let q = tpm.quote(&bank, [9; 16], &attested_selection()).unwrap();
        assert!(verify_quote_signature(&tpm.aik_public(), &q));
        assert!(!verify_quote_signature(&other.aik_public(), &q));

        let mut flipped = q.clone();
        flipped.values[1].0[0] ^= 1;
        assert!(!verify_quote_signature(&tpm.aik_public(), &flipped));

        let mut short = q.clone();
        short.values.pop();
        assert!(!verify_quote_signature(&tpm.aik_public(), &short));
    }

    #[test]
    fn canonical_layout() {
        let q = Quote {
            nonce: [0xaa; 16],
            selection: vec![PCR_FIRMWARE, PCR_PAYLOADS],
            values: vec![Digest::from_bytes([1; 32]), Digest::from_bytes([2; 32])],
            signature: [0; 64],
        };
        let bytes = q.canonical_bytes();
        assert_eq!(bytes.len(), 16 + 1 + 2 + 64);
        assert_eq!(&bytes[..16], &[0xaa; 16]);
        assert_eq!(bytes[16], 2);
        assert_eq!(&bytes[17..19], &[0, 7]);
        assert_eq!(&bytes[19..51], &[1; 32]);
        assert_eq!(&bytes[51..], &[2; 32]);
    }

    #[test]
    fn credential_activation() {
        let mut r = rng();
        let tpm = TpmIdentity::generate("n0", &mut r);
        let other = TpmIdentity::generate("n1", &mut r);
        let secret = b"enrollment secret";

        let ct = make_credential(&tpm.ek_public(), &tpm.aik_public(), secret, &mut r);
        assert_eq!(tpm.activate_credential(&ct).unwrap(), secret);

        let wrong_ek = make_credential(&other.ek_public(), &tpm.aik_public(), secret, &mut r);
        assert_eq!(tpm.activate_credential(&wrong_ek), Err(TpmError::ActivationFailed));

        let wrong_aik = make_credential(&tpm.ek_public(), &other.aik_public(), secret, &mut r);
        assert_eq!(tpm.activate_credential(&wrong_aik), Err(TpmError::ActivationFailed));

        assert_eq!(tpm.activate_credential(&[0; 10]), Err(TpmError::ActivationFailed));
    }

    #[test]
    fn ek_and_aik_are_distinct() {
        let tpm = TpmIdentity::from_primary_seed("n0", [3; 32]);
        assert_ne!(tpm.ek_public().0, tpm.aik_public().0);
        let again = TpmIdentity::from_primary_seed("n0", [3; 32]);
        assert_eq!(tpm.aik_public(), again.aik_public());
    }
}
