//! Image repository with copy-on-write linked clones.
//!
//! A clone is pure metadata: it starts with an empty block map and resolves
//! every unwritten block through its parent chain. A clone freezes the view
//! of its parent at clone time: before a layer overwrites a block, the old
//! contents are pushed down into each direct child that does not own that
//! block yet.
//!
//! Encrypted images carry a content key wrapped (ChaCha20-Poly1305) under
//! the tenant's enclave key. Block payloads are stored as-is; reads are
//! refused until the image has been unlocked by the attached session.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::node::EnclaveKey;

pub const DEFAULT_BLOCK_SIZE: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProvisioningError {
    #[error("no such image {0}")]
    NoSuchImage(ImageId),
    #[error("image {0} has live clones")]
    HasClones(ImageId),
    #[error("image {0} is attached to a node")]
    InUse(ImageId),
    #[error("node {0} already has a boot target")]
    AlreadyAttached(String),
    #[error("node {0} has no boot target")]
    NotAttached(String),
    #[error("block {index} out of range ({blocks} blocks)")]
    OutOfRange { index: u64, blocks: u64 },
    #[error("block write of {got} bytes, block size is {expected}")]
    BadBlockLength { got: usize, expected: usize },
    #[error("image {0} is a frozen snapshot")]
    Frozen(ImageId),
    #[error("image {0} is encrypted and locked")]
    Locked(ImageId),
    #[error("image {0} is not encrypted")]
    NotEncrypted(ImageId),
    #[error("image {0} is already encrypted")]
    AlreadyEncrypted(ImageId),
    #[error("unlock of image {0} failed")]
    UnlockFailed(ImageId),
    #[error("invalid block size {0}")]
    InvalidBlockSize(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "img-{:04}", self.0)
    }
}

impl std::str::FromStr for ImageId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("img-")
            .and_then(|n| n.parse().ok())
            .map(ImageId)
            .ok_or_else(|| format!("bad image id {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Encryption {
    None,
    /// `nonce (12) || AEAD(content key)` under the enclave key.
    Wrapped { wrapped_content_key: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub id: ImageId,
    pub parent: Option<ImageId>,
    pub block_size: usize,
    pub length: u64,
    /// Blocks owned by this layer.
    pub blocks: BTreeMap<u64, Vec<u8>>,
    pub encryption: Encryption,
    pub unlocked: bool,
    pub frozen: bool,
    pub children: BTreeSet<ImageId>,
}

impl Image {
    pub fn block_count(&self) -> u64 {
        self.length.div_ceil(self.block_size as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootTarget {
    pub node: String,
    pub image: ImageId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvisioningSnapshot {
    pub next_id: u64,
    pub images: Vec<Image>,
    pub targets: Vec<BootTarget>,
}

#[derive(Debug, Clone)]
pub struct ProvisioningService {
    images: BTreeMap<ImageId, Image>,
    targets: BTreeMap<String, ImageId>,
    next_id: u64,
}

impl Default for ProvisioningService {
    fn default() -> Self {
        Self::new()
    }
}

impl ProvisioningService {
    pub fn new() -> Self {
        ProvisioningService {
            images: BTreeMap::new(),
            targets: BTreeMap::new(),
            next_id: 1,
        }
    }

    fn fresh_id(&mut self) -> ImageId {
        let id = ImageId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn create_image(&mut self, bytes: &[u8]) -> ImageId {
        self.create_image_with_block_size(bytes, DEFAULT_BLOCK_SIZE)
            .expect("default block size is valid")
    }

    pub fn create_image_with_block_size(
        &mut self,
        bytes: &[u8],
        block_size: usize,
    ) -> Result<ImageId, ProvisioningError> {
        if block_size == 0 {
            return Err(ProvisioningError::InvalidBlockSize(block_size));
        }
        let id = self.fresh_id();
        let blocks = bytes
            .chunks(block_size)
            .enumerate()
            .map(|(i, chunk)| {
                let mut b = chunk.to_vec();
                b.resize(block_size, 0);
                (i as u64, b)
            })
            .collect();
        self.images.insert(
            id,
            Image {
                id,
                parent: None,
                block_size,
                length: bytes.len() as u64,
                blocks,
                encryption: Encryption::None,
                unlocked: false,
                frozen: false,
                children: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn image(&self, id: ImageId) -> Result<&Image, ProvisioningError> {
        self.images.get(&id).ok_or(ProvisioningError::NoSuchImage(id))
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.images.values()
    }

    pub fn delete_image(&mut self, id: ImageId) -> Result<(), ProvisioningError> {
        let image = self.image(id)?;
        if !image.children.is_empty() {
            return Err(ProvisioningError::HasClones(id));
        }
        if self.targets.values().any(|i| *i == id) {
            return Err(ProvisioningError::InUse(id));
        }
        let parent = image.parent;
        self.images.remove(&id);
        if let Some(p) = parent.and_then(|p| self.images.get_mut(&p)) {
            p.children.remove(&id);
        }
        Ok(())
    }

    /// Linked clone: copies no blocks. Encryption metadata is inherited;
    /// the clone starts locked.
    pub fn clone_image(&mut self, id: ImageId) -> Result<ImageId, ProvisioningError> {
        self.clone_inner(id, false)
    }

    /// Clone-and-freeze: a read-only point-in-time copy.
    pub fn snapshot_image(&mut self, id: ImageId) -> Result<ImageId, ProvisioningError> {
        self.clone_inner(id, true)
    }

    fn clone_inner(&mut self, id: ImageId, frozen: bool) -> Result<ImageId, ProvisioningError> {
        let parent = self.image(id)?;
        let (block_size, length, encryption) =
            (parent.block_size, parent.length, parent.encryption.clone());
        let clone = self.fresh_id();
        self.images.insert(
            clone,
            Image {
                id: clone,
                parent: Some(id),
                block_size,
                length,
                blocks: BTreeMap::new(),
                encryption,
                unlocked: false,
                frozen,
                children: BTreeSet::new(),
            },
        );
        self.images.get_mut(&id).expect("exists").children.insert(clone);
        Ok(clone)
    }

    /// Nearest layer owning the block, else zero fill.
    fn resolve(&self, id: ImageId, index: u64) -> Vec<u8> {
        let mut cursor = Some(id);
        let block_size = self.images[&id].block_size;
        while let Some(cur) = cursor {
            let layer = &self.images[&cur];
            if let Some(b) = layer.blocks.get(&index) {
                return b.clone();
            }
            cursor = layer.parent;
        }
        vec![0; block_size]
    }

    fn check_index(image: &Image, index: u64) -> Result<(), ProvisioningError> {
        let blocks = image.block_count();
        if index < blocks {
            Ok(())
        } else {
            Err(ProvisioningError::OutOfRange { index, blocks })
        }
    }

    fn check_unlocked(image: &Image) -> Result<(), ProvisioningError> {
        match image.encryption {
            Encryption::Wrapped { .. } if !image.unlocked => Err(ProvisioningError::Locked(image.id)),
            _ => Ok(()),
        }
    }

    pub fn read_image_block(&self, id: ImageId, index: u64) -> Result<Vec<u8>, ProvisioningError> {
        let image = self.image(id)?;
        Self::check_index(image, index)?;
        Self::check_unlocked(image)?;
        Ok(self.resolve(id, index))
    }

    pub fn write_image_block(
        &mut self,
        id: ImageId,
        index: u64,
        bytes: &[u8],
    ) -> Result<(), ProvisioningError> {
        let image = self.image(id)?;
        Self::check_index(image, index)?;
        Self::check_unlocked(image)?;
        if image.frozen {
            return Err(ProvisioningError::Frozen(id));
        }
        if bytes.len() != image.block_size {
            return Err(ProvisioningError::BadBlockLength {
                got: bytes.len(),
                expected: image.block_size,
            });
        }
        let children: Vec<ImageId> = image.children.iter().copied().collect();
        if !children.is_empty() {
            let old = self.resolve(id, index);
            for c in children {
                self.images
                    .get_mut(&c)
                    .expect("child exists")
                    .blocks
                    .entry(index)
                    .or_insert_with(|| old.clone());
            }
        }
        self.images
            .get_mut(&id)
            .expect("exists")
            .blocks
            .insert(index, bytes.to_vec());
        Ok(())
    }

    /// Resolved full contents of an image, for audits and tests.
    pub fn read_all(&self, id: ImageId) -> Result<Vec<Vec<u8>>, ProvisioningError> {
        let image = self.image(id)?;
        Ok((0..image.block_count()).map(|i| self.resolve(id, i)).collect())
    }

    pub fn attach_boot_target(&mut self, node: &str, image: ImageId) -> Result<(), ProvisioningError> {
        self.image(image)?;
        if self.targets.contains_key(node) {
            return Err(ProvisioningError::AlreadyAttached(node.to_string()));
        }
        self.targets.insert(node.to_string(), image);
        Ok(())
    }

    /// Ends the node's session. The image re-locks; detaching with no
    /// target attached is a no-op.
    pub fn detach_boot_target(&mut self, node: &str) -> Option<ImageId> {
        let image = self.targets.remove(node)?;
        if let Some(img) = self.images.get_mut(&image) {
            img.unlocked = false;
        }
        Some(image)
    }

    pub fn target_of(&self, node: &str) -> Option<ImageId> {
        self.targets.get(node).copied()
    }

    fn session(&self, node: &str) -> Result<ImageId, ProvisioningError> {
        self.target_of(node)
            .ok_or_else(|| ProvisioningError::NotAttached(node.to_string()))
    }

    pub fn read_block(&self, node: &str, index: u64) -> Result<Vec<u8>, ProvisioningError> {
        self.read_image_block(self.session(node)?, index)
    }

    pub fn write_block(&mut self, node: &str, index: u64, bytes: &[u8]) -> Result<(), ProvisioningError> {
        let id = self.session(node)?;
        self.write_image_block(id, index, bytes)
    }

    /// Wraps a fresh random content key under `key`; the image becomes locked.
    pub fn encrypt_image<R: RngCore + CryptoRng>(
        &mut self,
        id: ImageId,
        key: &EnclaveKey,
        rng: &mut R,
    ) -> Result<(), ProvisioningError> {
        let image = self.images.get_mut(&id).ok_or(ProvisioningError::NoSuchImage(id))?;
        if image.encryption != Encryption::None {
            return Err(ProvisioningError::AlreadyEncrypted(id));
        }
        let mut content_key = [0u8; 32];
        rng.fill_bytes(&mut content_key);
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut nonce);
        let ct = ChaCha20Poly1305::new(Key::from_slice(&key.0))
            .encrypt(Nonce::from_slice(&nonce), content_key.as_slice())
            .expect("in-memory AEAD encryption");
        let mut wrapped = nonce.to_vec();
        wrapped.extend_from_slice(&ct);
        image.encryption = Encryption::Wrapped {
            wrapped_content_key: wrapped,
        };
        image.unlocked = false;
        Ok(())
    }

    /// Authenticated unwrap of the content key with `key`.
    pub fn unlock_encrypted_image(&mut self, id: ImageId, key: &EnclaveKey) -> Result<(), ProvisioningError> {
        self.check_key(id, key)?;
        self.images.get_mut(&id).expect("checked").unlocked = true;
        Ok(())
    }

    /// Succeeds iff `key` unwraps the image's content key. Never changes
    /// the lock state, so an unlocked image still rejects wrong keys.
    pub fn check_key(&self, id: ImageId, key: &EnclaveKey) -> Result<(), ProvisioningError> {
        let image = self.image(id)?;
        let Encryption::Wrapped { wrapped_content_key } = &image.encryption else {
            return Err(ProvisioningError::NotEncrypted(id));
        };
        if wrapped_content_key.len() < 12 {
            return Err(ProvisioningError::UnlockFailed(id));
        }
        let (nonce, ct) = wrapped_content_key.split_at(12);
        ChaCha20Poly1305::new(Key::from_slice(&key.0))
            .decrypt(Nonce::from_slice(nonce), ct)
            .map(|_| ())
            .map_err(|_| ProvisioningError::UnlockFailed(id))
    }

    /// Block indices where `id` differs from `base`.
    pub fn diff_blocks(&self, id: ImageId, base: ImageId) -> Result<Vec<u64>, ProvisioningError> {
        let a = self.read_all(id)?;
        let b = self.read_all(base)?;
        let n = a.len().max(b.len());
        Ok((0..n)
            .filter(|i| a.get(*i) != b.get(*i))
            .map(|i| i as u64)
            .collect())
    }

    pub fn snapshot(&self) -> ProvisioningSnapshot {
        ProvisioningSnapshot {
            next_id: self.next_id,
            images: self.images.values().cloned().collect(),
            targets: self
                .targets
                .iter()
                .map(|(node, image)| BootTarget {
                    node: node.clone(),
                    image: *image,
                })
                .collect(),
        }
    }

    pub fn from_snapshot(s: ProvisioningSnapshot) -> Result<Self, ProvisioningError> {
        let mut svc = ProvisioningService::new();
        svc.next_id = s.next_id;
        for img in s.images {
            if img.block_size == 0 {
                return Err(ProvisioningError::InvalidBlockSize(0));
            }
            svc.images.insert(img.id, img);
        }
        for img in svc.images.values() {
            if let Some(p) = img.parent {
                let parent = svc.images.get(&p).ok_or(ProvisioningError::NoSuchImage(p))?;
                if !parent.children.contains(&img.id) {
                    return Err(ProvisioningError::NoSuchImage(img.id));
                }
            }
        }
        for t in s.targets {
            svc.attach_boot_target(&t.node, t.image)?;
        }
        Ok(svc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProvisioningRequest {
    CreateImage { bytes: Vec<u8> },
    Clone { id: ImageId },
    Snapshot { id: ImageId },
    Delete { id: ImageId },
    Attach { node: String, image: ImageId },
    Detach { node: String },
    Read { node: String, index: u64 },
    Write { node: String, index: u64, bytes: Vec<u8> },
    Unlock { image: ImageId, key: EnclaveKey },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProvisioningResponse {
    Image { id: ImageId },
    Ok,
    Block { bytes: Vec<u8> },
    Err(ProvisioningError),
}

impl ProvisioningService {
    pub fn handle(&mut self, request: ProvisioningRequest) -> ProvisioningResponse {
        use ProvisioningRequest as Rq;
        use ProvisioningResponse as Rs;
        let result = match request {
            Rq::CreateImage { bytes } => Ok(Rs::Image {
                id: self.create_image(&bytes),
            }),
            Rq::Clone { id } => self.clone_image(id).map(|id| Rs::Image { id }),
            Rq::Snapshot { id } => self.snapshot_image(id).map(|id| Rs::Image { id }),
            Rq::Delete { id } => self.delete_image(id).map(|_| Rs::Ok),
            Rq::Attach { node, image } => self.attach_boot_target(&node, image).map(|_| Rs::Ok),
            Rq::Detach { node } => {
                self.detach_boot_target(&node);
                Ok(Rs::Ok)
            }
            Rq::Read { node, index } => self.read_block(&node, index).map(|bytes| Rs::Block { bytes }),
            Rq::Write { node, index, bytes } => self.write_block(&node, index, &bytes).map(|_| Rs::Ok),
            Rq::Unlock { image, key } => self.unlock_encrypted_image(image, &key).map(|_| Rs::Ok),
        };
        result.unwrap_or_else(Rs::Err)
    }
}
