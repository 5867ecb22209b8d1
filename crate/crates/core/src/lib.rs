//! Desk-scale simulator of an attested bare-metal cloud.

pub mod attestation;
pub mod config;
pub mod isolation;
pub mod node;
pub mod orchestrator;
pub mod provisioning;
pub mod scenario;
pub mod state_file;
pub mod tpm;
