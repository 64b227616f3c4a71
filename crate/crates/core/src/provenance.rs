//! Provenance stamped into every generated artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    /// Lowercase hex SHA-256 of the canonical configuration text.
    pub config_digest: String,
}

impl Provenance {
    pub fn new(seed: u64, config_text: &str) -> Self {
        Self { version: env!("CARGO_PKG_VERSION").to_string(), seed, config_digest: digest_hex(config_text) }
    }
}

pub fn digest_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
