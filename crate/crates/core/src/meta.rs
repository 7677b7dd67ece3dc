//! Provenance stamped onto every artifact the tool writes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_NAME: &str = "patchssl";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        ArtifactMeta {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            seed,
            config_hash: config_hash.into(),
        }
    }

    /// `# patchssl 0.1.0 seed=7 config=ab12...`, the first line of CSV outputs.
    pub fn comment_line(&self) -> String {
        format!(
            "# {} {} seed={} config={}",
            self.tool, self.version, self.seed, self.config_hash
        )
    }
}

/// Hex SHA-256 of a canonical config rendering, truncated to 16 chars.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
