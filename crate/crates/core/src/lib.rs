//! Urban function mix to vehicle travel demand.

pub mod baselines;
pub mod evalx;
pub mod features;
pub mod geo_grid;
pub mod ingest;
pub mod metrics;
pub mod nets;
pub mod optimizer;
pub mod pipeline;
pub mod predictor;
pub mod registry;
pub mod render;
pub mod synth;

use serde::{Deserialize, Serialize};

/// Stamped into every artifact the pipeline writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            super::sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
