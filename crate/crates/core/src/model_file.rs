//! Binary model files: a fitted factor plus its catalog and training digest.
//!
//! Layout, little-endian: magic `CEDPPMDL`, `u32` version, `u64` items `M`,
//! `u64` rank `K`, `u64` seed, 32-byte SHA-256 of the training config, `M`
//! `u64` catalog ids, then `M·K` `f64` entries in row-major order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DppError, Result};
use crate::factor::KernelFactor;

pub const MAGIC: &[u8; 8] = b"CEDPPMDL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub factor: KernelFactor,
    pub catalog_ids: Vec<u64>,
    pub seed: u64,
    pub config_digest: [u8; 32],
}

/// SHA-256 of `bytes`, typically a serialized training config.
pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (m, k) = (self.factor.num_items(), self.factor.rank());
        if self.catalog_ids.len() != m {
            return Err(DppError::Format(format!("{} catalog ids for {m} items", self.catalog_ids.len())));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * m * (k + 1));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        out.extend_from_slice(&(k as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        for id in &self.catalog_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for x in self.factor.to_row_major() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(DppError::Format("not a model file".into()));
        }
        let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(DppError::Format(format!("unsupported model version {version}")));
        }
        let m = usize::try_from(u64_at(12)).map_err(|_| DppError::Format("item count overflow".into()))?;
        let k = usize::try_from(u64_at(20)).map_err(|_| DppError::Format("rank overflow".into()))?;
        let seed = u64_at(28);
        let config_digest: [u8; 32] = bytes[36..68].try_into().expect("32 bytes");
        let expected = m
            .checked_mul(k + 1)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| DppError::Format("size overflow".into()))?;
        if bytes.len() != expected {
            return Err(DppError::Format(format!(
                "payload is {} bytes, expected {expected} for M = {m}, K = {k}",
                bytes.len()
            )));
        }
        let catalog_ids = (0..m).map(|i| u64_at(HEADER_LEN + 8 * i)).collect();
        let start = HEADER_LEN + 8 * m;
        let data: Vec<f64> = bytes[start..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let factor = KernelFactor::from_row_slice(m, k, &data)?;
        Ok(ModelFile {
            factor,
            catalog_ids,
            seed,
            config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
