//! Deterministic seed derivation for independent jobs.

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Str(&'a str),
    U64(u64),
    F64(f64),
}

/// Hash of `master` and the tagged `parts`, truncated to 64 bits.
pub fn derive_seed(master: u64, parts: &[SeedPart<'_>]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        match p {
            SeedPart::Str(s) => {
                h.update([1]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
            SeedPart::U64(v) => {
                h.update([2]);
                h.update(v.to_le_bytes());
            }
            SeedPart::F64(v) => {
                h.update([3]);
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    let out = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}
