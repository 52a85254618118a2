//! Checkpoint files.
//!
//! Little-endian layout: magic `FTLB`, version `u32`, metadata length `u32`
//! followed by that many bytes of UTF-8 JSON, tensor count `u32`, then for
//! each tensor a `u16` name length, the UTF-8 name, rank `u8`, dims `u32`
//! and `f32` data.

use std::fs;
use std::path::Path;

use tlrate_core::model::{architecture_digest, build_staged_network, Checkpoint, CheckpointMeta};

use crate::error::{io_at, Error, Result};
use crate::tensor_io::{write_body, Reader};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FTLB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Format {
        what: "checkpoint metadata",
        reason: e.to_string(),
    })?;
    let too_big = |what: &'static str| Error::Format {
        what,
        reason: "length does not fit the header field".into(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(meta.len())
            .map_err(|_| too_big("checkpoint metadata"))?
            .to_le_bytes(),
    );
    out.extend_from_slice(&meta);
    out.extend_from_slice(
        &u32::try_from(ckpt.tensors.len())
            .map_err(|_| too_big("tensor count"))?
            .to_le_bytes(),
    );
    for (name, tensor) in &ckpt.tensors {
        let len = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_body(&mut out, tensor)?;
    }
    Ok(out)
}

fn header_truncated() -> Error {
    Error::Format {
        what: "checkpoint header",
        reason: "unexpected end of file".into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.magic().ok_or_else(header_truncated)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32().ok_or_else(header_truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let meta_len = r.u32().ok_or_else(header_truncated)? as usize;
    let meta_bytes = r.take(meta_len).ok_or_else(header_truncated)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        what: "checkpoint metadata",
        reason: e.to_string(),
    })?;
    let digest = architecture_digest(&meta.spec)?;
    if digest != meta.digest {
        return Err(Error::Format {
            what: "checkpoint metadata",
            reason: format!(
                "digest {} does not match the stored architecture ({digest})",
                meta.digest
            ),
        });
    }
    // Names the model would expect, so a cut inside a name can still be reported.
    let expected: Vec<String> = build_staged_network(&meta.spec, meta.seed)
        .map(|m| m.param_names().to_vec())
        .unwrap_or_default();
    let missing = |i: usize, name: Option<&str>| Error::Truncated {
        tensor: name
            .map(str::to_owned)
            .or_else(|| expected.get(i).cloned())
            .unwrap_or_else(|| format!("#{i}")),
    };
    let count = r.u32().ok_or_else(|| missing(0, None))? as usize;
    let mut tensors = Vec::with_capacity(count.min(expected.len().max(1) * 2));
    for i in 0..count {
        let len = r.u16().ok_or_else(|| missing(i, None))? as usize;
        let raw = r.take(len).ok_or_else(|| missing(i, None))?;
        let name = std::str::from_utf8(raw).map_err(|_| Error::Format {
            what: "tensor name",
            reason: "not UTF-8".into(),
        })?;
        let tensor = r.tensor_body().ok_or_else(|| missing(i, Some(name)))??;
        tensors.push((name.to_owned(), tensor));
    }
    if !r.is_at_end() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: "trailing bytes after the last tensor".into(),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(path, bytes).map_err(io_at(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(io_at(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tlrate_core::model::mini_staged_spec;

    fn sample() -> Checkpoint {
        build_staged_network(&mini_staged_spec([1, 6, 6], 2, true, 3), 4)
            .unwrap()
            .to_checkpoint(17)
    }

    #[test]
    fn header_fields() {
        let b = encode_checkpoint(&sample()).unwrap();
        assert_eq!(&b[..4], b"FTLB");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&b[12..12 + n]).unwrap();
        assert_eq!(meta["iterations"], 17);
        assert_eq!(meta["num_labels"], 3);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode_checkpoint(&sample()).unwrap();
        b[4] = 9;
        assert!(matches!(decode_checkpoint(&b), Err(Error::BadVersion(9))));
        b[0] = b'X';
        assert!(matches!(decode_checkpoint(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let ck = sample();
        let b = encode_checkpoint(&ck).unwrap();
        let last = &ck.tensors.last().unwrap().0;
        match decode_checkpoint(&b[..b.len() - 3]) {
            Err(Error::Truncated { tensor }) => assert_eq!(&tensor, last),
            other => panic!("{other:?}"),
        }
        // cut inside the second tensor's name length
        let first = &ck.tensors[0].1;
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let first_end =
            12 + n + 4 + 2 + ck.tensors[0].0.len() + 1 + 4 * first.shape().len() + 4 * first.len();
        match decode_checkpoint(&b[..first_end + 1]) {
            Err(Error::Truncated { tensor }) => assert_eq!(tensor, ck.tensors[1].0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tampered_digest_is_rejected() {
        let mut ck = sample();
        ck.meta.digest = "00".into();
        let b = encode_checkpoint(&ck).unwrap();
        assert!(matches!(decode_checkpoint(&b), Err(Error::Format { .. })));
    }
}
