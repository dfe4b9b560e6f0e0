//! `HMC1` checkpoints: magic, length-prefixed canonical JSON config, then
//! `(length-prefixed id, HTF tensor)` pairs in id order until end of file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{HimeConfig, HimeModel};
use crate::error::{Error, Result};
use crate::tensor::{read_htf, write_htf, Scalar};
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMC1";

fn push_prefixed(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Format("checkpoint block exceeds 4 GiB".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

fn take_prefixed<'a>(cur: &mut &'a [u8], what: &str) -> Result<&'a [u8]> {
    if cur.len() < 4 {
        return Err(Error::Format(format!(
            "truncated checkpoint while reading {what} length"
        )));
    }
    let len = u32::from_le_bytes(cur[..4].try_into().unwrap()) as usize;
    let rest = &cur[4..];
    if rest.len() < len {
        return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
    }
    let (head, tail) = rest.split_at(len);
    *cur = tail;
    Ok(head)
}

pub fn encode_checkpoint<T: Scalar>(model: &HimeModel<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_prefixed(&mut buf, model.config().canonical_json()?.as_bytes())?;
    for p in model.params().iter_sorted() {
        push_prefixed(&mut buf, p.id.as_bytes())?;
        write_htf(&p.value, &mut buf).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<HimeModel<T>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        let head = &bytes[..bytes.len().min(4)];
        return Err(Error::Format(format!("not a checkpoint: header {head:02x?}")));
    }
    let mut cur = &bytes[4..];
    let json = take_prefixed(&mut cur, "config")?;
    let config: HimeConfig =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = HimeModel::<T>::new(config)?;
    let mut seen = BTreeSet::new();
    while !cur.is_empty() {
        let id = take_prefixed(&mut cur, "parameter id")?;
        let id = std::str::from_utf8(id)
            .map_err(|_| Error::Format("parameter id is not UTF-8".into()))?
            .to_owned();
        let tensor = read_htf(&mut cur)?.into_tensor::<T>();
        let key = model
            .params()
            .key_of(&id)
            .ok_or_else(|| Error::Format(format!("checkpoint has unknown parameter `{id}`")))?;
        if !seen.insert(id.clone()) {
            return Err(Error::Format(format!("parameter `{id}` stored twice")));
        }
        model
            .params_mut()
            .set_value(key, tensor)
            .map_err(|e| Error::Format(format!("parameter `{id}`: {e}")))?;
    }
    if let Some(missing) = model.params().iter_sorted().find(|p| !seen.contains(&p.id)) {
        return Err(Error::Format(format!("checkpoint lacks parameter `{}`", missing.id)));
    }
    Ok(model)
}

/// Atomic: a crash mid-write leaves any previous checkpoint intact.
pub fn save_checkpoint<T: Scalar>(model: &HimeModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<HimeModel<T>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}
