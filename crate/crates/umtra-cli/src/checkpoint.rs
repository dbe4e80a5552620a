//! Checkpoint files: magic `UMTCKPT1`, a length-prefixed canonical-JSON
//! model spec, then (name length, name bytes, serialized tensor)
//! records until end of file.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use umtra_core::{ModelKind, ModelSpec, ParamSet, Tensor};

use crate::csvio::write_atomic;

const MAGIC: &[u8; 8] = b"UMTCKPT1";

#[derive(Serialize, Deserialize)]
struct SpecJson {
    kind: String,
    input_shape: [usize; 3],
    n_classes: usize,
    filters: usize,
    hidden: Vec<usize>,
}

impl SpecJson {
    fn of(spec: &ModelSpec) -> Self {
        SpecJson {
            kind: spec.kind.name().to_string(),
            input_shape: spec.input_shape,
            n_classes: spec.n_classes,
            filters: spec.filters,
            hidden: spec.hidden.clone(),
        }
    }

    fn to_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            kind: ModelKind::parse(&self.kind).map_err(|e| anyhow::anyhow!("{e}"))?,
            input_shape: self.input_shape,
            n_classes: self.n_classes,
            filters: self.filters,
            hidden: self.hidden.clone(),
        })
    }
}

pub fn checkpoint_bytes(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let spec_json = crate::config::to_canonical_json(&SpecJson::of(params.spec()))?;
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_json.as_bytes());
    for (name, tensor) in params.entries() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tensor.to_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params)?)
}

pub fn parse_checkpoint(bytes: &[u8], origin: &str) -> Result<ParamSet> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        bail!("{origin}: not a checkpoint (bad magic)");
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + json_len)
        .with_context(|| format!("{origin}: truncated model spec"))?;
    let spec_json: SpecJson = serde_json::from_slice(json)
        .with_context(|| format!("{origin}: malformed model spec"))?;
    let spec = spec_json.to_spec()?;

    let mut entries = Vec::new();
    let mut off = 12 + json_len;
    while off < bytes.len() {
        let len_bytes = bytes
            .get(off..off + 4)
            .with_context(|| format!("{origin}: truncated record header"))?;
        let name_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        off += 4;
        let name_bytes = bytes
            .get(off..off + name_len)
            .with_context(|| format!("{origin}: truncated record name"))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .with_context(|| format!("{origin}: record name is not UTF-8"))?;
        off += name_len;
        let (tensor, used) = Tensor::from_bytes(&bytes[off..])
            .map_err(|e| anyhow::anyhow!("{origin}: record `{name}`: {e}"))?;
        off += used;
        entries.push((name, tensor));
    }
    ParamSet::from_entries(spec, entries).map_err(|e| anyhow::anyhow!("{origin}: {e}"))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use umtra_core::nn::init_params;

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let params = init_params(&spec, 33).unwrap();
        let bytes = checkpoint_bytes(&params).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = parse_checkpoint(&bytes, "test").unwrap();
        assert!(params.bits_eq(&back));
        assert_eq!(back.spec(), &spec);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        assert!(parse_checkpoint(b"NOPE", "t").is_err());
        let spec = ModelSpec::mlp([1, 4, 4], 2, vec![]);
        let params = init_params(&spec, 1).unwrap();
        let mut bytes = checkpoint_bytes(&params).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(parse_checkpoint(&bytes, "t").is_err());
    }
}
