//! Flat binary checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! raw float64 little-endian payload of every tensor in header order. The
//! header records the full model configuration, the run seed, the step and
//! epoch counters, and the tensor inventory (path + shape), optionally
//! including optimizer moments under `optim.m.*` / `optim.v.*` so training
//! can resume exactly.

use crate::encoder::{ModelConfig, ModelParams};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "semtok-checkpoint";

/// First and second Adam moments, keyed like the parameters they track.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimMoments {
    pub m: Vec<(String, Vec<f64>)>,
    pub v: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub params: ModelParams,
    pub optim: Option<OptimMoments>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    step: u64,
    epoch: u64,
    tensors: Vec<TensorEntry>,
}

fn write_f64s(out: &mut impl Write, data: &[f64]) -> Result<()> {
    for &x in data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("payload truncated: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Serializes params (and optimizer moments, when given) to `path`,
/// writing a sibling temp file first so an interrupted save never leaves a
/// half-written checkpoint behind.
pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, &Vec<usize>, &Vec<f64>)> = Vec::new();
    for (p, param) in ckpt.params.iter() {
        tensors.push((p.clone(), &param.shape, &param.data));
    }
    let moment_shapes: Vec<(String, Vec<usize>, &Vec<f64>)> = match &ckpt.optim {
        Some(opt) => {
            let mut v = Vec::new();
            for (name, data) in opt.m.iter() {
                v.push((format!("optim.m.{name}"), vec![data.len()], data));
            }
            for (name, data) in opt.v.iter() {
                v.push((format!("optim.v.{name}"), vec![data.len()], data));
            }
            v
        }
        None => Vec::new(),
    };

    let mut entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(p, shape, _)| TensorEntry { path: p.clone(), shape: (*shape).clone() })
        .collect();
    entries.extend(moment_shapes.iter().map(|(p, shape, _)| TensorEntry { path: p.clone(), shape: shape.clone() }));

    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        epoch: ckpt.epoch,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for (_, _, data) in &tensors {
            write_f64s(&mut out, data)?;
        }
        for (_, _, data) in &moment_shapes {
            write_f64s(&mut out, data)?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint and verifies the tensor inventory against a freshly
/// initialized model of the stored configuration: every expected parameter
/// path must be present with its expected shape, and nothing unknown may
/// appear outside the optimizer namespace.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut input = BufReader::new(File::open(path.as_ref())?);
    let mut len_bytes = [0u8; 8];
    input
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::Checkpoint(format!("missing header length: {e}")))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header truncated: {e}")))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }

    // The seed only regenerates the inventory; stored payloads overwrite
    // every initialized value.
    let mut params = ModelParams::init(&header.config, header.seed)?;
    let mut optim = OptimMoments::default();
    let mut saw_moments = false;
    let mut seen_params = 0usize;

    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = read_f64s(&mut input, numel)?;
        if let Some(rest) = entry.path.strip_prefix("optim.m.") {
            optim.m.push((rest.to_string(), data));
            saw_moments = true;
        } else if let Some(rest) = entry.path.strip_prefix("optim.v.") {
            optim.v.push((rest.to_string(), data));
            saw_moments = true;
        } else {
            let expected = params
                .get(&entry.path)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", entry.path)))?;
            if expected.shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: stored shape {:?}, expected {:?}",
                    entry.path, entry.shape, expected.shape
                )));
            }
            params.set(&entry.path, data)?;
            seen_params += 1;
        }
    }
    if seen_params != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {seen_params} parameter tensors, model has {}",
            params.len()
        )));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after final tensor".to_string()));
    }

    Ok(Checkpoint {
        config: header.config,
        seed: header.seed,
        step: header.step,
        epoch: header.epoch,
        params,
        optim: if saw_moments { Some(optim) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, TextConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 4,
            encoder: EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, context_length: 6, d_l: 4, embed_dim: 4 },
            text: TextConfig { vocab_size: 10, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, context_length: 6 },
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let config = cfg();
        let params = ModelParams::init(&config, 42).unwrap();
        let optim = OptimMoments {
            m: params.iter().map(|(p, v)| (p.clone(), vec![0.25; v.data.len()])).collect(),
            v: params.iter().map(|(p, v)| (p.clone(), vec![0.5; v.data.len()])).collect(),
        };
        Checkpoint { config, seed: 42, step: 123, epoch: 7, params, optim: Some(optim) }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.optim, ckpt.optim);
        assert_eq!((back.seed, back.step, back.epoch), (42, 123, 7));
        assert_eq!(back.config, ckpt.config);
    }

    #[test]
    fn params_only_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.optim = None;
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert!(back.optim.is_none());
        assert_eq!(back.params, ckpt.params);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("truncated")));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("trailing")));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn unknown_tensor_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        // Rewrite one parameter path in the header to something unexpected.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + header_len].to_vec()).unwrap();
        let patched = header.replace("img.in_proj.w", "img.in_proj.X");
        assert_ne!(header, patched);
        let mut out = (patched.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[8 + header_len..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("unexpected tensor")));
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.optim = None;
        save(&ckpt, &path).unwrap();
        // Drop the last tensor from the header and its payload bytes.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        let tensors = header["tensors"].as_array_mut().unwrap();
        let dropped = tensors.pop().unwrap();
        let dropped_numel: usize = dropped["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).product();
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = (new_header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[8 + header_len..bytes.len() - dropped_numel * 8]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("parameter tensors")));
    }
}
