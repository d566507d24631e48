//! Self-describing checkpoint files.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
//! (model config, bookkeeping, and a tensor manifest of name/shape/dtype/
//! offset), then the raw little-endian f64 payload. Optimizer moments ride
//! along after the parameters under `adam_m.*` / `adam_v.*` names, so a
//! checkpoint can seed either inference or a resumed run.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init, ModelConfig, ModelParams};
use crate::tensor::TensorData;
use crate::trainer::adam::AdamState;

const MAGIC: &[u8; 8] = b"VOXCKPT\0";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    version: u16,
    model: ModelConfig,
    epochs_done: usize,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint file holds, decoded.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams<TensorData>,
    pub adam: Option<AdamState>,
    pub epochs_done: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    params: &ModelParams<TensorData>,
    adam: Option<&AdamState>,
    epochs_done: usize,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&TensorData> = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: String, t: &TensorData, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
        });
        offset += (t.numel() * 8) as u64;
    };
    let flat = params.flatten();
    for (name, t) in &flat {
        push(format!("param.{name}"), t, &mut tensors);
        payload.push(t);
    }
    if let Some(state) = adam {
        for (buffers, prefix) in [(&state.m, "adam_m"), (&state.v, "adam_v")] {
            for ((name, _), t) in flat.iter().zip(buffers.iter()) {
                push(format!("{prefix}.{name}"), t, &mut tensors);
                payload.push(t);
            }
        }
    }
    let header = CkptHeader {
        version: VERSION,
        model: model.clone(),
        epochs_done,
        adam_step: adam.map(|s| s.step),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Contract(format!("checkpoint header serialization failed: {e}")))?;

    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for t in payload {
        for x in t.data() {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::FileNotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let mut r = BufReader::new(file);
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::FormatMismatch {
            path: path.to_path_buf(),
            reason: "not a checkpoint file (bad magic)".to_string(),
        });
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes, path, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 24 {
        return Err(corrupt("implausible header length"));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, path, "header")?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| corrupt(&format!("header is not valid JSON: {e}")))?;
    if header.version != VERSION {
        return Err(Error::FormatMismatch {
            path: path.to_path_buf(),
            reason: format!("unsupported checkpoint version {}", header.version),
        });
    }
    header.model.validate()?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;

    let mut by_name: HashMap<String, TensorData> = HashMap::new();
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::FormatMismatch {
                path: path.to_path_buf(),
                reason: format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(corrupt(&format!("payload truncated at tensor {}", entry.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = TensorData::new(entry.shape.clone(), data)
            .map_err(|e| corrupt(&format!("tensor {}: {e}", entry.name)))?;
        by_name.insert(entry.name.clone(), t);
    }

    let skeleton = init(&header.model, 0)?;
    let mut missing: Option<String> = None;
    let params = skeleton.map_ref(&mut |name, t: &TensorData| {
        match by_name.get(&format!("param.{name}")) {
            Some(loaded) if loaded.shape() == t.shape() => loaded.clone(),
            Some(_) => {
                missing.get_or_insert(format!("shape mismatch for param.{name}"));
                t.clone()
            }
            None => {
                missing.get_or_insert(format!("missing tensor param.{name}"));
                t.clone()
            }
        }
    });
    if let Some(reason) = missing {
        return Err(corrupt(&reason));
    }

    let adam = match header.adam_step {
        None => None,
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            let mut missing: Option<String> = None;
            params.visit(&mut |name, t| {
                for (prefix, out) in [("adam_m", &mut m), ("adam_v", &mut v)] {
                    match by_name.get(&format!("{prefix}.{name}")) {
                        Some(loaded) if loaded.shape() == t.shape() => out.push(loaded.clone()),
                        _ => {
                            missing.get_or_insert(format!("missing tensor {prefix}.{name}"));
                        }
                    }
                }
            });
            if let Some(reason) = missing {
                return Err(corrupt(&reason));
            }
            Some(AdamState { m, v, step })
        }
    };

    Ok(Checkpoint {
        model: header.model,
        params,
        adam,
        epochs_done: header.epochs_done,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("file ends inside the {what}"),
        },
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random_all;

    fn cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckpt");
        let cfg = cfg();
        let params = init_random_all(&cfg, 99).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = 17;
        adam.m[0].data_mut()[0] = 0.25;
        adam.v[3].data_mut()[1] = 1.5;

        save_checkpoint(&path, &cfg, &params, Some(&adam), 4).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.model, cfg);
        assert_eq!(loaded.epochs_done, 4);
        assert_eq!(loaded.params, params);
        let loaded_adam = loaded.adam.unwrap();
        assert_eq!(loaded_adam.step, 17);
        assert_eq!(loaded_adam.m, adam.m);
        assert_eq!(loaded_adam.v, adam.v);
    }

    #[test]
    fn inference_checkpoint_omits_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckpt");
        let cfg = cfg();
        let params = init(&cfg, 7).unwrap();
        save_checkpoint(&path, &cfg, &params, None, 0).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.adam.is_none());
        assert_eq!(loaded.params, params);
    }

    #[test]
    fn missing_file_reports_file_not_found() {
        let err = load_checkpoint(Path::new("/nonexistent/model.vckpt")).unwrap_err();
        assert!(matches!(err, Error::FileNotFound { .. }));
    }

    #[test]
    fn truncated_payload_reports_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckpt");
        let cfg = cfg();
        let params = init(&cfg, 7).unwrap();
        save_checkpoint(&path, &cfg, &params, None, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::CorruptFile { .. }), "got {err:?}");
    }

    #[test]
    fn foreign_file_reports_format_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckpt");
        std::fs::write(&path, b"GIF89a-definitely-not-a-checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::FormatMismatch { .. }), "got {err:?}");
    }
}
