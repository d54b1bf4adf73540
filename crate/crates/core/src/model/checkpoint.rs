//! Checkpoint file: a UTF-8 header followed by a little-endian `f32` payload.
//!
//! ```text
//! kvl-checkpoint 1
//! config {"vocab":256,...}
//! base_frozen false
//! lora none                      (or: lora <rank> <alpha>)
//! tensor embed 256x128 0 131072
//! ...
//! payload_sha256 <64 hex digits>
//! end
//! <payload bytes>
//! ```
//!
//! Tensor offsets are relative to the first payload byte. Tensors appear in
//! [`Model::params`] order and loading requires exactly that directory.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{DecoderBlockWeights, FfnLora, LoraAdapter, Model, ModelConfig};
use crate::attention::AttentionWeights;
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &str = "kvl-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed")]
    Io(#[from] io::Error),
    #[error("not a checkpoint or unsupported format version: {0:?}")]
    Version(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("tensor directory mismatch at {name}: {reason}")]
    Directory { name: String, reason: String },
    #[error("malformed header line {line}: {reason}")]
    Header { line: usize, reason: String },
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

pub fn save_to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let params = model.params();
    let mut payload = Vec::new();
    let mut directory = String::new();
    for p in &params {
        let offset = payload.len();
        for v in p.tensor.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        let shape: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        writeln!(
            directory,
            "tensor {} {} {} {}",
            p.name,
            shape.join("x"),
            offset,
            payload.len() - offset
        )
        .expect("write to string");
    }
    let mut header = String::new();
    writeln!(header, "{MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(
        header,
        "config {}",
        serde_json::to_string(model.config()).expect("config serializes")
    )
    .unwrap();
    writeln!(header, "base_frozen {}", model.base_frozen).unwrap();
    match model.lora_settings() {
        Some((rank, alpha)) => writeln!(header, "lora {rank} {alpha}").unwrap(),
        None => writeln!(header, "lora none").unwrap(),
    }
    header.push_str(&directory);
    writeln!(header, "payload_sha256 {}", hex(&Sha256::digest(&payload))).unwrap();
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, save_to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>, CheckpointError> {
    load_from_bytes(&std::fs::read(path)?)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

/// Splits off the next `\n`-terminated header line.
fn next_line<'a>(bytes: &'a [u8], pos: &mut usize, lineno: &mut usize) -> Result<&'a str, CheckpointError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Truncated(format!("header ends inside line {}", *lineno + 1)))?;
    *pos += end + 1;
    *lineno += 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Header {
        line: *lineno,
        reason: "not UTF-8".into(),
    })
}

fn field<'a>(line: &'a str, key: &str, lineno: usize) -> Result<&'a str, CheckpointError> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| CheckpointError::Header {
            line: lineno,
            reason: format!("expected `{key} ...`, found {line:?}"),
        })
}

fn bad(line: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Header {
        line,
        reason: reason.into(),
    }
}

fn skeleton(config: ModelConfig, lora: Option<(usize, f64)>) -> Result<Model<f32>, CheckpointError> {
    let d = config.d_model;
    let z = |r: usize, c: usize| Tensor::<f32>::zeros(&[r, c]);
    let adapter = |rows: usize, cols: usize, (rank, alpha): (usize, f64)| LoraAdapter {
        a: z(rows, rank),
        b: z(rank, cols),
        rank,
        alpha,
    };
    let blocks = (0..config.n_layers)
        .map(|_| DecoderBlockWeights {
            attn_norm: z(1, d),
            attention: AttentionWeights::zeros(&config.geom),
            ffn_norm: z(1, d),
            ffn_gate: z(d, config.d_ffn),
            ffn_up: z(d, config.d_ffn),
            ffn_down: z(config.d_ffn, d),
            lora: lora.map(|l| FfnLora {
                gate: adapter(d, config.d_ffn, l),
                up: adapter(d, config.d_ffn, l),
                down: adapter(config.d_ffn, d, l),
            }),
        })
        .collect();
    Model::from_parts(config, z(config.vocab, d), blocks, z(1, d), z(d, config.vocab))
        .map_err(|e| bad(2, format!("config rejected: {e}")))
}

pub fn load_from_bytes(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    let (mut pos, mut ln) = (0usize, 0usize);
    let first = next_line(bytes, &mut pos, &mut ln).map_err(|_| CheckpointError::Version("missing header".into()))?;
    if first != format!("{MAGIC} {FORMAT_VERSION}") {
        return Err(CheckpointError::Version(first.chars().take(64).collect()));
    }
    let line = next_line(bytes, &mut pos, &mut ln)?;
    let config: ModelConfig =
        serde_json::from_str(field(line, "config", ln)?).map_err(|e| bad(ln, format!("config: {e}")))?;
    let line = next_line(bytes, &mut pos, &mut ln)?;
    let base_frozen = match field(line, "base_frozen", ln)? {
        "true" => true,
        "false" => false,
        other => return Err(bad(ln, format!("base_frozen {other:?}"))),
    };
    let line = next_line(bytes, &mut pos, &mut ln)?;
    let lora = match field(line, "lora", ln)? {
        "none" => None,
        spec => {
            let mut it = spec.split(' ');
            let rank = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(ln, "lora rank"))?;
            let alpha = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(ln, "lora alpha"))?;
            Some((rank, alpha))
        }
    };

    let mut entries = Vec::new();
    let checksum = loop {
        let line = next_line(bytes, &mut pos, &mut ln)?;
        if let Some(sum) = line.strip_prefix("payload_sha256 ") {
            break sum.to_string();
        }
        let parts: Vec<&str> = field(line, "tensor", ln)?.split(' ').collect();
        let [name, shape, offset, nbytes] = parts[..] else {
            return Err(bad(ln, "tensor line needs name, shape, offset, nbytes"));
        };
        let shape = shape
            .split('x')
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|_| bad(ln, format!("shape {shape:?}")))?;
        let offset = offset.parse().map_err(|_| bad(ln, "offset"))?;
        let nbytes = nbytes.parse().map_err(|_| bad(ln, "nbytes"))?;
        entries.push(Entry {
            name: name.to_string(),
            shape,
            offset,
            nbytes,
        });
    };
    if next_line(bytes, &mut pos, &mut ln)? != "end" {
        return Err(bad(ln, "expected `end`"));
    }
    let payload = &bytes[pos..];
    let want_len = entries.iter().map(|e| e.offset + e.nbytes).max().unwrap_or(0);
    if payload.len() < want_len {
        return Err(CheckpointError::Truncated(format!(
            "payload has {} bytes, directory needs {want_len}",
            payload.len()
        )));
    }
    let actual = hex(&Sha256::digest(payload));
    if actual != checksum {
        return Err(CheckpointError::Checksum {
            expected: checksum,
            actual,
        });
    }

    let mut model = skeleton(config, lora)?;
    model.base_frozen = base_frozen;
    let mut params = model.params_mut();
    if params.len() != entries.len() {
        let name = params
            .get(entries.len())
            .map(|p| p.name.clone())
            .or_else(|| entries.get(params.len()).map(|e| e.name.clone()))
            .unwrap_or_default();
        return Err(CheckpointError::Directory {
            name,
            reason: format!("directory lists {} tensors, model has {}", entries.len(), params.len()),
        });
    }
    for (p, e) in params.iter_mut().zip(&entries) {
        let dir_err = |reason: String| CheckpointError::Directory {
            name: e.name.clone(),
            reason,
        };
        if p.name != e.name {
            return Err(dir_err(format!("expected tensor {}", p.name)));
        }
        if p.tensor.shape() != e.shape.as_slice() {
            return Err(dir_err(format!(
                "shape {:?}, model expects {:?}",
                e.shape,
                p.tensor.shape()
            )));
        }
        if e.nbytes != 4 * p.tensor.len() {
            return Err(dir_err(format!("{} bytes for {} elements", e.nbytes, p.tensor.len())));
        }
        let raw = &payload[e.offset..e.offset + e.nbytes];
        for (dst, chunk) in p.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(model)
}
