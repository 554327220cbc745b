use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::densenet::{ArchitectureConfig, Model, ModelError};
use crate::engine::Tensor;

pub const MAGIC: &[u8; 4] = b"DTLC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint header truncated")]
    TruncatedHeader,
    #[error("checkpoint payload truncated at tensor {tensor}")]
    Truncated { tensor: String },
    #[error("checkpoint inconsistent: {0}")]
    Inconsistent(String),
    #[error("architecture fingerprint mismatch: checkpoint {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("write failed after {bytes_written} bytes: {source}")]
    Write {
        bytes_written: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("read failed: {0}")]
    Read(#[source] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BufferEntry {
    shape: Vec<usize>,
    /// Little-endian f32 bytes, hex encoded.
    data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: ArchitectureConfig,
    buffers: BTreeMap<String, BufferEntry>,
    fingerprint: String,
    provenance: Vec<String>,
    tensors: BTreeMap<String, DirectoryEntry>,
    trainable: BTreeMap<String, bool>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: ArchitectureConfig,
    pub fingerprint: String,
    pub provenance: Vec<String>,
    /// Parameters by name.
    pub tensors: BTreeMap<String, Tensor>,
    /// Batch-norm running statistics by name.
    pub buffers: BTreeMap<String, Tensor>,
    /// Trainability mask by parameter name.
    pub trainable: BTreeMap<String, bool>,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, provenance: &[String]) -> Self {
        Self {
            architecture: model.config().clone(),
            fingerprint: model.fingerprint(),
            provenance: provenance.to_vec(),
            tensors: model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: model.buffer_tensors().into_iter().collect(),
            trainable: model.params.iter().map(|p| (p.name.clone(), p.trainable)).collect(),
        }
    }

    /// Serialized form: magic, version, header length, sorted-key JSON header, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut directory = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = f32_bytes(t.data());
            directory.insert(
                name.clone(),
                DirectoryEntry {
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                    length: bytes.len() as u64,
                },
            );
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            architecture: self.architecture.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        BufferEntry {
                            shape: t.shape().to_vec(),
                            data: hex::encode(f32_bytes(t.data())),
                        },
                    )
                })
                .collect(),
            fingerprint: self.fingerprint.clone(),
            provenance: self.provenance.clone(),
            tensors: directory,
            trainable: self.trainable.clone(),
        };
        // Round-tripping through Value sorts every object's keys.
        let value = serde_json::to_value(&header).expect("header serializes");
        let json = serde_json::to_vec(&value).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::TruncatedHeader);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or(CheckpointError::TruncatedHeader)? as usize;
        let header: Header =
            serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut entries: Vec<(&String, &DirectoryEntry)> = header.tensors.iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut end = 0u64;
        let mut tensors = BTreeMap::new();
        for (name, e) in entries {
            let numel: usize = e.shape.iter().product();
            if e.shape.contains(&0) || e.length != 4 * numel as u64 {
                return Err(CheckpointError::Inconsistent(format!(
                    "{name}: length {} does not match shape {:?}",
                    e.length, e.shape
                )));
            }
            if e.offset < end {
                return Err(CheckpointError::Inconsistent(format!("{name} overlaps the previous tensor")));
            }
            let stop = e.offset + e.length;
            if stop > payload.len() as u64 {
                return Err(CheckpointError::Truncated { tensor: name.clone() });
            }
            let data = bytes_f32(&payload[e.offset as usize..stop as usize]);
            tensors.insert(name.clone(), Tensor::from_parts(e.shape.clone(), data));
            end = stop;
        }
        if end != payload.len() as u64 {
            return Err(CheckpointError::Inconsistent(format!(
                "payload has {} trailing bytes",
                payload.len() as u64 - end
            )));
        }
        let mut buffers = BTreeMap::new();
        for (name, b) in header.buffers {
            let raw = hex::decode(&b.data).map_err(|e| CheckpointError::Header(format!("buffer {name}: {e}")))?;
            let numel: usize = b.shape.iter().product();
            if raw.len() != 4 * numel || numel == 0 {
                return Err(CheckpointError::Inconsistent(format!("buffer {name} does not match shape {:?}", b.shape)));
            }
            buffers.insert(name, Tensor::from_parts(b.shape, bytes_f32(&raw)));
        }
        if header.fingerprint != header.architecture.fingerprint() {
            return Err(CheckpointError::Inconsistent(
                "stored fingerprint does not match stored architecture".into(),
            ));
        }
        Ok(Self {
            architecture: header.architecture,
            fingerprint: header.fingerprint,
            provenance: header.provenance,
            tensors,
            buffers,
            trainable: header.trainable,
        })
    }

    /// Rebuilds the model with `expected`'s settings. Every parameter and buffer
    /// must be present with a matching shape.
    pub fn to_model(&self, expected: &ArchitectureConfig) -> Result<Model, CheckpointError> {
        let want = expected.fingerprint();
        if want != self.fingerprint {
            return Err(CheckpointError::FingerprintMismatch {
                expected: want,
                found: self.fingerprint.clone(),
            });
        }
        let mut model = Model::build(expected, 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{} tensors stored, model has {} parameters",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| CheckpointError::Inconsistent(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::Inconsistent(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            p.trainable = self.trainable.get(&p.name).copied().unwrap_or(true);
        }
        for (name, _) in model.buffer_tensors() {
            let t = self
                .buffers
                .get(&name)
                .ok_or_else(|| CheckpointError::Inconsistent(format!("missing buffer {name}")))?;
            if !model.set_buffer(&name, t.data()) {
                return Err(CheckpointError::Inconsistent(format!("buffer {name} has the wrong length")));
            }
        }
        Ok(model)
    }

    /// Total payload bytes.
    pub fn payload_len(&self) -> usize {
        self.tensors.values().map(|t| 4 * t.numel()).sum()
    }
}

struct Counting<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for Counting<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes `model` with its provenance; returns the byte count.
pub fn save_checkpoint<W: Write>(model: &Model, provenance: &[String], sink: W) -> Result<u64, CheckpointError> {
    write_checkpoint(&Checkpoint::from_model(model, provenance), sink)
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, sink: W) -> Result<u64, CheckpointError> {
    let bytes = ckpt.to_bytes();
    let mut w = Counting { inner: sink, written: 0 };
    let fail = |w: &Counting<W>, source| CheckpointError::Write {
        bytes_written: w.written,
        source,
    };
    if let Err(e) = w.write_all(&bytes) {
        return Err(fail(&w, e));
    }
    if let Err(e) = w.flush() {
        return Err(fail(&w, e));
    }
    Ok(w.written)
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(CheckpointError::Read)?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads a checkpoint and rebuilds the model, requiring an exact architecture match.
pub fn load_checkpoint<R: Read>(source: R, expected: &ArchitectureConfig) -> Result<Model, CheckpointError> {
    read_checkpoint(source)?.to_model(expected)
}
