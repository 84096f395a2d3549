//! Binary checkpoints: the magic `MOLKD1`, a little-endian `u32` manifest
//! length, a JSON manifest, then every tensor as row-major little-endian
//! `f64` in manifest order.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{Head, Predictor, TaskKind, TeacherProjection};
use crate::encoder::{Architecture, EncoderParams, EncoderSpec};
use crate::featurize::FeatureVocab;
use crate::ndiff::Tensor;

pub const MAGIC: &[u8; 6] = b"MOLKD1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: Kind, found: Kind },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CheckpointError {
    pub fn is_missing_file(&self) -> bool {
        matches!(self, CheckpointError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Teacher,
    Predictor,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kind::Teacher => "teacher",
            Kind::Predictor => "predictor",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorInfo {
    pub task: TaskKind,
    pub task_names: Vec<String>,
    pub head_hidden: usize,
    pub teacher_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: Kind,
    pub arch: Architecture,
    pub dims: Vec<usize>,
    pub layers: usize,
    pub k_hops: usize,
    pub vocab: FeatureVocab,
    /// Echo of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PredictorInfo>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            arch: self.arch,
            dims: self.dims.clone(),
            k_hops: self.k_hops,
        }
    }

    fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 8).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

fn encoder_entries(spec: &EncoderSpec, prefix: &str) -> Vec<TensorEntry> {
    spec.tensor_layout()
        .into_iter()
        .map(|(name, (r, c))| TensorEntry {
            name: format!("{prefix}{name}"),
            shape: [r, c],
        })
        .collect()
}

fn entry(name: &str, t: &Tensor) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        shape: [t.rows(), t.cols()],
    }
}

impl Checkpoint {
    pub fn teacher(
        params: &EncoderParams,
        vocab: &FeatureVocab,
        config: serde_json::Value,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        let spec = &params.spec;
        Checkpoint {
            manifest: Manifest {
                kind: Kind::Teacher,
                arch: spec.arch,
                dims: spec.dims.clone(),
                layers: spec.layers(),
                k_hops: spec.k_hops,
                vocab: vocab.clone(),
                config,
                metadata,
                predictor: None,
                tensors: encoder_entries(spec, "encoder."),
            },
            tensors: params.weights.clone(),
        }
    }

    pub fn predictor(
        p: &Predictor,
        vocab: &FeatureVocab,
        config: serde_json::Value,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        let spec = &p.student.spec;
        let mut entries = encoder_entries(spec, "student.");
        entries.extend([
            entry("head.fc0.weight", &p.head.w1),
            entry("head.fc0.bias", &p.head.b1),
            entry("head.fc1.weight", &p.head.w2),
            entry("head.fc1.bias", &p.head.b2),
            entry("projection.weight", &p.projection.weight),
            entry("projection.bias", &p.projection.bias),
        ]);
        Checkpoint {
            manifest: Manifest {
                kind: Kind::Predictor,
                arch: spec.arch,
                dims: spec.dims.clone(),
                layers: spec.layers(),
                k_hops: spec.k_hops,
                vocab: vocab.clone(),
                config,
                metadata,
                predictor: Some(PredictorInfo {
                    task: p.task,
                    task_names: p.task_names.clone(),
                    head_hidden: p.head.w1.cols(),
                    teacher_dim: p.projection.weight.rows(),
                }),
                tensors: entries,
            },
            tensors: crate::distill::flatten(p),
        }
    }

    fn check_kind(&self, expected: Kind) -> Result<(), CheckpointError> {
        if self.manifest.kind != expected {
            return Err(CheckpointError::WrongKind {
                expected,
                found: self.manifest.kind,
            });
        }
        if self.manifest.dims.first() != Some(&self.manifest.vocab.total_dim()) {
            return Err(CheckpointError::VocabMismatch(format!(
                "encoder input {:?} vs vocabulary width {}",
                self.manifest.dims.first(),
                self.manifest.vocab.total_dim()
            )));
        }
        Ok(())
    }

    pub fn into_teacher(self) -> Result<(EncoderParams, FeatureVocab), CheckpointError> {
        self.check_kind(Kind::Teacher)?;
        let spec = self.manifest.encoder_spec();
        let params =
            EncoderParams::from_weights(spec, self.tensors).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        Ok((params, self.manifest.vocab))
    }

    pub fn into_predictor(self) -> Result<(Predictor, FeatureVocab), CheckpointError> {
        self.check_kind(Kind::Predictor)?;
        let info = self
            .manifest
            .predictor
            .clone()
            .ok_or_else(|| CheckpointError::Manifest("predictor section missing".into()))?;
        let spec = self.manifest.encoder_spec();
        let n = spec.tensor_layout().len();
        if self.tensors.len() != n + 6 {
            return Err(CheckpointError::Manifest(format!(
                "expected {} tensors, found {}",
                n + 6,
                self.tensors.len()
            )));
        }
        let mut tensors = self.tensors;
        let rest = tensors.split_off(n);
        let student =
            EncoderParams::from_weights(spec, tensors).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut rest = rest.into_iter();
        let mut next = || rest.next().expect("length checked");
        let head = Head {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let projection = TeacherProjection {
            weight: next(),
            bias: next(),
        };
        let d = student.output_dim();
        let t = info.task_names.len();
        let h = info.head_hidden;
        let expected = [
            (&head.w1, (d, h)),
            (&head.b1, (1, h)),
            (&head.w2, (h, t)),
            (&head.b2, (1, t)),
            (&projection.weight, (info.teacher_dim, d)),
            (&projection.bias, (1, d)),
        ];
        if let Some((tensor, shape)) = expected.iter().find(|(x, s)| x.shape() != *s) {
            return Err(CheckpointError::Manifest(format!(
                "tensor shape {:?}, expected {:?}",
                tensor.shape(),
                shape
            )));
        }
        Ok((
            Predictor {
                task: info.task,
                task_names: info.task_names,
                student,
                head,
                projection,
            },
            self.manifest.vocab,
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        if self.tensors.len() != self.manifest.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&self.manifest.tensors)
                .any(|(t, e)| [t.rows(), t.cols()] != e.shape)
        {
            return Err(CheckpointError::Manifest("tensors disagree with manifest".into()));
        }
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let len = u32::try_from(manifest.len()).map_err(|_| CheckpointError::Manifest("manifest too large".into()))?;
        let mut out = Vec::with_capacity(10 + manifest.len() + self.manifest.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header = MAGIC.len() + 4;
        if bytes.len() < header {
            return Err(CheckpointError::Truncated {
                expected: header,
                actual: bytes.len(),
            });
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        if bytes.len() < header + len {
            return Err(CheckpointError::Truncated {
                expected: header + len,
                actual: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[header..header + len])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let start = header + len;
        let expected = start + manifest.payload_len();
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(CheckpointError::TrailingBytes(bytes.len() - expected));
        }
        let mut offset = start;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            let data = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += n * 8;
            tensors.push(Tensor::new(e.shape[0], e.shape[1], data).expect("shape from manifest"));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Writes to a temporary file in the target directory, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
