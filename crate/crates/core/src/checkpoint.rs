//! Concept checkpoints and their on-disk archive.
//!
//! Archive layout (all integers little-endian `u32`):
//!
//! ```text
//! magic        8 bytes  "CINSCKPT"
//! version      u32      1
//! manifest     u32 length + UTF-8 JSON
//! tensors      u32 count, then per tensor (sorted by name):
//!                u32 name length + UTF-8 name
//!                u32 rank + rank x u32 dims
//!                prod(dims) x f32 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{LoraFactors, LoraSet};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mat::Matrix;
use crate::optim::AdamConfig;

pub const MAGIC: &[u8; 8] = b"CINSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self::from_f64(vec![m.rows, m.cols], &m.data)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [r, c] => Ok(Matrix::from_vec(r, c, self.to_f64())),
            _ => Err(Error::Format(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
}

/// Which loss terms drive the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerms {
    /// Unmasked reconstruction over the whole latent.
    Baseline,
    Fg,
    FgBg,
    FgBgSm,
}

impl LossTerms {
    pub fn label(self) -> &'static str {
        match self {
            LossTerms::Baseline => "Baseline",
            LossTerms::Fg => "+L_fg",
            LossTerms::FgBg => "+L_fg,L_bg",
            LossTerms::FgBgSm => "+L_fg,L_bg,L_sm",
        }
    }

    pub fn uses_bg(self) -> bool {
        matches!(self, LossTerms::FgBg | LossTerms::FgBgSm)
    }

    pub fn uses_sm(self) -> bool {
        matches!(self, LossTerms::FgBgSm)
    }
}

/// Hyperparameters of one completed stage, as echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub adam: AdamConfig,
    pub seed: u64,
    pub trainable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraRecord {
    pub rank: usize,
    pub targets: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRecord {
    pub seed: u64,
    pub input_size: usize,
    pub patch: usize,
    pub features: usize,
    pub train_vision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub concept_id: String,
    pub class_word: String,
    pub template: String,
    pub backbone_id: String,
    pub schedule_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub lora: Option<LoraRecord>,
    pub encoder: EncoderRecord,
    /// Source image and mask paths as given on the command line.
    #[serde(default)]
    pub source_image: Option<String>,
    #[serde(default)]
    pub source_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptCheckpoint {
    pub concept_id: String,
    pub class_word: String,
    pub embedding: Vec<f32>,
    /// Encoder parameters needed to resume training (`encoder.*`).
    pub encoder: BTreeMap<String, NamedTensor>,
    /// Low-rank factors per target (stage II only).
    pub lora_deltas: Option<LoraSet>,
    pub manifest: Manifest,
}

fn lora_a_name(target: &str) -> String {
    format!("lora.{target}.a")
}

fn lora_b_name(target: &str) -> String {
    format!("lora.{target}.b")
}

impl ConceptCheckpoint {
    pub fn embedding_f64(&self) -> Vec<f64> {
        self.embedding.iter().map(|&v| v as f64).collect()
    }

    pub fn stage(&self) -> Stage {
        if self.lora_deltas.is_some() {
            Stage::Two
        } else {
            Stage::One
        }
    }

    fn tensors(&self) -> BTreeMap<String, NamedTensor> {
        let mut out = self.encoder.clone();
        out.insert(
            "embedding".into(),
            NamedTensor {
                shape: vec![self.embedding.len()],
                data: self.embedding.clone(),
            },
        );
        if let Some(l) = &self.lora_deltas {
            for (name, f) in &l.factors {
                out.insert(lora_a_name(name), NamedTensor::from_matrix(&f.a));
                out.insert(lora_b_name(name), NamedTensor::from_matrix(&f.b));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        push_len(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);
        let tensors = self.tensors();
        push_len(&mut out, tensors.len())?;
        for (name, t) in &tensors {
            push_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_len(&mut out, t.shape.len())?;
            for &d in &t.shape {
                push_len(&mut out, d)?;
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic; not a concept checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| Error::Format(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, NamedTensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_parts(manifest, tensors)
    }

    fn from_parts(manifest: Manifest, mut tensors: BTreeMap<String, NamedTensor>) -> Result<Self> {
        let embedding = tensors
            .remove("embedding")
            .ok_or_else(|| Error::Format("missing `embedding` tensor".into()))?
            .data;
        let lora_deltas = match &manifest.lora {
            None => None,
            Some(rec) => {
                let mut factors = BTreeMap::new();
                for target in &rec.targets {
                    let mut take = |name: String| {
                        tensors
                            .remove(&name)
                            .ok_or_else(|| Error::Format(format!("missing `{name}` tensor")))
                            .and_then(|t| t.to_matrix())
                    };
                    let a = take(lora_a_name(target))?;
                    let b = take(lora_b_name(target))?;
                    factors.insert(target.clone(), LoraFactors { a, b });
                }
                Some(LoraSet {
                    rank: rec.rank,
                    factors,
                })
            }
        };
        if let Some(stray) = tensors.keys().find(|k| !k.starts_with("encoder.")) {
            return Err(Error::Format(format!("unexpected tensor `{stray}`")));
        }
        Ok(Self {
            concept_id: manifest.concept_id.clone(),
            class_word: manifest.class_word.clone(),
            embedding,
            encoder: tensors,
            lora_deltas,
            manifest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn push_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated archive".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_checkpoint(with_lora: bool) -> ConceptCheckpoint {
        let lora = with_lora.then(|| {
            let mut factors = BTreeMap::new();
            factors.insert(
                "unet.attn.q".to_string(),
                LoraFactors {
                    a: Matrix::from_vec(2, 3, vec![0.5, -0.25, 1.0, 2.0, 0.0, -1.0]),
                    b: Matrix::from_vec(2, 2, vec![0.1f32 as f64, 0.0, 0.0, 0.3f32 as f64]),
                },
            );
            LoraSet { rank: 2, factors }
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            concept_id: "face".into(),
            class_word: "face".into(),
            template: "* face".into(),
            backbone_id: "toy".into(),
            schedule_hash: "abc".into(),
            seed: 7,
            stages: vec![],
            lora: lora.as_ref().map(|l| LoraRecord {
                rank: l.rank,
                targets: l.factors.keys().cloned().collect(),
                seed: 0,
            }),
            encoder: EncoderRecord {
                seed: 1,
                input_size: 32,
                patch: 8,
                features: 4,
                train_vision: false,
            },
            source_image: None,
            source_mask: None,
        };
        let mut encoder = BTreeMap::new();
        encoder.insert(
            "encoder.head.bias".to_string(),
            NamedTensor {
                shape: vec![2],
                data: vec![0.25, -0.5],
            },
        );
        ConceptCheckpoint {
            concept_id: "face".into(),
            class_word: "face".into(),
            embedding: vec![0.1, -2.5, 3.75],
            encoder,
            lora_deltas: lora,
            manifest,
        }
    }

    #[test]
    fn bytes_round_trip() {
        for with_lora in [false, true] {
            let ck = sample_checkpoint(with_lora);
            let bytes = ck.to_bytes().unwrap();
            let back = ConceptCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.stage(), if with_lora { Stage::Two } else { Stage::One });
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_checkpoint(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ConceptCheckpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(ConceptCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ConceptCheckpoint::from_bytes(&extra).is_err());
    }
}
