//! Checkpoint files: one line of compact JSON (architecture, step, generator
//! state, tensor directory), a newline, then every tensor as little-endian
//! float64 values in directory order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classify::Classifier;
use super::mlp::ToyEncoder;
use super::moe::{MoEClassifier, MoEHead};
use super::pretrain::{AerialCrop, EncoderPair, Objective};
use crate::error::{CrispError, Result};
use crate::loss::LossWeight;
use crate::synth::decode_f64_le;

pub const CHECKPOINT_FORMAT: &str = "crisp-checkpoint/1";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position, in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CrispError::Format(format!("bad word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Which input a single-view classifier reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Ground,
    Aerial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    EncoderPair {
        objective: Objective,
        gl_dims: Vec<usize>,
        a_dims: Vec<usize>,
        aerial_crop: Option<AerialCrop>,
        weighted: bool,
    },
    Classifier {
        view: ViewKind,
        encoder_dims: Vec<usize>,
        n_classes: usize,
        aerial_crop: Option<AerialCrop>,
    },
    MoeClassifier {
        gl_dims: Vec<usize>,
        a_dims: Vec<usize>,
        n_classes: usize,
        aerial_crop: Option<AerialCrop>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: Architecture,
    pub step: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(architecture: Architecture, step: usize, rng: RngState, tensors: Vec<(&str, Vec<f64>)>) -> Self {
        let (entries, data) = tensors
            .into_iter()
            .map(|(name, v)| {
                (
                    TensorEntry {
                        name: name.to_string(),
                        len: v.len(),
                    },
                    v,
                )
            })
            .unzip();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                architecture,
                step,
                rng,
                tensors: entries,
            },
            tensors: data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CrispError::Format("checkpoint has no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CrispError::Format(format!("unsupported checkpoint format `{}`", header.format)));
        }
        let values = decode_f64_le(&bytes[split + 1..])?;
        let expected: usize = header.tensors.iter().map(|t| t.len).sum();
        if values.len() != expected {
            return Err(CrispError::Format(format!(
                "checkpoint blob holds {} values, directory lists {expected}",
                values.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut offset = 0;
        for t in &header.tensors {
            tensors.push(values[offset..offset + t.len].to_vec());
            offset += t.len;
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.tensors[i].as_slice())
            .ok_or_else(|| CrispError::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn encoder_pair(&self) -> Result<EncoderPair> {
        match &self.header.architecture {
            Architecture::EncoderPair {
                objective,
                gl_dims,
                a_dims,
                aerial_crop,
                weighted,
            } => Ok(EncoderPair {
                objective: *objective,
                gl: ToyEncoder::from_params(gl_dims, self.tensor("gl")?.to_vec())?,
                a: ToyEncoder::from_params(a_dims, self.tensor("a")?.to_vec())?,
                aerial_crop: *aerial_crop,
                weight: if *weighted {
                    let w = self.tensor("w")?;
                    Some(LossWeight {
                        w: *w.first().ok_or_else(|| CrispError::Format("empty weight tensor".into()))?,
                    })
                } else {
                    None
                },
            }),
            other => Err(kind_error("encoder_pair", other)),
        }
    }

    pub fn classifier(&self) -> Result<(ViewKind, Option<AerialCrop>, Classifier)> {
        match &self.header.architecture {
            Architecture::Classifier {
                view,
                encoder_dims,
                n_classes,
                aerial_crop,
            } => Ok((
                *view,
                *aerial_crop,
                Classifier {
                    encoder: ToyEncoder::from_params(encoder_dims, self.tensor("encoder")?.to_vec())?,
                    head: ToyEncoder::from_params(
                        &[*encoder_dims.last().unwrap_or(&0), *n_classes],
                        self.tensor("head")?.to_vec(),
                    )?,
                },
            )),
            other => Err(kind_error("classifier", other)),
        }
    }

    pub fn moe_classifier(&self) -> Result<(Option<AerialCrop>, MoEClassifier)> {
        match &self.header.architecture {
            Architecture::MoeClassifier {
                gl_dims,
                a_dims,
                n_classes,
                aerial_crop,
            } => {
                let gl_encoder = ToyEncoder::from_params(gl_dims, self.tensor("gl")?.to_vec())?;
                let a_encoder = ToyEncoder::from_params(a_dims, self.tensor("a")?.to_vec())?;
                let head = MoEHead {
                    proj_gl: ToyEncoder::from_params(
                        &[gl_encoder.embed_dim(), *n_classes],
                        self.tensor("proj_gl")?.to_vec(),
                    )?,
                    proj_a: ToyEncoder::from_params(&[a_encoder.embed_dim(), *n_classes], self.tensor("proj_a")?.to_vec())?,
                    gate: *self
                        .tensor("gate")?
                        .first()
                        .ok_or_else(|| CrispError::Format("empty gate tensor".into()))?,
                };
                Ok((
                    *aerial_crop,
                    MoEClassifier {
                        gl_encoder,
                        a_encoder,
                        head,
                    },
                ))
            }
            other => Err(kind_error("moe_classifier", other)),
        }
    }
}

fn kind_error(wanted: &str, found: &Architecture) -> CrispError {
    let found = match found {
        Architecture::EncoderPair { .. } => "encoder_pair",
        Architecture::Classifier { .. } => "classifier",
        Architecture::MoeClassifier { .. } => "moe_classifier",
    };
    CrispError::Format(format!("expected a {wanted} checkpoint, found {found}"))
}

pub fn encoder_pair_checkpoint(pair: &EncoderPair, step: usize, rng: RngState) -> Checkpoint {
    let mut tensors = vec![("gl", pair.gl.params().to_vec()), ("a", pair.a.params().to_vec())];
    if let Some(w) = pair.weight {
        tensors.push(("w", vec![w.w]));
    }
    Checkpoint::new(
        Architecture::EncoderPair {
            objective: pair.objective,
            gl_dims: pair.gl.dims().to_vec(),
            a_dims: pair.a.dims().to_vec(),
            aerial_crop: pair.aerial_crop,
            weighted: pair.weight.is_some(),
        },
        step,
        rng,
        tensors,
    )
}

pub fn classifier_checkpoint(
    classifier: &Classifier,
    view: ViewKind,
    aerial_crop: Option<AerialCrop>,
    step: usize,
    rng: RngState,
) -> Checkpoint {
    Checkpoint::new(
        Architecture::Classifier {
            view,
            encoder_dims: classifier.encoder.dims().to_vec(),
            n_classes: classifier.n_classes(),
            aerial_crop,
        },
        step,
        rng,
        vec![
            ("encoder", classifier.encoder.params().to_vec()),
            ("head", classifier.head.params().to_vec()),
        ],
    )
}

pub fn moe_checkpoint(model: &MoEClassifier, aerial_crop: Option<AerialCrop>, step: usize, rng: RngState) -> Checkpoint {
    Checkpoint::new(
        Architecture::MoeClassifier {
            gl_dims: model.gl_encoder.dims().to_vec(),
            a_dims: model.a_encoder.dims().to_vec(),
            n_classes: model.head.n_classes(),
            aerial_crop,
        },
        step,
        rng,
        vec![
            ("gl", model.gl_encoder.params().to_vec()),
            ("a", model.a_encoder.params().to_vec()),
            ("proj_gl", model.head.proj_gl.params().to_vec()),
            ("proj_a", model.head.proj_a.params().to_vec()),
            ("gate", vec![model.head.gate]),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn pair() -> EncoderPair {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        EncoderPair {
            objective: Objective::Par,
            gl: ToyEncoder::new(&[5, 4, 3], &mut rng).unwrap(),
            a: ToyEncoder::new(&[6, 4, 3], &mut rng).unwrap(),
            aerial_crop: None,
            weight: Some(LossWeight { w: -0.125 }),
        }
    }

    #[test]
    fn encoder_pair_round_trip() {
        let p = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(2);
        let _: u64 = rng.random();
        let ck = encoder_pair_checkpoint(&p, 17, RngState::capture(9, &rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encoder_pair().unwrap(), p);
        assert_eq!(back.header.step, 17);
        let mut restored = back.header.rng.restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
        assert!(back.classifier().is_err());
    }

    #[test]
    fn header_is_one_json_line() {
        let bytes = encoder_pair_checkpoint(&pair(), 0, RngState::capture(0, &ChaCha8Rng::seed_from_u64(0)))
            .to_bytes()
            .unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["architecture"]["kind"], "encoder_pair");
        assert_eq!((bytes.len() - nl - 1) % 8, 0);
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut bytes = encoder_pair_checkpoint(&pair(), 0, RngState::capture(0, &ChaCha8Rng::seed_from_u64(0)))
            .to_bytes()
            .unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
