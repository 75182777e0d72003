//! Small MLP encoders and the optimisation recipe around them.

pub mod checkpoint;
pub mod classify;
pub mod mlp;
pub mod moe;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{Checkpoint, RngState, ViewKind};
pub use classify::{
    finetune, label_smoothing_ce, linear_probe, Classifier, FinetuneConfig, FinetuneOutput, LabeledSet, ProbeOutput,
};
pub use mlp::ToyEncoder;
pub use moe::{finetune_moe, moe_backward, moe_forward, MoEClassifier, MoEHead, PairedLabeledSet};
pub use optim::{cosine_lr, SgdConfig, SgdMomentum};
pub use pretrain::{pretrain, AerialCrop, EncoderPair, Objective, PretrainConfig, PretrainOutput};
