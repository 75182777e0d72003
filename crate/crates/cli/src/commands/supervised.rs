//! `finetune` and `probe`: fit a classifier on a labeled subset.

use std::io::Write;
use std::path::PathBuf;

use crisp_core::split::Split;
use crisp_core::train::checkpoint::{classifier_checkpoint, moe_checkpoint, Checkpoint};
use crisp_core::train::{
    finetune, finetune_moe, AerialCrop, FinetuneConfig, LabeledSet, PairedLabeledSet, ToyEncoder, ViewKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{config_path_for, require_path, write_resolved};
use crate::data::{lambda_samples, read_corpus, read_manifest, split_samples, LabelSpace, ViewChoice};
use crate::error::{CliError, CliResult};
use crate::log::EpochSink;

/// Encoder shape used when no pretrained checkpoint is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub corpus_dir: PathBuf,
    pub manifest: PathBuf,
    /// Pretrained encoder-pair checkpoint; random initialisation when absent.
    pub encoder: Option<PathBuf>,
    pub view: ViewChoice,
    pub lambda: f64,
    /// Classifier checkpoint path.
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub init: InitConfig,
    /// Defaults to the fine-tuning or probing recipe of the command.
    pub train: Option<FinetuneConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Finetune,
    Probe,
}

impl SupervisedConfig {
    /// Fills in the command's training recipe.
    pub fn resolve(mut self, mode: Mode) -> Self {
        if self.lambda == 0.0 {
            self.lambda = 0.01;
        }
        let mut train = self.train.unwrap_or(match mode {
            Mode::Finetune => FinetuneConfig::default(),
            Mode::Probe => FinetuneConfig::probe(),
        });
        if mode == Mode::Probe {
            train.freeze_encoder = true;
        }
        self.train = Some(train);
        self
    }
}

struct Encoders {
    gl: ToyEncoder,
    a: ToyEncoder,
    crop: Option<AerialCrop>,
}

fn load_encoders(cfg: &SupervisedConfig, ground_dim: usize, aerial_dim: usize) -> CliResult<Encoders> {
    if let Some(path) = &cfg.encoder {
        let pair = Checkpoint::read(path)?.encoder_pair()?;
        return Ok(Encoders {
            gl: pair.gl,
            a: pair.a,
            crop: pair.aerial_crop,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init.seed);
    rng.set_stream(1);
    let dims = |input: usize| [input, cfg.init.hidden_dim, cfg.init.embed_dim];
    Ok(Encoders {
        gl: ToyEncoder::new(&dims(ground_dim), &mut rng)?,
        a: ToyEncoder::new(&dims(aerial_dim), &mut rng)?,
        crop: None,
    })
}

pub fn run(cfg: &SupervisedConfig, out: &mut dyn Write) -> CliResult<()> {
    require_path(&cfg.corpus_dir, "corpus_dir")?;
    require_path(&cfg.manifest, "manifest")?;
    require_path(&cfg.out, "out")?;
    let train_cfg = cfg.train.ok_or_else(|| CliError::config("training recipe unresolved"))?;
    train_cfg.validate()?;

    let corpus = read_corpus(&cfg.corpus_dir)?;
    let manifest = read_manifest(&cfg.manifest)?;
    let labels = LabelSpace::from_manifest(&manifest);
    let train = lambda_samples(&corpus, &manifest, &labels, cfg.lambda, cfg.view)?;
    let val = split_samples(&corpus, &manifest, &labels, Split::Val, cfg.view)?;
    if train.is_empty() {
        return Err(anyhow::anyhow!("no labeled training samples in the class universe").into());
    }
    let enc = load_encoders(cfg, corpus.ground.dim(), corpus.aerial.dim())?;
    write_resolved(&config_path_for(&cfg.out), cfg)?;

    let (checkpoint, history, best_epoch) = match cfg.view {
        ViewChoice::Ground | ViewChoice::Aerial => {
            let (view, crop, encoder, x_train, x_val) = if cfg.view == ViewChoice::Ground {
                (ViewKind::Ground, None, &enc.gl, train.ground_x(&corpus), val.ground_x(&corpus))
            } else {
                (
                    ViewKind::Aerial,
                    enc.crop,
                    &enc.a,
                    train.aerial_x(&corpus, enc.crop)?,
                    val.aerial_x(&corpus, enc.crop)?,
                )
            };
            let val_set = match val.is_empty() {
                true => None,
                false => Some(LabeledSet::new(x_val.view(), &val.y)?),
            };
            let r = finetune(
                encoder,
                LabeledSet::new(x_train.view(), &train.y)?,
                val_set,
                labels.len(),
                &train_cfg,
            )?;
            let ckpt = classifier_checkpoint(&r.classifier, view, crop, r.steps, r.rng);
            (ckpt, r.history, r.best_epoch)
        }
        ViewChoice::Moe => {
            let (xg, xa) = (train.ground_x(&corpus), train.aerial_x(&corpus, enc.crop)?);
            let (vg, va) = (val.ground_x(&corpus), val.aerial_x(&corpus, enc.crop)?);
            let val_set = match val.is_empty() {
                true => None,
                false => Some(PairedLabeledSet::new(vg.view(), va.view(), &val.y)?),
            };
            let r = finetune_moe(
                &enc.gl,
                &enc.a,
                PairedLabeledSet::new(xg.view(), xa.view(), &train.y)?,
                val_set,
                labels.len(),
                &train_cfg,
            )?;
            let ckpt = moe_checkpoint(&r.classifier, enc.crop, r.steps, r.rng);
            (ckpt, r.history, r.best_epoch)
        }
    };

    let mut sink = EpochSink::open(cfg.log.as_deref())?;
    for line in &history {
        sink.write(line, out)?;
    }
    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint.write(&cfg.out)?;
    let best = history.iter().find(|h| h.epoch == best_epoch);
    let summary = json!({
        "checkpoint": cfg.out,
        "view": cfg.view,
        "classes": labels.len(),
        "train_samples": train.len(),
        "val_samples": val.len(),
        "best_epoch": best_epoch,
        "train_top1": best.map(|h| h.train_top1),
        "val_top1": best.and_then(|h| h.val_top1),
    });
    writeln!(out, "{summary}")?;
    Ok(())
}
