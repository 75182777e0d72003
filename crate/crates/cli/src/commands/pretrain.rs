use std::io::Write;
use std::path::PathBuf;

use anyhow::anyhow;
use crisp_core::split::Split;
use crisp_core::train::checkpoint::encoder_pair_checkpoint;
use crisp_core::train::pretrain::EpochLog;
use crisp_core::train::{pretrain, Objective, PretrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{config_path_for, require_path, write_resolved};
use crate::data::{read_corpus, read_manifest};
use crate::error::CliResult;
use crate::log::EpochSink;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainCmdConfig {
    pub corpus_dir: PathBuf,
    /// Restricts training to train-split observations when given.
    pub manifest: Option<PathBuf>,
    /// Checkpoint path.
    pub out: PathBuf,
    /// Epoch log file; standard output when absent.
    pub log: Option<PathBuf>,
    pub train: PretrainConfig,
}

pub fn run(cfg: &PretrainCmdConfig, out: &mut dyn Write) -> CliResult<()> {
    require_path(&cfg.corpus_dir, "corpus_dir")?;
    require_path(&cfg.out, "out")?;
    cfg.train.validate()?;
    let corpus = read_corpus(&cfg.corpus_dir)?;
    let obs: Vec<usize> = match &cfg.manifest {
        Some(path) => {
            let manifest = read_manifest(path)?;
            let index = corpus.index_of();
            manifest
                .ids_in(Split::Train)
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| anyhow!("manifest observation `{id}` is not in the corpus"))
                })
                .collect::<Result<_, _>>()?
        }
        None => (0..corpus.observations.len()).collect(),
    };
    write_resolved(&config_path_for(&cfg.out), cfg)?;

    let result = pretrain(&corpus, &obs, &cfg.train)?;
    let mut sink = EpochSink::open(cfg.log.as_deref())?;
    let start = EpochLog {
        epoch: 0,
        loss: result.initial_loss,
        lr: cfg.train.lr,
        sigma_w: (cfg.train.objective == Objective::Par).then_some(0.5),
        wall_time_s: 0.0,
    };
    for line in std::iter::once(&start).chain(&result.history) {
        sink.write(line, out)?;
    }

    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    encoder_pair_checkpoint(&result.encoders, result.steps, result.rng.clone()).write(&cfg.out)?;
    let summary = json!({
        "checkpoint": cfg.out,
        "objective": cfg.train.objective,
        "observations": obs.len(),
        "steps": result.steps,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
    });
    writeln!(out, "{summary}")?;
    Ok(())
}
