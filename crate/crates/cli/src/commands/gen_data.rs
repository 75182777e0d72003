use std::io::Write;
use std::path::PathBuf;

use crisp_core::{corpus_stats, generate, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::config::{require_path, write_resolved};
use crate::error::CliResult;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
}

pub fn run(cfg: &GenDataConfig, out: &mut dyn Write) -> CliResult<()> {
    require_path(&cfg.out_dir, "out_dir")?;
    cfg.synth.validate()?;
    let corpus = generate(&cfg.synth)?;
    corpus.write_dir(&cfg.out_dir)?;
    write_resolved(&cfg.out_dir.join("gen-data.config.json"), cfg)?;
    writeln!(out, "{}", serde_json::to_string(&corpus_stats(&corpus)?)?)?;
    Ok(())
}
