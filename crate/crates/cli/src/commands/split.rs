use std::io::Write;
use std::path::PathBuf;

use crisp_core::split::{
    assign_blocks, occupied_blocks, read_observations_jsonl, SplitFractions, DEFAULT_LAMBDAS, DEFAULT_PROXIMITY_M,
};
use crisp_core::synth::OBSERVATIONS_FILE;
use crisp_core::build_split;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{config_path_for, require_path, write_resolved};
use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub corpus_dir: PathBuf,
    /// Manifest path.
    pub out: PathBuf,
    pub cell_deg: f64,
    pub proximity_m: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            corpus_dir: PathBuf::new(),
            out: PathBuf::new(),
            cell_deg: 0.1,
            proximity_m: DEFAULT_PROXIMITY_M,
            test_fraction: f.test,
            val_fraction: f.val,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            seed: 0,
        }
    }
}

pub fn run(cfg: &SplitConfig, out: &mut dyn Write) -> CliResult<()> {
    require_path(&cfg.corpus_dir, "corpus_dir")?;
    require_path(&cfg.out, "out")?;
    let observations = read_observations_jsonl(&cfg.corpus_dir.join(OBSERVATIONS_FILE))?;
    let blocks = occupied_blocks(&observations, cfg.cell_deg)?;
    let fractions = SplitFractions {
        test: cfg.test_fraction,
        val: cfg.val_fraction,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let assignment = assign_blocks(&blocks, fractions, &mut rng)?;
    let mut manifest = build_split(&observations, &assignment, cfg.cell_deg, cfg.proximity_m)?;
    let mut subset_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    subset_rng.set_stream(1);
    manifest.add_lambda_subsets(&cfg.lambdas, &mut subset_rng)?;

    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    manifest.write_json(&cfg.out)?;
    write_resolved(&config_path_for(&cfg.out), cfg)?;
    let subsets: serde_json::Map<String, serde_json::Value> = manifest
        .lambda_subsets
        .iter()
        .map(|(k, v)| (k.clone(), json!(v.len())))
        .collect();
    let line = json!({
        "manifest": cfg.out,
        "labeled_train": manifest.labeled_train.len(),
        "classes": manifest.class_universe.len(),
        "lambda_subsets": subsets,
        "summary": manifest.summary,
    });
    writeln!(out, "{line}")?;
    Ok(())
}
