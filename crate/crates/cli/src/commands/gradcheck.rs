use std::io::Write;
use std::path::PathBuf;

use anyhow::anyhow;
use crisp_core::gradcheck::{check_objective, GradcheckConfig, LossKind};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{config_path_for, to_pretty_json, write_resolved};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckCmdConfig {
    pub objectives: Vec<LossKind>,
    pub check: GradcheckConfig,
    /// Test hook: shifts one analytical gradient entry by this fraction of
    /// the gradient norm, which must make the check fail.
    pub corrupt_gradient: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for GradcheckCmdConfig {
    fn default() -> Self {
        Self {
            objectives: LossKind::ALL.to_vec(),
            check: GradcheckConfig::default(),
            corrupt_gradient: None,
            out: None,
        }
    }
}

pub fn run(cfg: &GradcheckCmdConfig, out: &mut dyn Write) -> CliResult<()> {
    if cfg.objectives.is_empty() {
        return Err(CliError::config("`objectives` must not be empty"));
    }
    cfg.check.validate()?;
    let results = cfg
        .objectives
        .iter()
        .map(|&k| check_objective(k, &cfg.check, cfg.corrupt_gradient))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = results.iter().all(|r| r.passed);
    let report = json!({ "passed": passed, "objectives": results });
    if let Some(path) = &cfg.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, to_pretty_json(&report)?)?;
        write_resolved(&config_path_for(path), cfg)?;
    }
    writeln!(out, "{report}")?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<String> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| format!("{} (worst relative error {:e})", r.objective, r.worst_relative_error))
            .collect();
        Err(anyhow!("gradient check failed: {}", failed.join(", ")).into())
    }
}
