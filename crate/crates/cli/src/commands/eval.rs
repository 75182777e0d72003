use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use crisp_core::metrics::{per_class_topk, per_group_topk};
use crisp_core::train::checkpoint::{Architecture, Checkpoint};
use crisp_core::train::ViewKind;
use crisp_core::{
    binned_macro_accuracy, eco_accuracy, emit_report, topk_accuracy, topk_macro_accuracy, FrequencyBin, MetricReport,
    PredictionSet, ReportFormat,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{config_path_for, write_resolved};
use crate::data::{parse_split, read_corpus, read_manifest, split_samples, LabelSpace, ViewChoice};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub corpus_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Classifier checkpoint scored on `splits`.
    pub classifier: Option<PathBuf>,
    /// Precomputed predictions, scored as the `predictions` column.
    pub predictions: Option<PathBuf>,
    pub splits: Vec<String>,
    pub top_k: Vec<usize>,
    pub out: Option<PathBuf>,
    pub format: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            manifest: None,
            classifier: None,
            predictions: None,
            splits: vec!["val".into(), "test".into()],
            top_k: vec![1, 5],
            out: None,
            format: "json".into(),
        }
    }
}

/// Scores per row with the true class index, optionally with group ids
/// and class frequency bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub scores: Vec<Vec<f64>>,
    pub true_class: Vec<usize>,
    #[serde(default)]
    pub group_id: Option<Vec<i64>>,
    #[serde(default)]
    pub class_bins: Option<BTreeMap<usize, FrequencyBin>>,
}

impl PredictionFile {
    pub fn into_prediction_set(self) -> CliResult<PredictionSet> {
        let cols = self.scores.first().map_or(0, Vec::len);
        if self.scores.iter().any(|r| r.len() != cols) {
            return Err(anyhow!("score rows have unequal lengths").into());
        }
        let flat: Vec<f64> = self.scores.into_iter().flatten().collect();
        let scores = Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(|e| anyhow!(e))?;
        let mut p = PredictionSet::new(scores, self.true_class)?;
        if let Some(g) = self.group_id {
            p = p.with_groups(g)?;
        }
        if let Some(b) = self.class_bins {
            p = p.with_bins(b);
        }
        Ok(p)
    }
}

/// Adds every applicable metric for one column. `class_names` maps dense
/// indices back to class ids in per-class rows.
pub fn add_metrics(
    report: &mut MetricReport,
    column: &str,
    p: &PredictionSet,
    top_k: &[usize],
    class_names: Option<&[u32]>,
) -> CliResult<()> {
    for &k in top_k {
        report.insert(format!("top{k}"), column, Some(topk_accuracy(p, k)?));
        report.insert(format!("top{k}_macro"), column, Some(topk_macro_accuracy(p, k)?));
        if p.groups().is_some() {
            report.insert(format!("top{k}_eco"), column, Some(eco_accuracy(p, k)?));
        }
        if let Ok(binned) = binned_macro_accuracy(p, k) {
            for (name, bin) in [
                ("frequent", FrequencyBin::Frequent),
                ("common", FrequencyBin::Common),
                ("rare", FrequencyBin::Rare),
            ] {
                report.insert(format!("top{k}_macro_{name}"), column, binned.get(bin));
            }
        }
    }
    if let Some(&k) = top_k.first() {
        for (c, acc) in per_class_topk(p, k)? {
            let name = class_names.and_then(|n| n.get(c)).map_or(c as u64, |&id| id as u64);
            report.insert(format!("top{k}_class/{name:05}"), column, Some(acc));
        }
        if p.groups().is_some() {
            for (g, acc) in per_group_topk(p, k)? {
                report.insert(format!("top{k}_group/{g}"), column, Some(acc));
            }
        }
    }
    Ok(())
}

fn classifier_report(cfg: &EvalConfig, path: &Path, report: &mut MetricReport) -> CliResult<()> {
    let corpus_dir = cfg
        .corpus_dir
        .as_ref()
        .ok_or_else(|| CliError::config("`corpus_dir` is required with `classifier`"))?;
    let manifest_path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::config("`manifest` is required with `classifier`"))?;
    let splits = cfg.splits.iter().map(|s| parse_split(s)).collect::<CliResult<Vec<_>>>()?;
    let corpus = read_corpus(corpus_dir)?;
    let manifest = read_manifest(manifest_path)?;
    let labels = LabelSpace::from_manifest(&manifest);
    let bins = labels.bins(&manifest);
    let ckpt = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    let view = match &ckpt.header.architecture {
        Architecture::Classifier { view: ViewKind::Ground, .. } => ViewChoice::Ground,
        Architecture::Classifier { view: ViewKind::Aerial, .. } => ViewChoice::Aerial,
        Architecture::MoeClassifier { .. } => ViewChoice::Moe,
        Architecture::EncoderPair { .. } => return Err(anyhow!("{} is not a classifier", path.display()).into()),
    };
    for split in splits {
        let s = split_samples(&corpus, &manifest, &labels, split, view)?;
        if s.is_empty() {
            return Err(anyhow!("no labeled samples in the {split} split").into());
        }
        let logits = match view {
            ViewChoice::Moe => {
                let (crop, model) = ckpt.moe_classifier()?;
                model.logits(s.ground_x(&corpus).view(), s.aerial_x(&corpus, crop)?.view())?
            }
            ViewChoice::Ground => ckpt.classifier()?.2.logits(s.ground_x(&corpus).view())?,
            ViewChoice::Aerial => {
                let (_, crop, model) = ckpt.classifier()?;
                model.logits(s.aerial_x(&corpus, crop)?.view())?
            }
        };
        if logits.ncols() != labels.len() {
            return Err(anyhow!(
                "classifier has {} outputs but the manifest has {} classes",
                logits.ncols(),
                labels.len()
            )
            .into());
        }
        let p = PredictionSet::new(logits, s.y)?
            .with_groups(s.groups)?
            .with_bins(bins.clone());
        add_metrics(report, &split.to_string(), &p, &cfg.top_k, Some(&labels.classes))?;
    }
    Ok(())
}

pub fn run(cfg: &EvalConfig, out: &mut dyn Write) -> CliResult<()> {
    let format = ReportFormat::from_str(&cfg.format).map_err(|e| CliError::config(e.to_string()))?;
    if cfg.top_k.is_empty() || cfg.top_k.contains(&0) {
        return Err(CliError::config("top_k must be a nonempty list of positive integers"));
    }
    if cfg.classifier.is_none() && cfg.predictions.is_none() {
        return Err(CliError::config("one of `classifier` or `predictions` is required"));
    }
    let mut report = MetricReport::new();
    if let Some(path) = &cfg.predictions {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: PredictionFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        add_metrics(&mut report, "predictions", &file.into_prediction_set()?, &cfg.top_k, None)?;
    }
    if let Some(path) = &cfg.classifier {
        classifier_report(cfg, path, &mut report)?;
    }
    let mut text = emit_report(&report, format)?;
    if !text.ends_with('\n') {
        text.push('\n');
    }
    if let Some(path) = &cfg.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &text)?;
        write_resolved(&config_path_for(path), cfg)?;
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}
