//! Turning a corpus plus split manifest into model inputs.

use std::collections::BTreeMap;

use anyhow::{anyhow, Context};
use crisp_core::split::{Split, SplitManifest};
use crisp_core::train::pretrain::aerial_inputs;
use crisp_core::train::AerialCrop;
use crisp_core::{FrequencyBin, SynthCorpus};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Which inputs a supervised model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewChoice {
    #[default]
    Ground,
    Aerial,
    Moe,
}

/// Dense class indices over a manifest's class universe.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    pub classes: Vec<u32>,
    index: BTreeMap<u32, usize>,
}

impl LabelSpace {
    pub fn from_manifest(m: &SplitManifest) -> Self {
        let classes: Vec<u32> = m.class_universe.iter().copied().collect();
        let index = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Self { classes, index }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dense(&self, class: u32) -> Option<usize> {
        self.index.get(&class).copied()
    }

    /// Frequency bins keyed by dense index.
    pub fn bins(&self, m: &SplitManifest) -> BTreeMap<usize, FrequencyBin> {
        let bins = crisp_core::bin_by_frequency(&m.labeled_class_counts());
        bins.bin_of
            .iter()
            .filter_map(|(c, b)| Some((self.dense(*c)?, *b)))
            .collect()
    }
}

/// Labeled samples: one per ground image for ground and fused views, one per
/// observation for the aerial view.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub ground_rows: Vec<usize>,
    pub obs: Vec<usize>,
    pub y: Vec<usize>,
    pub groups: Vec<i64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn ground_x(&self, corpus: &SynthCorpus) -> Array2<f64> {
        corpus.ground.data.select(Axis(0), &self.ground_rows)
    }

    pub fn aerial_x(&self, corpus: &SynthCorpus, crop: Option<AerialCrop>) -> CliResult<Array2<f64>> {
        Ok(aerial_inputs(corpus.aerial.data.view(), &self.obs, crop, None)?)
    }
}

/// Samples for the given observation ids, skipping ids whose class lies
/// outside the label space.
pub fn gather<'a>(
    corpus: &SynthCorpus,
    manifest: &SplitManifest,
    labels: &LabelSpace,
    ids: impl IntoIterator<Item = &'a String>,
    view: ViewChoice,
) -> CliResult<Samples> {
    let index = corpus.index_of();
    let rows_by_obs = corpus.ground_rows_by_obs();
    let mut s = Samples::default();
    for id in ids {
        let &o = index
            .get(id.as_str())
            .ok_or_else(|| anyhow!("manifest observation `{id}` is not in the corpus"))?;
        let Some(y) = manifest.labels.get(id).and_then(|c| labels.dense(*c)) else {
            continue;
        };
        let group = corpus.observations[o].group_id;
        match view {
            ViewChoice::Aerial => {
                s.obs.push(o);
                s.y.push(y);
                s.groups.push(group);
            }
            ViewChoice::Ground | ViewChoice::Moe => {
                for &r in &rows_by_obs[o] {
                    s.ground_rows.push(r);
                    s.obs.push(o);
                    s.y.push(y);
                    s.groups.push(group);
                }
            }
        }
    }
    Ok(s)
}

pub fn split_samples(
    corpus: &SynthCorpus,
    manifest: &SplitManifest,
    labels: &LabelSpace,
    split: Split,
    view: ViewChoice,
) -> CliResult<Samples> {
    gather(corpus, manifest, labels, manifest.ids_in(split), view)
}

pub fn lambda_samples(
    corpus: &SynthCorpus,
    manifest: &SplitManifest,
    labels: &LabelSpace,
    lambda: f64,
    view: ViewChoice,
) -> CliResult<Samples> {
    let key = crisp_core::split::lambda_key(lambda);
    let subset = manifest.lambda_subsets.get(&key).ok_or_else(|| {
        CliError::config(format!(
            "manifest has no subset for lambda {lambda} (available: {})",
            manifest.lambda_subsets.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    gather(corpus, manifest, labels, subset, view)
}

pub fn parse_split(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::config(format!("unknown split `{other}` (train, val, test)"))),
    }
}

pub fn read_corpus(dir: &std::path::Path) -> CliResult<SynthCorpus> {
    Ok(SynthCorpus::read_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))?)
}

pub fn read_manifest(path: &std::path::Path) -> CliResult<SplitManifest> {
    Ok(SplitManifest::read_json(path).with_context(|| format!("reading manifest {}", path.display()))?)
}
