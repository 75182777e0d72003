//! Spatial block holdout protocol: block assignment, proximity and label
//! quality filtering, class intersection, labeled subsets and frequency bins.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::geo::{block_of, BlockId, GeoPoint, ProximityIndex};

/// Val/test observations closer than this to a train observation are dropped.
pub const DEFAULT_PROXIMITY_M: f64 = 256.0;

/// Labeled training fractions offered for fine-tuning.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0025, 0.01, 0.025, 0.05, 0.20];

/// One observation of the input corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub obs_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub class_id: Option<u32>,
    pub research_grade: bool,
    pub species_level: bool,
    pub group_id: i64,
    pub n_ground_views: u32,
}

impl ObservationRecord {
    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.point().validate()?;
        if self.species_level && self.class_id.is_none() {
            return Err(CrispError::Format(format!(
                "observation `{}` is species-level but has no class_id",
                self.obs_id
            )));
        }
        if self.n_ground_views == 0 {
            return Err(CrispError::Format(format!(
                "observation `{}` has no ground views",
                self.obs_id
            )));
        }
        Ok(())
    }

    /// Research grade, identified to species, with a label.
    pub fn is_classification_quality(&self) -> bool {
        self.research_grade && self.species_level && self.class_id.is_some()
    }
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn read_observations_jsonl(path: &Path) -> Result<Vec<ObservationRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObservationRecord = serde_json::from_str(&line).map_err(|e| {
            CrispError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_observations_jsonl(path: &Path, records: &[ObservationRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Fractions of blocks held out; the remainder is train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub test: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            test: 0.125,
            val: 0.125,
        }
    }
}

/// `floor(x + 0.5)` for nonnegative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Randomly designates `round(test * n)` blocks as test and `round(val * n)`
/// as validation; the rest are train.
pub fn assign_blocks<R: Rng + ?Sized>(
    blocks: &BTreeSet<BlockId>,
    fractions: SplitFractions,
    rng: &mut R,
) -> Result<BTreeMap<BlockId, Split>> {
    if blocks.is_empty() {
        return Err(CrispError::EmptyBlockSet);
    }
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(fractions.test) || !ok(fractions.val) || fractions.test + fractions.val >= 1.0 {
        return Err(CrispError::InvalidConfig(format!(
            "split fractions must be in [0, 1) and sum below 1, got {fractions:?}"
        )));
    }
    let n = blocks.len();
    let n_test = round_half_up(fractions.test * n as f64).min(n);
    let n_val = round_half_up(fractions.val * n as f64).min(n - n_test);

    let mut order: Vec<BlockId> = blocks.iter().copied().collect();
    order.shuffle(rng);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            (b, split)
        })
        .collect())
}

/// The distinct blocks occupied by a corpus.
pub fn occupied_blocks(obs: &[ObservationRecord], cell_deg: f64) -> Result<BTreeSet<BlockId>> {
    obs.iter().map(|o| block_of(o.lat, o.lon, cell_deg)).collect()
}

/// Counts removed at each filtering stage, plus realized split fractions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub blocks: BTreeMap<Split, usize>,
    pub observations: BTreeMap<Split, usize>,
    pub block_fractions: BTreeMap<Split, f64>,
    pub observation_fractions: BTreeMap<Split, f64>,
    pub dropped_proximity: usize,
    pub dropped_label_quality: usize,
    pub dropped_class_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    lat_index: i64,
    lon_index: i64,
    split: Split,
}

mod block_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<BlockId, Split>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<BlockEntry> = map
            .iter()
            .map(|(b, split)| BlockEntry {
                lat_index: b.lat_index,
                lon_index: b.lon_index,
                split: *split,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<BlockId, Split>, D::Error> {
        let entries = Vec::<BlockEntry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                (
                    BlockId {
                        lat_index: e.lat_index,
                        lon_index: e.lon_index,
                    },
                    e.split,
                )
            })
            .collect())
    }
}

/// Decimal string used as a λ key, e.g. `0.0025`.
pub fn lambda_key(lambda: f64) -> String {
    format!("{lambda}")
}

/// Block- and observation-level split assignment.
///
/// `obs_assignment` holds every train observation (the unlabeled pool) and
/// the val/test observations that survive filtering. `labeled_train` is the
/// classification-quality subset of train restricted to `class_universe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub cell_deg: f64,
    pub proximity_m: f64,
    #[serde(with = "block_map")]
    pub block_assignment: BTreeMap<BlockId, Split>,
    pub obs_assignment: BTreeMap<String, Split>,
    pub labeled_train: BTreeSet<String>,
    pub labels: BTreeMap<String, u32>,
    pub class_universe: BTreeSet<u32>,
    pub lambda_subsets: BTreeMap<String, BTreeSet<String>>,
    pub summary: SplitSummary,
}

/// Applies, in order: block inheritance, the proximity filter on val/test,
/// the label-quality filter on val/test/labeled-train, and the class
/// intersection filter.
pub fn build_split(
    obs: &[ObservationRecord],
    block_assignment: &BTreeMap<BlockId, Split>,
    cell_deg: f64,
    proximity_m: f64,
) -> Result<SplitManifest> {
    let mut summary = SplitSummary::default();

    // (1) inherit block splits
    let mut by_split: BTreeMap<Split, Vec<&ObservationRecord>> = BTreeMap::new();
    for o in obs {
        o.validate()?;
        let b = block_of(o.lat, o.lon, cell_deg)?;
        let split = *block_assignment
            .get(&b)
            .ok_or_else(|| CrispError::UncoveredBlock {
                obs_id: o.obs_id.clone(),
                lat_index: b.lat_index,
                lon_index: b.lon_index,
            })?;
        by_split.entry(split).or_default().push(o);
    }
    let train = by_split.remove(&Split::Train).unwrap_or_default();

    // (2) proximity filter against the train split
    let index = ProximityIndex::new(train.iter().map(|o| o.point()).collect(), proximity_m)?;
    let mut held_out: BTreeMap<Split, Vec<&ObservationRecord>> = BTreeMap::new();
    for split in [Split::Val, Split::Test] {
        let kept: Vec<_> = by_split
            .remove(&split)
            .unwrap_or_default()
            .into_iter()
            .filter(|o| {
                let near = index.any_within(o.point());
                summary.dropped_proximity += usize::from(near);
                !near
            })
            .collect();
        held_out.insert(split, kept);
    }

    // (3) label quality
    let mut quality = |list: Vec<&ObservationRecord>| -> Vec<(String, u32)> {
        list.into_iter()
            .filter_map(|o| {
                if o.is_classification_quality() {
                    Some((o.obs_id.clone(), o.class_id.unwrap()))
                } else {
                    summary.dropped_label_quality += 1;
                    None
                }
            })
            .collect()
    };
    let val = quality(held_out.remove(&Split::Val).unwrap_or_default());
    let test = quality(held_out.remove(&Split::Test).unwrap_or_default());
    let labeled: Vec<(String, u32)> = train
        .iter()
        .filter(|o| o.is_classification_quality())
        .map(|o| (o.obs_id.clone(), o.class_id.unwrap()))
        .collect();

    // (4) class intersection
    let classes = |l: &[(String, u32)]| l.iter().map(|(_, c)| *c).collect::<BTreeSet<u32>>();
    let class_universe: BTreeSet<u32> = classes(&labeled)
        .intersection(&classes(&val))
        .copied()
        .collect::<BTreeSet<_>>()
        .intersection(&classes(&test))
        .copied()
        .collect();

    let mut obs_assignment: BTreeMap<String, Split> = train
        .iter()
        .map(|o| (o.obs_id.clone(), Split::Train))
        .collect();
    let mut labels = BTreeMap::new();
    let mut labeled_train = BTreeSet::new();
    for (id, c) in labeled {
        if class_universe.contains(&c) {
            labeled_train.insert(id.clone());
            labels.insert(id, c);
        }
    }
    for (split, list) in [(Split::Val, val), (Split::Test, test)] {
        for (id, c) in list {
            if class_universe.contains(&c) {
                obs_assignment.insert(id.clone(), split);
                labels.insert(id, c);
            } else {
                summary.dropped_class_filter += 1;
            }
        }
    }

    for split in block_assignment.values() {
        *summary.blocks.entry(*split).or_default() += 1;
    }
    for split in obs_assignment.values() {
        *summary.observations.entry(*split).or_default() += 1;
    }
    let frac = |m: &BTreeMap<Split, usize>| {
        let total: usize = m.values().sum();
        m.iter()
            .map(|(s, c)| (*s, *c as f64 / total.max(1) as f64))
            .collect::<BTreeMap<_, _>>()
    };
    summary.block_fractions = frac(&summary.blocks);
    summary.observation_fractions = frac(&summary.observations);

    Ok(SplitManifest {
        cell_deg,
        proximity_m,
        block_assignment: block_assignment.clone(),
        obs_assignment,
        labeled_train,
        labels,
        class_universe,
        lambda_subsets: BTreeMap::new(),
        summary,
    })
}

/// Uniform sample without replacement of `round(lambda * |labeled|)` ids.
pub fn sample_lambda_subset<R: Rng + ?Sized>(
    labeled: &BTreeSet<String>,
    lambda: f64,
    rng: &mut R,
) -> Result<BTreeSet<String>> {
    if labeled.is_empty() {
        return Err(CrispError::EmptySet);
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(CrispError::InvalidConfig(format!(
            "lambda must be in (0, 1], got {lambda}"
        )));
    }
    let n = round_half_up(lambda * labeled.len() as f64).min(labeled.len());
    let ids: Vec<&String> = labeled.iter().collect();
    Ok(ids.choose_multiple(rng, n).map(|s| (*s).clone()).collect())
}

impl SplitManifest {
    /// Draws one independent subset per λ from the labeled train pool.
    pub fn add_lambda_subsets<R: Rng + ?Sized>(&mut self, lambdas: &[f64], rng: &mut R) -> Result<()> {
        for &lambda in lambdas {
            let subset = sample_lambda_subset(&self.labeled_train, lambda, rng)?;
            self.lambda_subsets.insert(lambda_key(lambda), subset);
        }
        Ok(())
    }

    pub fn ids_in(&self, split: Split) -> impl Iterator<Item = &String> {
        self.obs_assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(id, _)| id)
    }

    /// Classes present in the λ subset and in both val and test.
    pub fn lambda_class_universe(&self, lambda: f64) -> Option<BTreeSet<u32>> {
        let subset = self.lambda_subsets.get(&lambda_key(lambda))?;
        let of = |ids: &mut dyn Iterator<Item = &String>| -> BTreeSet<u32> {
            ids.filter_map(|id| self.labels.get(id).copied()).collect()
        };
        let sub = of(&mut subset.iter());
        let val = of(&mut self.ids_in(Split::Val));
        let test = of(&mut self.ids_in(Split::Test));
        Some(
            sub.intersection(&val)
                .copied()
                .filter(|c| test.contains(c))
                .collect(),
        )
    }

    /// Per-class support over labeled train, val and test combined.
    pub fn labeled_class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for c in self.labels.values() {
            *counts.entry(*c).or_insert(0) += 1;
        }
        counts
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBin {
    Frequent,
    Common,
    Rare,
}

/// Class support bins: `count > frequent_above` is frequent,
/// `count < rare_below` is rare, anything else is common.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBins {
    pub rare_below: usize,
    pub frequent_above: usize,
    pub bin_of: BTreeMap<u32, FrequencyBin>,
}

impl FrequencyBins {
    pub fn classify(&self, count: usize) -> FrequencyBin {
        if count > self.frequent_above {
            FrequencyBin::Frequent
        } else if count < self.rare_below {
            FrequencyBin::Rare
        } else {
            FrequencyBin::Common
        }
    }

    pub fn count(&self, bin: FrequencyBin) -> usize {
        self.bin_of.values().filter(|b| **b == bin).count()
    }
}

pub fn bin_by_frequency(class_counts: &BTreeMap<u32, usize>) -> FrequencyBins {
    let mut bins = FrequencyBins {
        rare_below: 200,
        frequent_above: 700,
        bin_of: BTreeMap::new(),
    };
    for (&c, &n) in class_counts {
        let b = bins.classify(n);
        bins.bin_of.insert(c, b);
    }
    bins
}
