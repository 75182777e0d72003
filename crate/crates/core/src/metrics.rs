//! Classification metrics for long-tailed label sets and clustering
//! agreement scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::split::FrequencyBin;

/// Scores for a set of samples with their true classes and optional
/// group and frequency-bin annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    scores: Array2<f64>,
    true_class: Vec<usize>,
    group_id: Option<Vec<i64>>,
    class_bins: Option<BTreeMap<usize, FrequencyBin>>,
}

impl PredictionSet {
    pub fn new(scores: Array2<f64>, true_class: Vec<usize>) -> Result<Self> {
        if scores.nrows() != true_class.len() {
            return Err(CrispError::ShapeMismatch(format!(
                "{} score rows for {} labels",
                scores.nrows(),
                true_class.len()
            )));
        }
        if true_class.is_empty() || scores.ncols() == 0 {
            return Err(CrispError::EmptySet);
        }
        if let Some(&target) = true_class.iter().find(|&&t| t >= scores.ncols()) {
            return Err(CrispError::InvalidTarget {
                target,
                n_classes: scores.ncols(),
            });
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(CrispError::InvalidConfig("scores must be finite".into()));
        }
        Ok(Self {
            scores,
            true_class,
            group_id: None,
            class_bins: None,
        })
    }

    pub fn with_groups(mut self, groups: Vec<i64>) -> Result<Self> {
        if groups.len() != self.true_class.len() {
            return Err(CrispError::ShapeMismatch(format!(
                "{} group ids for {} samples",
                groups.len(),
                self.true_class.len()
            )));
        }
        self.group_id = Some(groups);
        Ok(self)
    }

    /// Bin of each class index; classes missing from the map belong to no bin.
    pub fn with_bins(mut self, bins: BTreeMap<usize, FrequencyBin>) -> Self {
        self.class_bins = Some(bins);
        self
    }

    pub fn len(&self) -> usize {
        self.true_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_class.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.scores.ncols()
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn true_class(&self) -> &[usize] {
        &self.true_class
    }

    pub fn groups(&self) -> Option<&[i64]> {
        self.group_id.as_deref()
    }

    /// Whether sample `i` has its true class among the `k` best scores.
    pub fn hit(&self, i: usize, k: usize) -> bool {
        rank_of(self.scores.row(i), self.true_class[i]) < k
    }

    fn hits(&self, k: usize) -> Result<Vec<bool>> {
        check_k(k)?;
        Ok((0..self.len()).map(|i| self.hit(i, k)).collect())
    }
}

/// Number of classes ranked ahead of `t`: higher scores, or equal scores
/// with a lower index.
pub fn rank_of(row: ArrayView1<'_, f64>, t: usize) -> usize {
    let st = row[t];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < t))
        .count()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(CrispError::InvalidConfig("k must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn mean_hits_by<K: Ord + Copy>(hits: &[bool], key: impl Fn(usize) -> Option<K>) -> BTreeMap<K, f64> {
    let mut counts: BTreeMap<K, (usize, usize)> = BTreeMap::new();
    for (i, &h) in hits.iter().enumerate() {
        if let Some(k) = key(i) {
            let e = counts.entry(k).or_default();
            e.0 += usize::from(h);
            e.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(k, (h, n))| (k, h as f64 / n as f64))
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn topk_accuracy(p: &PredictionSet, k: usize) -> Result<f64> {
    let hits = p.hits(k)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Top-k accuracy of each class present in the true labels.
pub fn per_class_topk(p: &PredictionSet, k: usize) -> Result<BTreeMap<usize, f64>> {
    let hits = p.hits(k)?;
    Ok(mean_hits_by(&hits, |i| Some(p.true_class[i])))
}

/// Unweighted mean over present classes of per-class top-k accuracy.
pub fn topk_macro_accuracy(p: &PredictionSet, k: usize) -> Result<f64> {
    Ok(mean(per_class_topk(p, k)?.into_values()).expect("prediction sets are nonempty"))
}

/// Within-group top-k accuracy for every group present.
pub fn per_group_topk(p: &PredictionSet, k: usize) -> Result<BTreeMap<i64, f64>> {
    let groups = p.group_id.as_ref().ok_or(CrispError::MissingGroup)?;
    let hits = p.hits(k)?;
    Ok(mean_hits_by(&hits, |i| Some(groups[i])))
}

/// Unweighted mean over groups of within-group accuracy.
pub fn eco_accuracy(p: &PredictionSet, k: usize) -> Result<f64> {
    Ok(mean(per_group_topk(p, k)?.into_values()).expect("prediction sets are nonempty"))
}

/// Macro accuracy within each frequency bin; `None` when no present class
/// falls in the bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinnedAccuracy {
    pub frequent: Option<f64>,
    pub common: Option<f64>,
    pub rare: Option<f64>,
}

impl BinnedAccuracy {
    pub fn get(&self, bin: FrequencyBin) -> Option<f64> {
        match bin {
            FrequencyBin::Frequent => self.frequent,
            FrequencyBin::Common => self.common,
            FrequencyBin::Rare => self.rare,
        }
    }
}

pub fn binned_macro_accuracy(p: &PredictionSet, k: usize) -> Result<BinnedAccuracy> {
    let bins = p.class_bins.as_ref().ok_or(CrispError::MissingBins)?;
    let per_class = per_class_topk(p, k)?;
    let in_bin = |bin: FrequencyBin| {
        mean(
            per_class
                .iter()
                .filter(|(c, _)| bins.get(c) == Some(&bin))
                .map(|(_, v)| *v),
        )
    };
    Ok(BinnedAccuracy {
        frequent: in_bin(FrequencyBin::Frequent),
        common: in_bin(FrequencyBin::Common),
        rare: in_bin(FrequencyBin::Rare),
    })
}

/// Agreement between a clustering and reference labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScores {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
    pub adjusted_rand: f64,
    pub adjusted_mutual_info: f64,
}

/// Contingency table with rows indexed by true label and columns by cluster,
/// both relabeled densely in order of first appearance.
pub struct Contingency {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn dense<T: Eq + Hash + Copy>(values: &[T]) -> (Vec<usize>, usize) {
    let mut ids: HashMap<T, usize> = HashMap::new();
    let out = values
        .iter()
        .map(|v| {
            let next = ids.len();
            *ids.entry(*v).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

impl Contingency {
    pub fn new<P: Eq + Hash + Copy, T: Eq + Hash + Copy>(predicted: &[P], truth: &[T]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(CrispError::ShapeMismatch(format!(
                "{} cluster ids for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.is_empty() {
            return Err(CrispError::EmptySet);
        }
        let (p, n_p) = dense(predicted);
        let (t, n_t) = dense(truth);
        let mut counts = vec![vec![0u64; n_p]; n_t];
        for (&ti, &pi) in t.iter().zip(&p) {
            counts[ti][pi] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..n_p).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: truth.len() as u64,
        })
    }

    fn entropy(sums: &[u64], n: u64) -> f64 {
        let n = n as f64;
        -sums
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }

    pub fn entropy_true(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n)
    }

    pub fn entropy_pred(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n)
    }

    /// Mutual information in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (n * c / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Expected mutual information under the hypergeometric permutation model.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.n as usize;
        let mut ln_fact = vec![0.0; n + 1];
        for k in 1..=n {
            ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
        }
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.row_sums {
            let a = a as usize;
            for &b in &self.col_sums {
                let b = b as usize;
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                let fixed = ln_fact[a] + ln_fact[b] + ln_fact[n - a] + ln_fact[n - b] - ln_fact[n];
                for nij in lo..=hi {
                    let x = nij as f64;
                    let log_prob = fixed
                        - ln_fact[nij]
                        - ln_fact[a - nij]
                        - ln_fact[b - nij]
                        - ln_fact[n + nij - a - b];
                    emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_prob.exp();
                }
            }
        }
        emi
    }
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

pub fn adjusted_rand_index(c: &Contingency) -> f64 {
    let (n_true, n_pred) = (c.row_sums.len(), c.col_sums.len());
    let n = c.n as usize;
    if (n_true == 1 && n_pred == 1) || (n_true == n && n_pred == n) {
        return 1.0;
    }
    let index: f64 = c.counts.iter().flatten().map(|&x| choose2(x)).sum();
    let a: f64 = c.row_sums.iter().map(|&x| choose2(x)).sum();
    let b: f64 = c.col_sums.iter().map(|&x| choose2(x)).sum();
    let expected = a * b / choose2(c.n);
    let max = 0.5 * (a + b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Adjusted mutual information, normalized by the arithmetic mean of the
/// two entropies.
pub fn adjusted_mutual_info(c: &Contingency) -> f64 {
    let (n_true, n_pred) = (c.row_sums.len(), c.col_sums.len());
    if n_true == n_pred && (n_true == 1 || n_true as u64 == c.n) {
        return 1.0;
    }
    let mi = c.mutual_information();
    let emi = c.expected_mutual_information();
    let normalizer = 0.5 * (c.entropy_true() + c.entropy_pred());
    let mut denom = normalizer - emi;
    denom = if denom < 0.0 {
        denom.min(-f64::EPSILON)
    } else {
        denom.max(f64::EPSILON)
    };
    (mi - emi) / denom
}

pub fn clustering_agreement<P, T>(predicted: &[P], truth: &[T]) -> Result<ClusteringScores>
where
    P: Eq + Hash + Copy,
    T: Eq + Hash + Copy,
{
    let c = Contingency::new(predicted, truth)?;
    let mi = c.mutual_information();
    let (h_true, h_pred) = (c.entropy_true(), c.entropy_pred());
    let homogeneity = if h_true == 0.0 { 1.0 } else { mi / h_true };
    let completeness = if h_pred == 0.0 { 1.0 } else { mi / h_pred };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(ClusteringScores {
        homogeneity,
        completeness,
        v_measure,
        adjusted_rand: adjusted_rand_index(&c),
        adjusted_mutual_info: adjusted_mutual_info(&c),
    })
}

/// Metric rows by column (usually a split name); `None` marks a value that
/// does not apply, such as an empty frequency bin.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricReport {
    pub rows: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, metric: impl Into<String>, column: impl Into<String>, value: Option<f64>) {
        self.rows.entry(metric.into()).or_default().insert(column.into(), value);
    }

    pub fn get(&self, metric: &str, column: &str) -> Option<f64> {
        self.rows.get(metric)?.get(column).copied().flatten()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.rows.values().flat_map(|r| r.keys().cloned()).collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = CrispError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(CrispError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

/// Rounds to 6 significant digits.
pub fn round_sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

fn format_value(v: f64) -> String {
    let r = round_sig6(v);
    if r == r.trunc() && r.abs() < 1e15 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

/// Renders a report with sorted rows and columns and 6 significant digits.
pub fn emit_report(report: &MetricReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut root = serde_json::Map::new();
            for (metric, cols) in &report.rows {
                let mut row = serde_json::Map::new();
                for (col, v) in cols {
                    let value = match v {
                        Some(x) if x.is_finite() => serde_json::Value::from(round_sig6(*x)),
                        _ => serde_json::Value::Null,
                    };
                    row.insert(col.clone(), value);
                }
                root.insert(metric.clone(), serde_json::Value::Object(row));
            }
            Ok(serde_json::to_string_pretty(&serde_json::Value::Object(root))?)
        }
        ReportFormat::Csv => {
            let columns = report.columns();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(std::iter::once("metric").chain(columns.iter().map(String::as_str)))?;
            for (metric, cols) in &report.rows {
                let mut record = vec![metric.clone()];
                for c in &columns {
                    record.push(match cols.get(c).copied().flatten() {
                        Some(v) if v.is_finite() => format_value(v),
                        _ => String::new(),
                    });
                }
                w.write_record(&record)?;
            }
            let bytes = w.into_inner().map_err(|e| CrispError::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| CrispError::Format(e.to_string()))
        }
    }
}
