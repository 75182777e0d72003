use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::anyhow;
use crisp_core::train::checkpoint::Checkpoint;
use crisp_core::{clustering_agreement, emit_report, kmeans_pp, KMeansConfig, MetricReport, ReportFormat};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{config_path_for, write_resolved};
use crate::data::read_corpus;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterEvalConfig {
    pub corpus_dir: PathBuf,
    /// Encoder-pair checkpoint; Gaussian noise embeddings when absent.
    pub encoder: Option<PathBuf>,
    pub noise_dim: usize,
    /// Keep observations with at least this many ground images.
    pub min_views: usize,
    /// Defaults to the number of distinct observations kept.
    pub k: Option<usize>,
    /// Clusterings averaged; noise is redrawn for each.
    pub draws: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: String,
}

impl Default for ClusterEvalConfig {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self {
            corpus_dir: PathBuf::new(),
            encoder: None,
            noise_dim: 32,
            min_views: 9,
            k: None,
            draws: 1,
            max_iters: km.max_iters,
            tol: km.tol,
            seed: 0,
            out: None,
            format: "json".into(),
        }
    }
}

const SCORE_NAMES: [&str; 5] = [
    "homogeneity",
    "completeness",
    "v_measure",
    "adjusted_rand",
    "adjusted_mutual_info",
];

pub fn run(cfg: &ClusterEvalConfig, out: &mut dyn Write) -> CliResult<()> {
    crate::config::require_path(&cfg.corpus_dir, "corpus_dir")?;
    let format = ReportFormat::from_str(&cfg.format).map_err(|e| CliError::config(e.to_string()))?;
    if cfg.draws == 0 || cfg.noise_dim == 0 {
        return Err(CliError::config("draws and noise_dim must be positive"));
    }
    let corpus = read_corpus(&cfg.corpus_dir)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (o, r) in corpus.ground_rows_by_obs().iter().enumerate() {
        if r.len() >= cfg.min_views {
            rows.extend_from_slice(r);
            labels.extend(std::iter::repeat_n(o, r.len()));
        }
    }
    let n_obs = {
        let mut l = labels.clone();
        l.dedup();
        l.len()
    };
    if n_obs < 2 {
        return Err(anyhow!("fewer than two observations have at least {} ground images", cfg.min_views).into());
    }
    let k = cfg.k.unwrap_or(n_obs);

    let encoded = match &cfg.encoder {
        Some(path) => {
            let pair = Checkpoint::read(path)?.encoder_pair()?;
            Some(pair.embed_ground(corpus.ground.data.select(Axis(0), &rows).view())?)
        }
        None => None,
    };
    let mut totals = [0.0; 5];
    for d in 0..cfg.draws as u64 {
        let noise;
        let points = match &encoded {
            Some(e) => e,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(d));
                rng.set_stream(3);
                noise = Array2::from_shape_fn((rows.len(), cfg.noise_dim), |_| -> f64 {
                    StandardNormal.sample(&mut rng)
                });
                &noise
            }
        };
        let km = KMeansConfig {
            k,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            seed: cfg.seed.wrapping_add(d),
        };
        let r = kmeans_pp(points.view(), &km)?;
        let s = clustering_agreement(&r.assignments, &labels)?;
        let values = [
            s.homogeneity,
            s.completeness,
            s.v_measure,
            s.adjusted_rand,
            s.adjusted_mutual_info,
        ];
        for (t, v) in totals.iter_mut().zip(values) {
            *t += v;
        }
    }

    let column = if cfg.encoder.is_some() { "encoder" } else { "noise" };
    let mut report = MetricReport::new();
    for (name, total) in SCORE_NAMES.iter().zip(totals) {
        report.insert(*name, column, Some(total / cfg.draws as f64));
    }
    report.insert("points", column, Some(rows.len() as f64));
    report.insert("observations", column, Some(n_obs as f64));
    report.insert("clusters", column, Some(k as f64));
    report.insert("draws", column, Some(cfg.draws as f64));

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
