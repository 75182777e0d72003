//! Central finite-difference checks of the contrastive loss gradients on
//! random instances.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingBatch;
use crate::error::{CrispError, Result};
use crate::geo::GeoPoint;
use crate::loss::{
    many_to_one_crisp_loss, parameterized_crisp_loss, standard_crisp_loss, LossResult, LossWeight, PairedBatch,
    Temperature, DEFAULT_COLOCATION_RADIUS_M,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Standard,
    M2o,
    Par,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Standard, LossKind::M2o, LossKind::Par];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Standard => "standard",
            LossKind::M2o => "m2o",
            LossKind::Par => "par",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = CrispError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CrispError::InvalidConfig(format!("unknown objective `{s}` (standard, m2o, par)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub min_items: usize,
    pub max_items: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub temperature: Temperature,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            min_items: 2,
            max_items: 16,
            min_dim: 4,
            max_dim: 32,
            step: 1e-6,
            tolerance: 1e-5,
            temperature: Temperature::default(),
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0
            || self.min_items == 0
            || self.min_items > self.max_items
            || self.min_dim == 0
            || self.min_dim > self.max_dim
        {
            return Err(CrispError::InvalidConfig(
                "need instances >= 1, 1 <= min_items <= max_items and 1 <= min_dim <= max_dim".into(),
            ));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(CrispError::InvalidConfig("step and tolerance must be positive".into()));
        }
        self.temperature.tau()?;
        Ok(())
    }
}

/// A random loss input.
#[derive(Debug, Clone)]
pub struct Instance {
    pub batch: PairedBatch,
    pub tau: f64,
    pub weight: LossWeight,
}

impl Instance {
    pub fn loss(&self, kind: LossKind) -> Result<LossResult> {
        match kind {
            LossKind::Standard => standard_crisp_loss(&self.batch, self.tau),
            LossKind::M2o => many_to_one_crisp_loss(&self.batch, self.tau, DEFAULT_COLOCATION_RADIUS_M),
            LossKind::Par => parameterized_crisp_loss(&self.batch, self.tau, self.weight),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Draws an instance. Many-to-one instances share aerial items between
/// ground items and place points within a few hundred meters of each
/// other so that the co-location radius matters.
pub fn random_instance(kind: LossKind, config: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(config.min_items..=config.max_items);
    let dim = rng.random_range(config.min_dim..=config.max_dim);
    let gl = gaussian(rng, n, dim);
    let (n_a, pair_index, coords) = match kind {
        LossKind::M2o => {
            let n_a = rng.random_range(1..=n);
            let mut pairs: Vec<usize> = (0..n_a).chain((n_a..n).map(|_| rng.random_range(0..n_a))).collect();
            pairs.shuffle(rng);
            let coords = (0..n_a)
                .map(|_| GeoPoint::new(45.0 + rng.random_range(0.0..0.006), 7.0 + rng.random_range(0.0..0.006)))
                .collect::<Result<Vec<_>>>()?;
            (n_a, pairs, Some(coords))
        }
        _ => {
            let mut pairs: Vec<usize> = (0..n).collect();
            pairs.shuffle(rng);
            (n, pairs, None)
        }
    };
    let a = gaussian(rng, n_a, dim);
    let batch = PairedBatch::new(
        EmbeddingBatch::new(gl, ids(n))?,
        EmbeddingBatch::new(a, ids(n_a))?,
        pair_index,
        coords,
    )?;
    Ok(Instance {
        batch,
        tau: config.temperature.tau()?,
        weight: LossWeight {
            w: rng.random_range(-2.0..2.0),
        },
    })
}

fn with_vectors(batch: &PairedBatch, gl: Option<Array2<f64>>, a: Option<Array2<f64>>) -> Result<PairedBatch> {
    let gl = gl.unwrap_or_else(|| batch.gl.vectors().to_owned());
    let a = a.unwrap_or_else(|| batch.a.vectors().to_owned());
    PairedBatch::new(
        EmbeddingBatch::new(gl, batch.gl.item_ids().to_vec())?,
        EmbeddingBatch::new(a, batch.a.item_ids().to_vec())?,
        batch.pair_index.clone(),
        batch.coords.clone(),
    )
}

/// `|a - f| / max(|a|, |f|)` in the Euclidean norm, with a tiny floor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, f)| a - f));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-12)
}

/// Analytical and finite-difference gradients of one instance, flattened as
/// ground block, aerial block and (for the parameterized objective) `w`.
pub fn gradients(kind: LossKind, inst: &Instance, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = inst.loss(kind)?;
    let mut analytic: Vec<f64> = r.grad_gl.iter().chain(r.grad_a.iter()).copied().collect();
    let mut numeric = Vec::with_capacity(analytic.len() + 1);
    for side in 0..2 {
        let base = if side == 0 {
            inst.batch.gl.vectors().to_owned()
        } else {
            inst.batch.a.vectors().to_owned()
        };
        for idx in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v.as_slice_mut().unwrap()[idx] += delta;
                let b = if side == 0 {
                    with_vectors(&inst.batch, Some(v), None)?
                } else {
                    with_vectors(&inst.batch, None, Some(v))?
                };
                Ok(Instance { batch: b, ..inst.clone() }.loss(kind)?.loss)
            };
            numeric.push((eval(step)? - eval(-step)?) / (2.0 * step));
        }
    }
    if kind == LossKind::Par {
        analytic.push(r.grad_w.unwrap_or(f64::NAN));
        let eval = |delta: f64| -> Result<f64> {
            let mut i = inst.clone();
            i.weight.w += delta;
            Ok(i.loss(kind)?.loss)
        };
        numeric.push((eval(step)? - eval(-step)?) / (2.0 * step));
    }
    Ok((analytic, numeric))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub objective: LossKind,
    pub instances: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs the check for one objective. `corrupt` perturbs the first analytical
/// gradient entry by that fraction of the gradient norm, to confirm the
/// detector notices.
pub fn check_objective(kind: LossKind, config: &GradcheckConfig, corrupt: Option<f64>) -> Result<ObjectiveCheck> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(kind as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..config.instances {
        let inst = random_instance(kind, config, &mut rng)?;
        let (mut analytic, numeric) = gradients(kind, &inst, config.step)?;
        if let Some(frac) = corrupt {
            let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
            analytic[0] += frac * norm.max(1.0);
        }
        let err = relative_error(&analytic, &numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(ObjectiveCheck {
        objective: kind,
        instances: config.instances,
        worst_relative_error: worst,
        tolerance: config.tolerance,
        passed: worst < config.tolerance,
    })
}
