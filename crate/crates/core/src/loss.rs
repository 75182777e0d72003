//! Ground-level/aerial contrastive objectives.
//!
//! All three objectives share one engine: cosine similarities between the
//! normalized views are divided by the temperature, a row softmax scores each
//! ground item against the aerial items (the ground direction) and a column
//! softmax scores each aerial item against the ground items (the aerial
//! direction). The objectives differ only in the positive mask, the
//! denominator multiplicities and how the two directions are mixed.
//!
//! Gradients are returned with respect to the raw, pre-normalization
//! embeddings.

use ndarray::{Array1, Array2, ArrayView2};

use crate::embed::{
    normalize_rows, normalize_rows_backward, softmax_nll_rows_weighted, unit_dot, EmbeddingBatch,
};
use crate::error::{CrispError, Result};
use crate::geo::{haversine_unchecked, GeoPoint};

/// Log-inverse temperature of the reference CLIP implementation.
pub const DEFAULT_LOG_INVERSE_TEMPERATURE: f64 = 2.659;

/// Co-location radius for the many-to-one objective.
pub const DEFAULT_COLOCATION_RADIUS_M: f64 = 250.0;

/// How the softmax temperature is configured.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// `t` with effective divisor `tau = exp(-t)`; 2.659 gives tau of about 0.07.
    LogInverse(f64),
    /// The divisor itself.
    Divisor(f64),
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::LogInverse(DEFAULT_LOG_INVERSE_TEMPERATURE)
    }
}

impl Temperature {
    pub fn tau(&self) -> Result<f64> {
        let tau = match *self {
            Temperature::LogInverse(t) => (-t).exp(),
            Temperature::Divisor(tau) => tau,
        };
        check_tau(tau)?;
        Ok(tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CrispError::NonPositiveTemperature(tau))
    }
}

/// Ground-level and aerial embeddings with their pairing.
///
/// `pair_index[i]` is the aerial row paired with ground row `i`; several
/// ground rows may share one aerial row. `coords`, when present, holds one
/// location per aerial row, and a ground row is located at its paired
/// aerial row.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub gl: EmbeddingBatch,
    pub a: EmbeddingBatch,
    pub pair_index: Vec<usize>,
    pub coords: Option<Vec<GeoPoint>>,
}

impl PairedBatch {
    pub fn new(
        gl: EmbeddingBatch,
        a: EmbeddingBatch,
        pair_index: Vec<usize>,
        coords: Option<Vec<GeoPoint>>,
    ) -> Result<Self> {
        if pair_index.len() != gl.len() {
            return Err(CrispError::DimensionMismatch(format!(
                "{} pair indices for {} ground items",
                pair_index.len(),
                gl.len()
            )));
        }
        if let Some(bad) = pair_index.iter().find(|&&k| k >= a.len()) {
            return Err(CrispError::DimensionMismatch(format!(
                "pair index {bad} out of range for {} aerial items",
                a.len()
            )));
        }
        if gl.dim() != a.dim() {
            return Err(CrispError::DimensionMismatch(format!(
                "ground dim {} vs aerial dim {}",
                gl.dim(),
                a.dim()
            )));
        }
        if let Some(c) = &coords {
            if c.len() != a.len() {
                return Err(CrispError::DimensionMismatch(format!(
                    "{} coordinates for {} aerial items",
                    c.len(),
                    a.len()
                )));
            }
            for p in c {
                p.validate()?;
            }
        }
        Ok(Self {
            gl,
            a,
            pair_index,
            coords,
        })
    }

    /// One-to-one pairing of row `i` with row `i`.
    pub fn aligned(gl: EmbeddingBatch, a: EmbeddingBatch, coords: Option<Vec<GeoPoint>>) -> Result<Self> {
        let n = gl.len();
        Self::new(gl, a, (0..n).collect(), coords)
    }

    fn require_bijection(&self) -> Result<()> {
        let n = self.a.len();
        if self.gl.len() != n {
            return Err(CrispError::NonBijectivePairing(format!(
                "{} ground items vs {n} aerial items",
                self.gl.len()
            )));
        }
        let mut seen = vec![false; n];
        for &k in &self.pair_index {
            if std::mem::replace(&mut seen[k], true) {
                return Err(CrispError::NonBijectivePairing(format!(
                    "aerial item {k} is paired more than once"
                )));
            }
        }
        Ok(())
    }
}

/// Objective value, gradients and the two directional parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad_gl: Array2<f64>,
    pub grad_a: Array2<f64>,
    /// Only set by the parameterized objective.
    pub grad_w: Option<f64>,
    pub l_gl: f64,
    pub l_a: f64,
}

/// Mixing parameter of the parameterized objective; the ground direction
/// gets weight `sigmoid(w)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossWeight {
    pub w: f64,
}

impl LossWeight {
    pub fn sigma(&self) -> f64 {
        sigmoid(self.w)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    u_gl: Array2<f64>,
    n_gl: Array1<f64>,
    u_a: Array2<f64>,
    n_a: Array1<f64>,
    l_gl: f64,
    l_a: f64,
    /// d l_gl / d scaled, shape (n_gl, n_a)
    d_gl: Array2<f64>,
    /// d l_a / d scaled, shape (n_gl, n_a)
    d_a: Array2<f64>,
}

fn forward(
    batch: &PairedBatch,
    tau: f64,
    mask: ArrayView2<'_, f64>,
    row_multiplicity: &Array1<f64>,
    col_multiplicity: &Array1<f64>,
) -> Result<Forward> {
    check_tau(tau)?;
    let (u_gl, n_gl) = normalize_rows(batch.gl.vectors())?;
    let (u_a, n_a) = normalize_rows(batch.a.vectors())?;
    let scaled = unit_dot(u_gl.view(), u_a.view()).mapv(|s| s / tau);

    let (l_gl, d_gl) = softmax_nll_rows_weighted(scaled.view(), mask, row_multiplicity.view())?;
    let (l_a, d_a_t) =
        softmax_nll_rows_weighted(scaled.t(), mask.t(), col_multiplicity.view())?;
    Ok(Forward {
        u_gl,
        n_gl,
        u_a,
        n_a,
        l_gl,
        l_a,
        d_gl,
        d_a: d_a_t.reversed_axes(),
    })
}

/// Mixes the two directions with weight `alpha` on the ground direction and
/// backpropagates to the raw embeddings.
fn combine(f: &Forward, tau: f64, alpha: f64) -> LossResult {
    let beta = 1.0 - alpha;
    let loss = alpha * f.l_gl + beta * f.l_a;
    let d_sim = (&f.d_gl * alpha + &f.d_a * beta).mapv(|g| g / tau);
    let d_u_gl = d_sim.dot(&f.u_a);
    let d_u_a = d_sim.t().dot(&f.u_gl);
    LossResult {
        loss,
        grad_gl: normalize_rows_backward(f.u_gl.view(), f.n_gl.view(), d_u_gl.view()),
        grad_a: normalize_rows_backward(f.u_a.view(), f.n_a.view(), d_u_a.view()),
        grad_w: None,
        l_gl: f.l_gl,
        l_a: f.l_a,
    }
}

fn pairing_mask(batch: &PairedBatch) -> Array2<f64> {
    let mut mask = Array2::zeros((batch.gl.len(), batch.a.len()));
    for (i, &k) in batch.pair_index.iter().enumerate() {
        mask[[i, k]] = 1.0;
    }
    mask
}

/// Symmetric InfoNCE over one-to-one pairs: the unweighted mean of the ground
/// and aerial directions.
pub fn standard_crisp_loss(batch: &PairedBatch, tau: f64) -> Result<LossResult> {
    directional_standard(batch, tau, 0.5)
}

fn directional_standard(batch: &PairedBatch, tau: f64, alpha: f64) -> Result<LossResult> {
    check_tau(tau)?;
    batch.require_bijection()?;
    let mask = pairing_mask(batch);
    let ones_a = Array1::ones(batch.a.len());
    let ones_gl = Array1::ones(batch.gl.len());
    let f = forward(batch, tau, mask.view(), &ones_a, &ones_gl)?;
    Ok(combine(&f, tau, alpha))
}

/// `sigmoid(w) * l_gl + (1 - sigmoid(w)) * l_a`, with the gradient in `w`.
pub fn parameterized_crisp_loss(
    batch: &PairedBatch,
    tau: f64,
    weight: LossWeight,
) -> Result<LossResult> {
    let sigma = weight.sigma();
    let mut r = directional_standard(batch, tau, sigma)?;
    r.grad_w = Some(sigma * (1.0 - sigma) * (r.l_gl - r.l_a));
    Ok(r)
}

/// Entry `(i, k)` is true when aerial item `k` is ground item `i`'s pair or
/// lies within `radius_m` (inclusive) of ground item `i`.
///
/// `coords` holds one location per aerial item.
pub fn build_positive_mask(
    coords: Option<&[GeoPoint]>,
    pair_index: &[usize],
    radius_m: f64,
) -> Result<Array2<bool>> {
    let coords = coords.ok_or(CrispError::MissingCoordinates)?;
    if !(radius_m >= 0.0 && radius_m.is_finite()) {
        return Err(CrispError::InvalidConfig(format!(
            "radius must be nonnegative, got {radius_m}"
        )));
    }
    for p in coords {
        p.validate()?;
    }
    let n_a = coords.len();
    let mut mask = Array2::from_elem((pair_index.len(), n_a), false);
    for (i, &pi) in pair_index.iter().enumerate() {
        if pi >= n_a {
            return Err(CrispError::DimensionMismatch(format!(
                "pair index {pi} out of range for {n_a} coordinates"
            )));
        }
        for k in 0..n_a {
            mask[[i, k]] = k == pi || haversine_unchecked(coords[pi], coords[k]) <= radius_m;
        }
    }
    Ok(mask)
}

/// Options for [`many_to_one_crisp_loss_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManyToOneOptions {
    pub radius_m: f64,
    /// Count each item once in the partition function instead of once per
    /// positive link.
    pub dedupe_denominator: bool,
}

/// Multi-positive objective: every aerial item within `radius_m` of a ground
/// item is a positive for it, and vice versa.
///
/// Numerators average over each item's positives. The partition function of
/// a ground row sums over every positive link in the batch, so an aerial
/// item shared by `c` ground items contributes `c` times (and symmetrically
/// for aerial rows).
pub fn many_to_one_crisp_loss(batch: &PairedBatch, tau: f64, radius_m: f64) -> Result<LossResult> {
    many_to_one_crisp_loss_with(
        batch,
        tau,
        ManyToOneOptions {
            radius_m,
            dedupe_denominator: false,
        },
    )
}

pub fn many_to_one_crisp_loss_with(
    batch: &PairedBatch,
    tau: f64,
    opts: ManyToOneOptions,
) -> Result<LossResult> {
    check_tau(tau)?;
    let mask = build_positive_mask(batch.coords.as_deref(), &batch.pair_index, opts.radius_m)?
        .mapv(|b| if b { 1.0 } else { 0.0 });
    let link_count = |counts: Array1<f64>| {
        if opts.dedupe_denominator {
            counts.mapv(|c| if c > 0.0 { 1.0 } else { 0.0 })
        } else {
            counts
        }
    };
    let per_aerial = link_count(mask.sum_axis(ndarray::Axis(0)));
    let per_ground = link_count(mask.sum_axis(ndarray::Axis(1)));
    let f = forward(batch, tau, mask.view(), &per_aerial, &per_ground)?;
    Ok(combine(&f, tau, 0.5))
}
