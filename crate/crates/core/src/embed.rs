//! Dense embedding primitives: row normalization, cosine similarity and a
//! numerically stable row-softmax cross-entropy, each with its backward pass.
//!
//! Every reduction here is a plain sequential loop, so results are bitwise
//! reproducible for a given build.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{CrispError, Result};

/// Norms below this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;

/// A batch of view embeddings, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    item_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, item_ids: Vec<String>) -> Result<Self> {
        let (n, dim) = vectors.dim();
        if n == 0 || dim == 0 {
            return Err(CrispError::EmptyBatch(format!("shape {n}x{dim}")));
        }
        if item_ids.len() != n {
            return Err(CrispError::DimensionMismatch(format!(
                "{} ids for {n} rows",
                item_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(CrispError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { vectors, item_ids })
    }

    /// Builds a batch whose ids are the row indices.
    pub fn from_vectors(vectors: Array2<f64>) -> Result<Self> {
        let ids = (0..vectors.nrows()).map(|i| i.to_string()).collect();
        Self::new(vectors, ids)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }
}

/// Scales every row of the batch to unit Euclidean norm.
pub fn l2_normalize(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let (unit, _) = normalize_rows(batch.vectors())?;
    Ok(EmbeddingBatch {
        vectors: unit,
        item_ids: batch.item_ids.clone(),
    })
}

/// Returns the row-normalized matrix together with the original row norms,
/// which the backward pass needs.
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut unit = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (row_idx, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_NORM) {
            return Err(CrispError::ZeroVector { row: row_idx });
        }
        row.mapv_inplace(|v| v / norm);
        norms[row_idx] = norm;
    }
    Ok((unit, norms))
}

/// Backward pass of [`normalize_rows`]: maps a gradient with respect to the
/// unit rows `u = x / |x|` to a gradient with respect to `x`.
///
/// `dL/dx = (g - u (u . g)) / |x|`
pub fn normalize_rows_backward(
    unit: ArrayView2<'_, f64>,
    norms: ArrayView1<'_, f64>,
    grad_unit: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut out = grad_unit.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let u = unit.row(i);
        let proj: f64 = u.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[i];
        for (g, &uj) in row.iter_mut().zip(u.iter()) {
            *g = (*g - uj * proj) * inv;
        }
    }
    out
}

/// Pairwise cosine similarities between ground-level rows and aerial rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub temperature_divisor: f64,
}

impl SimilarityMatrix {
    pub fn with_temperature(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CrispError::NonPositiveTemperature(tau));
        }
        self.temperature_divisor = tau;
        Ok(self)
    }

    /// Similarities divided by the temperature.
    pub fn scaled(&self) -> Array2<f64> {
        self.values.mapv(|v| v / self.temperature_divisor)
    }
}

/// `values[i][k] = <gl_i, a_k> / (|gl_i| |a_k|)`, with a unit temperature.
pub fn cosine_similarity_matrix(
    gl: &EmbeddingBatch,
    a: &EmbeddingBatch,
) -> Result<SimilarityMatrix> {
    if gl.dim() != a.dim() {
        return Err(CrispError::DimensionMismatch(format!(
            "ground dim {} vs aerial dim {}",
            gl.dim(),
            a.dim()
        )));
    }
    let (u_gl, _) = normalize_rows(gl.vectors())?;
    let (u_a, _) = normalize_rows(a.vectors())?;
    Ok(SimilarityMatrix {
        values: unit_dot(u_gl.view(), u_a.view()),
        temperature_divisor: 1.0,
    })
}

/// `x y^T` evaluated with sequential inner loops.
pub(crate) fn unit_dot(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.axis_iter(Axis(0)).enumerate() {
        for (k, yk) in y.axis_iter(Axis(0)).enumerate() {
            out[[i, k]] = xi.iter().zip(yk.iter()).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Mean over rows of the positive-averaged negative log-softmax.
///
/// `targets` holds nonnegative weights; each row is renormalized to a target
/// distribution, so a boolean mask (1.0 / 0.0) averages the loss over that
/// row's positives. Returns the loss and its gradient with respect to
/// `scaled`.
pub fn softmax_nll_rows(
    scaled: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    let ones = Array1::ones(scaled.ncols());
    softmax_nll_rows_weighted(scaled, targets, ones.view())
}

/// Like [`softmax_nll_rows`], but column `k` enters each row's partition
/// function `multiplicity[k]` times. A multiplicity of zero removes the
/// column from the denominator. Numerators are unaffected.
pub fn softmax_nll_rows_weighted(
    scaled: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    multiplicity: ArrayView1<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    let (rows, cols) = scaled.dim();
    if targets.dim() != (rows, cols) {
        return Err(CrispError::DimensionMismatch(format!(
            "scores {rows}x{cols} vs targets {}x{}",
            targets.nrows(),
            targets.ncols()
        )));
    }
    if multiplicity.len() != cols {
        return Err(CrispError::DimensionMismatch(format!(
            "{} multiplicities for {cols} columns",
            multiplicity.len()
        )));
    }
    if rows == 0 {
        return Err(CrispError::EmptyBatch("no rows".into()));
    }
    let mut grad = Array2::zeros((rows, cols));
    let mut total = 0.0;
    let inv_rows = 1.0 / rows as f64;

    for i in 0..rows {
        let s = scaled.row(i);
        let t = targets.row(i);
        let mass: f64 = t.iter().filter(|w| **w > 0.0).sum();
        if !(mass > 0.0) {
            return Err(CrispError::EmptyTargetRow { row: i });
        }
        let mut max = f64::NEG_INFINITY;
        for k in 0..cols {
            if multiplicity[k] > 0.0 && s[k] > max {
                max = s[k];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(CrispError::EmptyTargetRow { row: i });
        }
        let mut z = 0.0;
        for k in 0..cols {
            if multiplicity[k] > 0.0 {
                z += multiplicity[k] * (s[k] - max).exp();
            }
        }
        let log_z = max + z.ln();

        let mut row_loss = 0.0;
        for k in 0..cols {
            let q = if t[k] > 0.0 { t[k] / mass } else { 0.0 };
            if q > 0.0 {
                if !(multiplicity[k] > 0.0) {
                    return Err(CrispError::DimensionMismatch(format!(
                        "row {i} has a positive at column {k} which is excluded from the denominator"
                    )));
                }
                row_loss += q * (log_z - s[k]);
            }
            let p = if multiplicity[k] > 0.0 {
                multiplicity[k] * (s[k] - max).exp() / z
            } else {
                0.0
            };
            grad[[i, k]] = (p - q) * inv_rows;
        }
        total += row_loss;
    }
    Ok((total * inv_rows, grad))
}
