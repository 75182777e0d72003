//! Deterministic generator of small multi-view corpora.
//!
//! Each observation has a class drawn from a power-law prior and a location
//! drawn around one of several spatial cluster centers. Its shared latent is
//! the class factor plus a smooth function of position (random Fourier
//! features, so nearby observations look alike). Every view mixes the shared
//! latent and a view-private latent through fixed random projections and
//! adds isotropic Gaussian noise:
//!
//! `x = s * M z + (1 - s) * P p + sigma * e`
//!
//! Aerial views are rasters of `aerial_channels x side x side` stored
//! flattened in channel-major order.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::geo::EARTH_RADIUS_M;
use crate::split::{read_observations_jsonl, write_observations_jsonl, ObservationRecord};

const METERS_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_observations: usize,
    /// Class `k` (0-based) has prior mass proportional to `(k + 1)^-tail_exponent`.
    pub tail_exponent: f64,
    pub view_dim_gl: usize,
    /// Must equal `aerial_channels * side^2` for augmentation to apply.
    pub view_dim_a: usize,
    pub aerial_channels: usize,
    pub latent_dim: usize,
    pub shared_signal: f64,
    /// Scale of the positional factor relative to the class factor.
    pub location_weight: f64,
    /// Correlation length of the positional factor.
    pub location_length_m: f64,
    pub n_clusters: usize,
    pub cluster_scale_m: f64,
    /// Number of ecoregion-like groups; clusters are assigned round-robin.
    pub n_groups: usize,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub window_deg: f64,
    pub mean_views_per_obs: f64,
    pub noise_sigma: f64,
    pub research_grade_rate: f64,
    pub species_level_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 50,
            n_observations: 5000,
            tail_exponent: 1.1,
            view_dim_gl: 48,
            view_dim_a: 64,
            aerial_channels: 4,
            latent_dim: 8,
            shared_signal: 0.9,
            location_weight: 0.5,
            location_length_m: 1000.0,
            n_clusters: 40,
            cluster_scale_m: 1500.0,
            n_groups: 8,
            origin_lat: 36.0,
            origin_lon: -120.0,
            window_deg: 1.0,
            mean_views_per_obs: 2.0,
            noise_sigma: 1.0,
            research_grade_rate: 0.6,
            species_level_rate: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrispError::InvalidConfig(m));
        for (name, v) in [
            ("n_classes", self.n_classes),
            ("n_observations", self.n_observations),
            ("view_dim_gl", self.view_dim_gl),
            ("view_dim_a", self.view_dim_a),
            ("aerial_channels", self.aerial_channels),
            ("latent_dim", self.latent_dim),
            ("n_clusters", self.n_clusters),
            ("n_groups", self.n_groups),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.tail_exponent > 0.0 && self.tail_exponent.is_finite()) {
            return bad(format!("tail_exponent must be positive, got {}", self.tail_exponent));
        }
        if !(0.0..=1.0).contains(&self.shared_signal) {
            return bad(format!("shared_signal must be in [0, 1], got {}", self.shared_signal));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("cluster_scale_m", self.cluster_scale_m),
            ("location_length_m", self.location_length_m),
            ("window_deg", self.window_deg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.location_weight >= 0.0 && self.location_weight.is_finite()) {
            return bad(format!("location_weight must be nonnegative, got {}", self.location_weight));
        }
        if !(self.mean_views_per_obs >= 1.0 && self.mean_views_per_obs.is_finite()) {
            return bad(format!("mean_views_per_obs must be >= 1, got {}", self.mean_views_per_obs));
        }
        for (name, v) in [
            ("research_grade_rate", self.research_grade_rate),
            ("species_level_rate", self.species_level_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        let lat_hi = self.origin_lat + self.window_deg;
        let lon_hi = self.origin_lon + self.window_deg;
        if self.origin_lat < -90.0 || lat_hi > 90.0 || self.origin_lon < -180.0 || lon_hi > 180.0 {
            return bad("coordinate window leaves the valid lat/lon range".into());
        }
        Ok(())
    }

    /// Side of the aerial raster, when `view_dim_a` factors as `channels * side^2`.
    pub fn aerial_side(&self) -> Option<usize> {
        raster_side(self.view_dim_a, self.aerial_channels)
    }

    /// Normalized class prior.
    pub fn class_prior(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.n_classes)
            .map(|k| ((k + 1) as f64).powf(-self.tail_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

pub fn raster_side(len: usize, channels: usize) -> Option<usize> {
    if channels == 0 || len % channels != 0 {
        return None;
    }
    let area = len / channels;
    let side = (area as f64).sqrt().round() as usize;
    (side * side == area).then_some(side)
}

/// A matrix of view vectors with one id and owning observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub ids: Vec<String>,
    pub obs_index: Vec<usize>,
    pub data: Array2<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewHeader {
    rows: usize,
    cols: usize,
    dtype: String,
    ids: Vec<String>,
    obs_ids: Vec<String>,
}

const DTYPE: &str = "float64-le";

impl ViewSet {
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Writes `<stem>.json` (header) and `<stem>.f64` (row-major data).
    pub fn write(&self, dir: &Path, stem: &str, observations: &[ObservationRecord]) -> Result<()> {
        let header = ViewHeader {
            rows: self.data.nrows(),
            cols: self.data.ncols(),
            dtype: DTYPE.into(),
            ids: self.ids.clone(),
            obs_ids: self
                .obs_index
                .iter()
                .map(|&i| observations[i].obs_id.clone())
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&header)?;
        s.push('\n');
        std::fs::write(dir.join(format!("{stem}.json")), s)?;
        write_f64_le(&dir.join(format!("{stem}.f64")), self.data.iter().copied())
    }

    pub fn read(dir: &Path, stem: &str, observations: &[ObservationRecord]) -> Result<Self> {
        let header: ViewHeader =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if header.dtype != DTYPE {
            return Err(CrispError::Format(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.ids.len() != header.rows || header.obs_ids.len() != header.rows {
            return Err(CrispError::Format(format!("{stem}: id count does not match rows")));
        }
        let values = read_f64_le(&dir.join(format!("{stem}.f64")))?;
        if values.len() != header.rows * header.cols {
            return Err(CrispError::Format(format!(
                "{stem}: expected {} values, found {}",
                header.rows * header.cols,
                values.len()
            )));
        }
        let position: HashMap<&str, usize> = observations
            .iter()
            .enumerate()
            .map(|(i, o)| (o.obs_id.as_str(), i))
            .collect();
        let obs_index = header
            .obs_ids
            .iter()
            .map(|id| {
                position
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| CrispError::Format(format!("{stem}: unknown observation `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = Array2::from_shape_vec((header.rows, header.cols), values)
            .map_err(|e| CrispError::Format(e.to_string()))?;
        Ok(Self {
            ids: header.ids,
            obs_index,
            data,
        })
    }
}

pub(crate) fn write_f64_le(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    decode_f64_le(&bytes)
}

pub(crate) fn decode_f64_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(CrispError::Format(format!(
            "blob of {} bytes is not a whole number of float64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Everything needed to re-derive each view exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLatents {
    pub class_factors: Array2<f64>,
    pub location_frequencies: Array2<f64>,
    pub location_phases: Array1<f64>,
    pub shared_gl: Array2<f64>,
    pub private_gl: Array2<f64>,
    pub shared_a: Array2<f64>,
    pub private_a: Array2<f64>,
    pub true_class: Vec<usize>,
    pub cluster: Vec<usize>,
    /// Shared latent per observation.
    pub shared: Array2<f64>,
    pub ground_private: Array2<f64>,
    pub ground_noise: Array2<f64>,
    pub aerial_private: Array2<f64>,
    pub aerial_noise: Array2<f64>,
}

/// Observations with their ground-level and aerial views.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: Option<SynthConfig>,
    pub observations: Vec<ObservationRecord>,
    pub ground: ViewSet,
    /// One row per observation, in observation order.
    pub aerial: ViewSet,
    /// Present on generated corpora, absent on corpora read from disk.
    pub latents: Option<SynthLatents>,
}

pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const GROUND_STEM: &str = "ground";
pub const AERIAL_STEM: &str = "aerial";

impl SynthCorpus {
    /// Ground view rows of each observation.
    pub fn ground_rows_by_obs(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.observations.len()];
        for (r, &o) in self.ground.obs_index.iter().enumerate() {
            rows[o].push(r);
        }
        rows
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.observations
            .iter()
            .enumerate()
            .map(|(i, o)| (o.obs_id.as_str(), i))
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_observations_jsonl(&dir.join(OBSERVATIONS_FILE), &self.observations)?;
        self.ground.write(dir, GROUND_STEM, &self.observations)?;
        self.aerial.write(dir, AERIAL_STEM, &self.observations)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let observations = read_observations_jsonl(&dir.join(OBSERVATIONS_FILE))?;
        let ground = ViewSet::read(dir, GROUND_STEM, &observations)?;
        let aerial = ViewSet::read(dir, AERIAL_STEM, &observations)?;
        if aerial.obs_index.iter().copied().ne(0..observations.len()) {
            return Err(CrispError::Format(
                "aerial views must hold exactly one row per observation, in corpus order".into(),
            ));
        }
        Ok(Self {
            config: None,
            observations,
            ground,
            aerial,
            latents: None,
        })
    }

    /// Recomputes ground view `row` from the stored latents.
    pub fn rederive_ground(&self, row: usize) -> Option<Array1<f64>> {
        let l = self.latents.as_ref()?;
        let cfg = self.config.as_ref()?;
        let o = self.ground.obs_index[row];
        Some(compose_view(
            l.shared_gl.view(),
            l.private_gl.view(),
            l.shared.row(o),
            l.ground_private.row(row),
            l.ground_noise.row(row),
            cfg.shared_signal,
            cfg.noise_sigma,
        ))
    }

    pub fn rederive_aerial(&self, obs: usize) -> Option<Array1<f64>> {
        let l = self.latents.as_ref()?;
        let cfg = self.config.as_ref()?;
        Some(compose_view(
            l.shared_a.view(),
            l.private_a.view(),
            l.shared.row(obs),
            l.aerial_private.row(obs),
            l.aerial_noise.row(obs),
            cfg.shared_signal,
            cfg.noise_sigma,
        ))
    }
}

fn compose_view(
    shared_map: ArrayView2<'_, f64>,
    private_map: ArrayView2<'_, f64>,
    shared: ArrayView1<'_, f64>,
    private: ArrayView1<'_, f64>,
    noise: ArrayView1<'_, f64>,
    s: f64,
    sigma: f64,
) -> Array1<f64> {
    let mut out = Array1::zeros(shared_map.nrows());
    for d in 0..out.len() {
        let mut a = 0.0;
        for (m, z) in shared_map.row(d).iter().zip(shared.iter()) {
            a += m * z;
        }
        let mut b = 0.0;
        for (m, p) in private_map.row(d).iter().zip(private.iter()) {
            b += m * p;
        }
        out[d] = s * a + (1.0 - s) * b + sigma * noise[d];
    }
    out
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Positional factor: `sqrt(2) cos(W u + b)` for position `u` in kilometers.
fn location_factor(freq: ArrayView2<'_, f64>, phase: ArrayView1<'_, f64>, east_km: f64, north_km: f64) -> Array1<f64> {
    Array1::from_shape_fn(phase.len(), |l| {
        std::f64::consts::SQRT_2 * (freq[[l, 0]] * east_km + freq[[l, 1]] * north_km + phase[l]).cos()
    })
}

fn sample_index(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Generates a corpus; a pure function of the configuration.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent_dim;
    let mix_scale = 1.0 / (l as f64).sqrt();

    let class_factors = gaussian_matrix(&mut rng, cfg.n_classes, l, 1.0);
    let length_km = cfg.location_length_m / 1000.0;
    let location_frequencies = gaussian_matrix(&mut rng, l, 2, 1.0 / length_km);
    let location_phases =
        Array1::from_shape_fn(l, |_| rng.random_range(0.0..2.0 * std::f64::consts::PI));
    let shared_gl = gaussian_matrix(&mut rng, cfg.view_dim_gl, l, mix_scale);
    let private_gl = gaussian_matrix(&mut rng, cfg.view_dim_gl, l, mix_scale);
    let shared_a = gaussian_matrix(&mut rng, cfg.view_dim_a, l, mix_scale);
    let private_a = gaussian_matrix(&mut rng, cfg.view_dim_a, l, mix_scale);

    let centers: Vec<(f64, f64)> = (0..cfg.n_clusters)
        .map(|_| {
            (
                cfg.origin_lat + rng.random_range(0.0..cfg.window_deg),
                cfg.origin_lon + rng.random_range(0.0..cfg.window_deg),
            )
        })
        .collect();

    let mut cdf = cfg.class_prior();
    for i in 1..cdf.len() {
        cdf[i] += cdf[i - 1];
    }
    let spread = Normal::new(0.0, cfg.cluster_scale_m).expect("validated scale");
    let extra_views = (cfg.mean_views_per_obs > 1.0)
        .then(|| Poisson::new(cfg.mean_views_per_obs - 1.0).expect("validated mean"));

    let n = cfg.n_observations;
    let mut observations = Vec::with_capacity(n);
    let mut true_class = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    let mut shared = Array2::zeros((n, l));
    let mut view_counts = Vec::with_capacity(n);

    for o in 0..n {
        let y = sample_index(&cdf, rng.random::<f64>());
        let c = rng.random_range(0..cfg.n_clusters);
        let (clat, clon) = centers[c];
        let north_m = spread.sample(&mut rng);
        let east_m = spread.sample(&mut rng);
        let lat = (clat + north_m / METERS_PER_DEG).clamp(-90.0, 90.0);
        let lon_scale = METERS_PER_DEG * lat.to_radians().cos().max(1e-6);
        let lon = (clon + east_m / lon_scale).clamp(-180.0, 180.0);
        let views = 1 + extra_views.as_ref().map_or(0, |p| p.sample(&mut rng) as u32);
        let research_grade = rng.random_bool(cfg.research_grade_rate);
        let species_level = rng.random_bool(cfg.species_level_rate);

        let east_km = (lon - cfg.origin_lon) * lat.to_radians().cos() * METERS_PER_DEG / 1000.0;
        let north_km = (lat - cfg.origin_lat) * METERS_PER_DEG / 1000.0;
        let g = location_factor(location_frequencies.view(), location_phases.view(), east_km, north_km);
        for k in 0..l {
            shared[[o, k]] = class_factors[[y, k]] + cfg.location_weight * g[k];
        }

        observations.push(ObservationRecord {
            obs_id: format!("obs-{o:06}"),
            lat,
            lon,
            class_id: species_level.then_some(y as u32),
            research_grade,
            species_level,
            group_id: (c % cfg.n_groups) as i64,
            n_ground_views: views,
        });
        true_class.push(y);
        cluster.push(c);
        view_counts.push(views as usize);
    }

    let n_images: usize = view_counts.iter().sum();
    let ground_private = gaussian_matrix(&mut rng, n_images, l, 1.0);
    let ground_noise = gaussian_matrix(&mut rng, n_images, cfg.view_dim_gl, 1.0);
    let aerial_private = gaussian_matrix(&mut rng, n, l, 1.0);
    let aerial_noise = gaussian_matrix(&mut rng, n, cfg.view_dim_a, 1.0);

    let mut ground_data = Array2::zeros((n_images, cfg.view_dim_gl));
    let mut ground_ids = Vec::with_capacity(n_images);
    let mut ground_owner = Vec::with_capacity(n_images);
    let mut row = 0;
    for (o, &count) in view_counts.iter().enumerate() {
        for j in 0..count {
            let v = compose_view(
                shared_gl.view(),
                private_gl.view(),
                shared.row(o),
                ground_private.row(row),
                ground_noise.row(row),
                cfg.shared_signal,
                cfg.noise_sigma,
            );
            ground_data.row_mut(row).assign(&v);
            ground_ids.push(format!("{}/{j}", observations[o].obs_id));
            ground_owner.push(o);
            row += 1;
        }
    }
    let mut aerial_data = Array2::zeros((n, cfg.view_dim_a));
    for o in 0..n {
        let v = compose_view(
            shared_a.view(),
            private_a.view(),
            shared.row(o),
            aerial_private.row(o),
            aerial_noise.row(o),
            cfg.shared_signal,
            cfg.noise_sigma,
        );
        aerial_data.row_mut(o).assign(&v);
    }

    Ok(SynthCorpus {
        config: Some(cfg.clone()),
        ground: ViewSet {
            ids: ground_ids,
            obs_index: ground_owner,
            data: ground_data,
        },
        aerial: ViewSet {
            ids: observations.iter().map(|o| o.obs_id.clone()).collect(),
            obs_index: (0..n).collect(),
            data: aerial_data,
        },
        observations,
        latents: Some(SynthLatents {
            class_factors,
            location_frequencies,
            location_phases,
            shared_gl,
            private_gl,
            shared_a,
            private_a,
            true_class,
            cluster,
            shared,
            ground_private,
            ground_noise,
            aerial_private,
            aerial_noise,
        }),
    })
}

/// Observation, image and class bookkeeping for a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub observations: usize,
    pub images: usize,
    pub classes: usize,
    pub unlabeled_observations: usize,
    pub class_histogram: BTreeMap<u32, usize>,
    pub views_histogram: BTreeMap<u32, usize>,
    pub mean_views_per_obs: f64,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
}

pub fn corpus_stats(corpus: &SynthCorpus) -> Result<CorpusStats> {
    if corpus.observations.is_empty() {
        return Err(CrispError::EmptySet);
    }
    let mut class_histogram = BTreeMap::new();
    let mut views_histogram = BTreeMap::new();
    let mut unlabeled = 0;
    let mut images = 0usize;
    let (mut lat_lo, mut lat_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_lo, mut lon_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for o in &corpus.observations {
        match o.class_id {
            Some(c) => *class_histogram.entry(c).or_insert(0) += 1,
            None => unlabeled += 1,
        }
        *views_histogram.entry(o.n_ground_views).or_insert(0) += 1;
        images += o.n_ground_views as usize;
        lat_lo = lat_lo.min(o.lat);
        lat_hi = lat_hi.max(o.lat);
        lon_lo = lon_lo.min(o.lon);
        lon_hi = lon_hi.max(o.lon);
    }
    Ok(CorpusStats {
        observations: corpus.observations.len(),
        images,
        classes: class_histogram.len(),
        unlabeled_observations: unlabeled,
        mean_views_per_obs: images as f64 / corpus.observations.len() as f64,
        class_histogram,
        views_histogram,
        lat_range: (lat_lo, lat_hi),
        lon_range: (lon_lo, lon_hi),
    })
}
