//! Contrastive pre-training of a ground-level/aerial encoder pair.
//!
//! Batches are drawn over observations: each sampled observation contributes
//! its aerial view once and one of its ground-level views, chosen uniformly.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::classify::{init_rng, order_rng};
use super::mlp::ToyEncoder;
use super::optim::{SgdConfig, SgdMomentum, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::augment::{apply_augmentation, AugmentDraw, REFERENCE_CROP};
use crate::embed::EmbeddingBatch;
use crate::error::{CrispError, Result};
use crate::geo::GeoPoint;
use crate::loss::{
    many_to_one_crisp_loss_with, parameterized_crisp_loss, standard_crisp_loss, LossResult, LossWeight,
    ManyToOneOptions, PairedBatch, Temperature, DEFAULT_COLOCATION_RADIUS_M,
};
use crate::synth::{raster_side, SynthCorpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Standard,
    /// Standard objective on randomly cropped, flipped and rotated aerial rasters.
    Aug,
    /// Many-to-one objective over co-located views.
    M2o,
    /// Learned weighting of the two directions.
    Par,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Standard, Objective::Aug, Objective::M2o, Objective::Par];

    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Standard => "standard",
            Objective::Aug => "aug",
            Objective::M2o => "m2o",
            Objective::Par => "par",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = CrispError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| CrispError::InvalidConfig(format!("unknown objective `{s}` (standard, aug, m2o, par)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: Temperature,
    pub radius_m: f64,
    pub dedupe_denominator: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Aerial crop edge for `aug`; defaults to the 100/256 reference ratio
    /// of the raster side.
    pub aug_crop: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Standard,
            epochs: 12,
            batch_size: 350,
            lr: 0.01,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            temperature: Temperature::default(),
            radius_m: DEFAULT_COLOCATION_RADIUS_M,
            dedupe_denominator: false,
            hidden_dim: 64,
            embed_dim: 32,
            aug_crop: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrispError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("epochs, batch_size, hidden_dim and embed_dim must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be nonnegative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.radius_m >= 0.0 && self.radius_m.is_finite()) {
            return bad(format!("radius_m must be nonnegative, got {}", self.radius_m));
        }
        self.temperature.tau()?;
        Ok(())
    }
}

/// Geometry of a flattened `(channels, side, side)` aerial raster and the
/// crop taken from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AerialCrop {
    pub channels: usize,
    pub side: usize,
    pub crop: usize,
}

impl AerialCrop {
    pub fn for_corpus(corpus: &SynthCorpus, crop: Option<usize>) -> Result<Self> {
        let channels = corpus.config.as_ref().map_or(1, |c| c.aerial_channels);
        let dim = corpus.aerial.dim();
        let side = raster_side(dim, channels).ok_or_else(|| {
            CrispError::InvalidConfig(format!(
                "aerial views of length {dim} are not square rasters with {channels} channels"
            ))
        })?;
        let crop = crop.unwrap_or_else(|| ((side * REFERENCE_CROP) as f64 / 256.0).round().max(1.0) as usize);
        if crop == 0 || crop > side {
            return Err(CrispError::CropLargerThanImage {
                crop,
                height: side,
                width: side,
            });
        }
        Ok(Self { channels, side, crop })
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.crop * self.crop
    }
}

/// Aerial encoder inputs for `rows` of `data`. With a crop, each row is
/// cropped at random when `rng` is given and centered otherwise.
pub fn aerial_inputs(
    data: ArrayView2<'_, f64>,
    rows: &[usize],
    crop: Option<AerialCrop>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Array2<f64>> {
    let Some(c) = crop else {
        return Ok(data.select(ndarray::Axis(0), rows));
    };
    let mut out = Array2::zeros((rows.len(), c.input_dim()));
    for (i, &r) in rows.iter().enumerate() {
        let row = data.row(r);
        let raster = ArrayView3::from_shape((c.channels, c.side, c.side), row.as_slice().unwrap())
            .map_err(|e| CrispError::ShapeMismatch(e.to_string()))?;
        let draw = match rng.as_deref_mut() {
            Some(g) => AugmentDraw::sample(g, c.side, c.side, c.crop)?,
            None => AugmentDraw::centered(c.side, c.side, c.crop)?,
        };
        let img = apply_augmentation(raster, c.crop, draw)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(img.as_slice().unwrap()));
    }
    Ok(out)
}

/// The two encoders and everything needed to embed new inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub objective: Objective,
    pub gl: ToyEncoder,
    pub a: ToyEncoder,
    pub aerial_crop: Option<AerialCrop>,
    /// Set for the parameterized objective.
    pub weight: Option<LossWeight>,
}

impl EncoderPair {
    pub fn embed_ground(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.gl.embed(x)
    }

    /// Aerial inputs for evaluation (center crop when trained with crops).
    pub fn aerial_eval_inputs(&self, data: ArrayView2<'_, f64>, rows: &[usize]) -> Result<Array2<f64>> {
        aerial_inputs(data, rows, self.aerial_crop, None)
    }

    pub fn embed_aerial(&self, data: ArrayView2<'_, f64>, rows: &[usize]) -> Result<Array2<f64>> {
        self.a.embed(self.aerial_eval_inputs(data, rows)?.view())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Epochs completed.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub encoders: EncoderPair,
    pub history: Vec<EpochLog>,
    /// Mean loss over one fixed evaluation pass, before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub rng: RngState,
}

struct Batch {
    obs: Vec<usize>,
    ground_rows: Vec<usize>,
}

fn draw_batches(obs: &[usize], rows_by_obs: &[Vec<usize>], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut order = obs.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch {
            obs: chunk.to_vec(),
            ground_rows: chunk
                .iter()
                .map(|&o| {
                    let rows = &rows_by_obs[o];
                    rows[rng.random_range(0..rows.len())]
                })
                .collect(),
        })
        .collect()
}

struct Setup<'c> {
    corpus: &'c SynthCorpus,
    rows_by_obs: Vec<Vec<usize>>,
    ids: Vec<String>,
    tau: f64,
    config: PretrainConfig,
}

struct StepOutcome {
    result: LossResult,
    gl_cache: super::mlp::ForwardCache,
    a_cache: super::mlp::ForwardCache,
}

impl Setup<'_> {
    fn evaluate(&self, pair: &EncoderPair, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        let xg = self.corpus.ground.data.select(ndarray::Axis(0), &batch.ground_rows);
        let aug_rng = (self.config.objective == Objective::Aug).then_some(rng);
        let xa = aerial_inputs(self.corpus.aerial.data.view(), &batch.obs, pair.aerial_crop, aug_rng)?;
        let gl_cache = pair.gl.forward(xg.view())?;
        let a_cache = pair.a.forward(xa.view())?;
        let b = batch.obs.len();
        let ids = &self.ids[..b];
        let coords = (self.config.objective == Objective::M2o).then(|| {
            batch
                .obs
                .iter()
                .map(|&o| self.corpus.observations[o].point())
                .collect::<Vec<GeoPoint>>()
        });
        let paired = PairedBatch::aligned(
            EmbeddingBatch::new(gl_cache.output.clone(), ids.to_vec())?,
            EmbeddingBatch::new(a_cache.output.clone(), ids.to_vec())?,
            coords,
        )?;
        let result = match self.config.objective {
            Objective::Standard | Objective::Aug => standard_crisp_loss(&paired, self.tau)?,
            Objective::M2o => many_to_one_crisp_loss_with(
                &paired,
                self.tau,
                ManyToOneOptions {
                    radius_m: self.config.radius_m,
                    dedupe_denominator: self.config.dedupe_denominator,
                },
            )?,
            Objective::Par => parameterized_crisp_loss(&paired, self.tau, pair.weight.unwrap_or_default())?,
        };
        Ok(StepOutcome {
            result,
            gl_cache,
            a_cache,
        })
    }

    /// Mean per-observation loss over one pass with a fixed stream.
    fn pass_loss(&self, pair: &EncoderPair, obs: &[usize]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(3);
        let batches = draw_batches(obs, &self.rows_by_obs, self.config.batch_size, &mut rng);
        let mut total = 0.0;
        for b in &batches {
            total += self.evaluate(pair, b, &mut rng)?.result.loss * b.obs.len() as f64;
        }
        Ok(total / obs.len() as f64)
    }
}

/// Trains a fresh encoder pair on the observations `obs` (indices into the
/// corpus).
pub fn pretrain(corpus: &SynthCorpus, obs: &[usize], config: &PretrainConfig) -> Result<PretrainOutput> {
    let mut rng = init_rng(config.seed);
    let aerial_crop = match config.objective {
        Objective::Aug => Some(AerialCrop::for_corpus(corpus, config.aug_crop)?),
        _ => None,
    };
    let a_in = aerial_crop.map_or(corpus.aerial.dim(), |c| c.input_dim());
    let pair = EncoderPair {
        objective: config.objective,
        gl: ToyEncoder::new(&[corpus.ground.dim(), config.hidden_dim, config.embed_dim], &mut rng)?,
        a: ToyEncoder::new(&[a_in, config.hidden_dim, config.embed_dim], &mut rng)?,
        aerial_crop,
        weight: (config.objective == Objective::Par).then(LossWeight::default),
    };
    pretrain_from(corpus, obs, pair, config)
}

/// Continues training an existing encoder pair.
pub fn pretrain_from(
    corpus: &SynthCorpus,
    obs: &[usize],
    mut pair: EncoderPair,
    config: &PretrainConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    if obs.is_empty() {
        return Err(CrispError::EmptyBatch("no observations to pre-train on".into()));
    }
    if config.batch_size > obs.len() {
        return Err(CrispError::InvalidConfig(format!(
            "batch_size {} exceeds the {} available observations",
            config.batch_size,
            obs.len()
        )));
    }
    if let Some(&o) = obs.iter().find(|&&o| o >= corpus.observations.len()) {
        return Err(CrispError::InvalidConfig(format!("observation index {o} out of range")));
    }
    if config.objective == Objective::Par && pair.weight.is_none() {
        pair.weight = Some(LossWeight::default());
    }
    let setup = Setup {
        corpus,
        rows_by_obs: corpus.ground_rows_by_obs(),
        ids: (0..config.batch_size).map(|i| i.to_string()).collect(),
        tau: config.temperature.tau()?,
        config: *config,
    };
    if let Some(o) = obs.iter().find(|&&o| setup.rows_by_obs[o].is_empty()) {
        return Err(CrispError::EmptyBatch(format!(
            "observation {} has no ground-level views",
            corpus.observations[*o].obs_id
        )));
    }

    let initial_loss = setup.pass_loss(&pair, obs)?;
    let steps_per_epoch = obs.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let sgd = SgdConfig {
        base_lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        total_steps,
    };
    let mut opt_gl = SgdMomentum::new(sgd, pair.gl.params().len());
    let mut opt_a = SgdMomentum::new(sgd, pair.a.params().len());
    let mut opt_w = SgdMomentum::new(sgd, 1);
    let mask_gl = pair.gl.decay_mask();
    let mask_a = pair.a.decay_mask();
    let mut order = order_rng(config.seed);
    let start = Instant::now();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let batches = draw_batches(obs, &setup.rows_by_obs, config.batch_size, &mut order);
        let mut loss_sum = 0.0;
        let mut lr = opt_gl.current_lr();
        for b in &batches {
            let out = setup.evaluate(&pair, b, &mut order)?;
            let (g_gl, _) = pair.gl.backward(&out.gl_cache, out.result.grad_gl.view())?;
            let (g_a, _) = pair.a.backward(&out.a_cache, out.result.grad_a.view())?;
            lr = opt_gl.step(pair.gl.params_mut(), &g_gl, &mask_gl)?;
            opt_a.step(pair.a.params_mut(), &g_a, &mask_a)?;
            if let (Some(w), Some(g_w)) = (pair.weight.as_mut(), out.result.grad_w) {
                opt_w.step(std::slice::from_mut(&mut w.w), &[g_w], &[false])?;
            }
            loss_sum += out.result.loss * b.obs.len() as f64;
        }
        history.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / obs.len() as f64,
            lr,
            sigma_w: pair.weight.map(|w| w.sigma()),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let final_loss = setup.pass_loss(&pair, obs)?;
    Ok(PretrainOutput {
        encoders: pair,
        history,
        initial_loss,
        final_loss,
        steps: total_steps,
        rng: RngState::capture(config.seed, &order),
    })
}
