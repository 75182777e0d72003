use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::mlp::ToyEncoder;
use super::optim::{SgdConfig, SgdMomentum, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::embed::{normalize_rows, normalize_rows_backward};
use crate::error::{CrispError, Result};

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Cross-entropy against `(1 - eps) onehot(target) + eps / K`.
/// Returns the loss and its gradient with respect to the logits.
pub fn label_smoothing_ce(logits: ArrayView1<'_, f64>, target: usize, epsilon: f64) -> Result<(f64, Array1<f64>)> {
    let k = logits.len();
    if k < 2 {
        return Err(CrispError::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(CrispError::InvalidConfig(format!("label smoothing must be in [0, 1), got {epsilon}")));
    }
    if target >= k {
        return Err(CrispError::InvalidTarget { target, n_classes: k });
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_z = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let off = epsilon / k as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(k);
    for j in 0..k {
        let q = if j == target { 1.0 - epsilon + off } else { off };
        let log_p = logits[j] - log_z;
        loss -= q * log_p;
        grad[j] = log_p.exp() - q;
    }
    Ok((loss, grad))
}

/// Mean smoothed cross-entropy over the rows of a logit matrix.
pub fn smoothed_cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize], epsilon: f64) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(CrispError::ShapeMismatch(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(CrispError::EmptySubset);
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for (i, &t) in targets.iter().enumerate() {
        let (l, g) = label_smoothing_ce(logits.row(i), t, epsilon)?;
        total += l;
        grad.row_mut(i).assign(&(g / n));
    }
    Ok((total / n, grad))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn top1_accuracy(logits: ArrayView2<'_, f64>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = logits
        .outer_iter()
        .zip(targets)
        .filter(|(row, &t)| argmax(row.view()) == t)
        .count();
    hits as f64 / targets.len() as f64
}

/// Encoder output, L2-normalized and rescaled to norm `sqrt(dim)` so that
/// each coordinate is of order one.
#[derive(Debug, Clone)]
pub struct Features {
    pub values: Array2<f64>,
    unit: Array2<f64>,
    norms: Array1<f64>,
    scale: f64,
}

impl Features {
    pub fn from_embeddings(raw: ArrayView2<'_, f64>) -> Result<Self> {
        let (unit, norms) = normalize_rows(raw)?;
        let scale = (raw.ncols() as f64).sqrt();
        Ok(Self {
            values: &unit * scale,
            unit,
            norms,
            scale,
        })
    }

    /// Gradient with respect to the raw embeddings.
    pub fn backward(&self, grad_values: ArrayView2<'_, f64>) -> Array2<f64> {
        normalize_rows_backward(self.unit.view(), self.norms.view(), (&grad_values * self.scale).view())
    }
}

pub fn encode_features(encoder: &ToyEncoder, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(Features::from_embeddings(encoder.embed(x)?.view())?.values)
}

/// Encoder followed by a linear head on normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: ToyEncoder,
    pub head: ToyEncoder,
}

impl Classifier {
    pub fn n_classes(&self) -> usize {
        self.head.embed_dim()
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.head.embed(encode_features(&self.encoder, x)?.view())
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.outer_iter().map(|r| argmax(r)).collect())
    }
}

/// Inputs with one class index per row.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

impl<'a> LabeledSet<'a> {
    pub fn new(x: ArrayView2<'a, f64>, y: &'a [usize]) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(CrispError::ShapeMismatch(format!("{} rows for {} labels", x.nrows(), y.len())));
        }
        if y.is_empty() {
            return Err(CrispError::EmptySubset);
        }
        Ok(Self { x, y })
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        match self.y.iter().find(|&&t| t >= n_classes) {
            Some(&target) => Err(CrispError::InvalidTarget { target, n_classes }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Train the head only.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 256,
            lr: 0.01,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Head-only training on frozen features: convex, so it gets a longer
    /// and faster schedule than end-to-end fine-tuning.
    pub fn probe() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            freeze_encoder: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrispError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
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
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        Ok(())
    }

    pub(crate) fn sgd(&self, total_steps: usize) -> SgdConfig {
        SgdConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            total_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub classifier: Classifier,
    /// Epoch whose parameters were kept (the last one without validation data).
    pub best_epoch: usize,
    pub history: Vec<FinetuneEpoch>,
    pub steps: usize,
    pub rng: RngState,
}

pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Seeds for parameter initialisation and for data order, kept apart so
/// that changing one does not perturb the other.
pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub(crate) fn order_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Attaches a fresh linear head and trains with smoothed cross-entropy,
/// keeping the epoch with the best validation Top-1 (earliest on ties).
pub fn finetune(
    encoder: &ToyEncoder,
    train: LabeledSet<'_>,
    val: Option<LabeledSet<'_>>,
    n_classes: usize,
    config: &FinetuneConfig,
) -> Result<FinetuneOutput> {
    config.validate()?;
    if n_classes < 2 {
        return Err(CrispError::InvalidConfig(format!("need at least 2 classes, got {n_classes}")));
    }
    train.check_labels(n_classes)?;
    if let Some(v) = &val {
        v.check_labels(n_classes)?;
    }
    let mut encoder = encoder.clone();
    let mut head = ToyEncoder::new(&[encoder.embed_dim(), n_classes], &mut init_rng(config.seed))?;
    let mut order = order_rng(config.seed);
    let n = train.y.len();
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    let mut head_opt = SgdMomentum::new(config.sgd(total_steps), head.params().len());
    let mut enc_opt = SgdMomentum::new(config.sgd(total_steps), encoder.params().len());
    let head_mask = head.decay_mask();
    let enc_mask = encoder.decay_mask();

    let frozen_features = if config.freeze_encoder {
        Some(encode_features(&encoder, train.x)?)
    } else {
        None
    };
    let val_features = match (&val, config.freeze_encoder) {
        (Some(v), true) => Some(encode_features(&encoder, v.x)?),
        _ => None,
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ToyEncoder, ToyEncoder)> = None;
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut lr = head_opt.current_lr();
        let batches = epoch_batches(n, config.batch_size, &mut order);
        for rows in &batches {
            let targets: Vec<usize> = rows.iter().map(|&r| train.y[r]).collect();
            if let Some(feats) = &frozen_features {
                let f = select_rows(feats.view(), rows);
                let cache = head.forward(f.view())?;
                let (loss, g) = smoothed_cross_entropy(cache.output.view(), &targets, config.label_smoothing)?;
                let (gh, _) = head.backward(&cache, g.view())?;
                lr = head_opt.step(head.params_mut(), &gh, &head_mask)?;
                loss_sum += loss * rows.len() as f64;
            } else {
                let xb = select_rows(train.x, rows);
                let enc_cache = encoder.forward(xb.view())?;
                let feats = Features::from_embeddings(enc_cache.output.view())?;
                let cache = head.forward(feats.values.view())?;
                let (loss, g) = smoothed_cross_entropy(cache.output.view(), &targets, config.label_smoothing)?;
                let (gh, gf) = head.backward(&cache, g.view())?;
                let (ge, _) = encoder.backward(&enc_cache, feats.backward(gf.view()).view())?;
                lr = head_opt.step(head.params_mut(), &gh, &head_mask)?;
                enc_opt.step(encoder.params_mut(), &ge, &enc_mask)?;
                loss_sum += loss * rows.len() as f64;
            }
        }
        let train_logits = match &frozen_features {
            Some(f) => head.embed(f.view())?,
            None => head.embed(encode_features(&encoder, train.x)?.view())?,
        };
        let val_top1 = match &val {
            Some(v) => {
                let logits = match &val_features {
                    Some(f) => head.embed(f.view())?,
                    None => head.embed(encode_features(&encoder, v.x)?.view())?,
                };
                Some(top1_accuracy(logits.view(), v.y))
            }
            None => None,
        };
        history.push(FinetuneEpoch {
            epoch,
            loss: loss_sum / n as f64,
            lr,
            train_top1: top1_accuracy(train_logits.view(), train.y),
            val_top1,
        });
        if let Some(acc) = val_top1 {
            if best.as_ref().is_none_or(|(b, ..)| acc > *b) {
                best = Some((acc, epoch, encoder.clone(), head.clone()));
            }
        }
    }
    let (best_epoch, encoder, head) = match best {
        Some((_, e, enc, h)) => (e, enc, h),
        None => (config.epochs - 1, encoder, head),
    };
    Ok(FinetuneOutput {
        classifier: Classifier { encoder, head },
        best_epoch,
        history,
        steps: total_steps,
        rng: RngState::capture(config.seed, &order),
    })
}

#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub classifier: Classifier,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub history: Vec<FinetuneEpoch>,
}

/// Fits a linear head on frozen encoder features.
pub fn linear_probe(
    encoder: &ToyEncoder,
    train: LabeledSet<'_>,
    val: Option<LabeledSet<'_>>,
    n_classes: usize,
    config: &FinetuneConfig,
) -> Result<ProbeOutput> {
    let config = FinetuneConfig {
        freeze_encoder: true,
        ..*config
    };
    let out = finetune(encoder, train, val, n_classes, &config)?;
    let train_accuracy = top1_accuracy(out.classifier.logits(train.x)?.view(), train.y);
    let val_accuracy = match &val {
        Some(v) => Some(top1_accuracy(out.classifier.logits(v.x)?.view(), v.y)),
        None => None,
    };
    Ok(ProbeOutput {
        classifier: out.classifier,
        train_accuracy,
        val_accuracy,
        history: out.history,
    })
}
