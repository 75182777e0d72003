//! Late fusion of the two views: a scalar gate mixes linear projections of
//! the ground-level and aerial features.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::classify::{
    encode_features, epoch_batches, init_rng, order_rng, select_rows, smoothed_cross_entropy, top1_accuracy,
    FinetuneConfig, FinetuneEpoch, Features,
};
use super::checkpoint::RngState;
use super::mlp::ToyEncoder;
use super::optim::SgdMomentum;
use crate::error::{CrispError, Result};
use crate::loss::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct MoEHead {
    pub proj_gl: ToyEncoder,
    pub proj_a: ToyEncoder,
    /// Mixing coefficient is `sigmoid(gate)`.
    pub gate: f64,
}

#[derive(Debug, Clone)]
pub struct MoEGrads {
    pub proj_gl: Vec<f64>,
    pub proj_a: Vec<f64>,
    pub gate: f64,
    pub e_gl: Array2<f64>,
    pub e_a: Array2<f64>,
}

impl MoEHead {
    pub fn new<R: Rng + ?Sized>(dim_gl: usize, dim_a: usize, n_classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj_gl: ToyEncoder::new(&[dim_gl, n_classes], rng)?,
            proj_a: ToyEncoder::new(&[dim_a, n_classes], rng)?,
            gate: 0.0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.proj_gl.embed_dim()
    }

    pub fn mix(&self) -> f64 {
        sigmoid(self.gate)
    }

    fn check(&self, e_gl: ArrayView2<'_, f64>, e_a: ArrayView2<'_, f64>) -> Result<()> {
        if self.proj_gl.embed_dim() != self.proj_a.embed_dim() {
            return Err(CrispError::ShapeMismatch(format!(
                "projections emit {} and {} classes",
                self.proj_gl.embed_dim(),
                self.proj_a.embed_dim()
            )));
        }
        if e_gl.nrows() != e_a.nrows() {
            return Err(CrispError::ShapeMismatch(format!(
                "{} ground rows vs {} aerial rows",
                e_gl.nrows(),
                e_a.nrows()
            )));
        }
        Ok(())
    }
}

/// `sigmoid(v) proj_gl(e_gl) + (1 - sigmoid(v)) proj_a(e_a)`.
pub fn moe_forward(head: &MoEHead, e_gl: ArrayView2<'_, f64>, e_a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    head.check(e_gl, e_a)?;
    let s = head.mix();
    let p_gl = head.proj_gl.embed(e_gl)?;
    let p_a = head.proj_a.embed(e_a)?;
    Ok(p_gl * s + p_a * (1.0 - s))
}

pub fn moe_backward(
    head: &MoEHead,
    e_gl: ArrayView2<'_, f64>,
    e_a: ArrayView2<'_, f64>,
    grad_logits: ArrayView2<'_, f64>,
) -> Result<MoEGrads> {
    head.check(e_gl, e_a)?;
    let s = head.mix();
    let c_gl = head.proj_gl.forward(e_gl)?;
    let c_a = head.proj_a.forward(e_a)?;
    if grad_logits.dim() != c_gl.output.dim() {
        return Err(CrispError::ShapeMismatch(format!(
            "logit gradient {:?} vs logits {:?}",
            grad_logits.dim(),
            c_gl.output.dim()
        )));
    }
    let gate = s * (1.0 - s) * (&grad_logits * &(&c_gl.output - &c_a.output)).sum();
    let (proj_gl, e_gl_grad) = head.proj_gl.backward(&c_gl, (&grad_logits * s).view())?;
    let (proj_a, e_a_grad) = head.proj_a.backward(&c_a, (&grad_logits * (1.0 - s)).view())?;
    Ok(MoEGrads {
        proj_gl,
        proj_a,
        gate,
        e_gl: e_gl_grad,
        e_a: e_a_grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEClassifier {
    pub gl_encoder: ToyEncoder,
    pub a_encoder: ToyEncoder,
    pub head: MoEHead,
}

impl MoEClassifier {
    pub fn logits(&self, x_gl: ArrayView2<'_, f64>, x_a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        moe_forward(
            &self.head,
            encode_features(&self.gl_encoder, x_gl)?.view(),
            encode_features(&self.a_encoder, x_a)?.view(),
        )
    }
}

/// Paired ground-level and aerial inputs with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct PairedLabeledSet<'a> {
    pub x_gl: ArrayView2<'a, f64>,
    pub x_a: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

impl<'a> PairedLabeledSet<'a> {
    pub fn new(x_gl: ArrayView2<'a, f64>, x_a: ArrayView2<'a, f64>, y: &'a [usize]) -> Result<Self> {
        if x_gl.nrows() != y.len() || x_a.nrows() != y.len() {
            return Err(CrispError::ShapeMismatch(format!(
                "{} ground rows and {} aerial rows for {} labels",
                x_gl.nrows(),
                x_a.nrows(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(CrispError::EmptySubset);
        }
        Ok(Self { x_gl, x_a, y })
    }
}

#[derive(Debug, Clone)]
pub struct MoEFinetuneOutput {
    pub classifier: MoEClassifier,
    pub best_epoch: usize,
    pub history: Vec<FinetuneEpoch>,
    pub steps: usize,
    pub rng: RngState,
}

/// Trains both encoders (unless frozen) and the fusion head together.
pub fn finetune_moe(
    gl_encoder: &ToyEncoder,
    a_encoder: &ToyEncoder,
    train: PairedLabeledSet<'_>,
    val: Option<PairedLabeledSet<'_>>,
    n_classes: usize,
    config: &FinetuneConfig,
) -> Result<MoEFinetuneOutput> {
    config.validate()?;
    if n_classes < 2 {
        return Err(CrispError::InvalidConfig(format!("need at least 2 classes, got {n_classes}")));
    }
    let labels = train.y.iter().chain(val.iter().flat_map(|v| v.y.iter()));
    if let Some(&target) = labels.into_iter().find(|&&t| t >= n_classes) {
        return Err(CrispError::InvalidTarget { target, n_classes });
    }
    let mut model = MoEClassifier {
        gl_encoder: gl_encoder.clone(),
        a_encoder: a_encoder.clone(),
        head: MoEHead::new(gl_encoder.embed_dim(), a_encoder.embed_dim(), n_classes, &mut init_rng(config.seed))?,
    };
    let mut order = order_rng(config.seed);
    let n = train.y.len();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let mut opt_pg = SgdMomentum::new(config.sgd(total), model.head.proj_gl.params().len());
    let mut opt_pa = SgdMomentum::new(config.sgd(total), model.head.proj_a.params().len());
    let mut opt_gate = SgdMomentum::new(config.sgd(total), 1);
    let mut opt_gl = SgdMomentum::new(config.sgd(total), model.gl_encoder.params().len());
    let mut opt_a = SgdMomentum::new(config.sgd(total), model.a_encoder.params().len());
    let masks = (
        model.head.proj_gl.decay_mask(),
        model.head.proj_a.decay_mask(),
        model.gl_encoder.decay_mask(),
        model.a_encoder.decay_mask(),
    );

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MoEClassifier)> = None;
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut lr = opt_gate.current_lr();
        for rows in epoch_batches(n, config.batch_size, &mut order) {
            let targets: Vec<usize> = rows.iter().map(|&r| train.y[r]).collect();
            let xg = select_rows(train.x_gl, &rows);
            let xa = select_rows(train.x_a, &rows);
            let cg = model.gl_encoder.forward(xg.view())?;
            let ca = model.a_encoder.forward(xa.view())?;
            let fg = Features::from_embeddings(cg.output.view())?;
            let fa = Features::from_embeddings(ca.output.view())?;
            let logits = moe_forward(&model.head, fg.values.view(), fa.values.view())?;
            let (loss, g) = smoothed_cross_entropy(logits.view(), &targets, config.label_smoothing)?;
            let grads = moe_backward(&model.head, fg.values.view(), fa.values.view(), g.view())?;
            lr = opt_pg.step(model.head.proj_gl.params_mut(), &grads.proj_gl, &masks.0)?;
            opt_pa.step(model.head.proj_a.params_mut(), &grads.proj_a, &masks.1)?;
            opt_gate.step(std::slice::from_mut(&mut model.head.gate), &[grads.gate], &[false])?;
            if !config.freeze_encoder {
                let (gg, _) = model.gl_encoder.backward(&cg, fg.backward(grads.e_gl.view()).view())?;
                let (ga, _) = model.a_encoder.backward(&ca, fa.backward(grads.e_a.view()).view())?;
                opt_gl.step(model.gl_encoder.params_mut(), &gg, &masks.2)?;
                opt_a.step(model.a_encoder.params_mut(), &ga, &masks.3)?;
            }
            loss_sum += loss * rows.len() as f64;
        }
        let train_top1 = top1_accuracy(model.logits(train.x_gl, train.x_a)?.view(), train.y);
        let val_top1 = match &val {
            Some(v) => Some(top1_accuracy(model.logits(v.x_gl, v.x_a)?.view(), v.y)),
            None => None,
        };
        history.push(FinetuneEpoch {
            epoch,
            loss: loss_sum / n as f64,
            lr,
            train_top1,
            val_top1,
        });
        if let Some(acc) = val_top1 {
            if best.as_ref().is_none_or(|(b, ..)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
    }
    let (best_epoch, classifier) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs - 1, model),
    };
    Ok(MoEFinetuneOutput {
        classifier,
        best_epoch,
        history,
        steps: total,
        rng: RngState::capture(config.seed, &order),
    })
}
