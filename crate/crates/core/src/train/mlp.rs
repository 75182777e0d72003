use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{CrispError, Result};

/// Multi-layer perceptron with `tanh` between layers and a linear output.
///
/// Parameters live in one flat vector; each layer stores its weight matrix
/// (`out x in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl ToyEncoder {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_dims(dims)?;
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_dims(dims)?;
        if params.len() != param_count(dims) {
            return Err(CrispError::ShapeMismatch(format!(
                "{} parameters for architecture {dims:?} (expected {})",
                params.len(),
                param_count(dims)
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(CrispError::InvalidConfig(format!(
                "encoder needs at least an input and output width, all positive; got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// True for weights, false for biases (which are exempt from decay).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.dims.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let offset: usize = param_count(&self.dims[..=l]);
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (
            ArrayView2::from_shape((fan_out, fan_in), w).unwrap(),
            ArrayView1::from(b),
        )
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(CrispError::ShapeMismatch(format!(
                "input has {} columns, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut a = x.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut h = a.dot(&w.t());
            h += &b;
            if l + 1 < self.n_layers() {
                h.mapv_inplace(f64::tanh);
            }
            inputs.push(std::mem::replace(&mut a, h));
        }
        Ok(ForwardCache { inputs, output: a })
    }

    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Returns the flat parameter gradient and the gradient with respect to
    /// the input batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if grad_out.dim() != cache.output.dim() {
            return Err(CrispError::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.dim(),
                cache.output.dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let (w, _) = self.layer(l);
            let a_in = &cache.inputs[l];
            let g_w = delta.t().dot(a_in);
            let g_b: Array1<f64> = delta.sum_axis(Axis(0));
            let offset = param_count(&self.dims[..=l]);
            let n_w = g_w.len();
            for (dst, src) in grads[offset..offset + n_w].iter_mut().zip(g_w.iter()) {
                *dst = *src;
            }
            for (dst, src) in grads[offset + n_w..offset + n_w + g_b.len()].iter_mut().zip(g_b.iter()) {
                *dst = *src;
            }
            let mut g_in = delta.dot(&w);
            if l > 0 {
                // a_in = tanh(h), so d tanh = 1 - a_in^2
                g_in.zip_mut_with(a_in, |g, a| *g *= 1.0 - a * a);
            }
            delta = g_in;
        }
        Ok((grads, delta))
    }
}
