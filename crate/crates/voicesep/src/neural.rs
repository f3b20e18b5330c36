//! Minimal trainable network stack used by both assignment models.
//!
//! Everything runs on 64-bit floats with explicit, seedable initialization.
//! The stack covers exactly what the models need: dense sigmoid layers with a
//! sigmoid or linear head, a convolution-with-max-pooling block over sets of
//! feature vectors, backpropagation, AdaDelta, and L2 regularization applied
//! to weights but not biases. Parameters flatten to a single row-major vector
//! in declared order, which is also the checkpoint format.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("input length {got} does not match expected {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("checkpoint architecture `{got}` does not match expected `{want}`")]
    ArchMismatch { got: String, want: String },
    #[error("checkpoint holds {got} parameters, expected {want}")]
    ParamCount { got: usize, want: usize },
    #[error("failed to parse checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One fully connected layer; `w` is row-major with `out_dim` rows of
/// `in_dim` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    /// Uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let r = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-r..=r)).collect();
        Dense { in_dim, out_dim, w, b: vec![0.0; out_dim] }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { in_dim, out_dim, w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim] }
    }

    /// Pre-activations W·x + b.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|r| {
                let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
                row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b[r]
            })
            .collect()
    }

    /// Accumulates grads for dz = dLoss/d(pre-activation) and returns
    /// dLoss/dx.
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for r in 0..self.out_dim {
            grad.b[r] += dz[r];
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            let grow = &mut grad.w[r * self.in_dim..(r + 1) * self.in_dim];
            for c in 0..self.in_dim {
                grow[c] += dz[r] * x[c];
                dx[c] += row[c] * dz[r];
            }
        }
        dx
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    fn unflatten_from(&mut self, src: &[f64], cursor: &mut usize) {
        let nw = self.w.len();
        self.w.copy_from_slice(&src[*cursor..*cursor + nw]);
        *cursor += nw;
        let nb = self.b.len();
        self.b.copy_from_slice(&src[*cursor..*cursor + nb]);
        *cursor += nb;
    }

    /// true per component when the component is a weight (L2-regularized).
    fn mask_into(&self, out: &mut Vec<bool>) {
        out.extend(std::iter::repeat(true).take(self.w.len()));
        out.extend(std::iter::repeat(false).take(self.b.len()));
    }
}

/// Output nonlinearity of a feedforward net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Probability output σ(w·h).
    Sigmoid,
    /// Raw score output w·h.
    Linear,
}

/// Feedforward net: sigmoid hidden layers, then a head layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub head: Head,
}

/// Activations cached during a forward pass: the input and each layer's
/// post-activation output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("net has layers")
    }
}

impl Mlp {
    /// Builds a net from the full size chain, e.g. `[in, 200, 200, 1]`.
    pub fn init(sizes: &[usize], head: Head, rng: &mut impl Rng) -> Self {
        let layers = sizes.windows(2).map(|p| Dense::init(p[0], p[1], rng)).collect();
        Mlp { layers, head }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            head: self.head,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("net has layers").in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("net has layers").out_dim
    }

    pub fn forward(&self, input: &[f64]) -> Result<MlpCache, NeuralError> {
        if input.len() != self.in_dim() {
            return Err(NeuralError::ShapeMismatch { got: input.len(), want: self.in_dim() });
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&x);
            let last = i + 1 == self.layers.len();
            if !last || self.head == Head::Sigmoid {
                for v in &mut z {
                    *v = sigmoid(*v);
                }
            }
            x = z.clone();
            acts.push(z);
        }
        Ok(MlpCache { input: input.to_vec(), acts })
    }

    /// Backpropagates dLoss/dOutput; accumulates into `grad` and returns
    /// dLoss/dInput.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d_act = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = &cache.acts[i];
            let last = i + 1 == self.layers.len();
            let dz: Vec<f64> = if !last || self.head == Head::Sigmoid {
                d_act.iter().zip(act).map(|(d, a)| d * a * (1.0 - a)).collect()
            } else {
                d_act.clone()
            };
            let x = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            d_act = layer.backward(x, &dz, &mut grad.layers[i]);
        }
        d_act
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.flatten_into(out);
        }
    }

    pub fn unflatten_from(&mut self, src: &[f64], cursor: &mut usize) {
        for l in &mut self.layers {
            l.unflatten_from(src, cursor);
        }
    }

    pub fn mask_into(&self, out: &mut Vec<bool>) {
        for l in &self.layers {
            l.mask_into(out);
        }
    }
}

/// k convolution filters applied to every vector of an input set, followed by
/// componentwise max pooling. Output length is always k; ties route the
/// gradient to the lowest input index; an empty set yields all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMaxPool {
    pub filter: Dense,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub inputs: Vec<Vec<f64>>,
    /// Per input vector, the k sigmoid filter activations.
    pub acts: Vec<Vec<f64>>,
    /// Per filter, the input index that won the max (empty set: none).
    pub argmax: Vec<Option<usize>>,
    pub out: Vec<f64>,
}

impl ConvMaxPool {
    pub fn init(in_dim: usize, k: usize, rng: &mut impl Rng) -> Self {
        ConvMaxPool { filter: Dense::init(in_dim, k, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        ConvMaxPool { filter: Dense::zeros(self.filter.in_dim, self.filter.out_dim) }
    }

    pub fn k(&self) -> usize {
        self.filter.out_dim
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<ConvCache, NeuralError> {
        let mut acts = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.len() != self.filter.in_dim {
                return Err(NeuralError::ShapeMismatch {
                    got: x.len(),
                    want: self.filter.in_dim,
                });
            }
            let mut z = self.filter.affine(x);
            for v in &mut z {
                *v = sigmoid(*v);
            }
            acts.push(z);
        }
        let mut out = vec![0.0; self.k()];
        let mut argmax = vec![None; self.k()];
        for j in 0..self.k() {
            for (i, a) in acts.iter().enumerate() {
                if argmax[j].is_none() || a[j] > out[j] {
                    out[j] = a[j];
                    argmax[j] = Some(i);
                }
            }
        }
        Ok(ConvCache { inputs: inputs.to_vec(), acts, argmax, out })
    }

    /// Backpropagates dLoss/dOut; accumulates filter grads and returns
    /// dLoss/dInput per input vector.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_out: &[f64],
        grad: &mut ConvMaxPool,
    ) -> Vec<Vec<f64>> {
        let mut d_inputs: Vec<Vec<f64>> =
            cache.inputs.iter().map(|x| vec![0.0; x.len()]).collect();
        for j in 0..self.k() {
            let Some(i) = cache.argmax[j] else { continue };
            let a = cache.acts[i][j];
            let dz = d_out[j] * a * (1.0 - a);
            if dz == 0.0 {
                continue;
            }
            let x = &cache.inputs[i];
            grad.filter.b[j] += dz;
            let row = &self.filter.w[j * self.filter.in_dim..(j + 1) * self.filter.in_dim];
            let grow =
                &mut grad.filter.w[j * self.filter.in_dim..(j + 1) * self.filter.in_dim];
            for c in 0..self.filter.in_dim {
                grow[c] += dz * x[c];
                d_inputs[i][c] += row[c] * dz;
            }
        }
        d_inputs
    }

    pub fn n_params(&self) -> usize {
        self.filter.n_params()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.filter.flatten_into(out);
    }

    pub fn unflatten_from(&mut self, src: &[f64], cursor: &mut usize) {
        self.filter.unflatten_from(src, cursor);
    }

    pub fn mask_into(&self, out: &mut Vec<bool>) {
        self.filter.mask_into(out);
    }
}

/// AdaDelta accumulators over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    pub grad_sq: Vec<f64>,
    pub update_sq: Vec<f64>,
}

impl AdaDelta {
    pub fn new(n: usize) -> Self {
        AdaDelta { rho: 0.95, eps: 1e-6, grad_sq: vec![0.0; n], update_sq: vec![0.0; n] }
    }

    /// One AdaDelta step in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.grad_sq.len());
        for i in 0..params.len() {
            let g = grads[i];
            self.grad_sq[i] = self.rho * self.grad_sq[i] + (1.0 - self.rho) * g * g;
            let update = -((self.update_sq[i] + self.eps).sqrt()
                / (self.grad_sq[i] + self.eps).sqrt())
                * g;
            self.update_sq[i] =
                self.rho * self.update_sq[i] + (1.0 - self.rho) * update * update;
            params[i] += update;
        }
    }
}

/// Adds the L2 term λ·θ to `grads`, skipping components whose mask entry is
/// false (biases).
pub fn add_l2(grads: &mut [f64], params: &[f64], lambda: f64, weight_mask: &[bool]) {
    for i in 0..grads.len() {
        if weight_mask[i] {
            grads[i] += lambda * params[i];
        }
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences of `f` at `params`.
pub fn gradient_check(
    params: &mut [f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + h;
        let up = f(params);
        params[i] = saved - h;
        let down = f(params);
        params[i] = saved;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Serialized model state: architecture descriptor, flat parameters in
/// declared order, optional optimizer state, and the hash of the feature
/// configuration the model was trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: String,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdaDelta>,
    pub feature_hash: String,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Validates descriptor and parameter count before a model adopts the
    /// stored parameters.
    pub fn expect(&self, arch: &str, n_params: usize) -> Result<(), NeuralError> {
        if self.arch != arch {
            return Err(NeuralError::ArchMismatch {
                got: self.arch.clone(),
                want: arch.to_string(),
            });
        }
        if self.params.len() != n_params {
            return Err(NeuralError::ParamCount { got: self.params.len(), want: n_params });
        }
        Ok(())
    }
}
