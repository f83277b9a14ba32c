//! Feed-forward networks with tanh hidden layers and a linear output layer.
//!
//! Networks are small enough that everything is hand-differentiated: the
//! input Jacobian feeds the SQP terminal gradient, the parameter gradient
//! feeds the training losses. Batched forward/backward passes are used for
//! training; the single-sample paths are used inside the solver.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Gradients (or any other tensor) with the shape of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpParams) -> Self {
        Self {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.weights.iter_mut().for_each(|w| *w *= a);
        self.biases.iter_mut().for_each(|b| *b *= a);
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &MlpGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o * a;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o * a;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Activations cached by a batched forward pass.
pub struct BatchCache {
    /// `layers[0]` is the input, `layers[l]` the output of layer `l`.
    layers: Vec<DMatrix<f64>>,
}

impl BatchCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.layers.last().expect("cache holds at least the input")
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn new_random(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new_random_with(layer_dims, &mut rng)
    }

    pub fn new_random_with<R: Rng>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-limit..limit)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims
                .windows(2)
                .map(|p| DMatrix::zeros(p[1], p[0]))
                .collect(),
            biases: layer_dims[1..].iter().map(|&n| DVector::zeros(n)).collect(),
        })
    }

    pub fn from_parts(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Dimension(format!(
                "{} weight matrices vs {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].ncols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() || w.nrows() != b.len() {
                return Err(Error::Dimension(format!(
                    "layer {l}: weight {}x{}, bias {}, expected input {}",
                    w.nrows(),
                    w.ncols(),
                    b.len(),
                    dims.last().unwrap()
                )));
            }
            dims.push(w.nrows());
        }
        check_dims(&dims)?;
        let net = Self {
            layer_dims: dims,
            weights,
            biases,
        };
        if !net.flatten().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, n: usize) -> Result<()> {
        if n != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {n}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Hidden activations of one sample; `acts[0]` is the input.
    fn forward_trace(&self, x: &[f64]) -> Vec<DVector<f64>> {
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(DVector::from_column_slice(x));
        for l in 0..self.num_layers() {
            let mut z = &self.weights[l] * &acts[l] + &self.biases[l];
            if l + 1 < self.num_layers() {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x.len())?;
        Ok(self.forward_trace(x).pop().unwrap())
    }

    /// First output only; convenience for scalar heads.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?[0])
    }

    /// Jacobian of the output w.r.t. the input, `output_dim x input_dim`.
    pub fn grad_input(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x.len())?;
        let acts = self.forward_trace(x);
        let last = self.num_layers() - 1;
        // rows: outputs, columns: units of the current layer
        let mut jac = self.weights[last].clone();
        for l in (0..last).rev() {
            let h = &acts[l + 1];
            for (j, mut col) in jac.column_iter_mut().enumerate() {
                col *= 1.0 - h[j] * h[j];
            }
            jac = jac * &self.weights[l];
        }
        Ok(jac)
    }

    /// Value and input gradient of the first output.
    pub fn value_and_grad(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        self.check_input(x.len())?;
        let acts = self.forward_trace(x);
        let last = self.num_layers() - 1;
        let value = acts[last + 1][0];
        let mut g: DVector<f64> = self.weights[last].row(0).transpose();
        for l in (0..last).rev() {
            let h = &acts[l + 1];
            g.iter_mut().zip(h.iter()).for_each(|(g, h)| *g *= 1.0 - h * h);
            g = self.weights[l].tr_mul(&g);
        }
        Ok((value, g))
    }

    /// Gradient of `<upstream, forward(x)>` w.r.t. every weight and bias.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGrads> {
        self.check_input(x.len())?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "upstream has {} entries, network has {} outputs",
                upstream.len(),
                self.output_dim()
            )));
        }
        let xb = DMatrix::from_column_slice(x.len(), 1, x);
        let up = DMatrix::from_column_slice(upstream.len(), 1, upstream);
        let cache = self.forward_batch(&xb)?;
        Ok(self.backward_batch(&cache, &up)?.0)
    }

    /// Forward pass over the columns of `x` (`input_dim x batch`).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<BatchCache> {
        self.check_input(x.nrows())?;
        let mut layers = Vec::with_capacity(self.num_layers() + 1);
        layers.push(x.clone());
        for l in 0..self.num_layers() {
            let mut z = &self.weights[l] * &layers[l];
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            if l + 1 < self.num_layers() {
                z.apply(|v| *v = v.tanh());
            }
            layers.push(z);
        }
        Ok(BatchCache { layers })
    }

    /// Backward pass for the loss `sum_b <upstream_b, output_b>`; returns
    /// parameter gradients summed over the batch and input gradients per
    /// column.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(MlpGrads, DMatrix<f64>)> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Dimension(format!(
                "upstream {:?} vs output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let n = self.num_layers();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for l in (0..n).rev() {
            gw.push(&delta * cache.layers[l].transpose());
            gb.push(delta.column_sum());
            let mut back = self.weights[l].tr_mul(&delta);
            if l > 0 {
                back.zip_apply(&cache.layers[l], |d, h| *d *= 1.0 - h * h);
            }
            delta = back;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            MlpGrads {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) (column-major weights, then bias, per layer).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} flat parameters for a network with {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = *it.next().unwrap());
            b.iter_mut().for_each(|x| *x = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn apply_update(&mut self, step: &MlpGrads, scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(&step.weights) {
            *w += g * scale;
        }
        for (b, g) in self.biases.iter_mut().zip(&step.biases) {
            *b += g * scale;
        }
    }

    /// Rewrites the network so that it consumes raw inputs `x` when it was
    /// trained on `(x - shift) / scale`.
    pub fn fold_input_normalization(&mut self, shift: &[f64], scale: &[f64]) -> Result<()> {
        self.check_input(shift.len())?;
        self.check_input(scale.len())?;
        let w = &mut self.weights[0];
        let mut bias_corr = DVector::zeros(w.nrows());
        for j in 0..w.ncols() {
            let mut col = w.column_mut(j);
            col /= scale[j];
            bias_corr += &col * shift[j];
        }
        self.biases[0] -= bias_corr;
        Ok(())
    }

    /// Rewrites the output layer so that it emits `scale * y + shift` for the
    /// former output `y`.
    pub fn fold_output_affine(&mut self, shift: &[f64], scale: &[f64]) -> Result<()> {
        if shift.len() != self.output_dim() || scale.len() != self.output_dim() {
            return Err(Error::Dimension("output affine map".into()));
        }
        let last = self.num_layers() - 1;
        for i in 0..self.output_dim() {
            let mut row = self.weights[last].row_mut(i);
            row *= scale[i];
            self.biases[last][i] = self.biases[last][i] * scale[i] + shift[i];
        }
        Ok(())
    }

    pub fn to_document(&self) -> MlpDocument {
        MlpDocument {
            version: FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
            activation: "tanh".into(),
        }
    }

    pub fn from_document(doc: MlpDocument) -> Result<Self> {
        if doc.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weights version {} (expected {FORMAT_VERSION})",
                doc.version
            )));
        }
        if doc.activation != "tanh" {
            return Err(Error::Format(format!("unsupported activation {:?}", doc.activation)));
        }
        check_dims(&doc.layer_dims)?;
        let n = doc.layer_dims.len() - 1;
        if doc.weights.len() != n || doc.biases.len() != n {
            return Err(Error::Format(format!(
                "{} layers declared, {} weight and {} bias entries",
                n,
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(n);
        for (l, rows) in doc.weights.iter().enumerate() {
            let (r, c) = (doc.layer_dims[l + 1], doc.layer_dims[l]);
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(Error::Format(format!("layer {l} weights are not {r}x{c}")));
            }
            weights.push(DMatrix::from_fn(r, c, |i, j| rows[i][j]));
        }
        let mut biases = Vec::with_capacity(n);
        for (l, b) in doc.biases.iter().enumerate() {
            if b.len() != doc.layer_dims[l + 1] {
                return Err(Error::Format(format!(
                    "layer {l} bias has {} entries, expected {}",
                    b.len(),
                    doc.layer_dims[l + 1]
                )));
            }
            biases.push(DVector::from_column_slice(b));
        }
        Self::from_parts(weights, biases).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.to_document())?)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let doc: MlpDocument =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.save()?)?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::load(&std::fs::read(path)?)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Dimension(format!("invalid layer widths {dims:?}")));
    }
    Ok(())
}

/// On-disk form of a network (`*.mlp.json`). Weights are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDocument {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: String,
}

/// Adam on network parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: MlpGrads,
    v: MlpGrads,
    t: i32,
}

impl Adam {
    pub fn new(net: &MlpParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
            t: 0,
        }
    }

    /// Descent step along `grad`.
    pub fn step(&mut self, net: &mut MlpParams, grad: &MlpGrads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.learning_rate;
        let eps = self.eps;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            for (((p, g), m), v) in net.weights[l]
                .iter_mut()
                .zip(grad.weights[l].iter())
                .zip(self.m.weights[l].iter_mut())
                .zip(self.v.weights[l].iter_mut())
            {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in net.biases[l]
                .iter_mut()
                .zip(grad.biases[l].iter())
                .zip(self.m.biases[l].iter_mut())
                .zip(self.v.biases[l].iter_mut())
            {
                update(p, *g, m, v);
            }
        }
    }
}
