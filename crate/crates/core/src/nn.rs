//! Dense ReLU classifier with a nominal forward pass, softmax cross-entropy
//! and backpropagation.
//!
//! Hidden layers apply ReLU; the output layer returns raw logits. The ReLU
//! derivative at exactly zero is taken as 0, and the interval backward pass
//! in [`crate::bounds`] uses the same convention.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgtError, Result};

/// A training or query example with an integer class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Array1<f64>,
    pub y: usize,
}

impl LabeledExample {
    pub fn new(x: impl Into<Array1<f64>>, y: usize) -> Self {
        Self { x: x.into(), y }
    }
}

/// Layer widths of an MLP: input features, hidden widths, number of classes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelShape {
    pub fn new(inputs: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            inputs,
            hidden,
            classes,
        }
    }

    /// Widths from input to output, `[n_0, n_1, ..., n_K]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.inputs);
        w.extend_from_slice(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(AgtError::config(format!(
                "model shape {:?} has a zero width",
                self.widths()
            )));
        }
        if self.classes < 2 {
            return Err(AgtError::config("a classifier needs at least two classes"));
        }
        Ok(())
    }
}

/// One affine layer; also used to hold per-layer gradients and bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `W z + b`, accumulating each row left to right.
    pub fn affine(&self, z: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.outputs());
        for (i, row) in self.weight.rows().into_iter().enumerate() {
            let mut s = 0.0;
            for (w, v) in row.iter().zip(z.iter()) {
                s += w * v;
            }
            out[i] = s + self.bias[i];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AgtError::config("an MLP needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(AgtError::dim(format!(
                    "layer {k}: bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.outputs()
                )));
            }
            if k > 0 && layers[k - 1].outputs() != layer.inputs() {
                return Err(AgtError::dim(format!(
                    "layer {k} expects {} inputs but layer {} produces {}",
                    layer.inputs(),
                    k - 1,
                    layers[k - 1].outputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(shape: &ModelShape) -> Self {
        let w = shape.widths();
        let layers = w.windows(2).map(|p| Dense::zeros(p[1], p[0])).collect();
        Self { layers }
    }

    /// He-style uniform initialisation: `W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases, drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(shape);
        for layer in &mut model.layers {
            let limit = (6.0 / layer.inputs() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Dense> {
        self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            inputs: self.inputs(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(Dense::outputs)
                .collect(),
            classes: self.classes(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Parameters in layer order, each layer as row-major weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn from_flat(shape: &ModelShape, values: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(shape);
        if values.len() != model.num_params() {
            return Err(AgtError::dim(format!(
                "expected {} parameters, got {}",
                model.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for layer in &mut model.layers {
            for w in layer.weight.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in layer.bias.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        Ok(model)
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        if x.len() != self.inputs() {
            return Err(AgtError::dim(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.inputs()
            )));
        }
        let last = self.layers.len() - 1;
        let mut post = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        post.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let zhat = layer.affine(&post[k]);
            if k < last {
                post.push(zhat.mapv(relu));
            }
            pre.push(zhat);
        }
        let logits = pre[last].clone();
        Ok((logits, ForwardCache { pre, post }))
    }

    pub fn logits(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn predict(&self, x: &Array1<f64>) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Exact gradients of the cross-entropy loss for the cached input.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array1<f64>) -> Result<Gradients> {
        self.check_cache(cache)?;
        if dlogits.len() != self.classes() {
            return Err(AgtError::dim(format!(
                "dlogits has {} entries for {} classes",
                dlogits.len(),
                self.classes()
            )));
        }
        let depth = self.layers.len();
        let mut grads = vec![Dense::zeros(0, 0); depth];
        let mut dzhat = dlogits.clone();
        for k in (0..depth).rev() {
            let input = &cache.post[k];
            let mut dw = Array2::zeros((dzhat.len(), input.len()));
            for (i, &d) in dzhat.iter().enumerate() {
                for (j, &z) in input.iter().enumerate() {
                    dw[[i, j]] = d * z;
                }
            }
            let db = dzhat.clone();
            if k > 0 {
                let w = &self.layers[k].weight;
                let mut dz = Array1::zeros(w.ncols());
                for j in 0..w.ncols() {
                    let mut s = 0.0;
                    for i in 0..w.nrows() {
                        s += w[[i, j]] * dzhat[i];
                    }
                    dz[j] = s;
                }
                let pre = &cache.pre[k - 1];
                dzhat = ndarray::Zip::from(&dz)
                    .and(pre)
                    .map_collect(|&g, &p| heaviside(p) * g);
            }
            grads[k] = Dense {
                weight: dw,
                bias: db,
            };
        }
        Ok(Gradients(grads))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let depth = self.layers.len();
        let ok = cache.pre.len() == depth
            && cache.post.len() == depth
            && self.layers.iter().enumerate().all(|(k, l)| {
                cache.pre[k].len() == l.outputs() && cache.post[k].len() == l.inputs()
            });
        if ok {
            Ok(())
        } else {
            Err(AgtError::Usage(
                "forward cache does not match this model".into(),
            ))
        }
    }

    /// Loss gradient at one example, elementwise clipped to `[-clip, clip]`.
    pub fn clipped_gradient(&self, example: &LabeledExample, clip: f64) -> Result<Gradients> {
        let (logits, cache) = self.forward(&example.x)?;
        let (_, dlogits) = ce_loss_grad(&logits, example.y)?;
        let mut g = self.backward(&cache, &dlogits)?;
        g.clip(clip);
        Ok(g)
    }
}

/// Per-layer activations recorded by [`Mlp::forward`]: `pre[k]` is the
/// affine output of layer `k`, `post[k]` is the input that layer consumed.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub pre: Vec<Array1<f64>>,
    pub post: Vec<Array1<f64>>,
}

/// Per-layer parameter gradients, laid out like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Dense>);

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Gradients(
            model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.outputs(), l.inputs()))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Dense] {
        &self.0
    }

    pub fn clip(&mut self, clip: f64) {
        for layer in &mut self.0 {
            layer.weight.mapv_inplace(|v| v.clamp(-clip, clip));
            layer.bias.mapv_inplace(|v| v.clamp(-clip, clip));
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for layer in &mut self.0 {
            layer.weight *= c;
            layer.bias *= c;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.0 {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Heaviside step with `H(0) = 0`.
#[inline]
pub fn heaviside(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy loss and its gradient `p - onehot(y)` w.r.t. the logits.
pub fn ce_loss_grad(logits: &Array1<f64>, y: usize) -> Result<(f64, Array1<f64>)> {
    if y >= logits.len() {
        return Err(AgtError::dim(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    let lse = m + sum.ln();
    let mut grad = logits.mapv(|z| (z - m).exp() / sum);
    grad[y] -= 1.0;
    Ok((lse - logits[y], grad))
}
