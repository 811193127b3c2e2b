//! Interval bound propagation through the forward pass, the softmax
//! cross-entropy gradient and the backward pass.
//!
//! Given a [`ParamBox`], [`interval_forward`] and [`interval_backward`] return
//! intervals containing the logits and the parameter gradients of every
//! network whose parameters lie in the box.

use ndarray::Array1;

use crate::error::{AgtError, Result};
use crate::interval::{
    iadd, ihadamard, imatvec, imatvec_transposed, imonotone_map, iouter, IntervalTensor,
    IntervalVec,
};
use crate::nn::{heaviside, relu};
use crate::parambox::{IntervalLayer, ParamBox};

/// Interval activations recorded by [`interval_forward`], mirroring
/// [`crate::nn::ForwardCache`].
#[derive(Clone, Debug)]
pub struct IntervalCache {
    pub pre: Vec<IntervalVec>,
    pub post: Vec<IntervalVec>,
}

/// Per-layer gradient enclosures.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBounds(pub Vec<IntervalLayer>);

impl GradBounds {
    pub fn layers(&self) -> &[IntervalLayer] {
        &self.0
    }

    /// Lower bounds in flattened parameter order.
    pub fn flat_lower(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.0 {
            out.extend(l.weight.lo().iter());
            out.extend(l.bias.lo().iter());
        }
        out
    }

    pub fn flat_upper(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.0 {
            out.extend(l.weight.hi().iter());
            out.extend(l.bias.hi().iter());
        }
        out
    }

    /// Calls `f(j, lo, hi)` for every coordinate `j` in flattened order.
    pub(crate) fn for_each_flat(&self, mut f: impl FnMut(usize, f64, f64)) {
        let mut at = 0;
        for l in &self.0 {
            for (lo, hi) in [
                (
                    l.weight.lo().view().into_dyn(),
                    l.weight.hi().view().into_dyn(),
                ),
                (l.bias.lo().view().into_dyn(), l.bias.hi().view().into_dyn()),
            ] {
                match (lo.as_slice(), hi.as_slice()) {
                    (Some(lo), Some(hi)) => {
                        for (&a, &b) in lo.iter().zip(hi) {
                            f(at, a, b);
                            at += 1;
                        }
                    }
                    _ => {
                        for (&a, &b) in lo.iter().zip(hi.iter()) {
                            f(at, a, b);
                            at += 1;
                        }
                    }
                }
            }
        }
    }

    /// Writes lower and upper bounds into the given slices in flattened order.
    #[cfg(test)]
    pub(crate) fn write_flat(&self, lower: &mut [f64], upper: &mut [f64]) {
        self.for_each_flat(|j, lo, hi| {
            lower[j] = lo;
            upper[j] = hi;
        });
    }
}

pub fn interval_forward(pbox: &ParamBox, x: &Array1<f64>) -> Result<(IntervalVec, IntervalCache)> {
    let layers = pbox.layers();
    if x.len() != layers[0].inputs() {
        return Err(AgtError::dim(format!(
            "input has {} features, model expects {}",
            x.len(),
            layers[0].inputs()
        )));
    }
    let last = layers.len() - 1;
    let mut post = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    post.push(IntervalTensor::point(x.clone()));
    for (k, layer) in layers.iter().enumerate() {
        let zhat = iadd(&imatvec(&layer.weight, &post[k])?, &layer.bias)?;
        if k < last {
            post.push(imonotone_map(&zhat, relu));
        }
        pre.push(zhat);
    }
    let logits = pre[last].clone();
    Ok((logits, IntervalCache { pre, post }))
}

/// Bounds on `softmax(z)` over all `z` in `logits`.
///
/// `p_L[i] = 1 / (1 + Σ_{j≠i} exp(z_U[j] - z_L[i]))` and symmetrically for
/// `p_U`. The self term is exactly 1 for every member of the box, so it is
/// not widened. Sums are evaluated as a shifted log-sum-exp.
pub fn softmax_bounds(logits: &IntervalVec) -> IntervalVec {
    let (lo, hi) = (logits.lo(), logits.hi());
    let n = lo.len();
    let bound = |i: usize, own: f64, others: &Array1<f64>| -> f64 {
        let term = |j: usize| if j == i { 0.0 } else { others[j] - own };
        let m = (0..n).map(term).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..n).map(|j| (term(j) - m).exp()).sum();
        (-(m + s.ln())).exp()
    };
    let mut p_lo = Array1::from_shape_fn(n, |i| bound(i, lo[i], hi));
    let mut p_hi = Array1::from_shape_fn(n, |i| bound(i, hi[i], lo));
    // Near-point logits can round the two endpoints past each other.
    for (l, h) in p_lo.iter_mut().zip(p_hi.iter_mut()) {
        if *l > *h {
            std::mem::swap(l, h);
        }
    }
    IntervalTensor::from_ordered(p_lo, p_hi)
}

pub fn interval_backward(pbox: &ParamBox, cache: &IntervalCache, y: usize) -> Result<GradBounds> {
    let layers = pbox.layers();
    let depth = layers.len();
    let matches = cache.pre.len() == depth
        && cache.post.len() == depth
        && layers
            .iter()
            .enumerate()
            .all(|(k, l)| cache.pre[k].len() == l.outputs() && cache.post[k].len() == l.inputs());
    if !matches {
        return Err(AgtError::Usage(
            "interval cache does not match this box".into(),
        ));
    }
    let classes = layers[depth - 1].outputs();
    if y >= classes {
        return Err(AgtError::dim(format!(
            "label {y} out of range for {classes} classes"
        )));
    }

    let p = softmax_bounds(&cache.pre[depth - 1]);
    let (mut d_lo, mut d_hi) = p.into_bounds();
    d_lo[y] -= 1.0;
    d_hi[y] -= 1.0;
    let mut dzhat = IntervalTensor::from_ordered(d_lo, d_hi);

    let mut grads: Vec<Option<IntervalLayer>> = vec![None; depth];
    for k in (0..depth).rev() {
        let weight = iouter(&dzhat, &cache.post[k]);
        let bias = dzhat.clone();
        if k > 0 {
            let dz = imatvec_transposed(&layers[k].weight, &dzhat)?;
            let h = imonotone_map(&cache.pre[k - 1], heaviside);
            dzhat = ihadamard(&h, &dz)?;
        }
        grads[k] = Some(IntervalLayer { weight, bias });
    }
    Ok(GradBounds(grads.into_iter().map(Option::unwrap).collect()))
}

/// Elementwise clamp of both bounds into `[-clip, clip]`.
pub fn clip_bounds(mut g: GradBounds, clip: f64) -> Result<GradBounds> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(AgtError::config(format!(
            "clip level must be positive, got {clip}"
        )));
    }
    let c = |v: f64| v.clamp(-clip, clip);
    for l in &mut g.0 {
        l.weight.map_inplace(c);
        l.bias.map_inplace(c);
    }
    Ok(g)
}

/// Clipped gradient bounds for one example.
pub fn example_grad_bounds(
    pbox: &ParamBox,
    x: &Array1<f64>,
    y: usize,
    clip: f64,
) -> Result<GradBounds> {
    let (_, cache) = interval_forward(pbox, x)?;
    clip_bounds(interval_backward(pbox, &cache, y)?, clip)
}
