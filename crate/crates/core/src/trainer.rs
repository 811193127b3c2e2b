//! Abstract gradient training.
//!
//! [`train`] runs clipped mini-batch SGD and, alongside it, maintains a
//! [`ParamBox`] that contains the parameters SGD would reach on any dataset
//! obtained from the training set by adding up to `k_add` and removing up to
//! `k_remove` examples, with the same initialisation and batch ordering.
//!
//! Each step bounds the clipped per-example gradients over the current box,
//! then bounds the mean over any admissible perturbed batch:
//!
//! ```text
//! dL = (SEMin_{b-kr}(grad_lo) - ka * clip) / (b - kr + ka)
//! dU = (SEMax_{b-kr}(grad_hi) + ka * clip) / (b - kr + ka)
//! lower <- lower - lr * dU
//! upper <- upper - lr * dL
//! ```
//!
//! where `SEMax_a` sums, per coordinate, the `a` largest entries across the
//! batch (`SEMin_a` the `a` smallest).

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::example_grad_bounds;
use crate::error::{AgtError, Result};
use crate::interval::IntervalTensor;
use crate::nn::{Dense, Gradients, LabeledExample, Mlp, ModelShape};
use crate::parambox::{BoxOrigin, IntervalLayer, ParamBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Up to k additions and up to k removals.
    Privacy,
    /// Up to k removals only.
    Unlearning,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Privacy => f.write_str("privacy"),
            Mode::Unlearning => f.write_str("unlearning"),
        }
    }
}

/// Budget of dataset additions and removals the bounds must cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationModel {
    pub k_add: usize,
    pub k_remove: usize,
    pub mode: Mode,
}

impl PerturbationModel {
    pub fn privacy(k: usize) -> Self {
        Self {
            k_add: k,
            k_remove: k,
            mode: Mode::Privacy,
        }
    }

    pub fn unlearning(k: usize) -> Self {
        Self {
            k_add: 0,
            k_remove: k,
            mode: Mode::Unlearning,
        }
    }

    pub fn for_mode(mode: Mode, k: usize) -> Self {
        match mode {
            Mode::Privacy => Self::privacy(k),
            Mode::Unlearning => Self::unlearning(k),
        }
    }

    /// No perturbation: the box collapses to the nominal trajectory.
    pub fn none() -> Self {
        Self::privacy(0)
    }

    pub fn k(&self) -> usize {
        self.k_remove.max(self.k_add)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Privacy if self.k_add != self.k_remove => Err(AgtError::config(format!(
                "privacy mode needs k_add == k_remove, got {} and {}",
                self.k_add, self.k_remove
            ))),
            Mode::Unlearning if self.k_add != 0 => Err(AgtError::config(format!(
                "unlearning mode allows no additions, got k_add = {}",
                self.k_add
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate at epoch `n` is `lr / (1 + lr_decay * n)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Elementwise gradient clipping level.
    pub clip: f64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, n_examples: usize, pm: &PerturbationModel) -> Result<()> {
        pm.validate()?;
        if self.epochs == 0 {
            return Err(AgtError::config("epochs must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(AgtError::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.lr_decay.is_nan() || self.lr_decay < 0.0 {
            return Err(AgtError::config(format!(
                "lr_decay must be non-negative, got {}",
                self.lr_decay
            )));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(AgtError::config(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        if self.batch_size == 0 || self.batch_size > n_examples {
            return Err(AgtError::config(format!(
                "batch size {} must be in 1..={n_examples}",
                self.batch_size
            )));
        }
        if pm.k_remove >= self.batch_size {
            return Err(AgtError::config(format!(
                "batch size {} leaves no examples after {} removals",
                self.batch_size, pm.k_remove
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * epoch as f64)
    }
}

/// The fixed data ordering shared by AGT, nominal training and the oracle:
/// one seeded shuffle per epoch, consecutive full batches, remainder dropped.
#[derive(Clone, Debug)]
pub struct Schedule {
    batch_size: usize,
    orders: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn new(n_examples: usize, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        let orders = (0..cfg.epochs)
            .map(|_| {
                let mut order: Vec<usize> = (0..n_examples).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        Self {
            batch_size: cfg.batch_size,
            orders,
        }
    }

    pub fn epochs(&self) -> usize {
        self.orders.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.orders.first().map_or(0, |o| o.len() / self.batch_size)
    }

    /// Indices of the training examples in each batch of `epoch`.
    pub fn batches(&self, epoch: usize) -> impl Iterator<Item = &[usize]> {
        self.orders[epoch].chunks_exact(self.batch_size)
    }
}

/// Mean of the clipped per-example gradients, summed in iteration order.
pub fn mean_clipped_gradient<'a, I>(model: &Mlp, batch: I, clip: f64) -> Result<Gradients>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let mut sum = Gradients::zeros_like(model);
    let mut count = 0usize;
    for example in batch {
        sum.add_assign(&model.clipped_gradient(example, clip)?);
        count += 1;
    }
    if count == 0 {
        return Err(AgtError::config("empty batch"));
    }
    sum.scale(1.0 / count as f64);
    Ok(sum)
}

/// `theta <- theta - lr * step`.
pub fn sgd_update(model: &mut Mlp, step: &Gradients, lr: f64) {
    for (layer, g) in model.layers_mut().iter_mut().zip(step.layers()) {
        layer.weight.scaled_add(-lr, &g.weight);
        layer.bias.scaled_add(-lr, &g.bias);
    }
}

/// Sum of the `a` largest (`largest = true`) or smallest values of `values`.
/// Reorders `values`.
fn extreme_sum(values: &mut [f64], a: usize, largest: bool) -> f64 {
    let n = values.len();
    if a == n {
        return values.iter().sum();
    }
    if a == 0 {
        return 0.0;
    }
    if largest {
        values.select_nth_unstable_by(n - a, f64::total_cmp);
        values[n - a..].iter().sum()
    } else {
        values.select_nth_unstable_by(a - 1, f64::total_cmp);
        values[..a].iter().sum()
    }
}

fn check_rows(rows: &[Array1<f64>], a: usize) -> Result<usize> {
    if a == 0 || a > rows.len() {
        return Err(AgtError::config(format!(
            "a = {a} must be in 1..={}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(AgtError::dim("rows have different lengths"));
    }
    Ok(d)
}

/// Per coordinate, the sum of the `a` largest entries across `rows`.
pub fn semax(rows: &[Array1<f64>], a: usize) -> Result<Array1<f64>> {
    let d = check_rows(rows, a)?;
    let mut col = vec![0.0; rows.len()];
    Ok(Array1::from_shape_fn(d, |j| {
        for (c, r) in col.iter_mut().zip(rows) {
            *c = r[j];
        }
        extreme_sum(&mut col, a, true)
    }))
}

/// Per coordinate, the sum of the `a` smallest entries across `rows`.
pub fn semin(rows: &[Array1<f64>], a: usize) -> Result<Array1<f64>> {
    let d = check_rows(rows, a)?;
    let mut col = vec![0.0; rows.len()];
    Ok(Array1::from_shape_fn(d, |j| {
        for (c, r) in col.iter_mut().zip(rows) {
            *c = r[j];
        }
        extreme_sum(&mut col, a, false)
    }))
}

/// Elementwise bounds on the descent direction, flattened in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DescentBounds {
    pub fn lower_gradients(&self, shape: &ModelShape) -> Result<Gradients> {
        Ok(Gradients(Mlp::from_flat(shape, &self.lower)?.into_layers()))
    }

    pub fn upper_gradients(&self, shape: &ModelShape) -> Result<Gradients> {
        Ok(Gradients(Mlp::from_flat(shape, &self.upper)?.into_layers()))
    }
}

/// Removal budgets up to this size use [`TrimmedSums`]; larger ones sort columns.
const STREAMING_MAX_REMOVALS: usize = 16;

/// Per coordinate, the running sum of a stream of values together with the
/// `m` smallest (or largest) values seen, so that the sum of everything except
/// those `m` is available without storing the stream.
struct TrimmedSums {
    m: usize,
    largest: bool,
    sums: Vec<f64>,
    kept: Vec<f64>,
    /// Position within each coordinate's `kept` slot of the value to evict next.
    evict: Vec<usize>,
}

impl TrimmedSums {
    fn new(d: usize, m: usize, largest: bool) -> Self {
        let fill = if largest {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
        Self {
            m,
            largest,
            sums: vec![0.0; d],
            kept: vec![fill; d * m],
            evict: vec![0; d],
        }
    }

    #[inline]
    fn push(&mut self, j: usize, v: f64) {
        self.sums[j] += v;
        if self.m == 0 {
            return;
        }
        let slot = &mut self.kept[j * self.m..(j + 1) * self.m];
        let e = self.evict[j];
        let better = if self.largest {
            v > slot[e]
        } else {
            v < slot[e]
        };
        if better {
            slot[e] = v;
            let mut worst = 0;
            for (i, &w) in slot.iter().enumerate().skip(1) {
                let worse = if self.largest {
                    w < slot[worst]
                } else {
                    w > slot[worst]
                };
                if worse {
                    worst = i;
                }
            }
            self.evict[j] = worst;
        }
    }

    /// Sum over all pushed values except the `m` tracked ones.
    fn trimmed(&self, j: usize) -> f64 {
        let tracked: f64 = self.kept[j * self.m..(j + 1) * self.m].iter().sum();
        self.sums[j] - tracked
    }
}

/// Bounds every clipped mean gradient reachable from `batch` after up to
/// `pm.k_remove` removals and `pm.k_add` additions, for any parameters in `pbox`.
pub fn bound_descent_direction(
    batch: &[&LabeledExample],
    pbox: &ParamBox,
    pm: &PerturbationModel,
    clip: f64,
) -> Result<DescentBounds> {
    let b = batch.len();
    if pm.k_remove >= b {
        return Err(AgtError::config(format!(
            "batch of {b} cannot absorb {} removals",
            pm.k_remove
        )));
    }
    let d = pbox.nominal().num_params();
    let keep = b - pm.k_remove;
    let (lo_sums, hi_sums) = if pm.k_remove <= STREAMING_MAX_REMOVALS {
        // SEMin_keep(lo) is the total minus the k_remove largest entries.
        let mut lo_acc = TrimmedSums::new(d, pm.k_remove, true);
        let mut hi_acc = TrimmedSums::new(d, pm.k_remove, false);
        for example in batch {
            let g = example_grad_bounds(pbox, &example.x, example.y, clip)?;
            g.for_each_flat(|j, lo, hi| {
                lo_acc.push(j, lo);
                hi_acc.push(j, hi);
            });
        }
        (
            (0..d).map(|j| lo_acc.trimmed(j)).collect::<Vec<_>>(),
            (0..d).map(|j| hi_acc.trimmed(j)).collect::<Vec<_>>(),
        )
    } else {
        // Coordinate-major: entry (j, i) lives at j * b + i.
        let mut lo_cols = vec![0.0; d * b];
        let mut hi_cols = vec![0.0; d * b];
        for (i, example) in batch.iter().enumerate() {
            let g = example_grad_bounds(pbox, &example.x, example.y, clip)?;
            g.for_each_flat(|j, lo, hi| {
                lo_cols[j * b + i] = lo;
                hi_cols[j * b + i] = hi;
            });
        }
        (
            (0..d)
                .map(|j| extreme_sum(&mut lo_cols[j * b..(j + 1) * b], keep, false))
                .collect(),
            (0..d)
                .map(|j| extreme_sum(&mut hi_cols[j * b..(j + 1) * b], keep, true))
                .collect(),
        )
    };

    let added = pm.k_add as f64 * clip;
    let denom = (keep + pm.k_add) as f64;
    Ok(DescentBounds {
        lower: lo_sums.iter().map(|s| (s - added) / denom).collect(),
        upper: hi_sums.iter().map(|s| (s + added) / denom).collect(),
    })
}

/// Snapshot handed to training observers after every parameter update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    /// Global step index, starting at 0.
    pub step: usize,
    pub pbox: &'a ParamBox,
}

pub fn train(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    pm: &PerturbationModel,
) -> Result<ParamBox> {
    train_with(data, shape, cfg, pm, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<F>(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    pm: &PerturbationModel,
    mut observe: F,
) -> Result<ParamBox>
where
    F: FnMut(&StepInfo),
{
    cfg.validate(data.len(), pm)?;
    check_data(data, shape)?;
    let schedule = Schedule::new(data.len(), cfg);
    let mut pbox = ParamBox::point(Mlp::init(shape, cfg.init_seed)?);
    let mut step = 0;
    for epoch in 0..schedule.epochs() {
        let lr = cfg.lr_at(epoch);
        for indices in schedule.batches(epoch) {
            let batch: Vec<&LabeledExample> = indices.iter().map(|&i| &data[i]).collect();

            let mut nominal = pbox.nominal().clone();
            let direction = mean_clipped_gradient(&nominal, batch.iter().copied(), cfg.clip)?;
            sgd_update(&mut nominal, &direction, lr);

            let bounds = bound_descent_direction(&batch, &pbox, pm, cfg.clip)?;
            let layers = updated_bounds(&pbox, &nominal, &bounds, lr);
            pbox.set(nominal, layers);

            observe(&StepInfo {
                epoch,
                step,
                pbox: &pbox,
            });
            step += 1;
        }
    }
    Ok(pbox.with_origin(BoxOrigin {
        train: cfg.clone(),
        perturbation: *pm,
    }))
}

/// `lower - lr * dU` and `upper - lr * dL`, then widened to cover the new
/// nominal point so the ordering invariant survives rounding.
fn updated_bounds(
    pbox: &ParamBox,
    nominal: &Mlp,
    bounds: &DescentBounds,
    lr: f64,
) -> Vec<IntervalLayer> {
    let shape = nominal.shape();
    let theta = nominal.flatten();
    let mut lo = pbox.lower().flatten();
    let mut hi = pbox.upper().flatten();
    for j in 0..theta.len() {
        lo[j] = (lo[j] - lr * bounds.upper[j]).min(theta[j]);
        hi[j] = (hi[j] - lr * bounds.lower[j]).max(theta[j]);
    }
    let lower = Mlp::from_flat(&shape, &lo).expect("flat length matches shape");
    let upper = Mlp::from_flat(&shape, &hi).expect("flat length matches shape");
    lower
        .into_layers()
        .into_iter()
        .zip(upper.into_layers())
        .map(|(l, u)| IntervalLayer {
            weight: IntervalTensor::from_ordered(l.weight, u.weight),
            bias: IntervalTensor::from_ordered(l.bias, u.bias),
        })
        .collect()
}

/// Plain clipped SGD with the same initialisation, ordering and schedule as [`train`].
pub fn train_nominal(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
) -> Result<Mlp> {
    train_nominal_with(data, shape, cfg, |_, _| {})
}

pub fn train_nominal_with<F>(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<Mlp>
where
    F: FnMut(usize, &Mlp),
{
    cfg.validate(data.len(), &PerturbationModel::none())?;
    check_data(data, shape)?;
    let schedule = Schedule::new(data.len(), cfg);
    let mut model = Mlp::init(shape, cfg.init_seed)?;
    let mut step = 0;
    for epoch in 0..schedule.epochs() {
        let lr = cfg.lr_at(epoch);
        for indices in schedule.batches(epoch) {
            let direction =
                mean_clipped_gradient(&model, indices.iter().map(|&i| &data[i]), cfg.clip)?;
            sgd_update(&mut model, &direction, lr);
            observe(step, &model);
            step += 1;
        }
    }
    Ok(model)
}

fn check_data(data: &[LabeledExample], shape: &ModelShape) -> Result<()> {
    shape.validate()?;
    for (i, e) in data.iter().enumerate() {
        if e.x.len() != shape.inputs {
            return Err(AgtError::dim(format!(
                "example {i} has {} features, model expects {}",
                e.x.len(),
                shape.inputs
            )));
        }
        if e.y >= shape.classes {
            return Err(AgtError::config(format!(
                "example {i} has label {} but the model has {} classes",
                e.y, shape.classes
            )));
        }
    }
    Ok(())
}

/// SHA-256 over the bit patterns of a sequence of parameter snapshots.
#[derive(Clone, Default)]
pub struct TrajectoryHasher(Sha256);

impl TrajectoryHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, model: &Mlp) {
        for layer in model.layers() {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                self.0.update(v.to_bits().to_le_bytes());
            }
        }
    }

    pub fn hex(self) -> String {
        self.0
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Gradients shaped like `model` built from a flat vector.
pub fn gradients_from_flat(model: &Mlp, values: &[f64]) -> Result<Gradients> {
    let layers: Vec<Dense> = Mlp::from_flat(&model.shape(), values)?.into_layers();
    Ok(Gradients(layers))
}
