//! Brute-force checks of AGT by plain retraining.
//!
//! Perturbed datasets keep the original training schedule. Removed examples
//! drop out of whichever batch they were scheduled in and survivors keep their
//! positions. Each added example joins one batch per epoch, chosen by the
//! trial's generator, and is appended after that batch's survivors. Every
//! perturbed run therefore shares initialisation, shuffling, learning-rate
//! schedule and clipping with the run that produced the box.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AgtError, Result};
use crate::nn::{LabeledExample, Mlp, ModelShape};
use crate::parambox::ParamBox;
use crate::trainer::{
    mean_clipped_gradient, sgd_update, train_nominal, train_nominal_with, Mode, PerturbationModel,
    Schedule, TrainConfig, TrajectoryHasher,
};

/// Absolute slack allowed when checking a retrained parameter against a box.
pub const VIOLATION_TOLERANCE: f64 = 1e-9;

/// Largest dataset [`exhaustive_micro_sensitivity`] will enumerate.
pub const MICRO_MAX_POINTS: usize = 8;

const MICRO_MAX_RETRAINS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    Random,
    Adversarial,
}

impl std::fmt::Display for TrialKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrialKind::Random => f.write_str("random"),
            TrialKind::Adversarial => f.write_str("adversarial"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Addition {
    pub example: LabeledExample,
    /// Batch index the example joins in each epoch.
    pub batches: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Perturbation {
    /// Sorted indices into the training set.
    pub removed: Vec<usize>,
    pub added: Vec<Addition>,
}

impl Perturbation {
    pub fn identity() -> Self {
        Self::default()
    }
}

/// Draws one perturbation within the budget of `pm`.
///
/// Random trials pick removal and addition counts uniformly up to the budget,
/// then remove uniformly chosen examples and add uniformly chosen pool
/// members. Adversarial trials spend the full budget: they remove the
/// examples with the largest clipped gradient norm under `reference` and add
/// the pool members with the largest norm.
pub fn perturb_dataset(
    data: &[LabeledExample],
    cfg: &TrainConfig,
    pm: &PerturbationModel,
    trial_seed: u64,
    pool: &[LabeledExample],
    kind: TrialKind,
    reference: &Mlp,
) -> Result<Perturbation> {
    cfg.validate(data.len(), pm)?;
    if pm.k_add > 0 && pool.is_empty() {
        return Err(AgtError::config(
            "candidate pool is empty but additions are allowed",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let (removed, picks) = match kind {
        TrialKind::Random => {
            let r = rng.random_range(0..=pm.k_remove);
            let a = rng.random_range(0..=pm.k_add);
            let mut removed = sample(&mut rng, data.len(), r).into_vec();
            removed.sort_unstable();
            let picks: Vec<usize> = (0..a).map(|_| rng.random_range(0..pool.len())).collect();
            (removed, picks)
        }
        TrialKind::Adversarial => {
            let mut removed = top_gradient_norms(reference, data, cfg.clip, pm.k_remove)?;
            removed.sort_unstable();
            let ranked = top_gradient_norms(reference, pool, cfg.clip, pool.len())?;
            let picks = (0..pm.k_add)
                .map(|i| ranked[i % ranked.len().max(1)])
                .collect();
            (removed, picks)
        }
    };
    let per_epoch = Schedule::new(data.len(), cfg).batches_per_epoch();
    let added = picks
        .into_iter()
        .map(|p| Addition {
            example: pool[p].clone(),
            batches: (0..cfg.epochs)
                .map(|_| rng.random_range(0..per_epoch))
                .collect(),
        })
        .collect();
    Ok(Perturbation { removed, added })
}

/// Indices of the `n` examples with the largest clipped gradient norm, largest first.
fn top_gradient_norms(
    model: &Mlp,
    examples: &[LabeledExample],
    clip: f64,
    n: usize,
) -> Result<Vec<usize>> {
    let norms = examples
        .iter()
        .map(|e| model.clipped_gradient(e, clip).map(|g| g.l2_norm()))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// Held-out points plus synthetic extremes: every corner of the box
/// `[-scale, scale]^d` would be too many, so each axis direction `±scale·e_i`
/// is paired with every class.
pub fn candidate_pool(
    held_out: &[LabeledExample],
    n_features: usize,
    n_classes: usize,
    scale: f64,
) -> Vec<LabeledExample> {
    let mut pool = held_out.to_vec();
    for i in 0..n_features {
        for sign in [-1.0, 1.0] {
            let mut x = Array1::zeros(n_features);
            x[i] = sign * scale;
            for y in 0..n_classes {
                pool.push(LabeledExample::new(x.clone(), y));
            }
        }
    }
    pool
}

/// Clipped SGD on the perturbed dataset under the original schedule.
pub fn retrain(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    p: &Perturbation,
) -> Result<Mlp> {
    retrain_with(data, shape, cfg, p, |_, _| {})
}

pub fn retrain_with<F>(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    p: &Perturbation,
    mut observe: F,
) -> Result<Mlp>
where
    F: FnMut(usize, &Mlp),
{
    if p.removed.is_empty() && p.added.is_empty() {
        return train_nominal_with(data, shape, cfg, observe);
    }
    let removed: BTreeSet<usize> = p.removed.iter().copied().collect();
    let pm = PerturbationModel {
        k_add: 0,
        k_remove: removed.len(),
        mode: Mode::Unlearning,
    };
    cfg.validate(data.len(), &pm)?;
    if removed.iter().any(|&i| i >= data.len()) {
        return Err(AgtError::config("removal index out of range"));
    }
    let schedule = Schedule::new(data.len(), cfg);
    if p.added.iter().any(|a| {
        a.batches.len() != cfg.epochs
            || a.batches.iter().any(|&b| b >= schedule.batches_per_epoch())
    }) {
        return Err(AgtError::config(
            "addition placement does not match the schedule",
        ));
    }
    let mut model = Mlp::init(shape, cfg.init_seed)?;
    let mut step = 0;
    for epoch in 0..schedule.epochs() {
        let lr = cfg.lr_at(epoch);
        for (bi, indices) in schedule.batches(epoch).enumerate() {
            let batch = indices
                .iter()
                .filter(|i| !removed.contains(i))
                .map(|&i| &data[i])
                .chain(
                    p.added
                        .iter()
                        .filter(|a| a.batches[epoch] == bi)
                        .map(|a| &a.example),
                );
            let direction = mean_clipped_gradient(&model, batch, cfg.clip)?;
            sgd_update(&mut model, &direction, lr);
            observe(step, &model);
            step += 1;
        }
    }
    Ok(model)
}

/// SHA-256 of every intermediate parameter vector along a run.
pub fn trajectory_hash(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    p: &Perturbation,
) -> Result<String> {
    let mut hasher = TrajectoryHasher::new();
    retrain_with(data, shape, cfg, p, |_, m| hasher.update(m))?;
    Ok(hasher.hex())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub random: usize,
    pub adversarial: usize,
    pub seed: u64,
}

impl Default for TrialPlan {
    fn default() -> Self {
        Self {
            random: 200,
            adversarial: 20,
            seed: 0,
        }
    }
}

impl TrialPlan {
    pub fn total(&self) -> usize {
        self.random + self.adversarial
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial_seed: u64,
    pub kind: TrialKind,
    pub removals: usize,
    pub additions: usize,
    /// Parameters outside the box by more than [`VIOLATION_TOLERANCE`].
    pub violations: usize,
    pub max_excess: f64,
    /// Euclidean distance between retrained and nominal parameters.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub k: usize,
    pub rows: Vec<TrialRow>,
}

impl TrialReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().map(|r| r.violations).sum()
    }

    pub fn max_excess(&self) -> f64 {
        self.rows.iter().map(|r| r.max_excess).fold(0.0, f64::max)
    }
}

/// Retrains on perturbed datasets and counts parameters that leave `pbox`.
///
/// The box must record the same config and budget, and plain training under
/// that config must reproduce the box's nominal parameters bit for bit.
pub fn soundness_trial(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    pm: &PerturbationModel,
    pbox: &ParamBox,
    plan: &TrialPlan,
    pool: &[LabeledExample],
) -> Result<TrialReport> {
    match pbox.origin() {
        Some(o) if o.train == *cfg && o.perturbation == *pm => {}
        Some(_) => {
            return Err(AgtError::InvalidTrial(
                "box was trained under a different config".into(),
            ))
        }
        None => {
            return Err(AgtError::InvalidTrial(
                "box carries no training config".into(),
            ))
        }
    }
    let nominal = train_nominal(data, shape, cfg)?;
    if &nominal != pbox.nominal() {
        return Err(AgtError::InvalidTrial(
            "retraining without perturbation does not reproduce the box's nominal parameters"
                .into(),
        ));
    }
    let theta = nominal.flatten();
    let rows = (0..plan.total())
        .into_par_iter()
        .map(|t| {
            let trial_seed = plan.seed.wrapping_add(t as u64);
            let kind = if t < plan.random {
                TrialKind::Random
            } else {
                TrialKind::Adversarial
            };
            let p = perturb_dataset(data, cfg, pm, trial_seed, pool, kind, &nominal)?;
            let model = retrain(data, shape, cfg, &p)?;
            let c = pbox.containment(&model, VIOLATION_TOLERANCE)?;
            let drift = model
                .flatten()
                .iter()
                .zip(&theta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(TrialRow {
                trial_seed,
                kind,
                removals: p.removed.len(),
                additions: p.added.len(),
                violations: c.violations,
                max_excess: c.max_excess,
                drift,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialReport { k: pm.k(), rows })
}

/// A dataset small enough to enumerate every admissible perturbation.
/// Training must be full-batch so that where an addition lands is irrelevant.
#[derive(Clone, Debug)]
pub struct MicroInstance {
    pub data: Vec<LabeledExample>,
    pub shape: ModelShape,
    pub cfg: TrainConfig,
    pub mode: Mode,
    pub pool: Vec<LabeledExample>,
}

impl MicroInstance {
    fn check(&self) -> Result<()> {
        if self.data.len() > MICRO_MAX_POINTS {
            return Err(AgtError::TooLarge(format!(
                "{} points, at most {MICRO_MAX_POINTS} can be enumerated",
                self.data.len()
            )));
        }
        if self.cfg.batch_size != self.data.len() {
            return Err(AgtError::config("micro instances must train full-batch"));
        }
        Ok(())
    }

    /// Every model reachable within budget `k`, the unperturbed one first.
    pub fn reachable_models(&self, k: usize) -> Result<Vec<Mlp>> {
        self.check()?;
        let pm = PerturbationModel::for_mode(self.mode, k);
        self.cfg.validate(self.data.len(), &pm)?;
        if pm.k_add > 0 && self.pool.is_empty() {
            return Err(AgtError::config(
                "candidate pool is empty but additions are allowed",
            ));
        }
        let removals = subsets_up_to(self.data.len(), pm.k_remove);
        let additions = multisets_up_to(self.pool.len(), pm.k_add);
        let total = removals.len() * additions.len();
        if total > MICRO_MAX_RETRAINS {
            return Err(AgtError::TooLarge(format!("{total} retrainings needed")));
        }
        let perturbations: Vec<Perturbation> = removals
            .iter()
            .flat_map(|r| {
                additions.iter().map(move |a| Perturbation {
                    removed: r.clone(),
                    added: a
                        .iter()
                        .map(|&i| Addition {
                            example: self.pool[i].clone(),
                            batches: vec![0; self.cfg.epochs],
                        })
                        .collect(),
                })
            })
            .collect();
        perturbations
            .par_iter()
            .map(|p| retrain(&self.data, &self.shape, &self.cfg, p))
            .collect()
    }
}

/// Exact local sensitivity at `x`: 1 if some admissible perturbation changes
/// the predicted class, else 0.
pub fn exhaustive_micro_sensitivity(inst: &MicroInstance, x: &Array1<f64>, k: usize) -> Result<u8> {
    Ok(micro_sensitivities(inst, std::slice::from_ref(x), k)?[0])
}

/// [`exhaustive_micro_sensitivity`] for many queries, sharing the retrainings.
pub fn micro_sensitivities(inst: &MicroInstance, xs: &[Array1<f64>], k: usize) -> Result<Vec<u8>> {
    inst.check()?;
    if k == 0 {
        return Ok(vec![0; xs.len()]);
    }
    let models = inst.reachable_models(k)?;
    xs.iter()
        .map(|x| {
            let base = models[0].predict(x)?;
            for m in &models[1..] {
                if m.predict(x)? != base {
                    return Ok(1);
                }
            }
            Ok(0)
        })
        .collect()
}

/// Sorted subsets of `0..n` with at most `k` elements.
fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..k.min(n) {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l: &usize| l + 1);
            for i in start..n {
                let mut t: Vec<usize> = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Non-decreasing sequences over `0..n` of length at most `k`.
fn multisets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..k {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().copied().unwrap_or(0);
            for i in start..n {
                let mut t: Vec<usize> = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::train;
    use ndarray::arr1;

    fn tiny_data() -> Vec<LabeledExample> {
        (0..20)
            .map(|i| {
                let y = i % 2;
                let s = if y == 0 { -1.0 } else { 1.0 };
                LabeledExample::new(
                    vec![s + 0.1 * (i as f64).sin(), s * 0.5 + 0.05 * i as f64],
                    y,
                )
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            lr: 0.1,
            lr_decay: 0.1,
            batch_size: 5,
            clip: 1.0,
            shuffle_seed: 4,
            init_seed: 2,
        }
    }

    #[test]
    fn enumeration_sizes() {
        assert_eq!(subsets_up_to(4, 2).len(), 1 + 4 + 6);
        assert_eq!(subsets_up_to(3, 5).len(), 8);
        assert_eq!(multisets_up_to(3, 2).len(), 1 + 3 + 6);
        assert_eq!(multisets_up_to(0, 2).len(), 1);
    }

    #[test]
    fn identity_perturbation_and_feasibility() {
        let data = tiny_data();
        let m = Mlp::init(&ModelShape::new(2, vec![3], 2), 0).unwrap();
        let p = perturb_dataset(
            &data,
            &cfg(),
            &PerturbationModel::none(),
            1,
            &[],
            TrialKind::Random,
            &m,
        )
        .unwrap();
        assert_eq!(p, Perturbation::identity());
        let p = perturb_dataset(
            &data,
            &cfg(),
            &PerturbationModel::none(),
            1,
            &[],
            TrialKind::Adversarial,
            &m,
        )
        .unwrap();
        assert_eq!(p, Perturbation::identity());
        assert!(perturb_dataset(
            &data,
            &cfg(),
            &PerturbationModel::privacy(1),
            1,
            &[],
            TrialKind::Random,
            &m
        )
        .is_err());
        let edge = PerturbationModel::unlearning(data.len() - 15);
        assert!(perturb_dataset(&data, &cfg(), &edge, 1, &[], TrialKind::Random, &m).is_err());
    }

    #[test]
    fn perturbations_respect_budget() {
        let data = tiny_data();
        let pool = candidate_pool(&data[..4], 2, 2, 3.0);
        assert_eq!(pool.len(), 4 + 2 * 2 * 2);
        let m = Mlp::init(&ModelShape::new(2, vec![3], 2), 0).unwrap();
        let pm = PerturbationModel::privacy(2);
        for seed in 0..30 {
            let p =
                perturb_dataset(&data, &cfg(), &pm, seed, &pool, TrialKind::Random, &m).unwrap();
            assert!(p.removed.len() <= 2 && p.added.len() <= 2);
            assert!(p.removed.windows(2).all(|w| w[0] < w[1]));
            assert!(p
                .added
                .iter()
                .all(|a| a.batches.len() == 3 && a.batches.iter().all(|&b| b < 4)));
        }
        let p = perturb_dataset(&data, &cfg(), &pm, 0, &pool, TrialKind::Adversarial, &m).unwrap();
        assert_eq!((p.removed.len(), p.added.len()), (2, 2));
    }

    #[test]
    fn unperturbed_retrain_matches_agt_trajectory() {
        let data = tiny_data();
        let shape = ModelShape::new(2, vec![4], 2);
        let mut agt = TrajectoryHasher::new();
        train_with_hash(&data, &shape, &mut agt);
        let oracle = trajectory_hash(&data, &shape, &cfg(), &Perturbation::identity()).unwrap();
        assert_eq!(agt.hex(), oracle);
    }

    fn train_with_hash(data: &[LabeledExample], shape: &ModelShape, h: &mut TrajectoryHasher) {
        crate::trainer::train_with(data, shape, &cfg(), &PerturbationModel::none(), |s| {
            h.update(s.pbox.nominal())
        })
        .unwrap();
    }

    #[test]
    fn trial_rejects_foreign_boxes() {
        let data = tiny_data();
        let shape = ModelShape::new(2, vec![3], 2);
        let pm = PerturbationModel::unlearning(1);
        let pbox = train(&data, &shape, &cfg(), &pm).unwrap();
        let plan = TrialPlan {
            random: 2,
            adversarial: 1,
            seed: 0,
        };
        let mut other = cfg();
        other.lr = 0.2;
        assert!(matches!(
            soundness_trial(&data, &shape, &other, &pm, &pbox, &plan, &[]),
            Err(AgtError::InvalidTrial(_))
        ));
        let bare = ParamBox::point(pbox.nominal().clone());
        assert!(matches!(
            soundness_trial(&data, &shape, &cfg(), &pm, &bare, &plan, &[]),
            Err(AgtError::InvalidTrial(_))
        ));
        let report = soundness_trial(&data, &shape, &cfg(), &pm, &pbox, &plan, &[]).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.violations(), 0);
    }

    #[test]
    fn micro_rejects_large_or_minibatch_instances() {
        let data = tiny_data();
        let mut c = cfg();
        c.batch_size = 9;
        let inst = MicroInstance {
            data: data[..9].to_vec(),
            shape: ModelShape::new(2, vec![2], 2),
            cfg: c.clone(),
            mode: Mode::Unlearning,
            pool: vec![],
        };
        assert!(matches!(
            exhaustive_micro_sensitivity(&inst, &arr1(&[0.0, 0.0]), 1),
            Err(AgtError::TooLarge(_))
        ));
        c.batch_size = 2;
        let inst = MicroInstance {
            data: data[..4].to_vec(),
            cfg: c,
            ..inst
        };
        assert!(exhaustive_micro_sensitivity(&inst, &arr1(&[0.0, 0.0]), 1).is_err());
    }
}
