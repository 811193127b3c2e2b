//! Privacy- and unlearning-safe certificates from parameter boxes.
//!
//! A prediction at `x` is certified under a box when the nominal class's
//! lower logit strictly exceeds every other class's upper logit across the
//! whole box. A ladder of boxes trained for increasing `k` then yields `k'`,
//! the largest certified ladder entry, and from it an upper bound on the
//! β-smooth sensitivity of the prediction.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::interval_forward;
use crate::error::{AgtError, Result};
use crate::nn::{LabeledExample, Mlp, ModelShape};
use crate::parambox::ParamBox;
use crate::trainer::{train, Mode, PerturbationModel, TrainConfig};

pub const DEFAULT_KSET: [usize; 10] = [1, 2, 3, 4, 5, 8, 12, 16, 24, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certification {
    pub certified: bool,
    pub predicted: usize,
}

/// Checks whether the nominal prediction at `x` holds for every parameter in the box.
pub fn is_safe(pbox: &ParamBox, x: &Array1<f64>) -> Result<Certification> {
    let predicted = pbox.nominal().predict(x)?;
    let (logits, _) = interval_forward(pbox, x)?;
    let lo = logits.lo()[predicted];
    let certified = logits
        .hi()
        .iter()
        .enumerate()
        .all(|(c, &hi)| c == predicted || lo > hi);
    Ok(Certification {
        certified,
        predicted,
    })
}

/// Boxes for a ladder of perturbation budgets, all trained from one config.
#[derive(Clone, Debug)]
pub struct CertificateBundle {
    kset: Vec<usize>,
    boxes: Vec<ParamBox>,
    mode: Mode,
    beta: f64,
}

impl CertificateBundle {
    pub fn new(kset: Vec<usize>, boxes: Vec<ParamBox>, mode: Mode, beta: f64) -> Result<Self> {
        validate_kset(&kset)?;
        if boxes.len() != kset.len() {
            return Err(AgtError::config(format!(
                "{} boxes supplied for {} ladder entries",
                boxes.len(),
                kset.len()
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(AgtError::config(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let nominal = boxes[0].nominal();
        if boxes.iter().any(|b| b.nominal() != nominal) {
            return Err(AgtError::config(
                "bundle boxes do not share a nominal model",
            ));
        }
        Ok(Self {
            kset,
            boxes,
            mode,
            beta,
        })
    }

    pub fn kset(&self) -> &[usize] {
        &self.kset
    }

    pub fn boxes(&self) -> &[ParamBox] {
        &self.boxes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn shape(&self) -> ModelShape {
        self.boxes[0].shape()
    }

    pub fn nominal(&self) -> &Mlp {
        self.boxes[0].nominal()
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(AgtError::config(format!(
                "beta must be positive, got {beta}"
            )));
        }
        self.beta = beta;
        Ok(self)
    }

    /// Applies `f` to every box, keeping the ladder and metadata.
    pub fn map_boxes(&self, f: impl Fn(&ParamBox) -> ParamBox) -> Self {
        Self {
            kset: self.kset.clone(),
            boxes: self.boxes.iter().map(f).collect(),
            mode: self.mode,
            beta: self.beta,
        }
    }
}

pub fn validate_kset(kset: &[usize]) -> Result<()> {
    if kset.is_empty() {
        return Err(AgtError::config("kset is empty"));
    }
    if kset[0] < 1 || kset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AgtError::config(format!(
            "kset must be strictly increasing and start at 1 or above, got {kset:?}"
        )));
    }
    Ok(())
}

/// Trains one box per ladder entry in parallel.
pub fn train_bundle(
    data: &[LabeledExample],
    shape: &ModelShape,
    cfg: &TrainConfig,
    mode: Mode,
    kset: &[usize],
    beta: f64,
) -> Result<CertificateBundle> {
    validate_kset(kset)?;
    for &k in kset {
        cfg.validate(data.len(), &PerturbationModel::for_mode(mode, k))?;
    }
    let boxes = kset
        .par_iter()
        .map(|&k| train(data, shape, cfg, &PerturbationModel::for_mode(mode, k)))
        .collect::<Result<Vec<_>>>()?;
    CertificateBundle::new(kset.to_vec(), boxes, mode, beta)
}

/// Largest ladder entry at which `x` is certified, by binary search.
pub fn find_k_prime(bundle: &CertificateBundle, x: &Array1<f64>) -> Result<Option<usize>> {
    // Invariant: boxes[..lo] certified, boxes[hi..] not.
    let (mut lo, mut hi) = (0, bundle.kset.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if is_safe(&bundle.boxes[mid], x)?.certified {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(lo.checked_sub(1).map(|i| bundle.kset[i]))
}

/// `exp(-2β(k'+1))`, or 1 without any certified entry.
pub fn smooth_bound_from_k_prime(k_prime: Option<usize>, beta: f64) -> f64 {
    k_prime.map_or(1.0, |k| (-2.0 * beta * (k as f64 + 1.0)).exp())
}

pub fn smooth_sensitivity_bound(
    bundle: &CertificateBundle,
    x: &Array1<f64>,
    beta: f64,
) -> Result<f64> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(AgtError::config(format!(
            "beta must be positive, got {beta}"
        )));
    }
    Ok(smooth_bound_from_k_prime(find_k_prime(bundle, x)?, beta))
}

/// Full certificate for one query, evaluating every ladder entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCertificate {
    pub x: Array1<f64>,
    pub predicted: usize,
    pub k_prime: Option<usize>,
    /// Local-sensitivity bound per ladder entry: 0 when certified, else 1.
    pub ls_at_k: BTreeMap<usize, u8>,
    pub smooth_bound: f64,
}

pub fn certify_query(bundle: &CertificateBundle, x: &Array1<f64>) -> Result<QueryCertificate> {
    let mut ls_at_k = BTreeMap::new();
    let mut predicted = None;
    for (&k, b) in bundle.kset.iter().zip(&bundle.boxes) {
        let c = is_safe(b, x)?;
        predicted.get_or_insert(c.predicted);
        ls_at_k.insert(k, u8::from(!c.certified));
    }
    // Nested boxes make the step monotone; a wider box failing before a
    // narrower one is treated as failing from there on.
    let k_prime = bundle
        .kset
        .iter()
        .take_while(|k| ls_at_k[k] == 0)
        .last()
        .copied();
    let mut seen_failure = false;
    for v in ls_at_k.values_mut() {
        seen_failure |= *v == 1;
        *v = u8::from(seen_failure);
    }
    Ok(QueryCertificate {
        x: x.clone(),
        predicted: predicted.expect("bundle ladder is non-empty"),
        k_prime,
        ls_at_k,
        smooth_bound: smooth_bound_from_k_prime(k_prime, bundle.beta),
    })
}

/// Fraction of `xs` certified at each ladder entry.
pub fn certified_fractions(
    bundle: &CertificateBundle,
    xs: &[Array1<f64>],
) -> Result<Vec<(usize, f64)>> {
    bundle
        .kset
        .iter()
        .zip(&bundle.boxes)
        .map(|(&k, b)| {
            let flags = xs
                .par_iter()
                .map(|x| is_safe(b, x).map(|c| c.certified))
                .collect::<Result<Vec<_>>>()?;
            let n = flags.iter().filter(|&&c| c).count();
            let frac = if xs.is_empty() {
                0.0
            } else {
                n as f64 / xs.len() as f64
            };
            Ok((k, frac))
        })
        .collect()
}
