//! Interval enclosures over MLP parameters.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{AgtError, Result};
use crate::interval::{IntervalMat, IntervalTensor, IntervalVec};
use crate::nn::{Dense, Mlp, ModelShape};
use crate::trainer::{PerturbationModel, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalLayer {
    pub weight: IntervalMat,
    pub bias: IntervalVec,
}

impl IntervalLayer {
    pub fn point(layer: &Dense) -> Self {
        Self {
            weight: IntervalTensor::point(layer.weight.clone()),
            bias: IntervalTensor::point(layer.bias.clone()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.lo().ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.lo().nrows()
    }

    pub fn lower(&self) -> Dense {
        Dense {
            weight: self.weight.lo().clone(),
            bias: self.bias.lo().clone(),
        }
    }

    pub fn upper(&self) -> Dense {
        Dense {
            weight: self.weight.hi().clone(),
            bias: self.bias.hi().clone(),
        }
    }
}

/// Training settings a box was produced under; the oracle refuses to check a
/// box against any other settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxOrigin {
    pub train: TrainConfig,
    pub perturbation: PerturbationModel,
}

/// Nominal parameters together with elementwise bounds `lower ⪯ nominal ⪯ upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBox {
    nominal: Mlp,
    layers: Vec<IntervalLayer>,
    origin: Option<BoxOrigin>,
}

/// Result of checking a parameter vector against a box.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Containment {
    /// Parameters that fell outside the box by more than the tolerance.
    pub violations: usize,
    /// Largest distance by which any parameter left the box (0 if none did).
    pub max_excess: f64,
}

impl ParamBox {
    pub fn point(model: Mlp) -> Self {
        let layers = model.layers().iter().map(IntervalLayer::point).collect();
        Self {
            nominal: model,
            layers,
            origin: None,
        }
    }

    pub fn from_bounds(nominal: Mlp, lower: Mlp, upper: Mlp) -> Result<Self> {
        if nominal.shape() != lower.shape() || nominal.shape() != upper.shape() {
            return Err(AgtError::dim(
                "nominal, lower and upper models differ in shape",
            ));
        }
        let mut layers = Vec::with_capacity(nominal.layers().len());
        for ((n, l), u) in nominal
            .layers()
            .iter()
            .zip(lower.layers())
            .zip(upper.layers())
        {
            let inside = Zip::from(&l.weight)
                .and(&n.weight)
                .and(&u.weight)
                .all(|&a, &b, &c| a <= b && b <= c)
                && Zip::from(&l.bias)
                    .and(&n.bias)
                    .and(&u.bias)
                    .all(|&a, &b, &c| a <= b && b <= c);
            if !inside {
                return Err(AgtError::Domain(
                    "nominal parameters lie outside the supplied bounds".into(),
                ));
            }
            layers.push(IntervalLayer {
                weight: IntervalTensor::from_ordered(l.weight.clone(), u.weight.clone()),
                bias: IntervalTensor::from_ordered(l.bias.clone(), u.bias.clone()),
            });
        }
        Ok(Self {
            nominal,
            layers,
            origin: None,
        })
    }

    pub fn with_origin(mut self, origin: BoxOrigin) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn origin(&self) -> Option<&BoxOrigin> {
        self.origin.as_ref()
    }

    pub fn nominal(&self) -> &Mlp {
        &self.nominal
    }

    pub fn layers(&self) -> &[IntervalLayer] {
        &self.layers
    }

    pub fn shape(&self) -> ModelShape {
        self.nominal.shape()
    }

    pub fn lower(&self) -> Mlp {
        Mlp::new(self.layers.iter().map(IntervalLayer::lower).collect()).expect("box layers chain")
    }

    pub fn upper(&self) -> Mlp {
        Mlp::new(self.layers.iter().map(IntervalLayer::upper).collect()).expect("box layers chain")
    }

    pub fn max_width(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.max_width().max(l.bias.max_width()))
            .fold(0.0, f64::max)
    }

    /// Elementwise widths in flattened parameter order.
    pub fn widths(&self) -> Vec<f64> {
        let lo = self.lower().flatten();
        let hi = self.upper().flatten();
        hi.iter().zip(&lo).map(|(h, l)| h - l).collect()
    }

    pub fn is_subset_of(&self, other: &ParamBox) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.is_subset_of(&b.weight) && a.bias.is_subset_of(&b.bias))
    }

    /// Counts parameters of `model` outside the box by more than `tol`.
    pub fn containment(&self, model: &Mlp, tol: f64) -> Result<Containment> {
        if model.shape() != self.shape() {
            return Err(AgtError::dim("model shape differs from box shape"));
        }
        let lo = self.lower().flatten();
        let hi = self.upper().flatten();
        let mut report = Containment::default();
        for ((v, l), h) in model.flatten().iter().zip(&lo).zip(&hi) {
            let excess = (l - v).max(v - h).max(0.0);
            report.max_excess = report.max_excess.max(excess);
            if excess > tol {
                report.violations += 1;
            }
        }
        Ok(report)
    }

    /// Shrinks every interval towards the nominal point, keeping `factor` of
    /// its extent on each side. Used to build deliberately unsound boxes.
    pub fn shrink_towards_nominal(&self, factor: f64) -> ParamBox {
        let lower = self.lower();
        let upper = self.upper();
        let shrink = |n: f64, b: f64| n + factor * (b - n);
        let mut lo_layers = Vec::new();
        let mut hi_layers = Vec::new();
        for ((n, l), u) in self
            .nominal
            .layers()
            .iter()
            .zip(lower.layers())
            .zip(upper.layers())
        {
            lo_layers.push(Dense {
                weight: Zip::from(&n.weight)
                    .and(&l.weight)
                    .map_collect(|&a, &b| shrink(a, b)),
                bias: Zip::from(&n.bias)
                    .and(&l.bias)
                    .map_collect(|&a, &b| shrink(a, b)),
            });
            hi_layers.push(Dense {
                weight: Zip::from(&n.weight)
                    .and(&u.weight)
                    .map_collect(|&a, &b| shrink(a, b)),
                bias: Zip::from(&n.bias)
                    .and(&u.bias)
                    .map_collect(|&a, &b| shrink(a, b)),
            });
        }
        let mut shrunk = ParamBox::from_bounds(
            self.nominal.clone(),
            Mlp::new(lo_layers).expect("shape preserved"),
            Mlp::new(hi_layers).expect("shape preserved"),
        )
        .expect("shrinking keeps the nominal inside");
        shrunk.origin = self.origin.clone();
        shrunk
    }

    /// Replaces all three parameter sets; used by the trainer after each step.
    pub(crate) fn set(&mut self, nominal: Mlp, layers: Vec<IntervalLayer>) {
        self.nominal = nominal;
        self.layers = layers;
    }
}
