//! Elementwise interval arithmetic over vectors and matrices.
//!
//! An [`IntervalTensor`] stores a lower and an upper array of identical shape.
//! Every operation returns an enclosure of the pointwise operation applied to
//! all members of its operands. Products use the four-endpoint rule, so each
//! output element is the tightest interval obtainable from its terms.
//!
//! Arithmetic is plain `f64` with round-to-nearest. Because rounding is
//! monotone, a lower bound summed in the same order as a pointwise evaluation
//! never exceeds it; no outward rounding is applied.

use ndarray::{Array, Array1, Array2, Dimension, Ix1, Ix2, Zip};

use crate::error::{AgtError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor<D: Dimension> {
    lo: Array<f64, D>,
    hi: Array<f64, D>,
}

pub type IntervalVec = IntervalTensor<Ix1>;
pub type IntervalMat = IntervalTensor<Ix2>;

impl<D: Dimension> IntervalTensor<D> {
    /// Builds an interval from explicit bounds, rejecting mismatched shapes,
    /// NaN endpoints and inverted bounds.
    pub fn new(lo: Array<f64, D>, hi: Array<f64, D>) -> Result<Self> {
        if lo.shape() != hi.shape() {
            return Err(AgtError::dim(format!(
                "lower shape {:?} differs from upper shape {:?}",
                lo.shape(),
                hi.shape()
            )));
        }
        if let Some((l, h)) = lo
            .iter()
            .zip(hi.iter())
            .find(|(l, h)| l.is_nan() || h.is_nan() || l > h)
        {
            return Err(AgtError::Domain(format!("invalid interval [{l}, {h}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Builds an interval whose bounds are already known to be ordered.
    pub(crate) fn from_ordered(lo: Array<f64, D>, hi: Array<f64, D>) -> Self {
        debug_assert_eq!(lo.shape(), hi.shape());
        debug_assert!(lo.iter().zip(hi.iter()).all(|(l, h)| l <= h));
        Self { lo, hi }
    }

    pub fn point(value: Array<f64, D>) -> Self {
        Self {
            lo: value.clone(),
            hi: value,
        }
    }

    pub fn lo(&self) -> &Array<f64, D> {
        &self.lo
    }

    pub fn hi(&self) -> &Array<f64, D> {
        &self.hi
    }

    pub fn into_bounds(self) -> (Array<f64, D>, Array<f64, D>) {
        (self.lo, self.hi)
    }

    pub fn shape(&self) -> &[usize] {
        self.lo.shape()
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn midpoint(&self) -> Array<f64, D> {
        Zip::from(&self.lo)
            .and(&self.hi)
            .map_collect(|&l, &h| 0.5 * (l + h))
    }

    pub fn width(&self) -> Array<f64, D> {
        &self.hi - &self.lo
    }

    /// Applies a non-decreasing function to both endpoints in place.
    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.lo.mapv_inplace(&f);
        self.hi.mapv_inplace(&f);
    }

    pub fn max_width(&self) -> f64 {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(l, h)| h - l)
            .fold(0.0, f64::max)
    }

    /// True when `value` lies inside the interval, allowing an absolute slack of `tol`.
    pub fn contains_within(&self, value: &Array<f64, D>, tol: f64) -> bool {
        value.shape() == self.shape()
            && Zip::from(&self.lo)
                .and(&self.hi)
                .and(value)
                .all(|&l, &h, &v| v >= l - tol && v <= h + tol)
    }

    pub fn contains(&self, value: &Array<f64, D>) -> bool {
        self.contains_within(value, 0.0)
    }

    /// Elementwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && Zip::from(&self.lo)
                .and(&self.hi)
                .and(&other.lo)
                .and(&other.hi)
                .all(|&l, &h, &ol, &oh| l >= ol && h <= oh)
    }
}

fn check_same_shape<D: Dimension>(
    a: &IntervalTensor<D>,
    b: &IntervalTensor<D>,
    op: &str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AgtError::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Enclosure of `{x * y : x ∈ [a_lo, a_hi], y ∈ [b_lo, b_hi]}`.
#[inline]
pub fn mul_bounds(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> (f64, f64) {
    if b_lo >= 0.0 {
        let lo = if a_lo >= 0.0 {
            a_lo * b_lo
        } else {
            a_lo * b_hi
        };
        let hi = if a_hi >= 0.0 {
            a_hi * b_hi
        } else {
            a_hi * b_lo
        };
        (lo, hi)
    } else if a_lo >= 0.0 {
        // b_lo < 0 here
        let hi = if b_hi >= 0.0 {
            a_hi * b_hi
        } else {
            a_lo * b_hi
        };
        (a_hi * b_lo, hi)
    } else {
        let p1 = a_lo * b_lo;
        let p2 = a_lo * b_hi;
        let p3 = a_hi * b_lo;
        let p4 = a_hi * b_hi;
        (p1.min(p2).min(p3.min(p4)), p1.max(p2).max(p3.max(p4)))
    }
}

pub fn iadd<D: Dimension>(
    a: &IntervalTensor<D>,
    b: &IntervalTensor<D>,
) -> Result<IntervalTensor<D>> {
    check_same_shape(a, b, "iadd")?;
    Ok(IntervalTensor::from_ordered(&a.lo + &b.lo, &a.hi + &b.hi))
}

pub fn ihadamard<D: Dimension>(
    a: &IntervalTensor<D>,
    b: &IntervalTensor<D>,
) -> Result<IntervalTensor<D>> {
    check_same_shape(a, b, "ihadamard")?;
    let mut lo = Array::zeros(a.lo.raw_dim());
    let mut hi = Array::zeros(a.lo.raw_dim());
    Zip::from(&mut lo)
        .and(&mut hi)
        .and(&a.lo)
        .and(&a.hi)
        .and(&b.lo)
        .and(&b.hi)
        .for_each(|l, h, &al, &ah, &bl, &bh| {
            (*l, *h) = mul_bounds(al, ah, bl, bh);
        });
    Ok(IntervalTensor::from_ordered(lo, hi))
}

/// Interval matrix product `a × b`.
pub fn imatmul(a: &IntervalMat, b: &IntervalMat) -> Result<IntervalMat> {
    let (n, inner) = a.lo.dim();
    let (inner_b, m) = b.lo.dim();
    if inner != inner_b {
        return Err(AgtError::dim(format!(
            "imatmul: inner dimensions {inner} and {inner_b} differ"
        )));
    }
    let mut lo = Array2::zeros((n, m));
    let mut hi = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut sl = 0.0;
            let mut sh = 0.0;
            for t in 0..inner {
                let (pl, ph) = mul_bounds(a.lo[[i, t]], a.hi[[i, t]], b.lo[[t, j]], b.hi[[t, j]]);
                sl += pl;
                sh += ph;
            }
            lo[[i, j]] = sl;
            hi[[i, j]] = sh;
        }
    }
    Ok(IntervalTensor::from_ordered(lo, hi))
}

/// Interval matrix-vector product `a × v`.
pub fn imatvec(a: &IntervalMat, v: &IntervalVec) -> Result<IntervalVec> {
    let (n, inner) = a.lo.dim();
    if inner != v.len() {
        return Err(AgtError::dim(format!(
            "imatvec: matrix has {inner} columns, vector has {} entries",
            v.len()
        )));
    }
    let mut lo = Array1::zeros(n);
    let mut hi = Array1::zeros(n);
    for i in 0..n {
        let (sl, sh) = dot_bounds(a.lo.row(i), a.hi.row(i), v.lo.view(), v.hi.view());
        lo[i] = sl;
        hi[i] = sh;
    }
    Ok(IntervalTensor::from_ordered(lo, hi))
}

/// Interval product `aᵀ × v` without materialising the transpose.
pub fn imatvec_transposed(a: &IntervalMat, v: &IntervalVec) -> Result<IntervalVec> {
    let (rows, cols) = a.lo.dim();
    if rows != v.len() {
        return Err(AgtError::dim(format!(
            "imatvec_transposed: matrix has {rows} rows, vector has {} entries",
            v.len()
        )));
    }
    let mut lo = Array1::zeros(cols);
    let mut hi = Array1::zeros(cols);
    for j in 0..cols {
        let (sl, sh) = dot_bounds(a.lo.column(j), a.hi.column(j), v.lo.view(), v.hi.view());
        lo[j] = sl;
        hi[j] = sh;
    }
    Ok(IntervalTensor::from_ordered(lo, hi))
}

#[inline]
fn dot_bounds(
    a_lo: ndarray::ArrayView1<f64>,
    a_hi: ndarray::ArrayView1<f64>,
    b_lo: ndarray::ArrayView1<f64>,
    b_hi: ndarray::ArrayView1<f64>,
) -> (f64, f64) {
    let mut sl = 0.0;
    let mut sh = 0.0;
    for t in 0..a_lo.len() {
        let (pl, ph) = mul_bounds(a_lo[t], a_hi[t], b_lo[t], b_hi[t]);
        sl += pl;
        sh += ph;
    }
    (sl, sh)
}

/// Interval outer product `a ⊗ bᵀ`.
pub fn iouter(a: &IntervalVec, b: &IntervalVec) -> IntervalMat {
    let (n, m) = (a.len(), b.len());
    let mut lo = Array2::zeros((n, m));
    let mut hi = Array2::zeros((n, m));
    for i in 0..n {
        let (al, ah) = (a.lo[i], a.hi[i]);
        for j in 0..m {
            let (l, h) = mul_bounds(al, ah, b.lo[j], b.hi[j]);
            lo[[i, j]] = l;
            hi[[i, j]] = h;
        }
    }
    IntervalTensor::from_ordered(lo, hi)
}

pub fn itranspose(a: &IntervalMat) -> IntervalMat {
    IntervalTensor::from_ordered(a.lo.t().to_owned(), a.hi.t().to_owned())
}

/// Multiplies by a real constant; a negative factor swaps the bounds.
pub fn iscale<D: Dimension>(a: &IntervalTensor<D>, c: f64) -> IntervalTensor<D> {
    if c >= 0.0 {
        IntervalTensor::from_ordered(&a.lo * c, &a.hi * c)
    } else {
        IntervalTensor::from_ordered(&a.hi * c, &a.lo * c)
    }
}

/// Applies an elementwise non-decreasing function to both endpoints.
pub fn imonotone_map<D: Dimension, F>(a: &IntervalTensor<D>, f: F) -> IntervalTensor<D>
where
    F: Fn(f64) -> f64,
{
    IntervalTensor::from_ordered(a.lo.mapv(&f), a.hi.mapv(&f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn iv(lo: &[f64], hi: &[f64]) -> IntervalVec {
        IntervalTensor::new(arr1(lo), arr1(hi)).unwrap()
    }

    #[test]
    fn new_rejects_inverted_and_mismatched() {
        assert!(IntervalTensor::new(arr1(&[1.0]), arr1(&[0.0])).is_err());
        assert!(IntervalTensor::new(arr1(&[0.0, 1.0]), arr1(&[1.0])).is_err());
        assert!(IntervalTensor::new(arr1(&[f64::NAN]), arr1(&[1.0])).is_err());
    }

    #[test]
    fn iadd_examples() {
        let zero = iv(&[0.0, 0.0], &[0.0, 0.0]);
        let b = iv(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(iadd(&zero, &b).unwrap(), b);

        let s = iv(&[-1.0], &[1.0]);
        assert_eq!(iadd(&s, &s).unwrap(), iv(&[-2.0], &[2.0]));

        assert!(matches!(
            iadd(&zero, &iv(&[0.0], &[0.0])),
            Err(AgtError::Dimension(_))
        ));
    }

    #[test]
    fn ihadamard_examples() {
        let one = iv(&[1.0], &[1.0]);
        let b = iv(&[2.0], &[3.0]);
        assert_eq!(ihadamard(&one, &b).unwrap(), b);
        let s = iv(&[-1.0], &[1.0]);
        assert_eq!(ihadamard(&s, &s).unwrap(), s);
    }

    #[test]
    fn mul_bounds_matches_four_products() {
        let vals = [-3.0, -1.5, -0.0, 0.0, 0.5, 2.0];
        for &al in &vals {
            for &ah in vals.iter().filter(|&&v| v >= al) {
                for &bl in &vals {
                    for &bh in vals.iter().filter(|&&v| v >= bl) {
                        let p = [al * bl, al * bh, ah * bl, ah * bh];
                        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        assert_eq!(mul_bounds(al, ah, bl, bh), (lo, hi), "{al} {ah} {bl} {bh}");
                    }
                }
            }
        }
    }

    #[test]
    fn imatmul_point_and_identity() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = arr2(&[[0.5, -1.0], [2.0, 0.25]]);
        let prod = imatmul(
            &IntervalTensor::point(a.clone()),
            &IntervalTensor::point(b.clone()),
        )
        .unwrap();
        assert!(prod.is_point());
        assert_eq!(prod.lo(), &a.dot(&b));

        let id = IntervalTensor::point(Array2::eye(2));
        let wide = IntervalTensor::new(b.clone() - 1.0, b.clone() + 1.0).unwrap();
        assert_eq!(imatmul(&id, &wide).unwrap(), wide);

        let bad = IntervalTensor::point(Array2::<f64>::zeros((3, 1)));
        assert!(imatmul(&id, &bad).is_err());
    }

    #[test]
    fn matvec_variants_agree_with_imatmul() {
        let a = IntervalTensor::new(
            arr2(&[[-1.0, 0.5, 2.0], [0.0, -2.0, 1.0]]),
            arr2(&[[1.0, 0.75, 2.5], [0.5, -1.0, 3.0]]),
        )
        .unwrap();
        let v = iv(&[-1.0, 0.0, 2.0], &[0.5, 1.0, 2.0]);
        let col = IntervalTensor::from_ordered(
            v.lo().clone().insert_axis(ndarray::Axis(1)),
            v.hi().clone().insert_axis(ndarray::Axis(1)),
        );
        let full = imatmul(&a, &col).unwrap();
        let mv = imatvec(&a, &v).unwrap();
        assert_eq!(mv.lo(), &full.lo().column(0).to_owned());
        assert_eq!(mv.hi(), &full.hi().column(0).to_owned());

        let w = iv(&[0.0, -1.0], &[1.0, 1.0]);
        let t = imatvec_transposed(&a, &w).unwrap();
        let expect = imatvec(&itranspose(&a), &w).unwrap();
        assert_eq!(t, expect);
    }

    #[test]
    fn plumbing_examples() {
        let m = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(
            itranspose(&IntervalTensor::point(m.clone())).lo(),
            &m.t().to_owned()
        );
        assert_eq!(iscale(&iv(&[1.0], &[2.0]), -1.0), iv(&[-2.0], &[-1.0]));
        assert_eq!(
            imonotone_map(&iv(&[-1.0], &[2.0]), |v| v.max(0.0)),
            iv(&[0.0], &[2.0])
        );
    }

    #[test]
    fn empty_tensors_are_legal() {
        let e = IntervalTensor::point(Array2::<f64>::zeros((0, 3)));
        let f = IntervalTensor::point(Array2::<f64>::zeros((3, 0)));
        assert_eq!(imatmul(&e, &f).unwrap().shape(), &[0, 0]);
        let g = IntervalTensor::point(Array2::<f64>::zeros((2, 0)));
        let h = IntervalTensor::point(Array2::<f64>::zeros((0, 2)));
        let gh = imatmul(&g, &h).unwrap();
        assert!(gh.is_point());
        assert!(gh.lo().iter().all(|&v| v == 0.0));
        assert!(iadd(&e, &e).unwrap().is_empty());
    }

    #[test]
    fn subset_and_containment() {
        let inner = iv(&[0.0], &[1.0]);
        let outer = iv(&[-1.0], &[2.0]);
        assert!(inner.is_subset_of(&outer));
        assert!(!outer.is_subset_of(&inner));
        assert!(outer.contains(&arr1(&[1.5])));
        assert!(!inner.contains(&arr1(&[1.5])));
        assert!(inner.contains_within(&arr1(&[1.0 + 1e-13]), 1e-12));
    }
}
