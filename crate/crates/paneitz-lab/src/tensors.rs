//! Dense tensors at a single point, with explicit index variance.
//!
//! Values live in row-major `Vec<f64>` with one stride per slot. Contraction is
//! only allowed between an upper and a lower slot; contracting two slots of the
//! same variance is a variance error — raise or lower through a [`PointMetric`]
//! first. Nothing here knows about jets: curvature machinery evaluates jets and
//! hands the resulting values over as `PointTensor`s.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variance {
    Up,
    Down,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("slot {0} out of range for rank {1}")]
    SlotOutOfRange(usize, usize),
    #[error("cannot contract two {0:?} slots; raise or lower one first")]
    VarianceMismatch(Variance),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("rank/variance pattern mismatch between operands")]
    PatternMismatch,
    #[error("metric is singular or not invertible at this point")]
    SingularMetric,
    #[error("tensor rank {0} exceeds supported maximum {MAX_RANK}")]
    RankTooHigh(usize),
}

/// Ranks above this are refused; the curvature stack needs at most rank 4
/// (plus transient rank-5 jets handled elsewhere).
pub const MAX_RANK: usize = 5;

/// Metric, inverse and determinant evaluated at one point. Signature is free:
/// Lorentzian blocks work the same as Riemannian ones.
#[derive(Debug, Clone)]
pub struct PointMetric {
    dim: usize,
    g: Vec<f64>,
    inv: Vec<f64>,
    det: f64,
}

impl PointMetric {
    pub fn new(dim: usize, g: Vec<f64>) -> Result<Self, TensorError> {
        if g.len() != dim * dim {
            return Err(TensorError::DimMismatch(g.len(), dim * dim));
        }
        // Equilibrate before inverting: conformally tiny or huge metrics
        // (stereographic charts far from the origin) are perfectly regular,
        // and dividing out the magnitude keeps the inversion and any
        // singularity test scale-free.
        let scale = g.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1e-30);
        let m = DMatrix::from_row_slice(dim, dim, &g).unscale(scale);
        let det = m.determinant() * scale.powi(dim as i32);
        let inv = m
            .try_inverse()
            .ok_or(TensorError::SingularMetric)?
            .unscale(scale);
        let mut inv_row = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                inv_row[i * dim + j] = inv[(i, j)];
            }
        }
        Ok(PointMetric {
            dim,
            g,
            inv: inv_row,
            det,
        })
    }

    pub fn euclidean(dim: usize) -> Self {
        let mut g = vec![0.0; dim * dim];
        for i in 0..dim {
            g[i * dim + i] = 1.0;
        }
        PointMetric {
            dim,
            g: g.clone(),
            inv: g,
            det: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.dim + j]
    }

    pub fn upper(&self, i: usize, j: usize) -> f64 {
        self.inv[i * self.dim + j]
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    /// `sqrt(|det g|)` — the volume density in either signature.
    pub fn volume_density(&self) -> f64 {
        self.det.abs().sqrt()
    }

    pub fn as_tensor(&self) -> PointTensor {
        PointTensor {
            dim: self.dim,
            variance: vec![Variance::Down, Variance::Down],
            data: self.g.clone(),
        }
    }

    pub fn inverse_tensor(&self) -> PointTensor {
        PointTensor {
            dim: self.dim,
            variance: vec![Variance::Up, Variance::Up],
            data: self.inv.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointTensor {
    dim: usize,
    variance: Vec<Variance>,
    data: Vec<f64>,
}

impl PointTensor {
    pub fn zeros(dim: usize, variance: Vec<Variance>) -> Result<Self, TensorError> {
        if variance.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh(variance.len()));
        }
        let len = dim.pow(variance.len() as u32);
        Ok(PointTensor {
            dim,
            variance,
            data: vec![0.0; len],
        })
    }

    pub fn scalar(v: f64) -> Self {
        PointTensor {
            dim: 1,
            variance: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn<F: FnMut(&[usize]) -> f64>(
        dim: usize,
        variance: Vec<Variance>,
        mut f: F,
    ) -> Result<Self, TensorError> {
        let mut t = PointTensor::zeros(dim, variance)?;
        let rank = t.rank();
        let mut idx = vec![0usize; rank];
        for flat in 0..t.data.len() {
            t.unflatten(flat, &mut idx);
            t.data[flat] = f(&idx);
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.variance.len()
    }

    pub fn variance(&self) -> &[Variance] {
        &self.variance
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    fn unflatten(&self, mut flat: usize, idx: &mut [usize]) {
        for slot in (0..idx.len()).rev() {
            idx[slot] = flat % self.dim;
            flat /= self.dim;
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flatten(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let k = self.flatten(idx);
        self.data[k] = v;
    }

    pub fn add(&self, other: &PointTensor) -> Result<PointTensor, TensorError> {
        if self.dim != other.dim || self.variance != other.variance {
            return Err(TensorError::PatternMismatch);
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> PointTensor {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn axpy(&self, s: f64, other: &PointTensor) -> Result<PointTensor, TensorError> {
        self.add(&other.scale(s))
    }

    /// Tensor (outer) product; variance patterns concatenate.
    pub fn outer(&self, other: &PointTensor) -> Result<PointTensor, TensorError> {
        if self.dim != other.dim && self.rank() != 0 && other.rank() != 0 {
            return Err(TensorError::DimMismatch(self.dim, other.dim));
        }
        let dim = if self.rank() == 0 { other.dim } else { self.dim };
        let mut variance = self.variance.clone();
        variance.extend_from_slice(&other.variance);
        if variance.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh(variance.len()));
        }
        let mut out = PointTensor::zeros(dim, variance)?;
        for (ka, &a) in self.data.iter().enumerate() {
            for (kb, &b) in other.data.iter().enumerate() {
                out.data[ka * other.data.len() + kb] = a * b;
            }
        }
        Ok(out)
    }

    /// Contract an upper slot against a lower slot (natural pairing, no metric).
    pub fn contract(&self, a: usize, b: usize) -> Result<PointTensor, TensorError> {
        let rank = self.rank();
        if a >= rank || b >= rank || a == b {
            return Err(TensorError::SlotOutOfRange(a.max(b), rank));
        }
        if self.variance[a] == self.variance[b] {
            return Err(TensorError::VarianceMismatch(self.variance[a]));
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let mut variance = self.variance.clone();
        variance.remove(hi);
        variance.remove(lo);
        let mut out = PointTensor::zeros(self.dim, variance)?;
        let mut idx = vec![0usize; rank];
        let mut out_idx = vec![0usize; rank - 2];
        for flat in 0..out.data.len() {
            out.unflatten(flat, &mut out_idx);
            // reassemble the full index with the contracted pair running
            let mut acc = 0.0;
            for k in 0..self.dim {
                let mut pos = 0;
                for slot in 0..rank {
                    idx[slot] = if slot == lo || slot == hi {
                        k
                    } else {
                        let v = out_idx[pos];
                        pos += 1;
                        v
                    };
                }
                acc += self.data[self.flatten(&idx)];
            }
            out.data[flat] = acc;
        }
        Ok(out)
    }

    /// Flip one slot's variance through the metric.
    pub fn raise(&self, slot: usize, metric: &PointMetric) -> Result<PointTensor, TensorError> {
        self.convert_slot(slot, metric, Variance::Up)
    }

    pub fn lower(&self, slot: usize, metric: &PointMetric) -> Result<PointTensor, TensorError> {
        self.convert_slot(slot, metric, Variance::Down)
    }

    fn convert_slot(
        &self,
        slot: usize,
        metric: &PointMetric,
        target: Variance,
    ) -> Result<PointTensor, TensorError> {
        if slot >= self.rank() {
            return Err(TensorError::SlotOutOfRange(slot, self.rank()));
        }
        if metric.dim() != self.dim {
            return Err(TensorError::DimMismatch(metric.dim(), self.dim));
        }
        if self.variance[slot] == target {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.variance[slot] = target;
        let rank = self.rank();
        let mut idx = vec![0usize; rank];
        for flat in 0..out.data.len() {
            out.unflatten(flat, &mut idx);
            let i = idx[slot];
            let mut acc = 0.0;
            for k in 0..self.dim {
                idx[slot] = k;
                let w = match target {
                    Variance::Up => metric.upper(i, k),
                    Variance::Down => metric.lower(i, k),
                };
                acc += w * self.data[self.flatten(&idx)];
            }
            idx[slot] = i;
            out.data[flat] = acc;
        }
        Ok(out)
    }

    /// Full metric contraction of two tensors with the same rank: slots are
    /// paired in order, raising/lowering as needed. `g(T, T)` is the squared
    /// norm (indefinite in Lorentzian signature).
    pub fn inner_product(
        &self,
        other: &PointTensor,
        metric: &PointMetric,
    ) -> Result<f64, TensorError> {
        if self.rank() != other.rank() || self.dim != other.dim {
            return Err(TensorError::PatternMismatch);
        }
        // raise every slot of `self`, lower every slot of `other`
        let mut up = self.clone();
        for s in 0..self.rank() {
            up = up.raise(s, metric)?;
        }
        let mut down = other.clone();
        for s in 0..other.rank() {
            down = down.lower(s, metric)?;
        }
        Ok(up
            .data
            .iter()
            .zip(&down.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self, metric: &PointMetric) -> Result<f64, TensorError> {
        self.inner_product(self, metric)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest deviation from symmetry under swapping two slots.
    pub fn symmetry_defect(&self, a: usize, b: usize) -> Result<f64, TensorError> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(TensorError::SlotOutOfRange(a.max(b), rank));
        }
        if self.variance[a] != self.variance[b] {
            return Err(TensorError::VarianceMismatch(self.variance[a]));
        }
        let mut idx = vec![0usize; rank];
        let mut worst = 0.0_f64;
        for flat in 0..self.data.len() {
            self.unflatten(flat, &mut idx);
            idx.swap(a, b);
            let swapped = self.data[self.flatten(&idx)];
            idx.swap(a, b);
            worst = worst.max((self.data[flat] - swapped).abs());
        }
        Ok(worst)
    }

    /// Largest deviation from antisymmetry under swapping two slots.
    pub fn antisymmetry_defect(&self, a: usize, b: usize) -> Result<f64, TensorError> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(TensorError::SlotOutOfRange(a.max(b), rank));
        }
        let mut idx = vec![0usize; rank];
        let mut worst = 0.0_f64;
        for flat in 0..self.data.len() {
            self.unflatten(flat, &mut idx);
            idx.swap(a, b);
            let swapped = self.data[self.flatten(&idx)];
            idx.swap(a, b);
            worst = worst.max((self.data[flat] + swapped).abs());
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_metric() -> PointMetric {
        // symmetric positive definite 3x3
        PointMetric::new(
            3,
            vec![2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.1],
        )
        .unwrap()
    }

    #[test]
    fn metric_inverse_is_inverse() {
        let m = sample_metric();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += m.lower(i, k) * m.upper(k, j);
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(acc, expect, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn lorentzian_metric_inverts_with_negative_det() {
        let mut g = vec![0.0; 16];
        g[0] = -1.5;
        g[5] = 1.0;
        g[10] = 1.0;
        g[15] = 1.0;
        let m = PointMetric::new(4, g).unwrap();
        assert!(m.det() < 0.0);
        assert_relative_eq!(m.upper(0, 0), -1.0 / 1.5, epsilon = 1e-14);
        assert_relative_eq!(m.volume_density(), 1.5_f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn contraction_needs_opposite_variance() {
        let t = PointTensor::zeros(3, vec![Variance::Down, Variance::Down]).unwrap();
        match t.contract(0, 1) {
            Err(TensorError::VarianceMismatch(v)) => assert_eq!(v, Variance::Down),
            other => panic!("expected variance error, got {other:?}"),
        }
    }

    #[test]
    fn contract_matches_hand_loop() {
        // T^i_{jk}, contract i against j
        let t = PointTensor::from_fn(
            3,
            vec![Variance::Up, Variance::Down, Variance::Down],
            |idx| (idx[0] * 9 + idx[1] * 3 + idx[2]) as f64 * 0.25 - 1.0,
        )
        .unwrap();
        let c = t.contract(0, 1).unwrap();
        assert_eq!(c.rank(), 1);
        for k in 0..3 {
            let mut expect = 0.0;
            for i in 0..3 {
                expect += t.get(&[i, i, k]);
            }
            assert_relative_eq!(c.get(&[k]), expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn raise_then_lower_roundtrips() {
        let m = sample_metric();
        let t = PointTensor::from_fn(3, vec![Variance::Down, Variance::Down], |idx| {
            ((idx[0] + 1) * (idx[1] + 2)) as f64 * 0.3
        })
        .unwrap();
        let rt = t.raise(1, &m).unwrap().lower(1, &m).unwrap();
        for (a, b) in t.data().iter().zip(rt.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn metric_traces_to_dimension() {
        let m = sample_metric();
        let g = m.as_tensor();
        let mixed = g.raise(0, &m).unwrap();
        let tr = mixed.contract(0, 1).unwrap();
        assert_relative_eq!(tr.get(&[]), 3.0, epsilon = 1e-13);
        assert_relative_eq!(g.norm_sq(&m).unwrap(), 3.0, epsilon = 1e-13);
    }

    #[test]
    fn inner_product_reduces_to_euclidean_dot() {
        let m = PointMetric::euclidean(4);
        let a = PointTensor::from_fn(4, vec![Variance::Down], |i| i[0] as f64 + 1.0).unwrap();
        let b = PointTensor::from_fn(4, vec![Variance::Down], |i| 2.0 - i[0] as f64).unwrap();
        let expect: f64 = (0..4).map(|i| (i as f64 + 1.0) * (2.0 - i as f64)).sum();
        assert_relative_eq!(a.inner_product(&b, &m).unwrap(), expect, epsilon = 1e-14);
    }

    #[test]
    fn symmetry_defect_detects_asymmetry() {
        let mut t = PointTensor::zeros(2, vec![Variance::Down, Variance::Down]).unwrap();
        t.set(&[0, 1], 1.0);
        t.set(&[1, 0], 1.0);
        assert_relative_eq!(t.symmetry_defect(0, 1).unwrap(), 0.0, epsilon = 1e-15);
        t.set(&[1, 0], 0.5);
        assert_relative_eq!(t.symmetry_defect(0, 1).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(t.antisymmetry_defect(0, 1).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn outer_product_strides_are_consistent() {
        let a = PointTensor::from_fn(2, vec![Variance::Up], |i| i[0] as f64 + 1.0).unwrap();
        let b = PointTensor::from_fn(2, vec![Variance::Down], |i| 3.0 * i[0] as f64 - 1.0).unwrap();
        let o = a.outer(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(o.get(&[i, j]), a.get(&[i]) * b.get(&[j]), epsilon = 1e-15);
            }
        }
    }
}
