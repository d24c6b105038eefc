//! LoRA adapter: the trainable pair `(B, A)` whose scaled product is added
//! to a frozen weight matrix, and its decomposition into rank-1 terms
//! `b_i a_i` (column `i` of `B` times row `i` of `A`).

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HaflError, Result};
use crate::matrix::Matrix;
use crate::seed;

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix, scale: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(HaflError::shape(
                "LoraAdapter::new",
                format!("B cols = A rows ({})", b.cols()),
                format!("A rows {}", a.rows()),
            ));
        }
        if b.cols() == 0 {
            return Err(HaflError::ZeroDimension { name: "rank" });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(HaflError::InvalidArgument(format!(
                "LoRA scale must be positive, got {scale}"
            )));
        }
        if !b.is_finite() || !a.is_finite() {
            return Err(HaflError::InvalidArgument(
                "adapter contains non-finite values".into(),
            ));
        }
        Ok(LoraAdapter { b, a, scale })
    }

    /// `A` drawn from `N(0, 0.02²)`, `B` zero, so the initial delta is exactly zero.
    pub fn init(d: usize, l: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::init_with_std(d, l, rank, scale, DEFAULT_INIT_STD, seed)
    }

    pub fn init_with_std(
        d: usize,
        l: usize,
        rank: usize,
        scale: f64,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        for (name, v) in [("d", d), ("l", l), ("rank", rank)] {
            if v == 0 {
                return Err(HaflError::ZeroDimension { name });
            }
        }
        let normal = Normal::new(0.0, std)
            .map_err(|e| HaflError::InvalidArgument(format!("init std {std}: {e}")))?;
        let mut rng = seed::rng_for(seed, &[seed::TAG_INIT]);
        let a = Matrix::from_fn(rank, l, |_, _| normal.sample(&mut rng));
        Self::new(Matrix::zeros(d, rank), a, scale)
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Output dimension `d` (rows of `B`).
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `l` (columns of `A`).
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn into_parts(self) -> (Matrix, Matrix, f64) {
        (self.b, self.a, self.scale)
    }

    /// Column `i` of `B` and row `i` of `A`.
    pub fn rank1_component(&self, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if i >= self.rank() {
            return Err(HaflError::IndexOutOfRange {
                what: "rank-1",
                index: i,
                limit: self.rank(),
            });
        }
        Ok((self.b.column(i), self.a.row(i).to_vec()))
    }

    /// `scale · B · A`, the `d × l` weight delta.
    pub fn effective_delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter invariant: B cols = A rows")
            .scaled(self.scale)
    }

    /// Frobenius norm of the scaled product restricted to `indices`.
    pub(crate) fn partial_product_norm(&self, indices: &[usize]) -> f64 {
        let b = self.b.select_columns(indices);
        let a = self.a.select_rows(indices);
        b.matmul(&a)
            .expect("selected slices agree")
            .frobenius_norm()
            * self.scale
    }

    /// Number of trainable scalars, `rank · (d + l)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.out_dim() + self.in_dim())
    }
}

/// Bytes uploaded for `selected_count` rank-1 pairs: one column of `B` and
/// one row of `A` each.
pub fn upload_size(selected_count: usize, d: usize, l: usize, bytes_per_param: usize) -> u64 {
    (selected_count as u64) * ((d + l) as u64) * (bytes_per_param as u64)
}

/// Server-side global adapter plus the number of completed aggregations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalLora {
    pub adapter: LoraAdapter,
    pub round: u64,
}

impl GlobalLora {
    pub fn new(adapter: LoraAdapter) -> Self {
        GlobalLora { adapter, round: 0 }
    }

    pub fn rank(&self) -> usize {
        self.adapter.rank()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outer_sum(adapter: &LoraAdapter) -> Matrix {
        let (d, l) = (adapter.out_dim(), adapter.in_dim());
        let mut acc = Matrix::zeros(d, l);
        for i in 0..adapter.rank() {
            let (b, a) = adapter.rank1_component(i).unwrap();
            for (r, br) in b.iter().enumerate() {
                for (c, ac) in a.iter().enumerate() {
                    acc.set(r, c, acc.get(r, c) + br * ac);
                }
            }
        }
        acc
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let ad = LoraAdapter::init(4, 3, 2, 1.0, 11).unwrap();
        assert_eq!(ad.effective_delta(), Matrix::zeros(4, 3));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a1 = LoraAdapter::init(6, 5, 3, 1.0, 7).unwrap();
        let a2 = LoraAdapter::init(6, 5, 3, 1.0, 7).unwrap();
        assert_eq!(a1, a2);
        let b = LoraAdapter::init(4, 3, 2, 1.0, 8).unwrap();
        let a = LoraAdapter::init(4, 3, 2, 1.0, 7).unwrap();
        assert_ne!(a.a(), b.a());
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(matches!(
            LoraAdapter::init(0, 3, 2, 1.0, 0),
            Err(HaflError::ZeroDimension { name: "d" })
        ));
        assert!(LoraAdapter::init(3, 0, 2, 1.0, 0).is_err());
        assert!(LoraAdapter::init(3, 3, 0, 1.0, 0).is_err());
    }

    #[test]
    fn rank1_component_rank_one() {
        let ad = LoraAdapter::new(
            Matrix::from_rows(&[&[1.0], &[2.0]]),
            Matrix::from_rows(&[&[3.0, 4.0]]),
            1.0,
        )
        .unwrap();
        let (b, a) = ad.rank1_component(0).unwrap();
        assert_eq!(b, vec![1.0, 2.0]);
        assert_eq!(a, vec![3.0, 4.0]);
        assert!(matches!(
            ad.rank1_component(1),
            Err(HaflError::IndexOutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn effective_delta_identity_b_and_scaling() {
        let b = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let one = LoraAdapter::new(b.clone(), a.clone(), 1.0).unwrap();
        assert_eq!(
            one.effective_delta(),
            Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])
        );
        let two = LoraAdapter::new(b, a, 2.0).unwrap();
        assert_eq!(two.effective_delta(), one.effective_delta().scaled(2.0));
    }

    #[test]
    fn delta_equals_rank1_sum() {
        let mut ad = LoraAdapter::init(5, 3, 2, 1.0, 3).unwrap();
        *ad.b_mut() = Matrix::from_fn(5, 2, |r, c| (r as f64 - 2.0) * 0.3 + c as f64);
        let diff = ad.effective_delta().max_abs_diff(&outer_sum(&ad));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn rejects_bad_scale_and_shapes() {
        assert!(LoraAdapter::new(Matrix::zeros(2, 1), Matrix::zeros(1, 2), 0.0).is_err());
        assert!(LoraAdapter::new(Matrix::zeros(2, 2), Matrix::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn upload_size_values() {
        assert_eq!(upload_size(16, 1280, 3840, 4), 327_680);
        assert_eq!(upload_size(0, 1280, 3840, 4), 0);
        assert_eq!(upload_size(2, 10, 5, 8), 240);
    }
}
