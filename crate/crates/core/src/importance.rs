//! Server-side importance of each rank-1 term.
//!
//! Per element `w` of the global `B` and `A`, with `Δw` the change since the
//! previous aggregation:
//!
//! ```text
//! I    = |w · Δw / η|
//! Ī   ← β₁ Ī + (1 − β₁) I
//! Ū   ← β₂ Ū + (1 − β₂) |I − Ī|      (Ī already updated)
//! s    = Ī · Ū
//! S_i  = Σ_j s(B[j,i]) + Σ_q s(A[i,q])
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{HaflError, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;

pub fn raw_sensitivity(current: f64, previous: f64, eta: f64) -> f64 {
    (current * (current - previous) / eta).abs()
}

/// One non-negative score per rank-1 index of the global adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreList(Vec<f64>);

impl ScoreList {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(HaflError::InvalidArgument(format!(
                "score {i} is {} (must be finite and >= 0)",
                scores[i]
            )));
        }
        Ok(ScoreList(scores))
    }

    pub fn zeros(len: usize) -> Self {
        ScoreList(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTracker {
    prev_b: Matrix,
    prev_a: Matrix,
    smoothed_b: Matrix,
    smoothed_a: Matrix,
    uncertainty_b: Matrix,
    uncertainty_a: Matrix,
    beta1: f64,
    beta2: f64,
    eta: f64,
    rounds_seen: u64,
}

impl ImportanceTracker {
    /// Starts with zero smoothed sensitivity and uncertainty, and the given
    /// (freshly initialised) global parameters as the previous round.
    pub fn new(initial: &LoraAdapter, beta1: f64, beta2: f64, eta: f64) -> Result<Self> {
        for (name, beta) in [("beta1", beta1), ("beta2", beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(HaflError::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {beta}"
                )));
            }
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(HaflError::InvalidArgument(format!(
                "eta must be positive, got {eta}"
            )));
        }
        let (bs, as_) = (initial.b().shape(), initial.a().shape());
        Ok(ImportanceTracker {
            prev_b: initial.b().clone(),
            prev_a: initial.a().clone(),
            smoothed_b: Matrix::zeros(bs.0, bs.1),
            smoothed_a: Matrix::zeros(as_.0, as_.1),
            uncertainty_b: Matrix::zeros(bs.0, bs.1),
            uncertainty_a: Matrix::zeros(as_.0, as_.1),
            beta1,
            beta2,
            eta,
            rounds_seen: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.prev_b.cols()
    }

    pub fn rounds_seen(&self) -> u64 {
        self.rounds_seen
    }

    pub fn smoothed(&self) -> (&Matrix, &Matrix) {
        (&self.smoothed_b, &self.smoothed_a)
    }

    pub fn uncertainty(&self) -> (&Matrix, &Matrix) {
        (&self.uncertainty_b, &self.uncertainty_a)
    }

    pub fn previous(&self) -> (&Matrix, &Matrix) {
        (&self.prev_b, &self.prev_a)
    }

    /// Folds the newly aggregated global parameters into the running state.
    pub fn update(&mut self, new_b: &Matrix, new_a: &Matrix) -> Result<()> {
        if new_b.shape() != self.prev_b.shape() {
            return Err(HaflError::shape(
                "ImportanceTracker::update (B)",
                format!("{:?}", self.prev_b.shape()),
                format!("{:?}", new_b.shape()),
            ));
        }
        if new_a.shape() != self.prev_a.shape() {
            return Err(HaflError::shape(
                "ImportanceTracker::update (A)",
                format!("{:?}", self.prev_a.shape()),
                format!("{:?}", new_a.shape()),
            ));
        }
        let (b1, b2, eta) = (self.beta1, self.beta2, self.eta);
        let step = |new: &Matrix, prev: &mut Matrix, sm: &mut Matrix, unc: &mut Matrix| {
            let it = new
                .as_slice()
                .iter()
                .zip(prev.as_mut_slice())
                .zip(sm.as_mut_slice().iter_mut().zip(unc.as_mut_slice()));
            for ((w, p), (s, u)) in it {
                let i = raw_sensitivity(*w, *p, eta);
                *s = b1 * *s + (1.0 - b1) * i;
                *u = b2 * *u + (1.0 - b2) * (i - *s).abs();
                *p = *w;
            }
        };
        step(
            new_b,
            &mut self.prev_b,
            &mut self.smoothed_b,
            &mut self.uncertainty_b,
        );
        step(
            new_a,
            &mut self.prev_a,
            &mut self.smoothed_a,
            &mut self.uncertainty_a,
        );
        self.rounds_seen += 1;
        Ok(())
    }

    /// Elementwise `Ī ⊙ Ū` for the `B` and `A` elements.
    pub fn combined_score(&self) -> (Matrix, Matrix) {
        let mul = |x: &Matrix, y: &Matrix| {
            Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * y.get(r, c))
        };
        (
            mul(&self.smoothed_b, &self.uncertainty_b),
            mul(&self.smoothed_a, &self.uncertainty_a),
        )
    }

    pub fn rank1_scores(&self) -> ScoreList {
        let (sb, sa) = self.combined_score();
        ScoreList(rank1_sums(&sb, &sa))
    }
}

/// `S_i` = column-`i` sum of `sb` plus row-`i` sum of `sa`.
pub(crate) fn rank1_sums(sb: &Matrix, sa: &Matrix) -> Vec<f64> {
    (0..sb.cols())
        .map(|i| {
            let col: f64 = (0..sb.rows()).map(|j| sb.get(j, i)).sum();
            let row: f64 = sa.row(i).iter().sum();
            col + row
        })
        .collect()
}
