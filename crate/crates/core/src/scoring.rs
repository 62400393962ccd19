//! MSAC scoring of hypothesis batches and the consensus attention matrix.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::geometry::{sampson_sq, Correspondence, ModelHypothesis};

/// Truncated-linear MSAC score `1 - min(r, t) / t`.
#[inline]
pub fn msac_score(r_sq: f64, t: f64) -> f64 {
    debug_assert!(t > 0.0);
    if !(r_sq < t) {
        return 0.0;
    }
    1.0 - r_sq / t
}

/// Scores of `n` points against `m` hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub s: DMatrix<f64>,
    pub threshold: f64,
}

impl ScoreMatrix {
    pub fn n_points(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_models(&self) -> usize {
        self.s.ncols()
    }

    /// Total consensus `C_j` of every column.
    pub fn column_totals(&self) -> Vec<f64> {
        self.s.column_iter().map(|c| c.sum()).collect()
    }

    /// Column with the largest total consensus; ties go to the lowest index.
    pub fn best_column(&self) -> Option<usize> {
        let totals = self.column_totals();
        let mut best: Option<(usize, f64)> = None;
        for (j, &c) in totals.iter().enumerate() {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        best.map(|(j, _)| j)
    }

    /// Recomputes column `j` against `model`.
    pub fn rescore_column(&mut self, j: usize, model: &ModelHypothesis, data: &[Correspondence]) {
        for (i, c) in data.iter().enumerate() {
            self.s[(i, j)] = msac_score(sampson_sq(model, c), self.threshold);
        }
    }
}

/// `s_ij = msac_score(sampson_sq(M_j, x_i), t)`. Zero models produce all-zero columns.
pub fn score_models(models: &[ModelHypothesis], data: &[Correspondence], t: f64) -> ScoreMatrix {
    let mut s = DMatrix::zeros(data.len(), models.len());
    for (j, model) in models.iter().enumerate() {
        if model.is_zero() {
            continue;
        }
        for (i, c) in data.iter().enumerate() {
            s[(i, j)] = msac_score(sampson_sq(model, c), t);
        }
    }
    ScoreMatrix { s, threshold: t }
}

/// Dense `A = S Sᵀ / Σ_j C_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub a: DMatrix<f64>,
}

impl AttentionMatrix {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.a.row_iter().map(|r| r.sum()).collect()
    }
}

/// Consensus attention. All-zero consensus yields the zero matrix.
pub fn consensus_attention(s: &ScoreMatrix) -> AttentionMatrix {
    let total: f64 = s.s.sum();
    let n = s.n_points();
    if !(total > 0.0) {
        return AttentionMatrix {
            a: DMatrix::zeros(n, n),
        };
    }
    let mut a = &s.s * s.s.transpose();
    a /= total;
    AttentionMatrix { a }
}

/// Attention operand consumed by the state transformer: either the dense
/// matrix or the factorization `S (Sᵀ X) / Σ C`, which never forms the
/// `n × n` product.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionOperand {
    Dense(AttentionMatrix),
    Factored {
        scores: DMatrix<f64>,
        /// `Sᵀ`, kept so both products run through the blocked kernel.
        scores_t: DMatrix<f64>,
        inv_total: f64,
    },
}

impl AttentionOperand {
    pub fn factored(s: &ScoreMatrix) -> Self {
        let total: f64 = s.s.sum();
        let inv_total = if total > 0.0 { 1.0 / total } else { 0.0 };
        AttentionOperand::Factored {
            scores: s.s.clone(),
            scores_t: s.s.transpose(),
            inv_total,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            AttentionOperand::Dense(a) => a.n(),
            AttentionOperand::Factored { scores, .. } => scores.nrows(),
        }
    }

    /// `A · x`. `A` is symmetric, so this also serves the backward pass.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            AttentionOperand::Dense(a) => &a.a * x,
            AttentionOperand::Factored {
                scores,
                scores_t,
                inv_total,
            } => {
                if *inv_total == 0.0 {
                    return DMatrix::zeros(scores.nrows(), x.ncols());
                }
                let mut proj = scores_t * x;
                proj *= *inv_total;
                scores * proj
            }
        }
    }
}
