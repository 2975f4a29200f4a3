//! Pairwise relational head and the relation losses.
//!
//! For `N` contexts every ordered pair `(i, j)` with `i ≠ j` is scored by
//! `h([ẑ^i, ẑ^j])`. The plain loss is binary cross-entropy against
//! same-source labels `y`; the intervention-weighted loss turns a negative
//! pair into a soft positive with weight `w`:
//!
//! ```text
//! c⁺ = y + (1 − y)·w        c⁻ = (1 − y)·(1 − w)
//! L  = −1/(N(N−1)) · Σ_{i≠j} [ c⁺·ln ŷ + c⁻·ln(1 − ŷ) ]
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{abs, ln};
use crate::nn::{Activation, Matrix, Mlp, OutputActivation, Tensor};
use crate::{config_err, Result};

pub const LOG_FLOOR: f64 = 1e-12;

/// `h_ϕ`: concatenated pair → hidden layer → sigmoid score.
#[derive(Debug, Clone)]
pub struct RelationalHead {
    pub net: Mlp,
    context_dim: usize,
}

impl RelationalHead {
    pub fn new<R: Rng + ?Sized>(context_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let net = Mlp::new(
            &[2 * context_dim, hidden, 1],
            Activation::Relu,
            OutputActivation::Sigmoid,
            rng,
        )?;
        Ok(Self { net, context_dim })
    }

    pub fn zeros(context_dim: usize, hidden: usize) -> Result<Self> {
        let net = Mlp::zeros(
            &[2 * context_dim, hidden, 1],
            Activation::Relu,
            OutputActivation::Sigmoid,
        )?;
        Ok(Self { net, context_dim })
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Scores every ordered off-diagonal pair; the diagonal is left at zero.
    pub fn score_pairs(&self, contexts: &Matrix) -> Result<Matrix> {
        let out = self.net.infer(&pair_inputs(contexts)?)?;
        Ok(scores_from_pairs(&out, contexts.rows()))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.net.tensors("relation")
    }
}

/// Row index of ordered pair `(i, j)`, `i ≠ j`, in [`pair_inputs`].
#[inline]
pub fn pair_row(i: usize, j: usize, n: usize) -> usize {
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// `[ẑ^i, ẑ^j]` for all ordered pairs `i ≠ j`, in row-major `(i, j)` order.
pub fn pair_inputs(contexts: &Matrix) -> Result<Matrix> {
    let n = contexts.rows();
    if n < 2 {
        return Err(config_err(format!("need at least two contexts, got {n}")));
    }
    let d = contexts.cols();
    let mut m = Matrix::zeros(n * (n - 1), 2 * d);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let row = m.row_mut(pair_row(i, j, n));
            row[..d].copy_from_slice(contexts.row(i));
            row[d..].copy_from_slice(contexts.row(j));
        }
    }
    Ok(m)
}

/// `N×N` score matrix from per-pair outputs laid out as in [`pair_inputs`].
pub fn scores_from_pairs(pair_scores: &Matrix, n: usize) -> Matrix {
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s.set(i, j, pair_scores.get(pair_row(i, j, n), 0));
            }
        }
    }
    s
}

/// Contexts of one minibatch with their pair labels, weights and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    n: usize,
    /// `y^{i,j}`, row-major `N×N`; the diagonal is never read.
    same: Vec<bool>,
    /// Similarity weights `w^{i,j}` (treated as constants).
    pub weights: Option<Matrix>,
    pub scores: Matrix,
}

impl PairBatch {
    /// Labels pairs as positive when their group ids match.
    pub fn from_groups<T: PartialEq>(groups: &[T], scores: Matrix) -> Result<Self> {
        let n = groups.len();
        if n < 2 || scores.rows() != n || scores.cols() != n {
            return Err(config_err("pair batch needs N ≥ 2 and an N×N score matrix"));
        }
        let mut same = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                same[i * n + j] = i != j && groups[i] == groups[j];
            }
        }
        Ok(Self {
            n,
            same,
            weights: None,
            scores,
        })
    }

    pub fn with_weights(mut self, w: Matrix) -> Result<Self> {
        if w.rows() != self.n || w.cols() != self.n {
            return Err(config_err("weight matrix must be N×N"));
        }
        self.weights = Some(w);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.same[i * self.n + j]
    }

    /// Number of ordered positive pairs.
    pub fn positives(&self) -> usize {
        self.same.iter().filter(|&&s| s).count()
    }
}

/// Per-pair cross-entropy coefficients `(c⁺, c⁻)`.
#[inline]
pub fn pair_coefficients(y: f64, w: f64) -> (f64, f64) {
    (y + (1.0 - y) * w, (1.0 - y) * (1.0 - w))
}

/// Loss and `∂L/∂scores` (diagonal zero), with or without similarity weights.
pub fn relation_loss_and_grad(batch: &PairBatch, use_weights: bool) -> Result<(f64, Matrix)> {
    let n = batch.n;
    let weights = if use_weights {
        Some(
            batch
                .weights
                .as_ref()
                .ok_or_else(|| config_err("intervention relation loss needs similarity weights"))?,
        )
    } else {
        None
    };
    let norm = 1.0 / (n * (n - 1)) as f64;
    let mut grad = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let y = if batch.is_positive(i, j) { 1.0 } else { 0.0 };
            let w = weights.map_or(0.0, |w| w.get(i, j));
            let (c_pos, c_neg) = pair_coefficients(y, w);
            let s = batch.scores.get(i, j);
            let p = s.max(LOG_FLOOR);
            let q = (1.0 - s).max(LOG_FLOOR);
            total += c_pos * ln(p) + c_neg * ln(q);
            let mut g = 0.0;
            if s > LOG_FLOOR {
                g -= c_pos / s;
            }
            if 1.0 - s > LOG_FLOOR {
                g += c_neg / (1.0 - s);
            }
            grad.set(i, j, g * norm);
        }
    }
    Ok((-total * norm, grad))
}

/// Plain relation loss over same-source labels.
pub fn relation_loss(batch: &PairBatch) -> f64 {
    relation_loss_and_grad(batch, false)
        .expect("plain relation loss cannot fail")
        .0
}

/// Relation loss with negatives softened by the similarity weights.
pub fn intervention_relation_loss(batch: &PairBatch) -> Result<f64> {
    Ok(relation_loss_and_grad(batch, true)?.0)
}

/// Mean `|ŷ_ij − ŷ_ji|` over unordered pairs; the head is not symmetrized.
pub fn score_asymmetry(scores: &Matrix) -> f64 {
    let n = scores.rows();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += abs(scores.get(i, j) - scores.get(j, i));
        }
    }
    acc / (n * (n - 1) / 2) as f64
}
