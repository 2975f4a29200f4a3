//! Controlled direct effects of the context on the predicted next state.
//!
//! With the mediators `(s, a)` held fixed, the direct effect of switching
//! the context from `ẑ^j` to `ẑ^k` is the difference of the predicted means.
//! Averaging its absolute value (mean over state dimensions) over a batch of
//! observed `(s, a)` pairs gives a distance `d^{j,k}`. Distances are divided
//! by their off-diagonal batch standard deviation and mapped to similarity
//! weights `w = exp(−d/β)`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Normalizer, PredictionHead};
use crate::math::{abs, exp, sqrt};
use crate::nn::Matrix;
use crate::{config_err, Result};

pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdeConfig {
    /// Distance sensitivity β.
    pub beta: f64,
    /// Number of observed `(s, a)` pairs averaged over per distance.
    pub mediator_batch: usize,
    pub normalize_by_batch_variance: bool,
}

impl CdeConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta,
            mediator_batch: 64,
            normalize_by_batch_variance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.mediator_batch == 0 {
            return Err(config_err("cde config needs beta > 0 and mediator_batch ≥ 1"));
        }
        Ok(())
    }
}

/// One observed `(s_t, a_t)` pair used as an intervened mediator.
#[derive(Debug, Clone, PartialEq)]
pub struct Mediator {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// Raw average direct effects, symmetric with zero diagonal.
    pub d: Matrix,
    pub w: Matrix,
}

/// `E[S'|s, a, z_j] − E[S'|s, a, z_k]` under the prediction head.
pub fn controlled_direct_effect(
    head: &PredictionHead,
    norm: &Normalizer,
    s: &[f64],
    a: &[f64],
    z_j: &[f64],
    z_k: &[f64],
) -> Result<Vec<f64>> {
    let pj = head.predict_next(norm, s, a, z_j)?;
    let pk = head.predict_next(norm, s, a, z_k)?;
    Ok(pj.iter().zip(&pk).map(|(x, y)| x - y).collect())
}

/// Mean over mediators of the mean absolute direct effect.
pub fn average_cde(
    head: &PredictionHead,
    norm: &Normalizer,
    mediators: &[Mediator],
    z_j: &[f64],
    z_k: &[f64],
) -> Result<f64> {
    if mediators.is_empty() {
        return Err(config_err("average direct effect needs at least one mediator"));
    }
    let contexts = Matrix::from_rows(&[z_j, z_k])?;
    let table = effect_table(head, norm, &contexts, mediators)?;
    Ok(distances_from_table(&table, 2, mediators.len()).get(0, 1))
}

/// Network inputs for every (context, mediator) combination; row `j·M + m`.
pub fn mediator_inputs(
    head: &PredictionHead,
    norm: &Normalizer,
    contexts: &Matrix,
    mediators: &[Mediator],
) -> Result<Matrix> {
    let m = mediators.len();
    let mut x = Matrix::zeros(contexts.rows() * m, head.input_dim());
    for j in 0..contexts.rows() {
        for (mi, med) in mediators.iter().enumerate() {
            head.write_input(norm, &med.state, &med.action, contexts.row(j), x.row_mut(j * m + mi));
        }
    }
    Ok(x)
}

/// Scales raw network outputs to next-state units. The `s` term of the
/// prediction cancels in every difference, so it is left out.
pub fn scale_outputs(norm: &Normalizer, outputs: &Matrix) -> Matrix {
    let mut t = outputs.clone();
    for i in 0..t.rows() {
        for (v, sd) in t.row_mut(i).iter_mut().zip(&norm.delta_std) {
            *v *= sd;
        }
    }
    t
}

/// Predicted next-state offsets for each (context, mediator), row `j·M + m`.
pub fn effect_table(
    head: &PredictionHead,
    norm: &Normalizer,
    contexts: &Matrix,
    mediators: &[Mediator],
) -> Result<Matrix> {
    if contexts.cols() != head.context_dim() {
        return Err(config_err(format!(
            "contexts have {} columns, head expects {}",
            contexts.cols(),
            head.context_dim()
        )));
    }
    let x = mediator_inputs(head, norm, contexts, mediators)?;
    Ok(scale_outputs(norm, &head.net.infer(&x)?))
}

/// ACDE for all pairs from an effect table of `n` contexts × `m` mediators.
pub fn distances_from_table(table: &Matrix, n: usize, m: usize) -> Matrix {
    let dim = table.cols();
    let scale = 1.0 / (m * dim) as f64;
    let mut d = Matrix::zeros(n, n);
    for j in 0..n {
        for k in j + 1..n {
            let mut acc = 0.0;
            for mi in 0..m {
                let a = table.row(j * m + mi);
                let b = table.row(k * m + mi);
                for (x, y) in a.iter().zip(b) {
                    acc += abs(x - y);
                }
            }
            let v = acc * scale;
            d.set(j, k, v);
            d.set(k, j, v);
        }
    }
    d
}

/// Standard deviation of the off-diagonal entries, with a variance floor.
pub fn off_diagonal_std(d: &Matrix) -> f64 {
    let n = d.rows();
    let count = (n * n.saturating_sub(1)) as f64;
    if count == 0.0 {
        return sqrt(VARIANCE_FLOOR);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += d.get(i, j);
            }
        }
    }
    let mean = sum / count;
    let mut var = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                var += (d.get(i, j) - mean) * (d.get(i, j) - mean);
            }
        }
    }
    sqrt((var / count).max(VARIANCE_FLOOR))
}

/// `w = exp(−d_norm / β)`, with the diagonal fixed at 1.
pub fn similarity_from_distances(d: &Matrix, cfg: &CdeConfig) -> Matrix {
    let n = d.rows();
    let scale = if cfg.normalize_by_batch_variance {
        off_diagonal_std(d)
    } else {
        1.0
    };
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                1.0
            } else {
                exp(-(d.get(i, j) / scale) / cfg.beta)
            };
            w.set(i, j, v);
        }
    }
    w
}

pub fn similarity_matrix(
    head: &PredictionHead,
    norm: &Normalizer,
    contexts: &Matrix,
    mediators: &[Mediator],
    cfg: &CdeConfig,
) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    if contexts.rows() < 2 {
        return Err(config_err("similarity needs at least two contexts"));
    }
    if mediators.is_empty() {
        return Err(config_err("similarity needs at least one mediator"));
    }
    let table = effect_table(head, norm, contexts, mediators)?;
    let d = distances_from_table(&table, contexts.rows(), mediators.len());
    let w = similarity_from_distances(&d, cfg);
    Ok(SimilarityMatrix { d, w })
}

/// Unordered pairs `(i, j)`, `i < j`, sharing a group.
pub fn same_group_pairs<T: PartialEq>(groups: &[T]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            if groups[i] == groups[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// `L^dist` and its gradient w.r.t. the effect table.
///
/// Returns `(0, zeros)` when no pair shares a trajectory.
pub fn dist_loss_and_grad<T: PartialEq>(
    table: &Matrix,
    groups: &[T],
    m: usize,
) -> (f64, Matrix) {
    let n = groups.len();
    let pairs = same_group_pairs(groups);
    let mut grad = Matrix::zeros(table.rows(), table.cols());
    if pairs.is_empty() {
        log::warn!("no same-trajectory pair in batch; L^dist is zero");
        return (0.0, grad);
    }
    debug_assert_eq!(table.rows(), n * m);
    let dim = table.cols();
    let scale = 1.0 / (m * dim * pairs.len()) as f64;
    let mut loss = 0.0;
    for &(i, j) in &pairs {
        for mi in 0..m {
            let ri = i * m + mi;
            let rj = j * m + mi;
            for c in 0..dim {
                let diff = table.get(ri, c) - table.get(rj, c);
                loss += abs(diff);
                let s = if diff > 0.0 {
                    scale
                } else if diff < 0.0 {
                    -scale
                } else {
                    0.0
                };
                grad.set(ri, c, grad.get(ri, c) + s);
                grad.set(rj, c, grad.get(rj, c) - s);
            }
        }
    }
    (loss * scale, grad)
}

/// Mean ACDE over same-trajectory pairs.
pub fn same_trajectory_cde_loss(
    head: &PredictionHead,
    norm: &Normalizer,
    contexts: &Matrix,
    trajectory_ids: &[u64],
    mediators: &[Mediator],
) -> Result<f64> {
    if trajectory_ids.len() != contexts.rows() {
        return Err(config_err("one trajectory id per context is required"));
    }
    if mediators.is_empty() {
        return Err(config_err("L^dist needs at least one mediator"));
    }
    let table = effect_table(head, norm, contexts, mediators)?;
    Ok(dist_loss_and_grad(&table, trajectory_ids, mediators.len()).0)
}
