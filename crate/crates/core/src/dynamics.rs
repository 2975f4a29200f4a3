//! Context-conditioned next-state predictor.
//!
//! The head maps `[norm(s), norm(a), ẑ]` to a normalized state delta; the
//! prediction is `s + delta_std ⊙ net(…)`, so an all-zero network is the
//! identity model. The prediction loss is the negative log-likelihood of a
//! unit-variance Gaussian over normalized deltas, i.e. `½·MSE`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::math::sqrt;
use crate::nn::{Activation, Matrix, Mlp, OutputActivation, Tensor};
use crate::{config_err, Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension scaling statistics, fitted on training-environment data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    /// Deltas are only scaled, never shifted, so zero output means "no change".
    pub delta_std: Vec<f64>,
    pub count: usize,
}

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| sqrt(s / n).max(STD_FLOOR)).collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            delta_std: vec![1.0; state_dim],
            count: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    /// Fits statistics over every transition of the given trajectories.
    pub fn fit<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Result<Self> {
        let mut states: Vec<&[f64]> = Vec::new();
        let mut actions: Vec<&[f64]> = Vec::new();
        let mut deltas: Vec<Vec<f64>> = Vec::new();
        for t in trajectories {
            for i in 0..t.len() {
                states.push(&t.states[i]);
                actions.push(&t.actions[i]);
                deltas.push(
                    t.states[i + 1]
                        .iter()
                        .zip(&t.states[i])
                        .map(|(b, a)| b - a)
                        .collect(),
                );
            }
        }
        if states.is_empty() {
            return Err(config_err("cannot fit a normalizer without transitions"));
        }
        let sd = states[0].len();
        let ad = actions[0].len();
        let (state_mean, state_std) = mean_std(&states, sd);
        let (action_mean, action_std) = mean_std(&actions, ad);
        // Root-mean-square keeps deltas unshifted.
        let mut delta_std = vec![0.0; sd];
        for d in &deltas {
            for (s, v) in delta_std.iter_mut().zip(d) {
                *s += v * v;
            }
        }
        let n = deltas.len() as f64;
        delta_std
            .iter_mut()
            .for_each(|s| *s = sqrt(*s / n).max(STD_FLOOR));
        Ok(Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
            delta_std,
            count: states.len(),
        })
    }

    pub fn normalize_state_into(&self, s: &[f64], out: &mut [f64]) {
        for (((o, v), m), sd) in out.iter_mut().zip(s).zip(&self.state_mean).zip(&self.state_std) {
            *o = (v - m) / sd;
        }
    }

    pub fn normalize_action_into(&self, a: &[f64], out: &mut [f64]) {
        for (((o, v), m), sd) in out
            .iter_mut()
            .zip(a)
            .zip(&self.action_mean)
            .zip(&self.action_std)
        {
            *o = (v - m) / sd;
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let t = |name: &str, v: &Vec<f64>| Tensor {
            name: format!("normalizer.{name}"),
            shape: vec![v.len()],
            values: v.clone(),
        };
        vec![
            t("state_mean", &self.state_mean),
            t("state_std", &self.state_std),
            t("action_mean", &self.action_mean),
            t("action_std", &self.action_std),
            t("delta_std", &self.delta_std),
            Tensor {
                name: "normalizer.count".into(),
                shape: vec![1],
                values: vec![self.count as f64],
            },
        ]
    }

    pub fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let full = format!("normalizer.{name}");
            let t = tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Load(format!("missing tensor {full}")))?;
            if t.values.len() != len {
                return Err(Error::Load(format!("shape mismatch for {full}")));
            }
            Ok(t.values.clone())
        };
        let sd = self.state_dim();
        let ad = self.action_dim();
        self.state_mean = get("state_mean", sd)?;
        self.state_std = get("state_std", sd)?;
        self.action_mean = get("action_mean", ad)?;
        self.action_std = get("action_std", ad)?;
        self.delta_std = get("delta_std", sd)?;
        self.count = get("count", 1)?[0] as usize;
        Ok(())
    }
}

/// Next-state predictor `f̂(s' | s, a, ẑ)`.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub net: Mlp,
    state_dim: usize,
    action_dim: usize,
    context_dim: usize,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        context_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let dims = Self::dims(state_dim, action_dim, context_dim, hidden);
        let net = Mlp::new(&dims, Activation::Relu, OutputActivation::Identity, rng)?;
        Self::from_net(net, state_dim, action_dim, context_dim)
    }

    pub fn zeros(
        state_dim: usize,
        action_dim: usize,
        context_dim: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let dims = Self::dims(state_dim, action_dim, context_dim, hidden);
        let net = Mlp::zeros(&dims, Activation::Relu, OutputActivation::Identity)?;
        Self::from_net(net, state_dim, action_dim, context_dim)
    }

    fn dims(state_dim: usize, action_dim: usize, context_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![state_dim + action_dim + context_dim];
        dims.extend_from_slice(hidden);
        dims.push(state_dim);
        dims
    }

    /// Wraps an existing network, checking its input/output sizes.
    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize, context_dim: usize) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim + context_dim || net.output_dim() != state_dim {
            return Err(config_err(format!(
                "prediction head dims {:?} do not fit state {state_dim}, action {action_dim}, context {context_dim}",
                net.dims()
            )));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
            context_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim + self.context_dim
    }

    /// Writes one network input row `[norm(s), norm(a), z]`.
    pub fn write_input(&self, norm: &Normalizer, s: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
        let (sd, ad) = (self.state_dim, self.action_dim);
        norm.normalize_state_into(s, &mut out[..sd]);
        norm.normalize_action_into(a, &mut out[sd..sd + ad]);
        out[sd + ad..].copy_from_slice(z);
    }

    /// Network input matrix for parallel slices of states, actions and contexts.
    pub fn build_inputs<'a>(
        &self,
        norm: &Normalizer,
        rows: impl ExactSizeIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    ) -> Result<Matrix> {
        let mut m = Matrix::zeros(rows.len(), self.input_dim());
        for (i, (s, a, z)) in rows.enumerate() {
            if s.len() != self.state_dim || a.len() != self.action_dim || z.len() != self.context_dim {
                return Err(config_err("prediction input has inconsistent shapes"));
            }
            self.write_input(norm, s, a, z, m.row_mut(i));
        }
        Ok(m)
    }

    /// `ŝ' = s + delta_std ⊙ net([norm(s), norm(a), z])`.
    pub fn predict_next(&self, norm: &Normalizer, s: &[f64], a: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let x = self.build_inputs(norm, core::iter::once((s, a, z)))?;
        let out = self.net.infer(&x)?;
        Ok(denormalize_next(norm, s, out.row(0)))
    }

    /// Normalized training target `(s' - s) / delta_std`.
    pub fn target(norm: &Normalizer, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        s_next
            .iter()
            .zip(s)
            .zip(&norm.delta_std)
            .map(|((b, a), sd)| (b - a) / sd)
            .collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.net.tensors("head")
    }
}

pub fn denormalize_next(norm: &Normalizer, s: &[f64], out: &[f64]) -> Vec<f64> {
    s.iter()
        .zip(out)
        .zip(&norm.delta_std)
        .map(|((s, o), sd)| s + sd * o)
        .collect()
}

/// `(1/N)·Σ ½‖target − output‖²` and its gradient w.r.t. the outputs.
pub fn prediction_loss_and_grad(outputs: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if outputs.rows() != targets.rows() || outputs.cols() != targets.cols() {
        return Err(config_err("prediction outputs and targets differ in shape"));
    }
    let n = outputs.rows();
    if n == 0 {
        return Err(config_err("prediction loss needs at least one sample"));
    }
    let inv = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, outputs.cols());
    let mut loss = 0.0;
    for ((g, o), t) in grad.data_mut().iter_mut().zip(outputs.data()).zip(targets.data()) {
        let r = o - t;
        loss += 0.5 * r * r;
        *g = r * inv;
    }
    loss *= inv;
    if !loss.is_finite() {
        return Err(Error::Diverged("non-finite prediction loss".into()));
    }
    Ok((loss, grad))
}

/// One supervised transition with the context used to predict it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub context: Vec<f64>,
}

/// Prediction loss of `head` on a batch, without gradients.
pub fn prediction_loss(head: &PredictionHead, norm: &Normalizer, batch: &[PredictionSample]) -> Result<f64> {
    let x = head.build_inputs(
        norm,
        batch
            .iter()
            .map(|b| (b.state.as_slice(), b.action.as_slice(), b.context.as_slice())),
    )?;
    let targets = Matrix::from_rows(
        &batch
            .iter()
            .map(|b| PredictionHead::target(norm, &b.state, &b.next_state))
            .collect::<Vec<_>>(),
    )?;
    let out = head.net.infer(&x)?;
    Ok(prediction_loss_and_grad(&out, &targets)?.0)
}
