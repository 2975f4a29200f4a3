//! Transition segments and the context encoder `g_φ`.
//!
//! A segment holds `k` consecutive `(state, action)` pairs flattened in time
//! order, state before action: `[s_{t-k}, a_{t-k}, …, s_{t-1}, a_{t-1}]`.
//! The encoder sees the same layout after per-dimension normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dynamics::Normalizer;
use crate::env::{HiddenLabel, Trajectory};
use crate::nn::{Activation, Matrix, Mlp, OutputActivation, Tensor};
use crate::{config_err, Result, CONTEXT_DIM};

pub const DEFAULT_SEGMENT_LEN: usize = 10;

#[derive(Debug, Clone)]
pub struct TransitionSegment {
    pub trajectory_id: u64,
    /// Time index of the step right after the segment.
    pub anchor_t: usize,
    label: Option<HiddenLabel>,
    state_dim: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl TransitionSegment {
    pub fn len(&self) -> usize {
        self.data.len() / (self.state_dim + self.action_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flattened `[s, a]` pairs in time order.
    pub fn features(&self) -> &[f64] {
        &self.data
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        let w = self.state_dim + self.action_dim;
        let p = &self.data[i * w..(i + 1) * w];
        p.split_at(self.state_dim)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Evaluation-only; counted against the source trajectory.
    pub fn env_label(&self) -> Option<usize> {
        self.label.as_ref().map(HiddenLabel::reveal)
    }
}

/// The segment ending right before `anchor`, if it fits inside the trajectory.
pub fn segment_at(traj: &Trajectory, anchor: usize, k: usize) -> Option<TransitionSegment> {
    if k == 0 || anchor < k || anchor > traj.len() {
        return None;
    }
    let state_dim = traj.states[0].len();
    let action_dim = traj.actions[0].len();
    let mut data = Vec::with_capacity(k * (state_dim + action_dim));
    for t in anchor - k..anchor {
        data.extend_from_slice(&traj.states[t]);
        data.extend_from_slice(&traj.actions[t]);
    }
    Some(TransitionSegment {
        trajectory_id: traj.id,
        anchor_t: anchor,
        label: Some(traj.hidden_label().clone()),
        state_dim,
        action_dim,
        data,
    })
}

/// Samples `count` segments at uniformly random anchors in `[k, len]`.
///
/// Returns an empty list (and logs a warning) when the trajectory has fewer
/// than `k` actions.
pub fn build_segments<R: Rng + ?Sized>(
    traj: &Trajectory,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Vec<TransitionSegment> {
    if k == 0 || traj.len() < k {
        log::warn!(
            "trajectory {} has {} actions, fewer than segment length {k}",
            traj.id,
            traj.len()
        );
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let anchor = rng.random_range(k..=traj.len());
            segment_at(traj, anchor, k).expect("anchor within range")
        })
        .collect()
}

/// Left-pads fewer than `k` pairs with all-zero pairs.
pub fn pad_segment(
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    k: usize,
    state_dim: usize,
    action_dim: usize,
) -> Result<TransitionSegment> {
    if states.len() != actions.len() || states.len() > k {
        return Err(config_err(format!(
            "cannot pad {} states / {} actions into a segment of {k}",
            states.len(),
            actions.len()
        )));
    }
    let w = state_dim + action_dim;
    let mut data = vec![0.0; (k - states.len()) * w];
    for (s, a) in states.iter().zip(actions) {
        if s.len() != state_dim || a.len() != action_dim {
            return Err(config_err("pair has the wrong shape"));
        }
        data.extend_from_slice(s);
        data.extend_from_slice(a);
    }
    Ok(TransitionSegment {
        trajectory_id: u64::MAX,
        anchor_t: states.len(),
        label: None,
        state_dim,
        action_dim,
        data,
    })
}

/// The last `≤ k` pairs of a history, zero-padded on the left when short.
///
/// `states` may be one longer than `actions` (current state included); only
/// states that have an action are used.
pub fn recent_segment(
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    k: usize,
    state_dim: usize,
    action_dim: usize,
) -> Result<TransitionSegment> {
    let n = actions.len();
    let start = n.saturating_sub(k);
    pad_segment(&states[start..n], &actions[start..n], k, state_dim, action_dim)
}

/// A context vector `ẑ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn zeros() -> Self {
        Self(vec![0.0; CONTEXT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Segment encoder `g_φ`: an MLP over the flattened, normalized segment.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub net: Mlp,
    k: usize,
    state_dim: usize,
    action_dim: usize,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let dims = Self::dims(k, state_dim, action_dim, hidden);
        let net = Mlp::new(&dims, Activation::Relu, OutputActivation::Identity, rng)?;
        Self::from_net(net, k, state_dim, action_dim)
    }

    pub fn zeros(k: usize, state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        let dims = Self::dims(k, state_dim, action_dim, hidden);
        let net = Mlp::zeros(&dims, Activation::Relu, OutputActivation::Identity)?;
        Self::from_net(net, k, state_dim, action_dim)
    }

    fn dims(k: usize, state_dim: usize, action_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![k * (state_dim + action_dim)];
        dims.extend_from_slice(hidden);
        dims.push(CONTEXT_DIM);
        dims
    }

    pub fn from_net(net: Mlp, k: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if net.input_dim() != k * (state_dim + action_dim) || net.output_dim() != CONTEXT_DIM {
            return Err(config_err(format!(
                "encoder dims {:?} do not fit k={k}, state {state_dim}, action {action_dim}",
                net.dims()
            )));
        }
        Ok(Self {
            net,
            k,
            state_dim,
            action_dim,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn write_input(&self, norm: &Normalizer, seg: &TransitionSegment, out: &mut [f64]) -> Result<()> {
        if seg.len() != self.k || seg.state_dim != self.state_dim || seg.action_dim != self.action_dim {
            return Err(config_err(format!(
                "segment of {} pairs does not fit encoder with k={}",
                seg.len(),
                self.k
            )));
        }
        let (sd, ad) = (self.state_dim, self.action_dim);
        for i in 0..self.k {
            let (s, a) = seg.pair(i);
            let o = &mut out[i * (sd + ad)..(i + 1) * (sd + ad)];
            norm.normalize_state_into(s, &mut o[..sd]);
            norm.normalize_action_into(a, &mut o[sd..]);
        }
        Ok(())
    }

    /// Encoder input matrix, one row per segment.
    pub fn inputs(&self, norm: &Normalizer, segs: &[&TransitionSegment]) -> Result<Matrix> {
        let mut m = Matrix::zeros(segs.len(), self.input_dim());
        for (i, seg) in segs.iter().enumerate() {
            self.write_input(norm, seg, m.row_mut(i))?;
        }
        Ok(m)
    }

    pub fn encode(&self, norm: &Normalizer, seg: &TransitionSegment) -> Result<ContextVector> {
        let z = self.net.infer(&self.inputs(norm, &[seg])?)?;
        Ok(ContextVector(z.into_vec()))
    }

    /// Contexts for many segments, one row each.
    pub fn encode_batch(&self, norm: &Normalizer, segs: &[&TransitionSegment]) -> Result<Matrix> {
        self.net.infer(&self.inputs(norm, segs)?)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.net.tensors("encoder")
    }
}
