//! Replay buffer, the joint objective and the collect-then-optimize loop.
//!
//! Each gradient step draws `B/2` trajectories with two random segments
//! each. The transition right after a segment is the prediction target for
//! that segment's context. The total loss is the unweighted sum
//! `L^pred + L^relation + L^dist`, where the relation term and the presence
//! of `L^dist` depend on the [`Method`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{prediction_loss_and_grad, Normalizer, PredictionHead};
use crate::env::{sample_training_env, EnvFamily, FamilyKind, Trajectory};
use crate::eval::{evaluate_prediction, PredictionReport};
use crate::intervention::{
    dist_loss_and_grad, distances_from_table, scale_outputs, similarity_from_distances, CdeConfig,
    Mediator, SimilarityMatrix,
};
use crate::math::mean;
use crate::model::{NetworkConfig, WorldModel};
use crate::nn::{clip_global_norm, AdamConfig, AdamState, Matrix};
use crate::planner::{mpc_episode, CemConfig, MpcConfig};
use crate::relation::{pair_inputs, pair_row, relation_loss_and_grad, scores_from_pairs, PairBatch};
use crate::segment::{segment_at, TransitionSegment};
use crate::{config_err, rng_from_seed, Error, Result, SimRng, CONTEXT_DIM};

/// Which context and loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No context; prediction loss only.
    ContextFree,
    /// Context trained only through the prediction loss.
    VanillaContext,
    /// Adds the trajectory-label relation loss.
    RelationOnly,
    /// Relation loss softened by direct-effect similarity, plus `L^dist`.
    RiaFull,
    /// Relation loss over ground-truth environment labels.
    TrueLabel,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ContextFree,
        Method::VanillaContext,
        Method::RelationOnly,
        Method::RiaFull,
        Method::TrueLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ContextFree => "context_free",
            Method::VanillaContext => "vanilla_context",
            Method::RelationOnly => "relation_only",
            Method::RiaFull => "ria_full",
            Method::TrueLabel => "true_label",
        }
    }

    pub fn uses_context(self) -> bool {
        self != Method::ContextFree
    }

    pub fn uses_relation(self) -> bool {
        matches!(self, Method::RelationOnly | Method::RiaFull | Method::TrueLabel)
    }

    pub fn uses_intervention(self) -> bool {
        self == Method::RiaFull
    }

    /// Only this method may read environment labels while training.
    pub fn uses_env_labels(self) -> bool {
        self == Method::TrueLabel
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: FamilyKind,
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub trajectories_per_epoch: usize,
    pub grad_steps_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub network: NetworkConfig,
    pub cem: CemConfig,
    pub cde: CdeConfig,
    /// Collection noise std as a fraction of the action range.
    pub exploration: f64,
    /// Held-out transitions per split for the per-epoch prediction error.
    pub eval_transitions: usize,
}

impl TrainConfig {
    pub fn new(family: FamilyKind, method: Method, seed: u64) -> Self {
        let beta = EnvFamily::by_kind(family).beta;
        Self {
            family,
            method,
            seed,
            epochs: 20,
            trajectories_per_epoch: 10,
            grad_steps_per_epoch: 200,
            batch_size: 256,
            adam: AdamConfig::default(),
            grad_clip: 10.0,
            network: NetworkConfig::default(),
            cem: CemConfig::default(),
            cde: CdeConfig::with_beta(beta),
            exploration: 0.1,
            eval_transitions: 2000,
        }
    }

    /// A reduced profile that trains a pendulum model in about a minute on
    /// one CPU core. Loss definitions, segment length, context size and the
    /// relational head are unchanged.
    pub fn desk(family: FamilyKind, method: Method, seed: u64) -> Self {
        let mut c = Self::new(family, method, seed);
        c.epochs = 8;
        c.trajectories_per_epoch = 5;
        c.grad_steps_per_epoch = 100;
        c.batch_size = 64;
        c.network.encoder_hidden = vec![32; 3];
        c.network.head_hidden = vec![48; 4];
        c.cem = CemConfig {
            horizon: 15,
            candidates: 100,
            iterations: 3,
            elites: 10,
            ..CemConfig::default()
        };
        c.cde.mediator_batch = 32;
        c.eval_transitions = 500;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return Err(config_err("batch_size must be even and at least 4"));
        }
        if self.trajectories_per_epoch == 0 {
            return Err(config_err("trajectories_per_epoch must be ≥ 1"));
        }
        if self.network.segment_len == 0 {
            return Err(config_err("segment length must be ≥ 1"));
        }
        if !(self.grad_clip > 0.0) || !(self.exploration >= 0.0) {
            return Err(config_err("grad_clip must be > 0 and exploration ≥ 0"));
        }
        self.cem.validate()?;
        self.cde.validate()
    }
}

/// Append-only trajectory store.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Trajectory) {
        self.trajectories.push(t);
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Total environment-label reads across all stored trajectories.
    pub fn label_reads(&self) -> usize {
        self.trajectories.iter().map(Trajectory::label_reads).sum()
    }
}

/// One minibatch: segments, the transition after each, and shared mediators.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub segments: Vec<TransitionSegment>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub next_states: Vec<Vec<f64>>,
    pub mediators: Vec<Mediator>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn trajectory_ids(&self) -> Vec<u64> {
        self.segments.iter().map(|s| s.trajectory_id).collect()
    }

    /// Positive-pair groups for the relation loss.
    fn relation_groups(&self, method: Method) -> Result<Vec<u64>> {
        if method.uses_env_labels() {
            self.segments
                .iter()
                .map(|s| {
                    s.env_label()
                        .map(|l| l as u64)
                        .ok_or_else(|| config_err("segment carries no environment label"))
                })
                .collect()
        } else {
            Ok(self.trajectory_ids())
        }
    }
}

/// Draws `batch_size / 2` trajectories (with replacement) × 2 segments and
/// `mediators` observed `(s, a)` pairs.
pub fn sample_batch(
    buffer: &ReplayBuffer,
    batch_size: usize,
    k: usize,
    mediators: usize,
    rng: &mut SimRng,
) -> Result<StepBatch> {
    let usable: Vec<&Trajectory> = buffer.trajectories().iter().filter(|t| t.len() > k).collect();
    if usable.is_empty() {
        return Err(config_err(format!("no trajectory longer than segment length {k}")));
    }
    let mut b = StepBatch {
        segments: Vec::with_capacity(batch_size),
        states: Vec::with_capacity(batch_size),
        actions: Vec::with_capacity(batch_size),
        next_states: Vec::with_capacity(batch_size),
        mediators: Vec::with_capacity(mediators),
    };
    for _ in 0..batch_size / 2 {
        let t = usable[rng.random_range(0..usable.len())];
        for _ in 0..2 {
            let anchor = rng.random_range(k..t.len());
            b.segments.push(segment_at(t, anchor, k).expect("anchor inside trajectory"));
            b.states.push(t.states[anchor].clone());
            b.actions.push(t.actions[anchor].clone());
            b.next_states.push(t.states[anchor + 1].clone());
        }
    }
    let all = buffer.trajectories();
    for _ in 0..mediators {
        let t = &all[rng.random_range(0..all.len())];
        if t.is_empty() {
            continue;
        }
        let i = rng.random_range(0..t.len());
        b.mediators.push(Mediator {
            state: t.states[i].clone(),
            action: t.actions[i].clone(),
        });
    }
    if b.mediators.is_empty() {
        return Err(config_err("no transitions to draw mediators from"));
    }
    Ok(b)
}

/// Loss values of one step. `relation` holds whichever relation loss the
/// method uses; inactive terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub relation: f64,
    pub dist: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub losses: LossBreakdown,
    /// Gradient blocks in [`WorldModel::param_slices_mut`] order.
    pub grads: Vec<Vec<f64>>,
    pub similarity: Option<SimilarityMatrix>,
}

fn zero_blocks(lens: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
    lens.map(|n| vec![0.0; n]).collect()
}

fn add_row(dst: &mut Matrix, row: usize, src: &[f64]) {
    for (d, s) in dst.row_mut(row).iter_mut().zip(src) {
        *d += s;
    }
}

/// Selects which loss terms contribute to the returned gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub pred: bool,
    pub relation: bool,
    pub dist: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        pred: true,
        relation: true,
        dist: true,
    };
}

/// All active losses of `method` on `batch` and their exact gradients.
///
/// The similarity weights are constants to the relation loss. Passing
/// `frozen_w` replaces the computed weights, which makes the loss a smooth
/// function of the parameters for gradient checks.
pub fn compute_losses(
    model: &mut WorldModel,
    batch: &StepBatch,
    method: Method,
    cde: &CdeConfig,
    frozen_w: Option<&Matrix>,
) -> Result<LossOutput> {
    compute_losses_with(model, batch, method, cde, frozen_w, LossTerms::ALL)
}

/// [`compute_losses`] with gradients restricted to `terms`. Loss values
/// are always reported for every active term.
pub fn compute_losses_with(
    model: &mut WorldModel,
    batch: &StepBatch,
    method: Method,
    cde: &CdeConfig,
    frozen_w: Option<&Matrix>,
    terms: LossTerms,
) -> Result<LossOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(config_err("a step needs at least two segments"));
    }
    if model.use_context != method.uses_context() {
        return Err(config_err(format!("model context setting does not match method {method}")));
    }
    let sd = model.kind.state_dim();
    let ad = model.kind.action_dim();
    let zc = sd + ad;

    let segs: Vec<&TransitionSegment> = batch.segments.iter().collect();
    let z = if model.use_context {
        let x = model.encoder.inputs(&model.norm, &segs)?;
        model.encoder.net.forward(&x)?
    } else {
        Matrix::zeros(n, CONTEXT_DIM)
    };

    let m = if method.uses_intervention() { batch.mediators.len() } else { 0 };
    let head = &model.head;
    let mut x = Matrix::zeros(n + n * m, head.input_dim());
    for i in 0..n {
        head.write_input(&model.norm, &batch.states[i], &batch.actions[i], z.row(i), x.row_mut(i));
    }
    for j in 0..n {
        for (mi, med) in batch.mediators.iter().take(m).enumerate() {
            head.write_input(&model.norm, &med.state, &med.action, z.row(j), x.row_mut(n + j * m + mi));
        }
    }
    let mut targets = Matrix::zeros(n, sd);
    for i in 0..n {
        targets
            .row_mut(i)
            .copy_from_slice(&PredictionHead::target(&model.norm, &batch.states[i], &batch.next_states[i]));
    }
    let out = model.head.net.forward(&x)?;
    let mut g_out = Matrix::zeros(out.rows(), out.cols());

    let (pred, g_pred) = prediction_loss_and_grad(&out.row_block(0, n), &targets)?;
    if terms.pred {
        for i in 0..n {
            g_out.row_mut(i).copy_from_slice(g_pred.row(i));
        }
    }

    let mut similarity = None;
    let mut dist = 0.0;
    if m > 0 {
        let table = scale_outputs(&model.norm, &out.row_block(n, n * m));
        let d = distances_from_table(&table, n, m);
        let w = match frozen_w {
            Some(w) => w.clone(),
            None => similarity_from_distances(&d, cde),
        };
        let (l, g_table) = dist_loss_and_grad(&table, &batch.trajectory_ids(), m);
        dist = l;
        let on = if terms.dist { 1.0 } else { 0.0 };
        for r in 0..n * m {
            for ((g, t), s) in g_out.row_mut(n + r).iter_mut().zip(g_table.row(r)).zip(&model.norm.delta_std) {
                *g = on * t * s;
            }
        }
        similarity = Some(SimilarityMatrix { d, w });
    }

    let mut g_z = Matrix::zeros(n, CONTEXT_DIM);
    let mut relation = 0.0;
    let relation_grads = if method.uses_relation() {
        let pairs = pair_inputs(&z)?;
        let pair_scores = model.relation.net.forward(&pairs)?;
        let scores = scores_from_pairs(&pair_scores, n);
        let mut pb = PairBatch::from_groups(&batch.relation_groups(method)?, scores)?;
        if let Some(s) = &similarity {
            pb = pb.with_weights(s.w.clone())?;
        }
        let (l, g_scores) = relation_loss_and_grad(&pb, similarity.is_some())?;
        relation = l;
        let on = if terms.relation { 1.0 } else { 0.0 };
        let mut upstream = Matrix::zeros(n * (n - 1), 1);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    upstream.set(pair_row(i, j, n), 0, on * g_scores.get(i, j));
                }
            }
        }
        let g = model.relation.net.backward(&upstream)?;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let row = g.input.row(pair_row(i, j, n));
                    add_row(&mut g_z, i, &row[..CONTEXT_DIM]);
                    add_row(&mut g_z, j, &row[CONTEXT_DIM..]);
                }
            }
        }
        g.slices().iter().map(|s| s.to_vec()).collect()
    } else {
        zero_blocks(model.relation.net.param_slices().iter().map(|s| s.len()))
    };

    let g_head = model.head.net.backward(&g_out)?;
    let encoder_grads = if model.use_context {
        for i in 0..n {
            add_row(&mut g_z, i, &g_head.input.row(i)[zc..]);
        }
        for j in 0..n {
            for mi in 0..m {
                add_row(&mut g_z, j, &g_head.input.row(n + j * m + mi)[zc..]);
            }
        }
        let g = model.encoder.net.backward(&g_z)?;
        g.slices().iter().map(|s| s.to_vec()).collect()
    } else {
        zero_blocks(model.encoder.net.param_slices().iter().map(|s| s.len()))
    };

    let total = pred + relation + dist;
    if !total.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite total loss (pred {pred}, relation {relation}, dist {dist})"
        )));
    }
    let mut grads = encoder_grads;
    grads.extend(g_head.slices().iter().map(|s| s.to_vec()));
    grads.extend(relation_grads);
    Ok(LossOutput {
        losses: LossBreakdown {
            pred,
            relation,
            dist,
            total,
        },
        grads,
        similarity,
    })
}

/// Per-epoch log row. Epoch 0 describes the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub pred_loss: f64,
    pub relation_loss: f64,
    pub dist_loss: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Mean return of the episodes collected at the start of this epoch.
    pub mean_return_train_envs: f64,
}

/// Training state for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub family: EnvFamily,
    pub model: WorldModel,
    pub buffer: ReplayBuffer,
    adam: AdamState,
    rng: SimRng,
    next_id: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let family = EnvFamily::by_kind(config.family);
        family.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let model = WorldModel::new(config.family, &config.network, config.method.uses_context(), &mut rng)?;
        let adam = AdamState::new(config.adam, &model.param_block_lens());
        Ok(Self {
            config,
            family,
            model,
            buffer: ReplayBuffer::new(),
            adam,
            rng,
            next_id: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Collects one epoch of MPC episodes on sampled training environments
    /// and refits the normalizer. Returns the episode returns.
    pub fn collect(&mut self) -> Result<Vec<f64>> {
        let mpc = MpcConfig {
            cem: self.config.cem.clone(),
            exploration: Some(self.config.exploration),
        };
        let mut returns = Vec::with_capacity(self.config.trajectories_per_epoch);
        for _ in 0..self.config.trajectories_per_epoch {
            let (label, params) = sample_training_env(&self.family, &mut self.rng)?;
            let id = self.next_id;
            self.next_id += 1;
            let traj = mpc_episode(
                &params,
                &self.model,
                &mpc,
                self.family.episode_length,
                self.config.seed.wrapping_add(id),
            )?
            .with_identity(id, label);
            returns.push(traj.total_reward());
            self.buffer.push(traj);
        }
        self.model.norm = Normalizer::fit(self.buffer.trajectories())?;
        Ok(returns)
    }

    fn draw_batch(&mut self) -> Result<StepBatch> {
        sample_batch(
            &self.buffer,
            self.config.batch_size,
            self.model.segment_len(),
            self.config.cde.mediator_batch,
            &mut self.rng,
        )
    }

    /// Loss values on a fresh batch without updating anything.
    pub fn probe_losses(&mut self) -> Result<LossBreakdown> {
        let batch = self.draw_batch()?;
        let mut scratch = self.model.clone();
        Ok(compute_losses(&mut scratch, &batch, self.config.method, &self.config.cde, None)?.losses)
    }

    /// One joint Adam step on encoder, prediction head and relational head.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let reads_before = self.buffer.label_reads();
        let batch = self.draw_batch()?;
        let out = compute_losses(&mut self.model, &batch, self.config.method, &self.config.cde, None)?;
        let reads = self.buffer.label_reads() - reads_before;
        if reads > 0 && !self.config.method.uses_env_labels() {
            return Err(Error::LabelLeak(reads));
        }
        let mut grads = out.grads;
        {
            let mut g: Vec<&mut [f64]> = grads.iter_mut().map(|b| b.as_mut_slice()).collect();
            clip_global_norm(&mut g, self.config.grad_clip);
        }
        let g: Vec<&[f64]> = grads.iter().map(|b| b.as_slice()).collect();
        let mut params = self.model.param_slices_mut();
        self.adam.update(&mut params, &g)?;
        Ok(out.losses)
    }

    fn prediction_error(&self) -> Result<PredictionReport> {
        evaluate_prediction(
            &self.model,
            &self.family,
            self.config.eval_transitions,
            self.config.seed.wrapping_add(EVAL_SEED_OFFSET),
        )
    }

    fn metrics_row(&self, epoch: usize, losses: LossBreakdown, returns: &[f64]) -> Result<EpochMetrics> {
        let pe = self.prediction_error()?;
        Ok(EpochMetrics {
            epoch,
            pred_loss: losses.pred,
            relation_loss: losses.relation,
            dist_loss: losses.dist,
            train_mse: pe.train_mse,
            test_mse: pe.test_mse,
            mean_return_train_envs: mean(returns),
        })
    }

    /// Runs one epoch. The first call also returns the epoch-0 row.
    pub fn run_epoch(&mut self) -> Result<Vec<EpochMetrics>> {
        let returns = self.collect()?;
        let mut rows = Vec::with_capacity(2);
        if self.epoch == 0 {
            let probe = self.probe_losses()?;
            rows.push(self.metrics_row(0, probe, &returns)?);
        }
        let mut sum = LossBreakdown::default();
        for _ in 0..self.config.grad_steps_per_epoch {
            let l = self.train_step()?;
            sum.pred += l.pred;
            sum.relation += l.relation;
            sum.dist += l.dist;
            sum.total += l.total;
        }
        let steps = self.config.grad_steps_per_epoch.max(1) as f64;
        let mean = LossBreakdown {
            pred: sum.pred / steps,
            relation: sum.relation / steps,
            dist: sum.dist / steps,
            total: sum.total / steps,
        };
        self.epoch += 1;
        rows.push(self.metrics_row(self.epoch, mean, &returns)?);
        log::info!(
            "epoch {} method {} pred {:.5} relation {:.5} dist {:.5}",
            self.epoch,
            self.config.method,
            mean.pred,
            mean.relation,
            mean.dist
        );
        Ok(rows)
    }
}

const EVAL_SEED_OFFSET: u64 = 0x5eed_0000;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WorldModel,
    pub metrics: Vec<EpochMetrics>,
    pub buffer: ReplayBuffer,
}

/// Runs every epoch, calling `observer` after each with the new rows.
pub fn train_run<F>(config: TrainConfig, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer, &[EpochMetrics]) -> core::result::Result<(), String>,
{
    let mut trainer = Trainer::new(config)?;
    let mut metrics = Vec::new();
    for _ in 0..trainer.config.epochs {
        let rows = trainer.run_epoch()?;
        observer(&trainer, &rows).map_err(Error::Load)?;
        metrics.extend(rows);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        buffer: trainer.buffer,
    })
}
