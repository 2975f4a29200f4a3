//! Post-training measurements: returns on unseen dynamics, one-step
//! prediction error, context cluster quality and a 2-d PCA projection.
//!
//! Environment labels are read freely here; nothing in this module feeds a
//! gradient.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Normalizer, PredictionHead};
use crate::env::{rollout, EnvFamily, EnvParams, RandomPolicy, Trajectory};
use crate::intervention::{similarity_matrix, CdeConfig, Mediator, SimilarityMatrix};
use crate::math::{abs, sqrt};
use crate::model::WorldModel;
use crate::nn::Matrix;
use crate::planner::{mpc_episode, CemConfig, MpcConfig};
use crate::segment::{build_segments, segment_at, TransitionSegment};
use crate::{config_err, rng_from_seed, Result};

/// Return statistics for one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReturn {
    pub env_index: usize,
    pub params: EnvParams,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, sqrt(var))
}

fn summarize(env_index: usize, params: EnvParams, returns: Vec<f64>) -> EnvReturn {
    let (mean, std) = mean_std(&returns);
    EnvReturn {
        env_index,
        params,
        mean,
        std,
        returns,
    }
}

fn episode_seed(seed: u64, env: usize, episodes: usize, e: usize) -> u64 {
    seed.wrapping_add((env * episodes + e) as u64)
}

/// MPC returns without exploration noise, `n_episodes` per environment.
pub fn evaluate_returns(
    model: &WorldModel,
    params: &[EnvParams],
    n_episodes: usize,
    cem: &CemConfig,
    episode_len: usize,
    seed: u64,
) -> Result<Vec<EnvReturn>> {
    let mpc = MpcConfig {
        cem: cem.clone(),
        exploration: None,
    };
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let returns = (0..n_episodes)
                .map(|e| {
                    mpc_episode(p, model, &mpc, episode_len, episode_seed(seed, i, n_episodes, e))
                        .map(|t| t.total_reward())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(i, *p, returns))
        })
        .collect()
}

/// Uniform-random-action returns with the same episode seeds as
/// [`evaluate_returns`].
pub fn random_policy_returns(params: &[EnvParams], n_episodes: usize, episode_len: usize, seed: u64) -> Vec<EnvReturn> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let returns = (0..n_episodes)
                .map(|e| {
                    let mut policy = RandomPolicy::for_family(p.kind());
                    rollout(p, &mut policy, episode_len, episode_seed(seed, i, n_episodes, e)).total_reward()
                })
                .collect();
            summarize(i, *p, returns)
        })
        .collect()
}

pub fn mean_return(returns: &[EnvReturn]) -> f64 {
    mean_std(&returns.iter().map(|r| r.mean).collect::<Vec<_>>()).0
}

/// Random-policy episodes on environments drawn uniformly from `params`
/// until at least `min_transitions` transitions with a full preceding
/// segment exist. Labels are indices into `params`.
pub fn random_episodes(
    params: &[EnvParams],
    min_transitions: usize,
    k: usize,
    episode_len: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if params.is_empty() {
        return Err(config_err("no environments to collect from"));
    }
    if episode_len <= k {
        return Err(config_err("episodes are not longer than the segment length"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    let mut have = 0;
    while have < min_transitions {
        let i = rng.random_range(0..params.len());
        let ep_seed = rng.random::<u64>();
        let mut policy = RandomPolicy::for_family(params[i].kind());
        let t = rollout(&params[i], &mut policy, episode_len, ep_seed).with_identity(out.len() as u64, i);
        have += t.len() - k;
        out.push(t);
    }
    Ok(out)
}

/// Squared one-step errors in `scale` units, each transition predicted from
/// the segment right before it. Uses at most `limit` transitions.
pub fn one_step_errors(model: &WorldModel, trajs: &[Trajectory], scale: &[f64], limit: usize) -> Result<Vec<f64>> {
    let k = model.segment_len();
    let mut segs: Vec<TransitionSegment> = Vec::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    'outer: for (ti, t) in trajs.iter().enumerate() {
        for anchor in k..t.len() {
            if rows.len() == limit {
                break 'outer;
            }
            segs.push(segment_at(t, anchor, k).expect("anchor inside trajectory"));
            rows.push((ti, anchor));
        }
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let seg_refs: Vec<&TransitionSegment> = segs.iter().collect();
    let z = model.contexts(&seg_refs)?;
    let head: &PredictionHead = &model.head;
    let x = head.build_inputs(
        &model.norm,
        rows.iter()
            .enumerate()
            .map(|(r, &(ti, t))| (trajs[ti].states[t].as_slice(), trajs[ti].actions[t].as_slice(), z.row(r))),
    )?;
    let out = head.net.infer(&x)?;
    let mut errs = Vec::with_capacity(rows.len());
    for (r, &(ti, t)) in rows.iter().enumerate() {
        let s = &trajs[ti].states[t];
        let s_next = &trajs[ti].states[t + 1];
        let mut acc = 0.0;
        for c in 0..s.len() {
            let pred = s[c] + model.norm.delta_std[c] * out.get(r, c);
            let e = (pred - s_next[c]) / scale[c];
            acc += e * e;
        }
        errs.push(acc / s.len() as f64);
    }
    Ok(errs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub train_mse: f64,
    pub test_mse: f64,
    pub transitions: usize,
}

/// One-step MSE on random-policy transitions from training and test
/// environments. Errors are divided per dimension by the RMS state change
/// of the training-environment sample, so the unit does not depend on the
/// model's own normalizer.
pub fn evaluate_prediction(model: &WorldModel, family: &EnvFamily, n_transitions: usize, seed: u64) -> Result<PredictionReport> {
    let k = model.segment_len();
    let train = random_episodes(&family.train_params, n_transitions, k, family.episode_length, seed)?;
    let test_params = if family.test_params.is_empty() {
        &family.train_params
    } else {
        &family.test_params
    };
    let test = random_episodes(test_params, n_transitions, k, family.episode_length, seed ^ 0x7e57)?;
    let scale = Normalizer::fit(&train)?.delta_std;
    let mse = |trajs: &[Trajectory]| -> Result<f64> {
        let e = one_step_errors(model, trajs, &scale, n_transitions)?;
        Ok(if e.is_empty() { 0.0 } else { e.iter().sum::<f64>() / e.len() as f64 })
    };
    Ok(PredictionReport {
        train_mse: mse(&train)?,
        test_mse: mse(&test)?,
        transitions: n_transitions,
    })
}

/// Contexts with their environment labels and a mediator sample.
#[derive(Debug, Clone)]
pub struct ContextSet {
    pub contexts: Matrix,
    pub labels: Vec<usize>,
    pub mediators: Vec<Mediator>,
}

/// `per_env` contexts from one random-policy episode in each environment.
pub fn collect_contexts(
    model: &WorldModel,
    params: &[EnvParams],
    per_env: usize,
    mediators: usize,
    episode_len: usize,
    seed: u64,
) -> Result<ContextSet> {
    let mut rng = rng_from_seed(seed);
    let k = model.segment_len();
    let mut segs = Vec::new();
    let mut labels = Vec::new();
    let mut trajs = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let mut policy = RandomPolicy::for_family(p.kind());
        let t = rollout(p, &mut policy, episode_len, rng.random::<u64>()).with_identity(i as u64, i);
        for s in build_segments(&t, k, per_env, &mut rng) {
            segs.push(s);
            labels.push(i);
        }
        trajs.push(t);
    }
    let mut meds = Vec::with_capacity(mediators);
    for _ in 0..mediators {
        let t = &trajs[rng.random_range(0..trajs.len())];
        if t.is_empty() {
            continue;
        }
        let i = rng.random_range(0..t.len());
        meds.push(Mediator {
            state: t.states[i].clone(),
            action: t.actions[i].clone(),
        });
    }
    let refs: Vec<&TransitionSegment> = segs.iter().collect();
    Ok(ContextSet {
        contexts: model.contexts(&refs)?,
        labels,
        mediators: meds,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l
}

/// Mean silhouette of `points` under `labels` with Euclidean distance.
///
/// Points alone in their cluster score 0, and so does any point whose
/// intra- and nearest-cluster distances are both zero. `None` when fewer
/// than two labels are present.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Option<f64> {
    let ls = distinct(labels);
    if ls.len() < 2 || points.rows() != labels.len() {
        return None;
    }
    let n = points.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; ls.len()];
        let mut counts = vec![0usize; ls.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = ls.binary_search(&labels[j]).expect("label present");
            sums[c] += euclid(points.row(i), points.row(j));
            counts[c] += 1;
        }
        let own = ls.binary_search(&labels[i]).expect("label present");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..ls.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Some(total / n as f64)
}

/// Mean similarity of same-label pairs over mean similarity of
/// different-label pairs, off-diagonal only.
pub fn intra_inter_ratio(w: &Matrix, labels: &[usize]) -> Option<f64> {
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same += w.get(i, j);
                ns += 1;
            } else {
                cross += w.get(i, j);
                nc += 1;
            }
        }
    }
    if ns == 0 || nc == 0 || cross == 0.0 {
        return None;
    }
    Some((same / ns as f64) / (cross / nc as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub silhouette: Option<f64>,
    pub intra_inter_w_ratio: Option<f64>,
}

/// Silhouette of the contexts and the direct-effect similarity ratio.
/// Both are absent unless two labels each have two or more contexts.
pub fn cluster_metrics(model: &WorldModel, set: &ContextSet, cde: &CdeConfig) -> Result<(ClusterMetrics, Option<SimilarityMatrix>)> {
    let ls = distinct(&set.labels);
    let populated = ls
        .iter()
        .filter(|&&l| set.labels.iter().filter(|&&x| x == l).count() >= 2)
        .count();
    if populated < 2 || set.mediators.is_empty() {
        return Ok((
            ClusterMetrics {
                silhouette: None,
                intra_inter_w_ratio: None,
            },
            None,
        ));
    }
    let sim = similarity_matrix(&model.head, &model.norm, &set.contexts, &set.mediators, cde)?;
    Ok((
        ClusterMetrics {
            silhouette: silhouette(&set.contexts, &set.labels),
            intra_inter_w_ratio: intra_inter_ratio(&sim.w, &set.labels),
        },
        Some(sim),
    ))
}

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `N × 2` coordinates.
    pub projection: Matrix,
    /// `2 × D` unit principal directions.
    pub components: Matrix,
    /// Variance along each component.
    pub variances: [f64; 2],
}

fn power_iteration(cov: &Matrix) -> (f64, Vec<f64>) {
    let d = cov.rows();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.37 * i as f64).collect();
    let norm = sqrt(v.iter().map(|x| x * x).sum());
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITERS {
        let mut next = vec![0.0; d];
        for (i, n) in next.iter_mut().enumerate() {
            *n = cov.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let nn = sqrt(next.iter().map(|x| x * x).sum());
        if nn == 0.0 {
            return (0.0, v);
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let delta = next.iter().zip(&v).map(|(a, b)| abs(a - b)).fold(0.0, f64::max);
        v = next;
        lambda = nn;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    (lambda, v)
}

/// Top-two principal components by power iteration with deflation.
///
/// Each direction is flipped so its largest-magnitude loading is positive.
/// Data with no spread projects to zeros.
pub fn pca_project(points: &Matrix) -> Result<Pca> {
    let (n, d) = (points.rows(), points.cols());
    if n < 3 {
        return Err(config_err("projection needs at least three points"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut centered = points.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale(1.0 / n as f64);
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let mut components = Matrix::zeros(2, d);
    let mut variances = [0.0; 2];
    if trace <= 0.0 {
        log::warn!("all points coincide; projection is zero");
        return Ok(Pca {
            projection: Matrix::zeros(n, 2),
            components,
            variances,
        });
    }
    for c in 0..2.min(d) {
        let (lambda, mut v) = power_iteration(&cov);
        if lambda <= trace * 1e-15 {
            break;
        }
        let lead = v.iter().copied().fold(0.0, |acc: f64, x| if abs(x) > abs(acc) { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                let u = cov.get(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, u);
            }
        }
        components.row_mut(c).copy_from_slice(&v);
        variances[c] = lambda;
    }
    let projection = centered.matmul_t(&components)?;
    Ok(Pca {
        projection,
        components,
        variances,
    })
}

/// One projected context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub x: f64,
    pub y: f64,
    pub env_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: crate::env::FamilyKind,
    /// One entry per test environment; absent when no episodes were run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub returns: Option<Vec<EnvReturn>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_return: Option<f64>,
    pub prediction: PredictionReport,
    pub clusters: ClusterMetrics,
    pub pca_points: Vec<PcaPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub cem: CemConfig,
    pub cde: CdeConfig,
    pub transitions: usize,
    /// Environments whose contexts are clustered and projected.
    pub cluster_params: Vec<EnvParams>,
    pub contexts_per_env: usize,
    pub seed: u64,
}

/// 2-d PCA coordinates of every context, empty below three contexts.
pub fn project_contexts(set: &ContextSet) -> Result<Vec<PcaPoint>> {
    if set.contexts.rows() < 3 {
        return Ok(Vec::new());
    }
    let p = pca_project(&set.contexts)?;
    Ok((0..set.contexts.rows())
        .map(|i| PcaPoint {
            x: p.projection.get(i, 0),
            y: p.projection.get(i, 1),
            env_label: set.labels[i],
        })
        .collect())
}

/// Full report plus the similarity matrix behind the cluster ratio.
pub fn evaluate(model: &WorldModel, family: &EnvFamily, opts: &EvalOptions) -> Result<(EvalReport, ContextSet, Option<SimilarityMatrix>)> {
    let returns = if opts.episodes > 0 {
        Some(evaluate_returns(
            model,
            &family.test_params,
            opts.episodes,
            &opts.cem,
            family.episode_length,
            opts.seed,
        )?)
    } else {
        None
    };
    let prediction = evaluate_prediction(model, family, opts.transitions, opts.seed)?;
    let set = collect_contexts(
        model,
        &opts.cluster_params,
        opts.contexts_per_env,
        opts.cde.mediator_batch,
        family.episode_length,
        opts.seed,
    )?;
    let (clusters, sim) = cluster_metrics(model, &set, &opts.cde)?;
    let pca_points = project_contexts(&set)?;
    let mean = returns.as_deref().map(mean_return);
    Ok((
        EvalReport {
            family: family.kind,
            returns,
            mean_return: mean,
            prediction,
            clusters,
            pca_points,
        },
        set,
        sim,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::FamilyKind;
    use crate::model::NetworkConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn separated_clusters_score_near_one() {
        let p = matrix(&[&[0.0, 0.0], &[0.0, 0.01], &[100.0, 0.0], &[100.0, 0.01]]);
        let s = silhouette(&p, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.999, "{s}");
    }

    #[test]
    fn identical_points_score_zero() {
        let p = matrix(&[&[1.0, 2.0][..]; 6]);
        assert_eq!(silhouette(&p, &[0, 0, 0, 1, 1, 1]), Some(0.0));
    }

    #[test]
    fn single_label_is_undefined() {
        let p = matrix(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(silhouette(&p, &[4, 4, 4]), None);
    }

    #[test]
    fn silhouette_hand_example() {
        // a(0)=1, b(0)=4.5 → 0.7778; a(1)=1, b(1)=3.5 → 0.7143;
        // a(2)=2 (singleton-free), b(2)=3.5 ... computed by hand below.
        let p = matrix(&[&[0.0], &[1.0], &[4.0], &[5.0]]);
        let l = [0, 0, 1, 1];
        let s = [
            (4.5 - 1.0) / 4.5,
            (3.5 - 1.0) / 3.5,
            (3.5 - 1.0) / 3.5,
            (4.5 - 1.0) / 4.5,
        ];
        let expect = s.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(silhouette(&p, &l).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn ratio_detects_block_structure() {
        let mut w = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                w.set(i, j, if i / 2 == j / 2 { 0.9 } else { 0.3 });
            }
        }
        assert_abs_diff_eq!(intra_inter_ratio(&w, &[0, 0, 1, 1]).unwrap(), 3.0, epsilon = 1e-12);
        assert_eq!(intra_inter_ratio(&w, &[0, 0, 0, 0]), None);
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let v: f64 = StandardNormal.sample(&mut rng);
                m.set(i, j, v * (1.0 + j as f64));
            }
        }
        m
    }

    #[test]
    fn variances_match_dense_eigensolver() {
        let pts = gaussian(300, 10, 1);
        let p = pca_project(&pts).unwrap();
        let n = pts.rows();
        let mut mean = [0.0; 10];
        for i in 0..n {
            for j in 0..10 {
                mean[j] += pts.get(i, j) / n as f64;
            }
        }
        let cov = nalgebra::DMatrix::from_fn(10, 10, |a, b| {
            (0..n).map(|i| (pts.get(i, a) - mean[a]) * (pts.get(i, b) - mean[b])).sum::<f64>() / n as f64
        });
        let mut eig: std::vec::Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        assert_abs_diff_eq!(p.variances[0], eig[0], epsilon = 1e-6);
        assert_abs_diff_eq!(p.variances[1], eig[1], epsilon = 1e-6);
        let proj_var: f64 = (0..n).map(|i| p.projection.get(i, 0).powi(2)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(proj_var, eig[0], epsilon = 1e-6);
    }

    #[test]
    fn collinear_points_have_no_second_variance() {
        let rows: std::vec::Vec<std::vec::Vec<f64>> =
            (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64), 0.5]).collect();
        let p = pca_project(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!(p.variances[1].abs() < 1e-9);
        for i in 0..20 {
            assert!(p.projection.get(i, 1).abs() < 1e-6);
        }
    }

    #[test]
    fn planar_data_keeps_distances() {
        let mut rng = rng_from_seed(3);
        let (u, v) = ([0.6, 0.0, 0.8, 0.0], [0.0, 1.0, 0.0, 0.0]);
        let rows: std::vec::Vec<std::vec::Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
                (0..4).map(|j| a * u[j] + b * v[j] + 1.0).collect()
            })
            .collect();
        let pts = Matrix::from_rows(&rows).unwrap();
        let p = pca_project(&pts).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let orig = euclid(pts.row(i), pts.row(j));
                let proj = euclid(p.projection.row(i), p.projection.row(j));
                assert!((orig - proj).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coincident_points_project_to_zero() {
        let p = pca_project(&matrix(&[&[1.0, 1.0][..]; 5])).unwrap();
        assert!(p.projection.data().iter().all(|&v| v == 0.0));
        assert!(pca_project(&matrix(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn sign_convention_holds() {
        let p = pca_project(&gaussian(50, 5, 9)).unwrap();
        for c in 0..2 {
            let row = p.components.row(c);
            let lead = row.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn projection_ignores_row_order(seed in 0u64..1000, shift in 1usize..40) {
            let pts = gaussian(40, 6, seed);
            let n = pts.rows();
            let rows: std::vec::Vec<&[f64]> = (0..n).map(|i| pts.row((i + shift) % n)).collect();
            let rotated = Matrix::from_rows(&rows).unwrap();
            let a = pca_project(&pts).unwrap();
            let b = pca_project(&rotated).unwrap();
            for i in 0..n {
                for c in 0..2 {
                    prop_assert!((a.projection.get((i + shift) % n, c) - b.projection.get(i, c)).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn silhouette_is_bounded(seed in 0u64..1000) {
            let pts = gaussian(12, 3, seed);
            let labels: std::vec::Vec<usize> = (0..12).map(|i| i % 3).collect();
            let s = silhouette(&pts, &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    fn tiny_model(seed: u64) -> WorldModel {
        let net = NetworkConfig {
            encoder_hidden: vec![8],
            head_hidden: vec![8],
            ..NetworkConfig::default()
        };
        WorldModel::new(FamilyKind::Pendulum, &net, true, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn zero_head_on_a_still_pendulum_has_zero_error() {
        // The hanging rest state is a fixed point, and a zero head predicts no change.
        let mut model = tiny_model(1);
        model.head = PredictionHead::zeros(3, 1, 10, &[8]).unwrap();
        let obs = FamilyKind::Pendulum.observe([core::f64::consts::PI, 0.0]);
        let states = vec![obs; 31];
        let t = Trajectory::new(0, 0, states, vec![vec![0.0]; 30], vec![0.0; 30]).unwrap();
        let e = one_step_errors(&model, &[t], &[1.0; 3], 100).unwrap();
        assert_eq!(e.len(), 20);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_report_is_nonnegative_and_reproducible() {
        let model = tiny_model(2);
        let fam = EnvFamily::pendulum();
        let a = evaluate_prediction(&model, &fam, 300, 5).unwrap();
        assert!(a.train_mse >= 0.0 && a.test_mse >= 0.0);
        assert_eq!(a, evaluate_prediction(&model, &fam, 300, 5).unwrap());
    }

    #[test]
    fn returns_are_nonpositive_and_reproducible() {
        let model = tiny_model(3);
        let fam = EnvFamily::pendulum();
        let cem = CemConfig {
            horizon: 2,
            candidates: 6,
            iterations: 1,
            elites: 2,
            ..CemConfig::default()
        };
        let r = evaluate_returns(&model, &fam.test_params[..2], 2, &cem, 30, 4).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().flat_map(|e| &e.returns).all(|&x| x <= 0.0));
        assert_eq!(r, evaluate_returns(&model, &fam.test_params[..2], 2, &cem, 30, 4).unwrap());
    }

    #[test]
    fn report_covers_each_test_environment_once() {
        let model = tiny_model(4);
        let mut fam = EnvFamily::pendulum();
        fam.test_params.truncate(3);
        fam.episode_length = 20;
        let opts = EvalOptions {
            episodes: 1,
            cem: CemConfig {
                horizon: 2,
                candidates: 4,
                iterations: 1,
                elites: 1,
                ..CemConfig::default()
            },
            cde: CdeConfig::with_beta(10.0),
            transitions: 50,
            cluster_params: fam.train_params[..3].to_vec(),
            contexts_per_env: 4,
            seed: 1,
        };
        let (rep, set, sim) = evaluate(&model, &fam, &opts).unwrap();
        let idx: std::vec::Vec<usize> = rep.returns.as_ref().unwrap().iter().map(|r| r.env_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(rep.pca_points.len(), 12);
        assert_eq!(set.labels.len(), 12);
        assert!(sim.is_some() && rep.clusters.silhouette.is_some());
        let none = evaluate(&model, &fam, &EvalOptions { episodes: 0, ..opts }).unwrap().0;
        assert!(none.returns.is_none() && none.mean_return.is_none());
    }
}
