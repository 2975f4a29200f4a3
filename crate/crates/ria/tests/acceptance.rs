//! End-to-end acceptance suite. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any criterion fails.
//!
//! The learning criteria share one sweep of desk-profile pendulum runs:
//! five methods × three seeds.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use ria::run::{train_to_dir, RunConfig};
use ria_core::dynamics::{Normalizer, PredictionHead};
use ria_core::env::{rollout, EnvFamily, EnvParams, FamilyKind, RandomPolicy};
use ria_core::eval::{
    cluster_metrics, collect_contexts, evaluate_prediction, evaluate_returns, mean_return, random_policy_returns,
};
use ria_core::intervention::{
    average_cde, controlled_direct_effect, off_diagonal_std, similarity_from_distances, similarity_matrix, CdeConfig,
    Mediator,
};
use ria_core::model::WorldModel;
use ria_core::nn::{Activation, Matrix, Mlp, OutputActivation};
use ria_core::relation::{intervention_relation_loss, pair_coefficients, relation_loss, PairBatch};
use ria_core::trainer::{
    compute_losses, compute_losses_with, sample_batch, train_run, LossBreakdown, LossTerms, Method, ReplayBuffer,
    TrainConfig,
};
use ria_core::{rng_from_seed, SimRng};

const SEEDS: [u64; 3] = [1, 2, 3];
const EVAL_SEED: u64 = 20_240_601;
const EPISODE_LEN: usize = 200;
const PREDICTION_TRANSITIONS: usize = 2000;
const CONTEXTS_PER_ENV: usize = 16;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// Gradient fidelity

fn fd_setup(method: Method, seed: u64) -> (WorldModel, ria_core::trainer::StepBatch) {
    let family = EnvFamily::pendulum();
    let net = TrainConfig::desk(FamilyKind::Pendulum, method, seed).network;
    let mut buf = ReplayBuffer::new();
    for i in 0..8usize {
        let env = (i * 29) % family.train_params.len();
        let t = rollout(
            &family.train_params[env],
            &mut RandomPolicy::for_family(FamilyKind::Pendulum),
            40,
            seed * 100 + i as u64,
        )
        .with_identity(i as u64, env);
        buf.push(t);
    }
    let mut rng = rng_from_seed(seed);
    let mut model = WorldModel::new(FamilyKind::Pendulum, &net, method.uses_context(), &mut rng).unwrap();
    model.norm = Normalizer::fit(buf.trajectories()).unwrap();
    let batch = sample_batch(&buf, 16, net.segment_len, 8, &mut rng).unwrap();
    (model, batch)
}

/// Worst relative error between analytic and central-difference gradients
/// over `count` random coordinates with a non-negligible gradient, and the
/// number of coordinates redrawn because the stencil straddled a kink.
/// Coordinates without an analytic gradient must not move the loss either.
fn fd_worst(method: Method, terms: LossTerms, seed: u64, count: usize) -> (f64, usize) {
    let (mut model, batch) = fd_setup(method, seed);
    let cde = CdeConfig::with_beta(EnvFamily::pendulum().beta);
    let base = compute_losses_with(&mut model, &batch, method, &cde, None, terms).unwrap();
    let frozen = base.similarity.as_ref().map(|s| s.w.clone());
    let analytic: Vec<f64> = base.grads.iter().flatten().copied().collect();
    let pick = |l: &LossBreakdown| {
        let mut v = 0.0;
        if terms.pred {
            v += l.pred;
        }
        if terms.relation {
            v += l.relation;
        }
        if terms.dist {
            v += l.dist;
        }
        v
    };
    let loss_at = |idx: usize, v: f64| {
        let mut m = model.clone();
        m.set_flat_param(idx, v);
        pick(&compute_losses(&mut m, &batch, method, &cde, frozen.as_ref()).unwrap().losses)
    };
    let h = 1e-5;
    let one_sided = |idx: usize| {
        let orig = model.flat_param(idx);
        let mid = loss_at(idx, orig);
        ((loss_at(idx, orig + h) - mid) / h, (mid - loss_at(idx, orig - h)) / h)
    };
    let mut rng = rng_from_seed(seed ^ 0xfd);
    let (active, inactive): (Vec<usize>, Vec<usize>) = (0..analytic.len()).partition(|&i| analytic[i].abs() >= 1e-7);
    assert!(active.len() >= count, "too few coordinates carry a gradient");
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
    while checked < count {
        let idx = active[rng.random_range(0..active.len())];
        let (fwd, bwd) = one_sided(idx);
        // A ReLU or |x| switching inside the stencil makes the two sides disagree.
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) {
            kinks += 1;
            assert!(kinks <= count, "stencils cross kinks too often");
            continue;
        }
        let (g, f) = (analytic[idx], 0.5 * (fwd + bwd));
        worst = worst.max((g - f).abs() / g.abs().max(f.abs()));
        checked += 1;
    }
    for _ in 0..inactive.len().min(20) {
        let (fwd, bwd) = one_sided(inactive[rng.random_range(0..inactive.len())]);
        if fwd.abs().max(bwd.abs()) >= 1e-7 {
            worst = worst.max(1.0);
        }
    }
    (worst, kinks)
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let only = |pred, relation, dist| LossTerms { pred, relation, dist };
    let checks = [
        ("pred", fd_worst(Method::VanillaContext, only(true, false, false), 11, 100)),
        ("relation", fd_worst(Method::RelationOnly, only(false, true, false), 12, 100)),
        ("i-relation", fd_worst(Method::RiaFull, only(false, true, false), 13, 100)),
        ("dist", fd_worst(Method::RiaFull, only(false, false, true), 14, 100)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let pass = checks.iter().all(|c| c.1 .0 < 1e-4) && secs < 60.0;
    let detail = checks
        .iter()
        .map(|(n, (e, k))| format!("{n} {e:.2e} ({k} kinks redrawn)"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("max rel err: {detail}; {secs:.1}s"))
}

// Loss identities

fn loss_identities() -> Verdict {
    let mut rng = rng_from_seed(21);
    let groups: Vec<u64> = (0..12).map(|i| i / 2).collect();
    let uniform = PairBatch::from_groups(&groups, Matrix::from_vec(12, 12, vec![0.5; 144]).unwrap()).unwrap();
    let ln2_err = (relation_loss(&uniform) - std::f64::consts::LN_2).abs();

    let scores = Matrix::from_vec(12, 12, (0..144).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
    let plain = PairBatch::from_groups(&groups, scores).unwrap();
    let weighted = plain.clone().with_weights(Matrix::zeros(12, 12)).unwrap();
    let bitwise = relation_loss(&plain).to_bits() == intervention_relation_loss(&weighted).unwrap().to_bits();

    let mut worst_sum: f64 = 0.0;
    for i in 0..10_000 {
        let y = if i % 2 == 0 { rng.random_range(0..2) as f64 } else { rng.random::<f64>() };
        let w = rng.random::<f64>();
        let (cp, cn) = pair_coefficients(y, w);
        worst_sum = worst_sum.max((cp + cn - 1.0).abs());
    }
    verdict(
        ln2_err <= 1e-9 && bitwise && worst_sum <= 1e-12,
        format!("|L-ln2| {ln2_err:.1e}, w=0 bitwise equal {bitwise}, max |c+ + c- - 1| {worst_sum:.1e}"),
    )
}

// Intervention invariants and the linear-head oracle

const SD: usize = 3;
const AD: usize = 1;
const CD: usize = ria_core::CONTEXT_DIM;

/// `ŝ' = s + W_z·z`, with the same `W_z` scaled by `scale`.
fn linear_head(seed: u64, scale: f64) -> (PredictionHead, Matrix) {
    let mut rng = rng_from_seed(seed);
    let mut net = Mlp::zeros(&[SD + AD + CD, SD], Activation::Relu, OutputActivation::Identity).unwrap();
    let mut wz = Matrix::zeros(CD, SD);
    for p in 0..CD {
        for c in 0..SD {
            let v = rng.random_range(-1.0..1.0) * scale;
            wz.set(p, c, v);
            net.weights_mut()[0].set(SD + AD + p, c, v);
        }
    }
    (PredictionHead::from_net(net, SD, AD, CD).unwrap(), wz)
}

fn random_mediators(n: usize, rng: &mut SimRng) -> Vec<Mediator> {
    (0..n)
        .map(|_| Mediator {
            state: (0..SD).map(|_| rng.random_range(-2.0..2.0)).collect(),
            action: vec![rng.random_range(-2.0..2.0)],
        })
        .collect()
}

fn random_contexts(n: usize, rng: &mut SimRng) -> Matrix {
    Matrix::from_vec(n, CD, (0..n * CD).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn intervention_invariants() -> Verdict {
    let mut rng = rng_from_seed(31);
    let norm = Normalizer::identity(SD, AD);
    let head = PredictionHead::new(SD, AD, CD, &[32, 32, 32], &mut rng).unwrap();
    let z = random_contexts(8, &mut rng);
    let meds = random_mediators(16, &mut rng);

    let mut self_zero = true;
    for i in 0..z.rows() {
        for m in &meds {
            let cde = controlled_direct_effect(&head, &norm, &m.state, &m.action, z.row(i), z.row(i)).unwrap();
            self_zero &= cde.iter().all(|&v| v == 0.0);
        }
        self_zero &= average_cde(&head, &norm, &meds, z.row(i), z.row(i)).unwrap() == 0.0;
    }

    let mut asym: f64 = 0.0;
    for i in 0..z.rows() {
        for j in 0..z.rows() {
            let a = average_cde(&head, &norm, &meds, z.row(i), z.row(j)).unwrap();
            let b = average_cde(&head, &norm, &meds, z.row(j), z.row(i)).unwrap();
            asym = asym.max((a - b).abs());
        }
    }

    let cfg = CdeConfig::with_beta(1.0);
    let sim = similarity_matrix(&head, &norm, &z, &meds, &cfg).unwrap();
    let in_range = sim.w.data().iter().all(|&v| v > 0.0 && v <= 1.0);

    let scale = off_diagonal_std(&sim.d);
    let beta = sim.d.get(0, 1) / scale;
    let at_beta = similarity_from_distances(&sim.d, &CdeConfig::with_beta(beta)).get(0, 1);
    let e1_err = (at_beta - (-1.0f64).exp()).abs();

    let (base, _) = linear_head(32, 1.0);
    let w0 = similarity_matrix(&base, &norm, &z, &meds, &cfg).unwrap().w;
    let mut scale_dw: f64 = 0.0;
    for c in [0.1, 10.0] {
        let (scaled, _) = linear_head(32, c);
        let w = similarity_matrix(&scaled, &norm, &z, &meds, &cfg).unwrap().w;
        for (a, b) in w.data().iter().zip(w0.data()) {
            scale_dw = scale_dw.max((a - b).abs());
        }
    }
    verdict(
        self_zero && asym <= 1e-12 && in_range && e1_err <= 1e-9 && scale_dw < 1e-9,
        format!(
            "CDE(z,z)=0 {self_zero}, max asym {asym:.1e}, w in (0,1] {in_range}, |w-e^-1| {e1_err:.1e}, max |dw| under scale {scale_dw:.1e}"
        ),
    )
}

fn linear_oracle() -> Verdict {
    let mut rng = rng_from_seed(41);
    let norm = Normalizer::identity(SD, AD);
    let (head, wz) = linear_head(42, 1.0);
    let meds = random_mediators(32, &mut rng);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z = random_contexts(2, &mut rng);
        let measured = average_cde(&head, &norm, &meds, z.row(0), z.row(1)).unwrap();
        let mut oracle = 0.0;
        for c in 0..SD {
            let e: f64 = (0..CD).map(|p| wz.get(p, c) * (z.get(0, p) - z.get(1, p))).sum();
            oracle += e.abs();
        }
        oracle /= SD as f64;
        worst = worst.max((measured - oracle).abs());
    }
    verdict(worst <= 1e-9, format!("max |ACDE - mean|W_z dz|| over 50 pairs {worst:.1e}"))
}

// Learning sweep

struct RunResult {
    method: Method,
    seed: u64,
    train_secs: f64,
    test_mse: f64,
    mean_return: Option<f64>,
    silhouette: Option<f64>,
    ratio: Option<f64>,
    label_reads: usize,
}

fn run_one(method: Method, seed: u64, family: &EnvFamily, corners: &[EnvParams]) -> Result<RunResult, String> {
    let cfg = TrainConfig::desk(FamilyKind::Pendulum, method, seed);
    let start = Instant::now();
    let out = train_run(cfg.clone(), |_, _| Ok(())).map_err(|e| format!("{method} seed {seed}: {e}"))?;
    let train_secs = start.elapsed().as_secs_f64();
    let prediction = evaluate_prediction(&out.model, family, PREDICTION_TRANSITIONS, EVAL_SEED).map_err(|e| e.to_string())?;
    let mean_ret = if matches!(method, Method::ContextFree | Method::VanillaContext | Method::RiaFull) {
        let r = evaluate_returns(&out.model, &family.test_params, 1, &cfg.cem, EPISODE_LEN, EVAL_SEED)
            .map_err(|e| e.to_string())?;
        Some(mean_return(&r))
    } else {
        None
    };
    let (sil, ratio) = if method.uses_context() {
        let set = collect_contexts(&out.model, corners, CONTEXTS_PER_ENV, cfg.cde.mediator_batch, EPISODE_LEN, EVAL_SEED)
            .map_err(|e| e.to_string())?;
        let (m, _) = cluster_metrics(&out.model, &set, &cfg.cde).map_err(|e| e.to_string())?;
        (m.silhouette, m.intra_inter_w_ratio)
    } else {
        (None, None)
    };
    Ok(RunResult {
        method,
        seed,
        train_secs,
        test_mse: prediction.test_mse,
        mean_return: mean_ret,
        silhouette: sil,
        ratio,
        label_reads: out.buffer.label_reads(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

struct Sweep {
    runs: Vec<RunResult>,
    errors: Vec<String>,
    random_return: f64,
}

impl Sweep {
    fn mean(&self, method: Method, f: impl Fn(&RunResult) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.method == method).filter_map(f).collect();
        (v.len() == SEEDS.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn sweep() -> Sweep {
    let family = EnvFamily::pendulum();
    let corners: Vec<EnvParams> = family.corner_indices().iter().map(|&i| family.train_params[i]).collect();
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for &seed in &SEEDS {
        for method in Method::ALL {
            let start = Instant::now();
            match run_one(method, seed, &family, &corners) {
                Ok(r) => {
                    println!(
                        "  run {:<15} seed {} train {:>5.1}s total {:>5.1}s | test_mse {:.4} return {} silhouette {} ratio {}",
                        r.method.name(),
                        r.seed,
                        r.train_secs,
                        start.elapsed().as_secs_f64(),
                        r.test_mse,
                        fmt_opt(r.mean_return),
                        fmt_opt(r.silhouette),
                        fmt_opt(r.ratio)
                    );
                    runs.push(r);
                }
                Err(e) => {
                    println!("  run {} seed {seed} failed: {e}", method.name());
                    errors.push(e);
                }
            }
        }
    }
    let random = random_policy_returns(&family.test_params, 1, EPISODE_LEN, EVAL_SEED);
    Sweep {
        runs,
        errors,
        random_return: mean_return(&random),
    }
}

fn generalization(s: &Sweep) -> Verdict {
    let ret = |m| s.mean(m, |r| r.mean_return);
    let (Some(cf), Some(van), Some(ria)) = (ret(Method::ContextFree), ret(Method::VanillaContext), ret(Method::RiaFull))
    else {
        return verdict(false, "missing runs");
    };
    let needed = 0.1 * (cf - s.random_return);
    verdict(
        ria - cf >= needed && ria >= van,
        format!(
            "mean return ria_full {ria:.1}, vanilla_context {van:.1}, context_free {cf:.1}, random {:.1}; ria - cf = {:.1} (need >= {needed:.1})",
            s.random_return,
            ria - cf
        ),
    )
}

fn prediction_error(s: &Sweep) -> Verdict {
    let mse = |m| s.mean(m, |r| Some(r.test_mse));
    let (Some(ria), Some(van)) = (mse(Method::RiaFull), mse(Method::VanillaContext)) else {
        return verdict(false, "missing runs");
    };
    verdict(ria < van, format!("mean test MSE ria_full {ria:.4}, vanilla_context {van:.4}"))
}

fn clustering(s: &Sweep) -> Verdict {
    let sil = |m| s.mean(m, |r| r.silhouette);
    let (Some(ria), Some(van), Some(ratio)) =
        (sil(Method::RiaFull), sil(Method::VanillaContext), s.mean(Method::RiaFull, |r| r.ratio))
    else {
        return verdict(false, "missing runs");
    };
    verdict(
        ria > van && ratio > 1.0,
        format!("mean silhouette ria_full {ria:.4}, vanilla_context {van:.4}; ria_full w ratio {ratio:.4}"),
    )
}

fn sandwich(s: &Sweep) -> Verdict {
    let sil = |m| s.mean(m, |r| r.silhouette);
    let (Some(tl), Some(ria), Some(ro)) = (sil(Method::TrueLabel), sil(Method::RiaFull), sil(Method::RelationOnly)) else {
        return verdict(false, "missing runs");
    };
    const TIE: f64 = 0.02;
    verdict(
        tl >= ria - TIE && ria >= ro - TIE,
        format!("mean silhouette true_label {tl:.4}, ria_full {ria:.4}, relation_only {ro:.4}"),
    )
}

fn determinism_and_labels(s: &Sweep) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut train = TrainConfig::desk(FamilyKind::Pendulum, Method::RiaFull, 7);
    train.epochs = 2;
    train.grad_steps_per_epoch = 20;
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        train_to_dir(&RunConfig {
            train: train.clone(),
            out_dir: out_dir.clone(),
        })
        .unwrap();
        csvs.push(fs::read(out_dir.join("metrics.csv")).unwrap());
    }
    let identical = csvs[0] == csvs[1];
    let leaks: Vec<String> = s.errors.iter().filter(|e| e.contains("label")).cloned().collect();
    let unsupervised_reads: usize = s.runs.iter().filter(|r| !r.method.uses_env_labels()).map(|r| r.label_reads).sum();
    let complete = s.runs.len() == SEEDS.len() * Method::ALL.len();
    verdict(
        identical && leaks.is_empty() && unsupervised_reads == 0 && complete,
        format!(
            "metrics.csv identical {identical}; {} of {} runs completed, label reads by unsupervised runs {unsupervised_reads}, leaks {}",
            s.runs.len(),
            SEEDS.len() * Method::ALL.len(),
            leaks.len()
        ),
    )
}

fn report(index: usize, name: &str, v: &Verdict) -> bool {
    println!("{} {index}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut passed = vec![
        report(1, "gradient fidelity", &gradient_fidelity()),
        report(2, "loss identities", &loss_identities()),
        report(3, "intervention invariants", &intervention_invariants()),
        report(4, "linear-head oracle", &linear_oracle()),
    ];
    println!("learning sweep: {} methods x {} seeds, desk profile, pendulum", Method::ALL.len(), SEEDS.len());
    let s = sweep();
    passed.push(report(5, "pendulum generalization", &generalization(&s)));
    passed.push(report(6, "prediction error", &prediction_error(&s)));
    passed.push(report(7, "context clustering", &clustering(&s)));
    passed.push(report(8, "true-label sandwich", &sandwich(&s)));
    passed.push(report(9, "determinism and label isolation", &determinism_and_labels(&s)));
    let failed = passed.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
