//! Run directories: training, evaluation, export and ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use ria_core::env::{EnvFamily, EnvParams};
use ria_core::eval::{cluster_metrics, collect_contexts, evaluate, project_contexts, EvalOptions, EvalReport};
use ria_core::model::WorldModel;
use ria_core::trainer::{train_run, EpochMetrics, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::output::{self, AblationRow, MetricsLog};
use crate::{Result, RunError};

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub model: WorldModel,
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: PathBuf,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(RunError::io(path))
}

/// Trains into `cfg.out_dir`, writing `config.json` before anything else.
pub fn train_to_dir(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.train.validate()?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    output::write_json(&out.join("config.json"), cfg)?;
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    let traj_path = out.join("trajectories.ndjson");
    if traj_path.exists() {
        fs::remove_file(&traj_path).map_err(RunError::io(&traj_path))?;
    }
    let mut log = MetricsLog::create(&out.join("metrics.csv"))?;
    let mut written = 0;
    let mut last = ck_dir.join("epoch_0.json");
    let mut io_error: Option<RunError> = None;
    let outcome = train_run(cfg.train.clone(), |trainer, rows| {
        let mut step = || -> Result<PathBuf> {
            log.append(rows)?;
            let trajs = &trainer.buffer.trajectories()[written..];
            output::append_trajectories(&traj_path, trajs)?;
            let path = ck_dir.join(format!("epoch_{}.json", trainer.epoch()));
            Checkpoint::from_model(&trainer.model, &trainer.config, trainer.epoch()).save(&path)?;
            Ok(path)
        };
        match step() {
            Ok(p) => {
                written = trainer.buffer.len();
                last = p;
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                io_error = Some(e);
                Err(msg)
            }
        }
    });
    let outcome = match (outcome, io_error) {
        (_, Some(e)) => return Err(e),
        (o, None) => o?,
    };
    Ok(RunSummary {
        model: outcome.model,
        metrics: outcome.metrics,
        final_checkpoint: last,
    })
}

/// Which environments' contexts are clustered and projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSet {
    /// Every test environment.
    Test,
    /// The four training environments at the corners of the parameter grid.
    TrainCorners,
}

impl ClusterSet {
    pub fn params(self, family: &EnvFamily) -> Vec<EnvParams> {
        match self {
            ClusterSet::Test => family.test_params.clone(),
            ClusterSet::TrainCorners => family.corner_indices().iter().map(|&i| family.train_params[i]).collect(),
        }
    }
}

/// Writes `report.json`, `pca.csv` and `similarity.csv` under `out`.
pub fn evaluate_to_dir(model: &WorldModel, family: &EnvFamily, opts: &EvalOptions, out: &Path) -> Result<EvalReport> {
    create_dir(out)?;
    let (report, set, sim) = evaluate(model, family, opts)?;
    output::write_json(&out.join("report.json"), &report)?;
    output::write_pca(&out.join("pca.csv"), &report.pca_points)?;
    output::write_similarity(&out.join("similarity.csv"), sim.as_ref(), &set.labels)?;
    Ok(report)
}

/// Writes only `pca.csv` and `similarity.csv`.
pub fn export_to_dir(model: &WorldModel, family: &EnvFamily, opts: &EvalOptions, out: &Path) -> Result<()> {
    create_dir(out)?;
    let set = collect_contexts(
        model,
        &opts.cluster_params,
        opts.contexts_per_env,
        opts.cde.mediator_batch,
        family.episode_length,
        opts.seed,
    )?;
    let (_, sim) = cluster_metrics(model, &set, &opts.cde)?;
    let points = project_contexts(&set)?;
    output::write_pca(&out.join("pca.csv"), &points)?;
    output::write_similarity(&out.join("similarity.csv"), sim.as_ref(), &set.labels)
}

/// One (method, seed) cell of an ablation sweep.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub method: Method,
    pub seed: u64,
    pub report: EvalReport,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains and evaluates every (method, seed) pair, up to `threads` at a time,
/// and writes `ablation.csv`. Rows are ordered by method, then seed.
pub fn ablate(
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    eval: &EvalOptions,
    out: &Path,
    threads: usize,
) -> Result<Vec<AblationCell>> {
    create_dir(out)?;
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let family = EnvFamily::by_kind(base.family);
    let run_one = |&(method, seed): &(Method, u64)| -> Result<AblationCell> {
        let mut train = base.clone();
        train.method = method;
        train.seed = seed;
        let dir = out.join(format!("{method}_seed{seed}"));
        let summary = train_to_dir(&RunConfig {
            train,
            out_dir: dir.clone(),
        })?;
        let report = evaluate_to_dir(&summary.model, &family, eval, &dir.join("eval"))?;
        Ok(AblationCell {
            method,
            seed,
            report,
            metrics: summary.metrics,
        })
    };
    let threads = threads.max(1);
    let mut results: Vec<Option<Result<AblationCell>>> = (0..jobs.len()).map(|_| None).collect();
    for (chunk_jobs, chunk_out) in jobs.chunks(threads).zip(results.chunks_mut(threads)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_jobs.iter().map(|j| s.spawn(|| run_one(j))).collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("ablation worker panicked"));
            }
        });
    }
    let cells = results
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<AblationRow> = cells
        .iter()
        .map(|c| AblationRow::from_report(c.method.name(), c.seed, &c.report))
        .collect();
    output::write_ablation(&out.join("ablation.csv"), &rows)?;
    Ok(cells)
}
