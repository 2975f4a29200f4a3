//! CSV, NDJSON and JSON writers. CSVs carry a header row and use `.` as the
//! decimal separator.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ria_core::env::Trajectory;
use ria_core::eval::{EvalReport, PcaPoint};
use ria_core::intervention::SimilarityMatrix;
use ria_core::trainer::EpochMetrics;
use serde::Serialize;

use crate::{Result, RunError};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(RunError::json(path))?;
    fs::write(path, text + "\n").map_err(RunError::io(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(RunError::io(path))?;
    Ok(csv::Writer::from_writer(f))
}

/// Writer whose header is written explicitly, so empty tables keep it.
fn headed_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(RunError::io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(header)?;
    Ok(w)
}

/// Appends epoch rows to `metrics.csv`, writing the header on creation.
pub struct MetricsLog {
    inner: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = headed_writer(
            path,
            &[
                "epoch",
                "pred_loss",
                "relation_loss",
                "dist_loss",
                "train_mse",
                "test_mse",
                "mean_return_train_envs",
            ],
        )?;
        inner.flush().map_err(RunError::io(path))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, rows: &[EpochMetrics]) -> Result<()> {
        for r in rows {
            self.inner.serialize((
                r.epoch,
                r.pred_loss,
                r.relation_loss,
                r.dist_loss,
                r.train_mse,
                r.test_mse,
                r.mean_return_train_envs,
            ))?;
        }
        self.inner.flush().map_err(RunError::io(&self.path))
    }
}

#[derive(Serialize)]
struct TransitionRecord<'a> {
    trajectory_id: u64,
    env_label: usize,
    t: usize,
    state: &'a [f64],
    action: &'a [f64],
    reward: f64,
}

/// Appends one NDJSON record per transition.
pub fn append_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(RunError::io(path))?;
    let mut w = BufWriter::new(f);
    for traj in trajs {
        let env_label = traj.env_label();
        for t in 0..traj.len() {
            let rec = TransitionRecord {
                trajectory_id: traj.id,
                env_label,
                t,
                state: &traj.states[t],
                action: &traj.actions[t],
                reward: traj.rewards[t],
            };
            serde_json::to_writer(&mut w, &rec).map_err(RunError::json(path))?;
            w.write_all(b"\n").map_err(RunError::io(path))?;
        }
    }
    w.flush().map_err(RunError::io(path))
}

pub fn write_pca(path: &Path, points: &[PcaPoint]) -> Result<()> {
    let mut w = headed_writer(path, &["x", "y", "env_label"])?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(RunError::io(path))
}

#[derive(Serialize)]
struct SimilarityRow {
    i: usize,
    j: usize,
    d: f64,
    w: f64,
    same_env: bool,
}

/// Unordered pairs `i < j` of the similarity matrix.
pub fn write_similarity(path: &Path, sim: Option<&SimilarityMatrix>, labels: &[usize]) -> Result<()> {
    let mut w = headed_writer(path, &["i", "j", "d", "w", "same_env"])?;
    if let Some(s) = sim {
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                w.serialize(SimilarityRow {
                    i,
                    j,
                    d: s.d.get(i, j),
                    w: s.w.get(i, j),
                    same_env: labels[i] == labels[j],
                })?;
            }
        }
    }
    w.flush().map_err(RunError::io(path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: String,
    pub seed: u64,
    pub test_mse: f64,
    pub mean_return: Option<f64>,
    pub silhouette: Option<f64>,
    pub intra_inter_w_ratio: Option<f64>,
}

impl AblationRow {
    pub fn from_report(method: &str, seed: u64, report: &EvalReport) -> Self {
        Self {
            method: method.to_string(),
            seed,
            test_mse: report.prediction.test_mse,
            mean_return: report.mean_return,
            silhouette: report.clusters.silhouette,
            intra_inter_w_ratio: report.clusters.intra_inter_w_ratio,
        }
    }
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(RunError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ria_core::nn::Matrix;

    #[test]
    fn similarity_lists_unordered_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let d = Matrix::from_rows(&[[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]]).unwrap();
        let w = d.clone();
        write_similarity(&p, Some(&SimilarityMatrix { d, w }), &[0, 0, 1]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["i,j,d,w,same_env", "0,1,1.0,1.0,true", "0,2,2.0,2.0,false", "1,2,3.0,3.0,false"]);
    }

    #[test]
    fn absent_values_are_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let row = AblationRow {
            method: "ria_full".into(),
            seed: 1,
            test_mse: 0.5,
            mean_return: None,
            silhouette: Some(0.25),
            intra_inter_w_ratio: None,
        };
        write_ablation(&p, &[row]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "method,seed,test_mse,mean_return,silhouette,intra_inter_w_ratio\nria_full,1,0.5,,0.25,\n"
        );
    }
}
