//! Artifact formats: trajectory CSV, gain-schedule and funnel JSON (matrices
//! row-major), projection-ellipse CSV and optimizer traces.
//!
//! Numbers are written in Rust's shortest round-trip form, so every format
//! parses back to bit-identical values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmaes::{SearchSpace, TraceRow};
use crate::codesign::EvaluationRecord;
use crate::dirtran::NominalTrajectory;
use crate::dynamics::Dynamics;
use crate::funnel::{projected_ellipse, Funnel, GoalRegion};
use crate::tvlqr::GainSchedule;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

fn format_err(what: &'static str, detail: impl Into<String>) -> IoError {
    IoError::Format {
        what,
        detail: detail.into(),
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let wrap = |source| IoError::File {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(contents))
        .map_err(wrap)
}

pub fn read_file(path: &Path) -> Result<String, IoError> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })?;
    Ok(s)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn parse_num(field: &str) -> Result<f64, IoError> {
    field
        .trim()
        .parse()
        .map_err(|_| format_err("number", format!("`{field}`")))
}

/// `t, x1..xn, u1..up` with a header row.
pub fn trajectory_to_csv(traj: &NominalTrajectory) -> Result<String, IoError> {
    let (n, p) = (traj.state_dim(), traj.input_dim());
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain((1..=p).map(|i| format!("u{i}")))
        .collect();
    w.write_record(&header)?;
    for k in 0..traj.len() {
        let row: Vec<String> = std::iter::once(traj.times[k])
            .chain(traj.states[k].iter().copied())
            .chain(traj.inputs[k].iter().copied())
            .map(num)
            .collect();
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err("trajectory", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses a trajectory CSV; the defect norm is recomputed for `model`.
pub fn trajectory_from_csv(text: &str, model: &dyn Dynamics) -> Result<NominalTrajectory, IoError> {
    let (n, p) = (model.state_dim(), model.input_dim());
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let width = r.headers()?.len();
    if width != 1 + n + p {
        return Err(format_err(
            "trajectory",
            format!("{width} columns, expected {} for the {}-state model", 1 + n + p, n),
        ));
    }
    let mut traj = NominalTrajectory {
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        defect_norm: 0.0,
    };
    for rec in r.records() {
        let vals = rec?.iter().map(parse_num).collect::<Result<Vec<_>, _>>()?;
        traj.times.push(vals[0]);
        traj.states.push(DVector::from_column_slice(&vals[1..=n]));
        traj.inputs.push(DVector::from_column_slice(&vals[1 + n..]));
    }
    if traj.len() < 2 {
        return Err(format_err("trajectory", "needs at least two knots"));
    }
    traj.defect_norm = traj.max_defect(model);
    Ok(traj)
}

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &Rows) -> Result<DMatrix<f64>, IoError> {
    let ncols = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != ncols) {
        return Err(format_err("matrix", "ragged rows"));
    }
    Ok(DMatrix::from_row_iterator(r.len(), ncols, r.iter().flatten().copied()))
}

fn all_rows(ms: &[DMatrix<f64>]) -> Vec<Rows> {
    ms.iter().map(rows).collect()
}

fn all_from_rows(rs: &[Rows]) -> Result<Vec<DMatrix<f64>>, IoError> {
    rs.iter().map(from_rows).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    times: Vec<f64>,
    cost_to_go: Vec<Rows>,
    gains: Vec<Rows>,
    substeps: usize,
    dense_cost_to_go: Vec<Rows>,
    dense_gains: Vec<Rows>,
}

fn pretty<T: Serialize>(value: &T) -> Result<String, IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn schedule_to_json(s: &GainSchedule) -> Result<String, IoError> {
    pretty(&ScheduleFile {
        times: s.times.clone(),
        cost_to_go: all_rows(&s.cost_to_go),
        gains: all_rows(&s.gains),
        substeps: s.substeps,
        dense_cost_to_go: all_rows(&s.dense_cost_to_go),
        dense_gains: all_rows(&s.dense_gains),
    })
}

pub fn schedule_from_json(text: &str) -> Result<GainSchedule, IoError> {
    let f: ScheduleFile = serde_json::from_str(text)?;
    let count = f.times.len();
    if f.cost_to_go.len() != count || f.gains.len() != count {
        return Err(format_err("schedule", "per-knot arrays differ in length"));
    }
    let dense = (count.saturating_sub(1)) * f.substeps + 1;
    if f.dense_cost_to_go.len() != dense || f.dense_gains.len() != dense {
        return Err(format_err("schedule", "dense arrays do not match the substep count"));
    }
    Ok(GainSchedule {
        times: f.times,
        cost_to_go: all_from_rows(&f.cost_to_go)?,
        gains: all_from_rows(&f.gains)?,
        substeps: f.substeps,
        dense_cost_to_go: all_from_rows(&f.dense_cost_to_go)?,
        dense_gains: all_from_rows(&f.dense_gains)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalFile {
    rho: f64,
    cost_to_go: Rows,
    center: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FunnelFile {
    times: Vec<f64>,
    rho: Vec<f64>,
    cost_to_go: Vec<Rows>,
    centers: Vec<Vec<f64>>,
    goal: GoalFile,
    /// Informational; ignored when reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    volume: Option<f64>,
}

pub fn funnel_to_json(f: &Funnel) -> Result<String, IoError> {
    pretty(&FunnelFile {
        times: f.times.clone(),
        rho: f.rho.clone(),
        cost_to_go: all_rows(&f.cost_to_go),
        centers: f.centers.iter().map(|c| c.iter().copied().collect()).collect(),
        goal: GoalFile {
            rho: f.goal.rho,
            cost_to_go: rows(&f.goal.cost_to_go),
            center: f.goal.center.iter().copied().collect(),
        },
        volume: Some(crate::funnel::funnel_volume(f)).filter(|v| v.is_finite()),
    })
}

pub fn funnel_from_json(text: &str) -> Result<Funnel, IoError> {
    let f: FunnelFile = serde_json::from_str(text)?;
    let count = f.times.len();
    if f.rho.len() != count || f.cost_to_go.len() != count || f.centers.len() != count {
        return Err(format_err("funnel", "per-knot arrays differ in length"));
    }
    Ok(Funnel {
        times: f.times,
        rho: f.rho,
        cost_to_go: all_from_rows(&f.cost_to_go)?,
        centers: f.centers.iter().map(|c| DVector::from_column_slice(c)).collect(),
        goal: GoalRegion {
            rho: f.goal.rho,
            cost_to_go: from_rows(&f.goal.cost_to_go)?,
            center: DVector::from_column_slice(&f.goal.center),
        },
    })
}

/// Boundary points of every knot's region projected onto each
/// position/velocity pair `(i, i + n/2)`.
pub fn ellipses_to_csv(f: &Funnel, points: usize) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["knot", "time", "dim_a", "dim_b", "point", "a", "b"])?;
    let half = f.cost_to_go.first().map_or(0, |s| s.nrows() / 2);
    for k in 0..f.len() {
        for i in 0..half {
            for (j, (a, b)) in projected_ellipse(f, k, i, i + half, points).into_iter().enumerate() {
                w.write_record([
                    k.to_string(),
                    num(f.times[k]),
                    i.to_string(),
                    (i + half).to_string(),
                    j.to_string(),
                    num(a),
                    num(b),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| format_err("ellipses", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `generation, evaluations, best_fitness, sigma, mean_<name>…`.
pub fn trace_to_csv(space: &SearchSpace, trace: &[TraceRow]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = ["generation", "evaluations", "best_fitness", "sigma"]
        .iter()
        .map(|s| s.to_string())
        .chain(space.variables.iter().map(|v| format!("mean_{}", v.name)))
        .collect();
    w.write_record(&header)?;
    for row in trace {
        let rec: Vec<String> = [row.generation.to_string(), row.evaluations.to_string()]
            .into_iter()
            .chain([num(row.best_fitness), num(row.sigma)])
            .chain(row.mean.iter().map(|&m| num(m)))
            .collect();
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err("trace", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per objective evaluation, in evaluation order.
pub fn evaluations_to_csv(
    design_space: &SearchSpace,
    hyper_space: &SearchSpace,
    log: &[EvaluationRecord],
) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let design_width = log.first().map_or(0, |r| r.design.len());
    let design_names: Vec<String> = if design_space.variables.len() == design_width {
        design_space.variables.iter().map(|v| v.name.clone()).collect()
    } else {
        (1..=design_width).map(|i| format!("design{i}")).collect()
    };
    let header: Vec<String> = ["outer", "index", "generation", "fitness", "volume", "failure"]
        .iter()
        .map(|s| s.to_string())
        .chain(design_names)
        .chain(hyper_space.variables.iter().map(|v| v.name.clone()))
        .collect();
    w.write_record(&header)?;
    for r in log {
        let rec: Vec<String> = [
            r.outer.to_string(),
            r.index.to_string(),
            r.generation.to_string(),
            num(r.fitness),
            r.volume.map(num).unwrap_or_default(),
            r.failure.clone().unwrap_or_default(),
        ]
        .into_iter()
        .chain(r.design.iter().map(|&v| num(v)))
        .chain(r.hyperparameters.iter().map(|&v| num(v)))
        .collect();
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err("evaluations", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PendulumParams, SystemModel};

    fn sample_trajectory(model: &SystemModel) -> NominalTrajectory {
        let mut traj = NominalTrajectory {
            times: (0..5).map(|k| k as f64 * 0.1).collect(),
            states: (0..5)
                .map(|k| DVector::from_vec(vec![0.1 * k as f64 + 1e-17, -1.0 / 3.0 * k as f64]))
                .collect(),
            inputs: (0..5)
                .map(|k| DVector::from_vec(vec![(k as f64).sin() * 1e-300]))
                .collect(),
            defect_norm: 0.0,
        };
        traj.defect_norm = traj.max_defect(model);
        traj
    }

    #[test]
    fn trajectory_csv_round_trips_bit_exactly() {
        let model = SystemModel::Pendulum(PendulumParams::default());
        let traj = sample_trajectory(&model);
        let text = trajectory_to_csv(&traj).unwrap();
        assert!(text.starts_with("t,x1,x2,u1\n"));
        assert_eq!(trajectory_from_csv(&text, &model).unwrap(), traj);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let model = SystemModel::Pendulum(PendulumParams::default());
        assert!(trajectory_from_csv("t,x1\n0,1\n", &model).is_err());
    }

    #[test]
    fn matrices_are_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(rows(&m), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(from_rows(&rows(&m)).unwrap(), m);
    }

    #[test]
    fn schedule_json_round_trips() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.1, 0.1, 2.0]);
        let k = DMatrix::from_row_slice(1, 2, &[0.7, 1e-12]);
        let times = vec![0.0, 0.06 * 11.0];
        let sched = GainSchedule::from_knots(times, vec![s.clone(), s * 0.1], vec![k.clone(), k * 3.3]);
        let text = schedule_to_json(&sched).unwrap();
        assert_eq!(schedule_from_json(&text).unwrap(), sched);
    }

    #[test]
    fn funnel_json_round_trips() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.1, 0.1, 2.0 / 7.0]);
        let f = Funnel {
            times: vec![0.0, 0.1 + 0.2],
            rho: vec![0.9057456417078243, 1e-9],
            cost_to_go: vec![s.clone(), s.clone() * 1.7],
            centers: vec![
                DVector::from_vec(vec![0.1, -2.5e-7]),
                DVector::from_vec(vec![std::f64::consts::PI, 0.0]),
            ],
            goal: GoalRegion {
                rho: 0.15254825142526504,
                cost_to_go: s,
                center: DVector::from_vec(vec![std::f64::consts::PI, 0.0]),
            },
        };
        assert_eq!(funnel_from_json(&funnel_to_json(&f).unwrap()).unwrap(), f);
    }
}
