//! Command implementations behind the `rtcd` binary.
//!
//! Every command writes a resolved config snapshot plus its numeric
//! artifacts into the output directory. Artifacts never contain timings, so
//! repeated runs with the same seed, config and worker count are
//! byte-identical; wall-clock time goes to stderr only.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcd_core::cmaes::{minimize, CmaesOptions, SearchSpace, TraceRow, Variable};
use rtcd_core::codesign::{
    current_values, derive_seed, design_model, rtc_optimize, rtcd_optimize, CodesignResult, Hyperparameters,
    PipelineError, PipelineOutput, VERIFICATION_STREAM,
};
use rtcd_core::dirtran::{optimize_trajectory, NominalTrajectory};
use rtcd_core::dynamics::SystemModel;
use rtcd_core::funnel::{funnel_volume, verify_funnel, Funnel, VerificationReport};
use rtcd_core::io::{self, IoError};
use rtcd_core::tvlqr::{solve_dre, GainSchedule};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

/// Boundary points per projected ellipse in `ellipses.csv`.
const ELLIPSE_POINTS: usize = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("certification failed: {0}")]
    Certification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Certification(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Solver(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Trajopt,
    Tvlqr,
    Funnel,
    Verify,
    Rtc,
    Rtcd,
    BenchCmaes,
}

/// Parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub verify: bool,
    pub trajectory: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub funnel: Option<PathBuf>,
}

impl Invocation {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            config: None,
            seed: None,
            workers: None,
            out: None,
            verify: false,
            trajectory: None,
            schedule: None,
            funnel: None,
        }
    }
}

/// Loads the config and applies command-line overrides.
fn load_config(inv: &Invocation) -> Result<RunConfig, CliError> {
    let path = inv.config.as_deref().ok_or_else(|| ConfigError::Invalid {
        key: "--config",
        reason: "this command needs a configuration file".into(),
    })?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = inv.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = inv.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &inv.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    Ok(io::write_file(&dir.join(name), contents.as_ref())?)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(IoError::from)?;
    text.push('\n');
    write(dir, name, text)
}

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    eprintln!("{label}: {:.2?}", t.elapsed());
    out
}

/// Runs one command; the returned text is the human-readable summary.
pub fn run(inv: &Invocation) -> Result<String, CliError> {
    if inv.command == Command::BenchCmaes {
        let seed = inv.seed.unwrap_or(1);
        let out = inv.out.clone().unwrap_or_else(|| PathBuf::from("runs/bench-cmaes"));
        return bench_cmaes(seed, &out);
    }
    let cfg = load_config(inv)?;
    write(&cfg.output, "config.toml", cfg.to_toml())?;
    match inv.command {
        Command::Trajopt => cmd_trajopt(&cfg),
        Command::Tvlqr => cmd_tvlqr(&cfg, inv),
        Command::Funnel => cmd_funnel(&cfg, inv),
        Command::Verify => cmd_verify(&cfg, inv),
        Command::Rtc => cmd_codesign(&cfg, false),
        Command::Rtcd => cmd_codesign(&cfg, true),
        Command::BenchCmaes => unreachable!(),
    }
}

fn solve_trajectory(cfg: &RunConfig) -> Result<NominalTrajectory, CliError> {
    let pipeline = cfg.objective_pipeline();
    let setup = pipeline.setup_for(&cfg.model, &cfg.initial_hyperparameters());
    let (traj, report) = timed("trajectory optimization", || {
        optimize_trajectory(&setup, &cfg.model, &cfg.solver)
    })
    .map_err(|e| CliError::Solver(e.to_string()))?;
    write(&cfg.output, "trajectory.csv", io::trajectory_to_csv(&traj)?)?;
    write_json(&cfg.output, "solve_report.json", &report)?;
    Ok(traj)
}

fn trajectory_input(cfg: &RunConfig, inv: &Invocation) -> Result<NominalTrajectory, CliError> {
    match &inv.trajectory {
        Some(path) => Ok(io::trajectory_from_csv(&io::read_file(path)?, &cfg.model)?),
        None => solve_trajectory(cfg),
    }
}

fn schedule_input(cfg: &RunConfig, inv: &Invocation, traj: &NominalTrajectory) -> Result<GainSchedule, CliError> {
    let sched = match &inv.schedule {
        Some(path) => io::schedule_from_json(&io::read_file(path)?)?,
        None => {
            let s =
                solve_dre(traj, &cfg.controller_costs(), &cfg.model).map_err(|e| CliError::Solver(e.to_string()))?;
            write(&cfg.output, "schedule.json", io::schedule_to_json(&s)?)?;
            s
        }
    };
    if sched.times != traj.times {
        return Err(ConfigError::Invalid {
            key: "--schedule",
            reason: "knot times differ from the trajectory".into(),
        }
        .into());
    }
    Ok(sched)
}

fn cmd_trajopt(cfg: &RunConfig) -> Result<String, CliError> {
    let traj = solve_trajectory(cfg)?;
    Ok(format!(
        "{} swing-up: {} knots, max defect {:.3e}\n",
        cfg.model.name(),
        traj.len(),
        traj.defect_norm
    ))
}

fn cmd_tvlqr(cfg: &RunConfig, inv: &Invocation) -> Result<String, CliError> {
    let traj = trajectory_input(cfg, inv)?;
    let sched = solve_dre(&traj, &cfg.controller_costs(), &cfg.model).map_err(|e| CliError::Solver(e.to_string()))?;
    write(&cfg.output, "schedule.json", io::schedule_to_json(&sched)?)?;
    Ok(format!(
        "gain schedule: {} knots, {} Riccati substeps per interval\n",
        sched.len(),
        sched.substeps
    ))
}

fn verification(
    cfg: &RunConfig,
    model: &SystemModel,
    funnel: &Funnel,
    traj: &NominalTrajectory,
    sched: &GainSchedule,
) -> Result<VerificationReport, CliError> {
    let per_knot = cfg.certification.verification_per_knot(funnel.len());
    let report = timed("verification", || {
        verify_funnel(
            model,
            funnel,
            traj,
            sched,
            per_knot,
            cfg.funnel.rollout_substeps,
            derive_seed(cfg.seed, VERIFICATION_STREAM),
        )
    })
    .map_err(|e| CliError::Solver(e.to_string()))?;
    write_json(&cfg.output, "verification.json", &report)?;
    Ok(report)
}

fn check_certificate(cfg: &RunConfig, report: &VerificationReport) -> Result<(), CliError> {
    if report.overall_success_rate < cfg.certification.min_success_rate {
        return Err(CliError::Certification(format!(
            "verification success rate {:.4} below {:.4}",
            report.overall_success_rate, cfg.certification.min_success_rate
        )));
    }
    Ok(())
}

fn write_funnel(cfg: &RunConfig, funnel: &Funnel) -> Result<(), CliError> {
    write(&cfg.output, "funnel.json", io::funnel_to_json(funnel)?)?;
    write(
        &cfg.output,
        "ellipses.csv",
        io::ellipses_to_csv(funnel, ELLIPSE_POINTS)?,
    )
}

fn cmd_funnel(cfg: &RunConfig, inv: &Invocation) -> Result<String, CliError> {
    let traj = trajectory_input(cfg, inv)?;
    let sched = schedule_input(cfg, inv, &traj)?;
    let pipeline = cfg.certification_pipeline();
    let (_, funnel, report) = timed("funnel estimation", || {
        pipeline.region_of_attraction(&cfg.model, &cfg.initial_hyperparameters(), &traj, &sched, cfg.seed)
    })?;
    write_funnel(cfg, &funnel)?;
    write_json(&cfg.output, "estimation.json", &report)?;
    let mut summary = format!(
        "funnel: {} knots, volume {:.6e}, {} falsifications in {} simulations\n",
        funnel.len(),
        funnel_volume(&funnel),
        report.falsifications.iter().sum::<usize>(),
        report.simulations
    );
    if inv.verify {
        let v = verification(cfg, &cfg.model, &funnel, &traj, &sched)?;
        summary += &format!("verification success rate {:.4}\n", v.overall_success_rate);
        check_certificate(cfg, &v)?;
    }
    Ok(summary)
}

fn cmd_verify(cfg: &RunConfig, inv: &Invocation) -> Result<String, CliError> {
    let path = inv.funnel.as_deref().ok_or_else(|| ConfigError::Invalid {
        key: "--funnel",
        reason: "verify needs a funnel file".into(),
    })?;
    let funnel = io::funnel_from_json(&io::read_file(path)?)?;
    let traj = trajectory_input(cfg, inv)?;
    let sched = schedule_input(cfg, inv, &traj)?;
    if funnel.times != traj.times {
        return Err(ConfigError::Invalid {
            key: "--funnel",
            reason: "knot times differ from the trajectory".into(),
        }
        .into());
    }
    let v = verification(cfg, &cfg.model, &funnel, &traj, &sched)?;
    check_certificate(cfg, &v)?;
    Ok(format!("verification success rate {:.4}\n", v.overall_success_rate))
}

#[derive(Debug, Serialize)]
struct Named {
    name: String,
    value: f64,
}

fn named(space: &SearchSpace, values: &[f64]) -> Vec<Named> {
    space
        .variables
        .iter()
        .zip(values)
        .map(|(v, &value)| Named {
            name: v.name.clone(),
            value,
        })
        .collect()
}

/// Machine-readable run summary.
#[derive(Debug, Serialize)]
struct CodesignSummary {
    command: &'static str,
    system: &'static str,
    seed: u64,
    workers: usize,
    objective_calls: usize,
    failed_evaluations: usize,
    best_design: Vec<Named>,
    best_hyperparameters: Vec<Named>,
    objective_samples_per_knot: usize,
    initial_volume: f64,
    best_volume: f64,
    volume_ratio: f64,
    certification_samples_per_knot: usize,
    certified_initial_volume: Option<f64>,
    certified_best_volume: f64,
    certified_volume_ratio: Option<f64>,
    verification_success_rate: f64,
}

fn cmd_codesign(cfg: &RunConfig, with_design: bool) -> Result<String, CliError> {
    let hyper_space = cfg.hyper_space();
    let hyper0 = cfg.initial_hyperparameters();
    let h0 = current_values(&hyper_space, &cfg.model, &hyper0).expect("validated at load");
    let objective = cfg.objective_pipeline();
    let result = timed("optimization", || {
        if with_design {
            let design_space = cfg.design_space();
            let d0 = current_values(&design_space, &cfg.model, &hyper0).expect("validated at load");
            rtcd_optimize(
                &objective,
                &cfg.model,
                &design_space,
                &d0,
                &hyper_space,
                &h0,
                cfg.rtcd.outer_budget,
                cfg.rtcd.inner_budget,
                &cfg.cmaes,
                cfg.seed,
                cfg.workers,
            )
        } else {
            rtc_optimize(
                &objective,
                &cfg.model,
                &hyper_space,
                &h0,
                cfg.rtc.budget,
                &cfg.cmaes,
                cfg.seed,
                cfg.workers,
            )
        }
    })
    .map_err(|e| CliError::Solver(e.to_string()))?;

    let dir = &cfg.output;
    write(dir, "trace.csv", io::trace_to_csv(&result.hyper_space, &result.trace)?)?;
    write(
        dir,
        "evaluations.csv",
        io::evaluations_to_csv(&result.design_space, &result.hyper_space, &result.evaluations)?,
    )?;
    if with_design {
        write(
            dir,
            "outer_trace.csv",
            io::trace_to_csv(&result.design_space, &result.outer_trace)?,
        )?;
    }

    let (best, initial) = certify(cfg, &result, &hyper0)?;
    write(dir, "trajectory.csv", io::trajectory_to_csv(&best.trajectory)?)?;
    write(dir, "schedule.json", io::schedule_to_json(&best.schedule)?)?;
    write_funnel(cfg, &best.funnel)?;
    let v = verification(cfg, &best.model, &best.funnel, &best.trajectory, &best.schedule)?;

    let summary = CodesignSummary {
        command: if with_design { "rtcd" } else { "rtc" },
        system: cfg.model.name(),
        seed: cfg.seed,
        workers: cfg.workers,
        objective_calls: result.objective_calls(),
        failed_evaluations: result.evaluations.iter().filter(|e| e.failure.is_some()).count(),
        best_design: named(&result.design_space, &result.best_design),
        best_hyperparameters: named(&result.hyper_space, &result.best_hyperparameters),
        objective_samples_per_knot: cfg.funnel.samples_per_knot,
        initial_volume: result.initial_volume,
        best_volume: result.best_volume,
        volume_ratio: result.volume_ratio(),
        certification_samples_per_knot: cfg.certification.samples_per_knot,
        certified_initial_volume: initial.as_ref().map(|o| o.volume),
        certified_best_volume: best.volume,
        certified_volume_ratio: initial.as_ref().map(|o| best.volume / o.volume),
        verification_success_rate: v.overall_success_rate,
    };
    write_json(dir, "summary.json", &summary)?;
    let text = summary_text(&summary);
    write(dir, "summary.txt", &text)?;
    check_certificate(cfg, &v)?;
    Ok(text)
}

/// Reruns the best and the initial point at the certification budget.
fn certify(
    cfg: &RunConfig,
    result: &CodesignResult,
    hyper0: &Hyperparameters,
) -> Result<(PipelineOutput, Option<PipelineOutput>), CliError> {
    let pipeline = cfg.certification_pipeline();
    let best_model = design_model(&cfg.model, &result.design_space, &result.best_design)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let best_hyper = hyper0
        .clone()
        .with_decision(&result.hyper_space, &result.best_hyperparameters)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let (best, initial) = timed("certification", || {
        pool.install(|| {
            rayon::join(
                || pipeline.run(&best_model, &best_hyper, cfg.seed),
                || pipeline.run(&cfg.model, hyper0, cfg.seed),
            )
        })
    });
    // A failing baseline only loses the certified ratio.
    Ok((best?, initial.ok()))
}

fn summary_text(s: &CodesignSummary) -> String {
    let list = |v: &[Named]| {
        v.iter()
            .map(|n| format!("{} = {:.6}", n.name, n.value))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut t = format!(
        "{} on the {} (seed {}, {} workers)\n",
        s.command, s.system, s.seed, s.workers
    );
    t += &format!(
        "objective calls: {} ({} failed)\n",
        s.objective_calls, s.failed_evaluations
    );
    if !s.best_design.is_empty() {
        t += &format!("best design: {}\n", list(&s.best_design));
    }
    t += &format!("best cost weights: {}\n", list(&s.best_hyperparameters));
    t += &format!(
        "funnel volume at {} samples/knot: initial {:.6e}, best {:.6e}, ratio {:.4}\n",
        s.objective_samples_per_knot, s.initial_volume, s.best_volume, s.volume_ratio
    );
    match (s.certified_initial_volume, s.certified_volume_ratio) {
        (Some(init), Some(ratio)) => {
            t += &format!(
                "funnel volume at {} samples/knot: initial {:.6e}, best {:.6e}, ratio {:.4}\n",
                s.certification_samples_per_knot, init, s.certified_best_volume, ratio
            )
        }
        _ => {
            t += &format!(
                "funnel volume at {} samples/knot: initial failed, best {:.6e}\n",
                s.certification_samples_per_knot, s.certified_best_volume
            )
        }
    }
    t += &format!("verification success rate: {:.4}\n", s.verification_success_rate);
    t
}

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

#[derive(Debug, Serialize)]
struct BenchRow {
    function: &'static str,
    dim: usize,
    budget: usize,
    target: f64,
    evaluations: usize,
    best_fitness: f64,
    passed: bool,
}

/// Sphere (10-D) and Rosenbrock (5-D) runs against their targets.
fn bench_cmaes(seed: u64, out: &Path) -> Result<String, CliError> {
    type Bench = (&'static str, usize, usize, f64, fn(&[f64]) -> f64, f64);
    let benches: [Bench; 2] = [
        ("sphere", 10, 5000, 1e-8, sphere, 2.5),
        ("rosenbrock", 5, 20000, 1e-6, rosenbrock, 0.0),
    ];
    let mut rows = Vec::new();
    let mut text = String::new();
    for (i, (name, dim, budget, target, f, start)) in benches.into_iter().enumerate() {
        let space = SearchSpace {
            variables: (0..dim)
                .map(|j| Variable::linear(&format!("x{}", j + 1), -5.0, 5.0))
                .collect(),
        };
        let x0 = vec![start; dim];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let res = minimize(space.clone(), &x0, budget, &CmaesOptions::default(), &mut rng, |xs| {
            xs.iter().map(|x| f(x)).collect()
        })
        .map_err(|e| CliError::Solver(e.to_string()))?;
        // Evaluations needed to first reach the target.
        let hit = res.trace.iter().find(|r: &&TraceRow| r.best_fitness < target);
        let row = BenchRow {
            function: name,
            dim,
            budget,
            target,
            evaluations: hit.map_or(res.evaluations, |r| r.evaluations),
            best_fitness: res.best_fitness,
            passed: hit.is_some(),
        };
        text += &format!(
            "{name} ({dim}-D): best {:.3e} after {} evaluations — {}\n",
            row.best_fitness,
            row.evaluations,
            if row.passed { "target reached" } else { "target missed" }
        );
        write(out, &format!("trace_{name}.csv"), io::trace_to_csv(&space, &res.trace)?)?;
        rows.push(row);
    }
    write_json(out, "bench.json", &rows)?;
    if let Some(miss) = rows.iter().find(|r| !r.passed) {
        return Err(CliError::Solver(format!(
            "{} did not reach {:e}",
            miss.function, miss.target
        )));
    }
    Ok(text)
}
