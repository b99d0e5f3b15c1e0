use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use riskmpc::{
    build_problem, certainty_equivalent_plan, evaluate_policy_mc, leqr_kkt_solve, risk_averse_ccp,
    risk_seeking_plan, simulate_closed_loop, BatteryParams, CcpResult, ControlProblem,
    PolicyEvaluation, PolicyMode, PrescientSolution, ProblemConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, PolicySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_BREAKDOWN: i32 = 4;

#[derive(Debug)]
pub enum RunError {
    /// The problem data could not be turned into a valid problem.
    Config(String),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Io(e.into())
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Io(_) => EXIT_IO,
        }
    }
}

/// A failure that did not stop the run.
#[derive(Debug, Clone, Serialize)]
pub struct Issue {
    pub stage: String,
    pub breakdown: bool,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub issues: Vec<Issue>,
}

impl RunReport {
    pub fn breakdown(&self) -> bool {
        self.issues.iter().any(|i| i.breakdown)
    }

    pub fn exit_code(&self) -> i32 {
        if self.breakdown() {
            EXIT_BREAKDOWN
        } else if !self.issues.is_empty() {
            EXIT_SOLVER
        } else {
            EXIT_OK
        }
    }

    fn issue(&mut self, stage: impl Into<String>, err: &riskmpc::Error) {
        self.issues.push(Issue {
            stage: stage.into(),
            breakdown: err.is_breakdown(),
            message: err.to_string(),
        });
    }
}

/// Column names for states, inputs and dynamics duals.
struct Labels {
    x: Vec<String>,
    u: Vec<String>,
    lambda: Vec<String>,
}

impl Labels {
    fn new(cfg: &ProblemConfig, n: usize, m: usize) -> Self {
        match cfg {
            ProblemConfig::Battery(_) => Labels {
                x: vec!["q".into(), "p_load".into()],
                u: vec!["p_batt".into(), "p_grid".into()],
                lambda: vec!["lambda_q".into(), "lambda_load".into()],
            },
            _ => Labels {
                x: (0..n).map(|i| format!("x{i}")).collect(),
                u: (0..m).map(|j| format!("u{j}")).collect(),
                lambda: (0..n).map(|i| format!("lambda{i}")).collect(),
            },
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Open-loop plan at `t = 0` for one policy.
struct PolicyPlan {
    plan: Option<PrescientSolution>,
    ccp: Option<CcpResult>,
}

fn plan_policy(
    problem: &ControlProblem,
    spec: &PolicySpec,
    cfg: &ExperimentConfig,
    report: &mut RunReport,
) -> PolicyPlan {
    let opts = &cfg.planner;
    let stage = format!("plan {}", spec.label());
    match spec.mode {
        PolicyMode::Neutral => match certainty_equivalent_plan(problem, &opts.solver) {
            Ok(p) => PolicyPlan {
                plan: Some(p),
                ccp: None,
            },
            Err(e) => {
                report.issue(stage, &e);
                PolicyPlan {
                    plan: None,
                    ccp: None,
                }
            }
        },
        PolicyMode::Averse => match risk_averse_ccp(problem, spec.gamma, &opts.ccp, &opts.solver) {
            Ok(r) => {
                if let Err(e) = r.ensure_no_breakdown() {
                    report.issue(stage, &e);
                    return PolicyPlan {
                        plan: None,
                        ccp: Some(r),
                    };
                }
                PolicyPlan {
                    plan: Some(r.final_plan.clone()),
                    ccp: Some(r),
                }
            }
            Err(e) => {
                report.issue(stage, &e);
                PolicyPlan {
                    plan: None,
                    ccp: None,
                }
            }
        },
        PolicyMode::Seeking => {
            let res = risk_seeking_plan(problem, spec.gamma, &opts.solver)
                .and_then(|r| r.ensure_no_breakdown().map(|_| r));
            match res {
                Ok(r) => PolicyPlan {
                    plan: Some(r.plan),
                    ccp: None,
                },
                Err(e) => {
                    report.issue(stage, &e);
                    PolicyPlan {
                        plan: None,
                        ccp: None,
                    }
                }
            }
        }
    }
}

/// Per-period noise means as vectors.
pub fn mean_path(problem: &ControlProblem) -> Vec<DVector<f64>> {
    let n = problem.state_dim();
    problem
        .noise_mean()
        .chunks(n)
        .map(DVector::from_column_slice)
        .collect()
}

struct Trajectory {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    lambda: Option<Vec<DVector<f64>>>,
}

fn write_trajectories(
    path: &Path,
    cfg: &ExperimentConfig,
    problem: &ControlProblem,
    columns: &[(String, Option<Trajectory>)],
) -> Result<(), RunError> {
    let n = problem.state_dim();
    let m = problem.input_dim();
    let horizon = problem.horizon();
    let labels = Labels::new(&cfg.problem, n, m);
    let battery: Option<(&BatteryParams, Vec<f64>, Vec<f64>)> = match &cfg.problem {
        ProblemConfig::Battery(b) => Some((
            b,
            b.prices(),
            b.baseline_values().map_err(|e| RunError::Config(e.to_string()))?,
        )),
        _ => None,
    };

    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    if battery.is_some() {
        header.extend(["hour", "price", "p_base"].map(String::from));
    }
    for (name, _) in columns {
        for l in labels.x.iter().chain(&labels.u).chain(&labels.lambda) {
            header.push(format!("{name}_{l}"));
        }
    }
    wtr.write_record(&header)?;
    for t in 0..=horizon {
        let mut row = vec![t.to_string()];
        if let Some((b, prices, base)) = &battery {
            row.push(num(t as f64 * b.step_hours));
            row.push(prices.get(t).map_or(String::new(), |v| num(*v)));
            row.push(base.get(t).map_or(String::new(), |v| num(*v)));
        }
        for (_, traj) in columns {
            match traj {
                Some(tr) => {
                    row.extend(tr.x[t].iter().map(|v| num(*v)));
                    match tr.u.get(t) {
                        Some(u) => row.extend(u.iter().map(|v| num(*v))),
                        None => row.extend(std::iter::repeat(String::new()).take(m)),
                    }
                    match tr.lambda.as_ref().and_then(|l| l.get(t)) {
                        Some(l) => row.extend(l.iter().map(|v| num(*v))),
                        None => row.extend(std::iter::repeat(String::new()).take(n)),
                    }
                }
                None => row.extend(std::iter::repeat(String::new()).take(2 * n + m)),
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row of `bounds.csv`.
struct BoundRow {
    gamma: f64,
    method: &'static str,
    bound: Option<f64>,
    iterations: usize,
    status: String,
    leqr: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

/// Runs the configured experiment and writes every artifact into the output
/// directory. Planner and simulation failures are recorded in the report and
/// in `metadata.json` instead of aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let problem = build_problem(&cfg.problem).map_err(|e| RunError::Config(e.to_string()))?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut report = RunReport {
        output_dir: dir.clone(),
        ..Default::default()
    };
    let opts = &cfg.planner;

    // Open-loop plans and closed-loop runs under the mean outcome.
    let mean = mean_path(&problem);
    let mut columns: Vec<(String, Option<Trajectory>)> = Vec::new();
    let mut ccp_runs: Vec<CcpResult> = Vec::new();
    for spec in &cfg.policies {
        let label = spec.label();
        let planned = plan_policy(&problem, spec, cfg, &mut report);
        columns.push((
            format!("{label}_plan"),
            planned.plan.map(|p| Trajectory {
                x: p.x_traj,
                u: p.u_traj,
                lambda: Some(p.lambda),
            }),
        ));
        if let Some(r) = planned.ccp {
            ccp_runs.push(r);
        }
        let cl = match simulate_closed_loop(&problem, spec.gamma, spec.mode, &mean, opts) {
            Ok(r) => Some(Trajectory {
                x: r.x_realized,
                u: r.u_applied,
                lambda: None,
            }),
            Err(e) => {
                report.issue(format!("closed loop {label} at mean noise"), &e);
                None
            }
        };
        columns.push((format!("{label}_mean"), cl));
    }
    write_trajectories(&dir.join("trajectories.csv"), cfg, &problem, &columns)?;
    report.files.push("trajectories.csv".into());

    // Bounds.
    let ce = certainty_equivalent_plan(&problem, &opts.solver);
    let ce_value = match &ce {
        Ok(p) => Some(p.value),
        Err(e) => {
            report.issue("certainty-equivalent bound", e);
            None
        }
    };
    let leqr_applicable = riskmpc::LeqrSystem::new(&problem, 0.0).is_ok();
    let mut rows = Vec::new();
    for &g in cfg.bound_gammas() {
        let leqr = if leqr_applicable {
            match leqr_kkt_solve(&problem, g) {
                Ok(s) => Some(s.bound),
                Err(e) if e.is_breakdown() => Some(f64::INFINITY.copysign(g)),
                Err(_) => None,
            }
        } else {
            None
        };
        if g > 0.0 {
            let existing = ccp_runs.iter().find(|r| r.gamma == g).cloned();
            let run = match existing {
                Some(r) => Ok(r),
                None => risk_averse_ccp(&problem, g, &opts.ccp, &opts.solver),
            };
            match run {
                Ok(r) => {
                    if let Err(e) = r.ensure_no_breakdown() {
                        report.issue(format!("ccp bound at gamma {g}"), &e);
                    }
                    let broke = r.ensure_no_breakdown().is_err();
                    rows.push(BoundRow {
                        gamma: g,
                        method: "ccp",
                        bound: (!broke).then_some(r.bound),
                        iterations: r.iterations(),
                        status: serde_json::to_value(r.status)
                            .ok()
                            .and_then(|v| v.as_str().map(String::from))
                            .unwrap_or_default(),
                        leqr,
                    });
                    if !ccp_runs.iter().any(|c| c.gamma == g) {
                        ccp_runs.push(r);
                    }
                }
                Err(e) => {
                    report.issue(format!("ccp bound at gamma {g}"), &e);
                    rows.push(BoundRow {
                        gamma: g,
                        method: "ccp",
                        bound: None,
                        iterations: 0,
                        status: "error".into(),
                        leqr,
                    });
                }
            }
        } else {
            let res = risk_seeking_plan(&problem, g, &opts.solver);
            match res {
                Ok(r) => {
                    if let Err(e) = r.ensure_no_breakdown() {
                        report.issue(format!("seeking bound at gamma {g}"), &e);
                    }
                    let ok = r.ensure_no_breakdown().is_ok();
                    rows.push(BoundRow {
                        gamma: g,
                        method: "seeking",
                        bound: ok.then_some(r.bound),
                        iterations: r.iterations,
                        status: serde_json::to_value(r.status)
                            .ok()
                            .and_then(|v| v.as_str().map(String::from))
                            .unwrap_or_default(),
                        leqr,
                    });
                }
                Err(e) => {
                    report.issue(format!("seeking bound at gamma {g}"), &e);
                    rows.push(BoundRow {
                        gamma: g,
                        method: "seeking",
                        bound: None,
                        iterations: 0,
                        status: "error".into(),
                        leqr,
                    });
                }
            }
        }
    }
    let mut wtr = csv::Writer::from_path(dir.join("bounds.csv"))?;
    wtr.write_record(["gamma", "method", "ce_bound", "bound", "iterations", "status", "leqr_bound"])?;
    for r in &rows {
        wtr.write_record([
            num(r.gamma),
            r.method.to_string(),
            opt(ce_value),
            opt(r.bound),
            r.iterations.to_string(),
            r.status.clone(),
            opt(r.leqr),
        ])?;
    }
    wtr.flush()?;
    report.files.push("bounds.csv".into());

    let mut ccp_gammas: Vec<f64> = Vec::new();
    for r in &ccp_runs {
        if ccp_gammas.contains(&r.gamma) {
            continue;
        }
        ccp_gammas.push(r.gamma);
        let name = format!("ccp_history_{}.csv", r.gamma);
        let mut out = BufWriter::new(File::create(dir.join(&name))?);
        r.write_history_csv(&mut out)?;
        out.flush()?;
        report.files.push(name);
    }

    // Closed-loop Monte Carlo.
    let mut evals: Vec<(String, Option<PolicyEvaluation>)> = Vec::new();
    for spec in &cfg.policies {
        let label = spec.label();
        match evaluate_policy_mc(
            &problem,
            spec.mode,
            spec.gamma,
            &cfg.eval_gammas,
            cfg.n_paths,
            cfg.seed,
            opts,
        ) {
            Ok(ev) => {
                for f in &ev.failures {
                    report.issues.push(Issue {
                        stage: format!("closed loop {label} path {}", f.index),
                        breakdown: f.breakdown,
                        message: f.message.clone(),
                    });
                }
                evals.push((label, Some(ev)));
            }
            Err(e) => {
                report.issue(format!("closed loop {label}"), &e);
                evals.push((label, None));
            }
        }
    }

    let mut wtr = csv::Writer::from_path(dir.join("costs.csv"))?;
    let mut header = vec!["path".to_string(), "seed".to_string()];
    header.extend(evals.iter().map(|(l, _)| l.clone()));
    wtr.write_record(&header)?;
    for i in 0..cfg.n_paths {
        let mut row = vec![i.to_string(), riskmpc::path_seed(cfg.seed, i as u64).to_string()];
        for (_, ev) in &evals {
            row.push(opt(ev.as_ref().and_then(|e| e.path_costs[i])));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    report.files.push("costs.csv".into());

    let mut wtr = csv::Writer::from_path(dir.join("risk_table.csv"))?;
    wtr.write_record([
        "policy",
        "mode",
        "gamma_policy",
        "gamma_eval",
        "value",
        "ci_low",
        "ci_high",
        "n_samples",
        "n_failed",
    ])?;
    for ((label, ev), spec) in evals.iter().zip(&cfg.policies) {
        let Some(ev) = ev else { continue };
        for est in &ev.estimates {
            wtr.write_record([
                label.clone(),
                spec.mode.to_string(),
                num(spec.gamma),
                num(est.gamma),
                num(est.value),
                num(est.ci_low),
                num(est.ci_high),
                est.n_samples.to_string(),
                ev.failures.len().to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    report.files.push("risk_table.csv".into());

    report.files.push("metadata.json".into());
    write_metadata(&dir.join("metadata.json"), cfg, &problem, &report)?;
    Ok(report)
}

fn write_metadata(
    path: &Path,
    cfg: &ExperimentConfig,
    problem: &ControlProblem,
    report: &RunReport,
) -> Result<(), RunError> {
    let meta = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "library_version": riskmpc::VERSION,
        "config": cfg,
        "problem": {
            "horizon": problem.horizon(),
            "state_dim": problem.state_dim(),
            "input_dim": problem.input_dim(),
        },
        "seeds": {
            "seed": cfg.seed,
            "path_seed": "splitmix64 mix of (seed, path index); path i of every policy uses the same noise",
        },
        "files": report.files,
        "partial": !report.issues.is_empty(),
        "issues": report.issues,
        "exit_code": report.exit_code(),
    });
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &meta).map_err(std::io::Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}
