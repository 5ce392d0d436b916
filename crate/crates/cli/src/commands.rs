//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use blowup_core::diagnostics::{analyze, propagation_depth, write_classes_csv, BlowupReport};
use blowup_core::discretize::DiscreteSystem;
use blowup_core::stepper::{
    read_csv, read_snapshots_jsonl, run_with, write_csv, write_snapshots_jsonl, FirstNegative,
    LyapunovStats, RunError, Termination, Trajectory,
};
use blowup_core::study::{order_study, parallel_map, OrderRow, OrderStudy, StudyError};

use crate::args::{MeshArgs, OrderArgs, RateArgs, RunArgs, SweepArgs};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{Classify, CliError, Kind, Result};

pub const THREADS_ENV: &str = "BLOWUP_THREADS";

/// Report written next to a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub lyapunov: LyapunovStats,
    #[serde(flatten)]
    pub diagnostics: BlowupReport,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn run_error(e: RunError) -> CliError {
    let kind = match e {
        RunError::InvalidConfig(_) | RunError::InitialData(_) | RunError::InitialLambda { .. } => {
            Kind::Usage
        }
        _ => Kind::Numerical,
    };
    CliError::new(kind, e)
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).classify(Kind::Io, format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).classify(Kind::Io, format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .classify(Kind::Io, format!("writing {}", path.display()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .classify(Kind::Io, format!("writing {}", path.display()))
}

fn finish(w: BufWriter<File>, path: &Path) -> Result<()> {
    w.into_inner()
        .map_err(|e| e.into_error())
        .classify(Kind::Io, format!("writing {}", path.display()))
        .map(|_| ())
}

pub fn cmd_mesh(args: &MeshArgs) -> Result<()> {
    let spec = args.select.spec()?.ok_or_else(|| {
        CliError::usage("choose a builder: --fd-interval, --fd-cube or --fem-interval")
    })?;
    let sys = spec.build()?;
    let mesh = sys.to_mesh_file();
    match &args.output {
        Some(path) => write_json(path, &mesh)?,
        None => {
            let out = io::stdout();
            let mut lock = out.lock();
            serde_json::to_writer_pretty(&mut lock, &mesh).classify(Kind::Io, "writing mesh")?;
            writeln!(lock).classify(Kind::Io, "writing mesh")?;
        }
    }
    Ok(())
}

/// One prepared and executed experiment.
pub struct Executed {
    pub sys: DiscreteSystem,
    pub traj: Trajectory,
    pub report: RunReport,
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Executed> {
    let (sys, u0) = cfg.prepare()?;
    let traj =
        run_with(&sys, &cfg.solver, u0.values(), &cfg.record.options()).map_err(run_error)?;
    let diagnostics = analyze(&sys, &traj);
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        config: cfg.canonical(),
        lyapunov: traj.lyapunov,
        diagnostics,
    };
    Ok(Executed { sys, traj, report })
}

fn write_run_outputs(dir: &Path, ex: &Executed) -> Result<()> {
    let path = dir.join("trajectory.csv");
    let mut w = create_file(&path)?;
    write_csv(&ex.traj, &mut w).classify(Kind::Io, format!("writing {}", path.display()))?;
    finish(w, &path)?;

    let path = dir.join("snapshots.jsonl");
    let mut w = create_file(&path)?;
    write_snapshots_jsonl(&ex.traj, &mut w)
        .classify(Kind::Io, format!("writing {}", path.display()))?;
    finish(w, &path)?;

    let path = dir.join("classes.csv");
    let mut w = create_file(&path)?;
    write_classes_csv(&ex.report.diagnostics.node_classes, &mut w)
        .classify(Kind::Io, format!("writing {}", path.display()))?;
    finish(w, &path)?;

    write_json(&dir.join("report.json"), &ex.report)
}

fn print_summary(r: &BlowupReport) {
    println!("termination      {}", r.termination);
    println!("steps            {}", r.final_index);
    println!("t_final          {}", fmt_f(r.t_final));
    println!("w_final          {}", fmt_f(r.w_final));
    println!("detected         {}", r.detected);
    println!("T_estimate       {}", fmt_opt(r.t_estimate));
    println!("T_tail_bound     {}", fmt_opt(r.t_tail_bound));
    println!("rate_constant    {}", fmt_opt(r.rate_constant));
    println!("rate_target      {}", fmt_f(r.rate_target));
    println!("K                {}", r.k);
    println!("halvings         {}", r.total_halvings);
    for note in &r.notes {
        println!("note             {note}");
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let ex = execute(&cfg)?;
    let dir = cfg.output_dir();
    write_run_outputs(&dir, &ex)?;
    print_summary(&ex.report.diagnostics);
    println!("output           {}", dir.display());
    Ok(())
}

/// Worker count: the flag, then `BLOWUP_THREADS`, then 0 (all cores).
pub fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub n: Option<usize>,
    pub h: Option<f64>,
    pub lambda: f64,
    pub p: f64,
    pub outcome: std::result::Result<BlowupReport, String>,
    pub runtime_s: f64,
}

pub const SUMMARY_HEADER: &str =
    "index,n,h,lambda,p,T_estimate,rate_constant,K,detected,termination,steps,runtime_s,error";

fn summary_line(r: &SweepRow) -> String {
    let (k, _) = propagation_depth(r.p);
    let n = r.n.map(|v| v.to_string()).unwrap_or_default();
    match &r.outcome {
        Ok(rep) => format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3},",
            r.index,
            n,
            fmt_opt(r.h),
            fmt_f(r.lambda),
            fmt_f(r.p),
            fmt_opt(rep.t_estimate),
            fmt_opt(rep.rate_constant),
            k,
            rep.detected,
            rep.termination,
            rep.final_index,
            r.runtime_s
        ),
        Err(msg) => format!(
            "{},{},{},{},{},,,{},,,,{:.3},\"{}\"",
            r.index,
            n,
            fmt_opt(r.h),
            fmt_f(r.lambda),
            fmt_f(r.p),
            k,
            r.runtime_s,
            msg.replace('"', "'")
        ),
    }
}

/// Expands the sweep axes into point configurations, sizes outermost.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let axes = &cfg.sweep;
    if axes.lambda.is_empty() && axes.n.is_empty() {
        return Err(CliError::usage(
            "sweep needs a nonempty lambda or size axis",
        ));
    }
    let meshes = if axes.n.is_empty() {
        vec![cfg.mesh.clone()]
    } else {
        axes.n
            .iter()
            .map(|&n| cfg.mesh.with_size(n))
            .collect::<Result<_>>()?
    };
    let lambdas = if axes.lambda.is_empty() {
        vec![cfg.solver.lambda]
    } else {
        axes.lambda.clone()
    };
    let mut points = Vec::with_capacity(meshes.len() * lambdas.len());
    for mesh in &meshes {
        for &lambda in &lambdas {
            let mut c = cfg.clone();
            c.mesh = mesh.clone();
            c.solver.lambda = lambda;
            c.sweep = Default::default();
            points.push(c);
        }
    }
    for (i, p) in points.iter().enumerate() {
        p.prepare()
            .map_err(|e| CliError::new(e.kind, e.error.context(format!("sweep point {i}"))))?;
    }
    Ok(points)
}

pub fn run_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<SweepRow>> {
    let points = sweep_points(cfg)?;
    let dir = cfg.output_dir();
    let indexed: Vec<(usize, ExperimentConfig)> = points.into_iter().enumerate().collect();
    let rows = parallel_map(&indexed, threads, |(i, pc)| {
        let start = Instant::now();
        let outcome = execute(pc).and_then(|ex| {
            write_json(&dir.join(format!("points/{i:03}/report.json")), &ex.report)?;
            Ok(ex.report.diagnostics)
        });
        SweepRow {
            index: *i,
            n: pc.mesh.size(),
            h: pc.mesh.h(),
            lambda: pc.solver.lambda,
            p: pc.solver.p,
            outcome: outcome.map_err(|e| e.to_string()),
            runtime_s: start.elapsed().as_secs_f64(),
        }
    });
    let path = dir.join("summary.csv");
    let mut w = create_file(&path)?;
    let mut body = String::from(SUMMARY_HEADER);
    body.push('\n');
    for r in &rows {
        body.push_str(&summary_line(r));
        body.push('\n');
    }
    w.write_all(body.as_bytes())
        .classify(Kind::Io, format!("writing {}", path.display()))?;
    finish(w, &path)?;
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(l) = &args.lambdas {
        cfg.sweep.lambda = l.clone();
    }
    if let Some(n) = &args.sizes {
        cfg.sweep.n = n.clone();
    }
    let threads = thread_count(args.threads)?;
    let rows = run_sweep(&cfg, threads)?;
    println!("{SUMMARY_HEADER}");
    for r in &rows {
        println!("{}", summary_line(r));
    }
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(CliError::new(
            Kind::Numerical,
            anyhow::anyhow!("{failed} of {} sweep points failed", rows.len()),
        ));
    }
    Ok(())
}

pub const ORDER_HEADER: &str = "n_interior,h,lambda,max_error,order,steps,oracle_rel_change";

fn order_line(r: &OrderRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.n_interior,
        fmt_f(r.h),
        fmt_f(r.lambda),
        fmt_f(r.max_error),
        fmt_opt(r.order),
        r.steps,
        fmt_f(r.oracle_rel_change)
    )
}

pub fn run_order(cfg: &ExperimentConfig) -> Result<Vec<OrderRow>> {
    let study = OrderStudy {
        ladder: cfg.order.ladder.clone(),
        profile: cfg.profile.clone(),
        solver: cfg.solver,
        t_end: cfg.order.t_end,
        oracle_dt_factor: cfg.order.oracle_dt_factor,
    };
    let rows = order_study(&study).map_err(|e| {
        let kind = match &e {
            StudyError::Oracle(_) => Kind::Oracle,
            StudyError::Rejected(_) | StudyError::Discretize(_) => Kind::Usage,
            StudyError::Run(RunError::InvalidConfig(_) | RunError::InitialData(_)) => Kind::Usage,
            StudyError::Run(RunError::InitialLambda { .. }) => Kind::Usage,
            StudyError::Run(_) => Kind::Numerical,
        };
        let hint = match kind {
            Kind::Oracle => "; reduce the oracle substep factor or the end time",
            _ => "",
        };
        CliError::new(
            kind,
            anyhow::Error::new(e).context(format!("order study{hint}")),
        )
    })?;
    let path = cfg.output_dir().join("order.csv");
    let mut w = create_file(&path)?;
    writeln!(w, "{ORDER_HEADER}").classify(Kind::Io, format!("writing {}", path.display()))?;
    for r in &rows {
        writeln!(w, "{}", order_line(r))
            .classify(Kind::Io, format!("writing {}", path.display()))?;
    }
    finish(w, &path)?;
    Ok(rows)
}

pub fn cmd_order(args: &OrderArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(l) = &args.ladder {
        cfg.order.ladder = l.clone();
    }
    if let Some(t) = args.t_end {
        cfg.order.t_end = t;
    }
    if let Some(f) = args.oracle_dt_factor {
        cfg.order.oracle_dt_factor = f;
    }
    let rows = run_order(&cfg)?;
    println!("{ORDER_HEADER}");
    for r in &rows {
        println!("{}", order_line(r));
    }
    Ok(())
}

/// Diagnostics recomputed from the files of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub schema_version: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub diagnostics: BlowupReport,
}

#[derive(Deserialize)]
struct StoredRun {
    config: ExperimentConfig,
    config_hash: String,
    termination: Termination,
    first_negative_phi_index: Option<u64>,
}

pub fn load_trajectory(dir: &Path) -> Result<(DiscreteSystem, Trajectory, String)> {
    let path = dir.join("report.json");
    let text =
        fs::read_to_string(&path).classify(Kind::Io, format!("reading {}", path.display()))?;
    let stored: StoredRun =
        serde_json::from_str(&text).classify(Kind::Usage, format!("parsing {}", path.display()))?;
    let sys = stored.config.mesh.build()?;

    let path = dir.join("trajectory.csv");
    let f = File::open(&path).classify(Kind::Io, format!("reading {}", path.display()))?;
    let scalars =
        read_csv(BufReader::new(f)).classify(Kind::Usage, format!("parsing {}", path.display()))?;
    let path = dir.join("snapshots.jsonl");
    let f = File::open(&path).classify(Kind::Io, format!("reading {}", path.display()))?;
    let snapshots = read_snapshots_jsonl(BufReader::new(f))
        .classify(Kind::Usage, format!("parsing {}", path.display()))?;
    if scalars.is_empty() || snapshots.is_empty() {
        return Err(CliError::usage(format!(
            "{} holds no records",
            dir.display()
        )));
    }
    let first_negative_phi = stored.first_negative_phi_index.map(|j| {
        let t = scalars
            .iter()
            .find(|s| s.j >= j)
            .map(|s| s.t)
            .unwrap_or(f64::NAN);
        FirstNegative { j, t }
    });
    let traj = Trajectory {
        config: stored.config.solver,
        n: sys.n(),
        scalars,
        snapshots,
        termination: stored.termination,
        eta: None,
        total_halvings: 0,
        first_negative_phi,
        lyapunov: LyapunovStats::default(),
    };
    Ok((sys, traj, stored.config_hash))
}

pub fn cmd_rate(args: &RateArgs) -> Result<()> {
    let (sys, traj, config_hash) = load_trajectory(&args.input)?;
    let report = RateReport {
        schema_version: SCHEMA_VERSION,
        config_hash,
        diagnostics: analyze(&sys, &traj),
    };
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| args.input.join("rate.json"));
    write_json(&out, &report)?;
    let r = &report.diagnostics;
    println!("T_estimate       {}", fmt_opt(r.t_estimate));
    println!("rate_constant    {}", fmt_opt(r.rate_constant));
    println!("rate_target      {}", fmt_f(r.rate_target));
    println!("K                {}", r.k);
    for c in &r.node_classes {
        if c.d.is_some_and(|d| d as u32 <= r.k + 1) {
            println!(
                "node {:>5}  d={}  {}",
                c.node,
                c.d.map(|d| d.to_string()).unwrap_or_default(),
                c.class.as_str()
            );
        }
    }
    for note in &r.notes {
        println!("note             {note}");
    }
    Ok(())
}
