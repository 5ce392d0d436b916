//! Lyapunov functional, blow-up detection and time estimate, rescaled
//! variables, rate constant and blow-up set classification.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::DiscreteSystem;
use crate::stepper::{EtaInfo, Snapshot, Termination, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("blow-up not detected")]
    NotDetected,
    #[error("need at least {needed} usable tail snapshots, found {available}")]
    InsufficientTail { needed: usize, available: usize },
    #[error("trajectory has fewer than two records")]
    TooShort,
    #[error("seed set is empty")]
    EmptySeed,
    #[error("snapshot for step {j} has {got} values, system has {expected} nodes")]
    ShapeMismatch { j: u64, got: usize, expected: usize },
}

/// Tail snapshots entering the rate constant.
pub const RATE_WINDOW: usize = 50;
/// Final snapshots dropped before the rate window.
pub const RATE_SKIP: usize = 5;
/// Relative distance to `C_p` admitted into `B*`.
pub const BSTAR_TOLERANCE: f64 = 0.25;
/// Tail growth factor separating bounded from unbounded nodes.
pub const BOUNDED_GROWTH: f64 = 10.0;
/// RMS misfit (natural-log units) above which a fit is rejected.
pub const FIT_RESIDUAL_MAX: f64 = 0.1;
/// Steps scanned for the smallest `w` increment in the tail bound.
pub const TAIL_BOUND_STEPS: usize = 100;

/// `1/2 <A U, U> - 1/(p+1) sum_k m_k u_k^{p+1}`.
pub fn phi_h(sys: &DiscreteSystem, u: &[f64], p: f64) -> f64 {
    let q = p + 1.0;
    let mut mass_term = 0.0;
    for (m, &x) in sys.mass().iter().zip(u) {
        let xq = if q == 3.0 {
            x * x * x
        } else if q == 4.0 {
            let x2 = x * x;
            x2 * x2
        } else {
            x.powf(q)
        };
        mass_term += m * xq;
    }
    0.5 * sys.stiffness().quadratic_form(u) - mass_term / q
}

/// The functional read with a full `<A U, U>` and squared masses:
/// `<A U, U> - 1/(p+1) sum_k m_k^2 u_k^{p+1}`. For comparison only.
pub fn phi_h_printed(sys: &DiscreteSystem, u: &[f64], p: f64) -> f64 {
    let q = p + 1.0;
    let s: f64 = sys
        .mass()
        .iter()
        .zip(u)
        .map(|(m, x)| m * m * x.powf(q))
        .sum();
    sys.stiffness().quadratic_form(u) - s / q
}

/// `C_p = (1/(p-1))^{1/(p-1)}`.
pub fn rate_target(p: f64) -> f64 {
    (1.0 / (p - 1.0)).powf(1.0 / (p - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub detected: bool,
    /// First step with negative functional, if any.
    pub j0: Option<u64>,
    /// Negative functional on a run that ended steady.
    pub inconsistent: bool,
}

/// Blow-up iff the functional turns negative and the run ended on the
/// `w` threshold or the overflow guard.
/// First step with a negative functional and its time, from the online
/// record when present and the kept scalars otherwise.
fn first_negative(traj: &Trajectory) -> Option<(u64, f64)> {
    match traj.first_negative_phi {
        Some(f) => Some((f.j, f.t)),
        None => traj
            .scalars
            .iter()
            .find(|s| s.phi < 0.0)
            .map(|s| (s.j, s.t)),
    }
}

pub fn detect_blowup(traj: &Trajectory) -> Detection {
    let j0 = first_negative(traj).map(|f| f.0);
    let grows = matches!(
        traj.termination,
        Termination::WThreshold | Termination::OverflowGuard
    );
    Detection {
        detected: j0.is_some() && grows,
        j0,
        inconsistent: j0.is_some() && traj.termination == Termination::Steady,
    }
}

/// Estimated blow-up time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupTime {
    pub estimate: f64,
    /// Conservative bound on `T - t^J`.
    pub tail_bound: f64,
    /// Set when the last `w` increment was not positive.
    pub degenerate: bool,
}

/// `(lambda / delta) w^{1-p} / (p - 1)`: the tail sum of `lambda / w^p` under
/// linear growth of `w` with increment `delta`.
pub fn tail_sum(lambda: f64, w: f64, delta: f64, p: f64) -> f64 {
    lambda / delta * w.powf(1.0 - p) / (p - 1.0)
}

/// `t_j + tail_sum(lambda, w_j, w_j - w_prev, p)`.
pub fn extrapolate_blowup_time(t_j: f64, w_j: f64, w_prev: f64, lambda: f64, p: f64) -> f64 {
    t_j + tail_sum(lambda, w_j, w_j - w_prev, p)
}

pub fn estimate_blowup_time(traj: &Trajectory) -> Result<BlowupTime, DiagnosticsError> {
    let sc = &traj.scalars;
    if sc.len() < 2 {
        return Err(DiagnosticsError::TooShort);
    }
    let (p, lambda) = (traj.config.p, traj.config.lambda);
    let last = sc[sc.len() - 1];
    let delta = last.w - sc[sc.len() - 2].w;
    let lo = sc.len().saturating_sub(TAIL_BOUND_STEPS + 1);
    let min_delta = sc[lo..]
        .windows(2)
        .filter(|w| w[1].j == w[0].j + 1)
        .map(|w| w[1].w - w[0].w)
        .fold(f64::INFINITY, f64::min);
    if !(delta > 0.0) {
        return Ok(BlowupTime {
            estimate: last.t,
            tail_bound: f64::INFINITY,
            degenerate: true,
        });
    }
    let tail_bound = if min_delta > 0.0 {
        tail_sum(lambda, last.w, min_delta, p)
    } else {
        f64::INFINITY
    };
    Ok(BlowupTime {
        estimate: last.t + tail_sum(lambda, last.w, delta, p),
        tail_bound,
        degenerate: false,
    })
}

/// Rescaled state `y_i = u_i (T - t)^{1/(p-1)}` at one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub j: u64,
    pub t: f64,
    pub y: Vec<f64>,
}

/// `u (T - t)^{1/(p-1)}` for a single value.
pub fn rescale_value(u: f64, remaining: f64, p: f64) -> f64 {
    u * remaining.powf(1.0 / (p - 1.0))
}

/// Rescales every snapshot with `t < T`.
pub fn rescale(snapshots: &[Snapshot], t_blowup: f64, p: f64) -> Vec<Rescaled> {
    snapshots
        .iter()
        .filter(|s| s.t < t_blowup)
        .map(|s| {
            let f = (t_blowup - s.t).powf(1.0 / (p - 1.0));
            Rescaled {
                j: s.j,
                t: s.t,
                y: s.u.iter().map(|u| u * f).collect(),
            }
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The rate window: last `RATE_WINDOW` usable snapshots before the final
/// `RATE_SKIP`.
fn rate_window(
    snapshots: &[Snapshot],
    t_blowup: f64,
    p: f64,
) -> Result<Vec<Rescaled>, DiagnosticsError> {
    let ys = rescale(snapshots, t_blowup, p);
    let needed = RATE_WINDOW + RATE_SKIP;
    if ys.len() < needed {
        return Err(DiagnosticsError::InsufficientTail {
            needed,
            available: ys.len(),
        });
    }
    let end = ys.len() - RATE_SKIP;
    Ok(ys[end - RATE_WINDOW..end].to_vec())
}

/// Median over the rate window of `max_i y_i`.
pub fn rate_constant(traj: &Trajectory, t_blowup: f64) -> Result<f64, DiagnosticsError> {
    let win = rate_window(&traj.snapshots, t_blowup, traj.config.p)?;
    Ok(median(
        win.iter()
            .map(|r| r.y.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    ))
}

/// Median of `(T - t^j) / (T - t^{j+1})` over the last `RATE_WINDOW` steps
/// before the final `RATE_SKIP`.
pub fn step_ratio_tail(traj: &Trajectory, t_blowup: f64) -> Result<f64, DiagnosticsError> {
    let sc = &traj.scalars;
    let needed = RATE_WINDOW + RATE_SKIP + 1;
    if sc.len() < needed {
        return Err(DiagnosticsError::InsufficientTail {
            needed,
            available: sc.len(),
        });
    }
    let end = sc.len() - RATE_SKIP;
    Ok(median(
        sc[end - RATE_WINDOW - 1..end]
            .windows(2)
            .map(|w| (t_blowup - w[0].t) / (t_blowup - w[1].t))
            .collect(),
    ))
}

/// Straight-line fit of `w^j` against `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub slope: f64,
    /// RMS misfit divided by the mean of the fitted `w`.
    pub relative_residual: f64,
    pub points: usize,
}

/// Fits `w^j = a + b j` over the kept records of the final half of the run.
pub fn w_growth_fit(traj: &Trajectory) -> Result<GrowthFit, DiagnosticsError> {
    let half = traj.final_index() / 2;
    let (x, y): (Vec<f64>, Vec<f64>) = traj
        .scalars
        .iter()
        .filter(|s| s.j >= half)
        .map(|s| (s.j as f64, s.w))
        .unzip();
    if x.len() < 3 {
        return Err(DiagnosticsError::TooShort);
    }
    let (_, slope, rms) = linear_fit(&x, &y);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    Ok(GrowthFit {
        slope,
        relative_residual: rms / mean,
        points: x.len(),
    })
}

/// Breadth-first distances from `seeds`; `None` marks unreachable nodes.
pub fn graph_distance(
    sys: &DiscreteSystem,
    seeds: &[usize],
) -> Result<Vec<Option<usize>>, DiagnosticsError> {
    if seeds.is_empty() {
        return Err(DiagnosticsError::EmptySeed);
    }
    let mut d = vec![None; sys.n()];
    let mut queue = VecDeque::new();
    for &s in seeds {
        if d[s].is_none() {
            d[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(k) = queue.pop_front() {
        let next = d[k].map(|x| x + 1);
        for j in sys.neighbors(k) {
            if d[j].is_none() {
                d[j] = next;
                queue.push_back(j);
            }
        }
    }
    Ok(d)
}

/// `K` with `(K+2)/(K+1) < p <= (K+1)/K` (the upper bound is infinite for
/// `K = 0`), and whether `p` equals `(K+1)/K`.
pub fn propagation_depth(p: f64) -> (u32, bool) {
    assert!(p > 1.0, "propagation_depth needs p > 1, got {p}");
    let upper = |k: u32| {
        if k == 0 {
            f64::INFINITY
        } else {
            f64::from(k + 1) / f64::from(k)
        }
    };
    let lower = |k: u32| f64::from(k + 2) / f64::from(k + 1);
    let guess = (1.0 / (p - 1.0)).floor().min(f64::from(u32::MAX - 2));
    let mut k = guess as u32;
    while k > 0 && p > upper(k) {
        k -= 1;
    }
    while p <= lower(k) {
        k += 1;
    }
    (k, p == upper(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClassKind {
    /// In `B*`: rescaled value near `C_p`.
    MaximalRate,
    /// Within `K` rings of `B*`, power-law growth with reduced exponent.
    PowerRate,
    /// Ring `K` in the logarithmic case.
    LogRate,
    /// Tail bounded.
    Bounded,
    /// No class fits the data.
    Unclassified,
}

impl NodeClassKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeClassKind::MaximalRate => "maximal_rate",
            NodeClassKind::PowerRate => "power_rate",
            NodeClassKind::LogRate => "log_rate",
            NodeClassKind::Bounded => "bounded",
            NodeClassKind::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeClass {
    pub node: usize,
    pub in_bstar: bool,
    pub d: Option<usize>,
    pub class: NodeClassKind,
    /// `alpha` in `u ~ (T - t)^{-alpha}`, for blowing-up nodes.
    pub fitted_exponent: Option<f64>,
    /// RMS misfit of the fit that decided the class.
    pub residual: Option<f64>,
    /// `b` in `u ~ a - b ln(T - t)`, for log-case nodes.
    pub log_slope: Option<f64>,
    pub log_case: bool,
    /// Median rescaled value over the rate window.
    pub y_tail: f64,
    /// Max over the fit window divided by the value at its start.
    pub growth: f64,
}

/// Least-squares line `y = a + b x`; returns `(a, b, rms_residual)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - icpt - slope * a).powi(2))
        .sum();
    (icpt, slope, (rss / n).sqrt())
}

/// Fit window inputs for [`classify_blowup_set`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitWindow {
    pub t_blowup: f64,
    pub tail_bound: f64,
    /// Time of the first negative functional.
    pub t_detect: f64,
}

impl FitWindow {
    /// `(T - t)` range `[10 tail_bound, 0.1 (T - t_detect)]`.
    pub fn bounds(&self) -> (f64, f64) {
        (
            10.0 * self.tail_bound,
            0.1 * (self.t_blowup - self.t_detect),
        )
    }

    pub fn select<'s>(&self, snapshots: &'s [Snapshot]) -> Vec<&'s Snapshot> {
        let (lo, hi) = self.bounds();
        snapshots
            .iter()
            .filter(|s| {
                let r = self.t_blowup - s.t;
                r >= lo && r <= hi
            })
            .collect()
    }
}

/// Assigns every node a class from the tail of a blow-up run.
pub fn classify_blowup_set(
    sys: &DiscreteSystem,
    traj: &Trajectory,
    window: &FitWindow,
    p: f64,
) -> Result<Vec<NodeClass>, DiagnosticsError> {
    let n = sys.n();
    for s in &traj.snapshots {
        if s.u.len() != n {
            return Err(DiagnosticsError::ShapeMismatch {
                j: s.j,
                got: s.u.len(),
                expected: n,
            });
        }
    }
    let cp = rate_target(p);
    let rw = rate_window(&traj.snapshots, window.t_blowup, p)?;
    let y_tail: Vec<f64> = (0..n)
        .map(|k| median(rw.iter().map(|r| r.y[k]).collect()))
        .collect();
    let bstar: Vec<usize> = (0..n)
        .filter(|&k| (y_tail[k] - cp).abs() <= BSTAR_TOLERANCE * cp)
        .collect();
    if bstar.is_empty() {
        return Ok((0..n)
            .map(|k| NodeClass {
                node: k,
                in_bstar: false,
                d: None,
                class: NodeClassKind::Unclassified,
                fitted_exponent: None,
                residual: None,
                log_slope: None,
                log_case: false,
                y_tail: y_tail[k],
                growth: f64::NAN,
            })
            .collect());
    }
    let dist = graph_distance(sys, &bstar)?;
    let (k_depth, log_case) = propagation_depth(p);

    let fit = window.select(&traj.snapshots);
    let log_r: Vec<f64> = fit.iter().map(|s| (window.t_blowup - s.t).ln()).collect();

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let d = dist[k];
        let vals: Vec<f64> = fit.iter().map(|s| s.u[k]).collect();
        let growth = match vals.first() {
            Some(&v0) if v0 > 0.0 => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) / v0,
            _ => f64::NAN,
        };
        let mut nc = NodeClass {
            node: k,
            in_bstar: d == Some(0),
            d,
            class: NodeClassKind::Unclassified,
            fitted_exponent: None,
            residual: None,
            log_slope: None,
            log_case: false,
            y_tail: y_tail[k],
            growth,
        };
        let enough = vals.len() >= 3 && vals.iter().all(|&v| v > 0.0);
        let power_fit = || {
            let logs: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
            let (_, slope, rms) = linear_fit(&log_r, &logs);
            (-slope, rms)
        };
        match d {
            Some(dk) if dk as u32 <= k_depth => {
                let is_log = log_case && dk as u32 == k_depth;
                nc.log_case = is_log;
                if !enough {
                    out.push(nc);
                    continue;
                }
                let (alpha, rms) = power_fit();
                nc.fitted_exponent = Some(alpha);
                if is_log {
                    // u ~ a - b ln(T - t); misfit measured relative to the mean.
                    let (_, slope, rms_lin) = linear_fit(&log_r, &vals);
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let rel = rms_lin / mean;
                    nc.log_slope = Some(-slope);
                    nc.residual = Some(rel);
                    if -slope > 0.0 && rel <= FIT_RESIDUAL_MAX {
                        nc.class = NodeClassKind::LogRate;
                    }
                } else {
                    nc.residual = Some(rms);
                    if rms <= FIT_RESIDUAL_MAX && alpha > 0.0 {
                        nc.class = if dk == 0 {
                            NodeClassKind::MaximalRate
                        } else {
                            NodeClassKind::PowerRate
                        };
                    }
                }
            }
            _ => {
                if growth.is_finite() && growth < BOUNDED_GROWTH {
                    nc.class = NodeClassKind::Bounded;
                }
            }
        }
        out.push(nc);
    }
    Ok(out)
}

/// Full diagnostic summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub detected: bool,
    pub first_negative_phi_index: Option<u64>,
    pub inconsistent: bool,
    pub termination: Termination,
    pub final_index: u64,
    pub t_final: f64,
    pub w_final: f64,
    #[serde(rename = "T_estimate")]
    pub t_estimate: Option<f64>,
    #[serde(rename = "T_tail_bound")]
    pub t_tail_bound: Option<f64>,
    pub t_estimate_degenerate: bool,
    pub rate_constant: Option<f64>,
    pub rate_target: f64,
    pub step_ratio_median: Option<f64>,
    #[serde(rename = "K")]
    pub k: u32,
    pub log_case: bool,
    pub node_classes: Vec<NodeClass>,
    pub eta: Option<EtaInfo>,
    pub total_halvings: u64,
    /// Diagnostics that could not be computed, with the reason.
    pub notes: Vec<String>,
}

/// Runs every diagnostic that applies to `traj`.
pub fn analyze(sys: &DiscreteSystem, traj: &Trajectory) -> BlowupReport {
    let p = traj.config.p;
    let det = detect_blowup(traj);
    let last = *traj.final_scalars();
    let (k, log_case) = propagation_depth(p);
    let mut report = BlowupReport {
        detected: det.detected,
        first_negative_phi_index: det.j0,
        inconsistent: det.inconsistent,
        termination: traj.termination,
        final_index: last.j,
        t_final: last.t,
        w_final: last.w,
        t_estimate: None,
        t_tail_bound: None,
        t_estimate_degenerate: false,
        rate_constant: None,
        rate_target: rate_target(p),
        step_ratio_median: None,
        k,
        log_case,
        node_classes: Vec::new(),
        eta: traj.eta,
        total_halvings: traj.total_halvings,
        notes: Vec::new(),
    };
    if det.inconsistent {
        report
            .notes
            .push("negative functional on a run that ended steady".into());
    }
    if !det.detected {
        return report;
    }
    let bt = match estimate_blowup_time(traj) {
        Ok(bt) => bt,
        Err(e) => {
            report.notes.push(format!("blow-up time: {e}"));
            return report;
        }
    };
    report.t_estimate = Some(bt.estimate);
    report.t_tail_bound = Some(bt.tail_bound);
    report.t_estimate_degenerate = bt.degenerate;
    if bt.degenerate {
        report
            .notes
            .push("last w increment not positive; T estimate falls back to t^J".into());
    }
    match rate_constant(traj, bt.estimate) {
        Ok(c) => report.rate_constant = Some(c),
        Err(e) => report.notes.push(format!("rate constant: {e}")),
    }
    match step_ratio_tail(traj, bt.estimate) {
        Ok(r) => report.step_ratio_median = Some(r),
        Err(e) => report.notes.push(format!("step ratio: {e}")),
    }
    let t_detect = first_negative(traj).map(|f| f.1).unwrap_or(0.0);
    let window = FitWindow {
        t_blowup: bt.estimate,
        tail_bound: bt.tail_bound,
        t_detect,
    };
    let in_window = window.select(&traj.snapshots).len();
    if in_window < 3 {
        let (lo, hi) = window.bounds();
        report.notes.push(format!(
            "fit window T - t in [{lo:e}, {hi:e}] holds {in_window} snapshots; \
             a larger w_stop shrinks the lower end"
        ));
    }
    match classify_blowup_set(sys, traj, &window, p) {
        Ok(c) => report.node_classes = c,
        Err(e) => report.notes.push(format!("classification: {e}")),
    }
    report
}

/// Writes `node,d,class,fitted_exponent,residual`; missing values are empty.
pub fn write_classes_csv<W: Write>(classes: &[NodeClass], mut out: W) -> io::Result<()> {
    writeln!(out, "node,d,class,fitted_exponent,residual")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for c in classes {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.node,
            c.d.map(|d| d.to_string()).unwrap_or_else(|| "inf".into()),
            c.class.as_str(),
            opt(c.fitted_exponent),
            opt(c.residual)
        )?;
    }
    Ok(())
}
