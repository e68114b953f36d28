//! Monte Carlo verification of the dynamic-programming property of a
//! solved value grid: the universal lower inequality over a candidate
//! control set and the existential upper inequality for a near-optimal
//! policy, under configurable stopping rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MC_SE_SLACK;
use crate::hjb::{extract_policy, interpolate_value, PolicyTable, ValueGrid};
use crate::model::{terminal_boundary_value, Control, ModelParams, State};
use crate::sde::{simulate_stopped, McEstimate, Policy, SdeError, SimConfig};

#[derive(Debug, Error)]
pub enum DppError {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("invalid stopping rule: {0}")]
    InvalidRule(String),
    #[error("start state lies outside the grid hull")]
    StartOutsideGrid,
}

/// Stopping time composed with the region exit time and the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StoppingRule {
    /// Stop at a deterministic time.
    FixedTime { t_star: f64 },
    /// Stop on first exit from the ball of the given radius around the
    /// start state.
    FirstExit { radius: f64 },
    /// No early stop; run to exit or horizon.
    Horizon,
}

impl StoppingRule {
    fn validate(&self, params: &ModelParams, s: f64) -> Result<(), DppError> {
        match *self {
            StoppingRule::FixedTime { t_star } => {
                if t_star < s || t_star > params.horizon {
                    return Err(DppError::InvalidRule(format!(
                        "fixed time {t_star} outside [{s}, {}]",
                        params.horizon
                    )));
                }
            }
            StoppingRule::FirstExit { radius } => {
                if !(radius > 0.0) {
                    return Err(DppError::InvalidRule(format!("radius must be > 0, got {radius}")));
                }
            }
            StoppingRule::Horizon => {}
        }
        Ok(())
    }
}

/// Candidate control for the lower check's universal quantifier.
#[derive(Debug, Clone)]
pub enum Candidate<'a> {
    Constant(Control),
    /// Greedy Markov policy extracted from the grid under test.
    Greedy,
    Table(&'a PolicyTable),
}

impl Candidate<'_> {
    fn label(&self) -> String {
        match self {
            Candidate::Constant(u) => format!("constant(eta={}, c={})", u.eta, u.c),
            Candidate::Greedy => "greedy".into(),
            Candidate::Table(_) => "table".into(),
        }
    }
}

/// Constants on the grid's control set plus the extracted greedy policy.
pub fn default_candidates(grid: &ValueGrid) -> Vec<Candidate<'static>> {
    let mut out: Vec<Candidate> = grid.spec.control_grid.iter().map(Candidate::Constant).collect();
    out.push(Candidate::Greedy);
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateRow {
    pub label: String,
    pub rhs_mean: f64,
    pub rhs_std_error: f64,
    /// Signed `rhs - v(s,y)`.
    pub gap: f64,
    pub pass: bool,
    /// Any path needed a clamped (out-of-hull) value interpolation.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DppReport {
    pub v_at_start: f64,
    pub best_rhs: f64,
    /// `best_rhs - v_at_start`.
    pub gap: f64,
    pub rows: Vec<CandidateRow>,
    pub pass: bool,
}

/// Estimates the stopped right-hand side
/// `E[int L dt + V(theta ^ tau, x(theta ^ tau))]` for one policy.
fn estimate_rhs(
    params: &ModelParams,
    grid: &ValueGrid,
    mc: &SimConfig,
    s: f64,
    y: State,
    rule: StoppingRule,
    policy: &Policy,
) -> Result<(McEstimate, bool), SdeError> {
    let mut config = *mc;
    config.rho_trunc = Some(grid.spec.rho);
    config.validate(params)?;
    let stop_rule: Option<Box<dyn Fn(f64, State) -> bool + Sync>> = match rule {
        StoppingRule::FixedTime { t_star } => Some(Box::new(move |t, _| t >= t_star - 1e-12)),
        StoppingRule::FirstExit { radius } => Some(Box::new(move |_, x: State| {
            let d = ((x.p - y.p).powi(2) + (x.xi - y.xi).powi(2) + (x.theta - y.theta).powi(2))
                .sqrt();
            d >= radius
        })),
        StoppingRule::Horizon => None,
    };
    let samples: Vec<(f64, bool)> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, bool), SdeError> {
            let stop = simulate_stopped(
                params,
                &config,
                s,
                y,
                policy,
                0.0,
                i,
                stop_rule.as_deref(),
                None,
            )?;
            // at a region exit the value is the boundary data; elsewhere
            // interpolate the grid at the stop
            let (v_stop, clamped) = if stop.stopped_early || stop.time >= params.horizon - 1e-12 {
                interpolate_value(grid, stop.time, stop.state)
            } else {
                (terminal_boundary_value(stop.state), false)
            };
            Ok((stop.cost_integral + v_stop, clamped))
        })
        .collect::<Result<_, _>>()?;
    let vals: Vec<f64> = samples.iter().map(|&(v, _)| v).collect();
    let clamped = samples.iter().any(|&(_, c)| c);
    Ok((McEstimate::from_samples(&vals), clamped))
}

fn with_policy<R>(
    grid: &ValueGrid,
    candidate: &Candidate,
    f: impl FnOnce(&Policy) -> R,
) -> R {
    match candidate {
        Candidate::Constant(u) => f(&Policy::Constant(*u)),
        Candidate::Greedy => {
            let greedy = extract_policy(grid);
            f(&Policy::Markov(&greedy))
        }
        Candidate::Table(t) => f(&Policy::Table(t)),
    }
}

/// Universal lower inequality: for every candidate control,
/// `v(s,y) <= RHS + slack * SE + tolerance`.
#[allow(clippy::too_many_arguments)]
pub fn verify_dp_lower(
    params: &ModelParams,
    grid: &ValueGrid,
    s: f64,
    y: State,
    rule: StoppingRule,
    candidates: &[Candidate],
    mc: &SimConfig,
    tolerance: f64,
) -> Result<DppReport, DppError> {
    rule.validate(params, s)?;
    let (v0, outside) = interpolate_value(grid, s, y);
    if outside {
        return Err(DppError::StartOutsideGrid);
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let (est, clamped) =
            with_policy(grid, cand, |p| estimate_rhs(params, grid, mc, s, y, rule, p))?;
        let gap = est.mean - v0;
        rows.push(CandidateRow {
            label: cand.label(),
            rhs_mean: est.mean,
            rhs_std_error: est.std_error,
            gap,
            pass: gap >= -(MC_SE_SLACK * est.std_error + tolerance),
            extrapolated: clamped,
        });
    }
    let best_rhs = rows.iter().map(|r| r.rhs_mean).fold(f64::INFINITY, f64::min);
    Ok(DppReport {
        v_at_start: v0,
        best_rhs,
        gap: best_rhs - v0,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

/// Existential upper inequality for one near-optimal policy:
/// `v(s,y) + delta + slack * SE >= RHS`.
#[allow(clippy::too_many_arguments)]
pub fn verify_dp_upper(
    params: &ModelParams,
    grid: &ValueGrid,
    s: f64,
    y: State,
    rule: StoppingRule,
    policy: &Candidate,
    mc: &SimConfig,
    delta: f64,
) -> Result<DppReport, DppError> {
    rule.validate(params, s)?;
    let (v0, outside) = interpolate_value(grid, s, y);
    if outside {
        return Err(DppError::StartOutsideGrid);
    }
    let (est, clamped) =
        with_policy(grid, policy, |p| estimate_rhs(params, grid, mc, s, y, rule, p))?;
    let gap = est.mean - v0;
    let row = CandidateRow {
        label: policy.label(),
        rhs_mean: est.mean,
        rhs_std_error: est.std_error,
        gap,
        pass: gap <= delta + MC_SE_SLACK * est.std_error,
        extrapolated: clamped,
    };
    Ok(DppReport {
        v_at_start: v0,
        best_rhs: est.mean,
        gap,
        pass: row.pass,
        rows: vec![row],
    })
}
