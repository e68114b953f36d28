//! Path simulation of the controlled state process: Euler stepping with an
//! exact exponential update for the likelihood-ratio component, exit
//! detection, stopped-cost accumulation, Monte Carlo estimation, and the
//! probabilistic verification harnesses (martingale and tail bounds).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MC_SE_SLACK;
use crate::hjb::PolicyTable;
use crate::model::{Control, ModelParams, State};

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("non-finite state at t={t}: p={p}, xi={xi}, theta={theta}")]
    NonFiniteState { t: f64, p: f64, xi: f64, theta: f64 },
    #[error("tail level {level} violates the largeness precondition (must exceed {threshold})")]
    TailPrecondition { level: f64, threshold: f64 },
}

/// Monte Carlo simulation configuration.
///
/// Per-path randomness is a dedicated stream derived from `(seed, path
/// index)`, so changing the path count never reshuffles earlier paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Truncation radius; `None` simulates on the untruncated closed region.
    pub rho_trunc: Option<f64>,
    /// Use the exact exponential update for the xi component (default on).
    pub exact_xi_update: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { dt: 1e-3, n_paths: 1000, seed: 0, rho_trunc: None, exact_xi_update: true }
    }
}

impl SimConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<(), SdeError> {
        if !(self.dt > 0.0) || self.dt > params.horizon {
            return Err(SdeError::InvalidConfig(format!(
                "dt must be in (0, horizon], got {}",
                self.dt
            )));
        }
        if self.n_paths == 0 {
            return Err(SdeError::InvalidConfig("n_paths must be >= 1".into()));
        }
        if let Some(rho) = self.rho_trunc {
            if rho <= params.r {
                return Err(SdeError::InvalidConfig(format!(
                    "rho_trunc must exceed the payoff floor {}, got {rho}",
                    params.r
                )));
            }
        }
        Ok(())
    }
}

/// Which face of the (truncated) state region a path left through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitFace {
    PayoffFloor,
    PayoffCap,
    XiFloor,
    XiCap,
    ThetaBand,
    Horizon,
}

/// Outcome of a single simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathResult {
    pub exit_time: f64,
    pub exit_state: State,
    /// Realized stopped cost: left-endpoint quadrature of the running cost
    /// minus `P * xi` at the stop.
    pub cost: f64,
    pub exit_face: ExitFace,
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = pairwise_sum(samples) / n as f64;
        let devs: Vec<f64> = samples.iter().map(|&x| (x - mean) * (x - mean)).collect();
        let var = if n > 1 { pairwise_sum(&devs) / (n - 1) as f64 } else { 0.0 };
        McEstimate { mean, std_error: (var / n as f64).sqrt(), n }
    }
}

/// Control source for path simulation.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Constant(Control),
    /// Markov feedback control evaluated at every step.
    Markov(&'a (dyn Fn(f64, State) -> Control + Sync)),
    /// Discrete time-slab/state-cell table; the control is sampled on entry
    /// into each time slab and held for the slab's duration.
    Table(&'a PolicyTable),
}

/// One row of an optional per-path trace dump.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub p: f64,
    pub xi: f64,
    pub theta: f64,
    pub eta: f64,
    pub c: f64,
}

/// Deterministic per-path generator derived from `(seed, path_index)`.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index.wrapping_add(1));
    rng
}

/// One Euler step of the state triple. All three components share the same
/// scalar increment `dw`; `dw1` is the independent 3-vector increment that
/// enters only when `epsilon > 0`.
///
/// When `exact_xi` is set and `epsilon == 0`, the xi component uses the
/// exact exponential update `xi * exp(-h dw - h^2 dt / 2)` with the
/// exposure `h = (theta + Phi - l(t)) / varrho` frozen at the step's left
/// endpoint, which integrates the xi dynamics exactly over the step.
#[allow(clippy::too_many_arguments)]
pub fn step_euler(
    params: &ModelParams,
    t: f64,
    x: State,
    u: Control,
    dw: f64,
    dw1: [f64; 3],
    epsilon: f64,
    dt: f64,
    exact_xi: bool,
) -> Result<State, SdeError> {
    let f = params.drift_vector(t, x, u);
    let s = params.vol_vector(t, x, u);
    let p = x.p + f[0] * dt + s[0] * dw + epsilon * dw1[0];
    let theta = x.theta + f[2] * dt + s[2] * dw + epsilon * dw1[2];
    let xi = if exact_xi && epsilon == 0.0 {
        let h = (x.theta + params.cobb_douglas(u) - params.ell.eval(t)) / params.varrho;
        x.xi * (-h * dw - 0.5 * h * h * dt).exp()
    } else {
        x.xi + s[1] * dw + epsilon * dw1[1]
    };
    let next = State { p, xi, theta };
    if !p.is_finite() || !xi.is_finite() || !theta.is_finite() {
        return Err(SdeError::NonFiniteState { t, p, xi, theta });
    }
    Ok(next)
}

fn classify_exit(params: &ModelParams, rho: Option<f64>, x: State) -> Option<ExitFace> {
    match rho {
        None => {
            if x.p < params.r {
                Some(ExitFace::PayoffFloor)
            } else if x.xi < 0.0 {
                Some(ExitFace::XiFloor)
            } else if x.theta.abs() > params.h {
                Some(ExitFace::ThetaBand)
            } else {
                None
            }
        }
        Some(rho) => {
            if x.p < params.r {
                Some(ExitFace::PayoffFloor)
            } else if x.p > rho {
                Some(ExitFace::PayoffCap)
            } else if x.xi < 1.0 / rho {
                Some(ExitFace::XiFloor)
            } else if x.xi > rho {
                Some(ExitFace::XiCap)
            } else if x.theta.abs() > params.h {
                Some(ExitFace::ThetaBand)
            } else {
                None
            }
        }
    }
}

/// Where and why a simulated path stopped.
#[derive(Debug, Clone, Copy)]
pub struct StopInfo {
    pub time: f64,
    pub state: State,
    /// Left-endpoint quadrature of the running cost up to the stop.
    pub cost_integral: f64,
    pub exit_face: ExitFace,
    /// True when the user-supplied stopping rule fired before region exit
    /// and before the horizon.
    pub stopped_early: bool,
}

/// Steps one path from `(s, y)` until the earliest of: the user stopping
/// rule firing, exit from the (truncated) region, or the horizon.
#[allow(clippy::too_many_arguments)]
pub fn simulate_stopped(
    params: &ModelParams,
    config: &SimConfig,
    s: f64,
    y: State,
    policy: &Policy,
    epsilon: f64,
    path_index: u64,
    stop_rule: Option<&(dyn Fn(f64, State) -> bool + Sync)>,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<StopInfo, SdeError> {
    let mut rng = path_rng(config.seed, path_index);
    let horizon = params.horizon;
    let mut t = s;
    let mut x = y;
    let mut cost = 0.0;
    let mut held: Option<(usize, Control)> = None;

    loop {
        if let Some(rule) = stop_rule {
            if rule(t, x) {
                return Ok(StopInfo {
                    time: t,
                    state: x,
                    cost_integral: cost,
                    exit_face: ExitFace::Horizon,
                    stopped_early: true,
                });
            }
        }
        if t >= horizon - 1e-12 {
            return Ok(StopInfo {
                time: horizon,
                state: x,
                cost_integral: cost,
                exit_face: ExitFace::Horizon,
                stopped_early: false,
            });
        }
        let u = match policy {
            Policy::Constant(u) => *u,
            Policy::Markov(f) => f(t, x),
            Policy::Table(table) => match table.slab_index(t) {
                None => table.default_control(),
                Some(slab) => match held {
                    Some((held_slab, u)) if held_slab == slab => u,
                    _ => {
                        let u = table.control_at(slab, x);
                        held = Some((slab, u));
                        u
                    }
                },
            },
        };
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow { t, p: x.p, xi: x.xi, theta: x.theta, eta: u.eta, c: u.c });
        }
        let dt = config.dt.min(horizon - t);
        cost += params.running_cost(x, u) * dt;
        let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
        let dw1 = if epsilon > 0.0 {
            let g = |r: &mut ChaCha8Rng| r.sample::<f64, _>(StandardNormal) * dt.sqrt();
            [g(&mut rng), g(&mut rng), g(&mut rng)]
        } else {
            [0.0; 3]
        };
        x = step_euler(params, t, x, u, dw, dw1, epsilon, dt, config.exact_xi_update)?;
        t += dt;
        if let Some(face) = classify_exit(params, config.rho_trunc, x) {
            return Ok(StopInfo {
                time: t,
                state: x,
                cost_integral: cost,
                exit_face: face,
                stopped_early: false,
            });
        }
    }
}

/// Simulates one full path from `(s, y)` to exit or horizon and returns the
/// realized stopped cost.
pub fn simulate_path(
    params: &ModelParams,
    config: &SimConfig,
    s: f64,
    y: State,
    policy: &Policy,
    epsilon: f64,
    path_index: u64,
) -> Result<PathResult, SdeError> {
    let stop = simulate_stopped(params, config, s, y, policy, epsilon, path_index, None, None)?;
    Ok(PathResult {
        exit_time: stop.time,
        exit_state: stop.state,
        cost: stop.cost_integral - stop.state.p * stop.state.xi,
        exit_face: stop.exit_face,
    })
}

/// Monte Carlo estimate of the expected stopped cost under `policy`.
///
/// Deterministic given the seed; the reduction is a pairwise summation over
/// path index order, so the result is independent of evaluation order.
pub fn estimate_cost(
    params: &ModelParams,
    config: &SimConfig,
    s: f64,
    y: State,
    policy: &Policy,
    epsilon: f64,
) -> Result<McEstimate, SdeError> {
    config.validate(params)?;
    let costs: Vec<f64> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| simulate_path(params, config, s, y, policy, epsilon, i).map(|r| r.cost))
        .collect::<Result<_, _>>()?;
    Ok(McEstimate::from_samples(&costs))
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleEntry {
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub pass: bool,
}

/// Report of the likelihood-ratio martingale check.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub xi0: f64,
    pub entries: Vec<MartingaleEntry>,
    pub all_positive: bool,
    pub pass: bool,
}

/// Estimates `E[xi(t)]` at the given mesh of times using exact exponential
/// updates and checks each mean against the 4-standard-error band around
/// the initial value; also verifies strict positivity on every path.
pub fn check_xi_martingale(
    params: &ModelParams,
    config: &SimConfig,
    s: f64,
    y: State,
    policy: &Policy,
    times: &[f64],
) -> Result<MartingaleReport, SdeError> {
    config.validate(params)?;
    let horizon = params.horizon;
    // per path: xi sampled at the first grid time >= each mesh time
    let per_path: Vec<(Vec<f64>, bool)> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, bool), SdeError> {
            let mut rng = path_rng(config.seed, i);
            let mut t = s;
            let mut x = y;
            let mut out = vec![f64::NAN; times.len()];
            let mut positive = x.xi > 0.0 || y.xi == 0.0;
            let mut next_mark = 0;
            loop {
                while next_mark < times.len() && t >= times[next_mark] - 1e-12 {
                    out[next_mark] = x.xi;
                    next_mark += 1;
                }
                if next_mark >= times.len() || t >= horizon - 1e-12 {
                    break;
                }
                let u = match policy {
                    Policy::Constant(u) => *u,
                    Policy::Markov(f) => f(t, x),
                    Policy::Table(table) => table
                        .slab_index(t)
                        .map(|slab| table.control_at(slab, x))
                        .unwrap_or_else(|| table.default_control()),
                };
                let dt = config.dt.min(horizon - t);
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
                x = step_euler(params, t, x, u, dw, [0.0; 3], 0.0, dt, true)?;
                t += dt;
                if y.xi > 0.0 && x.xi <= 0.0 {
                    positive = false;
                }
            }
            for v in &mut out {
                if v.is_nan() {
                    *v = x.xi;
                }
            }
            Ok((out, positive))
        })
        .collect::<Result<_, _>>()?;

    let all_positive = per_path.iter().all(|(_, p)| *p);
    let mut entries = Vec::with_capacity(times.len());
    for (j, &t) in times.iter().enumerate() {
        let samples: Vec<f64> = per_path.iter().map(|(v, _)| v[j]).collect();
        let est = McEstimate::from_samples(&samples);
        let pass = (est.mean - y.xi).abs() <= MC_SE_SLACK * est.std_error + 1e-12;
        entries.push(MartingaleEntry { t, mean: est.mean, std_error: est.std_error, pass });
    }
    let pass = all_positive && entries.iter().all(|e| e.pass);
    Ok(MartingaleReport { xi0: y.xi, entries, all_positive, pass })
}

/// Semimartingale harness for the tail bound: a pure local-martingale path
/// or one carrying a bounded-variation drift component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailHarness {
    /// X = sqrt(kappa) W, so the quadratic variation is kappa t exactly.
    Brownian,
    /// X = sqrt(kappa/2) W + (kappa/2) t: half the budget goes to the
    /// bounded-variation part.
    WithDrift,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailLevel {
    pub level: f64,
    pub bound: f64,
    pub empirical: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub kappa: f64,
    pub t_end: f64,
    pub harness: TailHarness,
    pub levels: Vec<TailLevel>,
    pub pass: bool,
}

/// Closed-form tail bound `(12/n) sqrt(kappa T / 2 pi) exp(-n^2 / (18 kappa T))`.
pub fn tail_bound(kappa: f64, t_end: f64, level: f64) -> f64 {
    (12.0 / level)
        * (kappa * t_end / (2.0 * std::f64::consts::PI)).sqrt()
        * (-level * level / (18.0 * kappa * t_end)).exp()
}

/// Empirical exceedance probability of the running maximum of a
/// semimartingale with budget `|C_t| + <M>_t <= kappa t`, compared level by
/// level against the closed-form bound.
pub fn check_tail_bound(
    kappa: f64,
    t_end: f64,
    n_levels: &[f64],
    config: &SimConfig,
    harness: TailHarness,
) -> Result<TailReport, SdeError> {
    let threshold = 3.0 * kappa * t_end; // starting point is 0
    for &n in n_levels {
        if n <= threshold {
            return Err(SdeError::TailPrecondition { level: n, threshold });
        }
    }
    let n_steps = (t_end / config.dt).ceil() as usize;
    let dt = t_end / n_steps as f64;
    let (mart_scale, drift) = match harness {
        TailHarness::Brownian => (kappa.sqrt(), 0.0),
        TailHarness::WithDrift => ((kappa / 2.0).sqrt(), kappa / 2.0),
    };
    let maxima: Vec<f64> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(config.seed, i);
            let mut x = 0.0_f64;
            let mut max_abs = 0.0_f64;
            for step in 0..n_steps {
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
                x += mart_scale * dw;
                let t = (step + 1) as f64 * dt;
                let with_bv = x + drift * t;
                max_abs = max_abs.max(with_bv.abs());
            }
            max_abs
        })
        .collect();
    let levels = n_levels
        .iter()
        .map(|&n| {
            let count = maxima.iter().filter(|&&m| m >= n).count();
            let empirical = count as f64 / maxima.len() as f64;
            let bound = tail_bound(kappa, t_end, n);
            TailLevel { level: n, bound, empirical, pass: empirical <= bound }
        })
        .collect::<Vec<_>>();
    let pass = levels.iter().all(|l| l.pass);
    Ok(TailReport { kappa, t_end, harness, levels, pass })
}

/// Cascade (pairwise) summation; independent of traversal chunking.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}
