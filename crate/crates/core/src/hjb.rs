//! Grid solver for the regularized, truncated dynamic-programming equation:
//! explicit monotone backward marching with CFL substepping, the epsilon/rho
//! convergence ladder, greedy policy extraction, and discrete Markov policy
//! synthesis.

use std::io::{BufRead, BufWriter, Write as IoWrite};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Control, ControlGrid, ModelError, ModelParams, State};

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Discretization of the truncated space-time region
/// `[0,T] x [R,rho] x [1/rho,rho] x [-H,H]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rho: f64,
    pub n_p: usize,
    pub n_xi: usize,
    pub n_theta: usize,
    pub n_t: usize,
    /// Current regularization level (diffusion inflation `epsilon^2 I`).
    pub epsilon: f64,
    pub control_grid: ControlGrid,
}

impl GridSpec {
    pub fn validate(&self, params: &ModelParams) -> Result<(), HjbError> {
        if !(self.rho > params.r) || !(self.rho > 1.0) {
            return Err(HjbError::InvalidSpec(format!(
                "rho must exceed max(payoff floor {}, 1), got {}",
                params.r, self.rho
            )));
        }
        if self.n_p < 3 || self.n_xi < 3 || self.n_theta < 3 {
            return Err(HjbError::InvalidSpec("spatial axes need at least 3 nodes".into()));
        }
        if self.n_t < 2 {
            return Err(HjbError::InvalidSpec("time axis needs at least 2 nodes".into()));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(HjbError::InvalidSpec(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        self.control_grid.validate(params)?;
        Ok(())
    }

    pub fn n_nodes_space(&self) -> usize {
        self.n_p * self.n_xi * self.n_theta
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Solved value function on a `GridSpec`, with the per-node minimizing
/// control recorded during the sweep.
///
/// Index order is time-major: `((it * nP + ip) * nXi + ixi) * nTheta + ith`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub spec: GridSpec,
    pub p_axis: Vec<f64>,
    pub xi_axis: Vec<f64>,
    pub theta_axis: Vec<f64>,
    pub t_axis: Vec<f64>,
    pub values: Vec<f64>,
    pub controls: Vec<Control>,
}

impl ValueGrid {
    pub fn idx(&self, it: usize, ip: usize, ixi: usize, ith: usize) -> usize {
        ((it * self.spec.n_p + ip) * self.spec.n_xi + ixi) * self.spec.n_theta + ith
    }

    pub fn value_at(&self, it: usize, ip: usize, ixi: usize, ith: usize) -> f64 {
        self.values[self.idx(it, ip, ixi, ith)]
    }

    pub fn node_state(&self, ip: usize, ixi: usize, ith: usize) -> State {
        State::new(self.p_axis[ip], self.xi_axis[ixi], self.theta_axis[ith])
    }

    pub fn dx(&self) -> [f64; 3] {
        [
            self.p_axis[1] - self.p_axis[0],
            self.xi_axis[1] - self.xi_axis[0],
            self.theta_axis[1] - self.theta_axis[0],
        ]
    }

    pub fn dt_slab(&self) -> f64 {
        self.t_axis[1] - self.t_axis[0]
    }

    fn is_space_boundary(&self, ip: usize, ixi: usize, ith: usize) -> bool {
        ip == 0
            || ip == self.spec.n_p - 1
            || ixi == 0
            || ixi == self.spec.n_xi - 1
            || ith == 0
            || ith == self.spec.n_theta - 1
    }
}

/// Diagnostics from one regularized solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    /// Total explicit substeps taken across all time slabs.
    pub substeps: usize,
    /// CFL rate bound used to size the substeps.
    pub rate_bound: f64,
    /// Node-control-substep events where the cross-term splitting lost
    /// monotonicity and the diagonal was inflated.
    pub fallback_events: u64,
    /// Largest diagonal inflation applied by the fallback.
    pub max_inflation: f64,
}

/// Node visit order inside a substep; results are identical because node
/// updates within a substep are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    Forward,
    Reverse,
}

/// Per-control quantities that do not depend on the state or time.
struct ControlTables {
    controls: Vec<Control>,
    phi: Vec<f64>,
    /// `k * eta^gamma`; the running cost at a node is this times xi.
    k_eta_gamma: Vec<f64>,
}

impl ControlTables {
    fn new(params: &ModelParams, grid: &ControlGrid) -> Self {
        let controls: Vec<Control> = grid.iter().collect();
        let phi = controls.iter().map(|&u| params.cobb_douglas(u)).collect();
        let k_eta_gamma = controls
            .iter()
            .map(|&u| if u.eta == 0.0 { 0.0 } else { params.k * u.eta.powf(params.gamma) })
            .collect();
        ControlTables { controls, phi, k_eta_gamma }
    }
}

/// Coefficients of the generator at one node for one control, after the
/// truncation cutoff and any monotonicity-restoring diagonal inflation.
struct NodeCoeffs {
    f: [f64; 3],
    a: [[f64; 3]; 3],
    inflation: f64,
}

#[allow(clippy::too_many_arguments)]
fn node_coeffs(
    params: &ModelParams,
    rho: f64,
    epsilon: f64,
    dx: [f64; 3],
    // time-dependent scalars, evaluated once per substep
    profile: f64,
    ell: f64,
    theta_drift: f64,
    theta_vol: f64,
    x: State,
    zeta: f64,
    phi: f64,
) -> NodeCoeffs {
    let alpha = params.truncation_cutoff(x, rho);
    let f = [
        alpha * profile * (params.payoff.mu0 + params.payoff.mu1 * x.p + params.payoff.mu2 * phi),
        0.0,
        alpha * theta_drift * zeta,
    ];
    let s = [
        alpha * profile * (params.payoff.s0 + params.payoff.s1 * x.p),
        alpha * (-(x.xi) * (x.theta + phi - ell) / params.varrho),
        alpha * theta_vol * zeta,
    ];
    let e2 = epsilon * epsilon;
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = s[i] * s[j];
        }
        a[i][i] += e2;
    }
    // monotonicity of the 7-point splitting needs a_ii >= sum_{j != i}
    // |a_ij| dx_i / dx_j; restore it by inflating the diagonal
    let mut need = 0.0_f64;
    for i in 0..3 {
        let mut off = 0.0;
        for j in 0..3 {
            if j != i {
                off += a[i][j].abs() * dx[i] / dx[j];
            }
        }
        need = need.max(off - a[i][i]);
    }
    if need > 0.0 {
        for i in 0..3 {
            a[i][i] += need;
        }
    }
    NodeCoeffs { f, a, inflation: need.max(0.0) }
}

/// Spatial part of the discrete generator at an interior node: upwind first
/// differences, centered diagonal second differences, and the
/// positive/negative 7-point splitting for the cross terms.
fn discrete_spatial_generator(
    w: &[f64],
    base: usize,
    strides: [usize; 3],
    dx: [f64; 3],
    co: &NodeCoeffs,
) -> f64 {
    let c = w[base];
    let get = |off: isize| w[(base as isize + off) as usize];
    let so = [strides[0] as isize, strides[1] as isize, strides[2] as isize];
    let mut g = 0.0;
    for i in 0..3 {
        let fp = get(so[i]);
        let fm = get(-so[i]);
        let fi = co.f[i];
        g += if fi >= 0.0 { fi * (fp - c) / dx[i] } else { fi * (c - fm) / dx[i] };
        g += 0.5 * co.a[i][i] * (fp - 2.0 * c + fm) / (dx[i] * dx[i]);
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            let aij = co.a[i][j];
            if aij == 0.0 {
                continue;
            }
            let edges = get(so[i]) + get(-so[i]) + get(so[j]) + get(-so[j]);
            let scale = 1.0 / (2.0 * dx[i] * dx[j]);
            if aij > 0.0 {
                let corners = get(so[i] + so[j]) + get(-so[i] - so[j]);
                g += aij * (2.0 * c + corners - edges) * scale;
            } else {
                let corners = get(so[i] - so[j]) + get(-so[i] + so[j]);
                g += aij * (-2.0 * c - corners + edges) * scale;
            }
        }
    }
    g
}

/// Solves the regularized equation backward in time; forward sweep order.
pub fn solve_regularized(
    params: &ModelParams,
    spec: &GridSpec,
) -> Result<(ValueGrid, SolveReport), HjbError> {
    solve_regularized_ordered(params, spec, SweepOrder::Forward)
}

/// Backward explicit marching with the given node visit order.
///
/// The terminal slice and all lateral boundary slices are held at `-P xi`
/// and never modified; interior nodes take the control-minimized monotone
/// update, with the time slab subdivided to meet the CFL bound.
pub fn solve_regularized_ordered(
    params: &ModelParams,
    spec: &GridSpec,
    order: SweepOrder,
) -> Result<(ValueGrid, SolveReport), HjbError> {
    params.validate()?;
    spec.validate(params)?;
    let tables = ControlTables::new(params, &spec.control_grid);
    let p_axis = linspace(params.r, spec.rho, spec.n_p);
    let xi_axis = linspace(1.0 / spec.rho, spec.rho, spec.n_xi);
    let theta_axis = linspace(-params.h, params.h, spec.n_theta);
    let t_axis = linspace(0.0, params.horizon, spec.n_t);
    let dx = [p_axis[1] - p_axis[0], xi_axis[1] - xi_axis[0], theta_axis[1] - theta_axis[0]];
    let zeta: Vec<f64> = theta_axis.iter().map(|&th| params.cutoff_zeta(th)).collect();
    let n_space = spec.n_nodes_space();
    let strides = [spec.n_xi * spec.n_theta, spec.n_theta, 1];

    // conservative CFL rate: sup over time nodes x space nodes x controls of
    // the explicit update's total outflow rate
    let mut rate_bound = 0.0_f64;
    for &t in &t_axis {
        let profile = params.payoff.profile.eval(t);
        let ell = params.ell.eval(t);
        let thd = params.theta_drift.eval(t);
        let thv = params.theta_vol.eval(t);
        for ip in 0..spec.n_p {
            for ixi in 0..spec.n_xi {
                for ith in 0..spec.n_theta {
                    let x = State::new(p_axis[ip], xi_axis[ixi], theta_axis[ith]);
                    for ui in 0..tables.controls.len() {
                        let co = node_coeffs(
                            params,
                            spec.rho,
                            spec.epsilon,
                            dx,
                            profile,
                            ell,
                            thd,
                            thv,
                            x,
                            zeta[ith],
                            tables.phi[ui],
                        );
                        let mut rate = 0.0;
                        for i in 0..3 {
                            rate += co.f[i].abs() / dx[i] + co.a[i][i] / (dx[i] * dx[i]);
                        }
                        rate_bound = rate_bound.max(rate);
                    }
                }
            }
        }
    }

    let mut grid = ValueGrid {
        spec: spec.clone(),
        p_axis,
        xi_axis,
        theta_axis,
        t_axis,
        values: vec![0.0; n_space * spec.n_t],
        controls: vec![Control::zero(); n_space * spec.n_t],
    };
    // terminal slice and (below) boundary nodes carry -P xi throughout
    let terminal: Vec<f64> = (0..n_space)
        .map(|i| {
            let (ip, ixi, _) = decode(i, strides);
            -grid.p_axis[ip] * grid.xi_axis[ixi]
        })
        .collect();
    let last = spec.n_t - 1;
    grid.values[last * n_space..].copy_from_slice(&terminal);

    let mut fallback_events = 0_u64;
    let mut max_inflation = 0.0_f64;
    let mut substeps_total = 0usize;
    let mut curr = terminal.clone();
    let mut next_vals = vec![0.0; n_space];
    let mut slice_controls = vec![Control::zero(); n_space];

    for it in (0..last).rev() {
        let dt_slab = grid.t_axis[it + 1] - grid.t_axis[it];
        let n_sub = ((dt_slab * rate_bound / 0.9).ceil() as usize).max(1);
        let dt_sub = dt_slab / n_sub as f64;
        for step in 0..n_sub {
            let t_left = (grid.t_axis[it + 1] - (step + 1) as f64 * dt_sub).max(grid.t_axis[it]);
            let profile = params.payoff.profile.eval(t_left);
            let ell = params.ell.eval(t_left);
            let thd = params.theta_drift.eval(t_left);
            let thv = params.theta_vol.eval(t_left);
            let update = |i: usize, out_v: &mut f64, out_u: &mut Control| -> (u64, f64) {
                let (ip, ixi, ith) = decode(i, strides);
                if grid.is_space_boundary(ip, ixi, ith) {
                    *out_v = curr[i];
                    *out_u = Control::zero();
                    return (0, 0.0);
                }
                let x = State::new(grid.p_axis[ip], grid.xi_axis[ixi], grid.theta_axis[ith]);
                let mut best = f64::INFINITY;
                let mut best_u = Control::zero();
                let mut events = 0_u64;
                let mut infl = 0.0_f64;
                for ui in 0..tables.controls.len() {
                    let co = node_coeffs(
                        params,
                        spec.rho,
                        spec.epsilon,
                        dx,
                        profile,
                        ell,
                        thd,
                        thv,
                        x,
                        zeta[ith],
                        tables.phi[ui],
                    );
                    if co.inflation > 0.0 {
                        events += 1;
                        infl = infl.max(co.inflation);
                    }
                    let g = discrete_spatial_generator(&curr, i, strides, dx, &co);
                    let cand = g + tables.k_eta_gamma[ui] * x.xi;
                    if cand < best - TIE_TOL {
                        best = cand;
                        best_u = tables.controls[ui];
                    } else if cand < best {
                        best = cand; // keep the earlier control on a near-tie
                    }
                }
                *out_v = curr[i] + dt_sub * best;
                *out_u = best_u;
                (events, infl)
            };
            let stats: Vec<(u64, f64)> = match order {
                SweepOrder::Forward => next_vals
                    .par_iter_mut()
                    .zip(slice_controls.par_iter_mut())
                    .enumerate()
                    .map(|(i, (v, u))| update(i, v, u))
                    .collect(),
                SweepOrder::Reverse => {
                    // same per-node pure update, visited in descending order
                    let mut acc = vec![(0, 0.0); n_space];
                    for i in (0..n_space).rev() {
                        let mut v = 0.0;
                        let mut u = Control::zero();
                        acc[i] = update(i, &mut v, &mut u);
                        next_vals[i] = v;
                        slice_controls[i] = u;
                    }
                    acc
                }
            };
            for (e, m) in stats {
                fallback_events += e;
                max_inflation = max_inflation.max(m);
            }
            std::mem::swap(&mut curr, &mut next_vals);
            substeps_total += 1;
        }
        grid.values[it * n_space..(it + 1) * n_space].copy_from_slice(&curr);
        grid.controls[it * n_space..(it + 1) * n_space].copy_from_slice(&slice_controls);
        for (i, v) in curr.iter().enumerate() {
            debug_assert!(v.is_finite(), "non-finite value at slab {it} node {i}");
        }
    }
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(HjbError::Malformed("solver produced non-finite values".into()));
    }
    Ok((grid, SolveReport { substeps: substeps_total, rate_bound, fallback_events, max_inflation }))
}

/// Absolute tolerance under which two control candidates are treated as
/// tied; near-ties keep the earlier (lowest-index) control so the argmin is
/// robust to last-bit rounding.
const TIE_TOL: f64 = 1e-9;

fn decode(i: usize, strides: [usize; 3]) -> (usize, usize, usize) {
    let ip = i / strides[0];
    let rem = i % strides[0];
    (ip, rem / strides[1], rem % strides[1])
}

/// One rung of the convergence ladder.
#[derive(Debug, Clone, Serialize)]
pub struct LadderRow {
    pub phase: LadderPhase,
    pub rho: f64,
    pub n: usize,
    pub epsilon: f64,
    /// Max-norm difference to the previous rung on the comparison region;
    /// absent for the first solve of a phase.
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderPhase {
    Epsilon,
    Rho,
}

/// Structured outcome of the double limit; non-convergence is reported, not
/// raised.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<LadderRow>,
    pub converged: bool,
}

impl ConvergenceReport {
    /// Successive epsilon-ladder differences for the given rho.
    pub fn epsilon_diffs(&self, rho: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == LadderPhase::Epsilon && r.rho == rho)
            .filter_map(|r| r.diff)
            .collect()
    }

    /// Successive rho-phase differences in schedule order.
    pub fn rho_diffs(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.phase == LadderPhase::Rho).filter_map(|r| r.diff).collect()
    }
}

/// Runs the double limit: for each rho in the schedule, shrink the
/// regularization `epsilon0^n` until the solutions are Cauchy within `tol`,
/// then advance rho until successive rho-solutions agree on the smallest
/// region. Returns the last solved grid with the difference table.
pub fn solve_ladder(
    params: &ModelParams,
    base_spec: &GridSpec,
    epsilon0: f64,
    n_max: usize,
    rho_schedule: &[f64],
    tol: f64,
) -> Result<(ValueGrid, ConvergenceReport), HjbError> {
    if !(epsilon0 > 0.0 && epsilon0 < 1.0) {
        return Err(HjbError::InvalidSpec(format!("epsilon0 must be in (0,1), got {epsilon0}")));
    }
    if rho_schedule.is_empty() || rho_schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HjbError::InvalidSpec("rho schedule must be nonempty and increasing".into()));
    }
    if n_max == 0 {
        return Err(HjbError::InvalidSpec("n_max must be >= 1".into()));
    }

    let mut rows = Vec::new();
    let mut prev_rho_grid: Option<ValueGrid> = None;
    let mut final_grid: Option<ValueGrid> = None;
    let mut eps_converged = false;
    let mut rho_converged = rho_schedule.len() == 1;

    for (ri, &rho) in rho_schedule.iter().enumerate() {
        let mut prev: Option<ValueGrid> = None;
        eps_converged = false;
        for n in 1..=n_max {
            let mut spec = base_spec.clone();
            spec.rho = rho;
            spec.epsilon = epsilon0.powi(n as i32);
            let (grid, _) = solve_regularized(params, &spec)?;
            let diff = prev.as_ref().map(|p| max_abs_diff_same(p, &grid));
            rows.push(LadderRow { phase: LadderPhase::Epsilon, rho, n, epsilon: spec.epsilon, diff });
            let done = match diff {
                Some(d) => d < tol,
                None => tol.is_infinite(),
            };
            prev = Some(grid);
            if done {
                eps_converged = true;
                break;
            }
        }
        let grid = prev.expect("at least one solve per rho");
        if let Some(prev_grid) = prev_rho_grid.as_ref() {
            let d = max_abs_diff_common(prev_grid, &grid, rho_schedule[0]);
            rows.push(LadderRow {
                phase: LadderPhase::Rho,
                rho,
                n: 0,
                epsilon: grid.spec.epsilon,
                diff: Some(d),
            });
            if d < tol {
                rho_converged = true;
                final_grid = Some(grid);
                break;
            }
            rho_converged = false;
        }
        if ri == rho_schedule.len() - 1 {
            final_grid = Some(grid.clone());
        }
        prev_rho_grid = Some(grid);
    }
    let grid = final_grid.or(prev_rho_grid).expect("schedule nonempty");
    Ok((grid, ConvergenceReport { rows, converged: eps_converged && rho_converged }))
}

fn max_abs_diff_same(a: &ValueGrid, b: &ValueGrid) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max-norm difference between two solutions sampled on the nodes of the
/// smallest region `rho_min`, interpolating both.
fn max_abs_diff_common(a: &ValueGrid, b: &ValueGrid, rho_min: f64) -> f64 {
    let spec = &a.spec;
    let p_axis = linspace(a.p_axis[0], rho_min, spec.n_p);
    let xi_axis = linspace(1.0 / rho_min, rho_min, spec.n_xi);
    let mut worst = 0.0_f64;
    for &t in &a.t_axis {
        for &p in &p_axis {
            for &xi in &xi_axis {
                for &th in &a.theta_axis {
                    let x = State::new(p, xi, th);
                    let (va, _) = interpolate_value(a, t, x);
                    let (vb, _) = interpolate_value(b, t, x);
                    worst = worst.max((va - vb).abs());
                }
            }
        }
    }
    worst
}

/// Linear-in-time, trilinear-in-space interpolation; exact at nodes.
/// Queries outside the hull clamp to it and raise the flag.
pub fn interpolate_value(grid: &ValueGrid, t: f64, x: State) -> (f64, bool) {
    let (it0, it1, wt, out_t) = bracket(&grid.t_axis, t);
    let (ip0, ip1, wp, out_p) = bracket(&grid.p_axis, x.p);
    let (ix0, ix1, wx, out_x) = bracket(&grid.xi_axis, x.xi);
    let (ih0, ih1, wh, out_h) = bracket(&grid.theta_axis, x.theta);
    let mut acc = 0.0;
    for (it, ft) in [(it0, 1.0 - wt), (it1, wt)] {
        if ft == 0.0 {
            continue;
        }
        for (ip, fp) in [(ip0, 1.0 - wp), (ip1, wp)] {
            for (ix, fx) in [(ix0, 1.0 - wx), (ix1, wx)] {
                for (ih, fh) in [(ih0, 1.0 - wh), (ih1, wh)] {
                    let w = ft * fp * fx * fh;
                    if w != 0.0 {
                        acc += w * grid.value_at(it, ip, ix, ih);
                    }
                }
            }
        }
    }
    (acc, out_t || out_p || out_x || out_h)
}

/// Bracketing cell and weight on a sorted uniform axis; clamps and flags
/// out-of-range queries.
fn bracket(axis: &[f64], v: f64) -> (usize, usize, f64, bool) {
    let lo = axis[0];
    let hi = axis[axis.len() - 1];
    let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    if v <= lo {
        return (0, 0, 0.0, v < lo - tol);
    }
    if v >= hi {
        let last = axis.len() - 1;
        return (last, last, 0.0, v > hi + tol);
    }
    let h = axis[1] - axis[0];
    let mut i = (((v - lo) / h).floor() as usize).min(axis.len() - 2);
    // guard against floating-point spill at cell edges
    if v < axis[i] {
        i -= 1;
    } else if v >= axis[i + 1] {
        i += 1;
    }
    let w = (v - axis[i]) / (axis[i + 1] - axis[i]);
    (i, i + 1, w, false)
}

/// Greedy policy read off the solved grid: snap to the nearest time slice
/// and the nearest spatial node, return that node's stored control; queries
/// outside the grid hull fall back to the zero control.
pub fn extract_policy(grid: &ValueGrid) -> impl Fn(f64, State) -> Control + Sync + '_ {
    move |t: f64, x: State| {
        let inside = |v: f64, axis: &[f64]| v >= axis[0] - 1e-12 && v <= axis[axis.len() - 1] + 1e-12;
        if !inside(t, &grid.t_axis)
            || !inside(x.p, &grid.p_axis)
            || !inside(x.xi, &grid.xi_axis)
            || !inside(x.theta, &grid.theta_axis)
        {
            return Control::zero();
        }
        let it = nearest(&grid.t_axis, t);
        let ip = nearest(&grid.p_axis, x.p);
        let ixi = nearest(&grid.xi_axis, x.xi);
        let ith = nearest(&grid.theta_axis, x.theta);
        grid.controls[grid.idx(it, ip, ixi, ith)]
    }
}

fn nearest(axis: &[f64], v: f64) -> usize {
    let h = axis[1] - axis[0];
    (((v - axis[0]) / h).round() as isize).clamp(0, axis.len() as isize - 1) as usize
}

/// Discrete space-time generator plus running cost at a grid node:
/// forward time difference to the next slice plus the spatial stencil used
/// by the solver (node indices clamped to the interior).
pub fn discrete_bracket(
    params: &ModelParams,
    grid: &ValueGrid,
    it: usize,
    ip: usize,
    ixi: usize,
    ith: usize,
    u: Control,
) -> f64 {
    let spec = &grid.spec;
    let it = it.min(spec.n_t - 2);
    let ip = ip.clamp(1, spec.n_p - 2);
    let ixi = ixi.clamp(1, spec.n_xi - 2);
    let ith = ith.clamp(1, spec.n_theta - 2);
    let dx = grid.dx();
    let t = grid.t_axis[it];
    let dt = grid.t_axis[it + 1] - grid.t_axis[it];
    let x = grid.node_state(ip, ixi, ith);
    let phi = params.cobb_douglas(u);
    let co = node_coeffs(
        params,
        spec.rho,
        spec.epsilon,
        dx,
        params.payoff.profile.eval(t),
        params.ell.eval(t),
        params.theta_drift.eval(t),
        params.theta_vol.eval(t),
        x,
        params.cutoff_zeta(x.theta),
        phi,
    );
    let n_space = spec.n_nodes_space();
    let strides = [spec.n_xi * spec.n_theta, spec.n_theta, 1];
    let slice = &grid.values[it * n_space..(it + 1) * n_space];
    let base = (ip * spec.n_xi + ixi) * spec.n_theta + ith;
    let g_space = discrete_spatial_generator(slice, base, strides, dx, &co);
    let w_t = (grid.value_at(it + 1, ip, ixi, ith) - grid.value_at(it, ip, ixi, ith)) / dt;
    w_t + g_space + params.running_cost(x, u)
}

/// Discrete Markov control policy: a time-slab by state-cell table of
/// constant controls, held for the duration of each slab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub t_start: f64,
    pub t_end: f64,
    pub n_slabs: usize,
    /// Covered box, axis order (P, xi, theta).
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub cells_per_axis: [usize; 3],
    /// Slab-major, then cell index `(cp * nXi + cxi) * nTheta + cth`.
    pub controls: Vec<Control>,
    /// Selection excess of the frozen control across each cell.
    pub residuals: Vec<f64>,
    /// Cells whose residual exceeded the target and fell back to the
    /// default control.
    pub fallback: Vec<bool>,
    pub default_control: Control,
}

impl PolicyTable {
    pub fn n_cells(&self) -> usize {
        self.cells_per_axis.iter().product()
    }

    pub fn default_control(&self) -> Control {
        self.default_control
    }

    /// Index of the slab containing `t`, if any.
    pub fn slab_index(&self, t: f64) -> Option<usize> {
        if t < self.t_start - 1e-12 || t >= self.t_end - 1e-12 || self.n_slabs == 0 {
            return None;
        }
        let w = (self.t_end - self.t_start) / self.n_slabs as f64;
        Some((((t - self.t_start) / w).floor() as usize).min(self.n_slabs - 1))
    }

    fn cell_index(&self, x: State) -> Option<usize> {
        let v = [x.p, x.xi, x.theta];
        let mut idx = 0usize;
        for i in 0..3 {
            if v[i] < self.lo[i] || v[i] > self.hi[i] {
                return None;
            }
            let n = self.cells_per_axis[i];
            let w = (self.hi[i] - self.lo[i]) / n as f64;
            let c = (((v[i] - self.lo[i]) / w).floor() as usize).min(n - 1);
            idx = idx * n + c;
        }
        Some(idx)
    }

    /// Control assigned to the cell containing `x` within the given slab;
    /// the default control outside the covered box.
    pub fn control_at(&self, slab: usize, x: State) -> Control {
        match self.cell_index(x) {
            Some(cell) => self.controls[slab * self.n_cells() + cell],
            None => self.default_control,
        }
    }

    pub fn cell_bounds(&self, cell: usize) -> ([f64; 3], [f64; 3]) {
        let n = self.cells_per_axis;
        let cth = cell % n[2];
        let cxi = (cell / n[2]) % n[1];
        let cp = cell / (n[1] * n[2]);
        let c = [cp, cxi, cth];
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for i in 0..3 {
            let w = (self.hi[i] - self.lo[i]) / n[i] as f64;
            lo[i] = self.lo[i] + c[i] as f64 * w;
            hi[i] = lo[i] + w;
        }
        (lo, hi)
    }
}

/// Splits a cell budget into per-axis counts, as equal as possible with the
/// product not exceeding the budget.
fn cell_split(k0: usize) -> [usize; 3] {
    let base = (k0 as f64).cbrt().floor().max(1.0) as usize;
    let mut n = [base; 3];
    for i in 0..3 {
        if (n[0] + usize::from(i == 0)) * (n[1] + usize::from(i == 1)) * (n[2] + usize::from(i == 2))
            <= k0
        {
            n[i] += 1;
        }
    }
    n
}

/// Builds the discrete Markov control policy from a solved grid: M equal
/// time slabs over `[0, T - delta]`, K0 boxes over the delta-shrunk region;
/// each (slab, cell) freezes the control minimizing the discrete bracket at
/// the cell-center node. The recorded residual is the worst selection
/// excess of that frozen control over the cell's corner and center nodes;
/// cells whose residual exceeds `eps_target / (4T)` fall back to the
/// default control and are flagged.
pub fn synthesize_discrete_policy(
    params: &ModelParams,
    grid: &ValueGrid,
    m: usize,
    k0: usize,
    delta: f64,
    eps_target: f64,
) -> Result<PolicyTable, HjbError> {
    let rho = grid.spec.rho;
    if !(delta > 0.0) || rho - delta <= params.r || rho - delta <= 1.0 {
        return Err(HjbError::InvalidSpec(format!(
            "delta {delta} leaves no room inside rho {rho}"
        )));
    }
    if m == 0 || k0 == 0 {
        return Err(HjbError::InvalidSpec("m and k0 must be >= 1".into()));
    }
    let horizon = *grid.t_axis.last().unwrap();
    if delta >= horizon {
        return Err(HjbError::InvalidSpec("delta must be smaller than the horizon".into()));
    }
    let cells_per_axis = cell_split(k0);
    let lo = [params.r, 1.0 / (rho - delta), -params.h];
    let hi = [rho - delta, rho - delta, params.h];
    let threshold = eps_target / (4.0 * horizon);
    let t_end = horizon - delta;
    let n_cells: usize = cells_per_axis.iter().product();
    let mut table = PolicyTable {
        t_start: grid.t_axis[0],
        t_end,
        n_slabs: m,
        lo,
        hi,
        cells_per_axis,
        controls: vec![Control::zero(); m * n_cells],
        residuals: vec![0.0; m * n_cells],
        fallback: vec![false; m * n_cells],
        default_control: Control::zero(),
    };
    let controls: Vec<Control> = grid.spec.control_grid.iter().collect();
    let node_of = |v: f64, axis: &[f64]| nearest(axis, v);
    for slab in 0..m {
        let t_rep = table.t_start + (t_end - table.t_start) * slab as f64 / m as f64;
        let it = nearest(&grid.t_axis, t_rep).min(grid.spec.n_t - 2);
        for cell in 0..n_cells {
            let (clo, chi) = table.cell_bounds(cell);
            let center =
                State::new(0.5 * (clo[0] + chi[0]), 0.5 * (clo[1] + chi[1]), 0.5 * (clo[2] + chi[2]));
            let cp = node_of(center.p, &grid.p_axis);
            let cxi = node_of(center.xi, &grid.xi_axis);
            let cth = node_of(center.theta, &grid.theta_axis);
            let mut best = f64::INFINITY;
            let mut best_u = Control::zero();
            for &u in &controls {
                let b = discrete_bracket(params, grid, it, cp, cxi, cth, u);
                if b < best - TIE_TOL {
                    best = b;
                    best_u = u;
                } else if b < best {
                    best = b;
                }
            }
            // worst excess of the frozen control over the per-node optimum
            // across the cell's probe nodes
            let mut residual = 0.0_f64;
            let mut probes = vec![(cp, cxi, cth)];
            for &p in &[clo[0], chi[0]] {
                for &xi in &[clo[1], chi[1]] {
                    for &th in &[clo[2], chi[2]] {
                        probes.push((
                            node_of(p, &grid.p_axis),
                            node_of(xi, &grid.xi_axis),
                            node_of(th, &grid.theta_axis),
                        ));
                    }
                }
            }
            probes.dedup();
            for &(ip, ixi, ith) in &probes {
                let frozen = discrete_bracket(params, grid, it, ip, ixi, ith, best_u);
                let opt = controls
                    .iter()
                    .map(|&u| discrete_bracket(params, grid, it, ip, ixi, ith, u))
                    .fold(f64::INFINITY, f64::min);
                residual = residual.max(frozen - opt);
            }
            let k = slab * n_cells + cell;
            table.residuals[k] = residual;
            if residual > threshold {
                table.fallback[k] = true;
                table.controls[k] = table.default_control;
            } else {
                table.controls[k] = best_u;
            }
        }
    }
    Ok(table)
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    spec: GridSpec,
    p_axis: Vec<f64>,
    xi_axis: Vec<f64>,
    theta_axis: Vec<f64>,
    t_axis: Vec<f64>,
    n_values: usize,
}

/// Persists a solved grid as `{base}.json` (spec and axes) plus
/// `{base}.csv` (one `value,eta,c` row per node in index order).
pub fn save_value_grid(grid: &ValueGrid, base: &Path) -> Result<(), HjbError> {
    let header = GridHeader {
        spec: grid.spec.clone(),
        p_axis: grid.p_axis.clone(),
        xi_axis: grid.xi_axis.clone(),
        theta_axis: grid.theta_axis.clone(),
        t_axis: grid.t_axis.clone(),
        n_values: grid.values.len(),
    };
    std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    let mut w = BufWriter::new(std::fs::File::create(base.with_extension("csv"))?);
    writeln!(w, "value,eta,c")?;
    for (v, u) in grid.values.iter().zip(&grid.controls) {
        writeln!(w, "{:e},{:e},{:e}", v, u.eta, u.c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_value_grid(base: &Path) -> Result<ValueGrid, HjbError> {
    let header: GridHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    let file = std::fs::File::open(base.with_extension("csv"))?;
    let mut values = Vec::with_capacity(header.n_values);
    let mut controls = Vec::with_capacity(header.n_values);
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if ln == 0 {
            if line.trim() != "value,eta,c" {
                return Err(HjbError::Malformed(format!("unexpected csv header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut take = || -> Result<f64, HjbError> {
            parts
                .next()
                .ok_or_else(|| HjbError::Malformed(format!("short row at line {}", ln + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| HjbError::Malformed(format!("line {}: {e}", ln + 1)))
        };
        values.push(take()?);
        controls.push(Control { eta: take()?, c: take()? });
    }
    if values.len() != header.n_values {
        return Err(HjbError::Malformed(format!(
            "expected {} rows, found {}",
            header.n_values,
            values.len()
        )));
    }
    Ok(ValueGrid {
        spec: header.spec,
        p_axis: header.p_axis,
        xi_axis: header.xi_axis,
        theta_axis: header.theta_axis,
        t_axis: header.t_axis,
        values,
        controls,
    })
}

/// Persists a policy table as CSV: `# key=value` metadata lines, then one
/// row per (slab, cell) with the cell bounds, control, and residual.
pub fn save_policy_table(table: &PolicyTable, path: &Path) -> Result<(), HjbError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# t_start={:e}", table.t_start)?;
    writeln!(w, "# t_end={:e}", table.t_end)?;
    writeln!(w, "# n_slabs={}", table.n_slabs)?;
    writeln!(w, "# lo={:e},{:e},{:e}", table.lo[0], table.lo[1], table.lo[2])?;
    writeln!(w, "# hi={:e},{:e},{:e}", table.hi[0], table.hi[1], table.hi[2])?;
    writeln!(
        w,
        "# cells_per_axis={},{},{}",
        table.cells_per_axis[0], table.cells_per_axis[1], table.cells_per_axis[2]
    )?;
    writeln!(w, "# default_control={:e},{:e}", table.default_control.eta, table.default_control.c)?;
    writeln!(w, "slab,cell,p_lo,p_hi,xi_lo,xi_hi,theta_lo,theta_hi,eta,c,residual,fallback")?;
    for slab in 0..table.n_slabs {
        for cell in 0..table.n_cells() {
            let (lo, hi) = table.cell_bounds(cell);
            let k = slab * table.n_cells() + cell;
            let u = table.controls[k];
            writeln!(
                w,
                "{slab},{cell},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                lo[0],
                hi[0],
                lo[1],
                hi[1],
                lo[2],
                hi[2],
                u.eta,
                u.c,
                table.residuals[k],
                u8::from(table.fallback[k]),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_policy_table(path: &Path) -> Result<PolicyTable, HjbError> {
    let text = std::fs::read_to_string(path)?;
    let mut meta = std::collections::HashMap::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("slab,") {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        rows.push(line.to_string());
    }
    let get = |k: &str| -> Result<&String, HjbError> {
        meta.get(k).ok_or_else(|| HjbError::Malformed(format!("missing metadata {k}")))
    };
    let parse1 = |s: &str| -> Result<f64, HjbError> {
        s.parse::<f64>().map_err(|e| HjbError::Malformed(format!("metadata: {e}")))
    };
    let parse3 = |s: &str| -> Result<[f64; 3], HjbError> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| HjbError::Malformed(format!("metadata: {e}")))?;
        v.try_into().map_err(|_| HjbError::Malformed("expected 3 components".into()))
    };
    let n_slabs: usize =
        get("n_slabs")?.parse().map_err(|_| HjbError::Malformed("bad n_slabs".into()))?;
    let cpa_f = parse3(get("cells_per_axis")?)?;
    let cells_per_axis = [cpa_f[0] as usize, cpa_f[1] as usize, cpa_f[2] as usize];
    let dc: Vec<f64> = get("default_control")?
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| HjbError::Malformed(format!("metadata: {e}")))?;
    let n_cells: usize = cells_per_axis.iter().product();
    let mut table = PolicyTable {
        t_start: parse1(get("t_start")?)?,
        t_end: parse1(get("t_end")?)?,
        n_slabs,
        lo: parse3(get("lo")?)?,
        hi: parse3(get("hi")?)?,
        cells_per_axis,
        controls: vec![Control::zero(); n_slabs * n_cells],
        residuals: vec![0.0; n_slabs * n_cells],
        fallback: vec![false; n_slabs * n_cells],
        default_control: Control {
            eta: *dc.first().ok_or_else(|| HjbError::Malformed("bad default_control".into()))?,
            c: *dc.get(1).ok_or_else(|| HjbError::Malformed("bad default_control".into()))?,
        },
    };
    if rows.len() != n_slabs * n_cells {
        return Err(HjbError::Malformed(format!(
            "expected {} rows, found {}",
            n_slabs * n_cells,
            rows.len()
        )));
    }
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 12 {
            return Err(HjbError::Malformed(format!("expected 12 columns: {row}")));
        }
        let slab: usize = f[0].parse().map_err(|_| HjbError::Malformed("bad slab".into()))?;
        let cell: usize = f[1].parse().map_err(|_| HjbError::Malformed("bad cell".into()))?;
        if slab >= n_slabs || cell >= n_cells {
            return Err(HjbError::Malformed(format!("row out of range: {row}")));
        }
        let num = |i: usize| -> Result<f64, HjbError> {
            f[i].parse::<f64>().map_err(|e| HjbError::Malformed(format!("{row}: {e}")))
        };
        let k = slab * n_cells + cell;
        table.controls[k] = Control { eta: num(8)?, c: num(9)? };
        table.residuals[k] = num(10)?;
        table.fallback[k] = f[11].trim() == "1";
    }
    Ok(table)
}
