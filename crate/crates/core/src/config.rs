//! Run configuration schema and the batch command implementations behind
//! the CLI: solve, simulate, verify, and policy export. Every artifact
//! embeds the resolved configuration and seed so runs are reproducible
//! from their own headers.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{gronwall_constant, MC_SE_SLACK};
use crate::dpp::{self, Candidate, StoppingRule};
use crate::hjb::{self, GridSpec, ValueGrid};
use crate::model::{well_posedness_bound, validate_conditions, Control, ModelParams, State};
use crate::sde::{self, Policy, SimConfig, TailHarness};
use crate::viscosity::{self, SiteSet};

/// Process exit conventions: pass, usage/config error, budget exhaustion,
/// verification failure.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Hjb(#[from] crate::hjb::HjbError),
    #[error(transparent)]
    Sde(#[from] crate::sde::SdeError),
    #[error(transparent)]
    Dpp(#[from] crate::dpp::DppError),
    #[error(transparent)]
    Viscosity(#[from] crate::viscosity::ViscosityError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One JSON document per run; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridSpec,
    pub sim: SimConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub solve: Option<SolveSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub export_policy: Option<ExportPolicySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub epsilon0: f64,
    pub n_max: usize,
    pub rho_schedule: Vec<f64>,
    /// Cauchy tolerance for the ladder; `null` (or omitted) means no
    /// tolerance — run a single solve per rung. JSON has no infinity, so
    /// an infinite tolerance round-trips as `null`.
    #[serde(with = "tol_serde", default = "default_tol")]
    pub tol: f64,
    /// Also synthesize and write a discrete policy table.
    #[serde(default)]
    pub policy: Option<PolicySection>,
}

fn default_tol() -> f64 {
    f64::INFINITY
}

mod tol_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub m: usize,
    pub k0: usize,
    pub delta: f64,
    pub eps_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub s: f64,
    /// Start state (P, xi, theta).
    pub y: [f64; 3],
    /// Constant control (eta, c); mutually exclusive with `policy_file`.
    #[serde(default)]
    pub control: Option<[f64; 2]>,
    /// Path to an exported policy table CSV.
    #[serde(default)]
    pub policy_file: Option<PathBuf>,
    /// Dump step-by-step traces for the first N paths.
    #[serde(default)]
    pub n_trace_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default)]
    pub dpp: Option<DppSection>,
    #[serde(default)]
    pub viscosity: Option<ViscositySection>,
    #[serde(default)]
    pub martingale: Option<MartingaleSection>,
    #[serde(default)]
    pub tail: Option<TailSection>,
    #[serde(default)]
    pub conditions: Option<ConditionsSection>,
    #[serde(default)]
    pub bound: Option<BoundSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DppSection {
    pub s: f64,
    pub y: [f64; 3],
    pub rules: Vec<StoppingRule>,
    /// Tolerance added to the lower check's MC slack.
    pub tolerance: f64,
    /// Allowed optimality gap for the upper check.
    pub delta: f64,
    /// Solved grid artifact base path; defaults to `value_grid` in the
    /// output directory.
    #[serde(default)]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscositySection {
    /// Tolerance scale: tolerance = c1 * (max dx + dt).
    pub c1: f64,
    pub stencil_radius: usize,
    /// Minimum fraction of sites that must pass each check.
    pub min_pass_fraction: f64,
    #[serde(default)]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleSection {
    pub s: f64,
    pub y: [f64; 3],
    pub times: Vec<f64>,
    #[serde(default)]
    pub control: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSection {
    pub kappa: f64,
    pub t_end: f64,
    pub levels: Vec<f64>,
    pub harness: TailHarness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsSection {
    pub sample_budget: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub n_triples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportPolicySection {
    #[serde(default)]
    pub grid: Option<PathBuf>,
    pub m: usize,
    pub k0: usize,
    pub delta: f64,
    pub eps_target: f64,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.grid.validate(&self.model)?;
        self.sim.validate(&self.model)?;
        if let Some(s) = &self.simulate {
            if s.control.is_some() && s.policy_file.is_some() {
                return Err(CliError::Config(
                    "simulate: control and policy_file are mutually exclusive".into(),
                ));
            }
        }
        Ok(())
    }
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(doc)?)?;
    Ok(())
}

/// Header block carried by every artifact: command, resolved config, seed.
fn header(command: &str, cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "command": command, "seed": cfg.sim.seed, "config": cfg })
}

fn grid_artifact_base(out: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| out.join("value_grid"))
}

fn load_grid_artifact(base: &Path) -> Result<ValueGrid, CliError> {
    if !base.with_extension("json").exists() {
        return Err(CliError::MissingArtifact(format!(
            "no solved grid at {} (run `solve` first)",
            base.display()
        )));
    }
    Ok(hjb::load_value_grid(base)?)
}

/// Solves the ladder and writes the grid, convergence report, and optional
/// policy table. Returns the process exit code.
pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<i32, CliError> {
    let section = cfg
        .solve
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `solve` section".into()))?;
    std::fs::create_dir_all(out)?;
    let (grid, report) = hjb::solve_ladder(
        &cfg.model,
        &cfg.grid,
        section.epsilon0,
        section.n_max,
        &section.rho_schedule,
        section.tol,
    )?;
    hjb::save_value_grid(&grid, &out.join("value_grid"))?;
    write_json(
        &out.join("convergence.json"),
        &serde_json::json!({ "header": header("solve", cfg), "report": report }),
    )?;
    if let Some(p) = &section.policy {
        let table = hjb::synthesize_discrete_policy(
            &cfg.model,
            &grid,
            p.m,
            p.k0,
            p.delta,
            p.eps_target,
        )?;
        hjb::save_policy_table(&table, &out.join("policy_table.csv"))?;
    }
    Ok(if report.converged { EXIT_PASS } else { EXIT_BUDGET })
}

/// Monte Carlo cost estimate from the configured start, with optional
/// per-path traces.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<i32, CliError> {
    let section = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `simulate` section".into()))?;
    std::fs::create_dir_all(out)?;
    let y = State::new(section.y[0], section.y[1], section.y[2]);
    let table;
    let policy = match (&section.control, &section.policy_file) {
        (Some([eta, c]), _) => Policy::Constant(Control { eta: *eta, c: *c }),
        (None, Some(path)) => {
            table = hjb::load_policy_table(path)?;
            Policy::Table(&table)
        }
        (None, None) => Policy::Constant(Control::zero()),
    };
    let est = sde::estimate_cost(&cfg.model, &cfg.sim, section.s, y, &policy, 0.0)?;
    write_json(
        &out.join("estimate.json"),
        &serde_json::json!({ "header": header("simulate", cfg), "estimate": est }),
    )?;
    if section.n_trace_paths > 0 {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("traces.csv"))?);
        writeln!(w, "# seed={}", cfg.sim.seed)?;
        writeln!(w, "path,t,p,xi,theta,eta,c")?;
        for i in 0..section.n_trace_paths.min(cfg.sim.n_paths) as u64 {
            let mut rows = Vec::new();
            sde::simulate_stopped(
                &cfg.model,
                &cfg.sim,
                section.s,
                y,
                &policy,
                0.0,
                i,
                None,
                Some(&mut rows),
            )?;
            for r in rows {
                writeln!(
                    w,
                    "{i},{:e},{:e},{:e},{:e},{:e},{:e}",
                    r.t, r.p, r.xi, r.theta, r.eta, r.c
                )?;
            }
        }
    }
    Ok(EXIT_PASS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyWhich {
    Dpp,
    Viscosity,
    Martingale,
    Tail,
    Conditions,
    Bound,
}

impl VerifyWhich {
    pub const ALL: [VerifyWhich; 6] = [
        VerifyWhich::Dpp,
        VerifyWhich::Viscosity,
        VerifyWhich::Martingale,
        VerifyWhich::Tail,
        VerifyWhich::Conditions,
        VerifyWhich::Bound,
    ];
}

/// Runs the named verification suites; exit 0 iff all pass.
pub fn cmd_verify(cfg: &RunConfig, out: &Path, which: &[VerifyWhich]) -> Result<i32, CliError> {
    let section = cfg
        .verify
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `verify` section".into()))?;
    std::fs::create_dir_all(out)?;
    let mut all_pass = true;
    for &w in which {
        let (name, doc, pass): (&str, serde_json::Value, bool) = match w {
            VerifyWhich::Dpp => {
                let d = section
                    .dpp
                    .as_ref()
                    .ok_or_else(|| CliError::Config("verify: no `dpp` section".into()))?;
                let grid = load_grid_artifact(&grid_artifact_base(out, d.grid.as_ref()))?;
                let y = State::new(d.y[0], d.y[1], d.y[2]);
                let candidates = dpp::default_candidates(&grid);
                let mut reports = Vec::new();
                let mut pass = true;
                for &rule in &d.rules {
                    let lower = dpp::verify_dp_lower(
                        &cfg.model,
                        &grid,
                        d.s,
                        y,
                        rule,
                        &candidates,
                        &cfg.sim,
                        d.tolerance,
                    )?;
                    let upper = dpp::verify_dp_upper(
                        &cfg.model,
                        &grid,
                        d.s,
                        y,
                        rule,
                        &Candidate::Greedy,
                        &cfg.sim,
                        d.delta,
                    )?;
                    pass &= lower.pass && upper.pass;
                    reports.push(serde_json::json!({
                        "rule": rule, "lower": lower, "upper": upper
                    }));
                }
                ("dpp", serde_json::json!(reports), pass)
            }
            VerifyWhich::Viscosity => {
                let v = section
                    .viscosity
                    .as_ref()
                    .ok_or_else(|| CliError::Config("verify: no `viscosity` section".into()))?;
                let grid = load_grid_artifact(&grid_artifact_base(out, v.grid.as_ref()))?;
                let dx = grid.dx();
                let tol = v.c1 * (dx[0].max(dx[1]).max(dx[2]) + grid.dt_slab());
                let sites = SiteSet::full(&grid, v.stencil_radius);
                let sub =
                    viscosity::check_subsolution(&cfg.model, &grid, tol, &sites, v.stencil_radius)?;
                let sup = viscosity::check_supersolution(
                    &cfg.model,
                    &grid,
                    tol,
                    &sites,
                    v.stencil_radius,
                )?;
                // per-site residual table for plotting
                let mut w = std::io::BufWriter::new(
                    std::fs::File::create(out.join("viscosity_residuals.csv"))?,
                );
                writeln!(w, "check,it,ip,ixi,ith,boundary,residual,violation")?;
                for (label, rep) in [("sub", &sub), ("super", &sup)] {
                    for r in &rep.residuals {
                        writeln!(
                            w,
                            "{label},{},{},{},{},{},{:e},{}",
                            r.site[0],
                            r.site[1],
                            r.site[2],
                            r.site[3],
                            u8::from(r.boundary),
                            r.residual,
                            u8::from(r.violation)
                        )?;
                    }
                }
                let pass = sub.pass_fraction() >= v.min_pass_fraction
                    && sup.pass_fraction() >= v.min_pass_fraction;
                let doc = serde_json::json!({
                    "tolerance": tol,
                    "sub": { "n_sites": sub.n_sites, "violations": sub.n_violations_sub,
                             "worst": sub.worst_residual, "pass_fraction": sub.pass_fraction() },
                    "super": { "n_sites": sup.n_sites, "violations": sup.n_violations_super,
                               "worst": sup.worst_residual, "pass_fraction": sup.pass_fraction() },
                });
                ("viscosity", doc, pass)
            }
            VerifyWhich::Martingale => {
                let m = section
                    .martingale
                    .as_ref()
                    .ok_or_else(|| CliError::Config("verify: no `martingale` section".into()))?;
                let y = State::new(m.y[0], m.y[1], m.y[2]);
                let u = m.control.map(|[eta, c]| Control { eta, c }).unwrap_or(Control::zero());
                let rep = sde::check_xi_martingale(
                    &cfg.model,
                    &cfg.sim,
                    m.s,
                    y,
                    &Policy::Constant(u),
                    &m.times,
                )?;
                let pass = rep.pass;
                ("martingale", serde_json::json!(rep), pass)
            }
            VerifyWhich::Tail => {
                let t = section
                    .tail
                    .as_ref()
                    .ok_or_else(|| CliError::Config("verify: no `tail` section".into()))?;
                let rep =
                    sde::check_tail_bound(t.kappa, t.t_end, &t.levels, &cfg.sim, t.harness)?;
                let pass = rep.pass;
                ("tail", serde_json::json!(rep), pass)
            }
            VerifyWhich::Conditions => {
                let c = section
                    .conditions
                    .as_ref()
                    .ok_or_else(|| CliError::Config("verify: no `conditions` section".into()))?;
                let rep = validate_conditions(&cfg.model, c.sample_budget, c.seed)?;
                let pass = rep.all_pass();
                ("conditions", serde_json::json!(rep), pass)
            }
            VerifyWhich::Bound => {
                let b = section
                    .bound
                    .as_ref()
                    .ok_or_else(|| CliError::Config("verify: no `bound` section".into()))?;
                let (doc, pass) = run_bound_check(cfg, b)?;
                ("bound", doc, pass)
            }
        };
        all_pass &= pass;
        write_json(
            &out.join(format!("{name}_report.json")),
            &serde_json::json!({ "header": header("verify", cfg), "pass": pass, "report": doc }),
        )?;
    }
    Ok(if all_pass { EXIT_PASS } else { EXIT_VERIFY })
}

/// Checks `|MC cost| <= well-posedness bound` on random start/control
/// triples, with the Gronwall constant frozen from the measured growth
/// condition.
fn run_bound_check(
    cfg: &RunConfig,
    section: &BoundSection,
) -> Result<(serde_json::Value, bool), CliError> {
    use rand::{Rng, SeedableRng};
    let params = &cfg.model;
    let conditions = validate_conditions(params, 2000, section.seed)?;
    let derived_k = gronwall_constant(conditions.c2_growth.constant.sqrt(), params.horizon);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(section.seed);
    let rho = cfg.grid.rho;
    let mut rows = Vec::new();
    let mut pass = true;
    for i in 0..section.n_triples {
        let s = rng.random_range(0.0..0.5 * params.horizon);
        let y = State::new(
            rng.random_range(params.r..rho),
            rng.random_range(1.0 / rho..rho),
            rng.random_range(-0.8 * params.h..0.8 * params.h),
        );
        let u = Control {
            eta: rng.random_range(0.0..params.eta_max),
            c: rng.random_range(0.0..params.c_max),
        };
        let mut sim = cfg.sim;
        sim.seed = cfg.sim.seed.wrapping_add(i as u64);
        let est = sde::estimate_cost(params, &sim, s, y, &Policy::Constant(u), 0.0)?;
        let bound = well_posedness_bound(params, y, derived_k)?;
        let ok = est.mean.abs() <= bound + MC_SE_SLACK * est.std_error;
        pass &= ok;
        rows.push(serde_json::json!({
            "s": s, "y": [y.p, y.xi, y.theta], "control": [u.eta, u.c],
            "mean": est.mean, "std_error": est.std_error, "bound": bound, "pass": ok
        }));
    }
    Ok((serde_json::json!({ "derived_k": derived_k, "triples": rows }), pass))
}

/// Synthesizes and writes a discrete policy table from a solved grid.
pub fn cmd_export_policy(cfg: &RunConfig, out: &Path) -> Result<i32, CliError> {
    let section = cfg
        .export_policy
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `export_policy` section".into()))?;
    std::fs::create_dir_all(out)?;
    let grid = load_grid_artifact(&grid_artifact_base(out, section.grid.as_ref()))?;
    let table = hjb::synthesize_discrete_policy(
        &cfg.model,
        &grid,
        section.m,
        section.k0,
        section.delta,
        section.eps_target,
    )?;
    hjb::save_policy_table(&table, &out.join("policy_table.csv"))?;
    write_json(
        &out.join("export_meta.json"),
        &serde_json::json!({
            "header": header("export-policy", cfg),
            "n_slabs": table.n_slabs,
            "n_cells": table.n_cells(),
            "n_fallback": table.fallback.iter().filter(|&&b| b).count(),
        }),
    )?;
    Ok(EXIT_PASS)
}
