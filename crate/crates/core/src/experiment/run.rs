//! Subcommand dispatch.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ControlWeighting, ExperimentConfig, ModelConfig, PolicyKind, X0Policy};
use super::report::{gaussian_diagnostics, ArmReport, ComparisonReport};
use crate::coeffs::{assemble_coeffs, solve_moments, DiffusionCoeffs};
use crate::conditions::{validate_conditions, ConditionGrid};
use crate::control::{Policy, QuadraticCost, ZeroFeedback};
use crate::ctmc::{run_trials, GenericKernel, SimOptions, TrialRun, TrialsConfig};
use crate::error::{Error, Result};
use crate::fluid::{fixed_point, solve_fluid, FluidPath};
use crate::lossnet::{table1_config, LossNetwork, REFERENCE_TABLE1};
use crate::lqr::{lqr_value, solve_riccati, LqrFeedback, RiccatiSolution};
use crate::model::{nearest_lattice_counts, ModelSpec};
use crate::rng::derive_seed;
use crate::sde::{estimate_j, SdeOptions};
use crate::stats::Stat;
use crate::two_state::two_state_model;

/// Thresholds of the structural coefficient identities.
pub const SIGMA_SQUARE_TOL: f64 = 1e-8;
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
pub const ZERO_BLOCK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Fluid,
    Coeffs,
    Riccati,
    Simulate,
    Sde,
    Validate,
    Table1,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fluid" => Command::Fluid,
            "coeffs" => Command::Coeffs,
            "riccati" => Command::Riccati,
            "simulate" => Command::Simulate,
            "sde" => Command::Sde,
            "validate" => Command::Validate,
            "table1" => Command::Table1,
            other => return Err(Error::Config(format!("unknown command {other:?}"))),
        })
    }
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fluid => "fluid",
            Command::Coeffs => "coeffs",
            Command::Riccati => "riccati",
            Command::Simulate => "simulate",
            Command::Sde => "sde",
            Command::Validate => "validate",
            Command::Table1 => "table1",
        }
    }
}

/// Process exit code for an error: 2 config, 3 model validation, 4 anything
/// else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Validation(_) => 3,
        _ => 4,
    }
}

/// Structured error record printed by the binary.
pub fn error_json(err: &Error) -> Value {
    let kind = match err {
        Error::Config(_) => "config",
        Error::Validation(_) => "validation",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::InvalidJump { .. } | Error::Model(_) => "model",
        Error::Consistency(_) => "consistency",
        Error::Numerical(_) => "numerical",
        Error::Simulation(_) | Error::Trial { .. } => "simulation",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    json!({ "error": kind, "message": err.to_string(), "exit_code": exit_code(err) })
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    /// Contents of `summary.json`.
    pub summary: Value,
    /// Human-readable digest for the terminal.
    pub text: String,
}

enum Built {
    Generic(ModelSpec),
    Lossnet(Box<LossNetwork>),
}

impl Built {
    fn new(model: &ModelConfig) -> Result<Self> {
        Ok(match model {
            ModelConfig::TwoState(p) => Built::Generic(two_state_model(p)?),
            ModelConfig::Lossnet(p) => Built::Lossnet(Box::new(LossNetwork::new(p)?)),
        })
    }

    fn spec(&self) -> &ModelSpec {
        match self {
            Built::Generic(s) => s,
            Built::Lossnet(n) => n.spec(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_trials(
        &self,
        n: usize,
        fluid: &FluidPath,
        counts: &[i64],
        policy: &Policy,
        cost: &QuadraticCost,
        cfg: &TrialsConfig,
    ) -> Result<TrialRun> {
        let controlled = policy.is_controlled();
        match self {
            Built::Generic(s) => run_trials(&GenericKernel::new(s, n, controlled), fluid, counts, policy, cost, cfg),
            Built::Lossnet(net) => run_trials(&net.kernel(n, controlled), fluid, counts, policy, cost, cfg),
        }
    }
}

/// Shared pipeline state, built lazily by each command.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    built: Built,
    x0: Vec<f64>,
    timing: Vec<(String, f64)>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let built = Built::new(&cfg.model)?;
        let spec = built.spec();
        let d = spec.d();
        let uniform = vec![1.0 / d as f64; d];
        let x0 = match &cfg.x0 {
            X0Policy::Uniform => uniform,
            X0Policy::FixedPoint => fixed_point(spec, &uniform, 1e-13)?,
            X0Policy::Vector(v) => {
                if v.len() != d {
                    return Err(Error::Config(format!("x0: has {} entries, model has d = {d}", v.len())));
                }
                v.clone()
            }
        };
        Ok(Self {
            cfg,
            built,
            x0,
            timing: Vec::new(),
        })
    }

    fn spec(&self) -> &ModelSpec {
        self.built.spec()
    }

    fn timed<T>(&mut self, label: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timing.push((label.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn fluid(&mut self) -> Result<FluidPath> {
        self.timed("fluid", |c| solve_fluid(c.spec(), &c.x0, c.cfg.horizon, c.cfg.fluid_h))
    }

    fn coeffs(&mut self, fluid: &FluidPath) -> Result<DiffusionCoeffs> {
        self.timed("coeffs", |c| assemble_coeffs(c.spec(), fluid, &fluid.t_grid()))
    }

    fn cost(&self, alpha: f64) -> QuadraticCost {
        match self.cfg.control_weighting {
            ControlWeighting::Reduced => QuadraticCost::reduced(alpha, self.spec().control_dim()),
            ControlWeighting::Multiplicity => QuadraticCost::from_multiplicity(alpha, self.spec().multiplicity()),
        }
    }

    fn riccati(&mut self, coeffs: &DiffusionCoeffs, alpha: f64) -> Result<Arc<RiccatiSolution>> {
        let d = coeffs.d();
        let r = self.cost(alpha).control_weight;
        self.timed(&format!("riccati alpha={alpha}"), |c| {
            solve_riccati(coeffs, &DMatrix::identity(d, d), &r, c.cfg.horizon, c.cfg.riccati_h).map(Arc::new)
        })
    }

    fn lqr_policy(&self, sol: Arc<RiccatiSolution>) -> Policy {
        Policy::Feedback(Arc::new(LqrFeedback::new(sol, Some(self.spec().control_box().clone()))))
    }

    fn policy(&mut self, coeffs: Option<&DiffusionCoeffs>) -> Result<(Policy, Option<Arc<RiccatiSolution>>)> {
        Ok(match self.cfg.policy {
            PolicyKind::Uncontrolled => (Policy::Uncontrolled, None),
            PolicyKind::Zero => (
                Policy::Feedback(Arc::new(ZeroFeedback {
                    dim: self.spec().control_dim(),
                })),
                None,
            ),
            PolicyKind::Lqr => {
                let coeffs = coeffs.expect("lqr policy needs coefficients");
                let sol = self.riccati(coeffs, self.cfg.alpha())?;
                (self.lqr_policy(sol.clone()), Some(sol))
            }
        })
    }

    fn counts(&self) -> Vec<i64> {
        nearest_lattice_counts(&self.x0, self.cfg.n)
    }

    /// `V_N(0) = √N (μ_N(0) − x0)`.
    fn v0(&self, counts: &[i64]) -> Vec<f64> {
        let nf = self.cfg.n as f64;
        counts
            .iter()
            .zip(&self.x0)
            .map(|(&c, &x)| nf.sqrt() * (c as f64 / nf - x))
            .collect()
    }

    fn trials(
        &mut self,
        label: &str,
        fluid: &FluidPath,
        policy: &Policy,
        cost: &QuadraticCost,
        seed: u64,
    ) -> Result<TrialRun> {
        let mut sim = SimOptions::new(self.cfg.horizon);
        sim.quad_step = self.cfg.quad_step;
        let tcfg = TrialsConfig {
            n_trials: self.cfg.n_trials,
            master_seed: seed,
            parallelism: self.cfg.threads,
            sim,
            config_hash: self.cfg.hash(),
        };
        let counts = self.counts();
        let run = self.built.run_trials(self.cfg.n, fluid, &counts, policy, cost, &tcfg)?;
        self.timing.push((format!("trials {label}"), run.wall_clock_secs));
        Ok(run)
    }

    fn write_timing(&self, out: &Path, command: Command) -> Result<()> {
        let steps: Vec<Value> = self
            .timing
            .iter()
            .map(|(k, v)| json!({ "step": k, "wall_clock_secs": v }))
            .collect();
        let total: f64 = self.timing.iter().map(|t| t.1).sum();
        write_json(
            &out.join("timing.json"),
            &json!({ "command": command.name(), "threads": self.cfg.threads, "steps": steps, "total_secs": total }),
        )
    }
}

fn header(cfg: &ExperimentConfig, command: Command) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command.name()));
    m.insert("version".into(), json!(crate::VERSION));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("model".into(), json!(cfg.model.name()));
    m
}

fn energy(run: &TrialRun, alpha: f64) -> Stat {
    let e: Vec<f64> = run.records.iter().map(|r| r.ctrl_cost / alpha).collect();
    Stat::from_samples(&e)
}

/// Whether the configuration is the published cost-comparison setup, so its
/// reference numbers apply.
fn matches_reference(cfg: &ExperimentConfig) -> bool {
    let t = table1_config();
    cfg.model == ModelConfig::Lossnet(t.params)
        && cfg.n == t.n
        && cfg.horizon == t.horizon
        && cfg.alphas == t.alphas
}

/// Runs `cmd`, writing its artifacts under `cfg.out`.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    let mut ctx = Context::new(cfg)?;
    let mut summary = header(cfg, cmd);
    summary.insert("x0".into(), json!(ctx.x0));
    let mut text = String::new();

    match cmd {
        Command::Fluid => {
            let fluid = ctx.fluid()?;
            fluid.write_csv(csv_file(&out.join("fluid.csv"))?)?;
            let end = fluid.node(fluid.intervals()).to_vec();
            text = format!("mu(T) = {end:?}");
            summary.insert("horizon".into(), json!(fluid.horizon()));
            summary.insert("step".into(), json!(fluid.step()));
            summary.insert("mu_final".into(), json!(end));
        }
        Command::Coeffs => {
            let fluid = ctx.fluid()?;
            let coeffs = ctx.coeffs(&fluid)?;
            coeffs.write_csv(&out.join("coeffs"), cfg.csv_stride)?;
            fluid.write_csv(csv_file(&out.join("fluid.csv"))?)?;
            let id = coeffs.identities();
            text = format!("{id:?}");
            summary.insert("identities".into(), serde_json::to_value(&id)?);
        }
        Command::Riccati => {
            let fluid = ctx.fluid()?;
            let coeffs = ctx.coeffs(&fluid)?;
            let mut rows = Vec::new();
            for (k, &alpha) in cfg.alphas.iter().enumerate() {
                let sol = ctx.riccati(&coeffs, alpha)?;
                let name = if k == 0 { "riccati.csv".to_string() } else { format!("riccati_{k}.csv") };
                sol.write_csv(csv_file(&out.join(&name))?, cfg.csv_stride)?;
                let v = lqr_value(&sol, &vec![0.0; coeffs.d()]);
                text += &format!("alpha = {alpha}: J(0) = {v:.6}\n");
                rows.push(json!({ "alpha": alpha, "value_at_zero": v, "file": name }));
            }
            summary.insert("riccati".into(), json!(rows));
        }
        Command::Simulate => {
            let fluid = ctx.fluid()?;
            let coeffs = match cfg.policy {
                PolicyKind::Lqr => Some(ctx.coeffs(&fluid)?),
                _ => None,
            };
            let (policy, sol) = ctx.policy(coeffs.as_ref())?;
            let alpha = cfg.alpha();
            let cost = ctx.cost(alpha);
            let run = ctx.trials("simulate", &fluid, &policy, &cost, cfg.seed)?;
            run.write_trials_csv(csv_file(&out.join("trials.csv"))?)?;
            text = format!(
                "total cost {:.4} ± {:.4} over {} trials",
                run.summary.total_cost.mean, run.summary.total_cost.stderr, run.summary.n_trials
            );
            summary.insert("policy".into(), serde_json::to_value(cfg.policy)?);
            summary.insert("run".into(), serde_json::to_value(&run.summary)?);
            if policy.is_controlled() && alpha > 0.0 {
                summary.insert("control_energy".into(), serde_json::to_value(energy(&run, alpha))?);
            }
            if let Some(sol) = sol {
                summary.insert("lqr_value".into(), json!(lqr_value(&sol, &ctx.v0(&ctx.counts()))));
            }
            if !policy.is_controlled() && run.records.len() >= 100 {
                let coeffs = ctx.coeffs(&fluid)?;
                let moments = solve_moments(&coeffs, &ctx.v0(&ctx.counts()), cfg.horizon)?;
                let finals: Vec<Vec<f64>> = run.records.iter().map(|r| r.v_final.clone()).collect();
                let g = gaussian_diagnostics(&finals, &moments, &policy)?;
                summary.insert("gaussian".into(), serde_json::to_value(&g)?);
            }
        }
        Command::Sde => {
            let fluid = ctx.fluid()?;
            let coeffs = ctx.coeffs(&fluid)?;
            let (policy, sol) = ctx.policy(Some(&coeffs))?;
            let alpha = cfg.alpha();
            let cost = ctx.cost(alpha);
            let opts = SdeOptions {
                horizon: cfg.horizon,
                h: cfg.sde_h,
                seed: cfg.seed,
                parallelism: cfg.threads,
            };
            let v0 = vec![0.0; coeffs.d()];
            let est = ctx.timed("sde", |_| estimate_j(&coeffs, &policy, &cost, &v0, cfg.sde_paths, &opts))?;
            text = format!("J = {:.4} ± {:.4} over {} paths", est.mean(), est.stderr(), est.n_paths);
            summary.insert("policy".into(), serde_json::to_value(cfg.policy)?);
            summary.insert("estimate".into(), serde_json::to_value(&est)?);
            if let Some(sol) = sol {
                summary.insert("lqr_value".into(), json!(lqr_value(&sol, &v0)));
            }
        }
        Command::Validate => {
            let fluid = ctx.fluid()?;
            let coeffs = ctx.coeffs(&fluid)?;
            let grid = ConditionGrid::uniform(cfg.horizon, 11);
            let report = ctx.timed("conditions", |c| Ok(validate_conditions(c.spec(), &fluid, &grid)))?;
            let id = coeffs.identities();
            let identities_pass = id.sigma_square <= SIGMA_SQUARE_TOL
                && id.orthogonality <= ORTHOGONALITY_TOL
                && id.zero_block <= ZERO_BLOCK_TOL;
            let pass = report.all_pass() && identities_pass;
            for c in report.checks() {
                text += &format!("{:<16} {} {}\n", c.name, if c.pass { "pass" } else { "FAIL" }, c.message);
            }
            text += &format!("{:<16} {}\n", "identities", if identities_pass { "pass" } else { "FAIL" });
            summary.insert("pass".into(), json!(pass));
            summary.insert("conditions".into(), serde_json::to_value(&report)?);
            summary.insert("identities".into(), serde_json::to_value(&id)?);
            write_json(&out.join("report.json"), &summary)?;
            write_json(&out.join("summary.json"), &summary)?;
            ctx.write_timing(&out, cmd)?;
            if !pass {
                let failed: Vec<&str> = report
                    .checks()
                    .iter()
                    .filter(|c| !c.pass)
                    .map(|c| c.name.as_str())
                    .chain((!identities_pass).then_some("identities"))
                    .collect();
                return Err(Error::Validation(format!("failed checks: {}", failed.join(", "))));
            }
            return Ok(CommandOutput {
                summary: Value::Object(summary),
                text,
            });
        }
        Command::Table1 => {
            let report = table1(&mut ctx)?;
            text = report.render_table();
            fs::write(out.join("table.txt"), &text)?;
            write_json(&out.join("report.json"), &report)?;
            summary.insert("arms".into(), serde_json::to_value(&report.arms)?);
            summary.insert("reductions".into(), serde_json::to_value(&report.reductions)?);
        }
    }

    write_json(&out.join("summary.json"), &summary)?;
    ctx.write_timing(&out, cmd)?;
    Ok(CommandOutput {
        summary: Value::Object(summary),
        text,
    })
}

/// Uncontrolled arm plus one LQR arm per `α`, sharing the fluid path and
/// coefficients. Arm `i` draws from seed `derive_seed(seed, i)`.
fn table1(ctx: &mut Context<'_>) -> Result<ComparisonReport> {
    let cfg = ctx.cfg;
    let out = cfg.out.clone();
    let fluid = ctx.fluid()?;
    let coeffs = ctx.coeffs(&fluid)?;
    fluid.write_csv(csv_file(&out.join("fluid.csv"))?)?;
    let v0 = ctx.v0(&ctx.counts());

    let mut arms = Vec::new();
    let mut runs = Vec::new();
    let seed0 = derive_seed(cfg.seed, 0);
    let base_cost = ctx.cost(cfg.alphas[0]);
    let run = ctx.trials("uncontrolled", &fluid, &Policy::Uncontrolled, &base_cost, seed0)?;
    arms.push(ArmReport {
        label: "Uncontrolled".into(),
        alpha: None,
        seed: seed0,
        summary: run.summary.clone(),
        control_energy: Stat::from_samples(&vec![0.0; run.records.len()]),
        lqr_value: None,
    });
    let finals: Vec<Vec<f64>> = run.records.iter().map(|r| r.v_final.clone()).collect();
    runs.push(("uncontrolled".to_string(), run));

    for (k, &alpha) in cfg.alphas.iter().enumerate() {
        let sol = ctx.riccati(&coeffs, alpha)?;
        let name = if k == 0 { "riccati.csv".to_string() } else { format!("riccati_{k}.csv") };
        sol.write_csv(csv_file(&out.join(name))?, cfg.csv_stride)?;
        let policy = ctx.lqr_policy(sol.clone());
        let cost = ctx.cost(alpha);
        let seed = derive_seed(cfg.seed, k as u64 + 1);
        let label = format!("alpha={alpha}");
        let run = ctx.trials(&label, &fluid, &policy, &cost, seed)?;
        arms.push(ArmReport {
            label: format!("Controlled alpha={alpha}"),
            alpha: Some(alpha),
            seed,
            summary: run.summary.clone(),
            control_energy: energy(&run, alpha),
            lqr_value: Some(lqr_value(&sol, &v0)),
        });
        runs.push((label, run));
    }

    let mut w = csv_file(&out.join("trials.csv"))?;
    writeln!(w, "arm,trial,dev_cost,ctrl_cost,total")?;
    for (label, run) in &runs {
        for o in run.outcomes() {
            writeln!(w, "{label},{},{:.17e},{:.17e},{:.17e}", o.trial, o.dev_cost, o.ctrl_cost, o.total)?;
        }
    }
    w.flush()?;

    let gaussian = if finals.len() >= 100 {
        let moments = solve_moments(&coeffs, &v0, cfg.horizon)?;
        Some(gaussian_diagnostics(&finals, &moments, &Policy::Uncontrolled)?)
    } else {
        None
    };
    let reference = matches_reference(cfg).then(|| REFERENCE_TABLE1.to_vec());
    Ok(ComparisonReport::new(
        cfg.hash(),
        cfg.model.name().to_string(),
        cfg.n,
        cfg.horizon,
        cfg.n_trials,
        ctx.x0.clone(),
        arms,
        reference,
        gaussian,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn csv_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
