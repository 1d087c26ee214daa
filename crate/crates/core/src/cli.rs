//! Command-line front end: presets, configuration merging and artifacts.
//!
//! Precedence is preset, then config file, then flags. Every command writes
//! into `--out` (default `out/`); with `--no-timing` all files are
//! byte-identical across runs and thread counts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    build_reference, contraction_check, convergence_against, minmax_processes, one_step_checks,
    sup_bound_check, ErrorReport, LatticePlan, LedgerDigest, OneStep, Reference,
    ReferenceSpec, SlopeFit, Tolerances,
};
use crate::config::{load_config, FileConfig};
use crate::error::{FbsdeError, Result};
use crate::grids::{
    gaussian_moment_coefficient, moment_exact, trinomial, weight_values, TimeGrid, TruncMode,
    TruncationConfig, WeightRule,
};
use crate::model::{
    validate_model, Coefficient, DriverConstants, DriverSpec, ModelSpec, ProbeConfig,
    TerminalCondition, ValidationReport,
};
use crate::oracle::{fd_solve, guarded_dt, linear_solution, ProxyReference, PROXY_STEPS};
use crate::parallel::{with_threads, Parallelism};
use crate::schemes::{run_backward, SchemeConfig, SchemeKind, SchemeRun};
use crate::treeval::{chain_law, compensated_sum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fbsde", version, about = "Explicit, implicit and Full-Projection schemes for FBSDEs on trinomial lattices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe the model assumptions, lattice moments, weights and pre/post equivalence.
    Check(CommonArgs),
    /// Y0 against N for each scheme, with errors, timings and a fitted order.
    Convergence(CommonArgs),
    /// Max/min processes and stability ledgers per scheme and N.
    Stability(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// sigma = 1.5, f = -y^3, g = x^2
    Experiment1,
    /// sigma = 2.5, f = -y - y^3, g = clamp(x, -7, 7)
    Experiment2,
    /// sigma = 1.5, f = -y, g = x^2 (closed-form reference)
    LinearOracle,
    /// Everything from the config file.
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = FbsdeError;

    fn from_str(s: &str) -> Result<Self> {
        <Preset as ValueEnum>::from_str(s, false).map_err(|_| FbsdeError::Config(format!("unknown preset '{s}'")))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub preset: Option<Preset>,
    /// explicit | implicit | fp | fp-post | theta=<x>; all of explicit, implicit, fp when omitted.
    #[arg(long)]
    pub scheme: Option<String>,
    /// A single number of time steps.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Comma-separated numbers of time steps.
    #[arg(long = "Ns", value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    #[arg(long = "R0")]
    pub r0: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// hard | mollified
    #[arg(long = "trunc-mode")]
    pub trunc_mode: Option<String>,
    /// Mollification width (defaults to h).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// truncated | raw
    #[arg(long)]
    pub weights: Option<String>,
    /// Spatial grid mesh; switches to the projected-grid lattice.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Spatial grid half-width in mesh units.
    #[arg(long = "grid-extent")]
    pub grid_extent: Option<i64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Leave wall-clock columns out of the artifacts.
    #[arg(long = "no-timing")]
    pub no_timing: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the lattice of the first N as JSON.
    #[arg(long = "dump-lattice")]
    pub dump_lattice: Option<PathBuf>,
    /// Offset of the assumption probes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steps of the proxy reference.
    #[arg(long = "proxy-N")]
    pub proxy_n: Option<usize>,
    /// Mesh of the finite-difference oracle; 0 disables it.
    #[arg(long = "fd-dx")]
    pub fd_dx: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Check,
    Convergence,
    Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalParams {
    Quadratic { scale: f64 },
    Clamp { lo: f64, hi: f64, slope: f64 },
    Constant { value: f64 },
}

impl TerminalParams {
    fn build(&self) -> TerminalCondition {
        match *self {
            TerminalParams::Quadratic { scale } => TerminalCondition::Quadratic { scale },
            TerminalParams::Clamp { lo, hi, slope } => TerminalCondition::Clamp { lo, hi, slope },
            TerminalParams::Constant { value } => TerminalCondition::Constant(value),
        }
    }
}

/// Plain-data description of a scalar model with a polynomial driver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParams {
    pub horizon: f64,
    pub x0: f64,
    pub b: f64,
    pub sigma: f64,
    /// `f(y, z) = Σ coefficients[k] y^k + z_coefficient z`
    pub coefficients: Vec<f64>,
    pub z_coefficient: f64,
    /// Declared constants overriding the derived ones.
    pub constants: Option<DriverConstants>,
    pub terminal: TerminalParams,
}

impl ModelParams {
    pub fn build(&self) -> Result<ModelSpec> {
        let driver = match self.constants {
            Some(c) => DriverSpec::polynomial_with_constants(self.coefficients.clone(), self.z_coefficient, c)?,
            None => DriverSpec::polynomial(self.coefficients.clone(), self.z_coefficient)?,
        };
        ModelSpec::new(
            self.horizon,
            self.x0,
            Coefficient::Constant(self.b),
            Coefficient::Constant(self.sigma),
            self.terminal.build(),
            driver,
        )
    }

    /// `a` when the driver is `a y`.
    pub fn linear_rate(&self) -> Option<f64> {
        let c = &self.coefficients;
        let zero_const = c.first().is_none_or(|a| *a == 0.0);
        let higher_zero = c.iter().skip(2).all(|a| *a == 0.0);
        (zero_const && higher_zero && self.z_coefficient == 0.0).then(|| c.get(1).copied().unwrap_or(0.0))
    }
}

struct PresetDefaults {
    model: ModelParams,
    convergence_ns: Vec<usize>,
    stability_ns: Vec<usize>,
    truncation: TruncationConfig,
}

fn preset_defaults(p: Preset) -> Option<PresetDefaults> {
    let exp_trunc = TruncationConfig {
        r0: 2.0,
        alpha: 0.249,
        epsilon: None,
        mode: TruncMode::Hard,
    };
    let model = |sigma: f64, coefficients: Vec<f64>, terminal| ModelParams {
        horizon: 1.0,
        x0: 0.0,
        b: 0.0,
        sigma,
        coefficients,
        z_coefficient: 0.0,
        constants: None,
        terminal,
    };
    match p {
        Preset::Experiment1 => Some(PresetDefaults {
            model: model(1.5, vec![0.0, 0.0, 0.0, -1.0], TerminalParams::Quadratic { scale: 1.0 }),
            convergence_ns: vec![5, 10, 15, 20, 30, 40, 50, 60, 70, 80],
            stability_ns: vec![20, 80],
            truncation: exp_trunc,
        }),
        Preset::Experiment2 => Some(PresetDefaults {
            model: model(
                2.5,
                vec![0.0, -1.0, 0.0, -1.0],
                TerminalParams::Clamp { lo: -7.0, hi: 7.0, slope: 1.0 },
            ),
            convergence_ns: vec![15, 17, 19, 25],
            stability_ns: vec![15, 17, 19, 25],
            truncation: exp_trunc,
        }),
        Preset::LinearOracle => Some(PresetDefaults {
            model: model(1.5, vec![0.0, -1.0], TerminalParams::Quadratic { scale: 1.0 }),
            convergence_ns: vec![10, 20, 40, 80, 160, 320],
            stability_ns: vec![10, 20, 40],
            truncation: TruncationConfig::default_for_degree(1),
        }),
        Preset::Custom => None,
    }
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelParams,
    pub schemes: Vec<SchemeKind>,
    pub ns: Vec<usize>,
    pub truncation: TruncationConfig,
    pub weights: WeightRule,
    pub lattice: LatticePlan,
    pub proxy_steps: usize,
    /// `None` disables the finite-difference oracle.
    pub fd_dx: Option<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub no_timing: bool,
    #[serde(skip)]
    pub dump_lattice: Option<PathBuf>,
}

fn cfg_err(msg: impl Into<String>) -> FbsdeError {
    FbsdeError::Config(msg.into())
}

impl RunConfig {
    pub fn resolve(kind: CommandKind, args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => load_config(p)?,
            None => FileConfig::default(),
        };
        let run = file.run.clone().unwrap_or_default();
        let preset = match (args.preset, &file.preset) {
            (Some(p), _) => p,
            (None, Some(s)) => s.parse()?,
            (None, None) => Preset::Experiment1,
        };
        if preset == Preset::Custom && args.config.is_none() {
            return Err(cfg_err("the custom preset needs --config"));
        }
        let defaults = preset_defaults(preset);

        let mut model = match &defaults {
            Some(d) => d.model.clone(),
            None => ModelParams {
                horizon: 1.0,
                x0: 0.0,
                b: 0.0,
                sigma: 1.0,
                coefficients: Vec::new(),
                z_coefficient: 0.0,
                constants: None,
                terminal: TerminalParams::Constant { value: 0.0 },
            },
        };
        if let Some(m) = &file.model {
            model.horizon = m.horizon.unwrap_or(model.horizon);
            model.x0 = m.x0.unwrap_or(model.x0);
            model.b = m.b.unwrap_or(model.b);
            model.sigma = m.sigma.unwrap_or(model.sigma);
        }
        match &file.driver {
            Some(d) => {
                if let Some(c) = &d.coefficients {
                    model.coefficients = c.clone();
                }
                model.z_coefficient = d.z.unwrap_or(model.z_coefficient);
                let any = d.monotonicity.is_some()
                    || d.lipschitz_y.is_some()
                    || d.degree.is_some()
                    || d.lipschitz_z.is_some();
                if any {
                    let derived = DriverSpec::polynomial(model.coefficients.clone(), model.z_coefficient)
                        .map(|f| f.constants())
                        .ok();
                    let pick = |o: Option<f64>, f: fn(&DriverConstants) -> f64, name: &str| {
                        o.or(derived.as_ref().map(f))
                            .ok_or_else(|| cfg_err(format!("driver constant '{name}' must be declared")))
                    };
                    model.constants = Some(DriverConstants {
                        monotonicity: pick(d.monotonicity, |c| c.monotonicity, "monotonicity")?,
                        lipschitz_y: pick(d.lipschitz_y, |c| c.lipschitz_y, "lipschitz_y")?,
                        degree: d
                            .degree
                            .or(derived.map(|c| c.degree))
                            .ok_or_else(|| cfg_err("driver constant 'degree' must be declared"))?,
                        lipschitz_z: pick(d.lipschitz_z, |c| c.lipschitz_z, "lipschitz_z")?,
                    });
                }
            }
            None if preset == Preset::Custom => return Err(cfg_err("the custom preset needs a [driver] section")),
            None => {}
        }
        match &file.terminal {
            Some(t) => {
                let need = |v: Option<f64>, k: &str| v.ok_or_else(|| cfg_err(format!("[terminal] needs '{k}'")));
                model.terminal = match t.kind.as_str() {
                    "quadratic" => TerminalParams::Quadratic { scale: t.scale.unwrap_or(1.0) },
                    "clamp" => TerminalParams::Clamp {
                        lo: need(t.lo, "lo")?,
                        hi: need(t.hi, "hi")?,
                        slope: t.slope.unwrap_or(1.0),
                    },
                    "constant" => TerminalParams::Constant { value: need(t.value, "value")? },
                    other => return Err(cfg_err(format!("unknown terminal kind '{other}'"))),
                };
            }
            None if preset == Preset::Custom => return Err(cfg_err("the custom preset needs a [terminal] section")),
            None => {}
        }
        if model.coefficients.is_empty() {
            return Err(cfg_err("[driver] needs 'coefficients'"));
        }

        let scheme = args.scheme.clone().or(run.scheme.clone());
        let schemes = match scheme {
            Some(s) => vec![s.parse::<SchemeKind>()?],
            None => vec![SchemeKind::ExplicitBtz, SchemeKind::ImplicitBtz, SchemeKind::FullProjectionPre],
        };

        let ns = if let Some(n) = args.n {
            vec![n]
        } else if let Some(ns) = &args.ns {
            ns.clone()
        } else if let Some(n) = run.n {
            vec![n]
        } else if let Some(ns) = &run.ns {
            ns.clone()
        } else {
            match (&defaults, kind) {
                (Some(d), CommandKind::Stability) => d.stability_ns.clone(),
                (Some(d), _) => d.convergence_ns.clone(),
                (None, _) => vec![10, 20, 40, 80],
            }
        };
        crate::analysis::check_ns(&ns)?;

        let degree = model.constants.map(|c| c.degree).unwrap_or_else(|| {
            DriverSpec::polynomial(model.coefficients.clone(), model.z_coefficient)
                .map(|f| f.degree())
                .unwrap_or(1)
        });
        let mut truncation = match (&defaults, file.driver.is_some() || file.terminal.is_some()) {
            (Some(d), false) => d.truncation,
            _ => TruncationConfig::default_for_degree(degree),
        };
        if let Some(r0) = args.r0.or(run.r0) {
            truncation.r0 = r0;
        }
        if let Some(a) = args.alpha.or(run.alpha) {
            truncation.alpha = a;
        }
        if let Some(m) = args.trunc_mode.clone().or(run.trunc_mode.clone()) {
            truncation.mode = m.parse()?;
        }
        if let Some(e) = args.epsilon.or(run.epsilon) {
            truncation.epsilon = Some(e);
        }
        truncation.validate_for_degree(degree)?;

        let weights = match args.weights.clone().or(run.weights.clone()) {
            Some(w) => w.parse()?,
            None => WeightRule::Truncated,
        };
        let eta = args.eta.or(run.eta);
        let extent = args.grid_extent.or(run.grid_extent);
        let lattice = if eta.is_some() || extent.is_some() {
            LatticePlan::Grid { eta, extent }
        } else {
            LatticePlan::Tree
        };
        let fd_dx = match args.fd_dx.or(run.fd_dx) {
            Some(dx) if dx > 0.0 => Some(dx),
            Some(_) => None,
            None => Some(0.02),
        };
        let threads = args.threads.or(run.threads);
        if threads == Some(0) {
            return Err(cfg_err("--threads must be at least 1"));
        }
        Ok(RunConfig {
            preset,
            model,
            schemes,
            ns,
            truncation,
            weights,
            lattice,
            proxy_steps: args.proxy_n.or(run.proxy_n).unwrap_or(PROXY_STEPS),
            fd_dx,
            seed: args.seed.or(run.seed).unwrap_or(0),
            out: args.out.clone().or(run.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
            threads,
            no_timing: args.no_timing || run.no_timing.unwrap_or(false),
            dump_lattice: args.dump_lattice.clone(),
        })
    }

    pub fn scheme_config(&self, kind: SchemeKind) -> SchemeConfig {
        let mut c = SchemeConfig::new(kind)
            .with_truncation(self.truncation)
            .with_parallelism(Parallelism::default());
        c.weights = self.weights;
        c
    }
}

fn file_label(kind: SchemeKind) -> String {
    kind.label().replace('=', "_")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn dump_lattice(cfg: &RunConfig, spec: &ModelSpec) -> Result<()> {
    if let Some(path) = &cfg.dump_lattice {
        let lattice = cfg.lattice.build(spec, cfg.ns[0])?;
        let file = fs::File::create(path)?;
        lattice.dump_json(std::io::BufWriter::new(file))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Failure {
    suite: &'static str,
    detail: String,
}

#[derive(Debug, Serialize)]
struct CheckSummary<'a> {
    command: &'static str,
    config: &'a RunConfig,
    passed: bool,
    failures: Vec<Failure>,
    assumptions: ValidationReport,
}

/// Assumption probes, moment matching, weight identities and pre/post
/// equivalence. Exit code 1 on any failure.
pub fn cmd_check(cfg: &RunConfig) -> Result<i32> {
    let spec = cfg.model.build()?;
    fs::create_dir_all(&cfg.out)?;
    dump_lattice(cfg, &spec)?;
    let mut failures = Vec::new();

    let probe = ProbeConfig {
        seed: cfg.seed,
        ..ProbeConfig::default()
    };
    let report = validate_model(&spec, &probe)?;
    for c in report.checks.iter().filter(|c| !c.passed) {
        failures.push(Failure {
            suite: "assumptions",
            detail: format!("{:?} fails: excess {:e} at {:?}", c.assumption, c.worst_excess, c.witness),
        });
    }

    for &n in &cfg.ns {
        let tg = TimeGrid::new(spec.horizon, n)?;
        let dist = trinomial(tg.h())?;
        for k in 0..=5 {
            if moment_exact(&dist, k) != Some(gaussian_moment_coefficient(k)) {
                failures.push(Failure {
                    suite: "moments",
                    detail: format!("N = {n}: moment {k} differs from the Gaussian one"),
                });
            }
        }
        if moment_exact(&dist, 6) == Some(gaussian_moment_coefficient(6)) {
            failures.push(Failure {
                suite: "moments",
                detail: format!("N = {n}: moment 6 unexpectedly matches"),
            });
        }
        let w = weight_values(cfg.weights, &dist, tg.h())?;
        let mean = compensated_sum(w.values.iter().enumerate().map(|(j, hj)| dist.weight(j) * hj));
        if mean != 0.0 || w.lambda > 1.0 {
            failures.push(Failure {
                suite: "weights",
                detail: format!("N = {n}: E[H] = {mean:e}, Lambda = {}", w.lambda),
            });
        }
    }

    let n = cfg.ns[0];
    let lattice = cfg.lattice.build(&spec, n)?;
    let pre = run_backward(&cfg.scheme_config(SchemeKind::FullProjectionPre), &lattice, &spec)?;
    let post = run_backward(&cfg.scheme_config(SchemeKind::FullProjectionPost), &lattice, &spec)?;
    let t = pre.truncation.expect("projection run carries its truncation");
    let mut worst = 0.0f64;
    for i in 0..=n {
        for (a, b) in pre.y[i].iter().zip(&post.y[i]) {
            worst = worst.max((t.apply(*a) - b).abs());
        }
        for (a, b) in pre.z[i].iter().zip(&post.z[i]) {
            worst = worst.max((a - b).abs());
        }
    }
    if !(worst <= 1e-12) {
        failures.push(Failure {
            suite: "pre_post",
            detail: format!("N = {n}: largest node difference {worst:e}"),
        });
    }

    let passed = failures.is_empty();
    write_json(
        &cfg.out.join("check.json"),
        &CheckSummary {
            command: "check",
            config: cfg,
            passed,
            failures: failures.clone(),
            assumptions: report,
        },
    )?;
    if passed {
        println!("check: all suites passed");
        Ok(EXIT_OK)
    } else {
        for f in &failures {
            eprintln!("check failed [{}]: {}", f.suite, f.detail);
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

#[derive(Debug, Serialize)]
struct FdOracle {
    dx: f64,
    dt: f64,
    y0: f64,
    max_abs: f64,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum OracleValue<T> {
    Value(T),
    Error { error: String },
}

#[derive(Debug, Serialize)]
struct Oracles {
    proxy: Option<OracleValue<ProxyReference>>,
    fd: Option<OracleValue<FdOracle>>,
    linear: Option<OracleValue<f64>>,
}

#[derive(Debug, Serialize)]
struct Row {
    #[serde(rename = "N")]
    n: usize,
    h: f64,
    y0: f64,
    err: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds: Option<f64>,
    exploded: bool,
}

#[derive(Debug, Serialize)]
struct SchemeSummary {
    scheme: String,
    slope: Option<SlopeFit>,
    exact: bool,
    exploded: Vec<usize>,
    rows: Vec<Row>,
}

#[derive(Debug, Serialize)]
struct ConvergenceSummary<'a> {
    command: &'static str,
    config: &'a RunConfig,
    reference: Reference,
    oracle: Oracles,
    schemes: Vec<SchemeSummary>,
}

fn oracle_values(cfg: &RunConfig, spec: &ModelSpec, reference: &Reference) -> Oracles {
    let fd = cfg.fd_dx.map(|dx| {
        match guarded_dt(spec, dx).and_then(|dt| fd_solve(spec, dx, dt)) {
            Ok(sol) => OracleValue::Value(FdOracle {
                dx,
                dt: sol.dt,
                y0: sol.y0(),
                max_abs: sol.max_abs,
            }),
            Err(e) => OracleValue::Error { error: e.to_string() },
        }
    });
    let linear = cfg.model.linear_rate().map(|a| match linear_solution(a, spec) {
        Ok(s) => OracleValue::Value(s.y0),
        Err(e) => OracleValue::Error { error: e.to_string() },
    });
    Oracles {
        proxy: reference.proxy.map(OracleValue::Value),
        fd,
        linear,
    }
}

fn write_convergence_csv(path: &Path, report: &ErrorReport, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if timing {
        w.write_record(["N", "h", "Y0", "err", "seconds", "exploded"])?;
    } else {
        w.write_record(["N", "h", "Y0", "err", "exploded"])?;
    }
    for r in &report.rows {
        let mut rec = vec![r.n.to_string(), r.h.to_string(), r.y0.to_string(), r.err.to_string()];
        if timing {
            rec.push(r.seconds.to_string());
        }
        rec.push(r.exploded.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Y0 against N for every configured scheme; the reference is the closed form
/// for linear drivers and the implicit/projection proxy otherwise.
pub fn cmd_convergence(cfg: &RunConfig) -> Result<i32> {
    let spec = cfg.model.build()?;
    fs::create_dir_all(&cfg.out)?;
    dump_lattice(cfg, &spec)?;
    let ref_spec = match cfg.model.linear_rate() {
        Some(a) if cfg.preset == Preset::LinearOracle => ReferenceSpec::LinearOracle { a },
        _ => ReferenceSpec::Proxy { steps: cfg.proxy_steps },
    };
    let reference = build_reference(&spec, &cfg.scheme_config(SchemeKind::FullProjectionPre), ref_spec)?;
    let oracle = oracle_values(cfg, &spec, &reference);

    let mut schemes = Vec::new();
    for &kind in &cfg.schemes {
        let report = convergence_against(&spec, &cfg.scheme_config(kind), &cfg.lattice, &cfg.ns, reference)?;
        write_convergence_csv(
            &cfg.out.join(format!("convergence_{}.csv", file_label(kind))),
            &report,
            !cfg.no_timing,
        )?;
        println!(
            "{:>8}: slope {}  exploded {:?}",
            report.scheme,
            report.slope.map_or("n/a".to_string(), |s| format!("{:.3}", s.slope)),
            report.exploded
        );
        schemes.push(SchemeSummary {
            scheme: report.scheme.clone(),
            slope: report.slope,
            exact: report.exact,
            exploded: report.exploded.clone(),
            rows: report
                .rows
                .iter()
                .map(|r| Row {
                    n: r.n,
                    h: r.h,
                    y0: r.y0,
                    err: r.err,
                    seconds: (!cfg.no_timing).then_some(r.seconds),
                    exploded: r.exploded,
                })
                .collect(),
        });
    }
    println!("reference ({:?}): {}", reference.kind, reference.value);
    write_json(
        &cfg.out.join("summary.json"),
        &ConvergenceSummary {
            command: "convergence",
            config: cfg,
            reference,
            oracle,
            schemes,
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct StabilityEntry {
    scheme: String,
    #[serde(rename = "N")]
    n: usize,
    finite: bool,
    exploded_at: Option<usize>,
    ledgers: Vec<LedgerDigest>,
    notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct StabilitySummary<'a> {
    command: &'static str,
    config: &'a RunConfig,
    runs: Vec<StabilityEntry>,
}

fn write_minmax_csv(path: &Path, run: &SchemeRun) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "t", "max", "min", "l2", "finite"])?;
    for (m, d) in minmax_processes(run).iter().zip(&run.diagnostics) {
        w.write_record([
            m.level.to_string(),
            m.t.to_string(),
            m.max.to_string(),
            m.min.to_string(),
            d.l2.to_string(),
            m.finite.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Max/min curves per scheme and N, with sup-norm and contraction ledgers
/// for every scheme and the one-step ledgers for the projection scheme.
pub fn cmd_stability(cfg: &RunConfig) -> Result<i32> {
    let spec = cfg.model.build()?;
    fs::create_dir_all(&cfg.out)?;
    dump_lattice(cfg, &spec)?;
    let tol = Tolerances::default();
    let perturbed = spec.with_terminal(spec.terminal.perturbed(0.1));
    let mut runs = Vec::new();
    for &n in &cfg.ns {
        let lattice = cfg.lattice.build(&spec, n)?;
        let law = chain_law(&lattice);
        for &kind in &cfg.schemes {
            let sc = cfg.scheme_config(kind);
            let run = run_backward(&sc, &lattice, &spec)?;
            write_minmax_csv(&cfg.out.join(format!("minmax_{}_N{n}.csv", file_label(kind))), &run)?;
            let contraction = contraction_check(&run, &law, &spec, &cfg.truncation, tol)?;
            let mut notes = contraction.notes.clone();
            let mut ledgers = vec![sup_bound_check(&run, tol).digest(), contraction.digest()];
            if kind.is_full_projection() {
                let size = one_step_checks(&run, &lattice, &spec, &cfg.truncation, OneStep::Size, tol)?;
                let other = run_backward(&sc, &lattice, &perturbed)?;
                let stab = one_step_checks(
                    &run,
                    &lattice,
                    &spec,
                    &cfg.truncation,
                    OneStep::Stability { other: &other },
                    tol,
                )?;
                notes.extend(size.notes.iter().cloned());
                ledgers.push(size.digest());
                ledgers.push(stab.digest());
            }
            notes.dedup();
            println!(
                "{:>8} N={n:<4} finite={:<5} violations {:?}",
                kind.label(),
                run.is_finite(),
                ledgers.iter().map(|l| l.violations).collect::<Vec<_>>()
            );
            runs.push(StabilityEntry {
                scheme: kind.label(),
                n,
                finite: run.is_finite(),
                exploded_at: run.exploded_at(),
                ledgers,
                notes,
            });
        }
    }
    write_json(
        &cfg.out.join("stability.json"),
        &StabilitySummary {
            command: "stability",
            config: cfg,
            runs,
        },
    )?;
    Ok(EXIT_OK)
}

fn exit_code(e: &FbsdeError) -> i32 {
    match e {
        FbsdeError::Config(_) | FbsdeError::Domain(_) => EXIT_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (kind, args) = match &cli.command {
        Command::Check(a) => (CommandKind::Check, a),
        Command::Convergence(a) => (CommandKind::Convergence, a),
        Command::Stability(a) => (CommandKind::Stability, a),
    };
    let cfg = match RunConfig::resolve(kind, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = with_threads(cfg.threads, || match kind {
        CommandKind::Check => cmd_check(&cfg),
        CommandKind::Convergence => cmd_convergence(&cfg),
        CommandKind::Stability => cmd_stability(&cfg),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::io::stderr().flush();
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs; clap usage errors exit 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(preset: Preset) -> CommonArgs {
        CommonArgs {
            preset: Some(preset),
            ..CommonArgs::default()
        }
    }

    #[test]
    fn presets_resolve() {
        let c = RunConfig::resolve(CommandKind::Convergence, &args(Preset::Experiment1)).unwrap();
        assert_eq!(c.ns, vec![5, 10, 15, 20, 30, 40, 50, 60, 70, 80]);
        assert_eq!(c.schemes.len(), 3);
        assert_eq!(c.truncation.r0, 2.0);
        let s = c.model.build().unwrap();
        assert_eq!(s.driver.degree(), 3);
        let c = RunConfig::resolve(CommandKind::Stability, &args(Preset::Experiment2)).unwrap();
        assert_eq!(c.ns, vec![15, 17, 19, 25]);
        assert_eq!(c.model.sigma, 2.5);
        let c = RunConfig::resolve(CommandKind::Convergence, &args(Preset::LinearOracle)).unwrap();
        assert_eq!(c.model.linear_rate(), Some(-1.0));
    }

    #[test]
    fn flags_override_preset() {
        let a = CommonArgs {
            ns: Some(vec![3, 6]),
            r0: Some(4.0),
            scheme: Some("implicit".into()),
            eta: Some(0.01),
            ..args(Preset::Experiment1)
        };
        let c = RunConfig::resolve(CommandKind::Convergence, &a).unwrap();
        assert_eq!(c.ns, vec![3, 6]);
        assert_eq!(c.truncation.r0, 4.0);
        assert_eq!(c.schemes, vec![SchemeKind::ImplicitBtz]);
        assert!(matches!(c.lattice, LatticePlan::Grid { eta: Some(_), .. }));
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            RunConfig::resolve(CommandKind::Check, &args(Preset::Custom)),
            Err(FbsdeError::Config(_))
        ));
        let bad_alpha = CommonArgs {
            alpha: Some(0.3),
            ..args(Preset::Experiment1)
        };
        assert!(RunConfig::resolve(CommandKind::Check, &bad_alpha).is_err());
        let bad_ns = CommonArgs {
            ns: Some(vec![10, 5]),
            ..args(Preset::Experiment1)
        };
        assert!(RunConfig::resolve(CommandKind::Check, &bad_ns).is_err());
        let bad_scheme = CommonArgs {
            scheme: Some("rk4".into()),
            ..args(Preset::Experiment1)
        };
        assert!(RunConfig::resolve(CommandKind::Check, &bad_scheme).is_err());
    }

    #[test]
    fn custom_file_with_declared_constants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "preset = \"custom\"\n[driver]\ncoefficients = [0.0, 0.0, 0.0, -1.0]\nmonotonicity = -5.0\n[terminal]\nkind = \"clamp\"\nlo = -1.0\nhi = 1.0\n",
        )
        .unwrap();
        let a = CommonArgs {
            config: Some(path),
            ..CommonArgs::default()
        };
        let c = RunConfig::resolve(CommandKind::Check, &a).unwrap();
        assert_eq!(c.preset, Preset::Custom);
        let k = c.model.constants.unwrap();
        assert_eq!((k.monotonicity, k.lipschitz_y, k.degree), (-5.0, 1.5, 3));
    }

    #[test]
    fn clap_surface() {
        let cli = Cli::try_parse_from([
            "fbsde", "convergence", "--preset", "linear-oracle", "--Ns", "10,20", "--R0", "3", "--no-timing",
            "--trunc-mode", "mollified", "--threads", "2",
        ])
        .unwrap();
        let Command::Convergence(a) = cli.command else { panic!() };
        assert_eq!(a.ns, Some(vec![10, 20]));
        assert_eq!(a.r0, Some(3.0));
        assert!(a.no_timing);
        assert_eq!(a.preset, Some(Preset::LinearOracle));
        assert!(Cli::try_parse_from(["fbsde", "simulate"]).is_err());
    }
}
