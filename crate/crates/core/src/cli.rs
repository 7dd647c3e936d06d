//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 2 when a gate, condition or soundness row fails (artifacts
//! are still written), 1 on errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::certificate::{to_canonical_json, CertificateOptions};
use crate::error::{Error, Result};
use crate::inverse::{run_inversion, synthetic, ConstantOptions, Family, SyntheticOptions};
use crate::iterations::{matrix_rows, run as run_iterations, IterationConfig};
use crate::linalg::{Matrix, Vector};
use crate::pipeline::{certify, verify_inverse, verify_penalized, CertifySettings, VerifySettings};
use crate::qf::qf_check;
use crate::registry::{build, BuiltModel, ModelSpec};
use crate::remainder::ScanOptions;
use crate::solver::{maximize, SolverOptions};
use crate::verify::{GridOptions, IsOptions};

#[derive(Parser, Debug)]
#[command(name = "laplace-kit", version, about = "Laplace approximation certificates and their numerical verification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Strict JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to LAPLACE_KIT_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Deviation level x.
    #[arg(long = "x", global = true)]
    pub deviation_x: Option<f64>,
    #[arg(long, global = true)]
    pub nu: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes certificate.json for a registry model.
    Certify(ModelArgs),
    /// Certifies and writes soundness.json / soundness.csv.
    Verify(ModelArgs),
    /// Synthetic inverse problem: constants, conditions, certificate.
    Invert(InvertArgs),
    /// Laplace iterations on a registry model's likelihood.
    Optimize(OptimizeArgs),
    /// Monte Carlo checks of the Gaussian quadratic-form bounds.
    QfCheck(QfArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct InvertArgs {
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Draws per step.
    #[arg(long = "M")]
    pub samples: Option<usize>,
    /// Precision multiplier a.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial prior precision `G₀² = g0·I`.
    #[arg(long)]
    pub g0: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct QfArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub configs: Option<usize>,
}

/// Experiment configuration file; every field optional, unknown keys
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: Option<String>,
    pub n: Option<Vec<usize>>,
    pub p: Option<usize>,
    pub sigma: Option<f64>,
    pub family: Option<String>,
    pub seed: u64,
    pub deviation_x: f64,
    pub nu: f64,
    pub n_dirs: usize,
    pub n_line: usize,
    pub samples: usize,
    pub grid_resolution: Option<usize>,
    pub grid_box_sigmas: f64,
    pub is_samples: usize,
    pub trials: usize,
    pub configs: usize,
    pub precision_factor: f64,
    pub max_steps: usize,
    pub g0: f64,
    pub out: Option<PathBuf>,
    pub big_c: f64,
    pub c_ell: Option<f64>,
    pub solver: SolverOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scan = ScanOptions::default();
        let cert = CertificateOptions::default();
        Self {
            model: None,
            n: None,
            p: None,
            sigma: None,
            family: None,
            seed: 0,
            deviation_x: cert.x,
            nu: cert.nu,
            n_dirs: scan.n_dirs,
            n_line: scan.n_line,
            samples: 512,
            grid_resolution: None,
            grid_box_sigmas: GridOptions::default().box_sigmas,
            is_samples: IsOptions::default().samples,
            trials: 1_000_000,
            configs: 20,
            precision_factor: 1.5,
            max_steps: 100,
            g0: 0.1,
            out: None,
            big_c: cert.big_c,
            c_ell: None,
            solver: SolverOptions::default(),
        }
    }
}

impl ExperimentConfig {
    fn apply_common(&mut self, c: &Common) {
        if let Some(s) = c.seed {
            self.seed = s;
        }
        if let Some(o) = &c.out {
            self.out = Some(o.clone());
        }
        if let Some(x) = c.deviation_x {
            self.deviation_x = x;
        }
        if let Some(nu) = c.nu {
            self.nu = nu;
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.deviation_x > 0.0) {
            return Err(Error::Config("deviation_x must be positive".into()));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::Config("nu must lie in (0, 1)".into()));
        }
        self.solver.validate()?;
        ScanOptions { n_dirs: self.n_dirs, n_line: self.n_line, seed: 0 }.validate()?;
        Ok(())
    }

    fn certificate_options(&self) -> CertificateOptions {
        CertificateOptions {
            x: self.deviation_x,
            nu: self.nu,
            big_c: self.big_c,
            c_ell: self.c_ell.unwrap_or(CertificateOptions::default().c_ell),
            ..CertificateOptions::default()
        }
    }

    fn certify_settings(&self) -> CertifySettings {
        CertifySettings {
            solver: self.solver,
            scan: ScanOptions { n_dirs: self.n_dirs, n_line: self.n_line, seed: self.seed },
            certificate: self.certificate_options(),
        }
    }

    fn verify_settings(&self) -> VerifySettings {
        VerifySettings {
            certify: self.certify_settings(),
            grid: GridOptions { box_sigmas: self.grid_box_sigmas, resolution: self.grid_resolution },
            importance: IsOptions { samples: self.is_samples, seed: self.seed, ..IsOptions::default() },
            compute_c_ell: self.c_ell.is_none(),
            ..VerifySettings::default()
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn model_spec(&self, n: Option<usize>) -> Result<ModelSpec> {
        let id = self.model.clone().ok_or_else(|| Error::Config("--model is required".into()))?;
        Ok(ModelSpec { id, n, p: self.p, sigma: self.sigma, seed: self.seed, deviation_x: Some(self.deviation_x) })
    }
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial artifact.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Io(format!("invalid output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_common(c);
    Ok(cfg)
}

fn threads(c: &Common) -> Result<Option<usize>> {
    if let Some(t) = c.threads {
        return Ok(Some(t));
    }
    match std::env::var("LAPLACE_KIT_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse().map(Some).map_err(|_| Error::Config(format!("LAPLACE_KIT_THREADS is not a count: `{v}`")))
        }
        _ => Ok(None),
    }
}

fn suffixed(dir: &Path, stem: &str, ext: &str, n: Option<usize>, many: bool) -> PathBuf {
    match (many, n) {
        (true, Some(n)) => dir.join(format!("{stem}_n{n}.{ext}")),
        _ => dir.join(format!("{stem}.{ext}")),
    }
}

fn sizes(cfg: &ExperimentConfig) -> Vec<Option<usize>> {
    match &cfg.n {
        Some(v) if !v.is_empty() => v.iter().map(|&n| Some(n)).collect(),
        _ => vec![None],
    }
}

fn cmd_certify(cfg: &ExperimentConfig) -> Result<i32> {
    let out = cfg.out_dir();
    let ns = sizes(cfg);
    let many = ns.len() > 1;
    let mut code = 0;
    for n in ns {
        let cert = match build(&cfg.model_spec(n)?)? {
            BuiltModel::Penalized(m) => certify(&m.id, cfg.seed, &m.objective, &m.x_init, &cfg.certify_settings())?.certificate,
            BuiltModel::Inverse(s) => {
                let id = cfg.model.clone().unwrap_or_default();
                let consts = ConstantOptions { seed: cfg.seed, ..ConstantOptions::default() };
                run_inversion(&id, &s.problem, &consts, &cfg.solver, &cfg.certificate_options())?.0.certificate
            }
        };
        write_atomic(&suffixed(&out, "certificate", "json", n, many), &cert.to_json()?)?;
        if !cert.all_gates_hold() {
            code = 2;
        }
    }
    Ok(code)
}

#[derive(Serialize)]
struct ScalingRow {
    n: Option<usize>,
    tv_empirical: Option<f64>,
    tv_error: Option<f64>,
    tv_bound: f64,
    all_hold: bool,
}

fn cmd_verify(cfg: &ExperimentConfig) -> Result<i32> {
    let out = cfg.out_dir();
    let ns = sizes(cfg);
    let many = ns.len() > 1;
    let settings = cfg.verify_settings();
    let mut code = 0;
    let mut scaling = Vec::new();
    for n in ns {
        let v = match build(&cfg.model_spec(n)?)? {
            BuiltModel::Penalized(m) => verify_penalized(&m.id, cfg.seed, &m.objective, &m.x_init, &settings)?.1,
            BuiltModel::Inverse(s) => verify_inverse(cfg.model.as_deref().unwrap_or_default(), &s.problem, &settings)?.1,
        };
        write_atomic(&suffixed(&out, "soundness", "json", n, many), &to_canonical_json(&v)?)?;
        write_atomic(&suffixed(&out, "soundness", "csv", n, many), &v.soundness.to_csv())?;
        if !v.soundness.all_hold {
            code = 2;
        }
        scaling.push(ScalingRow {
            n,
            tv_empirical: v.empirical.tv.map(|m| m.value),
            tv_error: v.empirical.tv.map(|m| m.error),
            tv_bound: v.certificate.bounds.tv_bound_all_sets.bound,
            all_hold: v.soundness.all_hold,
        });
    }
    if many {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let mut csv = String::from("n,tv_empirical,tv_error,tv_bound,all_hold\n");
        for r in &scaling {
            csv.push_str(&format!(
                "{},{},{},{:.16e},{}\n",
                r.n.map(|n| n.to_string()).unwrap_or_default(),
                opt(r.tv_empirical),
                opt(r.tv_error),
                r.tv_bound,
                r.all_hold
            ));
        }
        write_atomic(&out.join("scaling.csv"), &csv)?;
        write_atomic(&out.join("scaling.json"), &to_canonical_json(&scaling)?)?;
    }
    Ok(code)
}

#[derive(Serialize)]
struct InversionArtifact {
    truth: Vec<f64>,
    prior_mass_outside_x0: f64,
    prior_mass_stderr: f64,
    #[serde(flatten)]
    summary: crate::inverse::InversionSummary,
}

fn cmd_invert(cfg: &ExperimentConfig, a: &InvertArgs) -> Result<i32> {
    let family: Family = a.family.as_deref().or(cfg.family.as_deref()).unwrap_or("exp").parse()?;
    let o = SyntheticOptions {
        p: a.p.or(cfg.p).unwrap_or(2),
        n: a.n.or(cfg.n.as_ref().and_then(|v| v.first().copied())).unwrap_or(50),
        sigma: a.sigma.or(cfg.sigma).unwrap_or(0.0),
        seed: cfg.seed,
        deviation_x: cfg.deviation_x,
        ..SyntheticOptions::default()
    };
    let s = synthetic(family, &o)?;
    let id = format!("{}-inverse", serde_json::to_value(family)?.as_str().unwrap_or("custom"));
    let consts = ConstantOptions { seed: cfg.seed, ..ConstantOptions::default() };
    let (summary, _, _) = run_inversion(&id, &s.problem, &consts, &cfg.solver, &cfg.certificate_options())?;
    let (mass, se) = s.problem.prior_mass_outside_x0(cfg.trials, cfg.seed)?;
    let ok = summary.conditions.all_hold && summary.margin.as_ref().is_some_and(|m| m.holds) && summary.certificate.all_gates_hold();
    let out = cfg.out_dir();
    write_atomic(&out.join("certificate.json"), &summary.certificate.to_json()?)?;
    let art = InversionArtifact { truth: s.truth.iter().copied().collect(), prior_mass_outside_x0: mass, prior_mass_stderr: se, summary };
    write_atomic(&out.join("inversion.json"), &to_canonical_json(&art)?)?;
    Ok(if ok { 0 } else { 2 })
}

#[derive(Serialize)]
struct OptimizeArtifact {
    model: String,
    reference_optimum: Vec<f64>,
    /// `‖D_G(x_final − x_ref)‖` with `D_G² = −∇²ℓ(x_ref)`.
    distance_dg: f64,
    trace: crate::iterations::IterationTrace,
}

fn cmd_optimize(cfg: &ExperimentConfig, a: &OptimizeArgs) -> Result<i32> {
    let spec = ModelSpec {
        id: a.model.clone().or(cfg.model.clone()).ok_or_else(|| Error::Config("--model is required".into()))?,
        n: a.n.or(cfg.n.as_ref().and_then(|v| v.first().copied())),
        p: a.p.or(cfg.p),
        sigma: cfg.sigma,
        seed: cfg.seed,
        deviation_x: Some(cfg.deviation_x),
    };
    let m = match build(&spec)? {
        BuiltModel::Penalized(m) => m,
        BuiltModel::Inverse(_) => return Err(Error::Config("optimize takes a penalized registry model".into())),
    };
    let ell = &m.objective.likelihood;
    let p = m.x_init.len();
    let config = IterationConfig {
        x0: vec![0.0; p],
        g0_squared: matrix_rows(&(Matrix::identity(p, p) * a.g0.unwrap_or(cfg.g0))),
        precision_factor: a.a.unwrap_or(cfg.precision_factor),
        samples_per_step: a.samples.unwrap_or(cfg.samples),
        max_steps: a.steps.unwrap_or(cfg.max_steps),
        seed: cfg.seed,
        ..IterationConfig::default()
    };
    let trace = run_iterations(ell, &config)?;
    let reference = maximize(ell, &Vector::zeros(p), &cfg.solver)?;
    let dg2 = -crate::model::hessian(ell, &reference.x)?;
    let diff = Vector::from_vec(trace.final_x.clone()) - &reference.x;
    let distance_dg = crate::linalg::quad_form(&dg2, &diff).max(0.0).sqrt();
    let out = cfg.out_dir();
    write_atomic(&out.join("trace.csv"), &trace.to_csv())?;
    let converged = trace.converged;
    let art = OptimizeArtifact { model: m.id, reference_optimum: reference.x.iter().copied().collect(), distance_dg, trace };
    write_atomic(&out.join("trace.json"), &to_canonical_json(&art)?)?;
    Ok(if converged { 0 } else { 2 })
}

fn cmd_qf_check(cfg: &ExperimentConfig, a: &QfArgs) -> Result<i32> {
    let r = qf_check(a.configs.unwrap_or(cfg.configs), a.trials.unwrap_or(cfg.trials), 50, cfg.seed)?;
    write_atomic(&cfg.out_dir().join("qf_check.json"), &to_canonical_json(&r)?)?;
    Ok(if r.all_hold { 0 } else { 2 })
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let mut cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::Certify(m) | Command::Verify(m) => {
            if let Some(id) = &m.model {
                cfg.model = Some(id.clone());
            }
            if let Some(n) = &m.n {
                cfg.n = Some(n.clone());
            }
            if let Some(p) = m.p {
                cfg.p = Some(p);
            }
            if let Some(s) = m.sigma {
                cfg.sigma = Some(s);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    if let Some(t) = threads(&cli.common)? {
        // a pool that already exists (repeated in-process calls) is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Certify(_) => cmd_certify(&cfg),
        Command::Verify(_) => cmd_verify(&cfg),
        Command::Invert(a) => cmd_invert(&cfg, a),
        Command::Optimize(a) => cmd_optimize(&cfg, a),
        Command::QfCheck(a) => cmd_qf_check(&cfg, a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
