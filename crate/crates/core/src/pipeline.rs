//! Mode → geometry → remainders → certificate, and the verification runs
//! built on top of it.

use serde::{Deserialize, Serialize};

use crate::certificate::{build_certificate, CertificateInput, CertificateOptions, Grade, LaplaceCertificate};
use crate::error::{Error, Result};
use crate::geometry::LocalGeometry;
use crate::inverse::{run_inversion, ConstantOptions, ForwardMap, InverseProblem, InversionSummary};
use crate::linalg::Vector;
use crate::model::{Objective, PenalizedObjective, ScaledObjective};
use crate::remainder::{estimate_remainders, estimate_self_concordance, RemainderReport, ScanOptions, SelfConcordance};
use crate::solver::{find_map, MapResult, SolverOptions};
use crate::verify::{
    c_ell_grid, grid_empirical, grid_posterior_adaptive, posterior_functionals_is, soundness_report, Empirical, GridOptions, IsOptions,
    SoundnessReport,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySettings {
    pub solver: SolverOptions,
    pub scan: ScanOptions,
    pub certificate: CertificateOptions,
}

pub struct Certified {
    pub map: MapResult<f64>,
    pub geometry: LocalGeometry<f64>,
    pub report: RemainderReport,
    pub self_concordance: Option<SelfConcordance>,
    pub certificate: LaplaceCertificate,
}

/// Runs the full certification for a penalized objective. Self-concordance
/// constants are estimated for `h = −ℓ/n` when the objective carries `n`.
pub fn certify<L: Objective<f64>>(
    model_id: &str,
    seed: u64,
    f: &PenalizedObjective<f64, L>,
    x_init: &Vector<f64>,
    settings: &CertifySettings,
) -> Result<Certified> {
    let map = find_map(f, x_init, &settings.solver)?;
    map.require_converged()?;
    let pair = map.pair()?;
    let geometry = LocalGeometry::new(map.x_star.clone(), pair, settings.certificate.x, settings.certificate.nu)?;
    let scan = ScanOptions { seed, ..settings.scan };
    let report = estimate_remainders(f, &geometry, &scan)?;
    let self_concordance = match f.sample_size_hint {
        Some(n) => {
            let h = ScaledObjective { inner: &f.likelihood, factor: -1.0 / n };
            Some(estimate_self_concordance(&h, &geometry, n, &scan, true)?)
        }
        None => None,
    };
    let certificate = build_certificate(&CertificateInput {
        model_id,
        seed,
        map: &map,
        geometry: &geometry,
        report: &report,
        omega_grade: Grade::Estimated,
        self_concordance: self_concordance.as_ref(),
        options: &settings.certificate,
    })?;
    Ok(Certified { map, geometry, report, self_concordance, certificate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub certify: CertifySettings,
    pub grid: GridOptions,
    pub importance: IsOptions,
    /// Largest dimension verified on a tensor grid; importance sampling above.
    pub max_grid_dim: usize,
    /// Replace the configured `C_ℓ` by its quadrature value (`d ≤ 2`).
    pub compute_c_ell: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            certify: CertifySettings::default(),
            grid: GridOptions::default(),
            importance: IsOptions::default(),
            max_grid_dim: 5,
            compute_c_ell: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmpiricalMethod {
    Grid,
    ImportanceSampling,
}

/// Serializable outcome of a verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub certificate: LaplaceCertificate,
    pub empirical: Empirical,
    pub soundness: SoundnessReport,
    pub method: EmpiricalMethod,
    pub c_ell: Option<f64>,
}

fn measure(
    f: &(impl Objective<f64> + ?Sized),
    geometry: &LocalGeometry<f64>,
    settings: &VerifySettings,
    seed: u64,
    restrict: Option<&(dyn Fn(&Vector<f64>) -> bool + Sync)>,
) -> Result<(Empirical, EmpiricalMethod)> {
    if geometry.dim() <= settings.max_grid_dim {
        let gp = grid_posterior_adaptive(f, &geometry.center, &geometry.pair.dg2, &settings.grid, restrict);
        match gp {
            Ok(gp) => return Ok((grid_empirical(&gp, geometry)?, EmpiricalMethod::Grid)),
            Err(Error::GridTooLarge(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if restrict.is_some() {
        return Err(Error::PreconditionViolated("restricted posteriors are verified on grids only".into()));
    }
    let is = posterior_functionals_is(f, geometry, &IsOptions { seed, ..settings.importance })?;
    Ok((Empirical::from(&is), EmpiricalMethod::ImportanceSampling))
}

/// Certifies, then measures every bounded quantity numerically.
pub fn verify_penalized<L: Objective<f64>>(
    model_id: &str,
    seed: u64,
    f: &PenalizedObjective<f64, L>,
    x_init: &Vector<f64>,
    settings: &VerifySettings,
) -> Result<(Certified, Verification)> {
    let mut certified = certify(model_id, seed, f, x_init, &settings.certify)?;
    let mut c_ell = None;
    if settings.compute_c_ell && certified.geometry.dim() <= 2 && certified.self_concordance.is_some() {
        let res = settings.grid.resolution.unwrap_or(if certified.geometry.dim() == 1 { 4001 } else { 401 });
        let c = c_ell_grid(&f.likelihood, &certified.geometry, res)?;
        let opts = CertificateOptions { c_ell: c, ..settings.certify.certificate.clone() };
        certified.certificate = build_certificate(&CertificateInput {
            model_id,
            seed,
            map: &certified.map,
            geometry: &certified.geometry,
            report: &certified.report,
            omega_grade: Grade::Estimated,
            self_concordance: certified.self_concordance.as_ref(),
            options: &opts,
        })?;
        c_ell = Some(c);
    }
    let (empirical, method) = measure(f, &certified.geometry, settings, seed, None)?;
    let soundness = soundness_report(&certified.certificate, &empirical);
    let v = Verification { certificate: certified.certificate.clone(), empirical, soundness, method, c_ell };
    Ok((certified, v))
}

/// Inverse-problem verification of `P_f(· | X₀)` on a masked grid.
pub fn verify_inverse<M: ForwardMap>(
    model_id: &str,
    problem: &InverseProblem<M>,
    settings: &VerifySettings,
) -> Result<(InversionSummary, Verification)> {
    let seed = settings.certify.scan.seed;
    let consts = ConstantOptions { seed, ..ConstantOptions::default() };
    let (summary, nl, _map) = run_inversion(model_id, problem, &consts, &settings.certify.solver, &settings.certify.certificate)?;
    let q = problem.x0_operator()?;
    let r0 = summary.constants.r0;
    let inside = |x: &Vector<f64>| problem.in_x0(&q, r0, x);
    let f = problem.penalized()?;
    let (empirical, method) = measure(&f, &nl.geometry, settings, seed, Some(&inside))?;
    let mut soundness = soundness_report(&nl.certificate, &empirical);
    soundness.exclude("kl_reverse", "posterior restricted to X0 has no mass where the Gaussian does");
    let v = Verification { certificate: nl.certificate, empirical, soundness, method, c_ell: None };
    Ok((summary, v))
}
