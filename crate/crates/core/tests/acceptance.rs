//! End-to-end acceptance battery. Criteria run one after another inside a
//! single test so the timings are not distorted by test-level parallelism.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use laplace_kit::certificate::{diamond3_univariate, diamond4_univariate, CertificateOptions};
use laplace_kit::inverse::{synthetic, Family, SyntheticOptions};
use laplace_kit::iterations::{matrix_rows, run, step, IterationConfig};
use laplace_kit::linalg::quad_form;
use laplace_kit::model::{hessian, FnObjective};
use laplace_kit::pipeline::{certify, verify_inverse, verify_penalized, CertifySettings, VerifySettings};
use laplace_kit::qf::qf_check;
use laplace_kit::registry::{build, BuiltModel, ModelSpec, PenalizedModel};
use laplace_kit::solver::{maximize, SolverOptions};
use laplace_kit::verify::{grid_posterior, tv_grid, univariate_local_error, GridOptions};
use laplace_kit::{Matrix, Vector};

type Outcome = Result<String, String>;

fn penalized(spec: ModelSpec) -> PenalizedModel {
    match build(&spec).expect("registry model") {
        BuiltModel::Penalized(m) => m,
        BuiltModel::Inverse(_) => panic!("expected a penalized model"),
    }
}

fn spec(id: &str, n: Option<usize>, p: Option<usize>, seed: u64) -> ModelSpec {
    ModelSpec { id: id.into(), n, p, seed, ..Default::default() }
}

fn check(ok: bool, what: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what)
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(elapsed < budget, format!("runtime {elapsed:.1?} exceeds {budget:?}"))
}

fn gaussian_collapse() -> Outcome {
    let t = Instant::now();
    let mut worst_tv: f64 = 0.0;
    for p in [1usize, 2, 5] {
        let m = penalized(spec("gaussian-linear", None, Some(p), 1));
        let c = certify(&m.id, 1, &m.objective, &m.x_init, &CertifySettings::default()).map_err(|e| e.to_string())?;
        let cert = &c.certificate;
        check(cert.remainders.omega <= 1e-9, format!("p={p}: omega {:e}", cert.remainders.omega))?;
        for (name, d) in [("diamond2", cert.bounds.diamond2), ("diamond3", cert.bounds.diamond3)] {
            let d = d.ok_or(format!("p={p}: {name} missing"))?;
            check(d.abs() <= 1e-9, format!("p={p}: {name} {d:e}"))?;
        }
        let exact = m.exact_map.as_ref().unwrap();
        let gap = (&c.map.x_star - exact).amax();
        check(gap <= 1e-8, format!("p={p}: MAP off the ridge solution by {gap:e}"))?;
        let g = &c.geometry;
        let gp = grid_posterior(&m.objective, &g.center, &g.pair.dg2, &GridOptions::default(), None).map_err(|e| e.to_string())?;
        let tv = tv_grid(&gp, &g.center, &g.pair.dg2).map_err(|e| e.to_string())?;
        check(tv.value <= 1e-6, format!("p={p}: grid TV {:e}", tv.value))?;
        worst_tv = worst_tv.max(tv.value);
    }
    let el = t.elapsed();
    within(el, Duration::from_secs(5))?;
    Ok(format!("max grid TV {worst_tv:.1e}, {el:.1?}"))
}

fn soundness_battery() -> Outcome {
    let t = Instant::now();
    let mut settings = VerifySettings::default();
    settings.certify.certificate = CertificateOptions { x: 8.0, ..CertificateOptions::default() };
    let cases = [
        ("logistic", Some(50), Some(1)),
        ("logistic", Some(200), Some(1)),
        ("logistic", Some(200), Some(2)),
        ("logistic", Some(1000), Some(2)),
        ("quartic-1d", None, None),
    ];
    let mut rows = 0;
    for (id, n, p) in cases {
        let m = penalized(spec(id, n, p, 0));
        let (_, v) = verify_penalized(&m.id, 0, &m.objective, &m.x_init, &settings).map_err(|e| e.to_string())?;
        for r in v.soundness.rows.iter().filter(|r| r.gate_valid && r.bound.is_some()) {
            check(r.holds, format!("{id} n={n:?} p={p:?}: {} empirical {:?} > bound {:?}", r.name, r.empirical, r.bound))?;
            rows += 1;
        }
        for name in ["tv_all_sets", "tv_symmetric_sets", "concentration", "kl_forward", "mean_shift"] {
            let r = v.soundness.row(name).ok_or(format!("{id}: row {name} missing"))?;
            check(r.empirical.is_some() && r.bound.is_some(), format!("{id} n={n:?}: {name} not measured"))?;
        }
    }
    let el = t.elapsed();
    within(el, Duration::from_secs(300))?;
    Ok(format!("{rows} gated rows hold over {} models, {el:.1?}", cases.len()))
}

fn scaling_law() -> Outcome {
    let t = Instant::now();
    let settings = VerifySettings::default();
    let mut pts = Vec::new();
    for n in [100usize, 1000, 10_000] {
        let m = penalized(spec("logistic", Some(n), Some(1), 0));
        let (_, v) = verify_penalized(&m.id, 0, &m.objective, &m.x_init, &settings).map_err(|e| e.to_string())?;
        let tv = v.empirical.tv.ok_or("tv not measured")?;
        let bound = v.certificate.bounds.tv_bound_all_sets.bound;
        check(tv.value <= bound + 4.0 * tv.error, format!("n={n}: TV {:e} above bound {bound:e}", tv.value))?;
        pts.push(((n as f64).ln(), tv.value.ln()));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    check(slope <= -0.4, format!("slope {slope:.3}"))?;
    let el = t.elapsed();
    within(el, Duration::from_secs(120))?;
    Ok(format!("slope {slope:.3}, {el:.1?}"))
}

fn quadratic_form_suite() -> Outcome {
    let t = Instant::now();
    let r = qf_check(20, 1_000_000, 50, 7).map_err(|e| e.to_string())?;
    for c in &r.configs {
        check(c.tail_holds, format!("config {}: tail frequency {:e} vs {:e}", c.index, c.tail_frequency, c.tail_bound))?;
        check(c.moments_hold, format!("config {}: moment mismatch", c.index))?;
    }
    check(r.determinant.len() == 50 && r.determinant.iter().all(|d| d.holds), "determinant bound violated".into())?;
    let el = t.elapsed();
    within(el, Duration::from_secs(120))?;
    Ok(format!("20 configs x 1e6 draws, 50 determinant pairs, {el:.1?}"))
}

fn cubic(c: f64) -> FnObjective<f64> {
    FnObjective::new(1, move |x: &Vector| -x[0] * x[0] / 2.0 - c * x[0].powi(3) / 6.0)
        .with_gradient(move |x: &Vector| Vector::from_element(1, -x[0] - c * x[0] * x[0] / 2.0))
        .with_hessian(move |x: &Vector| Matrix::from_element(1, 1, -1.0 - c * x[0]))
        .with_directional(move |_x: &Vector, u: &Vector, k| match k {
            3 => Some(-c * u[0].powi(3)),
            4 => Some(0.0),
            _ => None,
        })
}

fn univariate_constants() -> Outcome {
    let t = Instant::now();
    let z = 5.0;
    let mut detail = Vec::new();
    for c in [0.05, 0.1, 0.2] {
        // f'' = −(1 + c u) on [−z, z]: ω = c z / 3 in the 𝔻-normalized scale
        let omega = c * z / 3.0;
        check(omega <= 1.0 / 3.0 + 1e-12, format!("c={c}: omega {omega}"))?;
        let e = univariate_local_error(&cubic(c), 0.0, z, 4000).map_err(|e| e.to_string())?;
        let d3 = diamond3_univariate(c, e.dd);
        let d4 = diamond4_univariate(-c, 0.0, omega.min(1.0 / 3.0), e.dd).map_err(|e| e.to_string())?;
        check(e.all_g.value <= d3 + 4.0 * e.all_g.error, format!("c={c}: all-g error {:e} > {d3:e}", e.all_g.value))?;
        check(e.even_g.value <= d4 + 4.0 * e.even_g.error, format!("c={c}: even-g error {:e} > {d4:e}", e.even_g.value))?;
        detail.push(format!("c={c}: {:.2e}<={d3:.2e}, {:.2e}<={d4:.2e}", e.all_g.value, e.even_g.value));
    }
    let el = t.elapsed();
    within(el, Duration::from_secs(30))?;
    Ok(format!("{}, {el:.1?}", detail.join("; ")))
}

fn inverse_end_to_end() -> Outcome {
    let t = Instant::now();
    let s =
        synthetic(Family::Exp, &SyntheticOptions { p: 2, n: 50, sigma: 0.0, ..SyntheticOptions::default() }).map_err(|e| e.to_string())?;
    let (summary, v) = verify_inverse("exp-inverse", &s.problem, &VerifySettings::default()).map_err(|e| e.to_string())?;
    let k = &summary.constants;
    let finite = [k.c2_hat, k.cn_hat, k.c0_hat, k.cg_hat, k.c3_hat, k.r0, k.delta].iter().all(|v| v.is_finite());
    check(finite, "non-finite regularity constant".into())?;
    for r in &summary.conditions.rows {
        check(r.holds, format!("condition {}: {:e} > {:e}", r.name, r.lhs, r.rhs))?;
    }
    let margin = summary.margin.as_ref().ok_or("margin check skipped")?;
    check(margin.samples >= 256, format!("margin over {} points", margin.samples))?;
    check(
        margin.min_generalized_eigenvalue >= 1.0 - k.delta - 1e-8,
        format!("margin {:.4} < {:.4}", margin.min_generalized_eigenvalue, 1.0 - k.delta),
    )?;
    let row = v.soundness.row("tv_all_sets").ok_or("tv row missing")?;
    check(row.gate_valid && row.holds, format!("conditional TV {:?} vs bound {:?}", row.empirical, row.bound))?;
    let (mass, se) = s.problem.prior_mass_outside_x0(1_000_000, 0).map_err(|e| e.to_string())?;
    let x = s.problem.deviation_x;
    check(mass <= (-x).exp() + 4.0 * se, format!("prior mass outside X0 {mass:e} > e^-x"))?;
    let el = t.elapsed();
    within(el, Duration::from_secs(180))?;
    Ok(format!(
        "delta {:.3}, margin {:.3}, TV {:.2e} <= {:.2e}, outside mass {mass:.1e}, {el:.1?}",
        k.delta,
        margin.min_generalized_eigenvalue,
        row.empirical.unwrap_or(f64::NAN),
        row.bound.unwrap_or(f64::NAN)
    ))
}

fn laplace_iterations() -> Outcome {
    let t = Instant::now();
    let mut detail = Vec::new();
    for p in [1usize, 3] {
        let m = penalized(spec("quartic", None, Some(p), 0));
        let ell = &m.objective.likelihood;
        let config = IterationConfig {
            x0: vec![0.0; p],
            g0_squared: matrix_rows(&(Matrix::identity(p, p) * 0.1)),
            precision_factor: 1.5,
            samples_per_step: 2048,
            seed: 11,
            ..IterationConfig::default()
        };
        let a = run(ell, &config).map_err(|e| e.to_string())?;
        let b = run(ell, &config).map_err(|e| e.to_string())?;
        check(a == b, format!("p={p}: rerun differs"))?;
        let reference = maximize(ell, &Vector::zeros(p), &SolverOptions::default()).map_err(|e| e.to_string())?;
        let dg2 = -hessian(ell, &reference.x).map_err(|e| e.to_string())?;
        let dist = quad_form(&dg2, &(Vector::from_vec(a.final_x.clone()) - &reference.x)).max(0.0).sqrt();
        check(dist <= 1e-2, format!("p={p}: D_G distance {dist:e}"))?;
        detail.push(format!("p={p}: {dist:.1e}"));
    }
    // one step on a quadratic ℓ against the Gaussian posterior mean
    let d2 = Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
    let xbar = Vector::from_vec(vec![0.7, -0.4]);
    let (d2c, xbc) = (d2.clone(), xbar.clone());
    let ell = FnObjective::new(2, move |x: &Vector| -0.5 * quad_form(&d2c, &(x - &xbc)));
    let g2 = Matrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]);
    let xk = Vector::from_vec(vec![0.2, 0.3]);
    let factor = g2.clone().cholesky().unwrap().l().transpose().try_inverse().unwrap();
    let out = step(&ell, &xk, &factor, 2048, 5, None, true).map_err(|e| e.to_string())?;
    let exact = (&d2 + &g2).try_inverse().unwrap() * (&d2 * &xbar + &g2 * &xk);
    for j in 0..2 {
        let dev = (out.x_next[j] - exact[j]).abs();
        check(dev <= 5.0 * out.x_stderr[j], format!("quadratic step coordinate {j}: {dev:e} vs stderr {:e}", out.x_stderr[j]))?;
    }
    detail.push("quadratic step within 5 stderr".into());
    let el = t.elapsed();
    within(el, Duration::from_secs(60))?;
    Ok(format!("{}, {el:.1?}", detail.join("; ")))
}

fn run_cli(args: &[&str], out: &Path, threads: usize) -> Result<i32, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_laplace-kit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    Ok(status.status.code().unwrap_or(-1))
}

fn reproducibility() -> Outcome {
    let commands: [&[&str]; 6] = [
        &["certify", "--model", "logistic", "--n", "200", "--p", "2", "--seed", "3"],
        &["verify", "--model", "quartic-1d", "--seed", "3"],
        &["verify", "--model", "logistic", "--n", "100,400", "--p", "1", "--seed", "3"],
        &["invert", "--family", "exp", "--seed", "3"],
        &["optimize", "--model", "quartic", "--p", "2", "--M", "512", "--seed", "3"],
        &["qf-check", "--trials", "20000", "--configs", "6", "--seed", "3"],
    ];
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for (i, args) in commands.iter().enumerate() {
        let one = root.path().join(format!("{i}-t1"));
        let eight = root.path().join(format!("{i}-t8"));
        let c1 = run_cli(args, &one, 1)?;
        let c8 = run_cli(args, &eight, 8)?;
        check(c1 == c8 && c1 != 1, format!("{}: exit codes {c1} / {c8}", args[0]))?;
        let mut names: Vec<_> = std::fs::read_dir(&one).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        check(!names.is_empty(), format!("{}: no output", args[0]))?;
        for name in names {
            let a = std::fs::read(one.join(&name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(eight.join(&name)).map_err(|e| format!("{name:?} missing at 8 threads: {e}"))?;
            check(a == b, format!("{}: {name:?} differs between 1 and 8 threads", args[0]))?;
            files += 1;
        }
    }
    Ok(format!("{files} artifacts byte-identical across 1 and 8 threads"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 exact-gaussian collapse", gaussian_collapse),
        ("2 soundness battery", soundness_battery),
        ("3 scaling law", scaling_law),
        ("4 gaussian quadratic forms", quadratic_form_suite),
        ("5 univariate constants", univariate_constants),
        ("6 inverse problem end-to-end", inverse_end_to_end),
        ("7 laplace iterations", laplace_iterations),
        ("8 reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
