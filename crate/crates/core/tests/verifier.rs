use laplace_kit::certificate::to_canonical_json;
use laplace_kit::geometry::{LocalGeometry, PrecisionPair, DEFAULT_NU};
use laplace_kit::inverse::{synthetic, Family, SyntheticOptions};
use laplace_kit::model::{penalize, FnObjective};
use laplace_kit::models::{Logistic, Quartic1d};
use laplace_kit::pipeline::{certify, verify_inverse, verify_penalized, CertifySettings, EmpiricalMethod, VerifySettings};
use laplace_kit::verify::{grid_empirical, grid_posterior, posterior_functionals_is, tv_grid, GridOptions, IsOptions};
use laplace_kit::{Matrix, Vector};
use statrs::distribution::{Continuous, Normal};

#[test]
fn logistic_rows_hold() {
    let f = penalize(Logistic::generate(200, 1, 0), Matrix::identity(1, 1), Vector::zeros(1)).unwrap().with_sample_size(200.0);
    let (_, v) = verify_penalized("logistic", 0, &f, &Vector::zeros(1), &VerifySettings::default()).unwrap();
    assert_eq!(v.method, EmpiricalMethod::Grid);
    assert!(v.soundness.all_hold, "{}", v.soundness.to_csv());
    let tv = v.soundness.row("tv_all_sets").unwrap();
    assert!(tv.gate_valid && tv.slack_ratio.unwrap() > 1.0);
}

#[test]
fn ungated_rows_do_not_count() {
    // n = 3 leaves every sample-size gate open
    let f = penalize(Quartic1d { n: 3.0 }, Matrix::identity(1, 1), Vector::zeros(1)).unwrap().with_sample_size(3.0);
    let (c, v) = verify_penalized("quartic-1d", 0, &f, &Vector::zeros(1), &VerifySettings::default()).unwrap();
    let failing: Vec<_> = c.certificate.gates.iter().filter(|(_, g)| !g.holds).map(|(k, _)| k.clone()).collect();
    assert!(!failing.is_empty());
    let invalid = v.soundness.rows.iter().filter(|r| !r.gate_valid).count();
    assert!(invalid > 0);
    let expected = v.soundness.rows.iter().filter(|r| r.gate_valid).all(|r| r.holds);
    assert_eq!(v.soundness.all_hold, expected);
}

// One-dimensional posterior e^{f} against Simpson quadrature of the same density.
#[test]
fn grid_tv_against_independent_quadrature() {
    let f = penalize(Quartic1d { n: 20.0 }, Matrix::identity(1, 1), Vector::zeros(1)).unwrap();
    let c = certify("q", 0, &f, &Vector::zeros(1), &CertifySettings::default()).unwrap();
    let g = &c.geometry;
    let gp = grid_posterior(&f, &g.center, &g.pair.dg2, &GridOptions::default(), None).unwrap();
    let tv = tv_grid(&gp, &g.center, &g.pair.dg2).unwrap();
    let (m, s) = (g.center[0], 1.0 / g.pair.dg2[(0, 0)].sqrt());
    let nrm = Normal::new(m, s).unwrap();
    let h = s * 1e-3;
    let xs: Vec<f64> = (-12_000..=12_000).map(|i| m + i as f64 * h).collect();
    let fv: Vec<f64> = xs.iter().map(|&x| laplace_kit::model::Objective::value(&f, &Vector::from_element(1, x))).collect();
    let top = fv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = |i: usize| {
        if i == 0 || i == xs.len() - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let z: f64 = fv.iter().enumerate().map(|(i, v)| w(i) * (v - top).exp()).sum::<f64>() * h / 3.0;
    let diff: f64 =
        xs.iter().zip(&fv).enumerate().map(|(i, (&x, v))| w(i) * ((v - top).exp() / z - nrm.pdf(x)).abs()).sum::<f64>() * h / 6.0;
    assert!((tv.value - diff).abs() <= 4.0 * tv.error + 1e-7, "{} vs {diff}", tv.value);
}

#[test]
fn importance_sampling_agrees_with_grid() {
    let f = penalize(Logistic::generate(300, 2, 4), Matrix::identity(2, 2), Vector::zeros(2)).unwrap().with_sample_size(300.0);
    let c = certify("logistic", 4, &f, &Vector::zeros(2), &CertifySettings::default()).unwrap();
    let g = &c.geometry;
    let gp = grid_posterior(&f, &g.center, &g.pair.dg2, &GridOptions::default(), None).unwrap();
    let emp = grid_empirical(&gp, g).unwrap();
    let is = posterior_functionals_is(&f, g, &IsOptions { samples: 200_000, seed: 2, ..IsOptions::default() }).unwrap();
    let gm = emp.mean.unwrap();
    for j in 0..2 {
        assert!((gm[j] - is.mean[j]).abs() <= 5.0 * is.mean_stderr[j] + 1e-6, "{} vs {}", gm[j], is.mean[j]);
    }
    let a = emp.mean_shift.unwrap();
    assert!((a.value - is.mean_shift.value).abs() <= 5.0 * is.mean_shift.error + a.error + 1e-6);
}

// Halving the node spacing moves the estimate by less than the reported error.
#[test]
fn reported_error_covers_refinement() {
    let f = penalize(Quartic1d { n: 5.0 }, Matrix::identity(1, 1), Vector::zeros(1)).unwrap();
    let c = certify("q", 0, &f, &Vector::zeros(1), &CertifySettings::default()).unwrap();
    let g = &c.geometry;
    let tv_at = |res| {
        let gp =
            grid_posterior(&f, &g.center, &g.pair.dg2, &GridOptions { resolution: Some(res), ..GridOptions::default() }, None).unwrap();
        tv_grid(&gp, &g.center, &g.pair.dg2).unwrap()
    };
    let coarse = tv_at(61);
    let fine = tv_at(4001);
    assert!((coarse.value - fine.value).abs() <= 4.0 * coarse.error + 1e-12, "{coarse:?} vs {fine:?}");
}

#[test]
fn exact_gaussian_has_zero_tv() {
    let d2 = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let dq = d2.clone();
    let f = FnObjective::new(2, move |x: &Vector| -0.5 * (x.transpose() * &dq * x)[0]);
    let pair = PrecisionPair::new(d2.clone(), d2.clone()).unwrap();
    let g = LocalGeometry::new(Vector::zeros(2), pair, 4.0, DEFAULT_NU).unwrap();
    let gp = grid_posterior(&f, &g.center, &g.pair.dg2, &GridOptions::default(), None).unwrap();
    assert!(tv_grid(&gp, &g.center, &d2).unwrap().value < 1e-10);
}

#[test]
fn inverse_verification_excludes_reverse_kl_and_writes_valid_json() {
    let s = synthetic(Family::Exp, &SyntheticOptions::default()).unwrap();
    let (_, v) = verify_inverse("exp-inverse", &s.problem, &VerifySettings::default()).unwrap();
    let row = v.soundness.row("kl_reverse").unwrap();
    assert!(!row.gate_valid && row.note.is_some());
    assert!(v.soundness.all_hold);
    let json = to_canonical_json(&v).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(parsed["empirical"]["kl_reverse"]["value"].is_null());
}
