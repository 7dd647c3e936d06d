use laplace_kit::geometry::{
    concentration_radius, effective_dimension, gaussian_ball_radius, gaussian_norm_even_moment, qf_tail_bound, sample_gaussian,
    LocalGeometry, PrecisionPair, DEFAULT_NU,
};
use laplace_kit::{Matrix, Vector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn pair() -> PrecisionPair<f64> {
    let d2 = Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
    PrecisionPair::from_penalty(d2, &Matrix::identity(3, 3)).unwrap()
}

// For B = I_p the radius √p + √(2x) is a χ²_p quantile bound.
#[test]
fn ball_radius_against_chi_square() {
    for p in [1usize, 2, 5, 10] {
        for x in [1.0, 2.0, 4.0] {
            let r = gaussian_ball_radius(&Matrix::identity(p, p), x);
            let tail = 1.0 - ChiSquared::new(p as f64).unwrap().cdf(r * r);
            assert!(tail <= (-x as f64).exp(), "p={p} x={x}: {tail}");
        }
    }
}

#[test]
fn even_moments_against_chi_square() {
    // E χ²_p^k for k = 1, 2, 3: p, p(p+2), p(p+2)(p+4)
    for p in [1usize, 3, 6] {
        let b = Matrix::identity(p, p);
        let pf = p as f64;
        assert_eq!(gaussian_norm_even_moment(&b, 2).unwrap(), pf);
        assert_eq!(gaussian_norm_even_moment(&b, 4).unwrap(), pf * (pf + 2.0));
        assert_eq!(gaussian_norm_even_moment(&b, 6).unwrap(), pf * (pf + 2.0) * (pf + 4.0));
    }
    assert!(gaussian_norm_even_moment(&Matrix::identity(2, 2), 3).is_err());
}

#[test]
fn samples_have_the_precision_inverse_as_covariance() {
    let pr = pair();
    let n = 200_000;
    let s = sample_gaussian(&pr, n, 12).unwrap();
    let cov = s.transpose() * &s / n as f64;
    let target = pr.covariance();
    assert!((&cov - &target).amax() < 0.01, "{cov} vs {target}");
}

// Monte Carlo tail of ‖Dγ_G‖ against exp{−(z − √p_G)²/2}.
#[test]
fn tail_bound_dominates_monte_carlo() {
    let pr = pair();
    let p_g = effective_dimension(&pr);
    let n = 200_000;
    let s = sample_gaussian(&pr, n, 3).unwrap();
    for z in [2.0, 2.5, 3.0] {
        let hits = (0..n)
            .filter(|&i| {
                let g = s.row(i).transpose();
                (g.transpose() * &pr.d2 * &g)[0].sqrt() > z
            })
            .count() as f64
            / n as f64;
        let b = qf_tail_bound(p_g, z);
        assert!(b.applies);
        let se = (hits * (1.0 - hits) / n as f64).sqrt();
        assert!(hits <= b.bound + 4.0 * se, "z={z}: {hits} > {}", b.bound);
    }
    assert!(!qf_tail_bound(p_g, 0.1).applies);
}

#[test]
fn effective_dimension_and_local_set() {
    let pr = pair();
    let eig = (pr.d2.clone() * pr.dg2.clone().try_inverse().unwrap()).eigenvalues().unwrap();
    let tr: f64 = eig.iter().sum();
    let p_g = effective_dimension(&pr);
    assert!((p_g - tr).abs() < 1e-12);
    assert!(p_g > 0.0 && p_g < 3.0);
    let g = LocalGeometry::new(Vector::zeros(3), pr, 4.0, DEFAULT_NU).unwrap();
    assert_eq!(g.r_g, concentration_radius(p_g, 4.0));
    let edge = g.d_inverse().unwrap() * Vector::from_vec(vec![g.local_radius, 0.0, 0.0]);
    assert!(g.in_local_set(&edge).unwrap());
    assert!(!g.in_local_set(&(edge * 1.01)).unwrap());
}

#[test]
fn f32_path_agrees_with_f64() {
    let pr = pair();
    let d2: nalgebra::DMatrix<f32> = nalgebra::convert(pr.d2.clone());
    let pr32 = PrecisionPair::<f32>::from_penalty(d2, &nalgebra::DMatrix::identity(3, 3)).unwrap();
    let a = effective_dimension(&pr) as f32;
    let b = effective_dimension(&pr32);
    assert!((a - b).abs() < 1e-5);
}
