use manifold_ood::linalg::{solve_lower, Matrix};
use manifold_ood::offmanifold::{nullspace_of, sample_normal_direction};
use manifold_ood::onmanifold::{fit_codes, mahalanobis, sample_ellipsoid_surface, LatentClassStats};
use manifold_ood::rng::seeded;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Pearson statistic of angles in `[−π, π)` against `bins` equal bins.
fn angle_chi_square(angles: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &a in angles {
        let t = (a + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        counts[((t * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = angles.len() as f64 / bins as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

fn chi_square_critical(df: usize, significance: f64) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(1.0 - significance)
}

#[test]
fn nullspace_projector_matches_nalgebra_svd() {
    let mut rng = seeded(11);
    for &(rows, cols) in &[(10, 3), (25, 8), (60, 5), (7, 6)] {
        let j = random_matrix(rows, cols, &mut rng);
        let basis = nullspace_of(&j, 1e-6).unwrap();
        assert_eq!(basis.dim(), rows - cols);

        let dm = DMatrix::from_row_slice(rows, cols, j.as_slice());
        let svd = dm.clone().svd(true, false);
        let mut oracle_sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        oracle_sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in basis.singular_values().iter().zip(&oracle_sv) {
            assert!((a - b).abs() <= 1e-10 * oracle_sv[0], "{a} vs {b}");
        }
        // the column space projector from nalgebra's thin U, complemented
        let u = svd.u.unwrap();
        let p_col = &u * u.transpose();
        let b = basis.matrix();
        for r in 0..rows {
            for c in 0..rows {
                let ours: f64 = (0..basis.dim()).map(|k| b[(r, k)] * b[(c, k)]).sum();
                let eye = if r == c { 1.0 } else { 0.0 };
                assert!((ours - (eye - p_col[(r, c)])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn two_dimensional_nullspace_directions_are_uniform() {
    let mut rng = seeded(3);
    let j = random_matrix(4, 2, &mut rng);
    let basis = nullspace_of(&j, 1e-6).unwrap();
    assert_eq!(basis.dim(), 2);
    let (e0, e1) = (basis.vector(0), basis.vector(1));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let angles: Vec<f64> = (0..10_000)
        .map(|_| {
            let v = sample_normal_direction(&basis, &mut rng).unwrap();
            dot(&v, &e1).atan2(dot(&v, &e0))
        })
        .collect();
    let stat = angle_chi_square(&angles, 20);
    assert!(stat < chi_square_critical(19, 0.01), "chi-square {stat}");
}

#[test]
fn ellipsoid_pre_image_is_uniform_on_the_circle() {
    let mut rng = seeded(99);
    let identity = LatentClassStats {
        label: 0,
        mu_hat: vec![0.0, 0.0],
        sigma_hat: Matrix::identity(2),
        chol: Matrix::identity(2),
        radius_r: 1.0,
        eps_reg: 0.0,
        n: 0,
    };
    // and a skewed fit from elongated codes
    let codes: Vec<f64> = (0..400)
        .flat_map(|_| {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            [3.0 * a + 1.0, 0.8 * a + 0.5 * b - 2.0]
        })
        .collect();
    let skewed = fit_codes(1, &codes, 2).unwrap();
    for stats in [identity, skewed] {
        let zs = sample_ellipsoid_surface(&stats, 10_000, &mut rng);
        let angles: Vec<f64> = zs
            .iter()
            .map(|z| {
                let d: Vec<f64> = z.iter().zip(&stats.mu_hat).map(|(a, m)| a - m).collect();
                let u = solve_lower(&stats.chol, &d);
                u[1].atan2(u[0])
            })
            .collect();
        let stat = angle_chi_square(&angles, 20);
        assert!(stat < chi_square_critical(19, 0.01), "chi-square {stat}");
    }
}

#[test]
fn radius_of_standard_normal_codes_tracks_chi_square_quantile() {
    let mut rng = seeded(7);
    let codes: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let stats = fit_codes(0, &codes, 2).unwrap();
    let oracle = chi_square_critical(2, 0.05).sqrt();
    assert!((oracle - 2.4477).abs() < 1e-3);
    assert!((stats.radius_r - oracle).abs() / oracle < 0.05, "{} vs {oracle}", stats.radius_r);
}

fn spd_codes() -> impl Strategy<Value = (usize, Vec<f64>, u64)> {
    (1usize..5, any::<u64>()).prop_flat_map(|(d, seed)| {
        ((d + 1)..200usize).prop_map(move |n| {
            let mut rng = seeded(seed);
            let mix = random_matrix(d, d, &mut rng);
            let codes = (0..n)
                .flat_map(|_| {
                    let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    mix.matvec(&g)
                })
                .collect();
            (d, codes, seed)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coverage_is_calibrated((d, codes, _seed) in spd_codes()) {
        let stats = fit_codes(0, &codes, d).unwrap();
        let n = codes.len() / d;
        let inside = codes.chunks(d).filter(|z| mahalanobis(z, &stats) <= stats.radius_r).count();
        let frac = inside as f64 / n as f64;
        prop_assert!(frac >= 0.95 && frac <= 0.95 + 1.0 / n as f64 + 1e-12, "{inside}/{n}");
    }

    #[test]
    fn surface_samples_solve_the_ellipsoid_equation((d, codes, seed) in spd_codes()) {
        let stats = fit_codes(0, &codes, d).unwrap();
        prop_assume!(stats.radius_r > 0.0);
        let r2 = stats.radius_r * stats.radius_r;
        for z in sample_ellipsoid_surface(&stats, 50, &mut seeded(seed ^ 1)) {
            let m = mahalanobis(&z, &stats);
            prop_assert!((m * m - r2).abs() / r2 < 1e-8);
        }
    }

    #[test]
    fn normal_directions_are_unit_and_orthogonal(rows in 3usize..40, cols_frac in 0.1f64..0.9, seed in any::<u64>()) {
        let cols = ((rows as f64 * cols_frac) as usize).clamp(1, rows - 1);
        let mut rng = seeded(seed);
        let j = random_matrix(rows, cols, &mut rng);
        let basis = nullspace_of(&j, 1e-6).unwrap();
        prop_assert_eq!(basis.dim(), rows - basis.rank_used());
        for _ in 0..5 {
            let v = sample_normal_direction(&basis, &mut rng).unwrap();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            let jt = j.tr_matvec(&v);
            prop_assert!(jt.iter().all(|x| x.abs() < 1e-6 * basis.sigma_max()));
        }
    }
}

