//! Type II outliers: decoded points on the coverage ellipsoid of each class's
//! latent Gaussian.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::batch::{OodBatch, OodRecord, OodType};
use crate::cvae::CvaeModel;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, norm, solve_lower, Matrix};
use crate::rng::stream;

/// Share of a class's codes that the radius must enclose.
pub const COVERAGE: f64 = 0.95;

/// Smallest diagonal loading, for clusters whose covariance trace is zero.
const EPS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentClassStats {
    pub label: usize,
    pub mu_hat: Vec<f64>,
    pub sigma_hat: Matrix,
    pub chol: Matrix,
    pub radius_r: f64,
    pub eps_reg: f64,
    pub n: usize,
}

impl LatentClassStats {
    pub fn latent_dim(&self) -> usize {
        self.mu_hat.len()
    }
}

/// Index of the order statistic that is the coverage radius, `⌈0.95 n⌉ − 1`.
pub fn coverage_rank(n: usize) -> usize {
    (95 * n).div_ceil(100).max(1) - 1
}

/// Gaussian fit of latent codes (rows of a `n × d` row-major buffer).
/// Covariance divides by `n`.
pub fn fit_codes(label: usize, codes: &[f64], d: usize) -> Result<LatentClassStats> {
    if d == 0 || codes.len() % d != 0 {
        return Err(Error::contract("codes buffer is not a whole number of latent vectors"));
    }
    let n = codes.len() / d;
    if n < d + 1 {
        return Err(Error::contract(format!(
            "class {label} has {n} codes, need at least latent_dim + 1 = {}",
            d + 1
        )));
    }
    let rows = || codes.chunks_exact(d);
    // Accumulate offsets from the first code so a tight cluster keeps its
    // exact centre.
    let origin = &codes[..d];
    let mut shift = vec![0.0; d];
    for z in rows() {
        for ((m, v), o) in shift.iter_mut().zip(z).zip(origin) {
            *m += v - o;
        }
    }
    let mu: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s / n as f64).collect();
    let mut sigma = Matrix::zeros(d, d);
    for z in rows() {
        for a in 0..d {
            let da = z[a] - mu[a];
            for b in 0..=a {
                sigma[(a, b)] += da * (z[b] - mu[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = sigma[(a, b)] / n as f64;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    let eps_reg = (1e-6 * sigma.trace() / d as f64).max(EPS_FLOOR);
    for a in 0..d {
        sigma[(a, a)] += eps_reg;
    }
    let chol = cholesky(&sigma)?;
    let mut stats = LatentClassStats {
        label,
        mu_hat: mu,
        sigma_hat: sigma,
        chol,
        radius_r: 0.0,
        eps_reg,
        n,
    };
    let mut dist: Vec<f64> = rows().map(|z| mahalanobis(z, &stats)).collect();
    dist.sort_by(f64::total_cmp);
    stats.radius_r = dist[coverage_rank(n)];
    Ok(stats)
}

/// Posterior-mean codes of every sample of `label`, fitted with [`fit_codes`].
pub fn fit_latent_gaussian(model: &CvaeModel, ds: &LabeledDataset, label: usize) -> Result<LatentClassStats> {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == label).collect();
    let codes = model.encode_means(&ds.subset(&idx))?;
    fit_codes(label, &codes, model.latent_dim())
}

/// One fit per class, or a single pooled fit shared by all classes when
/// `pooled` is set.
pub fn fit_class_stats(model: &CvaeModel, ds: &LabeledDataset, pooled: bool) -> Result<Vec<LatentClassStats>> {
    let classes = model.n_classes();
    if pooled {
        let codes = model.encode_means(ds)?;
        let shared = fit_codes(0, &codes, model.latent_dim())?;
        return Ok((0..classes)
            .map(|k| LatentClassStats { label: k, ..shared.clone() })
            .collect());
    }
    (0..classes)
        .into_par_iter()
        .map(|k| fit_latent_gaussian(model, ds, k))
        .collect()
}

/// `√((z − μ̂)ᵀ Σ̂⁻¹ (z − μ̂))`.
pub fn mahalanobis(z: &[f64], stats: &LatentClassStats) -> f64 {
    let diff: Vec<f64> = z.iter().zip(&stats.mu_hat).map(|(a, b)| a - b).collect();
    norm(&solve_lower(&stats.chol, &diff))
}

/// Points `μ̂ + r L u/‖u‖`, `u ~ N(0, I)`: uniform on the unit sphere before
/// the affine map, so not uniform in ellipsoid surface area.
pub fn sample_ellipsoid_surface(stats: &LatentClassStats, count: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if stats.radius_r == 0.0 {
        log::warn!("class {} has zero coverage radius; returning copies of the mean", stats.label);
        return vec![stats.mu_hat.clone(); count];
    }
    let d = stats.latent_dim();
    (0..count)
        .map(|_| {
            let u = loop {
                let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let n = norm(&u);
                if n > 0.0 {
                    break u.into_iter().map(|x| x / n).collect::<Vec<_>>();
                }
            };
            let lu = stats.chol.matvec(&u);
            stats.mu_hat.iter().zip(&lu).map(|(m, v)| m + stats.radius_r * v).collect()
        })
        .collect()
}

/// Decodes `count_per_class` ellipsoid-surface points for each class with
/// that class's conditioning. Class `k` uses stream `k` of a base seed drawn
/// from `rng`.
pub fn generate_type2(
    model: &CvaeModel,
    stats: &[LatentClassStats],
    count_per_class: usize,
    rng: &mut impl Rng,
) -> Result<OodBatch> {
    for k in 0..model.n_classes() {
        if !stats.iter().any(|s| s.label == k) {
            return Err(Error::contract(format!("no latent statistics for class {k}")));
        }
    }
    let base: u64 = rng.random();
    let per_class: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>>> = (0..model.n_classes())
        .into_par_iter()
        .map(|k| {
            let s = stats.iter().find(|s| s.label == k).expect("checked above");
            let mut r = stream(base, k as u64);
            sample_ellipsoid_surface(s, count_per_class, &mut r)
                .into_iter()
                .map(|z| Ok((model.decode(&z, k)?, z)))
                .collect()
        })
        .collect();
    let mut batch = OodBatch::new(model.input_dim());
    for (k, items) in per_class.into_iter().enumerate() {
        let radius = stats.iter().find(|s| s.label == k).map(|s| s.radius_r);
        for (x, z) in items? {
            let rec = OodRecord {
                kind: OodType::II,
                source_class: k,
                source_index: None,
                beta: None,
                radius,
            };
            batch.push(x, rec, Some(z))?;
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn stats_from(mu: Vec<f64>, sigma: Vec<Vec<f64>>, r: f64) -> LatentClassStats {
        let sigma = Matrix::from_rows(&sigma).unwrap();
        LatentClassStats {
            label: 0,
            chol: cholesky(&sigma).unwrap(),
            mu_hat: mu,
            sigma_hat: sigma,
            radius_r: r,
            eps_reg: 0.0,
            n: 0,
        }
    }

    #[test]
    fn identical_codes_degenerate() {
        let codes = [0.3, -0.7].repeat(10);
        let s = fit_codes(2, &codes, 2).unwrap();
        assert_eq!(s.mu_hat, vec![0.3, -0.7]);
        assert_eq!(s.radius_r, 0.0);
        assert_eq!(s.eps_reg, EPS_FLOOR);
        assert_eq!(s.sigma_hat[(0, 0)], EPS_FLOOR);
        assert_eq!(s.sigma_hat[(0, 1)], 0.0);
        let z = sample_ellipsoid_surface(&s, 3, &mut seeded(0));
        assert_eq!(z, vec![vec![0.3, -0.7]; 3]);
    }

    #[test]
    fn cross_codes_half_identity() {
        let codes = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let s = fit_codes(0, &codes, 2).unwrap();
        assert_eq!(s.mu_hat, vec![0.0, 0.0]);
        let eps = 1e-6 * 0.5;
        assert!((s.eps_reg - eps).abs() < 1e-20);
        assert!((s.sigma_hat[(0, 0)] - (0.5 + eps)).abs() < 1e-15);
        assert!((s.sigma_hat[(1, 1)] - (0.5 + eps)).abs() < 1e-15);
        assert_eq!(s.sigma_hat[(0, 1)], 0.0);
    }

    #[test]
    fn too_few_codes_is_contract_error() {
        assert!(matches!(fit_codes(0, &[0.0, 1.0, 2.0, 3.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn coverage_rank_matches_ceiling() {
        for n in 1..500usize {
            let want = (0.95 * n as f64 - 1e-9).ceil() as usize - 1;
            assert_eq!(coverage_rank(n), want, "n = {n}");
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let s = stats_from(vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        assert_eq!(mahalanobis(&[1.0, 1.0], &s), 0.0);
        assert!((mahalanobis(&[4.0, 5.0], &s) - 5.0).abs() < 1e-15);
        let s = stats_from(vec![0.0, 0.0], vec![vec![4.0, 0.0], vec![0.0, 1.0]], 1.0);
        assert!((mahalanobis(&[2.0, 0.0], &s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sphere_special_case() {
        let s = stats_from(vec![0.0; 3], vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 2.0);
        for z in sample_ellipsoid_surface(&s, 200, &mut seeded(3)) {
            assert!((norm(&z) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn samples_satisfy_ellipsoid_equation() {
        let s = stats_from(vec![0.5, -2.0], vec![vec![3.0, 1.2], vec![1.2, 0.8]], 1.7);
        for z in sample_ellipsoid_surface(&s, 500, &mut seeded(5)) {
            let m = mahalanobis(&z, &s);
            assert!((m * m - 1.7 * 1.7).abs() / (1.7 * 1.7) < 1e-8);
        }
    }
}
