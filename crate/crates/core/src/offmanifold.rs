//! Type I outliers: steps along the left nullspace of the decoder Jacobian.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::batch::{OodBatch, OodRecord, OodType};
use crate::cvae::CvaeModel;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{norm, LeftSvd, Matrix};
use crate::rng::stream;

/// `∂ decode(z, label) / ∂ z`, `input_dim × latent_dim`.
#[derive(Debug, Clone)]
pub struct JacobianMatrix {
    pub matrix: Matrix,
    pub base_point: Vec<f64>,
    pub latent: Vec<f64>,
    pub label: usize,
}

/// Jacobian of the decoder at the posterior mean of `x`.
pub fn decoder_jacobian(model: &CvaeModel, x: &[f64], label: usize) -> Result<JacobianMatrix> {
    if !model.is_finite() {
        return Err(Error::numeric("CVAE parameters are not finite"));
    }
    let (mu, _) = model.encode(x, label)?;
    let mut j = jacobian_at(model, &mu, label)?;
    j.base_point = x.to_vec();
    Ok(j)
}

/// Jacobian of the decoder at an arbitrary latent point.
pub fn jacobian_at(model: &CvaeModel, z: &[f64], label: usize) -> Result<JacobianMatrix> {
    let (_, tangents) = model.decoder_jvp(z, label)?;
    if !tangents.all_finite() {
        return Err(Error::numeric("decoder Jacobian is not finite"));
    }
    let (d, m) = (tangents.rows(), tangents.cols());
    let mut matrix = Matrix::zeros(m, d);
    for j in 0..d {
        matrix.set_column(j, tangents.row_slice(j));
    }
    Ok(JacobianMatrix {
        matrix,
        base_point: Vec::new(),
        latent: z.to_vec(),
        label,
    })
}

/// Orthonormal basis of `null(Jᵀ)`. The basis vectors are the trailing left
/// singular vectors of `J`; they stay implicit (Householder reflectors plus a
/// small rotation) so a draw costs `O(input_dim · latent_dim)`.
#[derive(Debug, Clone)]
pub struct NullspaceBasis {
    svd: Option<LeftSvd>,
    ambient: usize,
    rank_used: usize,
    sv_threshold: f64,
    sigma_max: f64,
}

impl NullspaceBasis {
    /// Number of basis vectors.
    pub fn dim(&self) -> usize {
        self.ambient - self.rank_used
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn rank_used(&self) -> usize {
        self.rank_used
    }

    /// Absolute singular-value cutoff that decided the rank.
    pub fn sv_threshold(&self) -> f64 {
        self.sv_threshold
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn singular_values(&self) -> &[f64] {
        self.svd.as_ref().map_or(&[], |s| s.singular_values())
    }

    /// `basis · c` for `c` with `dim()` coefficients.
    pub fn combine(&self, c: &[f64]) -> Vec<f64> {
        assert_eq!(c.len(), self.dim());
        match &self.svd {
            None => c.to_vec(),
            Some(svd) => {
                let mut full = vec![0.0; self.ambient];
                full[self.rank_used..].copy_from_slice(c);
                svd.apply_u(&full)
            }
        }
    }

    /// Basis vector `i`.
    pub fn vector(&self, i: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        c[i] = 1.0;
        self.combine(&c)
    }

    /// The basis as an explicit `ambient × dim` matrix.
    pub fn matrix(&self) -> Matrix {
        let mut b = Matrix::zeros(self.ambient, self.dim());
        for i in 0..self.dim() {
            b.set_column(i, &self.vector(i));
        }
        b
    }
}

/// Left nullspace of `J` with numerical rank decided by `sv_threshold_rel · σ_max`.
pub fn left_nullspace_basis(j: &JacobianMatrix, sv_threshold_rel: f64) -> Result<NullspaceBasis> {
    nullspace_of(&j.matrix, sv_threshold_rel)
}

pub fn nullspace_of(j: &Matrix, sv_threshold_rel: f64) -> Result<NullspaceBasis> {
    if !j.is_finite() {
        return Err(Error::numeric("Jacobian has non-finite entries"));
    }
    let ambient = j.rows();
    if j.max_abs() == 0.0 {
        log::warn!("all-zero Jacobian: the whole input space is normal to the manifold");
        return Ok(NullspaceBasis {
            svd: None,
            ambient,
            rank_used: 0,
            sv_threshold: 0.0,
            sigma_max: 0.0,
        });
    }
    let svd = LeftSvd::new(j);
    let sigma_max = svd.singular_values()[0];
    let sv_threshold = sv_threshold_rel * sigma_max;
    let rank_used = svd.singular_values().iter().filter(|&&s| s > sv_threshold).count();
    Ok(NullspaceBasis {
        svd: Some(svd),
        ambient,
        rank_used,
        sv_threshold,
        sigma_max,
    })
}

/// Uniformly distributed unit vector in the span of the basis.
pub fn sample_normal_direction(basis: &NullspaceBasis, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let k = basis.dim();
    if k == 0 {
        return Err(Error::NoNormalDirection);
    }
    loop {
        let c: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&c);
        if n > 0.0 {
            // The basis is orthonormal, so normalizing c normalizes basis·c;
            // the second pass trims rounding from the reflectors.
            let mut v = basis.combine(&c.iter().map(|x| x / n).collect::<Vec<_>>());
            let vn = norm(&v);
            v.iter_mut().for_each(|x| *x /= vn);
            return Ok(v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Type1Config {
    pub beta_min: f64,
    pub beta_max: f64,
    pub per_sample: usize,
    pub sv_threshold_rel: f64,
    pub clamp: bool,
}

impl Default for Type1Config {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 1.0,
            per_sample: 1,
            sv_threshold_rel: 1e-6,
            clamp: false,
        }
    }
}

/// `x̃ = x + β v(x)` for every sample of `ds`, `per_sample` times each.
/// Samples are processed in parallel; sample `i` draws from its own stream
/// of a base seed taken from `rng`, so the output depends only on that seed.
pub fn generate_type1(model: &CvaeModel, ds: &LabeledDataset, cfg: &Type1Config, rng: &mut impl Rng) -> Result<OodBatch> {
    if ds.is_empty() {
        return Err(Error::contract("Type I generation needs a nonempty dataset"));
    }
    if !(cfg.beta_min <= cfg.beta_max) || cfg.beta_min < 0.0 {
        return Err(Error::contract(format!(
            "need 0 ≤ beta_min ≤ beta_max, got [{}, {}]",
            cfg.beta_min, cfg.beta_max
        )));
    }
    if cfg.beta_max == 0.0 {
        log::warn!("beta range is [0, 0]: Type I samples equal their sources");
    }
    let base: u64 = rng.random();
    let per_item: Vec<Result<Vec<(Vec<f64>, OodRecord)>>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut r = stream(base, i as u64);
            let (x, label) = (ds.sample(i), ds.label(i));
            let j = decoder_jacobian(model, x, label)?;
            let basis = left_nullspace_basis(&j, cfg.sv_threshold_rel)?;
            let mut out = Vec::with_capacity(cfg.per_sample);
            for _ in 0..cfg.per_sample {
                let beta = if cfg.beta_max > cfg.beta_min {
                    r.random_range(cfg.beta_min..cfg.beta_max)
                } else {
                    cfg.beta_min
                };
                let v = sample_normal_direction(&basis, &mut r)?;
                let mut xt: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + beta * b).collect();
                if cfg.clamp {
                    xt.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
                }
                out.push((
                    xt,
                    OodRecord {
                        kind: OodType::I,
                        source_class: label,
                        source_index: Some(i),
                        beta: Some(beta),
                        radius: None,
                    },
                ));
            }
            Ok(out)
        })
        .collect();
    let mut batch = OodBatch::new(ds.dim());
    for item in per_item {
        for (x, rec) in item? {
            batch.push(x, rec, None)?;
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNet, Layer, Reconstruction};
    use crate::rng::seeded;

    fn basis_of(rows: &[Vec<f64>]) -> NullspaceBasis {
        nullspace_of(&Matrix::from_rows(rows).unwrap(), 1e-6).unwrap()
    }

    #[test]
    fn axis_aligned_nullspace() {
        let b = basis_of(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(b.dim(), 1);
        let v = b.vector(0);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!((v[2].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_columns_leave_776() {
        let mut j = Matrix::zeros(784, 8);
        for k in 0..8 {
            j[(k, k)] = 1.0;
        }
        let b = nullspace_of(&j, 1e-6).unwrap();
        assert_eq!(b.rank_used(), 8);
        assert_eq!(b.dim(), 776);
        let m = b.matrix();
        for c in 0..776 {
            for r in 0..8 {
                assert!(m[(r, c)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_tall_matrix_basis_is_orthonormal_and_orthogonal() {
        let mut rng = seeded(4);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let j = Matrix::from_rows(&rows).unwrap();
        let b = nullspace_of(&j, 1e-6).unwrap();
        assert_eq!(b.dim(), 7);
        let m = b.matrix();
        let jt_b = j.transpose().matmul(&m);
        assert!(jt_b.max_abs() < 1e-8);
        let gram = m.transpose().matmul(&m);
        for r in 0..7 {
            for c in 0..7 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((gram[(r, c)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_jacobian_is_degenerate_identity() {
        let b = nullspace_of(&Matrix::zeros(4, 2), 1e-6).unwrap();
        assert_eq!(b.rank_used(), 0);
        assert_eq!(b.dim(), 4);
        assert_eq!(b.vector(2), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_rank_square_has_no_direction() {
        let b = basis_of(&[vec![2.0, 0.0], vec![1.0, 3.0]]);
        assert_eq!(b.dim(), 0);
        assert!(matches!(sample_normal_direction(&b, &mut seeded(0)), Err(Error::NoNormalDirection)));
    }

    #[test]
    fn one_dimensional_nullspace_gives_plus_minus() {
        let b = basis_of(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![0.0, 0.0]]);
        let mut rng = seeded(9);
        for _ in 0..20 {
            let v = sample_normal_direction(&b, &mut rng).unwrap();
            assert!(v[0].abs() < 1e-14 && v[1].abs() < 1e-14);
            assert!((v[2].abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_threshold_drops_tiny_singular_values() {
        let j = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-9], vec![0.0, 0.0]]).unwrap();
        assert_eq!(nullspace_of(&j, 1e-6).unwrap().rank_used(), 1);
        assert_eq!(nullspace_of(&j, 1e-12).unwrap().rank_used(), 2);
    }

    /// Decoder `x̂ = W [z; onehot] + b` with linear output.
    fn affine_model(w: Vec<f64>, out: usize, latent: usize, classes: usize) -> CvaeModel {
        let dec = DenseNet::new(vec![Layer::new(out, latent + classes, w, vec![0.1; out], Activation::Linear).unwrap()]).unwrap();
        let enc = DenseNet::zeros(&[out + classes, 2 * latent], Activation::Relu, Activation::Linear).unwrap();
        CvaeModel::from_nets(enc, dec, latent, classes, Reconstruction::Gaussian { sigma: 1.0 }).unwrap()
    }

    #[test]
    fn affine_decoder_jacobian_is_latent_block() {
        // 3 outputs, latent 2, 1 class: W = [[1, 2, 9], [3, 4, 9], [5, 6, 9]]
        let w = vec![1.0, 2.0, 9.0, 3.0, 4.0, 9.0, 5.0, 6.0, 9.0];
        let m = affine_model(w, 3, 2, 1);
        let j = decoder_jacobian(&m, &[0.2, 0.4, 0.6], 0).unwrap();
        let want = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(j.matrix[(r, c)], want[r][c]);
            }
        }
    }

    #[test]
    fn nan_parameters_are_numeric_errors() {
        let mut w = vec![0.0; 9];
        w[4] = f64::NAN;
        let m = affine_model(w, 3, 2, 1);
        assert!(matches!(decoder_jacobian(&m, &[0.0; 3], 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn saturated_sigmoid_pixel_has_flat_row() {
        // pixel 0 has a huge bias, pixel 1 is centred
        let dec = DenseNet::new(vec![Layer::new(2, 3, vec![1.0, 1.0, 0.0, 1.0, -1.0, 0.0], vec![60.0, 0.0], Activation::Sigmoid).unwrap()]).unwrap();
        let enc = DenseNet::zeros(&[3, 4], Activation::Relu, Activation::Linear).unwrap();
        let m = CvaeModel::from_nets(enc, dec, 2, 1, Reconstruction::Bernoulli).unwrap();
        let j = decoder_jacobian(&m, &[0.5, 0.5], 0).unwrap();
        assert!(j.matrix[(0, 0)].abs() < 1e-20 && j.matrix[(0, 1)].abs() < 1e-20);
        assert!((j.matrix[(1, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn type1_norm_law_and_zero_beta() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.1, 0.0];
        let m = affine_model(w, 4, 2, 1);
        let ds = LabeledDataset::new("d", 4, vec![0.2; 12], vec![0; 3], crate::data::ValueRange::Unit).unwrap();
        let cfg = Type1Config { beta_min: 0.5, beta_max: 0.5, per_sample: 2, ..Default::default() };
        let b = generate_type1(&m, &ds, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(b.len(), 6);
        for i in 0..b.len() {
            let d: Vec<f64> = b.sample(i).iter().zip(ds.sample(0)).map(|(a, c)| a - c).collect();
            assert!((norm(&d) - 0.5).abs() < 1e-9);
            assert_eq!(b.record(i).source_index, Some(i / 2));
        }
        let zero = Type1Config { beta_min: 0.0, beta_max: 0.0, ..Default::default() };
        let b = generate_type1(&m, &ds, &zero, &mut seeded(1)).unwrap();
        assert_eq!(b.samples(), ds.samples());
        let again = generate_type1(&m, &ds, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(again, generate_type1(&m, &ds, &cfg, &mut seeded(1)).unwrap());
    }

    #[test]
    fn type1_rejects_empty_and_bad_ranges() {
        let m = affine_model(vec![1.0; 6], 2, 2, 1);
        let empty = LabeledDataset::new("e", 2, vec![], vec![], crate::data::ValueRange::Unit).unwrap();
        assert!(matches!(generate_type1(&m, &empty, &Type1Config::default(), &mut seeded(0)), Err(Error::Contract(_))));
        let ds = LabeledDataset::new("d", 2, vec![0.0; 2], vec![0], crate::data::ValueRange::Unit).unwrap();
        let bad = Type1Config { beta_min: 1.0, beta_max: 0.5, ..Default::default() };
        assert!(matches!(generate_type1(&m, &ds, &bad, &mut seeded(0)), Err(Error::Contract(_))));
    }
}
