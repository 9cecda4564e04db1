//! Random SPD elasticity-matrix field C(x, w) = Q^T T(x, w) Q.
//!
//! The mean matrix factorizes as C_bar = Q^T Q (Q upper triangular); the
//! fluctuation field T has identity mean and is built from 6 independent
//! standard Gaussian germ fields by the maximum-entropy construction: an
//! upper-triangular L with
//!
//!   L_jj = sigma * sqrt(2 h_{a_j}(g_jj)),   L_jk = sigma * g_jk  (j < k),
//!   sigma = delta_T / sqrt(n+1),            a_j = (n+1)/(2 delta_T^2) + (1-j)/2,
//!
//! where h_a(g) is the Gamma(a, 1) quantile of Phi(g), and T = L^T L. This
//! makes every realization SPD by construction and gives E[T] = I exactly.
//!
//! Dispersions are Frobenius-relative: delta_T^2 = E||T - I||_F^2 / ||I||_F^2
//! and likewise for C about C_bar; they are linked by
//!
//!   delta_C = delta_T / sqrt(n+1) * [1 + tr(C_bar)^2 / tr(C_bar^2)]^{1/2}.

use nalgebra::Matrix3;

use crate::error::MaterialError;
use crate::field::{GaussianDraw, KleBasis, PointWeights, FIELD_COUNT};
use crate::real::{real, Real};
use crate::special::gamma_quantile_of_normal;

/// Matrix dimension of the plane-stress elasticity matrix.
pub const MATRIX_DIM: usize = 3;

/// Mean elasticity matrix and its upper-triangular factor, C_bar = Q^T Q.
#[derive(Debug, Clone)]
pub struct MeanElasticity<T> {
    pub c_bar: Matrix3<T>,
    pub q: Matrix3<T>,
}

impl<T: Real> MeanElasticity<T> {
    pub fn from_matrix(c_bar: Matrix3<T>) -> Result<Self, MaterialError> {
        let scale = c_bar.amax();
        let tol = real::<T>(1e-12) * scale;
        for i in 0..3 {
            for j in i + 1..3 {
                if (c_bar[(i, j)] - c_bar[(j, i)]).abs() > tol {
                    return Err(MaterialError::MeanNotSpd);
                }
            }
        }
        let chol = nalgebra::Cholesky::new(c_bar).ok_or(MaterialError::MeanNotSpd)?;
        let q = chol.l().transpose();
        Ok(Self { c_bar, q })
    }

    /// Orthotropic plane-stress mean from engineering constants
    /// (E in N/cm^2). The reciprocal Poisson ratio is nu12 = nu21 E1 / E2.
    pub fn orthotropic(e1: T, e2: T, nu21: T, g12: T) -> Result<Self, MaterialError> {
        let nu12 = nu21 * e1 / e2;
        let d = T::one() - nu12 * nu21;
        if d <= T::zero() || e1 <= T::zero() || e2 <= T::zero() || g12 <= T::zero() {
            return Err(MaterialError::MeanNotSpd);
        }
        let c = Matrix3::new(
            e1 / d,
            nu21 * e1 / d,
            T::zero(),
            nu21 * e1 / d,
            e2 / d,
            T::zero(),
            T::zero(),
            T::zero(),
            g12,
        );
        Self::from_matrix(c)
    }

    pub fn isotropic(e: T, nu: T) -> Result<Self, MaterialError> {
        let f = e / (T::one() - nu * nu);
        let c = Matrix3::new(
            f,
            nu * f,
            T::zero(),
            nu * f,
            f,
            T::zero(),
            T::zero(),
            T::zero(),
            e / (real::<T>(2.0) * (T::one() + nu)),
        );
        Self::from_matrix(c)
    }

    /// The bracketed trace factor of the dispersion relation,
    /// [1 + tr(C_bar)^2 / tr(C_bar^2)]^{1/2}.
    fn trace_factor(&self) -> T {
        let tr = self.c_bar.trace();
        let tr2 = (self.c_bar * self.c_bar).trace();
        (T::one() + tr * tr / tr2).sqrt()
    }
}

/// delta_T from delta_C for a given mean matrix; errors if the resulting
/// delta_T leaves (0, 1).
pub fn delta_t_from_delta_c<T: Real>(
    delta_c: T,
    mean: &MeanElasticity<T>,
) -> Result<T, MaterialError> {
    if delta_c <= T::zero() || delta_c >= T::one() {
        return Err(MaterialError::DispersionRange {
            name: "delta_C",
            value: delta_c.to_f64_lossy(),
        });
    }
    let n1 = real::<T>((MATRIX_DIM + 1) as f64).sqrt();
    let dt = delta_c * n1 / mean.trace_factor();
    if dt <= T::zero() || dt >= T::one() {
        return Err(MaterialError::CalibrationInfeasible(dt.to_f64_lossy()));
    }
    Ok(dt)
}

/// The forward relation, delta_C from delta_T.
pub fn delta_c_from_delta_t<T: Real>(delta_t: T, mean: &MeanElasticity<T>) -> T {
    let n1 = real::<T>((MATRIX_DIM + 1) as f64).sqrt();
    delta_t / n1 * mean.trace_factor()
}

/// Calibrated dispersion pair.
#[derive(Debug, Clone, Copy)]
pub struct DispersionParams<T> {
    pub delta_c: T,
    pub delta_t: T,
}

impl<T: Real> DispersionParams<T> {
    pub fn calibrate(delta_c: T, mean: &MeanElasticity<T>) -> Result<Self, MaterialError> {
        Ok(Self {
            delta_c,
            delta_t: delta_t_from_delta_c(delta_c, mean)?,
        })
    }
}

/// Sampler of the identity-mean SPD fluctuation matrix T.
#[derive(Debug, Clone)]
pub struct FluctuationSampler<T> {
    pub delta_t: T,
    sigma: T,
    gamma_shape: [T; MATRIX_DIM],
}

impl<T: Real> FluctuationSampler<T> {
    pub fn new(delta_t: T) -> Result<Self, MaterialError> {
        if delta_t <= T::zero() || delta_t >= T::one() {
            return Err(MaterialError::DispersionRange {
                name: "delta_T",
                value: delta_t.to_f64_lossy(),
            });
        }
        let np1 = real::<T>((MATRIX_DIM + 1) as f64);
        let sigma = delta_t / np1.sqrt();
        let two = real::<T>(2.0);
        let mut gamma_shape = [T::zero(); MATRIX_DIM];
        for (j, a) in gamma_shape.iter_mut().enumerate() {
            // a_j = (n+1)/(2 delta^2) + (1 - j)/2 with j = 1..n
            *a = np1 / (two * delta_t * delta_t)
                + (T::one() - real::<T>((j + 1) as f64)) / two;
            if *a <= T::zero() {
                return Err(MaterialError::BadGammaShape {
                    index: j + 1,
                    value: a.to_f64_lossy(),
                });
            }
        }
        Ok(Self {
            delta_t,
            sigma,
            gamma_shape,
        })
    }

    /// One fluctuation matrix from 6 standard normal germ values, ordered
    /// as [g_11, g_22, g_33, g_12, g_13, g_23].
    pub fn sample_t(&self, germ: &[T; FIELD_COUNT]) -> Result<Matrix3<T>, MaterialError> {
        for &g in germ {
            if !g.is_finite() {
                return Err(MaterialError::NonFiniteGerm);
            }
        }
        let two = real::<T>(2.0);
        let mut l = Matrix3::<T>::zeros();
        for j in 0..MATRIX_DIM {
            let h = gamma_quantile_of_normal(self.gamma_shape[j], germ[j]);
            l[(j, j)] = self.sigma * (two * h).sqrt();
        }
        l[(0, 1)] = self.sigma * germ[3];
        l[(0, 2)] = self.sigma * germ[4];
        l[(1, 2)] = self.sigma * germ[5];
        Ok(l.transpose() * l)
    }

    /// The deterministic matrix produced by an all-zero germ; useful as a
    /// closed-form reference in tests.
    pub fn zero_germ_t(&self) -> Matrix3<T> {
        let two = real::<T>(2.0);
        let mut t = Matrix3::<T>::zeros();
        for j in 0..MATRIX_DIM {
            let h = gamma_quantile_of_normal(self.gamma_shape[j], T::zero());
            t[(j, j)] = self.sigma * self.sigma * two * h;
        }
        t
    }
}

/// C = Q^T T Q.
pub fn c_from_t<T: Real>(mean: &MeanElasticity<T>, t: &Matrix3<T>) -> Matrix3<T> {
    mean.q.transpose() * t * mean.q
}

/// Evaluate the six germ fields of a draw at a batch of points using
/// precomputed interpolation weights. Returns row-major [point][field].
pub fn germ_fields_at<T: Real>(
    basis: &KleBasis<T>,
    draw: &GaussianDraw<T>,
    weights: &PointWeights<T>,
) -> Result<Vec<[T; FIELD_COUNT]>, crate::error::FieldError> {
    let n_pts = weights.entries.len();
    let mut out = vec![[T::zero(); FIELD_COUNT]; n_pts];
    let mut buf = vec![T::zero(); n_pts];
    for f in 0..FIELD_COUNT {
        let nodal = basis.nodal_combination(draw.row(f))?;
        weights.apply(&nodal, &mut buf);
        for (k, v) in buf.iter().enumerate() {
            out[k][f] = *v;
        }
    }
    Ok(out)
}

/// The sampled elasticity field at a batch of points: per point, evaluate
/// the germ fields through the KLE basis, build T, return Q^T T Q.
/// Deterministic given (draw, points).
pub fn sample_c_field<T: Real>(
    mean: &MeanElasticity<T>,
    sampler: &FluctuationSampler<T>,
    basis: &KleBasis<T>,
    draw: &GaussianDraw<T>,
    points: &[[T; 2]],
) -> Result<Vec<Matrix3<T>>, crate::error::Error> {
    let weights = basis.point_weights(points)?;
    sample_c_field_with_weights(mean, sampler, basis, draw, &weights)
}

/// Hot-path variant with precomputed interpolation weights.
pub fn sample_c_field_with_weights<T: Real>(
    mean: &MeanElasticity<T>,
    sampler: &FluctuationSampler<T>,
    basis: &KleBasis<T>,
    draw: &GaussianDraw<T>,
    weights: &PointWeights<T>,
) -> Result<Vec<Matrix3<T>>, crate::error::Error> {
    let germs = germ_fields_at(basis, draw, weights)?;
    let mut out = Vec::with_capacity(germs.len());
    for g in &germs {
        let t = sampler.sample_t(g)?;
        out.push(c_from_t(mean, &t));
    }
    Ok(out)
}

/// The Table-style orthotropic femoral mean material, N/cm^2.
pub fn default_orthotropic_mean<T: Real>() -> MeanElasticity<T> {
    MeanElasticity::orthotropic(
        real(12000e2),
        real(20000e2),
        real(0.371),
        real(5610e2),
    )
    .expect("reference orthotropic parameters are SPD")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{build_kle, draw, CovarianceKernel};
    use crate::mesh::build_plate_hierarchy;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn identity_mean_gives_delta_t_equal_delta_c() {
        let mean = MeanElasticity::from_matrix(Matrix3::identity()).unwrap();
        let dt = delta_t_from_delta_c(0.1, &mean).unwrap();
        assert_abs_diff_eq!(dt, 0.1, epsilon = 1e-14);
    }

    #[test]
    fn table_mean_round_trips() {
        let mean = default_orthotropic_mean::<f64>();
        let dt = delta_t_from_delta_c(0.1, &mean).unwrap();
        let back = delta_c_from_delta_t(dt, &mean);
        assert_abs_diff_eq!(back, 0.1, epsilon = 1e-14);
        // cross-check against the independently computed value
        assert_relative_eq!(dt, 0.11074232350833808, max_relative = 1e-12);
    }

    #[test]
    fn delta_t_is_scale_invariant() {
        let c = Matrix3::new(2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let m1 = MeanElasticity::from_matrix(c).unwrap();
        let m2 = MeanElasticity::from_matrix(c * 12345.0).unwrap();
        let d1 = delta_t_from_delta_c(0.2, &m1).unwrap();
        let d2 = delta_t_from_delta_c(0.2, &m2).unwrap();
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-14);
    }

    #[test]
    fn cholesky_factor_reproduces_mean() {
        let mean = default_orthotropic_mean::<f64>();
        let back = mean.q.transpose() * mean.q;
        let scale = mean.c_bar.amax();
        assert!((back - mean.c_bar).amax() <= 1e-12 * scale);
        // upper triangular with positive diagonal
        for i in 0..3 {
            assert!(mean.q[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(mean.q[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn non_spd_mean_rejected() {
        let c = Matrix3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            MeanElasticity::from_matrix(c),
            Err(MaterialError::MeanNotSpd)
        ));
    }

    #[test]
    fn fluctuation_mean_is_identity_and_dispersion_matches() {
        let delta_t = 0.2;
        let sampler = FluctuationSampler::new(delta_t).unwrap();
        let n = 100_000usize;
        let mut sum = Matrix3::<f64>::zeros();
        let mut sum_sq = Matrix3::<f64>::zeros();
        let mut frob_sum = 0.0;
        let mut all_spd = true;
        for s in 0..n {
            let d = draw::<f64>(42, s as u64, 1);
            let germ: [f64; 6] = d.xi.as_slice().try_into().unwrap();
            let t = sampler.sample_t(&germ).unwrap();
            sum += t;
            sum_sq += t.component_mul(&t);
            frob_sum += (t - Matrix3::identity()).norm_squared();
            all_spd &= nalgebra::Cholesky::new(t).is_some();
        }
        assert!(all_spd);
        let nf = n as f64;
        let mean = sum / nf;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let var = (sum_sq[(i, j)] / nf - mean[(i, j)].powi(2)).max(0.0);
                let se = (var / nf).sqrt();
                assert!(
                    (mean[(i, j)] - want).abs() <= 3.0 * se + 1e-12,
                    "entry ({i},{j}): mean {} want {want} se {se}",
                    mean[(i, j)]
                );
            }
        }
        // delta_T^2 = E||T - I||_F^2 / ||I||_F^2, ||I||_F^2 = 3
        let emp = (frob_sum / nf / 3.0).sqrt();
        assert!(
            (emp - delta_t).abs() <= 0.05 * delta_t,
            "empirical delta_T {emp} vs {delta_t}"
        );
    }

    #[test]
    fn zero_germ_matches_closed_form() {
        let sampler = FluctuationSampler::new(0.15).unwrap();
        let t = sampler.sample_t(&[0.0; 6]).unwrap();
        let want = sampler.zero_germ_t();
        assert!((t - want).amax() <= 1e-14 * want.amax());
        // diagonal, as the closed form says
        assert_eq!(t[(0, 1)], 0.0);
        assert_eq!(t[(0, 2)], 0.0);
    }

    #[test]
    fn non_finite_germ_rejected() {
        let sampler = FluctuationSampler::new(0.1).unwrap();
        let mut germ = [0.0f64; 6];
        germ[2] = f64::NAN;
        assert!(matches!(
            sampler.sample_t(&germ),
            Err(MaterialError::NonFiniteGerm)
        ));
    }

    fn plate_setup() -> (
        crate::mesh::MeshHierarchy<f64>,
        KleBasis<f64>,
        MeanElasticity<f64>,
        FluctuationSampler<f64>,
    ) {
        let h = build_plate_hierarchy::<f64>(7.0, 21.7, 2, 6, 1).unwrap();
        let kernel = CovarianceKernel::standard(3.5, 3.5).unwrap();
        let basis = build_kle(&kernel, h.finest(), 40).unwrap();
        let mean = default_orthotropic_mean::<f64>();
        let dt = delta_t_from_delta_c(0.1, &mean).unwrap();
        let sampler = FluctuationSampler::new(dt).unwrap();
        (h, basis, mean, sampler)
    }

    #[test]
    fn zero_draw_gives_identical_deterministic_c_everywhere() {
        let (_, basis, mean, sampler) = plate_setup();
        let mut d = draw::<f64>(1, 0, 40);
        for x in &mut d.xi {
            *x = 0.0;
        }
        let pts = [[1.0, 2.0], [3.5, 10.85], [6.0, 20.0]];
        let cs = sample_c_field(&mean, &sampler, &basis, &d, &pts).unwrap();
        let want = c_from_t(&mean, &sampler.zero_germ_t());
        for c in &cs {
            assert!((c - want).amax() <= 1e-12 * want.amax());
        }
    }

    #[test]
    fn small_dispersion_limit_approaches_mean() {
        let h = build_plate_hierarchy::<f64>(7.0, 21.7, 2, 6, 1).unwrap();
        let kernel = CovarianceKernel::standard(3.5, 3.5).unwrap();
        let basis = build_kle(&kernel, h.finest(), 40).unwrap();
        let mean = default_orthotropic_mean::<f64>();
        let sampler = FluctuationSampler::new(1e-4).unwrap();
        let pts = [[1.0, 2.0], [3.5, 10.85], [6.0, 20.0]];
        for s in 0..5 {
            let d = draw::<f64>(3, s, 40);
            let cs = sample_c_field(&mean, &sampler, &basis, &d, &pts).unwrap();
            for c in &cs {
                assert!(
                    (c - mean.c_bar).amax() <= 0.01 * mean.c_bar.amax(),
                    "deviation {}",
                    (c - mean.c_bar).amax()
                );
            }
        }
    }

    #[test]
    fn empirical_delta_c_matches_calibration() {
        let (_, basis, mean, sampler) = plate_setup();
        let pt = [[3.5, 10.85]];
        let n = 10_000usize;
        let mut frob = 0.0;
        let mut mean_acc = Matrix3::<f64>::zeros();
        for s in 0..n {
            let d = draw::<f64>(7, s as u64, 40);
            let c = sample_c_field(&mean, &sampler, &basis, &d, &pt).unwrap()[0];
            frob += (c - mean.c_bar).norm_squared();
            mean_acc += c;
        }
        let emp = (frob / n as f64 / mean.c_bar.norm_squared()).sqrt();
        assert!(
            (emp - 0.1).abs() <= 0.005,
            "empirical delta_C {emp} vs 0.1"
        );
        let dev = (mean_acc / n as f64 - mean.c_bar).amax() / mean.c_bar.amax();
        assert!(dev < 0.01, "mean deviation {dev}");
    }

    #[test]
    fn one_point_statistics_are_spatially_homogeneous() {
        let (_, basis, mean, sampler) = plate_setup();
        let pts = [[1.5, 4.0], [5.5, 17.0]];
        let n = 6_000usize;
        let mut frob = [0.0f64; 2];
        for s in 0..n {
            let d = draw::<f64>(19, s as u64, 40);
            let cs = sample_c_field(&mean, &sampler, &basis, &d, &pts).unwrap();
            for (k, c) in cs.iter().enumerate() {
                frob[k] += (c - mean.c_bar).norm_squared();
            }
        }
        let d0 = (frob[0] / n as f64 / mean.c_bar.norm_squared()).sqrt();
        let d1 = (frob[1] / n as f64 / mean.c_bar.norm_squared()).sqrt();
        // same homogeneous field statistics at both points, MC tolerance
        assert!((d0 - d1).abs() <= 0.05 * d0, "d0 {d0} d1 {d1}");
    }

    #[test]
    fn same_draw_identical_c_at_common_nodes_across_levels() {
        let (h, basis, mean, sampler) = plate_setup();
        let d = draw::<f64>(11, 5, 40);
        let pts0: Vec<[f64; 2]> = h.common_nodes[0]
            .iter()
            .map(|&i| h.meshes[0].nodes[i])
            .collect();
        let pts1: Vec<[f64; 2]> = h.common_nodes[1]
            .iter()
            .map(|&i| h.meshes[1].nodes[i])
            .collect();
        let c0 = sample_c_field(&mean, &sampler, &basis, &d, &pts0).unwrap();
        let c1 = sample_c_field(&mean, &sampler, &basis, &d, &pts1).unwrap();
        for (a, b) in c0.iter().zip(&c1) {
            assert_eq!(a, b); // bitwise
        }
    }

    #[test]
    fn realizations_symmetric_and_spd() {
        let (_, basis, mean, sampler) = plate_setup();
        let pts = [[0.5, 1.0], [6.5, 21.0]];
        for s in 0..200 {
            let d = draw::<f64>(23, s, 40);
            for c in sample_c_field(&mean, &sampler, &basis, &d, &pts).unwrap() {
                let asym = (c - c.transpose()).amax();
                assert!(asym <= 1e-12 * c.amax());
                assert!(nalgebra::Cholesky::new(c).is_some());
            }
        }
    }

    #[test]
    fn dispersion_out_of_range_rejected() {
        assert!(matches!(
            FluctuationSampler::<f64>::new(1.5),
            Err(MaterialError::DispersionRange { .. })
        ));
        let mean = default_orthotropic_mean::<f64>();
        assert!(matches!(
            delta_t_from_delta_c(0.0, &mean),
            Err(MaterialError::DispersionRange { .. })
        ));
        // delta_C large enough to push delta_T past 1
        assert!(matches!(
            delta_t_from_delta_c(0.95, &mean),
            Err(MaterialError::CalibrationInfeasible(_))
        ));
    }
}
