//! Unbiased moment machinery on mergeable power sums.
//!
//! Per common node and level, the accumulator carries raw power sums of the
//! fine quantity `x = u_l`, the coarse quantity `y = u_{l-1}` and the cross
//! terms needed for fourth-order bivariate moments. Everything downstream
//! (the level difference mean, the h2 variance estimates, the sampling
//! variance of variance differences) is a pure function of these sums.
//!
//! The estimator formulas:
//!   h2            unbiased variance, (S2 - S1^2/n) / (n - 1)
//!   Var(h2)       mu4/n - sigma^4 (n-3) / (n (n-1))
//!   Cov(h2, h2')  (mu22 - sx^2 sy^2)/n + 2 sxy^2 / (n (n-1))
//! with unbiased plug-ins for mu4, sigma^4, mu22, sx^2 sy^2 and sxy^2
//! obtained by inverting the exact expectation maps of the central sample
//! sums (see `unbiased_fourth_*` below). All coefficient matrices are
//! validated by exhaustive enumeration in the test suite.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::StatsError;
use crate::real::{real, Real};

/// h2, the unique symmetric unbiased variance estimator, from raw power
/// sums of one variable.
pub fn h2<T: Real>(s1: T, s2: T, n: u64) -> Result<T, StatsError> {
    if n < 2 {
        return Err(StatsError::InsufficientSamples {
            need: 2,
            have: n as usize,
        });
    }
    let nf = real::<T>(n as f64);
    let v = (s2 - s1 * s1 / nf) / (nf - T::one());
    Ok(v.max(T::zero()))
}

/// Sampling variance of h2 given the population central moments
/// (sigma^2, mu4). With unbiased moment estimates in place of the true
/// moments this is the plug-in estimator used for allocation.
pub fn var_of_h2<T: Real>(m2: T, m4: T, n: u64) -> Result<T, StatsError> {
    if n < 4 {
        return Err(StatsError::InsufficientSamples {
            need: 4,
            have: n as usize,
        });
    }
    Ok(var_of_h2_from_parts(m4, m2 * m2, n))
}

fn var_of_h2_from_parts<T: Real>(mu4: T, sigma4: T, n: u64) -> T {
    let nf = real::<T>(n as f64);
    mu4 / nf - sigma4 * (nf - real(3.0)) / (nf * (nf - T::one()))
}

/// Sampling covariance of h2(X) and h2(Y) on coupled samples, given the
/// population moments mu22 = E[(X-mx)^2 (Y-my)^2], the two variances and
/// the covariance sxy.
pub fn cov_of_h2_pair<T: Real>(
    mu22: T,
    var_x: T,
    var_y: T,
    cov_xy: T,
    n: u64,
) -> Result<T, StatsError> {
    if n < 4 {
        return Err(StatsError::InsufficientSamples {
            need: 4,
            have: n as usize,
        });
    }
    Ok(cov_of_h2_from_parts(
        mu22,
        var_x * var_y,
        cov_xy * cov_xy,
        n,
    ))
}

fn cov_of_h2_from_parts<T: Real>(mu22: T, var_prod: T, cov_sq: T, n: u64) -> T {
    let nf = real::<T>(n as f64);
    (mu22 - var_prod) / nf + real::<T>(2.0) * cov_sq / (nf * (nf - T::one()))
}

/// Unbiased estimates of (mu4, sigma^4) from the central sample sums
/// q2 = sum (x - xbar)^2 and q4 = sum (x - xbar)^4.
///
/// Inverts the exact expectations
///   E[q4]   = (n-1) [ (n^2-3n+3) mu4 + 3(2n-3) sigma^4 ] / n^2
///   E[q2^2] = (n-1) [ (n-1)      mu4 + (n^2-2n+3) sigma^4 ] / n
pub fn unbiased_fourth_univariate<T: Real>(q2: T, q4: T, n: u64) -> Result<(T, T), StatsError> {
    if n < 4 {
        return Err(StatsError::InsufficientSamples {
            need: 4,
            have: n as usize,
        });
    }
    let nf = real::<T>(n as f64);
    let one = T::one();
    let three = real::<T>(3.0);
    let two = real::<T>(2.0);
    let a = Matrix2::new(
        (nf - one) * (nf * nf - three * nf + three) / (nf * nf),
        three * (nf - one) * (two * nf - three) / (nf * nf),
        (nf - one) * (nf - one) / nf,
        (nf - one) * (nf * nf - two * nf + three) / nf,
    );
    let rhs = Vector2::new(q4, q2 * q2);
    let sol = a.lu().solve(&rhs).expect("moment map is invertible for n >= 4");
    Ok((sol[0], sol[1]))
}

/// Unbiased estimates of (mu22, sx^2 sy^2, sxy^2) from the bivariate
/// central sample sums q22, q20*q02 and q11^2.
///
/// Inverts the exact expectations
///   E[q22]     = (n-1) [ (n^2-3n+3) mu22 + (2n-3) p + 2(2n-3) c ] / n^2
///   E[q20 q02] = (n-1) [ (n-1) mu22 + (n-1)^2 p + 2 c ] / n
///   E[q11^2]   = (n-1) [ (n-1) mu22 + p + (n^2-2n+2) c ] / n
/// where p = mu20 mu02 and c = mu11^2.
pub fn unbiased_fourth_bivariate<T: Real>(
    q22: T,
    q20_q02: T,
    q11_sq: T,
    n: u64,
) -> Result<(T, T, T), StatsError> {
    if n < 4 {
        return Err(StatsError::InsufficientSamples {
            need: 4,
            have: n as usize,
        });
    }
    let nf = real::<T>(n as f64);
    let one = T::one();
    let two = real::<T>(2.0);
    let three = real::<T>(3.0);
    let b = Matrix3::new(
        (nf - one) * (nf * nf - three * nf + three) / (nf * nf),
        (nf - one) * (two * nf - three) / (nf * nf),
        two * (nf - one) * (two * nf - three) / (nf * nf),
        (nf - one) * (nf - one) / nf,
        (nf - one) * (nf - one) * (nf - one) / nf,
        two * (nf - one) / nf,
        (nf - one) * (nf - one) / nf,
        (nf - one) / nf,
        (nf - one) * (nf * nf - two * nf + two) / nf,
    );
    let rhs = Vector3::new(q22, q20_q02, q11_sq);
    let sol = b.lu().solve(&rhs).expect("moment map is invertible for n >= 4");
    Ok((sol[0], sol[1], sol[2]))
}

/// Raw power sums for one common node: fine quantity x, coarse quantity y,
/// the cross moments x y, x^2 y, x y^2, x^2 y^2, and the same structure for
/// the rotated pair p = x + y, m = x - y.
///
/// The (p, m) block exists for numerical stability: on strongly coupled
/// levels x and y nearly coincide, and fourth-order statistics of the level
/// difference computed from (x, y) sums lose all significant digits to
/// cancellation. In rotated coordinates the difference statistics are
/// small-by-construction instead of small-by-cancellation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSums<T> {
    pub fine: [T; 4],
    pub coarse: [T; 4],
    pub cross: [T; 4],
    pub sum: [T; 4],
    pub diff: [T; 4],
    pub cross_pm: [T; 4],
}

impl<T: Real> Default for NodeSums<T> {
    fn default() -> Self {
        Self {
            fine: [T::zero(); 4],
            coarse: [T::zero(); 4],
            cross: [T::zero(); 4],
            sum: [T::zero(); 4],
            diff: [T::zero(); 4],
            cross_pm: [T::zero(); 4],
        }
    }
}

fn add_univariate<T: Real>(s: &mut [T; 4], x: T) {
    let x2 = x * x;
    s[0] += x;
    s[1] += x2;
    s[2] += x2 * x;
    s[3] += x2 * x2;
}

fn add_cross<T: Real>(s: &mut [T; 4], x: T, y: T) {
    s[0] += x * y;
    s[1] += x * x * y;
    s[2] += x * y * y;
    s[3] += x * x * y * y;
}

impl<T: Real> NodeSums<T> {
    fn add_sample(&mut self, x: T, y: Option<T>) {
        add_univariate(&mut self.fine, x);
        if let Some(y) = y {
            add_univariate(&mut self.coarse, y);
            add_cross(&mut self.cross, x, y);
            let p = x + y;
            let m = x - y;
            add_univariate(&mut self.sum, p);
            add_univariate(&mut self.diff, m);
            add_cross(&mut self.cross_pm, p, m);
        }
    }

    fn merge(&mut self, other: &Self) {
        for k in 0..4 {
            self.fine[k] += other.fine[k];
            self.coarse[k] += other.coarse[k];
            self.cross[k] += other.cross[k];
            self.sum[k] += other.sum[k];
            self.diff[k] += other.diff[k];
            self.cross_pm[k] += other.cross_pm[k];
        }
    }
}

/// Derived per-node statistics of one level.
#[derive(Debug, Clone, Copy)]
pub struct NodeStats<T> {
    /// Mean of Y_l = u_l - u_{l-1} (of u_0 at level 0), in cm.
    pub mean_y: T,
    /// h2 of Y_l, in cm^2.
    pub v_l: T,
    /// h2(u_l) - h2(u_{l-1}) (h2(u_0) at level 0), in cm^2.
    pub z_l: T,
    /// n * Var(Z_l estimate), in cm^4; `None` when n < 4.
    pub v_l2: Option<T>,
    /// h2 of the fine quantity, in cm^2.
    pub h2_fine: T,
}

/// Mergeable accumulator of coupled samples for one level.
///
/// Merging two accumulators gives bitwise the same sums as accumulating the
/// concatenated sample sequence, which is what makes parallel sampling with
/// an ordered reduction deterministic.
#[derive(Debug, Clone)]
pub struct LevelAccumulator<T> {
    pub n: u64,
    pub has_coarse: bool,
    pub nodes: Vec<NodeSums<T>>,
    /// Accumulated cost of the coupled solves, in cost units (seconds under
    /// the calibrated work model).
    pub cost_sum: f64,
}

impl<T: Real> LevelAccumulator<T> {
    pub fn new(n_nodes: usize, has_coarse: bool) -> Self {
        Self {
            n: 0,
            has_coarse,
            nodes: vec![NodeSums::default(); n_nodes],
            cost_sum: 0.0,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Add one coupled sample: the fine QoI vector, the coarse QoI vector
    /// (absent only at level 0) and its cost.
    pub fn accumulate(
        &mut self,
        fine: &[T],
        coarse: Option<&[T]>,
        cost: f64,
    ) -> Result<(), StatsError> {
        if fine.len() != self.nodes.len() {
            return Err(StatsError::LengthMismatch {
                got: fine.len(),
                want: self.nodes.len(),
            });
        }
        if coarse.is_some() != self.has_coarse {
            return Err(StatsError::CoarsePresence);
        }
        if let Some(c) = coarse {
            if c.len() != self.nodes.len() {
                return Err(StatsError::LengthMismatch {
                    got: c.len(),
                    want: self.nodes.len(),
                });
            }
        }
        for (i, sums) in self.nodes.iter_mut().enumerate() {
            sums.add_sample(fine[i], coarse.map(|c| c[i]));
        }
        self.n += 1;
        self.cost_sum += cost;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), StatsError> {
        if other.nodes.len() != self.nodes.len() {
            return Err(StatsError::LengthMismatch {
                got: other.nodes.len(),
                want: self.nodes.len(),
            });
        }
        if other.has_coarse != self.has_coarse {
            return Err(StatsError::CoarsePresence);
        }
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            a.merge(b);
        }
        self.n += other.n;
        self.cost_sum += other.cost_sum;
        Ok(())
    }

    /// Mean cost per sample, in cost units.
    pub fn mean_cost(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.cost_sum / self.n as f64
        }
    }

    /// Per-node statistics. Requires n >= 2; fourth-order quantities are
    /// populated when n >= 4.
    pub fn node_stats(&self) -> Result<Vec<NodeStats<T>>, StatsError> {
        let n = self.n;
        if n < 2 {
            return Err(StatsError::InsufficientSamples {
                need: 2,
                have: n as usize,
            });
        }
        let nf = real::<T>(n as f64);
        let mut out = Vec::with_capacity(self.nodes.len());
        for s in &self.nodes {
            let h2_fine = h2(s.fine[0], s.fine[1], n)?;
            let stat = if !self.has_coarse {
                let mean_y = s.fine[0] / nf;
                let v_l2 = if n >= 4 {
                    let q2 = central_q2(s.fine, nf);
                    let q4 = central_q4(s.fine, nf);
                    let (mu4, sigma4) = unbiased_fourth_univariate(q2, q4, n)?;
                    Some((nf * var_of_h2_from_parts(mu4, sigma4, n)).max(T::zero()))
                } else {
                    None
                };
                NodeStats {
                    mean_y,
                    v_l: h2_fine,
                    z_l: h2_fine,
                    v_l2,
                    h2_fine,
                }
            } else {
                // difference statistics from the rotated (p, m) block:
                // with p = x + y, m = x - y,
                //   Y_l mean          = mean(m)
                //   V_l = h2(Y_l)     = h2(m)
                //   Z_l = h2(x)-h2(y) = q11(p, m) / (n - 1)
                let mean_y = s.diff[0] / nf;
                let v_l = h2(s.diff[0], s.diff[1], n)?;
                let q11_pm = s.cross_pm[0] - s.sum[0] * s.diff[0] / nf;
                let z_l = q11_pm / (nf - T::one());
                let v_l2 = if n >= 4 {
                    Some((nf * self.var_z_hat_rotated(s, n)?).max(T::zero()))
                } else {
                    None
                };
                NodeStats {
                    mean_y,
                    v_l,
                    z_l,
                    v_l2,
                    h2_fine,
                }
            };
            out.push(stat);
        }
        Ok(out)
    }

    /// Var(Z_l estimate) = Var h2(x) + Var h2(y) - 2 Cov(h2(x), h2(y)),
    /// evaluated in the rotated coordinates where it takes the
    /// cancellation-free form
    ///   mu22^{pm}/n - sigma_pm^2 (n-3)/(n(n-1))
    ///     + (sigma_p^2 sigma_m^2 - sigma_pm^2)/(n(n-1)),
    /// with unbiased plug-ins for the three population quantities.
    fn var_z_hat_rotated(&self, s: &NodeSums<T>, n: u64) -> Result<T, StatsError> {
        let v = var_z_hat_unclamped(&s.sum, &s.diff, &s.cross_pm, n)?;
        if v < T::zero() {
            log::debug!("Var(Z_hat) estimate {v:?} clamped to 0");
        }
        Ok(v.max(T::zero()))
    }
}

/// The raw (unclamped, exactly unbiased) rotated-coordinate estimator of
/// Var(h2(x) - h2(y)) from (p, m) power-sum blocks.
fn var_z_hat_unclamped<T: Real>(
    sum: &[T; 4],
    diff: &[T; 4],
    cross_pm: &[T; 4],
    n: u64,
) -> Result<T, StatsError> {
    let nf = real::<T>(n as f64);
    let (q22, q20_q02, q11_sq) = central_bivariate(sum, diff, cross_pm, nf);
    let (mu22, var_prod, cov_sq) = unbiased_fourth_bivariate(q22, q20_q02, q11_sq, n)?;
    Ok(mu22 / nf - cov_sq * (nf - real(3.0)) / (nf * (nf - T::one()))
        + (var_prod - cov_sq) / (nf * (nf - T::one())))
}

/// n * Var(h2) with unbiased fourth-order plug-ins, from the raw power
/// sums of a single variable. Used by the single-level MC path.
pub fn n_var_h2_from_sums<T: Real>(sums: &[T; 4], n: u64) -> Result<T, StatsError> {
    let nf = real::<T>(n as f64);
    let q2 = central_q2(*sums, nf);
    let q4 = central_q4(*sums, nf);
    let (mu4, sigma4) = unbiased_fourth_univariate(q2, q4, n)?;
    Ok((nf * var_of_h2_from_parts(mu4, sigma4, n)).max(T::zero()))
}

fn central_q2<T: Real>(s: [T; 4], nf: T) -> T {
    s[1] - s[0] * s[0] / nf
}

fn central_q4<T: Real>(s: [T; 4], nf: T) -> T {
    let m = s[0] / nf; // sample mean
    let m2 = m * m;
    s[3] - real::<T>(4.0) * m * s[2] + real::<T>(6.0) * m2 * s[1]
        - real::<T>(3.0) * nf * m2 * m2
}

/// (q22, q20*q02, q11^2) from raw power-sum blocks of a bivariate pair.
fn central_bivariate<T: Real>(x: &[T; 4], y: &[T; 4], cross: &[T; 4], nf: T) -> (T, T, T) {
    let two = real::<T>(2.0);
    let four = real::<T>(4.0);
    let a = x[0] / nf; // mean of x
    let b = y[0] / nf; // mean of y
    let q20 = central_q2(*x, nf);
    let q02 = central_q2(*y, nf);
    let q11 = cross[0] - nf * a * b;
    // expand sum (x-a)^2 (y-b)^2
    let q22 = cross[3] - two * b * cross[1] + b * b * x[1] - two * a * cross[2]
        + four * a * b * cross[0]
        - two * a * b * b * x[0]
        + a * a * y[1]
        - two * a * a * b * y[0]
        + nf * a * a * b * b;
    (q22, q20 * q02, q11 * q11)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn acc_from(fine: &[f64], coarse: Option<&[f64]>) -> LevelAccumulator<f64> {
        let mut acc = LevelAccumulator::new(1, coarse.is_some());
        match coarse {
            None => {
                for &x in fine {
                    acc.accumulate(&[x], None, 1.0).unwrap();
                }
            }
            Some(c) => {
                for (&x, &y) in fine.iter().zip(c) {
                    acc.accumulate(&[x], Some(&[y]), 1.0).unwrap();
                }
            }
        }
        acc
    }

    #[test]
    fn h2_constant_and_textbook() {
        let c = acc_from(&[5.5, 5.5, 5.5], None);
        assert_eq!(c.node_stats().unwrap()[0].h2_fine, 0.0);
        let t = acc_from(&[1.0, 2.0, 3.0], None);
        assert_relative_eq!(t.node_stats().unwrap()[0].h2_fine, 1.0, max_relative = 1e-14);
        assert!(matches!(
            h2(1.0, 1.0, 1),
            Err(StatsError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn h2_unbiased_by_exhaustive_enumeration() {
        // all 27 equally likely size-3 draws (with replacement) of {0,1,2}
        let pop = [0.0, 1.0, 2.0];
        let mut total = 0.0;
        for a in pop {
            for b in pop {
                for c in pop {
                    let s1 = a + b + c;
                    let s2 = a * a + b * b + c * c;
                    total += h2(s1, s2, 3).unwrap();
                }
            }
        }
        let avg = total / 27.0;
        assert_abs_diff_eq!(avg, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn var_of_h2_normal_identity() {
        // normal: mu4 = 3 sigma^4, so Var(h2) = 2 sigma^4 / (n-1)
        let v = var_of_h2(1.0, 3.0, 100).unwrap();
        assert_relative_eq!(v, 2.0 / 99.0, max_relative = 1e-15);
        let v = var_of_h2(0.0, 0.0, 10).unwrap();
        assert_eq!(v, 0.0);
    }

    /// Enumerate every n-tuple of a finite population, weight 1/|pop|^n.
    fn enumerate_tuples<F: FnMut(&[usize])>(pop_size: usize, n: usize, mut f: F) {
        let mut idx = vec![0usize; n];
        loop {
            f(&idx);
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < pop_size {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == n {
                    return;
                }
            }
        }
    }

    #[test]
    fn var_of_h2_matches_enumeration_bernoulli() {
        // population {0, 1}, n = 5: exact estimator distribution
        let pop = [0.0, 1.0];
        let n = 5;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        enumerate_tuples(2, n, |idx| {
            let s1: f64 = idx.iter().map(|&i| pop[i]).sum();
            let s2: f64 = idx.iter().map(|&i| pop[i] * pop[i]).sum();
            let v = h2(s1, s2, n as u64).unwrap();
            sum += v;
            sum_sq += v * v;
            count += 1;
        });
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        // true moments of Bernoulli(1/2): sigma^2 = 1/4, mu4 = 1/16
        let closed = var_of_h2(0.25, 1.0 / 16.0, n as u64).unwrap();
        assert_abs_diff_eq!(var, closed, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, 0.25, epsilon = 1e-12); // unbiasedness
    }

    #[test]
    fn cov_of_h2_matches_enumeration_correlated() {
        // dependent bivariate population, n = 4, all 81 coupled draws
        let pop = [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0)];
        let n = 4;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(x, y) in &pop {
            sx += x / 3.0;
            sy += y / 3.0;
        }
        let mut mu22 = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        let mut cxy = 0.0;
        for &(x, y) in &pop {
            let dx = x - sx;
            let dy = y - sy;
            mu22 += dx * dx * dy * dy / 3.0;
            vx += dx * dx / 3.0;
            vy += dy * dy / 3.0;
            cxy += dx * dy / 3.0;
        }
        let mut e_x = 0.0;
        let mut e_y = 0.0;
        let mut e_xy = 0.0;
        let mut count = 0usize;
        enumerate_tuples(3, n, |idx| {
            let (mut s1x, mut s2x, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0);
            for &i in idx {
                let (x, y) = pop[i];
                s1x += x;
                s2x += x * x;
                s1y += y;
                s2y += y * y;
            }
            let hx = h2(s1x, s2x, n as u64).unwrap();
            let hy = h2(s1y, s2y, n as u64).unwrap();
            e_x += hx;
            e_y += hy;
            e_xy += hx * hy;
            count += 1;
        });
        let cf = count as f64;
        let cov_enum = e_xy / cf - (e_x / cf) * (e_y / cf);
        let closed = cov_of_h2_pair(mu22, vx, vy, cxy, n as u64).unwrap();
        assert_abs_diff_eq!(cov_enum, closed, epsilon = 1e-12);
    }

    #[test]
    fn unbiased_fourth_moments_by_enumeration() {
        // univariate population {0, 1, 2}, n = 5
        let pop = [0.0, 1.0, 2.0];
        let n = 5u64;
        let mean: f64 = 1.0;
        let mu4: f64 = pop.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / 3.0;
        let sigma2: f64 = pop.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        let mut e_mu4 = 0.0;
        let mut e_s4 = 0.0;
        let mut count = 0usize;
        enumerate_tuples(3, n as usize, |idx| {
            let mut s = [0.0f64; 4];
            for &i in idx {
                let x = pop[i];
                s[0] += x;
                s[1] += x * x;
                s[2] += x * x * x;
                s[3] += x * x * x * x;
            }
            let nf = n as f64;
            let q2 = central_q2(s, nf);
            let q4 = central_q4(s, nf);
            let (m4, s4) = unbiased_fourth_univariate(q2, q4, n).unwrap();
            e_mu4 += m4;
            e_s4 += s4;
            count += 1;
        });
        assert_abs_diff_eq!(e_mu4 / count as f64, mu4, epsilon = 1e-12);
        assert_abs_diff_eq!(e_s4 / count as f64, sigma2 * sigma2, epsilon = 1e-12);
    }

    #[test]
    fn unbiased_bivariate_by_enumeration() {
        let pop: [(f64, f64); 3] = [(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)];
        let n = 5u64;
        let (mx, my) = (1.0f64, 1.0f64);
        let mut mu22 = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        let mut cxy = 0.0;
        for &(x, y) in &pop {
            mu22 += (x - mx).powi(2) * (y - my).powi(2) / 3.0;
            vx += (x - mx).powi(2) / 3.0;
            vy += (y - my).powi(2) / 3.0;
            cxy += (x - mx) * (y - my) / 3.0;
        }
        let mut e = [0.0f64; 3];
        let mut count = 0usize;
        enumerate_tuples(3, n as usize, |idx| {
            let mut acc = LevelAccumulator::<f64>::new(1, true);
            for &i in idx {
                acc.accumulate(&[pop[i].0], Some(&[pop[i].1]), 0.0).unwrap();
            }
            let s = &acc.nodes[0];
            let (q22, q20q02, q11sq) = central_bivariate(&s.fine, &s.coarse, &s.cross, n as f64);
            let (m22, prod, csq) = unbiased_fourth_bivariate(q22, q20q02, q11sq, n).unwrap();
            e[0] += m22;
            e[1] += prod;
            e[2] += csq;
            count += 1;
        });
        let cf = count as f64;
        assert_abs_diff_eq!(e[0] / cf, mu22, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1] / cf, vx * vy, epsilon = 1e-12);
        assert_abs_diff_eq!(e[2] / cf, cxy * cxy, epsilon = 1e-12);
    }

    #[test]
    fn rotated_var_z_estimator_unbiased_by_enumeration() {
        // E[Var-hat(Z)] must equal the exact Var(h2(X) - h2(Y)); the
        // estimator works in (x+y, x-y) coordinates, the oracle works on
        // the plain estimator distribution
        let pop = [(0.0, 0.25), (1.0, 0.75), (2.0, 2.5)];
        let n = 5u64;
        let mut e_hat = 0.0;
        let mut z_sum = 0.0;
        let mut z_sq = 0.0;
        let mut count = 0usize;
        enumerate_tuples(3, n as usize, |idx| {
            let mut acc = LevelAccumulator::<f64>::new(1, true);
            let (mut s1x, mut s2x, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0);
            for &i in idx {
                let (x, y) = pop[i];
                acc.accumulate(&[x], Some(&[y]), 0.0).unwrap();
                s1x += x;
                s2x += x * x;
                s1y += y;
                s2y += y * y;
            }
            let s = &acc.nodes[0];
            e_hat += var_z_hat_unclamped(&s.sum, &s.diff, &s.cross_pm, n).unwrap();
            // oracle: the plain difference of unclamped h2 values
            let z = (s2x - s1x * s1x / 5.0) / 4.0 - (s2y - s1y * s1y / 5.0) / 4.0;
            z_sum += z;
            z_sq += z * z;
            count += 1;
        });
        let cf = count as f64;
        let var_z = z_sq / cf - (z_sum / cf).powi(2);
        assert_abs_diff_eq!(e_hat / cf, var_z, epsilon = 1e-12);
    }

    #[test]
    fn z_l_equals_h2_difference() {
        let xs: Vec<f64> = (0..20).map(|i| 1.0 + 0.1 * ((i as f64) * 0.9).sin()).collect();
        let ys: Vec<f64> = (0..20).map(|i| 0.8 + 0.2 * ((i as f64) * 1.3).cos()).collect();
        let acc = acc_from(&xs, Some(&ys));
        let st = acc.node_stats().unwrap()[0];
        let h2x = {
            let m = xs.iter().sum::<f64>() / 20.0;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 19.0
        };
        let h2y = {
            let m = ys.iter().sum::<f64>() / 20.0;
            ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 19.0
        };
        assert_relative_eq!(st.z_l, h2x - h2y, max_relative = 1e-11);
        assert_relative_eq!(st.h2_fine, h2x, max_relative = 1e-12);
    }

    #[test]
    fn perfect_coupling_gives_zero_var_z() {
        // y = x exactly: Var(Z_hat) must vanish
        let xs: Vec<f64> = (0..40).map(|i| 0.01 * (i as f64) + ((i * i) as f64).sin()).collect();
        let acc = acc_from(&xs, Some(&xs));
        let stats = acc.node_stats().unwrap();
        let v = stats[0].v_l2.unwrap();
        let scale = stats[0].h2_fine * stats[0].h2_fine;
        assert!(v.abs() <= 1e-10 * scale.max(1e-300), "v_l2 = {v}");
        assert_abs_diff_eq!(stats[0].v_l, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(stats[0].z_l, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn single_sample_roundtrip() {
        let mut acc = LevelAccumulator::<f64>::new(2, false);
        acc.accumulate(&[3.0, -1.5], None, 0.25).unwrap();
        assert_eq!(acc.n, 1);
        assert_eq!(acc.nodes[0].fine[0], 3.0);
        assert_eq!(acc.nodes[1].fine[0], -1.5);
        assert_eq!(acc.cost_sum, 0.25);
    }

    #[test]
    fn merge_equals_sequential_accumulation_bitwise() {
        // dyadic samples: every power sum is exact, so the grouping of the
        // additions cannot matter and the contract is bitwise
        let xs: Vec<f64> = (0..31).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.5).collect();
        let split = 13;
        let mut a = LevelAccumulator::<f64>::new(1, true);
        for i in 0..split {
            a.accumulate(&[xs[i]], Some(&[ys[i]]), 1.0).unwrap();
        }
        let mut b = LevelAccumulator::<f64>::new(1, true);
        for i in split..xs.len() {
            b.accumulate(&[xs[i]], Some(&[ys[i]]), 1.0).unwrap();
        }
        let mut seq = LevelAccumulator::<f64>::new(1, true);
        for i in 0..xs.len() {
            seq.accumulate(&[xs[i]], Some(&[ys[i]]), 1.0).unwrap();
        }
        a.merge(&b).unwrap();
        assert_eq!(a.n, seq.n);
        assert_eq!(a.nodes[0], seq.nodes[0]);
    }

    #[test]
    fn two_pass_variance_oracle() {
        let xs: Vec<f64> = (0..50)
            .map(|i| 0.046 + 1e-3 * ((i as f64) * 1.7).sin() + 1e-4 * (i as f64 % 7.0))
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| x - 2e-5 - 1e-6 * (x * 1e3).cos()).collect();
        let acc = acc_from(&xs, Some(&ys));
        let stats = acc.node_stats().unwrap();
        // two-pass variance of the difference
        let d: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert_relative_eq!(stats[0].v_l, var, max_relative = 1e-9);
        assert_relative_eq!(stats[0].mean_y, mean, max_relative = 1e-12);
    }

    #[test]
    fn accumulator_works_at_f32() {
        let mut acc = LevelAccumulator::<f32>::new(1, true);
        for i in 0..12 {
            let x = 1.0 + 0.1 * (i as f32);
            acc.accumulate(&[x], Some(&[x * 0.9]), 1.0).unwrap();
        }
        let st = acc.node_stats().unwrap()[0];
        assert!(st.h2_fine > 0.0);
        assert!(st.v_l2.unwrap() >= 0.0);
        assert!((st.mean_y - 0.155).abs() < 1e-3);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut acc = LevelAccumulator::<f64>::new(3, false);
        assert!(matches!(
            acc.accumulate(&[1.0], None, 0.0),
            Err(StatsError::LengthMismatch { got: 1, want: 3 })
        ));
        assert!(matches!(
            acc.accumulate(&[1.0, 2.0, 3.0], Some(&[1.0, 2.0, 3.0]), 0.0),
            Err(StatsError::CoarsePresence)
        ));
    }

    proptest::proptest! {
        #[test]
        fn merge_matches_sequential_on_arbitrary_samples(
            xs in proptest::collection::vec(-1.0e3f64..1.0e3, 8..40),
            split_frac in 0.1f64..0.9,
        ) {
            let split = ((xs.len() as f64) * split_frac) as usize;
            let ys: Vec<f64> = xs.iter().map(|x| x * 0.75 - 1.0).collect();
            let mut a = LevelAccumulator::<f64>::new(1, true);
            for i in 0..split {
                a.accumulate(&[xs[i]], Some(&[ys[i]]), 1.0).unwrap();
            }
            let mut b = LevelAccumulator::<f64>::new(1, true);
            for i in split..xs.len() {
                b.accumulate(&[xs[i]], Some(&[ys[i]]), 1.0).unwrap();
            }
            let mut seq = LevelAccumulator::<f64>::new(1, true);
            for i in 0..xs.len() {
                seq.accumulate(&[xs[i]], Some(&[ys[i]]), 1.0).unwrap();
            }
            a.merge(&b).unwrap();
            for k in 0..4 {
                // natural scale: the sum of absolute terms of that power sum
                let scale: f64 = xs.iter().map(|x| x.abs().powi(k as i32 + 1)).sum();
                proptest::prop_assert!(
                    (a.nodes[0].fine[k] - seq.nodes[0].fine[k]).abs() <= 1e-13 * scale
                );
                let scale: f64 = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| {
                        let (px, py) = match k {
                            0 => (1, 1),
                            1 => (2, 1),
                            2 => (1, 2),
                            _ => (2, 2),
                        };
                        x.abs().powi(px) * y.abs().powi(py)
                    })
                    .sum();
                proptest::prop_assert!(
                    (a.nodes[0].cross[k] - seq.nodes[0].cross[k]).abs() <= 1e-13 * scale
                );
            }
        }
    }

    #[test]
    fn estimates_invariant_under_permutation() {
        let xs: Vec<f64> = (0..25).map(|i| ((i * 13 % 7) as f64) * 0.3 + 1.0).collect();
        let ys: Vec<f64> = (0..25).map(|i| ((i * 5 % 11) as f64) * 0.1).collect();
        let fwd = acc_from(&xs, Some(&ys));
        let xs_rev: Vec<f64> = xs.iter().rev().copied().collect();
        let ys_rev: Vec<f64> = ys.iter().rev().copied().collect();
        let rev = acc_from(&xs_rev, Some(&ys_rev));
        let a = fwd.node_stats().unwrap()[0];
        let b = rev.node_stats().unwrap()[0];
        assert_relative_eq!(a.v_l, b.v_l, max_relative = 1e-12);
        assert_relative_eq!(a.z_l, b.z_l, max_relative = 1e-12);
        assert_relative_eq!(
            a.v_l2.unwrap(),
            b.v_l2.unwrap(),
            max_relative = 1e-9
        );
    }
}
