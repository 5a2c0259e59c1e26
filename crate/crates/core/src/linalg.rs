//! Numerical rank with an explicit tolerance policy, nullspace bases,
//! exact rational rank, and a damped Gauss-Newton driver.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathspace::TripletMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Threshold `tol * sigma_max * max(rows, cols)`.
    RelativeSv,
    /// Threshold `tol`.
    AbsoluteSv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub mode: RankMode,
    pub tol: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self { mode: RankMode::RelativeSv, tol: 1e-8 }
    }
}

impl RankPolicy {
    pub fn relative(tol: f64) -> Result<Self> {
        Self::new(RankMode::RelativeSv, tol)
    }

    pub fn new(mode: RankMode, tol: f64) -> Result<Self> {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::InvalidArgument(format!("rank tolerance must be positive, got {tol}")));
        }
        Ok(Self { mode, tol })
    }

    pub fn threshold(&self, sigma_max: f64, rows: usize, cols: usize) -> f64 {
        match self.mode {
            RankMode::RelativeSv => self.tol * sigma_max * rows.max(cols) as f64,
            RankMode::AbsoluteSv => self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: usize,
    /// Singular values in decreasing order.
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    /// `sigma_rank / sigma_{rank+1}`; `None` when no singular value was cut
    /// or none was kept.
    pub gap: Option<f64>,
}

impl RankInfo {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Smallest kept singular value.
    pub fn sigma_min_kept(&self) -> Option<f64> {
        self.rank.checked_sub(1).map(|k| self.singular_values[k])
    }

    pub fn largest(&self, k: usize) -> Vec<f64> {
        self.singular_values.iter().take(k).copied().collect()
    }

    pub fn smallest(&self, k: usize) -> Vec<f64> {
        let n = self.singular_values.len();
        self.singular_values[n.saturating_sub(k)..].to_vec()
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("matrix passed to rank computation".into()))
    }
}

fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn rank_from_spectrum(singular_values: Vec<f64>, rows: usize, cols: usize, policy: &RankPolicy) -> RankInfo {
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let threshold = policy.threshold(sigma_max, rows, cols);
    let rank = singular_values.iter().take_while(|&&s| s > threshold).count();
    let gap = if rank > 0 && rank < singular_values.len() {
        let below = singular_values[rank];
        Some(if below > 0.0 { singular_values[rank - 1] / below } else { f64::INFINITY })
    } else {
        None
    };
    RankInfo { rank, singular_values, threshold, gap }
}

/// Number of singular values above the policy threshold, with the full spectrum.
pub fn numerical_rank(m: &DMatrix<f64>, policy: &RankPolicy) -> Result<RankInfo> {
    check_finite(m)?;
    Ok(rank_from_spectrum(sorted_singular_values(m), m.nrows(), m.ncols(), policy))
}

/// Rank of a sparse matrix. All-zero columns are dropped before the dense
/// factorization; the threshold still uses the full dimensions.
pub fn numerical_rank_sparse(m: &TripletMatrix<f64>, policy: &RankPolicy) -> Result<RankInfo> {
    if !m.entries.iter().all(|e| e.2.is_finite()) {
        return Err(Error::NonFinite("sparse matrix passed to rank computation".into()));
    }
    let support = m.compressed_support();
    Ok(rank_from_spectrum(sorted_singular_values(&support), m.nrows, m.ncols, policy))
}

/// Orthonormal basis (as columns) of the numerical nullspace of `m`.
pub fn nullspace(m: &DMatrix<f64>, policy: &RankPolicy) -> Result<DMatrix<f64>> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if rows == 0 {
        return Ok(DMatrix::identity(cols, cols));
    }
    // Zero rows leave the right singular vectors unchanged and make the thin
    // SVD return a full basis of the domain.
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma_max = svd.singular_values.max();
    let threshold = policy.threshold(sigma_max, rows, cols);
    let kernel: Vec<DVector<f64>> =
        svd.singular_values.iter().enumerate().filter(|(_, &s)| s <= threshold).map(|(k, _)| v_t.row(k).transpose()).collect();
    if kernel.is_empty() {
        return Ok(DMatrix::zeros(cols, 0));
    }
    Ok(DMatrix::from_columns(&kernel))
}

/// Minimum-norm least-squares solution of `a x = b`, singular values below
/// the policy threshold treated as zero.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>, policy: &RankPolicy) -> Result<DVector<f64>> {
    check_finite(a)?;
    if a.nrows() != b.len() {
        return Err(Error::Shape(format!("lstsq: {} rows vs rhs of length {}", a.nrows(), b.len())));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(DVector::zeros(a.ncols()));
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let eps = policy.threshold(sigma_max, a.nrows(), a.ncols()).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Exact rank over the rationals by Gaussian elimination.
pub fn exact_rank(m: &DMatrix<BigRational>) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let Some(pivot) = (rank..rows).find(|&r| !a[(r, col)].is_zero()) else { continue };
        a.swap_rows(rank, pivot);
        let p = a[(rank, col)].clone();
        for r in rank + 1..rows {
            if a[(r, col)].is_zero() {
                continue;
            }
            let factor = a[(r, col)].clone() / p.clone();
            for c in col..cols {
                let delta = factor.clone() * a[(rank, c)].clone();
                a[(r, c)] = a[(r, c)].clone() - delta;
            }
        }
        rank += 1;
    }
    rank
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaussNewtonStatus {
    Converged,
    Stalled,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonOptions {
    pub max_iter: usize,
    /// Stop when a full step is shorter than `step_tol * (1 + |x|)`.
    pub step_tol: f64,
    /// Converged when `max |r(x)| <= res_tol`.
    pub res_tol: f64,
    pub rank_policy: RankPolicy,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self { max_iter: 100, step_tol: 1e-15, res_tol: 1e-12, rank_policy: RankPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonOutcome {
    pub x: DVector<f64>,
    pub status: GaussNewtonStatus,
    pub iterations: usize,
    pub residual_inf: f64,
}

pub fn gauss_newton<R, J>(residual: R, jacobian: J, x0: DVector<f64>, opts: &GaussNewtonOptions) -> Result<GaussNewtonOutcome>
where
    R: FnMut(&DVector<f64>) -> DVector<f64>,
    J: FnMut(&DVector<f64>) -> DMatrix<f64>,
{
    gauss_newton_constrained(residual, jacobian, |_| true, x0, opts)
}

/// Damped Gauss-Newton with minimum-norm steps and backtracking. Trial
/// points rejected by `accept` are treated like points that fail to
/// decrease the residual.
pub fn gauss_newton_constrained<R, J, A>(
    mut residual: R,
    mut jacobian: J,
    mut accept: A,
    x0: DVector<f64>,
    opts: &GaussNewtonOptions,
) -> Result<GaussNewtonOutcome>
where
    R: FnMut(&DVector<f64>) -> DVector<f64>,
    J: FnMut(&DVector<f64>) -> DMatrix<f64>,
    A: FnMut(&DVector<f64>) -> bool,
{
    let mut x = x0;
    let mut r = residual(&x);
    for iter in 0..opts.max_iter {
        let r_inf = r.amax();
        if r_inf <= opts.res_tol {
            return Ok(GaussNewtonOutcome { x, status: GaussNewtonStatus::Converged, iterations: iter, residual_inf: r_inf });
        }
        let jac = jacobian(&x);
        if jac.shape() != (r.len(), x.len()) {
            return Err(Error::Shape(format!("jacobian has shape {:?}, expected ({}, {})", jac.shape(), r.len(), x.len())));
        }
        let step = -lstsq_min_norm(&jac, &r, &opts.rank_policy)?;
        if step.norm() <= opts.step_tol * (1.0 + x.norm()) {
            return Ok(GaussNewtonOutcome { x, status: GaussNewtonStatus::Stalled, iterations: iter, residual_inf: r_inf });
        }
        let current = r.norm();
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..40 {
            let candidate = &x + &step * scale;
            if accept(&candidate) {
                let rc = residual(&candidate);
                if rc.len() != r.len() {
                    return Err(Error::Shape(format!("residual length changed from {} to {}", r.len(), rc.len())));
                }
                if rc.norm() < current {
                    accepted = Some((candidate, rc));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((xn, rn)) => {
                x = xn;
                r = rn;
            }
            None => return Ok(GaussNewtonOutcome { x, status: GaussNewtonStatus::Stalled, iterations: iter, residual_inf: r_inf }),
        }
    }
    let r_inf = r.amax();
    let status = if r_inf <= opts.res_tol { GaussNewtonStatus::Converged } else { GaussNewtonStatus::MaxIter };
    Ok(GaussNewtonOutcome { x, status, iterations: opts.max_iter, residual_inf: r_inf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn rank_examples() {
        let p = RankPolicy::default();
        assert_eq!(numerical_rank(&DMatrix::zeros(4, 3), &p).unwrap().rank, 0);
        assert_eq!(numerical_rank(&DMatrix::identity(5, 5), &p).unwrap().rank, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(20, 4, &mut rng) * random(4, 30, &mut rng);
        let info = numerical_rank(&m, &RankPolicy::relative(1e-8).unwrap()).unwrap();
        assert_eq!(info.rank, 4);
        assert!(info.gap.unwrap() > 1e3);
        assert_eq!(info.singular_values.len(), 20);
    }

    #[test]
    fn rank_rejects_nan_and_bad_policy() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(numerical_rank(&m, &RankPolicy::default()).is_err());
        assert!(RankPolicy::relative(0.0).is_err());
        assert!(RankPolicy::relative(-1.0).is_err());
    }

    #[test]
    fn absolute_mode_uses_fixed_threshold() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3, 1e-7]));
        let p = RankPolicy::new(RankMode::AbsoluteSv, 1e-4).unwrap();
        let info = numerical_rank(&m, &p).unwrap();
        assert_eq!(info.rank, 2);
        assert_eq!(info.threshold, 1e-4);
    }

    #[test]
    fn sparse_rank_matches_dense() {
        let dense = DMatrix::from_row_slice(3, 5, &[2.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 5.0, 0.0, 1.0, 0.0, 1.0]);
        let t = TripletMatrix::from_dense(&dense);
        let p = RankPolicy::default();
        let a = numerical_rank(&dense, &p).unwrap();
        let b = numerical_rank_sparse(&t, &p).unwrap();
        assert_eq!(a.rank, 3);
        assert_eq!(a.rank, b.rank);
        assert!((a.threshold - b.threshold).abs() <= 1e-12 * a.threshold);
    }

    #[test]
    fn nullspace_of_row_vector() {
        let m = DMatrix::from_row_slice(1, 3, &[2.0, 1.0, 1.0]);
        let basis = nullspace(&m, &RankPolicy::default()).unwrap();
        assert_eq!(basis.ncols(), 2);
        for k in 0..2 {
            assert!((&m * basis.column(k)).amax() <= 1e-12);
        }
        let gram = basis.transpose() * &basis;
        assert!((gram - DMatrix::identity(2, 2)).amax() <= 1e-12);
    }

    #[test]
    fn nullspace_of_full_column_rank_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random(6, 4, &mut rng);
        assert_eq!(nullspace(&m, &RankPolicy::default()).unwrap().ncols(), 0);
        assert_eq!(nullspace(&DMatrix::zeros(0, 3), &RankPolicy::default()).unwrap().ncols(), 3);
    }

    #[test]
    fn exact_rank_examples() {
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[ratio(2, 1), ratio(1, 1), ratio(1, 1), ratio(0, 1), ratio(0, 1), ratio(1, 1), ratio(4, 1), ratio(2, 1), ratio(3, 1)],
        );
        assert_eq!(exact_rank(&m), 2);
        assert_eq!(exact_rank(&DMatrix::from_element(2, 2, ratio(0, 1))), 0);
        assert_eq!(exact_rank(&DMatrix::from_fn(3, 3, |i, j| if i == j { ratio(1, 3) } else { ratio(0, 1) })), 3);
    }

    #[test]
    fn gauss_newton_linear_consistent_one_step() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, 1.0]);
        let x_true = DVector::from_vec(vec![0.5, -1.5]);
        let b = &a * &x_true;
        let out = gauss_newton(|x| &a * x - &b, |_| a.clone(), DVector::zeros(2), &GaussNewtonOptions::default()).unwrap();
        assert_eq!(out.status, GaussNewtonStatus::Converged);
        assert_eq!(out.iterations, 1);
        assert!((out.x - x_true).amax() < 1e-13);
    }

    #[test]
    fn gauss_newton_square_root() {
        let out = gauss_newton(
            |x| DVector::from_vec(vec![x[0] * x[0] - 4.0]),
            |x| DMatrix::from_element(1, 1, 2.0 * x[0]),
            DVector::from_vec(vec![3.0]),
            &GaussNewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(out.status, GaussNewtonStatus::Converged);
        assert!((out.x[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn gauss_newton_reports_stall_and_shape_errors() {
        // x^2 + 1 has no real root.
        let out = gauss_newton(
            |x| DVector::from_vec(vec![x[0] * x[0] + 1.0]),
            |x| DMatrix::from_element(1, 1, 2.0 * x[0]),
            DVector::from_vec(vec![1.0]),
            &GaussNewtonOptions::default(),
        )
        .unwrap();
        assert_ne!(out.status, GaussNewtonStatus::Converged);

        let err = gauss_newton(|x| x.clone(), |_| DMatrix::zeros(3, 3), DVector::from_vec(vec![1.0]), &GaussNewtonOptions::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rank_is_transpose_permutation_and_scaling_invariant(seed in 0u64..10_000, r in 1usize..5, perm_seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(7, r, &mut rng) * random(r, 6, &mut rng);
            let p = RankPolicy::default();
            let base = numerical_rank(&m, &p).unwrap().rank;
            prop_assert_eq!(base, r);
            prop_assert_eq!(numerical_rank(&m.transpose(), &p).unwrap().rank, base);
            let mut shuffled = m.clone();
            let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..7).rev() {
                let j = prng.random_range(0..=i);
                shuffled.swap_rows(i, j);
            }
            for i in 0..7 {
                let s: f64 = prng.random_range(0.5..2.0);
                shuffled.row_mut(i).scale_mut(s);
            }
            prop_assert_eq!(numerical_rank(&shuffled, &p).unwrap().rank, base);
            for tol in [1e-9, 1e-8, 1e-7] {
                prop_assert_eq!(numerical_rank(&m, &RankPolicy::relative(tol).unwrap()).unwrap().rank, base);
            }
        }
    }
}
