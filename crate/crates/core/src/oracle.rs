//! Independent checks for the main pipeline: finite-difference Jacobians,
//! exact rational verification, kernel flatness probes, perturbation
//! probes, and a Gauss-Newton continuation that exhibits non-identifiable
//! twins.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::charts::{build_chart, embed, jacobian_psi, restricted_from, ChartContext, RestrictedParams};
use crate::error::{Error, Result};
use crate::identifiability::{
    evaluate, gamma_backprop, gamma_explicit, kernel_directions, restricted_jacobian, EvaluateOptions, GammaMatrix,
};
use crate::linalg::{exact_rank, gauss_newton_constrained, numerical_rank, GaussNewtonOptions, GaussNewtonStatus, RankPolicy};
use crate::network::{activation_margin, forward_traces, NetworkParams};
use crate::pathspace::{activation_matrix, enumerate_paths, linear_representation_residual};
use crate::rescaling::{are_equivalent, Equivalence};
use crate::scalar::{rational_from_f64, Scalar};

/// Hidden activation bits per input, layer and neuron.
pub type ActivationBits = Vec<Vec<Vec<bool>>>;

/// Outputs of `rho_theta(tau)` on `X`, flattened `(i, v_L)` input-major,
/// with the hidden activation bits of every input.
pub fn restricted_outputs(ctx: &ChartContext, tau: &RestrictedParams, inputs: &DMatrix<f64>) -> Result<(DVector<f64>, ActivationBits)> {
    let params = embed(ctx, tau)?;
    let traces = forward_traces(&params, inputs)?;
    let n_out = params.arch().output_dim();
    let flat = DVector::from_fn(inputs.nrows() * n_out, |k, _| traces[k / n_out].output()[k % n_out]);
    let bits = traces.into_iter().map(|t| t.bits).collect();
    Ok((flat, bits))
}

fn anchor_state(ctx: &ChartContext, inputs: &DMatrix<f64>) -> Result<(RestrictedParams, DVector<f64>, ActivationBits)> {
    let tau = restricted_from(ctx);
    let (f, bits) = restricted_outputs(ctx, &tau, inputs)?;
    Ok((tau, f, bits))
}

/// Central-difference Jacobian of `tau -> f_{rho_theta(tau)}(X)` at the
/// anchor, step `h * (1 + |tau_k|)` per coordinate. Fails if a probe
/// changes any activation bit.
pub fn fd_jacobian(ctx: &ChartContext, inputs: &DMatrix<f64>, h: f64) -> Result<GammaMatrix> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let (tau, f0, bits0) = anchor_state(ctx, inputs)?;
    let mut matrix = DMatrix::zeros(f0.len(), ctx.dim());
    for k in 0..ctx.dim() {
        let step = h * (1.0 + tau.0[k].abs());
        let mut plus = tau.clone();
        plus.0[k] += step;
        let mut minus = tau.clone();
        minus.0[k] -= step;
        let (fp, bp) = restricted_outputs(ctx, &plus, inputs)?;
        let (fm, bm) = restricted_outputs(ctx, &minus, inputs)?;
        if bp != bits0 || bm != bits0 {
            return Err(Error::StepTooLarge { coordinate: k });
        }
        matrix.set_column(k, &((fp - fm) / (2.0 * step)));
    }
    Ok(GammaMatrix { matrix, n_inputs: inputs.nrows(), n_outputs: ctx.anchor().arch().output_dim() })
}

/// Central difference of the restricted outputs along `direction` with
/// step `t`. Fails if a probe changes any activation bit.
pub fn fd_directional(ctx: &ChartContext, inputs: &DMatrix<f64>, direction: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let (tau, _, bits0) = anchor_state(ctx, inputs)?;
    let plus = RestrictedParams(&tau.0 + direction * t);
    let minus = RestrictedParams(&tau.0 - direction * t);
    let (fp, bp) = restricted_outputs(ctx, &plus, inputs)?;
    let (fm, bm) = restricted_outputs(ctx, &minus, inputs)?;
    if bp != bits0 || bm != bits0 {
        return Err(Error::StepTooLarge { coordinate: usize::MAX });
    }
    Ok((fp - fm) / (2.0 * t))
}

/// Max deviation of the directional central difference from `Gamma u` at
/// steps `t` and `t / 2`.
pub fn richardson_errors(ctx: &ChartContext, inputs: &DMatrix<f64>, direction: &DVector<f64>, t: f64) -> Result<(f64, f64)> {
    let gamma = gamma_backprop(ctx, inputs)?;
    let exact = &gamma.matrix * direction;
    let e1 = (fd_directional(ctx, inputs, direction, t)? - &exact).amax();
    let e2 = (fd_directional(ctx, inputs, direction, t / 2.0)? - &exact).amax();
    Ok((e1, e2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessProbe {
    /// `(t, max |f_{rho(tau_theta + t h)}(X) - f_theta(X)|)` in increasing `t`.
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of `log r` against `log t` over the points above
    /// the rounding floor.
    pub slope: Option<f64>,
    /// Every residual is at rounding level.
    pub flat_to_rounding: bool,
    /// First grid value dropped because it changed an activation bit.
    pub truncated_at: Option<f64>,
    pub rounding_floor: f64,
}

impl FlatnessProbe {
    /// At least second order in `t`: either flat to rounding or with a
    /// fitted slope of at least `min_slope`.
    pub fn is_second_order(&self, min_slope: f64) -> bool {
        self.flat_to_rounding || self.slope.is_some_and(|s| s >= min_slope)
    }
}

fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|(t, r)| (t.ln(), r.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Output change along `tau_theta + t h` for each `t` in the grid.
pub fn flatness_probe(ctx: &ChartContext, inputs: &DMatrix<f64>, direction: &DVector<f64>, t_grid: &[f64]) -> Result<FlatnessProbe> {
    if direction.len() != ctx.dim() {
        return Err(Error::Shape(format!("direction has length {}, expected {}", direction.len(), ctx.dim())));
    }
    if (direction.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument("direction must have unit norm".into()));
    }
    let (tau, f0, bits0) = anchor_state(ctx, inputs)?;
    let mut grid: Vec<f64> = t_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(grid.len());
    let mut truncated_at = None;
    for t in grid {
        let (f, bits) = restricted_outputs(ctx, &RestrictedParams(&tau.0 + direction * t), inputs)?;
        if bits != bits0 {
            truncated_at = Some(t);
            break;
        }
        points.push((t, (f - &f0).amax()));
    }
    let rounding_floor = 1e-12 * (1.0 + f0.amax());
    let above: Vec<(f64, f64)> = points.iter().copied().filter(|&(t, r)| t > 0.0 && r > rounding_floor).collect();
    let flat_to_rounding = above.is_empty();
    Ok(FlatnessProbe { slope: loglog_slope(&above), points, flat_to_rounding, truncated_at, rounding_floor })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationOptions {
    pub rank_policy: RankPolicy,
    pub gauss_newton: GaussNewtonOptions,
    /// Tolerance passed to the rescaling-equivalence test.
    pub equivalence_tol: f64,
    pub tol_s: f64,
    pub path_cap: u128,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            rank_policy: RankPolicy::default(),
            gauss_newton: GaussNewtonOptions { max_iter: 200, step_tol: 1e-15, res_tol: 1e-12, rank_policy: RankPolicy::default() },
            equivalence_tol: 1e-9,
            tol_s: 1e-12,
            path_cap: crate::pathspace::DEFAULT_PATH_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Twin {
    pub tau: RestrictedParams,
    pub params: NetworkParams,
    /// `max |f_twin(X) - f_theta(X)|`.
    pub residual_inf: f64,
    /// `|tau - tau_theta|`.
    pub distance: f64,
    pub iterations: usize,
    pub equivalence: Equivalence,
}

impl Twin {
    /// Equal outputs on `X` and not a positive rescaling of the anchor.
    pub fn is_valid_witness(&self) -> bool {
        self.equivalence == Equivalence::NotEquivalent
    }
}

/// Searches for parameters with the same outputs on `X` as the anchor but
/// a different lift, starting from `tau_theta + t0 h` and staying in the
/// anchor's activation region at distance at least `t0 / 2` from
/// `tau_theta`. Refused when the necessary condition holds.
pub fn continuation_twin(
    ctx: &ChartContext,
    inputs: &DMatrix<f64>,
    direction: &DVector<f64>,
    t0: f64,
    opts: &ContinuationOptions,
) -> Result<Twin> {
    if direction.len() != ctx.dim() || direction.norm() == 0.0 {
        return Err(Error::Shape(format!("direction must be a nonzero vector of length {}", ctx.dim())));
    }
    if !(t0 > 0.0 && t0.is_finite()) {
        return Err(Error::InvalidArgument(format!("t0 must be positive, got {t0}")));
    }
    let eval_opts =
        EvaluateOptions { rank_policy: opts.rank_policy, tol_s: Some(opts.tol_s), path_cap: opts.path_cap, ..Default::default() };
    let report = evaluate(ctx, inputs, &eval_opts)?;
    if report.c_n {
        return Err(Error::Precondition(format!(
            "the necessary condition holds (R_Gamma = {}, R_A = {}, dim = {}); no twin is guaranteed",
            report.r_gamma, report.r_a, report.dim
        )));
    }
    let h = direction.normalize();
    let (tau0, f0, bits0) = anchor_state(ctx, inputs)?;
    let start = RestrictedParams(&tau0.0 + &h * t0);
    let (_, start_bits) = restricted_outputs(ctx, &start, inputs)?;
    if start_bits != bits0 {
        return Err(Error::Precondition(format!("t0 = {t0} leaves the anchor's activation region")));
    }
    let scale = 1.0 + f0.amax();
    let gn = GaussNewtonOptions { res_tol: opts.gauss_newton.res_tol * scale, ..opts.gauss_newton };
    let region_ok = |tau: &DVector<f64>| -> bool {
        if (tau - &tau0.0).norm() < t0 / 2.0 {
            return false;
        }
        match restricted_outputs(ctx, &RestrictedParams(tau.clone()), inputs) {
            Ok((_, bits)) => bits == bits0,
            Err(_) => false,
        }
    };
    let outcome = gauss_newton_constrained(
        |tau| {
            let (f, _) = restricted_outputs(ctx, &RestrictedParams(tau.clone()), inputs).expect("tau has chart dimension");
            f - &f0
        },
        |tau| restricted_jacobian(ctx, &RestrictedParams(tau.clone()), inputs).expect("tau has chart dimension").matrix,
        region_ok,
        start.0,
        &gn,
    )?;
    if outcome.status != GaussNewtonStatus::Converged {
        return Err(Error::NoWitnessFound(format!(
            "Gauss-Newton ended {:?} after {} iterations with residual {:.3e}",
            outcome.status, outcome.iterations, outcome.residual_inf
        )));
    }
    let tau = RestrictedParams(outcome.x);
    let params = embed(ctx, &tau)?;
    let equivalence = are_equivalent(ctx.anchor(), &params, opts.equivalence_tol, opts.tol_s)?;
    Ok(Twin {
        distance: (&tau.0 - &tau0.0).norm(),
        residual_inf: outcome.residual_inf,
        iterations: outcome.iterations,
        tau,
        params,
        equivalence,
    })
}

/// Unit vector in the column span of `kernel` (orthonormal columns) with
/// Gaussian coefficients; a Gaussian unit vector in `R^dim` when the
/// kernel is empty.
pub fn random_kernel_direction<R: Rng + ?Sized>(kernel: &DMatrix<f64>, dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = if kernel.ncols() == 0 {
            DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
        } else {
            kernel * DVector::from_fn(kernel.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let n = v.norm();
        if n > 0.0 {
            return v / n;
        }
    }
}

/// Starting offset for the continuation: a small fraction of the
/// activation margin, scaled down by the input magnitude so the first
/// point stays in the anchor's region.
pub fn default_t0(ctx: &ChartContext, inputs: &DMatrix<f64>) -> Result<f64> {
    let margin = activation_margin(ctx.anchor(), inputs)?.value;
    let scale = 1.0 + inputs.amax() + ctx.anchor().max_abs();
    Ok(0.1 * margin / scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinSearch {
    pub twin: Option<Twin>,
    pub attempts: usize,
    /// One message per failed attempt.
    pub failures: Vec<String>,
}

/// Runs [`continuation_twin`] from up to `max_attempts` seeded kernel
/// directions and keeps the first valid witness.
pub fn find_twin(
    ctx: &ChartContext,
    inputs: &DMatrix<f64>,
    seed: u64,
    max_attempts: usize,
    t0: Option<f64>,
    opts: &ContinuationOptions,
) -> Result<TwinSearch> {
    let gamma = gamma_backprop(ctx, inputs)?;
    let kernel = kernel_directions(&gamma, &opts.rank_policy)?;
    let t0 = match t0 {
        Some(t) => t,
        None => default_t0(ctx, inputs)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for attempt in 1..=max_attempts {
        let h = random_kernel_direction(&kernel, ctx.dim(), &mut rng);
        match continuation_twin(ctx, inputs, &h, t0, opts) {
            Ok(twin) if twin.is_valid_witness() => return Ok(TwinSearch { twin: Some(twin), attempts: attempt, failures }),
            Ok(twin) => failures.push(format!("converged to a rescaling of the anchor ({:?})", twin.equivalence)),
            Err(Error::NoWitnessFound(m)) => failures.push(m),
            Err(Error::Precondition(m)) if m.contains("activation region") => failures.push(m),
            Err(e) => return Err(e),
        }
    }
    Ok(TwinSearch { twin: None, attempts: max_attempts, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyProbe {
    /// Smallest singular value of `Gamma(X, theta)`.
    pub sigma_min: f64,
    /// `(t, |f_{rho(tau_theta + t u)}(X) - f_theta(X)|_2)` per sampled direction and scale.
    pub samples: Vec<(f64, f64)>,
    /// Smallest `change / (sigma_min * t)` over the samples.
    pub min_ratio: f64,
    /// Every sample moved the outputs by at least `sigma_min * t / 2`.
    pub all_above_bound: bool,
    /// Some sample left the outputs exactly unchanged.
    pub found_equal_outputs: bool,
}

/// Perturbs `tau_theta` along random unit directions at the given scales
/// and measures how much the outputs on `X` move.
pub fn sufficiency_probe(
    ctx: &ChartContext,
    inputs: &DMatrix<f64>,
    n_directions: usize,
    scales: &[f64],
    seed: u64,
    policy: &RankPolicy,
) -> Result<SufficiencyProbe> {
    let gamma = gamma_backprop(ctx, inputs)?;
    let info = numerical_rank(&gamma.matrix, policy)?;
    let sigma_min = if info.rank == ctx.dim() { info.singular_values[ctx.dim() - 1] } else { 0.0 };
    let (tau, f0, _) = anchor_state(ctx, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_directions * scales.len());
    let mut min_ratio = f64::INFINITY;
    let mut all_above_bound = true;
    let mut found_equal_outputs = false;
    for _ in 0..n_directions {
        let u = DVector::from_fn(ctx.dim(), |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        for &t in scales {
            let (f, _) = restricted_outputs(ctx, &RestrictedParams(&tau.0 + &u * t), inputs)?;
            let change = (f - &f0).norm();
            found_equal_outputs |= change == 0.0;
            all_above_bound &= change >= sigma_min * t / 2.0;
            if sigma_min > 0.0 {
                min_ratio = min_ratio.min(change / (sigma_min * t));
            }
            samples.push((t, change));
        }
    }
    Ok(SufficiencyProbe { sigma_min, samples, min_ratio, all_above_bound: all_above_bound && sigma_min > 0.0, found_equal_outputs })
}

/// Materializes `eta -> alpha eta` on `R^{P x V_L}` as a matrix: rows
/// `(i, v_L)` input-major, columns `(p, v_L)` path-major.
pub fn block_operator<T: Scalar>(alpha: &DMatrix<T>, n_outputs: usize) -> DMatrix<T> {
    let (n, paths) = alpha.shape();
    let mut m = DMatrix::from_element(n * n_outputs, paths * n_outputs, T::zero());
    for i in 0..n {
        for p in 0..paths {
            if alpha[(i, p)].is_zero() {
                continue;
            }
            for v in 0..n_outputs {
                m[(i * n_outputs + v, p * n_outputs + v)] = alpha[(i, p)].clone();
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    /// `f_theta(X) = alpha(X, theta) phi(theta)` with no residual at all.
    pub linear_representation_exact: bool,
    /// Backpropagation and the closed-form sums give the same `Gamma`.
    pub gamma_cross_exact: bool,
    /// `Gamma = alpha(X, theta) D psi(tau_theta)` exactly.
    pub gamma_factorization_exact: bool,
    pub rank_alpha: usize,
    pub block_operator_rank: usize,
    /// `rank(block operator) = N_L * rank(alpha)`.
    pub r_a_exact: bool,
}

impl ExactReport {
    pub fn all_exact(&self) -> bool {
        self.linear_representation_exact && self.gamma_cross_exact && self.gamma_factorization_exact && self.r_a_exact
    }
}

/// Runs the representation, Jacobian and rank identities in exact
/// rational arithmetic.
pub fn exact_verify(params: &NetworkParams<BigRational>, inputs: &DMatrix<BigRational>, cap: u128) -> Result<ExactReport> {
    let arch = params.arch();
    let paths = enumerate_paths(arch, cap)?;
    let n_out = arch.output_dim();
    let (_, residual) = linear_representation_residual(params, inputs, &paths)?;
    let linear_representation_exact = residual.iter().all(num_traits::Zero::is_zero);

    let zero = BigRational::from_i64(0);
    let ctx = build_chart(params, &zero)?;
    let backprop = gamma_backprop(&ctx, inputs)?;
    let explicit = gamma_explicit(&ctx, inputs, cap)?;
    let gamma_cross_exact = backprop == explicit;

    let alpha = activation_matrix(params, inputs, &paths)?.triplets.to_dense();
    let dpsi = jacobian_psi(&ctx, &restricted_from(&ctx), &paths)?;
    let factored = block_operator(&alpha, n_out) * &dpsi;
    let gamma_factorization_exact = factored == backprop.matrix;

    let rank_alpha = exact_rank(&alpha);
    let block_operator_rank = exact_rank(&block_operator(&alpha, n_out));
    Ok(ExactReport {
        linear_representation_exact,
        gamma_cross_exact,
        gamma_factorization_exact,
        rank_alpha,
        block_operator_rank,
        r_a_exact: block_operator_rank == n_out * rank_alpha,
    })
}

/// Converts a float instance to rationals (exactly) and runs [`exact_verify`].
pub fn exact_verify_f64(params: &NetworkParams, inputs: &DMatrix<f64>, cap: u128) -> Result<ExactReport> {
    let flat: Option<Vec<BigRational>> = params.to_flat().iter().map(|&v| rational_from_f64(v)).collect();
    let flat = flat.ok_or_else(|| Error::NonFinite("parameters are not representable as rationals".into()))?;
    let exact_params = NetworkParams::from_flat(params.arch().clone(), &flat)?;
    let cells: Option<Vec<BigRational>> = inputs.iter().map(|&v| rational_from_f64(v)).collect();
    let cells = cells.ok_or_else(|| Error::NonFinite("sample is not representable as rationals".into()))?;
    let exact_inputs = DMatrix::from_vec(inputs.nrows(), inputs.ncols(), cells);
    exact_verify(&exact_params, &exact_inputs, cap)
}
