//! The Jacobian `Gamma(X, theta)` of the restricted network output, the
//! ranks `R_Gamma` and `R_A`, and the resulting identifiability verdict.
//!
//! The necessary condition holds when `R_Gamma < R_A` or
//! `R_Gamma = |F_theta| + |B|`; the sufficient condition when
//! `R_Gamma = |F_theta| + |B|`. Failing the first means `theta` is not
//! locally identifiable from `X`; meeting the second means it is.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::charts::{build_chart, embed, restricted_from, ChartContext, RestrictedParams, TIE_BREAK_RULE};
use crate::error::{Error, Result};
use crate::linalg::{nullspace, numerical_rank, numerical_rank_sparse, RankInfo, RankPolicy};
use crate::network::{
    activation_margin, check_inputs, default_tol_s, forward, forward_traces, is_degenerate_s, DegeneracyWitness, NetworkParams, NeuronId,
};
use crate::pathspace::{activation_matrix, enumerate_paths, for_each_tuple, DEFAULT_PATH_CAP, PATH_ORDER_VERSION};
use crate::scalar::Scalar;

/// `Gamma(X, theta)`: rows `(i, v_L)` input-major, columns in restricted
/// coordinate order.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix<T: Scalar = f64> {
    pub matrix: DMatrix<T>,
    pub n_inputs: usize,
    pub n_outputs: usize,
}

impl<T: Scalar> GammaMatrix<T> {
    pub fn row_index(&self, input: usize, output: usize) -> usize {
        input * self.n_outputs + output
    }
}

/// Jacobian of `tau -> f_{rho_theta(tau)}(X)` at an arbitrary `tau`, by
/// reverse-mode differentiation of each output coordinate. Gradients of
/// the frozen edges are dropped.
pub fn restricted_jacobian<T: Scalar>(ctx: &ChartContext<T>, tau: &RestrictedParams<T>, inputs: &DMatrix<T>) -> Result<GammaMatrix<T>> {
    let params = embed(ctx, tau)?;
    let arch = params.arch();
    check_inputs(arch, inputs)?;
    let depth = arch.depth();
    let n_out = arch.output_dim();
    let n = inputs.nrows();
    let mut matrix = DMatrix::from_element(n * n_out, ctx.dim(), T::zero());
    for i in 0..n {
        let x: Vec<T> = inputs.row(i).iter().cloned().collect();
        let (_, trace) = forward(&params, &x)?;
        let layer_input = |l: usize| -> DVector<T> {
            if l == 1 {
                DVector::from_vec(x.clone())
            } else {
                trace.activations[l - 2].clone()
            }
        };
        for out in 0..n_out {
            let row = i * n_out + out;
            let mut delta = DVector::from_element(n_out, T::zero());
            delta[out] = T::one();
            for l in (1..=depth).rev() {
                let below = layer_input(l);
                for t in 0..arch.width(l) {
                    if delta[t].is_zero() {
                        continue;
                    }
                    matrix[(row, ctx.bias_coordinate(l, t))] = delta[t].clone();
                    for s in 0..arch.width(l - 1) {
                        if let Some(col) = ctx.edge_coordinate(l - 1, s, t) {
                            matrix[(row, col)] = delta[t].clone() * below[s].clone();
                        }
                    }
                }
                if l > 1 {
                    let back = params.weight_matrix(l).transpose() * &delta;
                    delta = DVector::from_iterator(
                        back.len(),
                        back.iter().enumerate().map(|(k, v)| if trace.bit(l - 1, k) { v.clone() } else { T::zero() }),
                    );
                }
            }
        }
    }
    Ok(GammaMatrix { matrix, n_inputs: n, n_outputs: n_out })
}

/// `Gamma(X, theta)` at the chart anchor, by backpropagation.
pub fn gamma_backprop<T: Scalar>(ctx: &ChartContext<T>, inputs: &DMatrix<T>) -> Result<GammaMatrix<T>> {
    restricted_jacobian(ctx, &restricted_from(ctx), inputs)
}

/// `Gamma(X, theta)` from the closed-form sums over path coordinates:
/// for a free edge `v_l -> v_{l+1}`, the sum over every path through it of
/// its activation factor (times `x_{v_0}` or the starting bias) and the
/// remaining weights; for a bias `b_{v_l}`, the sum over outgoing paths of
/// activation-gated weight products. Cost grows with the path count, so
/// this is an oracle only.
pub fn gamma_explicit<T: Scalar>(ctx: &ChartContext<T>, inputs: &DMatrix<T>, cap: u128) -> Result<GammaMatrix<T>> {
    let params = ctx.anchor();
    let arch = params.arch();
    enumerate_paths(arch, cap)?;
    let traces = forward_traces(params, inputs)?;
    let depth = arch.depth();
    let n_out = arch.output_dim();
    let n = inputs.nrows();
    let all = |k: usize| -> Vec<usize> { (0..arch.width(k)).collect() };
    let w = |k: usize, a: usize, b: usize| params.weight(k, a, b).clone();
    let mut matrix = DMatrix::from_element(n * n_out, ctx.dim(), T::zero());

    for (i, trace) in traces.iter().enumerate() {
        let a = |k: usize, v: usize| -> T {
            if trace.bit(k, v) {
                T::one()
            } else {
                T::zero()
            }
        };
        let x = |v: usize| inputs[(i, v)].clone();
        for out in 0..n_out {
            let row = i * n_out + out;
            for (col, e) in ctx.free_edges().iter().enumerate() {
                let l = e.source_layer;
                if l + 1 == depth && e.target != out {
                    continue;
                }
                let mut total = T::zero();
                let suffix: Vec<Vec<usize>> = (l + 2..depth).map(all).collect();
                for start in 0..=l {
                    let prefix: Vec<Vec<usize>> = (start..l).map(all).collect();
                    for_each_tuple(&prefix, |pre| {
                        for_each_tuple(&suffix, |post| {
                            // Full neuron sequence v_start, ..., v_L.
                            let mut seq: Vec<usize> = pre.to_vec();
                            seq.push(e.source);
                            if l + 1 < depth {
                                seq.push(e.target);
                            }
                            seq.extend_from_slice(post);
                            seq.push(out);
                            let mut term = if start == 0 { x(seq[0]) } else { params.bias(start, seq[0]).clone() };
                            for k in start..depth {
                                let v = seq[k - start];
                                if k >= 1 {
                                    term *= a(k, v);
                                }
                                if k != l {
                                    term *= w(k, v, seq[k - start + 1]);
                                }
                            }
                            total = total.clone() + term;
                        });
                    });
                }
                matrix[(row, col)] = total;
            }
            for m in 1..=depth {
                for u in 0..arch.width(m) {
                    let col = ctx.bias_coordinate(m, u);
                    if m == depth {
                        matrix[(row, col)] = if u == out { T::one() } else { T::zero() };
                        continue;
                    }
                    let mut total = T::zero();
                    let suffix: Vec<Vec<usize>> = (m + 1..depth).map(all).collect();
                    for_each_tuple(&suffix, |post| {
                        let mut seq = vec![u];
                        seq.extend_from_slice(post);
                        seq.push(out);
                        let mut term = T::one();
                        for k in m..depth {
                            let v = seq[k - m];
                            term = term * a(k, v) * w(k, v, seq[k - m + 1]);
                        }
                        total = total.clone() + term;
                    });
                    matrix[(row, col)] = total;
                }
            }
        }
    }
    Ok(GammaMatrix { matrix, n_inputs: n, n_outputs: n_out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankA {
    pub rank_alpha: usize,
    /// `N_L * rank(alpha)`.
    pub r_a: usize,
    pub alpha_spectrum: RankInfo,
}

/// `R_A = N_L * rank(alpha(X, theta))`.
pub fn rank_a(params: &NetworkParams, inputs: &DMatrix<f64>, policy: &RankPolicy, cap: u128) -> Result<RankA> {
    let paths = enumerate_paths(params.arch(), cap)?;
    let alpha = activation_matrix(params, inputs, &paths)?;
    let info = numerical_rank_sparse(&alpha.triplets, policy)?;
    Ok(RankA { rank_alpha: info.rank, r_a: params.arch().output_dim() * info.rank, alpha_spectrum: info })
}

/// Orthonormal basis of `Ker Gamma` as columns.
pub fn kernel_directions(gamma: &GammaMatrix, policy: &RankPolicy) -> Result<DMatrix<f64>> {
    nullspace(&gamma.matrix, policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    LocallyIdentifiable,
    NotLocallyIdentifiable,
    /// The necessary condition holds but the sufficient one does not.
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub rank_policy: RankPolicy,
    /// Defaults to `1e-12 * (1 + max |theta|)`.
    pub tol_s: Option<f64>,
    /// Defaults to `1e-6 * (1 + max |z|)`.
    pub margin_tol: Option<f64>,
    pub path_cap: u128,
    /// How many of the largest and smallest singular values to report.
    pub spectrum_tail: usize,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self { rank_policy: RankPolicy::default(), tol_s: None, margin_tol: None, path_cap: DEFAULT_PATH_CAP, spectrum_tail: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub rank: usize,
    pub threshold: f64,
    /// Ratio of the last kept to the first dropped singular value; `None`
    /// when nothing was dropped, nothing was kept, or the first dropped
    /// value is exactly zero (see `exact_zero_below_cut`).
    pub gap_at_cut: Option<f64>,
    pub exact_zero_below_cut: bool,
    pub largest: Vec<f64>,
    pub smallest: Vec<f64>,
}

impl SpectrumSummary {
    pub fn from_info(info: &RankInfo, tail: usize) -> Self {
        let exact_zero = info.rank > 0 && info.rank < info.singular_values.len() && info.singular_values[info.rank] == 0.0;
        Self {
            rank: info.rank,
            threshold: info.threshold,
            gap_at_cut: info.gap.filter(|g| g.is_finite()),
            exact_zero_below_cut: exact_zero,
            largest: info.largest(tail),
            smallest: info.smallest(tail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub degenerate_s: bool,
    pub degeneracy_witnesses: Vec<DegeneracyWitness>,
    pub tol_s: f64,
    pub activation_margin: f64,
    pub margin_input: usize,
    pub margin_neuron: NeuronId,
    pub margin_threshold: f64,
    pub near_boundary: bool,
    pub rank_policy: RankPolicy,
    pub gamma_spectrum: SpectrumSummary,
    pub alpha_spectrum: SpectrumSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub path_order: String,
    pub tie_break: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub layer_sizes: Vec<usize>,
    pub n_inputs: usize,
    /// `n * N_L`, the number of rows of `Gamma`.
    pub n_rows: usize,
    pub r_gamma: usize,
    pub r_a: usize,
    pub rank_alpha: usize,
    /// `|F_theta| + |B|`.
    pub dim: usize,
    pub c_n: bool,
    pub c_s: bool,
    pub verdict: Verdict,
    /// `R_A - R_Gamma`.
    pub rank_gap: usize,
    /// False when `theta` is flagged near `S` or near the activation boundary;
    /// the verdict is then advisory.
    pub preconditions_verified: bool,
    pub diagnostics: Diagnostics,
    pub reproducibility: Reproducibility,
}

pub fn verdict_from_ranks(r_gamma: usize, r_a: usize, dim: usize) -> (bool, bool, Verdict) {
    let c_s = r_gamma == dim;
    let c_n = r_gamma < r_a || c_s;
    let verdict = if c_s {
        Verdict::LocallyIdentifiable
    } else if !c_n {
        Verdict::NotLocallyIdentifiable
    } else {
        Verdict::Indeterminate
    };
    (c_n, c_s, verdict)
}

/// Computes both ranks and the verdict for the chart anchor and sample.
pub fn evaluate(ctx: &ChartContext, inputs: &DMatrix<f64>, opts: &EvaluateOptions) -> Result<IdentifiabilityReport> {
    let params = ctx.anchor();
    let arch = params.arch();
    check_inputs(arch, inputs)?;
    if inputs.nrows() == 0 {
        return Err(Error::Shape("sample has no inputs".into()));
    }
    let tol_s = opts.tol_s.unwrap_or_else(|| default_tol_s(params));
    let degeneracy = is_degenerate_s(params, &tol_s);
    let margin = activation_margin(params, inputs)?;
    let margin_threshold = opts.margin_tol.unwrap_or_else(|| margin.default_threshold());
    let near_boundary = margin.value < margin_threshold;

    let gamma = gamma_backprop(ctx, inputs)?;
    let gamma_info = numerical_rank(&gamma.matrix, &opts.rank_policy)?;
    let ra = rank_a(params, inputs, &opts.rank_policy, opts.path_cap)?;
    let dim = ctx.dim();
    let r_gamma = gamma_info.rank;
    let (c_n, c_s, verdict) = verdict_from_ranks(r_gamma, ra.r_a, dim);

    Ok(IdentifiabilityReport {
        layer_sizes: arch.layer_sizes().to_vec(),
        n_inputs: inputs.nrows(),
        n_rows: gamma.matrix.nrows(),
        r_gamma,
        r_a: ra.r_a,
        rank_alpha: ra.rank_alpha,
        dim,
        c_n,
        c_s,
        verdict,
        rank_gap: ra.r_a.saturating_sub(r_gamma),
        preconditions_verified: !degeneracy.degenerate && !near_boundary,
        diagnostics: Diagnostics {
            degenerate_s: degeneracy.degenerate,
            degeneracy_witnesses: degeneracy.witnesses,
            tol_s,
            activation_margin: margin.value,
            margin_input: margin.input,
            margin_neuron: margin.neuron,
            margin_threshold,
            near_boundary,
            rank_policy: opts.rank_policy,
            gamma_spectrum: SpectrumSummary::from_info(&gamma_info, opts.spectrum_tail),
            alpha_spectrum: SpectrumSummary::from_info(&ra.alpha_spectrum, opts.spectrum_tail),
        },
        reproducibility: Reproducibility { path_order: PATH_ORDER_VERSION.to_string(), tie_break: TIE_BREAK_RULE.to_string(), seed: None },
    })
}

/// Chart at `params`, falling back to an exact-zero degeneracy test when
/// the anchor is only near `S`.
pub fn chart_for(params: &NetworkParams, tol_s: f64) -> Result<ChartContext> {
    match build_chart(params, &tol_s) {
        Err(Error::Degenerate { .. }) => build_chart(params, &0.0),
        other => other,
    }
}

/// Builds the chart and evaluates. An anchor inside `S` at tolerance
/// `tol_s` but with every fixed edge still nonzero is evaluated anyway
/// with the degeneracy flag set; an anchor with an exactly dead neuron is
/// an error.
pub fn evaluate_params(
    params: &NetworkParams,
    inputs: &DMatrix<f64>,
    opts: &EvaluateOptions,
) -> Result<(ChartContext, IdentifiabilityReport)> {
    let tol_s = opts.tol_s.unwrap_or_else(|| default_tol_s(params));
    let ctx = chart_for(params, tol_s)?;
    let report = evaluate(&ctx, inputs, &EvaluateOptions { tol_s: Some(tol_s), ..*opts })?;
    Ok((ctx, report))
}
