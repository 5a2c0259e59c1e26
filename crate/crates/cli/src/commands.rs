use reluid::charts::jacobian_psi;
use reluid::identifiability::{chart_for, gamma_backprop, rank_a};
use reluid::io::{model_to_string, to_json, triplets_to_string};
use reluid::linalg::{numerical_rank, RankInfo, RankPolicy};
use reluid::network::default_tol_s;
use reluid::oracle::{exact_verify_f64, fd_jacobian, ExactReport};
use reluid::pathspace::{activation_matrix, check_linear_representation, LinearRepresentationCheck, TripletMatrix, PATH_ORDER_VERSION};
use reluid::rescaling::canonicalize as canonicalize_params;
use reluid::{enumerate_paths, evaluate_params, lift, restricted_from, NetworkParams};
use serde::Serialize;

use crate::{exit_code, CliResult, MatrixKind, Outcome, RunConfig};

fn tol_s(cfg: &RunConfig, params: &NetworkParams) -> f64 {
    cfg.tol_s.unwrap_or_else(|| default_tol_s(params))
}

pub fn check(cfg: &RunConfig) -> CliResult<Outcome> {
    let params = cfg.load_model()?;
    let inputs = cfg.load_sample()?;
    let (_, mut report) = evaluate_params(&params, &inputs, &cfg.evaluate_options())?;
    report.reproducibility.seed = Some(cfg.seed);
    Ok(Outcome { code: exit_code(&report), text: to_json(&report) })
}

#[derive(Debug, Serialize)]
struct LiftVerifyReport {
    layer_sizes: Vec<usize>,
    n_inputs: usize,
    num_paths: usize,
    path_order: &'static str,
    check: LinearRepresentationCheck,
    exact: Option<ExactReport>,
    passed: bool,
}

pub fn lift_verify(cfg: &RunConfig, rel_tol: f64, exact: bool) -> CliResult<Outcome> {
    let params = cfg.load_model()?;
    let inputs = cfg.load_sample()?;
    let check = check_linear_representation(&params, &inputs, rel_tol, cfg.path_cap)?;
    let exact = if exact { Some(exact_verify_f64(&params, &inputs, cfg.path_cap)?) } else { None };
    let passed = check.passed && exact.as_ref().is_none_or(|r| r.linear_representation_exact);
    let report = LiftVerifyReport {
        layer_sizes: params.arch().layer_sizes().to_vec(),
        n_inputs: inputs.nrows(),
        num_paths: enumerate_paths(params.arch(), cfg.path_cap)?.len(),
        path_order: PATH_ORDER_VERSION,
        check,
        exact,
        passed,
    };
    Ok(Outcome { code: if passed { 0 } else { 1 }, text: to_json(&report) })
}

pub fn jacobian(cfg: &RunConfig, kind: MatrixKind, fd_step: f64) -> CliResult<Outcome> {
    let params = cfg.load_model()?;
    let (name, matrix) = match kind {
        MatrixKind::Gamma => {
            let ctx = chart_for(&params, tol_s(cfg, &params))?;
            ("gamma", TripletMatrix::from_dense(&gamma_backprop(&ctx, &cfg.load_sample()?)?.matrix))
        }
        MatrixKind::Fd => {
            let ctx = chart_for(&params, tol_s(cfg, &params))?;
            ("gamma_fd", TripletMatrix::from_dense(&fd_jacobian(&ctx, &cfg.load_sample()?, fd_step)?.matrix))
        }
        MatrixKind::Alpha => {
            let paths = enumerate_paths(params.arch(), cfg.path_cap)?;
            ("alpha", activation_matrix(&params, &cfg.load_sample()?, &paths)?.triplets)
        }
        MatrixKind::Lift => {
            let paths = enumerate_paths(params.arch(), cfg.path_cap)?;
            ("lift", TripletMatrix::from_dense(&lift(&params, &paths).matrix))
        }
        MatrixKind::Dpsi => {
            let paths = enumerate_paths(params.arch(), cfg.path_cap)?;
            let ctx = chart_for(&params, tol_s(cfg, &params))?;
            ("dpsi", TripletMatrix::from_dense(&jacobian_psi(&ctx, &restricted_from(&ctx), &paths)?))
        }
    };
    Ok(Outcome { code: 0, text: triplets_to_string(name, &matrix) })
}

#[derive(Debug, Serialize)]
struct RankReport {
    layer_sizes: Vec<usize>,
    n_inputs: usize,
    dim: usize,
    rank_policy: RankPolicy,
    r_gamma: usize,
    r_a: usize,
    gamma: RankInfo,
    alpha: RankInfo,
    dpsi: RankInfo,
}

pub fn rank(cfg: &RunConfig) -> CliResult<Outcome> {
    let params = cfg.load_model()?;
    let inputs = cfg.load_sample()?;
    let ctx = chart_for(&params, tol_s(cfg, &params))?;
    let gamma = numerical_rank(&gamma_backprop(&ctx, &inputs)?.matrix, &cfg.rank_policy)?;
    let ra = rank_a(&params, &inputs, &cfg.rank_policy, cfg.path_cap)?;
    let paths = enumerate_paths(params.arch(), cfg.path_cap)?;
    let dpsi = numerical_rank(&jacobian_psi(&ctx, &restricted_from(&ctx), &paths)?, &cfg.rank_policy)?;
    let report = RankReport {
        layer_sizes: params.arch().layer_sizes().to_vec(),
        n_inputs: inputs.nrows(),
        dim: ctx.dim(),
        rank_policy: cfg.rank_policy,
        r_gamma: gamma.rank,
        r_a: ra.r_a,
        gamma,
        alpha: ra.alpha_spectrum,
        dpsi,
    };
    Ok(Outcome { code: 0, text: to_json(&report) })
}

pub fn canonicalize(cfg: &RunConfig) -> CliResult<Outcome> {
    let params = cfg.load_model()?;
    let (canonical, _) = canonicalize_params(&params, tol_s(cfg, &params))?;
    Ok(Outcome { code: 0, text: model_to_string(&canonical) })
}
