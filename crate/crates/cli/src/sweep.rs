//! Sample-size sweeps: nested samples per seed, evaluated in parallel over
//! seeds and reported in seed order.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use reluid::io::to_json;
use reluid::linalg::RankPolicy;
use reluid::{evaluate_params, Architecture, NetworkParams, Verdict};
use serde::Serialize;

use crate::{CliError, CliResult, Distribution, Outcome, RunConfig};

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub layer_sizes: Option<Vec<usize>>,
    pub distribution: Distribution,
    pub n_max: Option<usize>,
    pub num_seeds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub n: usize,
    /// `n * N_L`, the number of rows of Gamma.
    pub n_rows: usize,
    pub r_gamma: Option<usize>,
    pub r_a: Option<usize>,
    pub dim: usize,
    pub c_n: Option<bool>,
    pub c_s: Option<bool>,
    pub verdict: Option<Verdict>,
    pub preconditions_verified: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub smallest_n_with_c_s: Option<usize>,
    /// Both ranks never decreased as inputs were appended.
    pub ranks_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub layer_sizes: Vec<usize>,
    pub random_parameters: bool,
    pub distribution: Distribution,
    pub first_seed: u64,
    pub num_seeds: u64,
    pub n_max: usize,
    pub rank_policy: RankPolicy,
    pub dim: usize,
    /// `ceil(dim / N_L)`, the smallest sample size that can satisfy the
    /// sufficient condition.
    pub dimension_bound_n: usize,
    /// Rows with `n * N_L < dim` that nevertheless report the sufficient condition.
    pub below_bound_violations: usize,
    /// Fraction of seeds whose smallest identifying `n` equals the bound.
    pub fraction_at_bound: f64,
    pub rows: Vec<SweepRow>,
    pub seeds: Vec<SeedSummary>,
}

/// Draws row by row, so the first `n` rows do not depend on how many rows
/// are drawn in total.
fn draw_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize, distribution: Distribution) -> DMatrix<f64> {
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        for _ in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            values.push(match distribution {
                Distribution::Normal => g,
                Distribution::Alternating if i % 2 == 0 => g.abs(),
                Distribution::Alternating => -g.abs(),
            });
        }
    }
    DMatrix::from_row_slice(n, d, &values)
}

fn run_seed(
    base: Option<&NetworkParams>,
    arch: &Architecture,
    seed: u64,
    n_max: usize,
    cfg: &RunConfig,
    distribution: Distribution,
) -> Vec<SweepRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match base {
        Some(p) => p.clone(),
        None => NetworkParams::random_normal(arch.clone(), &mut rng),
    };
    let inputs = draw_inputs(&mut rng, n_max, arch.input_dim(), distribution);
    let dim = arch.manifold_dimension();
    (1..=n_max)
        .map(|n| {
            let mut row = SweepRow {
                seed,
                n,
                n_rows: n * arch.output_dim(),
                r_gamma: None,
                r_a: None,
                dim,
                c_n: None,
                c_s: None,
                verdict: None,
                preconditions_verified: None,
                error: None,
            };
            match evaluate_params(&params, &inputs.rows(0, n).into_owned(), &cfg.evaluate_options()) {
                Ok((_, r)) => {
                    row.r_gamma = Some(r.r_gamma);
                    row.r_a = Some(r.r_a);
                    row.c_n = Some(r.c_n);
                    row.c_s = Some(r.c_s);
                    row.verdict = Some(r.verdict);
                    row.preconditions_verified = Some(r.preconditions_verified);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

fn summarize(seed: u64, rows: &[SweepRow]) -> SeedSummary {
    let smallest_n_with_c_s = rows.iter().find(|r| r.c_s == Some(true)).map(|r| r.n);
    let ranks: Vec<(usize, usize)> = rows.iter().filter_map(|r| Some((r.r_gamma?, r.r_a?))).collect();
    let ranks_monotone = ranks.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
    SeedSummary { seed, smallest_n_with_c_s, ranks_monotone }
}

pub fn sweep(cfg: &RunConfig, opts: &SweepOptions) -> CliResult<SweepReport> {
    let base = match (&cfg.model, &opts.layer_sizes) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --model or --layer-sizes, not both".into())),
        (Some(_), None) => Some(cfg.load_model()?),
        (None, Some(_)) => None,
        (None, None) => return Err(CliError::Usage("sweep needs --model or --layer-sizes".into())),
    };
    let arch = match (&base, &opts.layer_sizes) {
        (Some(p), _) => p.arch().clone(),
        (None, Some(sizes)) => Architecture::new(sizes.clone()).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None) => unreachable!(),
    };
    if opts.num_seeds == 0 {
        return Err(CliError::Usage("--num-seeds must be at least 1".into()));
    }
    let dim = arch.manifold_dimension();
    let bound = dim.div_ceil(arch.output_dim());
    let n_max = opts.n_max.unwrap_or(4 * bound);
    if n_max == 0 {
        return Err(CliError::Usage("--n-max must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..opts.num_seeds).map(|k| cfg.seed.wrapping_add(k)).collect();
    let per_seed: Vec<Vec<SweepRow>> =
        seeds.par_iter().map(|&s| run_seed(base.as_ref(), &arch, s, n_max, cfg, opts.distribution)).collect();
    let summaries: Vec<SeedSummary> = seeds.iter().zip(&per_seed).map(|(&s, rows)| summarize(s, rows)).collect();
    let rows: Vec<SweepRow> = per_seed.into_iter().flatten().collect();
    let below_bound_violations = rows.iter().filter(|r| r.n_rows < dim && r.c_s == Some(true)).count();
    let at_bound = summaries.iter().filter(|s| s.smallest_n_with_c_s == Some(bound)).count();
    Ok(SweepReport {
        layer_sizes: arch.layer_sizes().to_vec(),
        random_parameters: base.is_none(),
        distribution: opts.distribution,
        first_seed: cfg.seed,
        num_seeds: opts.num_seeds,
        n_max,
        rank_policy: cfg.rank_policy,
        dim,
        dimension_bound_n: bound,
        below_bound_violations,
        fraction_at_bound: at_bound as f64 / summaries.len() as f64,
        rows,
        seeds: summaries,
    })
}

pub fn run(cfg: &RunConfig, opts: &SweepOptions) -> CliResult<Outcome> {
    Ok(Outcome { code: 0, text: to_json(&sweep(cfg, opts)?) })
}
