use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reluid::identifiability::{gamma_backprop, kernel_directions};
use reluid::io::{model_to_string, to_json};
use reluid::network::activation_margin;
use reluid::oracle::{find_twin, flatness_probe, random_kernel_direction, ContinuationOptions, FlatnessProbe};
use reluid::rescaling::Equivalence;
use reluid::{evaluate_params, IdentifiabilityReport};
use serde::Serialize;

use crate::{exit_code, write_file, CliResult, DirectionSource, Outcome, RunConfig};

#[derive(Debug, Clone)]
pub struct PerturbOptions {
    pub direction: DirectionSource,
    pub t_grid: Option<Vec<f64>>,
    pub t0: Option<f64>,
    pub attempts: usize,
    pub witness_out: Option<PathBuf>,
}

const DEFAULT_GRID: [f64; 10] = [1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1];

#[derive(Debug, Serialize)]
struct ContinuationReport {
    found: bool,
    attempts: usize,
    failures: Vec<String>,
    residual_inf: Option<f64>,
    distance: Option<f64>,
    iterations: Option<usize>,
    equivalence: Option<Equivalence>,
    witness_flat: Option<Vec<f64>>,
    witness_written: bool,
}

#[derive(Debug, Serialize)]
struct PerturbReport {
    identifiability: IdentifiabilityReport,
    direction_source: DirectionSource,
    kernel_dimension: usize,
    direction: Vec<f64>,
    flatness: FlatnessProbe,
    /// Present when the necessary condition fails.
    continuation: Option<ContinuationReport>,
}

pub fn run(cfg: &RunConfig, opts: &PerturbOptions) -> CliResult<Outcome> {
    let params = cfg.load_model()?;
    let inputs = cfg.load_sample()?;
    let (ctx, mut report) = evaluate_params(&params, &inputs, &cfg.evaluate_options())?;
    report.reproducibility.seed = Some(cfg.seed);

    let gamma = gamma_backprop(&ctx, &inputs)?;
    let kernel = kernel_directions(&gamma, &cfg.rank_policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = match opts.direction {
        DirectionSource::Kernel => kernel.clone(),
        DirectionSource::Random => kernel.columns(0, 0).into_owned(),
    };
    let direction = random_kernel_direction(&basis, ctx.dim(), &mut rng);
    let grid = match &opts.t_grid {
        Some(g) => g.clone(),
        None => {
            let margin = activation_margin(&params, &inputs)?.value;
            DEFAULT_GRID.iter().map(|c| c * margin).collect()
        }
    };
    let flatness = flatness_probe(&ctx, &inputs, &direction, &grid)?;

    let continuation = if report.c_n {
        None
    } else {
        let copts = ContinuationOptions {
            rank_policy: cfg.rank_policy,
            tol_s: report.diagnostics.tol_s,
            path_cap: cfg.path_cap,
            ..Default::default()
        };
        let search = find_twin(&ctx, &inputs, cfg.seed, opts.attempts.max(1), opts.t0, &copts)?;
        let mut witness_written = false;
        if let (Some(twin), Some(path)) = (&search.twin, &opts.witness_out) {
            write_file(path, &model_to_string(&twin.params))?;
            witness_written = true;
        }
        Some(ContinuationReport {
            found: search.twin.is_some(),
            attempts: search.attempts,
            failures: search.failures,
            residual_inf: search.twin.as_ref().map(|t| t.residual_inf),
            distance: search.twin.as_ref().map(|t| t.distance),
            iterations: search.twin.as_ref().map(|t| t.iterations),
            equivalence: search.twin.as_ref().map(|t| t.equivalence),
            witness_flat: search.twin.as_ref().map(|t| t.params.to_flat()),
            witness_written,
        })
    };
    let code = exit_code(&report);
    let out = PerturbReport {
        identifiability: report,
        direction_source: opts.direction,
        kernel_dimension: kernel.ncols(),
        direction: direction.iter().copied().collect(),
        flatness,
        continuation,
    };
    Ok(Outcome { code, text: to_json(&out) })
}
