//! Solver benchmark: per problem size, draw random well-posed instances and
//! record the residual history of both solvers started from the identity.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use sedjoco::core::serialize::format_f64;
use sedjoco::solvers::{ConvergenceTrace, InitStrategy};
use sedjoco::{ir_solve, newton_solve, ProblemInstance, Result, SedjocoError, SolverOptions};

use crate::config::ConvergenceConfig;
use crate::runners::{derive_seed, streams, Artifacts};

/// Residual history of one solver on one trial; `converged` is false when
/// the iteration hit its cap above tolerance.
struct SolverRun {
    initial_residual: f64,
    residuals: Vec<f64>,
    iterations: usize,
    converged: bool,
    wall_seconds: f64,
}

impl SolverRun {
    fn from_trace(t: &ConvergenceTrace) -> Self {
        SolverRun {
            initial_residual: t.initial_residual,
            residuals: t.residuals.clone(),
            iterations: t.iterations,
            converged: t.converged,
            wall_seconds: t.wall_time.as_secs_f64(),
        }
    }
}

fn run_one(
    solve: impl Fn(&ProblemInstance, &SolverOptions) -> Result<(sedjoco::SolutionSet, ConvergenceTrace)>,
    p: &ProblemInstance,
    opts: &SolverOptions,
) -> Result<SolverRun> {
    match solve(p, opts) {
        Ok((_, trace)) => Ok(SolverRun::from_trace(&trace)),
        Err(SedjocoError::NonConvergence {
            trace: Some(trace),
            message,
        }) => {
            log::warn!("recorded a hard solver failure: {}", message);
            Ok(SolverRun::from_trace(&trace))
        }
        Err(e) => Err(e),
    }
}

/// Median as a float: the midpoint of the two central order statistics for
/// even counts.
fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

pub fn run(cfg: &ConvergenceConfig, out: &Artifacts, pool: &rayon::ThreadPool) -> Result<()> {
    let master = cfg.master_seed.expect("validated");
    let mut trace_csv = String::from("solver,K,M,trial,iteration,log10_residual\n");
    let mut summary_csv = String::from("solver,K,M,n_trials,converged,median_iterations\n");
    for (si, &[k, m]) in cfg.sizes.iter().enumerate() {
        let stream = streams::CONVERGENCE_BASE + si as u64;
        let runs: Vec<(SolverRun, SolverRun)> = pool.install(|| {
            (0..cfg.n_trials as u64)
                .into_par_iter()
                .map(|trial| -> Result<(SolverRun, SolverRun)> {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, stream, trial));
                    let p = ProblemInstance::random_pd(k, m, &mut rng)?;
                    let opts = SolverOptions {
                        max_iters: cfg.solver.max_iters,
                        tol: cfg.solver.tol,
                        init: InitStrategy::Identity,
                        newton_damping: cfg.solver.damping,
                        seed: derive_seed(master, streams::SOLVER_JITTER ^ stream, trial),
                    };
                    let newton = run_one(newton_solve, &p, &opts)?;
                    let relaxation = run_one(ir_solve, &p, &opts)?;
                    Ok((newton, relaxation))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (name, select) in [
            ("newton", 0usize),
            ("relaxation", 1usize),
        ] {
            let mut to_tol = Vec::new();
            let mut wall = 0.0;
            for (trial, pair) in runs.iter().enumerate() {
                let run = if select == 0 { &pair.0 } else { &pair.1 };
                trace_csv.push_str(&format!(
                    "{},{},{},{},0,{}\n",
                    name,
                    k,
                    m,
                    trial,
                    format_f64(run.initial_residual.log10())
                ));
                for (i, r) in run.residuals.iter().enumerate() {
                    trace_csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        name,
                        k,
                        m,
                        trial,
                        i + 1,
                        format_f64(r.log10())
                    ));
                }
                if run.converged {
                    to_tol.push(run.iterations);
                }
                wall += run.wall_seconds;
            }
            let converged = to_tol.len();
            summary_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name,
                k,
                m,
                cfg.n_trials,
                converged,
                format_f64(median(&mut to_tol))
            ));
            // Wall time is honest measurement, not a function of the
            // config, so it stays out of the deterministic artifacts.
            log::info!(
                "{} K={} M={}: {}/{} converged, mean wall time {:.3} ms",
                name,
                k,
                m,
                converged,
                cfg.n_trials,
                1e3 * wall / cfg.n_trials as f64
            );
        }
    }
    out.write("convergence_trace.csv", &trace_csv)?;
    out.write("convergence_summary.csv", &summary_csv)?;
    Ok(())
}
