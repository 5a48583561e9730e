//! One-shot solve of a serialized problem instance: load, check
//! solvability, run the selected solver, and write the solution and its
//! iteration history.

use std::fs;

use sedjoco::core::serialize::{format_f64, problem_from_json, solution_to_json};
use sedjoco::solvers::{ConvergenceTrace, InitStrategy};
use sedjoco::{
    build_augmented_targets, check_existence, default_pd_tol, ir_solve, newton_solve, Result,
    SedjocoError, SolverOptions,
};

use crate::config::{Algorithm, SolveConfig};
use crate::runners::Artifacts;

fn trace_csv(trace: &ConvergenceTrace) -> String {
    let mut out = String::from("iteration,residual,log_likelihood\n");
    out.push_str(&format!(
        "0,{},{}\n",
        format_f64(trace.initial_residual),
        format_f64(trace.initial_likelihood)
    ));
    for (i, (r, ll)) in trace
        .residuals
        .iter()
        .zip(trace.likelihoods.iter())
        .enumerate()
    {
        out.push_str(&format!(
            "{},{},{}\n",
            i + 1,
            format_f64(*r),
            format_f64(*ll)
        ));
    }
    out
}

pub fn run(cfg: &SolveConfig, out: &Artifacts) -> Result<()> {
    let text = fs::read_to_string(&cfg.instance)?;
    let p = problem_from_json(&text)?;
    let aug = build_augmented_targets(&p);
    let existence = check_existence(&aug, default_pd_tol(&aug))?;
    if !existence.is_pd_all {
        log::warn!(
            "a solution is not guaranteed to exist: smallest stacked eigenvalues {:?}",
            existence.lambda_min
        );
    }
    let opts = SolverOptions {
        max_iters: cfg.solver.max_iters,
        tol: cfg.solver.tol,
        init: InitStrategy::Identity,
        newton_damping: cfg.solver.damping,
        seed: cfg.master_seed.expect("validated"),
    };
    let outcome = match cfg.algorithm {
        Algorithm::Newton => newton_solve(&p, &opts),
        Algorithm::Relaxation => ir_solve(&p, &opts),
    };
    match outcome {
        Ok((solution, trace)) => {
            out.write("trace.csv", &trace_csv(&trace))?;
            if !trace.converged {
                return Err(SedjocoError::NonConvergence {
                    message: format!(
                        "residual {} above tolerance {} after {} iterations",
                        format_f64(trace.last_residual()),
                        format_f64(opts.tol),
                        trace.iterations
                    ),
                    trace: Some(Box::new(trace)),
                });
            }
            let mut doc = solution_to_json(&solution)?;
            doc.push('\n');
            out.write("solution.json", &doc)?;
            log::info!(
                "converged in {} iterations to residual {}",
                trace.iterations,
                format_f64(trace.last_residual())
            );
            Ok(())
        }
        Err(SedjocoError::NonConvergence { message, trace }) => {
            if let Some(t) = &trace {
                out.write("trace.csv", &trace_csv(t))?;
            }
            Err(SedjocoError::NonConvergence { message, trace })
        }
        Err(e) => Err(e),
    }
}
