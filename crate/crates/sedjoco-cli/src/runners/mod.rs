//! Experiment runners. Each runner turns a validated configuration into CSV
//! and JSON artifacts under the output directory.
//!
//! Determinism: every trial derives its own seed from the master seed, a
//! per-sweep-point stream id and the trial index, and trial results are
//! folded in index order after the (possibly parallel) map. Artifacts are
//! therefore identical regardless of thread count.

pub mod convergence;
pub mod crlb;
pub mod nonstationary;
pub mod solve;
pub mod stationary;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sedjoco::core::serialize::format_f64;
use sedjoco::{
    align_solution, isr_accumulate, mix, separate_ml, separate_per_set, IsrReport, Result,
    ScvCovarianceSet, SedjocoError, SolutionSet, SolverOptions,
};

/// Output directory; created on first write.
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
        }
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

/// Stateless seed derivation: a splitmix-style hash of the master seed, a
/// stream id (one per sweep point or purpose) and the trial index.
pub fn derive_seed(master: u64, stream: u64, trial: u64) -> u64 {
    let mut x = master
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ trial.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream ids keeping the seed sequences of different purposes disjoint.
pub mod streams {
    pub const CONVERGENCE_BASE: u64 = 0x0100;
    pub const NONSTATIONARY_BASE: u64 = 0x0200;
    pub const STATIONARY_BASE: u64 = 0x0300;
    pub const FILTER_DRAW: u64 = 0x0400;
    pub const SOLVER_JITTER: u64 = 0x0500;
}

pub fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| SedjocoError::InvalidInput(format!("cannot build thread pool: {}", e)))
}

/// Fresh standard-Gaussian square mixing matrices, one per dataset.
pub fn random_mixing(k: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
    (0..m)
        .map(|_| DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Aligns each dataset's rows independently against its own mixing matrix.
/// Interference is a per-dataset quantity, so both separators are scored
/// this way: the single-dataset method carries no shared source ordering at
/// all, and the joint method's ordering across datasets stops being
/// identifiable whenever the between-set correlation vanishes.
pub fn align_per_dataset(sol: &SolutionSet, mixing: &[DMatrix<f64>]) -> Result<SolutionSet> {
    let (k, m) = (sol.dims().k, sol.dims().m);
    let mut sets = Vec::with_capacity(m);
    for mm in 0..m {
        let single = SolutionSet::new(k, 1, vec![sol.b(mm).clone()])?;
        let aligned = align_solution(&single, &mixing[mm..mm + 1])?;
        sets.push(aligned.b(0).clone());
    }
    SolutionSet::new(k, m, sets)
}

/// Interference reports of the two competing separators over one sweep
/// point, plus the count of trials each separator failed to converge on.
pub struct MethodReports {
    pub extended: IsrReport,
    pub per_set: IsrReport,
    pub failed_extended: usize,
    pub failed_per_set: usize,
}

struct TrialOutput {
    extended: Option<IsrReport>,
    per_set: Option<IsrReport>,
}

fn is_nonconvergence(e: &SedjocoError) -> bool {
    matches!(e, SedjocoError::NonConvergence { .. })
}

/// Runs `n_trials` independent separation trials: sample sources, mix with a
/// fresh random mixing, separate jointly and per dataset, and accumulate
/// interference ratios for both. `sample` draws one realization of the
/// sources from the trial's generator. Trials run on the pool; the fold is
/// serial in trial order.
#[allow(clippy::too_many_arguments)]
pub fn run_isr_trials<F>(
    cov: &ScvCovarianceSet,
    n_trials: usize,
    master: u64,
    stream: u64,
    opts: &SolverOptions,
    multistart: Option<usize>,
    pool: &rayon::ThreadPool,
    sample: F,
) -> Result<MethodReports>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>> + Sync,
{
    let dims = cov.dims();
    let (k, m) = (dims.k, dims.m);
    let outputs: Vec<TrialOutput> = pool.install(|| {
        (0..n_trials as u64)
            .into_par_iter()
            .map(|trial| -> Result<TrialOutput> {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, stream, trial));
                let sources = sample(&mut rng)?;
                let mixing = random_mixing(k, m, &mut rng);
                let data = mix(sources, mixing)?;
                let a = data.mixing().expect("mix retains the mixing matrices");
                let trial_opts = SolverOptions {
                    seed: derive_seed(master, streams::SOLVER_JITTER ^ stream, trial),
                    ..opts.clone()
                };
                let extended = match separate_ml(&data, cov, &trial_opts, multistart) {
                    Ok(out) => {
                        let aligned = align_per_dataset(&out.solution, a)?;
                        let mut r = IsrReport::new(k, m)?;
                        isr_accumulate(&aligned, a, cov, &mut r)?;
                        Some(r)
                    }
                    Err(e) if is_nonconvergence(&e) => {
                        log::warn!("joint separation did not converge on trial {}: {}", trial, e);
                        None
                    }
                    Err(e) => return Err(e),
                };
                let per_set = match separate_per_set(&data, cov, &trial_opts) {
                    Ok(sol) => {
                        let aligned = align_per_dataset(&sol, a)?;
                        let mut r = IsrReport::new(k, m)?;
                        isr_accumulate(&aligned, a, cov, &mut r)?;
                        Some(r)
                    }
                    Err(e) if is_nonconvergence(&e) => {
                        log::warn!(
                            "per-dataset separation did not converge on trial {}: {}",
                            trial,
                            e
                        );
                        None
                    }
                    Err(e) => return Err(e),
                };
                Ok(TrialOutput { extended, per_set })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut reports = MethodReports {
        extended: IsrReport::new(k, m)?,
        per_set: IsrReport::new(k, m)?,
        failed_extended: 0,
        failed_per_set: 0,
    };
    for out in outputs {
        match out.extended {
            Some(r) => reports.extended = reports.extended.merge(&r)?,
            None => reports.failed_extended += 1,
        }
        match out.per_set {
            Some(r) => reports.per_set = reports.per_set.merge(&r)?,
            None => reports.failed_per_set += 1,
        }
    }
    if reports.extended.n_trials() == 0 || reports.per_set.n_trials() == 0 {
        return Err(SedjocoError::NonConvergence {
            message: "every trial of a sweep point failed to converge".into(),
            trace: None,
        });
    }
    Ok(reports)
}

/// Appends per-entry rows `<prefix>,<method>,m,k,l,isr_db,crlb_db` for one
/// method's report against the bound.
pub fn push_isr_rows(
    out: &mut String,
    prefix: &str,
    method: &str,
    report: &IsrReport,
    crlb: &sedjoco::CrlbReport,
) {
    for mm in 0..report.m() {
        for kk in 0..report.k() {
            for ll in 0..report.k() {
                if kk == ll {
                    continue;
                }
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    prefix,
                    method,
                    mm,
                    kk,
                    ll,
                    format_f64(report.isr_db(mm, kk, ll)),
                    format_f64(crlb.bound_db(mm, kk, ll)),
                ));
            }
        }
    }
}

/// Appends the summary row `<prefix>,<method>,isr_norm_db,crlb_norm_db,
/// n_trials,excluded,failed`.
pub fn push_norm_row(
    out: &mut String,
    prefix: &str,
    method: &str,
    report: &IsrReport,
    crlb: &sedjoco::CrlbReport,
    failed: usize,
) -> Result<()> {
    let norm = sedjoco::isr_norm(report)?;
    out.push_str(&format!(
        "{},{},{},{},{},{},{}\n",
        prefix,
        method,
        format_f64(10.0 * norm.log10()),
        format_f64(10.0 * crlb.bound_norm().log10()),
        report.n_trials(),
        report.excluded(),
        failed,
    ));
    Ok(())
}
