//! Gaussian multi-dataset source model: analytic covariance families for
//! coupled sources, sampling and mixing of realizations, target-matrix
//! construction from observations, and the end-to-end maximum-likelihood
//! separation pipeline that feeds the joint solver.

pub mod experiment2;
pub mod experiment3;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::core::{
    all_permutations, build_augmented_targets, check_existence, checked_inverse, default_pd_tol,
    log_likelihood_core, permute_solution, ProblemDims, ProblemInstance, SolutionSet,
};
use crate::error::{Result, SedjocoError};
use crate::solvers::{
    ascent_sweeps, newton_solve, per_set_initial, renormalize_start, standard_sedjoco_solve,
    ConvergenceTrace, InitStrategy, SolverOptions,
};

/// Relative tolerance for mirrored covariance blocks supplied to
/// [`ScvCovarianceSet::new`]; blocks within this distance of each other's
/// transpose are averaged into an exact mirror pair.
const MIRROR_RTOL: f64 = 1e-8;

/// Joint covariance family of `K` coupled sources observed across `M`
/// datasets.
///
/// Source `k`'s realizations in all datasets form one vector of length `M*T`
/// whose covariance is stored as `T x T` blocks: `c_block(k, m1, m2)` is the
/// covariance between the source's samples in dataset `m1` and in dataset
/// `m2`. The family is what a separator is allowed to know in advance; it
/// also determines the attainable separation quality.
///
/// Derived quantities (blocks of each stacked inverse, stacked Cholesky
/// factors for sampling, within-set inverses for single-dataset separation)
/// are computed on first use and cached, so a single instance can be shared
/// across many trials, including from several threads.
#[derive(Debug)]
pub struct ScvCovarianceSet {
    k: usize,
    m: usize,
    t: usize,
    /// Blocks at flat index `(k*M + m1)*M + m2`, each `T x T`.
    c: Vec<DMatrix<f64>>,
    /// Blocks of each stacked inverse, same indexing as `c`; `Err` holds the
    /// source index whose stacked matrix failed to factor.
    inverse_blocks: OnceLock<std::result::Result<Vec<DMatrix<f64>>, usize>>,
    /// Lower Cholesky factor of each stacked matrix, indexed by source.
    factors: OnceLock<std::result::Result<Vec<DMatrix<f64>>, usize>>,
    /// Inverses of the within-set diagonal blocks, at flat index `k*M + m`.
    within_inverses: OnceLock<std::result::Result<Vec<DMatrix<f64>>, usize>>,
}

impl ScvCovarianceSet {
    /// Builds the family from `K*M*M` blocks of size `T x T`, listed
    /// source-major then dataset-pair-major: index `(k*M + m1)*M + m2` holds
    /// the covariance between dataset `m1` and dataset `m2` samples of source
    /// `k`. Mirrored blocks must agree with each other's transpose to
    /// `1e-8` relative; they are then replaced by exact transposes so all
    /// downstream algebra sees perfect pair symmetry.
    pub fn new(k: usize, m: usize, t: usize, mut blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if k == 0 || m == 0 || t == 0 {
            return Err(SedjocoError::InvalidInput(format!(
                "covariance family needs K, M, T >= 1, got K={}, M={}, T={}",
                k, m, t
            )));
        }
        if blocks.len() != k * m * m {
            return Err(SedjocoError::DimensionMismatch(format!(
                "expected {} covariance blocks for K={}, M={}, got {}",
                k * m * m,
                k,
                m,
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.nrows() != t || b.ncols() != t {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "covariance block {} is {}x{}, expected {}x{}",
                    i,
                    b.nrows(),
                    b.ncols(),
                    t,
                    t
                )));
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(SedjocoError::NonFinite(format!("covariance block {}", i)));
            }
        }
        let idx = |kk: usize, m1: usize, m2: usize| (kk * m + m1) * m + m2;
        for kk in 0..k {
            for m1 in 0..m {
                for m2 in m1..m {
                    let a = &blocks[idx(kk, m1, m2)];
                    let b = &blocks[idx(kk, m2, m1)];
                    let diff = (a - b.transpose()).norm();
                    let scale = 1.0 + a.norm().max(b.norm());
                    if diff > MIRROR_RTOL * scale {
                        return Err(SedjocoError::InvalidInput(format!(
                            "covariance blocks ({},{},{}) and ({},{},{}) are not \
                             transposes of each other (deviation {:.3e})",
                            kk, m1, m2, kk, m2, m1, diff
                        )));
                    }
                    let avg = (a + b.transpose()) * 0.5;
                    blocks[idx(kk, m2, m1)] = avg.transpose();
                    blocks[idx(kk, m1, m2)] = avg;
                }
            }
        }
        Ok(ScvCovarianceSet {
            k,
            m,
            t,
            c: blocks,
            inverse_blocks: OnceLock::new(),
            factors: OnceLock::new(),
            within_inverses: OnceLock::new(),
        })
    }

    pub fn dims(&self) -> ProblemDims {
        ProblemDims::with_samples(self.k, self.m, self.t)
    }

    pub fn sample_count(&self) -> usize {
        self.t
    }

    fn block_index(&self, k: usize, m1: usize, m2: usize) -> usize {
        (k * self.m + m1) * self.m + m2
    }

    /// Covariance block between dataset `m1` and dataset `m2` samples of
    /// source `k`.
    pub fn c_block(&self, k: usize, m1: usize, m2: usize) -> &DMatrix<f64> {
        &self.c[self.block_index(k, m1, m2)]
    }

    /// Assembles the full `MT x MT` covariance of source `k`.
    pub fn stacked(&self, k: usize) -> DMatrix<f64> {
        let (m, t) = (self.m, self.t);
        let mut out = DMatrix::zeros(m * t, m * t);
        for m1 in 0..m {
            for m2 in 0..m {
                out.view_mut((m1 * t, m2 * t), (t, t))
                    .copy_from(self.c_block(k, m1, m2));
            }
        }
        out
    }

    /// Energy of source `k` within dataset `m`: the trace of the within-set
    /// covariance block.
    pub fn trace_within(&self, k: usize, m: usize) -> f64 {
        self.c_block(k, m, m).trace()
    }

    fn not_pd_error(&self, k: usize) -> SedjocoError {
        let stacked = self.stacked(k);
        let sym = (&stacked + stacked.transpose()) * 0.5;
        let lambda_min = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        SedjocoError::NotPositiveDefinite {
            index: k,
            lambda_min,
        }
    }

    fn compute_inverse_blocks(&self) -> std::result::Result<Vec<DMatrix<f64>>, usize> {
        let (k, m, t) = (self.k, self.m, self.t);
        let mut out = Vec::with_capacity(k * m * m);
        for kk in 0..k {
            let chol = Cholesky::new(self.stacked(kk)).ok_or(kk)?;
            let inv = chol.inverse();
            let sym = (&inv + inv.transpose()) * 0.5;
            for m1 in 0..m {
                for m2 in 0..m {
                    out.push(sym.view((m1 * t, m2 * t), (t, t)).clone_owned());
                }
            }
        }
        Ok(out)
    }

    fn inverse_blocks(&self) -> Result<&[DMatrix<f64>]> {
        match self
            .inverse_blocks
            .get_or_init(|| self.compute_inverse_blocks())
        {
            Ok(v) => Ok(v),
            Err(k) => Err(self.not_pd_error(*k)),
        }
    }

    /// Block `(m1, m2)` of the inverse of source `k`'s stacked covariance.
    /// All blocks of one source come from a single symmetric factorization of
    /// the stacked matrix, computed on first call.
    pub fn p_block(&self, k: usize, m1: usize, m2: usize) -> Result<&DMatrix<f64>> {
        let blocks = self.inverse_blocks()?;
        Ok(&blocks[self.block_index(k, m1, m2)])
    }

    /// Lower Cholesky factor of source `k`'s stacked covariance, used to draw
    /// realizations directly from the family.
    pub fn stacked_factor(&self, k: usize) -> Result<&DMatrix<f64>> {
        let factors = self.factors.get_or_init(|| {
            (0..self.k)
                .map(|kk| {
                    Cholesky::new(self.stacked(kk))
                        .map(|c| c.l())
                        .ok_or(kk)
                })
                .collect()
        });
        match factors {
            Ok(v) => Ok(&v[k]),
            Err(kk) => Err(self.not_pd_error(*kk)),
        }
    }

    /// Inverse of the within-set covariance block of source `k` in dataset
    /// `m`, the quantity a single-dataset separator works from.
    pub fn within_inverse(&self, k: usize, m: usize) -> Result<&DMatrix<f64>> {
        let inverses = self.within_inverses.get_or_init(|| {
            let mut out = Vec::with_capacity(self.k * self.m);
            for kk in 0..self.k {
                for mm in 0..self.m {
                    let block = self.c_block(kk, mm, mm).clone();
                    let chol = Cholesky::new(block).ok_or(kk)?;
                    let inv = chol.inverse();
                    out.push((&inv + inv.transpose()) * 0.5);
                }
            }
            Ok(out)
        });
        match inverses {
            Ok(v) => Ok(&v[k * self.m + m]),
            Err(kk) => Err(self.not_pd_error(*kk)),
        }
    }

    /// Forces the factorization of every stacked covariance, verifying
    /// positive definiteness.
    pub fn check_pd(&self) -> Result<()> {
        self.inverse_blocks().map(|_| ())
    }

    /// Pairs of sources whose covariance families coincide to `1e-12`
    /// relative. Such sources are statistically interchangeable, so no
    /// separator can tell them apart and the attainable-accuracy bound
    /// between them is infinite.
    pub fn identical_source_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k1 in 0..self.k {
            for k2 in k1 + 1..self.k {
                let same = (0..self.m).all(|m1| {
                    (0..self.m).all(|m2| {
                        let a = self.c_block(k1, m1, m2);
                        let b = self.c_block(k2, m1, m2);
                        let scale = a.norm().max(b.norm()).max(1.0);
                        (a - b).norm() <= 1e-12 * scale
                    })
                });
                if same {
                    out.push((k1, k2));
                }
            }
        }
        out
    }
}

/// Observed mixtures for each dataset, with the generating sources and
/// mixing matrices retained when the data was simulated.
#[derive(Clone, Debug)]
pub struct DatasetCollection {
    x: Vec<DMatrix<f64>>,
    a: Option<Vec<DMatrix<f64>>>,
    s: Option<Vec<DMatrix<f64>>>,
}

impl DatasetCollection {
    /// Wraps recorded observations: one `K x T` matrix per dataset, rows
    /// indexed by sensor, columns by sample.
    pub fn from_observations(x: Vec<DMatrix<f64>>) -> Result<Self> {
        validate_signal_family(&x, "observation")?;
        Ok(DatasetCollection {
            x,
            a: None,
            s: None,
        })
    }

    /// Number of datasets.
    pub fn m(&self) -> usize {
        self.x.len()
    }

    /// Number of signals per dataset.
    pub fn k(&self) -> usize {
        self.x[0].nrows()
    }

    /// Samples per signal.
    pub fn t(&self) -> usize {
        self.x[0].ncols()
    }

    /// Observations of dataset `m`.
    pub fn x(&self, m: usize) -> &DMatrix<f64> {
        &self.x[m]
    }

    /// Ground-truth mixing matrices, when simulated.
    pub fn mixing(&self) -> Option<&[DMatrix<f64>]> {
        self.a.as_deref()
    }

    /// Ground-truth sources, when simulated.
    pub fn sources(&self) -> Option<&[DMatrix<f64>]> {
        self.s.as_deref()
    }
}

fn validate_signal_family(x: &[DMatrix<f64>], what: &str) -> Result<()> {
    if x.is_empty() {
        return Err(SedjocoError::InvalidInput(format!(
            "need at least one {} matrix",
            what
        )));
    }
    let (k, t) = (x[0].nrows(), x[0].ncols());
    if k == 0 || t == 0 {
        return Err(SedjocoError::InvalidInput(format!(
            "{} matrices must be nonempty",
            what
        )));
    }
    for (m, xm) in x.iter().enumerate() {
        if xm.nrows() != k || xm.ncols() != t {
            return Err(SedjocoError::DimensionMismatch(format!(
                "{} matrix {} is {}x{}, expected {}x{}",
                what,
                m,
                xm.nrows(),
                xm.ncols(),
                k,
                t
            )));
        }
        if xm.iter().any(|v| !v.is_finite()) {
            return Err(SedjocoError::NonFinite(format!("{} matrix {}", what, m)));
        }
    }
    Ok(())
}

/// Applies a mixing matrix to each dataset's sources: `X[m] = A[m] * S[m]`.
/// Sources and mixing matrices are retained as ground truth for later
/// evaluation. Each mixing matrix must be square and nonsingular; its
/// conditioning is logged at debug level.
pub fn mix(sources: Vec<DMatrix<f64>>, mixing: Vec<DMatrix<f64>>) -> Result<DatasetCollection> {
    validate_signal_family(&sources, "source")?;
    if mixing.len() != sources.len() {
        return Err(SedjocoError::DimensionMismatch(format!(
            "{} source matrices but {} mixing matrices",
            sources.len(),
            mixing.len()
        )));
    }
    let k = sources[0].nrows();
    for (m, a) in mixing.iter().enumerate() {
        if a.nrows() != k || a.ncols() != k {
            return Err(SedjocoError::DimensionMismatch(format!(
                "mixing matrix {} is {}x{}, expected {}x{}",
                m,
                a.nrows(),
                a.ncols(),
                k,
                k
            )));
        }
        match checked_inverse(a) {
            Some(inv) => log::debug!(
                "mixing matrix {} condition estimate {:.3e}",
                m,
                inv.cond_estimate
            ),
            None => {
                return Err(SedjocoError::Singular(format!("mixing matrix {}", m)));
            }
        }
    }
    let x = mixing
        .iter()
        .zip(sources.iter())
        .map(|(a, s)| a * s)
        .collect();
    Ok(DatasetCollection {
        x,
        a: Some(mixing),
        s: Some(sources),
    })
}

/// Draws one realization of every source directly from its stacked
/// covariance: each source's `M*T` vector is its Cholesky factor times a
/// standard normal vector. Returns the per-dataset source matrices `S[m]`
/// (`K x T`). Sources are drawn in index order, so a seeded generator
/// reproduces realizations exactly.
pub fn sample_sources_gaussian<R: Rng + ?Sized>(
    cov: &ScvCovarianceSet,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    let dims = cov.dims();
    let (k, m, t) = (dims.k, dims.m, cov.sample_count());
    let mut out = vec![DMatrix::zeros(k, t); m];
    for kk in 0..k {
        let factor = cov.stacked_factor(kk)?;
        let z = nalgebra::DVector::from_fn(m * t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stacked = factor * z;
        for mm in 0..m {
            for n in 0..t {
                out[mm][(kk, n)] = stacked[mm * t + n];
            }
        }
    }
    Ok(out)
}

/// Builds the solver's target matrices from observations and the known
/// covariance family: `Q[k][m1][m2] = (1/T) * X[m1] * P[k][m1][m2] * X[m2]^T`
/// with `P` the inverse-covariance blocks. Mirrored targets are exact
/// transposes by construction.
pub fn build_target_matrices(
    data: &DatasetCollection,
    cov: &ScvCovarianceSet,
) -> Result<ProblemInstance> {
    let (k, m, t) = (data.k(), data.m(), data.t());
    let dims = cov.dims();
    if dims.k != k || dims.m != m || cov.sample_count() != t {
        return Err(SedjocoError::DimensionMismatch(format!(
            "data is K={}, M={}, T={} but covariance family is K={}, M={}, T={}",
            k,
            m,
            t,
            dims.k,
            dims.m,
            cov.sample_count()
        )));
    }
    let scale = 1.0 / t as f64;
    let mut targets = vec![DMatrix::zeros(k, k); k * m * m];
    let idx = |kk: usize, m1: usize, m2: usize| (kk * m + m1) * m + m2;
    for kk in 0..k {
        for m1 in 0..m {
            for m2 in m1..m {
                let p = cov.p_block(kk, m1, m2)?;
                let q = (data.x(m1) * p) * data.x(m2).transpose() * scale;
                if m1 == m2 {
                    let sym = (&q + q.transpose()) * 0.5;
                    targets[idx(kk, m1, m2)] = sym;
                } else {
                    targets[idx(kk, m2, m1)] = q.transpose();
                    targets[idx(kk, m1, m2)] = q;
                }
            }
        }
    }
    Ok(ProblemInstance::new(k, m, targets)?.with_sample_count(t))
}

/// Result of a maximum-likelihood separation run.
#[derive(Clone, Debug)]
pub struct SeparationOutcome {
    /// Estimated separation matrices, one per dataset.
    pub solution: SolutionSet,
    /// Trace of the winning solver run.
    pub trace: ConvergenceTrace,
    /// Data-dependent part of the log-likelihood at the solution, the
    /// quantity maximized across starts.
    pub log_likelihood: f64,
}

/// Maximum-likelihood separation across all datasets jointly.
///
/// Builds the target matrices from the observations and the known covariance
/// family, then solves the joint system by the Newton iteration, starting
/// from stacked single-dataset solutions. The stationary equations have many
/// solutions, so the solve is optionally repeated from row-permuted copies of
/// that starting point and the convergent candidate with the highest
/// likelihood wins.
///
/// `multistart` is the number of additional permuted starts. When `None`, all
/// `K! - 1` of them are used for `K <= 4` and none otherwise; values beyond
/// `K! - 1` are clamped.
///
/// Fails with a non-convergence error carrying the best trace when no start
/// converges.
pub fn separate_ml(
    data: &DatasetCollection,
    cov: &ScvCovarianceSet,
    opts: &SolverOptions,
    multistart: Option<usize>,
) -> Result<SeparationOutcome> {
    let p = build_target_matrices(data, cov)?;
    let a = build_augmented_targets(&p);
    let existence = check_existence(&a, default_pd_tol(&a))?;
    if !existence.is_pd_all {
        let (worst, &lambda_min) = existence
            .lambda_min
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .expect("at least one source");
        return Err(SedjocoError::NotPositiveDefinite {
            index: worst,
            lambda_min,
        });
    }
    for (k1, k2) in cov.identical_source_pairs() {
        log::warn!(
            "covariance families of sources {} and {} coincide; they are not \
             identifiable and any separation between them is arbitrary",
            k1,
            k2
        );
    }
    let k = p.dims().k;
    let base = per_set_initial(&p)?;
    let max_extra = factorial_capped(k).saturating_sub(1);
    let extra = multistart
        .unwrap_or(if k <= 4 { max_extra } else { 0 })
        .min(max_extra);
    let mut starts = vec![base.clone()];
    if extra > 0 {
        for perm in all_permutations(k).into_iter().skip(1).take(extra) {
            starts.push(renormalize_start(&p, &permute_solution(&base, &perm)?));
        }
    }

    let mut best: Option<SeparationOutcome> = None;
    let mut best_failure: Option<(f64, ConvergenceTrace)> = None;
    for mut start in starts {
        ascent_sweeps(&p, &a, &mut start, 80, 1e-8);
        let run_opts = SolverOptions {
            init: InitStrategy::UserSupplied(start),
            ..opts.clone()
        };
        match newton_solve(&p, &run_opts) {
            Ok((solution, trace)) if trace.converged => {
                let log_likelihood = log_likelihood_core(&solution, &a)?;
                let better = best
                    .as_ref()
                    .map_or(true, |b| log_likelihood > b.log_likelihood);
                if better {
                    best = Some(SeparationOutcome {
                        solution,
                        trace,
                        log_likelihood,
                    });
                }
            }
            Ok((_, trace)) => {
                record_failure(&mut best_failure, trace);
            }
            Err(SedjocoError::NonConvergence { trace, .. }) => {
                if let Some(trace) = trace {
                    record_failure(&mut best_failure, *trace);
                }
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(outcome) => Ok(outcome),
        None => Err(SedjocoError::NonConvergence {
            message: "no separation start converged".into(),
            trace: best_failure.map(|(_, trace)| Box::new(trace)),
        }),
    }
}

fn record_failure(best: &mut Option<(f64, ConvergenceTrace)>, trace: ConvergenceTrace) {
    let res = trace.last_residual();
    if best.as_ref().map_or(true, |(r, _)| res < *r) {
        *best = Some((res, trace));
    }
}

/// `k!`, saturating instead of overflowing for absurd `k`.
fn factorial_capped(k: usize) -> usize {
    let mut out: usize = 1;
    for i in 2..=k {
        out = out.saturating_mul(i);
    }
    out
}

/// Separates each dataset on its own, ignoring correlations between
/// datasets: the single-dataset system is solved per dataset with targets
/// built from the within-set covariance blocks only. The concatenated
/// estimates carry no cross-dataset pairing information, so sources that
/// look alike within every dataset come out in arbitrary order.
pub fn separate_per_set(
    data: &DatasetCollection,
    cov: &ScvCovarianceSet,
    opts: &SolverOptions,
) -> Result<SolutionSet> {
    let (k, m, t) = (data.k(), data.m(), data.t());
    let dims = cov.dims();
    if dims.k != k || dims.m != m || cov.sample_count() != t {
        return Err(SedjocoError::DimensionMismatch(format!(
            "data is K={}, M={}, T={} but covariance family is K={}, M={}, T={}",
            k,
            m,
            t,
            dims.k,
            dims.m,
            cov.sample_count()
        )));
    }
    let scale = 1.0 / t as f64;
    let mut sets = Vec::with_capacity(m);
    for mm in 0..m {
        let targets: Vec<DMatrix<f64>> = (0..k)
            .map(|kk| {
                cov.within_inverse(kk, mm).map(|cinv| {
                    let q = (data.x(mm) * cinv) * data.x(mm).transpose() * scale;
                    (&q + q.transpose()) * 0.5
                })
            })
            .collect::<Result<_>>()?;
        let run_opts = SolverOptions {
            init: InitStrategy::Identity,
            ..opts.clone()
        };
        let (sol, trace) = standard_sedjoco_solve(&targets, &run_opts)?;
        if !trace.converged {
            return Err(SedjocoError::NonConvergence {
                message: format!("single-dataset separation of dataset {} stalled", mm),
                trace: Some(Box::new(trace)),
            });
        }
        sets.push(sol.b(0).clone());
    }
    SolutionSet::new(k, m, sets)
}

#[derive(Serialize)]
struct RawHeader<'a> {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    dtype: &'a str,
    order: &'a str,
}

/// Writes the observations as raw little-endian 64-bit floats, one dataset
/// after another, each in row-major order, with a JSON header sidecar
/// recording the dimensions and layout.
pub fn dump_datasets(data: &DatasetCollection, raw_path: &Path, header_path: &Path) -> Result<()> {
    let (k, m, t) = (data.k(), data.m(), data.t());
    let mut w = BufWriter::new(File::create(raw_path)?);
    for mm in 0..m {
        let x = data.x(mm);
        for row in 0..k {
            for col in 0..t {
                w.write_all(&x[(row, col)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    let header = RawHeader {
        k,
        m,
        t,
        dtype: "f64-le",
        order: "dataset-major,row-major",
    };
    std::fs::write(header_path, serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}
