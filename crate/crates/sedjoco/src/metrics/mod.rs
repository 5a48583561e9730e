//! Separation-quality evaluation: alignment of estimated solutions against
//! ground truth, empirical interference-to-source ratios, and the
//! attainable-accuracy bound induced by a known covariance family.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::core::serialize::{format_f64, to_json_string};
use crate::core::{all_permutations, permute_solution, SolutionSet};
use crate::error::{Result, SedjocoError};
use crate::model::ScvCovarianceSet;

/// Reciprocal-condition threshold below which the bound's per-pair system is
/// declared singular and the bound infinite.
const SINGULAR_RCOND: f64 = 1e-12;

/// Running mean of empirical interference-to-source ratios over trials.
///
/// Entry `(m, k, l)` with `k != l` is the average leakage of source `l` into
/// the estimate of source `k` in dataset `m`, as a power ratio. Reports over
/// disjoint trial sets combine with [`IsrReport::merge`]; folding single-trial
/// reports in trial order reproduces serial accumulation bit for bit, which
/// keeps parallel runs deterministic.
#[derive(Clone, Debug)]
pub struct IsrReport {
    k: usize,
    m: usize,
    /// Per-entry sums over included trials, at flat index `(m*K + k)*K + l`;
    /// diagonal slots stay zero.
    sums: Vec<f64>,
    n_trials: usize,
    excluded: usize,
}

impl IsrReport {
    pub fn new(k: usize, m: usize) -> Result<Self> {
        if k < 2 || m == 0 {
            return Err(SedjocoError::InvalidInput(format!(
                "interference ratios need K >= 2 and M >= 1, got K={}, M={}",
                k, m
            )));
        }
        Ok(IsrReport {
            k,
            m,
            sums: vec![0.0; m * k * k],
            n_trials: 0,
            excluded: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Trials included in the mean.
    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    /// Trials rejected because a diagonal entry of some mixed estimate was
    /// exactly zero.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    fn index(&self, m: usize, k: usize, l: usize) -> usize {
        (m * self.k + k) * self.k + l
    }

    /// Mean ratio for dataset `m`, estimated source `k`, interferer `l`
    /// (linear scale).
    pub fn isr(&self, m: usize, k: usize, l: usize) -> f64 {
        assert_ne!(k, l, "interference ratios are defined for k != l");
        self.sums[self.index(m, k, l)] / self.n_trials as f64
    }

    /// Mean ratio in decibels.
    pub fn isr_db(&self, m: usize, k: usize, l: usize) -> f64 {
        10.0 * self.isr(m, k, l).log10()
    }

    /// Combines two reports over disjoint trial sets; sums and counts add,
    /// so the result is the weighted mean of the inputs.
    pub fn merge(&self, other: &IsrReport) -> Result<IsrReport> {
        if self.k != other.k || self.m != other.m {
            return Err(SedjocoError::DimensionMismatch(format!(
                "cannot merge reports over K={}, M={} and K={}, M={}",
                self.k, self.m, other.k, other.m
            )));
        }
        let mut out = self.clone();
        for (s, o) in out.sums.iter_mut().zip(other.sums.iter()) {
            *s += o;
        }
        out.n_trials += other.n_trials;
        out.excluded += other.excluded;
        Ok(out)
    }
}

/// Grand mean of the ratios over all datasets and ordered source pairs:
/// the per-entry means summed and divided by `M*K*(K-1)`.
pub fn isr_norm(report: &IsrReport) -> Result<f64> {
    if report.n_trials == 0 {
        return Err(SedjocoError::InvalidInput(
            "interference report holds no trials".into(),
        ));
    }
    let (k, m) = (report.k, report.m);
    let mut total = 0.0;
    for mm in 0..m {
        for kk in 0..k {
            for ll in 0..k {
                if kk != ll {
                    total += report.isr(mm, kk, ll);
                }
            }
        }
    }
    Ok(total / (m * k * (k - 1)) as f64)
}

/// Resolves the row-ordering ambiguity of an estimated solution against the
/// ground-truth mixing. The source index is global across datasets, so one
/// shared row permutation is chosen: the one maximizing the sum over
/// datasets and sources of `log |diagonal of (permuted B̂[m]) * A[m]|`,
/// found by exhaustive search. Row signs are left untouched (the ratios are
/// sign-invariant). If every permutation leaves a zero on some diagonal, the
/// best effort is returned with a warning.
pub fn align_solution(bhat: &SolutionSet, mixing: &[DMatrix<f64>]) -> Result<SolutionSet> {
    let (k, m) = (bhat.dims().k, bhat.dims().m);
    validate_mixing(mixing, k, m)?;
    let products: Vec<DMatrix<f64>> = (0..m).map(|mm| bhat.b(mm) * &mixing[mm]).collect();
    let mut best_perm: Option<Vec<usize>> = None;
    let mut best_score = f64::NEG_INFINITY;
    for perm in all_permutations(k) {
        let mut score = 0.0;
        for g in &products {
            for kk in 0..k {
                score += g[(perm[kk], kk)].abs().ln();
            }
        }
        if best_perm.is_none() || score > best_score {
            best_score = score;
            best_perm = Some(perm);
        }
    }
    let perm = best_perm.expect("K >= 1 yields at least the identity permutation");
    if best_score == f64::NEG_INFINITY {
        log::warn!(
            "every row permutation leaves a zero diagonal entry in some \
             dataset; returning a best-effort alignment"
        );
    }
    permute_solution(bhat, &perm)
}

fn validate_mixing(mixing: &[DMatrix<f64>], k: usize, m: usize) -> Result<()> {
    if mixing.len() != m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "solution covers {} datasets but {} mixing matrices were given",
            m,
            mixing.len()
        )));
    }
    for (mm, a) in mixing.iter().enumerate() {
        if a.nrows() != k || a.ncols() != k {
            return Err(SedjocoError::DimensionMismatch(format!(
                "mixing matrix {} is {}x{}, expected {}x{}",
                mm,
                a.nrows(),
                a.ncols(),
                k,
                k
            )));
        }
    }
    Ok(())
}

/// Adds one trial to a running report. For each dataset the mixed estimate
/// `G = B̂[m] * A[m]` contributes `|G_kl|^2 / |G_kk|^2` weighted by the
/// energy ratio of the analytic within-set covariance traces; the weighting
/// makes the ratio compare reconstructed source power rather than raw matrix
/// entries, and it cancels any diagonal rescaling of `B̂[m]`. The solution
/// should be aligned first. A trial in which some `G_kk` is exactly zero is
/// excluded and counted instead of contaminating the mean.
pub fn isr_accumulate(
    bhat_aligned: &SolutionSet,
    mixing: &[DMatrix<f64>],
    cov: &ScvCovarianceSet,
    acc: &mut IsrReport,
) -> Result<()> {
    let (k, m) = (bhat_aligned.dims().k, bhat_aligned.dims().m);
    validate_mixing(mixing, k, m)?;
    if acc.k != k || acc.m != m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "report is over K={}, M={} but solution is K={}, M={}",
            acc.k, acc.m, k, m
        )));
    }
    let dims = cov.dims();
    if dims.k != k || dims.m != m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "covariance family is K={}, M={} but solution is K={}, M={}",
            dims.k, dims.m, k, m
        )));
    }
    let products: Vec<DMatrix<f64>> = (0..m)
        .map(|mm| bhat_aligned.b(mm) * &mixing[mm])
        .collect();
    for g in &products {
        for kk in 0..k {
            if g[(kk, kk)] == 0.0 {
                acc.excluded += 1;
                log::warn!(
                    "trial excluded from the interference report: a mixed \
                     estimate has an exactly zero diagonal entry"
                );
                return Ok(());
            }
        }
    }
    let mut contributions = vec![0.0; m * k * k];
    for (mm, g) in products.iter().enumerate() {
        for kk in 0..k {
            let diag = g[(kk, kk)] * g[(kk, kk)];
            for ll in 0..k {
                if ll == kk {
                    continue;
                }
                let ratio = (g[(kk, ll)] * g[(kk, ll)]) / diag;
                let energy = cov.trace_within(ll, mm) / cov.trace_within(kk, mm);
                contributions[(mm * k + kk) * k + ll] = ratio * energy;
            }
        }
    }
    for (s, c) in acc.sums.iter_mut().zip(contributions.iter()) {
        *s += c;
    }
    acc.n_trials += 1;
    Ok(())
}

/// Attainable-accuracy lower bound on the mean interference-to-source
/// ratios, one entry per dataset and ordered source pair. Infinite entries
/// mark pairs that no separator can tell apart.
#[derive(Clone, Debug)]
pub struct CrlbReport {
    k: usize,
    m: usize,
    /// Flat index `(m*K + k)*K + l`; diagonal slots stay zero.
    bound: Vec<f64>,
    /// Ordered source pairs whose bound is infinite (all datasets at once).
    flagged: Vec<(usize, usize)>,
}

impl CrlbReport {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Bound for dataset `m`, estimated source `k`, interferer `l` (linear
    /// scale; may be infinite).
    pub fn bound(&self, m: usize, k: usize, l: usize) -> f64 {
        assert_ne!(k, l, "the bound is defined for k != l");
        self.bound[(m * self.k + k) * self.k + l]
    }

    /// Bound in decibels.
    pub fn bound_db(&self, m: usize, k: usize, l: usize) -> f64 {
        10.0 * self.bound(m, k, l).log10()
    }

    /// Ordered source pairs `(k, l)` whose bound is infinite.
    pub fn flagged_infinite(&self) -> &[(usize, usize)] {
        &self.flagged
    }

    /// Grand mean over all datasets and ordered pairs, the bound analog of
    /// [`isr_norm`]; infinite entries make it infinite.
    pub fn bound_norm(&self) -> f64 {
        let (k, m) = (self.k, self.m);
        let mut total = 0.0;
        for mm in 0..m {
            for kk in 0..k {
                for ll in 0..k {
                    if kk != ll {
                        total += self.bound(mm, kk, ll);
                    }
                }
            }
        }
        total / (m * k * (k - 1)) as f64
    }
}

/// Smallest and largest singular values of a matrix.
fn singular_extrema(mat: &DMatrix<f64>) -> (f64, f64) {
    let svd = mat.clone().svd(false, false);
    let max = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let min = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    (min, max)
}

/// Computes the accuracy bound of a covariance family.
///
/// For each ordered source pair `(k, l)` an `M x M` coupling matrix is
/// formed, entry `(m, n)` being `(1/T)` times the trace of
/// `P[k][n][m] * C[l][m][n]` with `P` the inverse-covariance blocks of
/// source `k`. The bound for dataset `m` is `(1/T)` times diagonal entry `m`
/// of the inverse of `coupling(k,l) - coupling(l,k)^{-1}`, weighted by the
/// within-set energy ratio of the two sources. A pair whose matrix
/// difference (or inner matrix) is singular at reciprocal condition `1e-12`
/// gets an infinite bound: those sources cannot be distinguished at all.
pub fn icrlb(cov: &ScvCovarianceSet) -> Result<CrlbReport> {
    let dims = cov.dims();
    let (k, m) = (dims.k, dims.m);
    if k < 2 {
        return Err(SedjocoError::InvalidInput(
            "the accuracy bound needs at least two sources".into(),
        ));
    }
    let t = cov.sample_count() as f64;
    cov.check_pd()?;
    let coupling = |kk: usize, ll: usize| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(m, m);
        for mm in 0..m {
            for nn in 0..m {
                // Trace of P[k][n][m] * C[l][m][n] as an elementwise dot
                // with the mirrored block C[l][n][m].
                let p = cov.p_block(kk, nn, mm)?;
                let c = cov.c_block(ll, nn, mm);
                let mut acc = 0.0;
                for (pv, cv) in p.iter().zip(c.iter()) {
                    acc += pv * cv;
                }
                out[(mm, nn)] = acc / t;
            }
        }
        Ok(out)
    };
    let mut bound = vec![0.0; m * k * k];
    let mut flagged = Vec::new();
    for kk in 0..k {
        for ll in 0..k {
            if ll == kk {
                continue;
            }
            let forward = coupling(kk, ll)?;
            let backward = coupling(ll, kk)?;
            let (back_min, back_max) = singular_extrema(&backward);
            let entries: Option<Vec<f64>> = if back_min < SINGULAR_RCOND * back_max {
                None
            } else {
                let backward_inv = backward
                    .clone()
                    .try_inverse()
                    .expect("conditioning was just checked");
                let bracket = &forward - &backward_inv;
                // The difference can cancel to rounding noise even though
                // both couplings are well scaled (that is exactly the
                // indistinguishable case), so the singularity test compares
                // against the size of the operands, not of the bracket.
                let (brk_min, brk_max) = singular_extrema(&bracket);
                let (_, fwd_max) = singular_extrema(&forward);
                let (_, inv_max) = singular_extrema(&backward_inv);
                let reference = brk_max.max(fwd_max).max(inv_max);
                if brk_min < SINGULAR_RCOND * reference {
                    None
                } else {
                    bracket
                        .try_inverse()
                        .map(|inv| (0..m).map(|mm| inv[(mm, mm)] / t).collect())
                }
            };
            match entries {
                Some(diag) => {
                    for (mm, &d) in diag.iter().enumerate() {
                        let energy = cov.trace_within(ll, mm) / cov.trace_within(kk, mm);
                        bound[(mm * k + kk) * k + ll] = d * energy;
                    }
                }
                None => {
                    flagged.push((kk, ll));
                    for mm in 0..m {
                        bound[(mm * k + kk) * k + ll] = f64::INFINITY;
                    }
                }
            }
        }
    }
    if !flagged.is_empty() {
        log::warn!(
            "accuracy bound is infinite for source pairs {:?}: the family \
             does not distinguish them",
            flagged
        );
    }
    Ok(CrlbReport {
        k,
        m,
        bound,
        flagged,
    })
}

/// Renders a report and its bound as CSV: one row per dataset and ordered
/// source pair with the mean ratio (linear and decibel), the matching bound
/// entry (linear), and the trial count. Infinite bounds render as `inf`.
pub fn isr_csv(report: &IsrReport, crlb: &CrlbReport) -> Result<String> {
    if report.k != crlb.k || report.m != crlb.m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "report is over K={}, M={} but bound is K={}, M={}",
            report.k, report.m, crlb.k, crlb.m
        )));
    }
    if report.n_trials == 0 {
        return Err(SedjocoError::InvalidInput(
            "interference report holds no trials".into(),
        ));
    }
    let mut out = String::from("m,k,l,isr,isr_db,crlb,n_trials\n");
    for mm in 0..report.m {
        for kk in 0..report.k {
            for ll in 0..report.k {
                if kk == ll {
                    continue;
                }
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    mm,
                    kk,
                    ll,
                    format_f64(report.isr(mm, kk, ll)),
                    format_f64(report.isr_db(mm, kk, ll)),
                    format_f64(crlb.bound(mm, kk, ll)),
                    report.n_trials
                ));
            }
        }
    }
    Ok(out)
}

fn json_number_or_inf<S>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error>
where
    S: serde::Serializer,
{
    if x.is_finite() {
        s.serialize_f64(*x)
    } else if *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Serialize)]
struct SummaryJson {
    n_trials: usize,
    excluded_trials: usize,
    #[serde(serialize_with = "json_number_or_inf")]
    isr_norm: f64,
    #[serde(serialize_with = "json_number_or_inf")]
    isr_norm_db: f64,
    #[serde(serialize_with = "json_number_or_inf")]
    crlb_norm: f64,
    #[serde(serialize_with = "json_number_or_inf")]
    crlb_norm_db: f64,
}

/// Renders the grand means of a report and its bound as a small JSON
/// document. Infinite values (an unattainable bound, or a perfect zero
/// ratio in decibels) render as the strings `"inf"` / `"-inf"`.
pub fn summary_json(report: &IsrReport, crlb: &CrlbReport) -> Result<String> {
    let isr = isr_norm(report)?;
    let bound = crlb.bound_norm();
    to_json_string(&SummaryJson {
        n_trials: report.n_trials(),
        excluded_trials: report.excluded(),
        isr_norm: isr,
        isr_norm_db: 10.0 * isr.log10(),
        crlb_norm: bound,
        crlb_norm_db: 10.0 * bound.log10(),
    })
}
