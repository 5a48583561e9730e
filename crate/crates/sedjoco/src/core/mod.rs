//! Problem and solution containers for the joint-congruence system, together
//! with residual evaluation, the core log-likelihood, existence checking and
//! row-permutation utilities.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SedjocoError};

pub mod serialize;

/// Smallest |det| accepted before a matrix is treated as singular.
pub(crate) const MIN_ABS_DET: f64 = 1e-300;
/// Largest Frobenius condition estimate accepted before a matrix is treated
/// as singular.
pub(crate) const MAX_COND_ESTIMATE: f64 = 1e12;

/// Problem sizes: `k` sources per dataset, `m` datasets, and the sample
/// count `t` for problems derived from observed data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProblemDims {
    pub k: usize,
    pub m: usize,
    pub t: Option<usize>,
}

impl ProblemDims {
    pub fn new(k: usize, m: usize) -> Self {
        ProblemDims { k, m, t: None }
    }

    pub fn with_samples(k: usize, m: usize, t: usize) -> Self {
        ProblemDims { k, m, t: Some(t) }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(SedjocoError::InvalidInput(format!(
                "source and dataset counts must be at least 1, got K={}, M={}",
                self.k, self.m
            )));
        }
        if self.t == Some(0) {
            return Err(SedjocoError::InvalidInput(
                "sample count must be at least 1 when present".into(),
            ));
        }
        Ok(())
    }
}

/// One joint-congruence problem: K·M² coupling matrices `Q[k][m1][m2]`,
/// each K×K, with the pair relation `Q[k][m1][m2] = Q[k][m2][m1]ᵀ`.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    dims: ProblemDims,
    /// Flat storage at index `(k*M + m1)*M + m2`.
    targets: Vec<DMatrix<f64>>,
}

/// Relative tolerance accepted for the pair relation when validating
/// externally supplied targets. Instances assembled by this crate satisfy
/// the relation exactly.
const PAIR_SYMMETRY_RTOL: f64 = 1e-8;

impl ProblemInstance {
    /// Builds an instance from targets listed source-major then row-set-major:
    /// index `(k*M + m1)*M + m2` holds `Q[k][m1][m2]`.
    pub fn new(k: usize, m: usize, targets: Vec<DMatrix<f64>>) -> Result<Self> {
        let dims = ProblemDims::new(k, m);
        dims.validate()?;
        if targets.len() != k * m * m {
            return Err(SedjocoError::DimensionMismatch(format!(
                "expected {} target matrices for K={}, M={}, got {}",
                k * m * m,
                k,
                m,
                targets.len()
            )));
        }
        for (i, q) in targets.iter().enumerate() {
            if q.nrows() != k || q.ncols() != k {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "target {} is {}x{}, expected {}x{}",
                    i,
                    q.nrows(),
                    q.ncols(),
                    k,
                    k
                )));
            }
            if q.iter().any(|x| !x.is_finite()) {
                return Err(SedjocoError::NonFinite(format!("target matrix {}", i)));
            }
        }
        let instance = ProblemInstance { dims, targets };
        for kk in 0..k {
            for m1 in 0..m {
                for m2 in m1..m {
                    let a = instance.target(kk, m1, m2);
                    let b = instance.target(kk, m2, m1);
                    let diff = (a - b.transpose()).norm();
                    let scale = 1.0 + a.norm().max(b.norm());
                    if diff > PAIR_SYMMETRY_RTOL * scale {
                        return Err(SedjocoError::InvalidInput(format!(
                            "targets ({},{},{}) and ({},{},{}) violate the pair \
                             transpose relation (deviation {:.3e})",
                            kk, m1, m2, kk, m2, m1, diff
                        )));
                    }
                }
            }
        }
        Ok(instance)
    }

    /// Slices K stacked KM×KM matrices into K×K targets. Each stacked matrix
    /// is symmetrized first, so the resulting targets satisfy the pair
    /// relation exactly.
    pub fn from_omegas(omegas: &[DMatrix<f64>]) -> Result<Self> {
        let k = omegas.len();
        if k == 0 {
            return Err(SedjocoError::InvalidInput(
                "need at least one stacked matrix".into(),
            ));
        }
        let n = omegas[0].nrows();
        if n == 0 || n % k != 0 {
            return Err(SedjocoError::DimensionMismatch(format!(
                "stacked matrix side {} is not a positive multiple of K={}",
                n, k
            )));
        }
        let m = n / k;
        let mut targets = Vec::with_capacity(k * m * m);
        for (idx, omega) in omegas.iter().enumerate() {
            if omega.nrows() != n || omega.ncols() != n {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "stacked matrix {} is {}x{}, expected {}x{}",
                    idx,
                    omega.nrows(),
                    omega.ncols(),
                    n,
                    n
                )));
            }
            let sym = (omega + omega.transpose()) * 0.5;
            for m1 in 0..m {
                for m2 in 0..m {
                    targets.push(sym.view((m1 * k, m2 * k), (k, k)).clone_owned());
                }
            }
        }
        ProblemInstance::new(k, m, targets)
    }

    /// Draws a random instance whose stacked matrices are U·Uᵀ with
    /// independent standard-normal U, hence positive definite almost surely.
    pub fn random_pd<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Result<Self> {
        let n = k * m;
        let omegas: Vec<DMatrix<f64>> = (0..k)
            .map(|_| {
                let u = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                &u * u.transpose()
            })
            .collect();
        ProblemInstance::from_omegas(&omegas)
    }

    pub fn with_sample_count(mut self, t: usize) -> Self {
        self.dims.t = Some(t);
        self
    }

    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    /// Target `Q[k][m1][m2]`, all indices zero-based.
    pub fn target(&self, k: usize, m1: usize, m2: usize) -> &DMatrix<f64> {
        let m = self.dims.m;
        &self.targets[(k * m + m1) * m + m2]
    }
}

/// One candidate solution: M square matrices `B[m]`, row k of `B[m]` being
/// the separating vector of source k in dataset m.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionSet {
    dims: ProblemDims,
    b: Vec<DMatrix<f64>>,
}

impl SolutionSet {
    pub fn new(k: usize, m: usize, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let dims = ProblemDims::new(k, m);
        dims.validate()?;
        if b.len() != m {
            return Err(SedjocoError::DimensionMismatch(format!(
                "expected {} matrices, got {}",
                m,
                b.len()
            )));
        }
        for (i, bm) in b.iter().enumerate() {
            if bm.nrows() != k || bm.ncols() != k {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "matrix {} is {}x{}, expected {}x{}",
                    i,
                    bm.nrows(),
                    bm.ncols(),
                    k,
                    k
                )));
            }
            if bm.iter().any(|x| !x.is_finite()) {
                return Err(SedjocoError::NonFinite(format!("solution matrix {}", i)));
            }
        }
        Ok(SolutionSet { dims, b })
    }

    pub fn identity(k: usize, m: usize) -> Self {
        SolutionSet {
            dims: ProblemDims::new(k, m),
            b: (0..m).map(|_| DMatrix::identity(k, k)).collect(),
        }
    }

    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    pub fn b(&self, m: usize) -> &DMatrix<f64> {
        &self.b[m]
    }

    pub fn sets(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub(crate) fn sets_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.b
    }

    /// Row k across all sets, concatenated as [b_k(1); …; b_k(M)]. This is
    /// the KM-vector paired with stacked matrix k in the likelihood.
    pub fn stacked_row(&self, k: usize) -> DVector<f64> {
        let kk = self.dims.k;
        let mut out = DVector::zeros(kk * self.dims.m);
        for (m, bm) in self.b.iter().enumerate() {
            for j in 0..kk {
                out[m * kk + j] = bm[(k, j)];
            }
        }
        out
    }

    /// True when every matrix passes the singularity policy used by the
    /// likelihood sentinel.
    pub fn is_nonsingular(&self) -> bool {
        self.b.iter().all(|bm| checked_inverse(bm).is_some())
    }
}

/// The K stacked KM×KM symmetric matrices obtained by laying out the targets
/// of one source in blocks.
#[derive(Clone, Debug)]
pub struct AugmentedTargetSet {
    dims: ProblemDims,
    omegas: Vec<DMatrix<f64>>,
}

impl AugmentedTargetSet {
    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    pub fn omega(&self, k: usize) -> &DMatrix<f64> {
        &self.omegas[k]
    }

    pub fn omegas(&self) -> &[DMatrix<f64>] {
        &self.omegas
    }
}

/// Assembles the stacked matrix of each source from the instance targets and
/// symmetrizes it, so round-off asymmetry cannot leak into eigenanalysis.
pub fn build_augmented_targets(p: &ProblemInstance) -> AugmentedTargetSet {
    let (k, m) = (p.dims.k, p.dims.m);
    let n = k * m;
    let omegas = (0..k)
        .map(|kk| {
            let mut omega = DMatrix::zeros(n, n);
            for m1 in 0..m {
                for m2 in 0..m {
                    omega
                        .view_mut((m1 * k, m2 * k), (k, k))
                        .copy_from(p.target(kk, m1, m2));
                }
            }
            let sym = (&omega + omega.transpose()) * 0.5;
            sym
        })
        .collect();
    AugmentedTargetSet {
        dims: p.dims,
        omegas,
    }
}

/// Outcome of the positive-definiteness screen on the stacked matrices.
#[derive(Clone, Debug)]
pub struct ExistenceReport {
    pub is_pd_all: bool,
    /// Smallest eigenvalue of each stacked matrix.
    pub lambda_min: Vec<f64>,
    pub tol: f64,
}

/// Scale-relative default tolerance for [`check_existence`].
pub fn default_pd_tol(a: &AugmentedTargetSet) -> f64 {
    let max_norm = a
        .omegas
        .iter()
        .map(|o| o.norm())
        .fold(0.0_f64, f64::max);
    1e-10 * max_norm
}

/// Tests whether every stacked matrix is positive definite beyond `tol`.
/// A negative outcome is a warning: positive definiteness is sufficient for
/// a solution to exist, not necessary.
pub fn check_existence(a: &AugmentedTargetSet, tol: f64) -> Result<ExistenceReport> {
    for (k, omega) in a.omegas.iter().enumerate() {
        if omega.iter().any(|x| !x.is_finite()) {
            return Err(SedjocoError::NonFinite(format!("stacked matrix {}", k)));
        }
    }
    let lambda_min: Vec<f64> = a
        .omegas
        .iter()
        .map(|omega| {
            omega
                .clone_owned()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let is_pd_all = lambda_min.iter().all(|&l| l > tol);
    Ok(ExistenceReport {
        is_pd_all,
        lambda_min,
        tol,
    })
}

/// Residual of a candidate solution: per-dataset Frobenius norms and their
/// root-sum-of-squares, plus the transformed matrices `D[k][m]` they came
/// from.
#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub per_dataset: Vec<f64>,
    pub total: f64,
    /// `D[k][m]` at flat index `k*M + m`.
    pub transformed: Vec<DMatrix<f64>>,
}

impl ResidualReport {
    pub fn transformed(&self, k: usize, m: usize, m_count: usize) -> &DMatrix<f64> {
        &self.transformed[k * m_count + m]
    }
}

/// Evaluates `D[k][m] = Σ_ℓ B[m]·Q[k][m][ℓ]·B[ℓ]ᵀ` and measures, per dataset,
/// how far the k-th column of `D[k][m]` is from the k-th unit vector.
pub fn residual(s: &SolutionSet, p: &ProblemInstance) -> Result<ResidualReport> {
    if s.dims.k != p.dims.k || s.dims.m != p.dims.m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "solution is K={}, M={} but problem is K={}, M={}",
            s.dims.k, s.dims.m, p.dims.k, p.dims.m
        )));
    }
    let (k, m) = (p.dims.k, p.dims.m);
    let bt: Vec<DMatrix<f64>> = s.b.iter().map(|bm| bm.transpose()).collect();
    let mut transformed = Vec::with_capacity(k * m);
    for kk in 0..k {
        for mm in 0..m {
            let mut d = DMatrix::zeros(k, k);
            for ll in 0..m {
                d += &s.b[mm] * p.target(kk, mm, ll) * &bt[ll];
            }
            transformed.push(d);
        }
    }
    // The norms are taken over the drilled columns D[k][m]·e_k − e_k,
    // evaluated as B[m]·β_k(m) − e_k with compensated accumulation: the
    // plainly multiplied `transformed` matrices above lose accuracy to
    // cancellation once the residual is small against the target scale.
    let mut per_dataset = Vec::with_capacity(m);
    for mm in 0..m {
        let mut sq = 0.0;
        for kk in 0..k {
            let (beta_hi, beta_lo) = coupling_pair(p, s, kk, mm);
            let b = &s.b[mm];
            for row in 0..k {
                let mut acc = CompensatedSum::default();
                for j in 0..k {
                    acc.add_prod(b[(row, j)], beta_hi[j]);
                    acc.add(b[(row, j)] * beta_lo[j]);
                }
                if row == kk {
                    acc.add(-1.0);
                }
                let diff = acc.value();
                sq += diff * diff;
            }
        }
        per_dataset.push(sq.sqrt());
    }
    let total = per_dataset.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(ResidualReport {
        per_dataset,
        total,
        transformed,
    })
}

/// Log-likelihood kernel `Σ_m log|det B[m]| − ½ Σ_k b̃_kᵀ Ω_k b̃_k`, with a
/// −∞ sentinel when any `B[m]` fails the singularity policy.
pub fn log_likelihood_core(s: &SolutionSet, a: &AugmentedTargetSet) -> Result<f64> {
    if s.dims.k != a.dims.k || s.dims.m != a.dims.m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "solution is K={}, M={} but stacked targets are K={}, M={}",
            s.dims.k, s.dims.m, a.dims.k, a.dims.m
        )));
    }
    let mut log_det_sum = 0.0;
    for bm in &s.b {
        match checked_inverse(bm) {
            Some(ci) => log_det_sum += ci.log_abs_det,
            None => return Ok(f64::NEG_INFINITY),
        }
    }
    let mut quad = 0.0;
    for k in 0..s.dims.k {
        let row = s.stacked_row(k);
        quad += row.dot(&(&a.omegas[k] * &row));
    }
    Ok(log_det_sum - 0.5 * quad)
}

pub(crate) fn validate_permutation(perm: &[usize], size: usize) -> Result<()> {
    if perm.len() != size {
        return Err(SedjocoError::InvalidPermutation {
            perm: perm.to_vec(),
            size,
        });
    }
    let mut seen = vec![false; size];
    for &p in perm {
        if p >= size || seen[p] {
            return Err(SedjocoError::InvalidPermutation {
                perm: perm.to_vec(),
                size,
            });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders the rows of every `B[m]` the same way: row i of the output is
/// row `perm[i]` of the input (zero-based).
pub fn permute_solution(s: &SolutionSet, perm: &[usize]) -> Result<SolutionSet> {
    validate_permutation(perm, s.dims.k)?;
    let b = s
        .b
        .iter()
        .map(|bm| {
            let mut out = bm.clone();
            for (i, &src) in perm.iter().enumerate() {
                out.row_mut(i).copy_from(&bm.row(src));
            }
            out
        })
        .collect();
    Ok(SolutionSet { dims: s.dims, b })
}

/// Reindexes the sources of an instance: output target `Q'[k][m1][m2]`
/// equals input `Q[perm[k]][m1][m2]`. If `B̆` solves the reindexed instance,
/// then [`permute_solution`] of `B̆` with the inverse permutation solves the
/// original instance.
pub fn permute_instance(p: &ProblemInstance, perm: &[usize]) -> Result<ProblemInstance> {
    validate_permutation(perm, p.dims.k)?;
    let (k, m) = (p.dims.k, p.dims.m);
    let mut targets = Vec::with_capacity(k * m * m);
    for kk in 0..k {
        for m1 in 0..m {
            for m2 in 0..m {
                targets.push(p.target(perm[kk], m1, m2).clone());
            }
        }
    }
    let mut out = ProblemInstance::new(k, m, targets)?;
    out.dims.t = p.dims.t;
    Ok(out)
}

/// Inverse of a zero-based permutation vector.
pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    validate_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}

/// All permutations of `0..n` in lexicographic order; the identity comes
/// first. Intended for small `n` (the count grows factorially).
pub(crate) fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(n, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(n, &mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Error-free sum: `a + b = s + e` exactly.
#[inline]
pub(crate) fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Error-free product via fused multiply-add: `a·b = p + e` exactly.
#[inline]
pub(crate) fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

/// Running compensated sum of products. Accumulating with error-free
/// transformations keeps the result accurate to ~1 ulp of the true value
/// even when huge terms cancel, which plain summation cannot do. The system
/// quantities evaluated here routinely cancel by many orders of magnitude
/// on ill-conditioned instances.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add_prod(&mut self, a: f64, b: f64) {
        let (p, ep) = two_prod(a, b);
        let (s, es) = two_sum(self.hi, p);
        self.hi = s;
        self.lo += ep + es;
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let (s, es) = two_sum(self.hi, x);
        self.hi = s;
        self.lo += es;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// The coupling vector `β_k(m) = Σ_ℓ Q[k][m][ℓ]·b_k(ℓ)` as an unevaluated
/// hi/lo pair, each entry accurate well beyond f64 rounding.
pub(crate) fn coupling_pair(
    p: &ProblemInstance,
    s: &SolutionSet,
    k: usize,
    m: usize,
) -> (DVector<f64>, DVector<f64>) {
    let dim = p.dims.k;
    let mut hi = DVector::zeros(dim);
    let mut lo = DVector::zeros(dim);
    for i in 0..dim {
        let mut acc = CompensatedSum::default();
        for l in 0..p.dims.m {
            let q = p.target(k, m, l);
            let b = &s.b[l];
            for j in 0..dim {
                acc.add_prod(q[(i, j)], b[(k, j)]);
            }
        }
        hi[i] = acc.hi;
        lo[i] = acc.lo;
    }
    (hi, lo)
}

/// Rounded form of [`coupling_pair`]: each entry within ~1 ulp of the true
/// coupling value.
pub(crate) fn coupling_vector(
    p: &ProblemInstance,
    s: &SolutionSet,
    k: usize,
    m: usize,
) -> DVector<f64> {
    let (hi, lo) = coupling_pair(p, s, k, m);
    hi + lo
}

/// Inverse plus the quantities backing the singularity policy.
pub(crate) struct CheckedInverse {
    pub inverse: DMatrix<f64>,
    pub log_abs_det: f64,
    #[allow(dead_code)]
    pub cond_estimate: f64,
}

/// LU-based inverse that refuses matrices with |det| ≤ 1e−300, Frobenius
/// condition estimate ≥ 1e12, or non-finite content.
pub(crate) fn checked_inverse(b: &DMatrix<f64>) -> Option<CheckedInverse> {
    if b.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let lu = b.clone_owned().lu();
    let mut log_abs_det = 0.0;
    for i in 0..b.nrows() {
        let d = lu.u()[(i, i)].abs();
        if d == 0.0 {
            return None;
        }
        log_abs_det += d.ln();
    }
    if !(log_abs_det > MIN_ABS_DET.ln()) {
        return None;
    }
    let inverse = lu.try_inverse()?;
    if inverse.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let cond_estimate = b.norm() * inverse.norm();
    if !(cond_estimate < MAX_COND_ESTIMATE) {
        return None;
    }
    Some(CheckedInverse {
        inverse,
        log_abs_det,
        cond_estimate,
    })
}
