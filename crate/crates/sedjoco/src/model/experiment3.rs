//! Stationary coupled-source model: each source is built by filtering
//! white driving noise that is shared across datasets, then delaying each
//! dataset's copy by a multiple of the filter length. Corresponding sources
//! are correlated between datasets at nonzero lags, yet the delays keep
//! their zero-lag correlation exactly zero.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ScvCovarianceSet;
use crate::error::{Result, SedjocoError};

/// Energy tolerance accepted for externally supplied filters.
const ENERGY_RTOL: f64 = 1e-9;

/// Parameters of the filtered-noise model. Source `k` in dataset `m` is
///
/// ```text
/// s_k^m[n] = sum_l (h[k][m][l] * w_k^l)[n - L*m]
/// ```
///
/// where `w_k^l` are independent standard white noise processes (one per
/// dataset index `l`, shared by all datasets through the sum), `*` is
/// convolution, `L` is the filter length and the delay `L*m` staggers the
/// datasets. Filters carry unit energy on `m == l` and energy `eta`
/// otherwise, so `eta` controls how much the datasets share.
#[derive(Clone, Debug)]
pub struct Experiment3Params {
    k: usize,
    m: usize,
    /// Samples per signal.
    pub t: usize,
    /// Filter length `L` in taps.
    pub filter_len: usize,
    /// Cross-dataset filter energy.
    pub eta: f64,
    /// Taps at flat index `(k*M + m1)*M + m2`.
    filters: Vec<DVector<f64>>,
}

impl Experiment3Params {
    /// Draws a fresh filter family with [`draw_experiment3_filters`] and
    /// wraps it with the signal length.
    pub fn draw(k: usize, m: usize, t: usize, filter_len: usize, eta: f64, seed: u64) -> Result<Self> {
        let filters = draw_experiment3_filters(k, m, filter_len, eta, seed)?;
        Self::from_filters(k, m, t, filter_len, eta, filters)
    }

    /// Wraps an externally supplied filter family, enforcing the energy
    /// normalization to `1e-9`.
    pub fn from_filters(
        k: usize,
        m: usize,
        t: usize,
        filter_len: usize,
        eta: f64,
        filters: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if k == 0 || m == 0 || t == 0 || filter_len == 0 {
            return Err(SedjocoError::InvalidInput(format!(
                "filtered-noise model needs K, M, T, L >= 1, got K={}, M={}, T={}, L={}",
                k, m, t, filter_len
            )));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(SedjocoError::InvalidInput(format!(
                "cross-dataset energy must be a finite nonnegative number, got {}",
                eta
            )));
        }
        if filters.len() != k * m * m {
            return Err(SedjocoError::DimensionMismatch(format!(
                "expected {} filters for K={}, M={}, got {}",
                k * m * m,
                k,
                m,
                filters.len()
            )));
        }
        let params = Experiment3Params {
            k,
            m,
            t,
            filter_len,
            eta,
            filters,
        };
        params.validate()?;
        Ok(params)
    }

    /// Number of sources.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of datasets.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Taps of the filter feeding dataset `m1`'s source `k` from driving
    /// noise `m2`.
    pub fn filter(&self, k: usize, m1: usize, m2: usize) -> &DVector<f64> {
        &self.filters[(k * self.m + m1) * self.m + m2]
    }

    pub fn validate(&self) -> Result<()> {
        for kk in 0..self.k {
            for m1 in 0..self.m {
                for m2 in 0..self.m {
                    let h = self.filter(kk, m1, m2);
                    if h.len() != self.filter_len {
                        return Err(SedjocoError::DimensionMismatch(format!(
                            "filter ({},{},{}) has {} taps, expected {}",
                            kk,
                            m1,
                            m2,
                            h.len(),
                            self.filter_len
                        )));
                    }
                    if h.iter().any(|x| !x.is_finite()) {
                        return Err(SedjocoError::NonFinite(format!(
                            "filter ({},{},{})",
                            kk, m1, m2
                        )));
                    }
                    let energy = h.norm_squared();
                    let target = if m1 == m2 { 1.0 } else { self.eta };
                    if (energy - target).abs() > ENERGY_RTOL * target.max(1.0) {
                        return Err(SedjocoError::InvalidInput(format!(
                            "filter ({},{},{}) has energy {:.12}, expected {:.12}",
                            kk, m1, m2, energy, target
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draws every filter as `filter_len` independent standard normal taps,
/// rescaled so the energy is exactly `1` within a dataset and `eta` across
/// datasets. The draw is a pure function of the seed; an all-zero draw
/// (probability zero in exact arithmetic) is redrawn.
pub fn draw_experiment3_filters(
    k: usize,
    m: usize,
    filter_len: usize,
    eta: f64,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if k == 0 || m == 0 || filter_len == 0 {
        return Err(SedjocoError::InvalidInput(format!(
            "filter family needs K, M, L >= 1, got K={}, M={}, L={}",
            k, m, filter_len
        )));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(SedjocoError::InvalidInput(format!(
            "cross-dataset energy must be a finite nonnegative number, got {}",
            eta
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * m * m);
    for _kk in 0..k {
        for m1 in 0..m {
            for m2 in 0..m {
                let target = if m1 == m2 { 1.0 } else { eta };
                let mut taps;
                loop {
                    taps =
                        DVector::from_fn(filter_len, |_, _| rng.sample::<f64, _>(StandardNormal));
                    if taps.norm_squared() > 0.0 {
                        break;
                    }
                }
                let scale = (target / taps.norm_squared()).sqrt();
                out.push(taps * scale);
            }
        }
    }
    Ok(out)
}

/// Cross-correlation of two tap sequences at integer `lag`:
/// `sum_t a[t] * b[t - lag]`.
fn filter_cross_correlation(a: &DVector<f64>, b: &DVector<f64>, lag: i64) -> f64 {
    let len = a.len() as i64;
    let lo = lag.max(0);
    let hi = (len - 1 + lag.min(0)) as i64;
    let mut acc = 0.0;
    let mut t = lo;
    while t <= hi {
        acc += a[t as usize] * b[(t - lag) as usize];
        t += 1;
    }
    acc
}

/// Analytic covariance family of the filtered-noise model. Blocks are
/// Toeplitz: the entry at `(n1, n2)` is the summed filter cross-correlation
/// at lag `(n1 - L*m1) - (n2 - L*m2)`, which vanishes whenever the lag
/// magnitude reaches the filter length. In particular the diagonal of every
/// between-dataset block is exactly zero: the dataset delays differ by at
/// least `L`.
pub fn build_cov_experiment3(params: &Experiment3Params) -> Result<ScvCovarianceSet> {
    params.validate()?;
    let (k, m, t, l) = (params.k, params.m, params.t, params.filter_len as i64);
    let mut blocks = Vec::with_capacity(k * m * m);
    for kk in 0..k {
        for m1 in 0..m {
            for m2 in 0..m {
                // Summed correlation over driving-noise indices, indexed by
                // lag + L - 1.
                let mut rsum = vec![0.0; (2 * l - 1) as usize];
                for (i, r) in rsum.iter_mut().enumerate() {
                    let lag = i as i64 - (l - 1);
                    for ll in 0..m {
                        *r += filter_cross_correlation(
                            params.filter(kk, m1, ll),
                            params.filter(kk, m2, ll),
                            lag,
                        );
                    }
                }
                let delay = l * (m1 as i64 - m2 as i64);
                let mut block = DMatrix::zeros(t, t);
                for n1 in 0..t {
                    for n2 in 0..t {
                        let lag = n1 as i64 - n2 as i64 - delay;
                        if lag.abs() < l {
                            block[(n1, n2)] = rsum[(lag + l - 1) as usize];
                        }
                    }
                }
                blocks.push(block);
            }
        }
    }
    ScvCovarianceSet::new(k, m, t, blocks)
}

/// Draws one realization by the time-domain recipe; returns `S[m]`, each
/// `K x T`. The driving noise is drawn on an index range extended to the
/// left of zero so that every delayed filter output is a fully formed
/// stationary sample; the draw order (source-major, then driving-noise
/// index, then time) is fixed, so a seeded generator reproduces realizations
/// exactly.
pub fn sample_experiment3<R: Rng + ?Sized>(
    params: &Experiment3Params,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    params.validate()?;
    let (k, m, t, l) = (params.k, params.m, params.t, params.filter_len);
    let off = (l - 1) + l * (m - 1);
    let ext = t + off;
    let mut out = vec![DMatrix::zeros(k, t); m];
    for kk in 0..k {
        let noise: Vec<DVector<f64>> = (0..m)
            .map(|_| DVector::from_fn(ext, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        for mm in 0..m {
            for n in 0..t {
                let mut acc = 0.0;
                for ll in 0..m {
                    let h = params.filter(kk, mm, ll);
                    let w = &noise[ll];
                    for tap in 0..l {
                        acc += h[tap] * w[n + off - l * mm - tap];
                    }
                }
                out[mm][(kk, n)] = acc;
            }
        }
    }
    Ok(out)
}
