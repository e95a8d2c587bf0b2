//! Stability analysis over time-error series: RMS and time deviation
//! (TDEV), plus seeded noise generators for validating the estimators.
//!
//! TDEV here is the standard overlapping estimator built on the modified
//! Allan variance:
//!
//! ```text
//! TDEV^2(m tau0) = 1 / (6 m^2 (N - 3m + 1))
//!                  * sum_{j=1}^{N-3m+1} [ sum_{i=j}^{j+m-1} (x_{i+2m} - 2 x_{i+m} + x_i) ]^2
//! ```
//!
//! Second differences annihilate constants and linear ramps, so TDEV
//! measures fluctuation, not trend. White phase noise of sigma_x gives
//! TDEV(tau0) = sigma_x and falls as the square root of averaging time;
//! random-walk phase rises instead.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::MetrologyError;
use crate::seeds::substream_rng;
use crate::timebase::Duration;

/// Uniformly sampled time-error series.
///
/// Gaps must be handled upstream: split the series at each gap and analyze
/// segments (interpolation would bias TDEV low).
#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySeries {
    tau0: Duration,
    values: Vec<Duration>,
}

impl StabilitySeries {
    /// # Panics
    /// Panics if `tau0` is not positive.
    pub fn new(tau0: Duration, values: Vec<Duration>) -> Self {
        assert!(tau0.is_positive(), "sampling interval must be positive");
        StabilitySeries { tau0, values }
    }

    pub fn from_fs_f64(tau0: Duration, values: impl IntoIterator<Item = f64>) -> Self {
        Self::new(tau0, values.into_iter().map(Duration::from_fs_f64).collect())
    }

    pub fn tau0(&self) -> Duration {
        self.tau0
    }

    pub fn values(&self) -> &[Duration] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One TDEV point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdevPoint {
    /// Averaging factor: this point is at `m * tau0`.
    pub m: usize,
    pub averaging_time: Duration,
    /// Time deviation in femtoseconds (real-valued; the in-loop floor sits
    /// at a few fs and would vanish in integer fs).
    pub tdev_fs: f64,
    /// Number of terms averaged: N - 3m + 1.
    pub n_terms: usize,
}

/// Time deviation versus averaging time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TdevCurve {
    pub points: Vec<TdevPoint>,
    /// Averaging factors that were requested but had too little data,
    /// with the error that skipped them.
    pub skipped: Vec<(usize, MetrologyError)>,
}

impl TdevCurve {
    pub fn point_at(&self, m: usize) -> Option<&TdevPoint> {
        self.points.iter().find(|p| p.m == m)
    }

    /// Least-squares slope of log10(tdev) vs log10(averaging time) over the
    /// points with `m >= m_min`. None if fewer than two usable points.
    pub fn loglog_slope(&self, m_min: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.m >= m_min && p.tdev_fs > 0.0)
            .map(|p| ((p.m as f64).log10(), p.tdev_fs.log10()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        if det.abs() < 1e-300 {
            return None;
        }
        Some((n * sxy - sx * sy) / det)
    }
}

/// Overlapping TDEV at each requested averaging factor.
///
/// Factors with N < 3m + 1 are skipped and reported in
/// [`TdevCurve::skipped`], never silently dropped.
pub fn tdev(series: &StabilitySeries, m_values: &[usize]) -> TdevCurve {
    let n = series.len();
    let x: Vec<f64> = series.values.iter().map(|d| d.as_fs_f64()).collect();
    // Prefix sums make the inner sum O(1):
    // sum_{i=j}^{j+m-1} (x_{i+2m} - 2 x_{i+m} + x_i)
    //   = (P[j+3m] - P[j+2m]) - 2 (P[j+2m] - P[j+m]) + (P[j+m] - P[j]).
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &x {
        acc += v;
        prefix.push(acc);
    }

    let mut curve = TdevCurve::default();
    for &m in m_values {
        if m == 0 {
            continue;
        }
        if n < 3 * m + 1 {
            curve.skipped.push((
                m,
                MetrologyError::InsufficientData { m, needed: 3 * m + 1, have: n },
            ));
            continue;
        }
        let terms = n - 3 * m + 1;
        let mut sq = 0.0;
        for j in 0..terms {
            let s = (prefix[j + 3 * m] - prefix[j + 2 * m])
                - 2.0 * (prefix[j + 2 * m] - prefix[j + m])
                + (prefix[j + m] - prefix[j]);
            sq += s * s;
        }
        let var = sq / (6.0 * (m * m) as f64 * terms as f64);
        curve.points.push(TdevPoint {
            m,
            averaging_time: Duration::from_fs(series.tau0.as_fs() * m as i128),
            tdev_fs: var.sqrt(),
            n_terms: terms,
        });
    }
    curve
}

/// Default averaging-factor grid: powers of two up to N/4.
pub fn default_m_grid(n: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut m = 1usize;
    while m <= n / 4 && n >= 3 * m + 1 {
        grid.push(m);
        m *= 2;
    }
    grid
}

/// Root-mean-square deviation about the series mean, in femtoseconds.
pub fn rms(series: &StabilitySeries) -> Result<f64, MetrologyError> {
    if series.is_empty() {
        return Err(MetrologyError::EmptySeries);
    }
    let n = series.len() as f64;
    let mean: f64 = series.values.iter().map(|d| d.as_fs_f64()).sum::<f64>() / n;
    let sq: f64 = series.values.iter().map(|d| (d.as_fs_f64() - mean).powi(2)).sum();
    Ok((sq / n).sqrt())
}

/// Synthetic noise families for estimator validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Independent Gaussian samples of the given sigma.
    WhitePm { sigma: Duration },
    /// Gaussian random walk with the given per-sample step sigma.
    RandomWalk { step: Duration },
    /// Exactly linear: x_i = slope * i.
    Ramp { slope_per_sample: Duration },
    /// Sinusoid with the given amplitude and period in samples.
    Diurnal { amplitude: Duration, period_samples: f64 },
}

/// Deterministic seeded series of the named noise type.
///
/// # Panics
/// Panics if `n < 4` (too short for any TDEV point).
pub fn synthesize(kind: NoiseKind, n: usize, tau0: Duration, seed: u64) -> StabilitySeries {
    assert!(n >= 4, "need at least 4 samples");
    let mut rng = substream_rng(seed, "metrology.synthesize");
    let values: Vec<f64> = match kind {
        NoiseKind::WhitePm { sigma } => {
            let s = sigma.as_fs_f64();
            (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        }
        NoiseKind::RandomWalk { step } => {
            let s = step.as_fs_f64();
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc += s * rng.sample::<f64, _>(StandardNormal);
                    acc
                })
                .collect()
        }
        NoiseKind::Ramp { slope_per_sample } => {
            let c = slope_per_sample.as_fs_f64();
            (0..n).map(|i| c * i as f64).collect()
        }
        NoiseKind::Diurnal { amplitude, period_samples } => {
            let a = amplitude.as_fs_f64();
            let w = 2.0 * std::f64::consts::PI / period_samples;
            (0..n).map(|i| a * (w * i as f64).sin()).collect()
        }
    };
    StabilitySeries::from_fs_f64(tau0, values)
}
