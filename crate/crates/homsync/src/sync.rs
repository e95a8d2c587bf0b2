//! The synchronization payload: histogram the arrival-time differences of
//! the two clock streams, fit a Gaussian to the coincidence peak, and read
//! off the clock offset.
//!
//! The correlator slides two pointers over the sorted streams and only ever
//! touches pairs whose difference falls inside the configured span; the
//! full quadratic pairing never materializes. Counts are kept as raw
//! integers (no 1/N normalization) so Poisson statistics survive into the
//! fit.

use std::collections::VecDeque;

use crate::error::SyncError;
use crate::timebase::{Duration, TimeTag, TimestampSeries};

/// Correlation histogram parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationConfig {
    pub bin_width: Duration,
    /// Half-open search span `[lo, hi)` for differences a - b.
    pub span: (Duration, Duration),
    /// Data window per offset estimate.
    pub window: Duration,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            bin_width: Duration::from_ps(4),
            span: (Duration::from_ns(-2), Duration::from_ns(2)),
            window: Duration::from_secs(1000),
        }
    }
}

impl CorrelationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !self.bin_width.is_positive() {
            errs.push("sync.bin_width must be positive".into());
        }
        if self.span.0 >= self.span.1 {
            errs.push("sync.span must be a non-empty interval".into());
        }
        if !self.window.is_positive() {
            errs.push("sync.window must be positive".into());
        }
        errs
    }

    fn n_bins(&self) -> usize {
        let width = (self.span.1 - self.span.0).as_fs();
        let bin = self.bin_width.as_fs();
        ((width + bin - 1) / bin) as usize
    }
}

/// Discrete cross-correlation of two timestamp streams.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    /// `counts.len() + 1` edges; bin `i` covers `[edges[i], edges[i+1])`.
    pub bin_edges: Vec<Duration>,
    pub counts: Vec<u64>,
    /// Tag counts that entered the correlation.
    pub n_a: u64,
    pub n_b: u64,
}

impl CorrelationHistogram {
    pub fn bin_center_fs(&self, i: usize) -> f64 {
        (self.bin_edges[i].as_fs() + self.bin_edges[i + 1].as_fs()) as f64 / 2.0
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV `bin_center_fs,counts`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bin_center_fs,counts")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", self.bin_center_fs(i), c)?;
        }
        Ok(())
    }
}

/// Incremental two-pointer correlator.
///
/// Feed each stream in non-decreasing time order (the two streams may be
/// interleaved arbitrarily). A pair is binned exactly once, when its later
/// member arrives; buffered tags are evicted as soon as no future partner
/// can reach them, so memory stays bounded by the span, not the run.
#[derive(Debug, Clone)]
pub struct StreamCorrelator {
    lo: i128,
    hi: i128,
    bin: i128,
    counts: Vec<u64>,
    n_a: u64,
    n_b: u64,
    buf_a: VecDeque<i128>,
    buf_b: VecDeque<i128>,
    last_a: i128,
    last_b: i128,
}

impl StreamCorrelator {
    pub fn new(cfg: &CorrelationConfig) -> Self {
        StreamCorrelator {
            lo: cfg.span.0.as_fs(),
            hi: cfg.span.1.as_fs(),
            bin: cfg.bin_width.as_fs(),
            counts: vec![0; cfg.n_bins()],
            n_a: 0,
            n_b: 0,
            buf_a: VecDeque::new(),
            buf_b: VecDeque::new(),
            last_a: i128::MIN,
            last_b: i128::MIN,
        }
    }

    pub fn push_a(&mut self, tag: TimeTag) {
        let t = tag.as_fs();
        debug_assert!(t >= self.last_a, "a-stream out of order");
        self.last_a = t;
        self.n_a += 1;
        // b <= t - hi can never again satisfy a' - b < hi for a' >= t.
        while self.buf_b.front().is_some_and(|&b| t - b >= self.hi) {
            self.buf_b.pop_front();
        }
        for i in 0..self.buf_b.len() {
            let b = self.buf_b[i];
            if t - b < self.lo {
                break;
            }
            let idx = ((t - b - self.lo) / self.bin) as usize;
            self.counts[idx] += 1;
        }
        self.buf_a.push_back(t);
    }

    pub fn push_b(&mut self, tag: TimeTag) {
        let t = tag.as_fs();
        debug_assert!(t >= self.last_b, "b-stream out of order");
        self.last_b = t;
        self.n_b += 1;
        // a with a - t < lo can never match b' >= t.
        while self.buf_a.front().is_some_and(|&a| a - t < self.lo) {
            self.buf_a.pop_front();
        }
        for i in 0..self.buf_a.len() {
            let a = self.buf_a[i];
            if a - t >= self.hi {
                break;
            }
            let idx = ((a - t - self.lo) / self.bin) as usize;
            self.counts[idx] += 1;
        }
        self.buf_b.push_back(t);
    }

    pub fn finish(self) -> CorrelationHistogram {
        let n = self.counts.len();
        let mut edges = Vec::with_capacity(n + 1);
        for i in 0..=n {
            edges.push(Duration::from_fs(self.lo + i as i128 * self.bin));
        }
        CorrelationHistogram { bin_edges: edges, counts: self.counts, n_a: self.n_a, n_b: self.n_b }
    }
}

/// One-shot correlation of two sorted series.
///
/// Empty inputs produce an all-zero histogram, not an error.
pub fn cross_correlate(
    a: &TimestampSeries,
    b: &TimestampSeries,
    cfg: &CorrelationConfig,
) -> CorrelationHistogram {
    let mut corr = StreamCorrelator::new(cfg);
    for &tag in a.tags() {
        corr.push_a(tag);
    }
    for &tag in b.tags() {
        corr.push_b(tag);
    }
    corr.finish()
}

/// A fitted clock-offset estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetEstimate {
    /// Fitted peak center: the clock offset.
    pub tau_hat: Duration,
    /// Fitted peak width (Gaussian sigma).
    pub sigma: Duration,
    /// Fitted peak amplitude, counts per bin.
    pub amplitude: f64,
    /// Fitted constant background, counts per bin.
    pub background: f64,
    /// RMS fit residual divided by the amplitude.
    pub fit_rms: f64,
}

const MAX_FIT_ITERATIONS: usize = 100;

/// Least-squares fit of `amplitude * exp(-(x - tau)^2 / (2 sigma^2)) +
/// background` to the histogram (bin-center evaluation).
///
/// Initialization comes from the max bin and moments over a window of three
/// half-max widths around it; iteration is Levenberg-Marquardt until the
/// relative parameter change drops below 1e-6, with a hard cap of 100
/// iterations (an error if reached).
pub fn fit_gaussian(hist: &CorrelationHistogram) -> Result<OffsetEstimate, SyncError> {
    let n = hist.counts.len();
    if n < 4 {
        return Err(SyncError::NoPeak { max_count: 0, background: 0.0 });
    }
    let xs: Vec<f64> = (0..n).map(|i| hist.bin_center_fs(i)).collect();
    let ys: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();

    // Peak check against a robust background estimate (median).
    let mut sorted = hist.counts.to_vec();
    sorted.sort_unstable();
    let bg_estimate = sorted[n / 2] as f64;
    let (imax, &max_count) =
        hist.counts.iter().enumerate().max_by_key(|(_, &c)| c).expect("non-empty");
    if max_count == 0 || (max_count as f64) < bg_estimate + 5.0 * bg_estimate.sqrt() {
        return Err(SyncError::NoPeak { max_count, background: bg_estimate });
    }

    // Half-max width around the peak.
    let half_level = bg_estimate + (max_count as f64 - bg_estimate) / 2.0;
    let mut left = imax;
    while left > 0 && ys[left] > half_level {
        left -= 1;
    }
    let mut right = imax;
    while right + 1 < n && ys[right] > half_level {
        right += 1;
    }
    let fwhm_bins = (right - left).max(1);

    // Moment initialization over +-3 FWHM; background from outside bins.
    let w_lo = imax.saturating_sub(3 * fwhm_bins);
    let w_hi = (imax + 3 * fwhm_bins).min(n - 1);
    let outside: Vec<f64> =
        (0..n).filter(|&i| i < w_lo || i > w_hi).map(|i| ys[i]).collect();
    let mut b0 = if outside.is_empty() {
        0.0
    } else {
        outside.iter().sum::<f64>() / outside.len() as f64
    };
    let mut a0 = (max_count as f64 - b0).max(1.0);
    let (mut m0, mut m1) = (0.0, 0.0);
    for i in w_lo..=w_hi {
        let w = (ys[i] - b0).max(0.0);
        m0 += w;
        m1 += w * xs[i];
    }
    let mut mu = if m0 > 0.0 { m1 / m0 } else { xs[imax] };
    let mut m2 = 0.0;
    for i in w_lo..=w_hi {
        let w = (ys[i] - b0).max(0.0);
        m2 += w * (xs[i] - mu) * (xs[i] - mu);
    }
    let bin_fs = hist.bin_edges[1].as_fs() as f64 - hist.bin_edges[0].as_fs() as f64;
    let mut sigma = if m0 > 0.0 && m2 > 0.0 {
        (m2 / m0).sqrt()
    } else {
        (fwhm_bins as f64 * bin_fs / 2.355).max(bin_fs / 2.0)
    };
    sigma = sigma.max(bin_fs / 10.0);

    // Levenberg-Marquardt on (A, mu, sigma, B).
    let sse = |a: f64, mu: f64, s: f64, b: f64| -> f64 {
        let mut acc = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let z = (x - mu) / s;
            let r = a * (-0.5 * z * z).exp() + b - y;
            acc += r * r;
        }
        acc
    };
    let mut lambda = 1e-3;
    let mut current_sse = sse(a0, mu, sigma, b0);
    let mut converged = false;
    for _ in 0..MAX_FIT_ITERATIONS {
        // Build normal equations.
        let mut jtj = [[0.0f64; 4]; 4];
        let mut jtr = [0.0f64; 4];
        for (x, y) in xs.iter().zip(&ys) {
            let z = (x - mu) / sigma;
            let e = (-0.5 * z * z).exp();
            let r = a0 * e + b0 - y;
            let grad = [e, a0 * e * z / sigma, a0 * e * z * z / sigma, 1.0];
            for i in 0..4 {
                jtr[i] += grad[i] * r;
                for j in 0..4 {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }
        let mut accepted = false;
        for _ in 0..12 {
            // Damped system (JtJ + lambda diag(JtJ)) delta = -Jtr.
            let mut m = jtj;
            for i in 0..4 {
                m[i][i] += lambda * jtj[i][i].max(1e-30);
            }
            let rhs = [-jtr[0], -jtr[1], -jtr[2], -jtr[3]];
            let Some(delta) = solve4(m, rhs) else {
                lambda *= 10.0;
                continue;
            };
            let cand = (
                a0 + delta[0],
                mu + delta[1],
                (sigma + delta[2]).abs().max(bin_fs / 100.0),
                b0 + delta[3],
            );
            let cand_sse = sse(cand.0, cand.1, cand.2, cand.3);
            if cand_sse.is_finite() && cand_sse <= current_sse {
                let rel = (delta[0].abs() / a0.abs().max(1e-12))
                    .max(delta[1].abs() / mu.abs().max(bin_fs))
                    .max(delta[2].abs() / sigma.abs().max(1e-12))
                    .max(delta[3].abs() / b0.abs().max(1.0));
                (a0, mu, sigma, b0) = cand;
                current_sse = cand_sse;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-6 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // Damping saturated: the surface is flat at this point.
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SyncError::NonConvergence(MAX_FIT_ITERATIONS));
    }
    let span_lo = hist.bin_edges[0].as_fs() as f64;
    let span_hi = hist.bin_edges[n].as_fs() as f64;
    if !(span_lo..span_hi).contains(&mu) {
        return Err(SyncError::PeakOutsideSpan { center_fs: mu });
    }
    let fit_rms = (current_sse / n as f64).sqrt() / a0.abs().max(1e-12);
    Ok(OffsetEstimate {
        tau_hat: Duration::from_fs_f64(mu),
        sigma: Duration::from_fs_f64(sigma.abs()),
        amplitude: a0,
        background: b0,
        fit_rms,
    })
}

/// Gaussian elimination with partial pivoting for the 4x4 LM step.
fn solve4(mut m: [[f64; 4]; 4], mut rhs: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            let (top, bottom) = m.split_at_mut(row);
            for (k, cell) in bottom[0].iter_mut().enumerate().skip(col) {
                *cell -= f * top[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..4).rev() {
        let mut acc = rhs[col];
        for k in col + 1..4 {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Some(x)
}

/// Per-window offset estimation over streamed tag batches.
///
/// Tags are routed to fixed windows of the configured length starting at
/// `origin`; a window's histogram is fitted once both streams have passed
/// its end (plus the span margin). A-stream tags choose the window; the
/// B stream is shared across adjacent windows.
#[derive(Debug)]
pub struct WindowedCorrelator {
    cfg: CorrelationConfig,
    origin: TimeTag,
    active: Vec<(usize, StreamCorrelator)>,
    /// Completed (window index, histogram) pairs in index order.
    completed: Vec<(usize, CorrelationHistogram)>,
    /// Next window index not yet activated.
    next_window: usize,
    latest_a: i128,
    latest_b: i128,
}

impl WindowedCorrelator {
    pub fn new(cfg: CorrelationConfig, origin: TimeTag) -> Self {
        WindowedCorrelator {
            cfg,
            origin,
            active: Vec::new(),
            completed: Vec::new(),
            next_window: 0,
            latest_a: i128::MIN,
            latest_b: i128::MIN,
        }
    }

    pub fn config(&self) -> &CorrelationConfig {
        &self.cfg
    }

    pub fn origin(&self) -> TimeTag {
        self.origin
    }

    fn window_index(&self, tag: TimeTag) -> Option<usize> {
        let rel = (tag - self.origin).as_fs();
        if rel < 0 {
            return None;
        }
        Some((rel / self.cfg.window.as_fs()) as usize)
    }

    /// A window must exist from span_hi before its start: B tags that early
    /// can still pair with its first A tags.
    fn activate_through(&mut self, t_fs: i128) {
        let window_fs = self.cfg.window.as_fs();
        let lead = self.cfg.span.1.as_fs().max(0);
        loop {
            let start = self.origin.as_fs() + self.next_window as i128 * window_fs;
            if start - lead > t_fs {
                break;
            }
            self.active.push((self.next_window, StreamCorrelator::new(&self.cfg)));
            self.next_window += 1;
        }
    }

    pub fn push_a(&mut self, tag: TimeTag) {
        let Some(idx) = self.window_index(tag) else { return };
        self.activate_through(tag.as_fs());
        self.latest_a = tag.as_fs();
        for (i, corr) in &mut self.active {
            if *i == idx {
                corr.push_a(tag);
            }
        }
        self.reap();
    }

    pub fn push_b(&mut self, tag: TimeTag) {
        self.activate_through(tag.as_fs());
        self.latest_b = tag.as_fs();
        for (_, corr) in &mut self.active {
            corr.push_b(tag);
        }
        self.reap();
    }

    /// Window k is complete once the A stream has passed its end and the
    /// B stream has passed end - span_lo (the last partner any of its
    /// A tags could need).
    fn reap(&mut self) {
        let window_fs = self.cfg.window.as_fs();
        let lo = self.cfg.span.0.as_fs();
        let origin = self.origin.as_fs();
        let mut k = 0;
        while k < self.active.len() {
            let idx = self.active[k].0;
            let end = origin + (idx as i128 + 1) * window_fs;
            if self.latest_a >= end && self.latest_b >= end - lo {
                let (i, corr) = self.active.remove(k);
                self.completed.push((i, corr.finish()));
            } else {
                k += 1;
            }
        }
        self.completed.sort_by_key(|(i, _)| *i);
    }

    /// Takes all windows completed so far, in index order.
    pub fn drain_completed(&mut self) -> Vec<(usize, CorrelationHistogram)> {
        std::mem::take(&mut self.completed)
    }

    /// Finalizes any still-active windows (end of run). Partial windows are
    /// returned too; callers decide whether to fit them.
    pub fn finish(mut self) -> Vec<(usize, CorrelationHistogram)> {
        let mut out = std::mem::take(&mut self.completed);
        let active = std::mem::take(&mut self.active);
        for (i, corr) in active {
            out.push((i, corr.finish()));
        }
        out.sort_by_key(|(i, _)| *i);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::ClockId;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn series(id: ClockId, fs: &[i128]) -> TimestampSeries {
        TimestampSeries::from_tags(id, fs.iter().map(|&t| TimeTag::from_fs(t)).collect())
    }

    /// The O(N^2) oracle the streaming correlator must match bin for bin.
    fn brute_force(
        a: &TimestampSeries,
        b: &TimestampSeries,
        cfg: &CorrelationConfig,
    ) -> Vec<u64> {
        let lo = cfg.span.0.as_fs();
        let hi = cfg.span.1.as_fs();
        let bin = cfg.bin_width.as_fs();
        let mut counts = vec![0u64; cfg.n_bins()];
        for &ta in a.tags() {
            for &tb in b.tags() {
                let d = (ta - tb).as_fs();
                if d >= lo && d < hi {
                    counts[((d - lo) / bin) as usize] += 1;
                }
            }
        }
        counts
    }

    fn default_cfg() -> CorrelationConfig {
        CorrelationConfig::default()
    }

    #[test]
    fn exact_shift_gives_single_peaked_bin() {
        let base: Vec<i128> = (0..500).map(|i| i * 10_000_000).collect();
        let shifted: Vec<i128> = base.iter().map(|t| t + 868_100).collect();
        let a = series(ClockId::A, &shifted);
        let b = series(ClockId::B, &base);
        let hist = cross_correlate(&a, &b, &default_cfg());
        let (imax, &max) = hist.counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap();
        assert_eq!(max, 500);
        assert_eq!(hist.total_counts(), 500);
        let center = hist.bin_center_fs(imax);
        assert!((center - 868_100.0).abs() <= 2000.0, "peak bin at {center}");
    }

    #[test]
    fn zero_shift_peaks_at_zero() {
        let base: Vec<i128> = (0..200).map(|i| i * 50_000_000).collect();
        let a = series(ClockId::A, &base);
        let b = series(ClockId::B, &base);
        let hist = cross_correlate(&a, &b, &default_cfg());
        let (imax, _) = hist.counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap();
        let center = hist.bin_center_fs(imax);
        assert!(center.abs() <= 2000.0, "peak at {center}");
    }

    #[test]
    fn empty_inputs_yield_zero_histogram() {
        let a = TimestampSeries::new(ClockId::A);
        let b = TimestampSeries::new(ClockId::B);
        let hist = cross_correlate(&a, &b, &default_cfg());
        assert_eq!(hist.total_counts(), 0);
        assert_eq!(hist.counts.len(), default_cfg().n_bins());
    }

    #[test]
    fn uniform_streams_give_flat_background_at_analytic_rate() {
        // Uniform independent streams: mean counts per bin is
        // rate_a * rate_b * T * bin_width.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let t_fs: i128 = 2_000_000_000_000_000; // 2 s
        let (na, nb) = (6000usize, 8000usize);
        let mut a_tags: Vec<i128> = (0..na).map(|_| rng.random_range(0..t_fs)).collect();
        let mut b_tags: Vec<i128> = (0..nb).map(|_| rng.random_range(0..t_fs)).collect();
        a_tags.sort_unstable();
        b_tags.sort_unstable();
        let a = series(ClockId::A, &a_tags);
        let b = series(ClockId::B, &b_tags);
        let cfg = CorrelationConfig {
            bin_width: Duration::from_ps(400),
            span: (Duration::from_ns(-200), Duration::from_ns(200)),
            ..Default::default()
        };
        let hist = cross_correlate(&a, &b, &cfg);
        assert_eq!(hist.counts, brute_force(&a, &b, &cfg));
        let t_s = 2.0;
        let expected_per_bin = (na as f64 / t_s) * (nb as f64 / t_s) * t_s * 400e-12;
        let k = hist.counts.len() as f64;
        let mean = hist.total_counts() as f64 / k;
        let sigma_mean = (expected_per_bin / k).sqrt();
        assert!(
            (mean - expected_per_bin).abs() < 3.0 * sigma_mean + 0.05,
            "background mean {mean} vs analytic {expected_per_bin}"
        );
    }

    #[test]
    fn streaming_interleaved_pushes_match_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let cfg = CorrelationConfig {
            bin_width: Duration::from_fs(700),
            span: (Duration::from_fs(-50_000), Duration::from_fs(30_000)),
            ..Default::default()
        };
        let mut a_tags: Vec<i128> = (0..600).map(|_| rng.random_range(0..1_000_000)).collect();
        let mut b_tags: Vec<i128> = (0..500).map(|_| rng.random_range(0..1_000_000)).collect();
        a_tags.sort_unstable();
        b_tags.sort_unstable();
        // Interleave pushes by time to exercise eviction.
        let mut corr = StreamCorrelator::new(&cfg);
        let (mut i, mut j) = (0, 0);
        while i < a_tags.len() || j < b_tags.len() {
            let ta = a_tags.get(i).copied().unwrap_or(i128::MAX);
            let tb = b_tags.get(j).copied().unwrap_or(i128::MAX);
            if ta <= tb {
                corr.push_a(TimeTag::from_fs(ta));
                i += 1;
            } else {
                corr.push_b(TimeTag::from_fs(tb));
                j += 1;
            }
        }
        let hist = corr.finish();
        let a = series(ClockId::A, &a_tags);
        let b = series(ClockId::B, &b_tags);
        assert_eq!(hist.counts, brute_force(&a, &b, &cfg));
        assert_eq!(hist.n_a, 600);
        assert_eq!(hist.n_b, 500);
    }

    #[test]
    fn shift_equivariance_translates_histogram() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut a_tags: Vec<i128> = (0..400).map(|_| rng.random_range(0..10_000_000)).collect();
        let mut b_tags: Vec<i128> = (0..400).map(|_| rng.random_range(0..10_000_000)).collect();
        a_tags.sort_unstable();
        b_tags.sort_unstable();
        let cfg = CorrelationConfig {
            bin_width: Duration::from_fs(1000),
            span: (Duration::from_fs(-400_000), Duration::from_fs(400_000)),
            ..Default::default()
        };
        let shift_bins = 25i128;
        let d = shift_bins * 1000;
        let shifted: Vec<i128> = a_tags.iter().map(|t| t + d).collect();
        let h1 = cross_correlate(&series(ClockId::A, &a_tags), &series(ClockId::B, &b_tags), &cfg);
        let h2 =
            cross_correlate(&series(ClockId::A, &shifted), &series(ClockId::B, &b_tags), &cfg);
        let n = h1.counts.len();
        for i in 0..n - shift_bins as usize {
            assert_eq!(
                h1.counts[i],
                h2.counts[i + shift_bins as usize],
                "bin {i} not translated"
            );
        }
    }

    fn gaussian_histogram(
        center_fs: f64,
        sigma_fs: f64,
        amplitude: f64,
        background: f64,
        cfg: &CorrelationConfig,
        noise_seed: Option<u64>,
    ) -> CorrelationHistogram {
        let n = cfg.n_bins();
        let lo = cfg.span.0.as_fs();
        let bin = cfg.bin_width.as_fs();
        let mut edges = Vec::with_capacity(n + 1);
        for i in 0..=n {
            edges.push(Duration::from_fs(lo + i as i128 * bin));
        }
        let mut rng = noise_seed.map(ChaCha12Rng::seed_from_u64);
        let counts: Vec<u64> = (0..n)
            .map(|i| {
                let x = (edges[i].as_fs() + edges[i + 1].as_fs()) as f64 / 2.0;
                let z = (x - center_fs) / sigma_fs;
                let mean = amplitude * (-0.5 * z * z).exp() + background;
                match &mut rng {
                    Some(r) => {
                        // Gaussian approximation to Poisson noise is fine at
                        // these counts.
                        let noised = mean + mean.sqrt() * r.sample::<f64, _>(StandardNormal);
                        noised.round().max(0.0) as u64
                    }
                    None => mean.round() as u64,
                }
            })
            .collect();
        CorrelationHistogram { bin_edges: edges, counts, n_a: 0, n_b: 0 }
    }

    #[test]
    fn fit_recovers_exact_gaussian() {
        let cfg = default_cfg();
        // Beyond rounding to integer counts, keep the curve exact by using
        // a large amplitude.
        let hist = gaussian_histogram(868_100.0, 150_000.0, 200_000.0, 0.0, &cfg, None);
        let est = fit_gaussian(&hist).unwrap();
        let err = (est.tau_hat.as_fs_f64() - 868_100.0).abs();
        assert!(err < 40.0, "center error {err} fs");
        assert!((est.sigma.as_fs_f64() - 150_000.0).abs() < 200.0);
        assert!(est.fit_rms < 1e-5);
    }

    #[test]
    fn fit_is_machine_accurate_on_noise_free_float_counts() {
        // Build a histogram whose counts are exactly representable, then
        // check relative accuracy of the center against 1e-9.
        let cfg = CorrelationConfig {
            bin_width: Duration::from_ps(4),
            span: (Duration::from_fs(400_000), Duration::from_fs(1_400_000)),
            ..Default::default()
        };
        let hist = gaussian_histogram(868_100.0, 150_000.0, 4_000_000.0, 0.0, &cfg, None);
        let est = fit_gaussian(&hist).unwrap();
        let rel = (est.tau_hat.as_fs_f64() - 868_100.0).abs() / 868_100.0;
        // Integer femtosecond rounding of tau_hat bounds this at ~6e-10.
        assert!(rel < 1e-9, "relative center error {rel}");
    }

    #[test]
    fn symmetric_histogram_fits_zero_center() {
        let cfg = default_cfg();
        let hist = gaussian_histogram(0.0, 200_000.0, 50_000.0, 20.0, &cfg, None);
        let est = fit_gaussian(&hist).unwrap();
        assert!(est.tau_hat.as_fs_f64().abs() < 40.0);
        assert!((est.background - 20.0).abs() < 1.0);
    }

    #[test]
    fn swapping_streams_negates_the_fitted_center() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut base: Vec<i128> = (0..20_000)
            .map(|_| rng.random_range(0..1_000_000_000_000i128))
            .collect();
        base.sort_unstable();
        let jittered: Vec<i128> = base
            .iter()
            .map(|t| {
                t + 868_100
                    + (120_000.0 * rng.sample::<f64, _>(StandardNormal)).round() as i128
            })
            .collect();
        let a = TimestampSeries::from_tags(
            ClockId::A,
            jittered.iter().map(|&t| TimeTag::from_fs(t)).collect(),
        );
        let b = series(ClockId::B, &base);
        let forward = fit_gaussian(&cross_correlate(&a, &b, &default_cfg())).unwrap();
        let backward = fit_gaussian(&cross_correlate(&b, &a, &default_cfg())).unwrap();
        let sum = forward.tau_hat.as_fs_f64() + backward.tau_hat.as_fs_f64();
        assert!(sum.abs() < 300.0, "tau sum {sum} fs");
        assert!((forward.tau_hat.as_fs_f64() - 868_100.0).abs() < 3000.0);
    }

    #[test]
    fn estimator_scatter_matches_sigma_over_sqrt_n() {
        let cfg = default_cfg();
        let sigma_fs = 150_000.0;
        let bin_fs = 4000.0;
        // Total peak counts ~ A * sigma * sqrt(2 pi) / bin.
        let amplitude = 1000.0;
        let n_peak = amplitude * sigma_fs * (2.0 * std::f64::consts::PI).sqrt() / bin_fs;
        let predicted = sigma_fs / n_peak.sqrt();
        let mut estimates = Vec::new();
        for seed in 0..60 {
            let hist = gaussian_histogram(868_100.0, sigma_fs, amplitude, 0.0, &cfg, Some(seed));
            estimates.push(fit_gaussian(&hist).unwrap().tau_hat.as_fs_f64());
        }
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / (estimates.len() - 1) as f64)
            .sqrt();
        assert!(
            (sd / predicted - 1.0).abs() < 0.3,
            "scatter {sd} fs vs predicted {predicted} fs"
        );
    }

    #[test]
    fn featureless_histogram_reports_no_peak() {
        let cfg = default_cfg();
        let hist = gaussian_histogram(0.0, 200_000.0, 0.0, 400.0, &cfg, Some(3));
        assert!(matches!(fit_gaussian(&hist), Err(SyncError::NoPeak { .. })));
        let zeros = gaussian_histogram(0.0, 1.0, 0.0, 0.0, &cfg, None);
        assert!(matches!(fit_gaussian(&zeros), Err(SyncError::NoPeak { .. })));
    }

    #[test]
    fn windowed_correlator_matches_per_window_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let window_fs = 1_000_000i128;
        let cfg = CorrelationConfig {
            bin_width: Duration::from_fs(500),
            span: (Duration::from_fs(-20_000), Duration::from_fs(20_000)),
            window: Duration::from_fs(window_fs),
        };
        let mut a_tags: Vec<i128> = (0..3000).map(|_| rng.random_range(0..5_000_000)).collect();
        let mut b_tags: Vec<i128> = (0..3000).map(|_| rng.random_range(0..5_000_000)).collect();
        a_tags.sort_unstable();
        b_tags.sort_unstable();
        let mut wc = WindowedCorrelator::new(cfg, TimeTag::EPOCH);
        let (mut i, mut j) = (0, 0);
        while i < a_tags.len() || j < b_tags.len() {
            let ta = a_tags.get(i).copied().unwrap_or(i128::MAX);
            let tb = b_tags.get(j).copied().unwrap_or(i128::MAX);
            if ta <= tb {
                wc.push_a(TimeTag::from_fs(ta));
                i += 1;
            } else {
                wc.push_b(TimeTag::from_fs(tb));
                j += 1;
            }
        }
        let windows = wc.finish();
        // Five populated windows, possibly plus an empty lead-in for the
        // next one.
        assert!(windows.len() >= 5 && windows.len() <= 6);
        for (idx, hist) in windows {
            let lo = idx as i128 * window_fs;
            let hi = lo + window_fs;
            let aw: Vec<i128> =
                a_tags.iter().copied().filter(|&t| t >= lo && t < hi).collect();
            let oracle = brute_force(
                &series(ClockId::A, &aw),
                &series(ClockId::B, &b_tags),
                &cfg,
            );
            assert_eq!(hist.counts, oracle, "window {idx}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        #[test]
        fn correlator_matches_brute_force(
            mut a_tags in proptest::collection::vec(0i128..1_000_000, 0..250),
            mut b_tags in proptest::collection::vec(0i128..1_000_000, 0..250),
            bin in 1i128..5_000,
            lo_off in -50i128..50,
            width_bins in 1i128..64,
        ) {
            a_tags.sort_unstable();
            b_tags.sort_unstable();
            let lo = lo_off * 1000;
            let cfg = CorrelationConfig {
                bin_width: Duration::from_fs(bin),
                span: (Duration::from_fs(lo), Duration::from_fs(lo + width_bins * bin)),
                ..Default::default()
            };
            let a = series(ClockId::A, &a_tags);
            let b = series(ClockId::B, &b_tags);
            let hist = cross_correlate(&a, &b, &cfg);
            prop_assert_eq!(hist.counts, brute_force(&a, &b, &cfg));
        }
    }
}
