//! Two-photon interference model: the relative coincidence rate at the
//! output of a balanced coupler as a function of the signal/idler path
//! delay imbalance.
//!
//! Two routes to the same curve live here. The physics route integrates the
//! joint spectral amplitude numerically:
//!
//! ```text
//! P(tau) ~ integral of |A(ws,wi)|^2 - |A(ws,wi) A(wi,ws)| cos((ws-wi) tau)
//! ```
//!
//! normalized so the large-delay limit is 1. The fast route is the
//! two-parameter envelope `1 - V exp(-(tau/Tc)^2)` that the event-level
//! simulation uses; [`dip_from_jsa`] fits the envelope to the quadrature
//! curve so the two stay tied together.

use serde::{Deserialize, Serialize};

use crate::error::PhotonicsError;
use crate::timebase::Duration;

/// Speed of light in vacuum, m/s.
pub const VACUUM_C: f64 = 299_792_458.0;

/// Angular frequency (rad/s) of light at the given vacuum wavelength (m).
pub fn angular_frequency_for_wavelength(wavelength_m: f64) -> f64 {
    2.0 * std::f64::consts::PI * VACUUM_C / wavelength_m
}

/// Gaussian sigma (rad/s) of the pair sum-frequency axis for a pump with
/// the given center wavelength and 3-dB (FWHM) bandwidth, both in meters.
pub fn pump_sigma_from_bandwidth(center_wavelength_m: f64, fwhm_bandwidth_m: f64) -> f64 {
    let fwhm_hz = VACUUM_C * fwhm_bandwidth_m / (center_wavelength_m * center_wavelength_m);
    let fwhm_rad = 2.0 * std::f64::consts::PI * fwhm_hz;
    // FWHM = 2 sqrt(2 ln 2) sigma for a Gaussian.
    fwhm_rad / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Gaussian parameterization of the two-photon joint spectral amplitude.
///
/// The amplitude is a product of Gaussians along the sum-frequency axis
/// (`sigma_plus`, set by the pump bandwidth) and the difference-frequency
/// axis (`sigma_minus`, set by phase matching):
///
/// ```text
/// A(ws, wi) = N exp(-(u - u0)^2 / (4 sigma_plus^2))
///               exp(-(v - v0)^2 / (4 sigma_minus^2))
/// u = ws + wi,  v = ws - wi
/// ```
///
/// `N` is fixed so that the squared amplitude integrates to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpectralAmplitude {
    center_s: f64,
    center_i: f64,
    sigma_plus: f64,
    sigma_minus: f64,
    norm: f64,
}

impl JointSpectralAmplitude {
    pub fn new(
        center_s: f64,
        center_i: f64,
        sigma_plus: f64,
        sigma_minus: f64,
    ) -> Result<Self, PhotonicsError> {
        if !(sigma_plus > 0.0) || !(sigma_minus > 0.0) {
            return Err(PhotonicsError::InvalidParameter(format!(
                "sigma_plus and sigma_minus must be positive, got {sigma_plus}, {sigma_minus}"
            )));
        }
        if !(center_s > 0.0) || !(center_i > 0.0) {
            return Err(PhotonicsError::InvalidParameter(
                "photon center frequencies must be positive".into(),
            ));
        }
        let norm = 1.0 / (std::f64::consts::PI * sigma_plus * sigma_minus).sqrt();
        Ok(JointSpectralAmplitude { center_s, center_i, sigma_plus, sigma_minus, norm })
    }

    /// Builds the amplitude whose interferogram has the requested visibility
    /// and coherence time.
    ///
    /// For this Gaussian family the envelope parameters are analytic:
    /// `Tc = sqrt(2)/sigma_minus`, and visibility below one comes from
    /// splitting the signal/idler center frequencies,
    /// `V = exp(-(cs - ci)^2 / (2 sigma_minus^2))`.
    pub fn from_dip_targets(
        visibility: f64,
        coherence_time: Duration,
        center: f64,
        sigma_plus: f64,
    ) -> Result<Self, PhotonicsError> {
        if !(visibility > 0.0 && visibility <= 1.0) {
            return Err(PhotonicsError::InvalidParameter(format!(
                "target visibility must be in (0, 1], got {visibility}"
            )));
        }
        if !coherence_time.is_positive() {
            return Err(PhotonicsError::InvalidParameter(
                "target coherence time must be positive".into(),
            ));
        }
        let tc_s = coherence_time.as_secs_f64();
        let sigma_minus = std::f64::consts::SQRT_2 / tc_s;
        let split = sigma_minus * (2.0 * (1.0 / visibility).ln()).sqrt();
        Self::new(center + split / 2.0, center - split / 2.0, sigma_plus, sigma_minus)
    }

    /// Evaluates the normalized amplitude at `(ws, wi)` in rad/s.
    pub fn amplitude(&self, ws: f64, wi: f64) -> f64 {
        let u = ws + wi - (self.center_s + self.center_i);
        let v = ws - wi - (self.center_s - self.center_i);
        self.norm
            * (-(u * u) / (4.0 * self.sigma_plus * self.sigma_plus)
                - (v * v) / (4.0 * self.sigma_minus * self.sigma_minus))
                .exp()
    }

    pub fn center_s(&self) -> f64 {
        self.center_s
    }

    pub fn center_i(&self) -> f64 {
        self.center_i
    }

    pub fn sigma_plus(&self) -> f64 {
        self.sigma_plus
    }

    pub fn sigma_minus(&self) -> f64 {
        self.sigma_minus
    }

    /// True when the amplitude is symmetric under signal/idler exchange.
    pub fn is_exchange_symmetric(&self) -> bool {
        self.center_s == self.center_i
    }
}

/// Midpoint-rule grid for the interferogram integral.
///
/// The grid is rectangular and uniform over the sum/difference frequency
/// axes, where the Gaussian amplitude is axis-aligned. Points per sigma and
/// the span apply to each axis independently. For large delays the
/// difference-axis step is refined further so the cosine stays resolved, up
/// to `max_axis_points`; past that cap the oscillation dephases within the
/// envelope and the integral is already in its large-delay limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Grid points per Gaussian sigma on each axis. Must be >= 8.
    pub points_per_sigma: f64,
    /// Half-span of each axis in sigmas. Must be >= 5.
    pub span_sigmas: f64,
    /// Hard cap on points per axis once oscillation refinement kicks in.
    pub max_axis_points: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { points_per_sigma: 16.0, span_sigmas: 6.0, max_axis_points: 2_000_000 }
    }
}

impl QuadratureSpec {
    fn check(&self) -> Result<(), PhotonicsError> {
        if !(self.points_per_sigma >= 8.0) {
            return Err(PhotonicsError::GridUnderresolved(format!(
                "points_per_sigma {} < 8",
                self.points_per_sigma
            )));
        }
        if !(self.span_sigmas >= 5.0) {
            return Err(PhotonicsError::GridUnderresolved(format!(
                "span_sigmas {} < 5",
                self.span_sigmas
            )));
        }
        Ok(())
    }

    /// Halves the grid spacing; used by convergence checks.
    pub fn refined(&self) -> QuadratureSpec {
        QuadratureSpec {
            points_per_sigma: self.points_per_sigma * 2.0,
            span_sigmas: self.span_sigmas,
            max_axis_points: self.max_axis_points.saturating_mul(2),
        }
    }
}

/// Midpoint sum of `f` over `[lo, hi]` with `n` cells.
fn midpoint_sum(lo: f64, hi: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let x = lo + (k as f64 + 0.5) * h;
        acc += f(x);
    }
    acc * h
}

/// Relative coincidence probability `P(tau) / P(infinity)` by numeric
/// quadrature of the interferogram integral over the joint spectrum.
///
/// Exactly zero delay on an exchange-symmetric amplitude gives 0; large
/// delays give 1. Returns a grid-underresolved error when `spec` violates
/// its preconditions.
pub fn hom_coincidence_probability(
    jsa: &JointSpectralAmplitude,
    delay: Duration,
    spec: &QuadratureSpec,
) -> Result<f64, PhotonicsError> {
    spec.check()?;
    let tau = delay.as_secs_f64();
    let sp = jsa.sigma_plus;
    let sm = jsa.sigma_minus;
    let u0 = jsa.center_s + jsa.center_i;
    let v0 = jsa.center_s - jsa.center_i;

    // Sum axis: only the |A|^2 Gaussian, centered at u0.
    let u_lo = u0 - spec.span_sigmas * sp;
    let u_hi = u0 + spec.span_sigmas * sp;
    let n_u = ((u_hi - u_lo) / (sp / spec.points_per_sigma)).ceil() as usize;
    let i_u = midpoint_sum(u_lo, u_hi, n_u.max(2), |u| {
        let d = u - u0;
        (-(d * d) / (2.0 * sp * sp)).exp()
    });

    // Difference axis: the direct term is centered at v0, the interference
    // term at 0, so the span covers both.
    let v_lo = v0.min(0.0) - spec.span_sigmas * sm;
    let v_hi = v0.max(0.0) + spec.span_sigmas * sm;
    let mut h_v = sm / spec.points_per_sigma;
    let osc_step = if tau != 0.0 { std::f64::consts::PI / (4.0 * tau.abs()) } else { f64::MAX };
    if osc_step < h_v {
        h_v = osc_step;
    }
    let n_v = (((v_hi - v_lo) / h_v).ceil() as usize).clamp(2, spec.max_axis_points);

    let direct = midpoint_sum(v_lo, v_hi, n_v, |v| {
        let d = v - v0;
        (-(d * d) / (2.0 * sm * sm)).exp()
    });
    let cross_envelope = (-(v0 * v0) / (2.0 * sm * sm)).exp();
    let interference = midpoint_sum(v_lo, v_hi, n_v, |v| {
        (-(v * v) / (2.0 * sm * sm)).exp() * (v * tau).cos()
    }) * cross_envelope;

    // P ~ (1/2) N^2 Iu (direct - interference); the prefactors cancel in the
    // ratio against the large-delay limit (1/2) N^2 Iu * direct.
    let _ = i_u;
    Ok((direct - interference) / direct)
}

/// The two-parameter interference dip used by the event-level simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomDipModel {
    /// Fractional dip depth, in [0, 1].
    pub visibility: f64,
    /// 1/e half-width of the dip in delay.
    pub coherence_time: Duration,
    /// Coincidence rate (counts/s) far from the dip.
    pub baseline_rate: f64,
}

impl HomDipModel {
    pub fn new(
        visibility: f64,
        coherence_time: Duration,
        baseline_rate: f64,
    ) -> Result<Self, PhotonicsError> {
        if !(0.0..=1.0).contains(&visibility) {
            return Err(PhotonicsError::InvalidParameter(format!(
                "visibility must be in [0, 1], got {visibility}"
            )));
        }
        if !coherence_time.is_positive() {
            return Err(PhotonicsError::InvalidParameter("coherence time must be positive".into()));
        }
        if !(baseline_rate > 0.0) {
            return Err(PhotonicsError::InvalidParameter("baseline rate must be positive".into()));
        }
        Ok(HomDipModel { visibility, coherence_time, baseline_rate })
    }

    /// Relative coincidence `1 - V exp(-(tau/Tc)^2)`, in `[1 - V, 1]`.
    pub fn envelope(&self, delay: Duration) -> f64 {
        let x = delay.as_secs_f64() / self.coherence_time.as_secs_f64();
        1.0 - self.visibility * (-x * x).exp()
    }

    /// Expected coincidence rate (counts/s) at the given delay imbalance.
    pub fn expected_rate(&self, delay: Duration) -> f64 {
        self.baseline_rate * self.envelope(delay)
    }
}

/// Envelope parameters extracted from a quadrature curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipFit {
    pub visibility: f64,
    pub coherence_time: Duration,
    /// RMS of (envelope - quadrature) over the fitted delay range.
    pub residual_rms: f64,
}

impl DipFit {
    pub fn into_model(self, baseline_rate: f64) -> Result<HomDipModel, PhotonicsError> {
        HomDipModel::new(self.visibility.clamp(0.0, 1.0), self.coherence_time, baseline_rate)
    }
}

/// Fits the two-parameter envelope to the quadrature interferogram of `jsa`
/// over delays spanning five coherence times each side of zero.
///
/// Returns a fit-diverged error if the residual RMS exceeds 0.05, i.e. the
/// Gaussian envelope cannot represent the computed curve.
pub fn dip_from_jsa(jsa: &JointSpectralAmplitude) -> Result<DipFit, PhotonicsError> {
    dip_from_jsa_with(jsa, &QuadratureSpec::default())
}

pub fn dip_from_jsa_with(
    jsa: &JointSpectralAmplitude,
    spec: &QuadratureSpec,
) -> Result<DipFit, PhotonicsError> {
    spec.check()?;
    // For this Gaussian family the coherence scale is sqrt(2)/sigma_minus;
    // use it to place the sample grid, then fit without assuming it.
    let tc_guess = std::f64::consts::SQRT_2 / jsa.sigma_minus;
    let n_samples = 81;
    let mut taus = Vec::with_capacity(n_samples);
    let mut depths = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let frac = k as f64 / (n_samples - 1) as f64;
        let tau_s = (-5.0 + 10.0 * frac) * tc_guess;
        let delay = Duration::from_fs_f64(tau_s * 1e15);
        let p = hom_coincidence_probability(jsa, delay, spec)?;
        taus.push(delay.as_secs_f64());
        depths.push(1.0 - p);
    }

    let max_depth = depths.iter().cloned().fold(0.0, f64::max);
    if max_depth < 1e-9 {
        // Flat response: zero visibility, coherence time is unconstrained.
        return Ok(DipFit {
            visibility: 0.0,
            coherence_time: Duration::from_fs_f64(tc_guess * 1e15),
            residual_rms: 0.0,
        });
    }

    // Log-linearized weighted least squares: ln(depth) = ln V - tau^2/Tc^2,
    // weighted by depth^2 so the deep part of the dip dominates.
    let (mut s_w, mut s_wx, mut s_wy, mut s_wxx, mut s_wxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&tau, &d) in taus.iter().zip(&depths) {
        if d <= max_depth * 1e-4 {
            continue;
        }
        let w = d * d;
        let x = tau * tau;
        let y = d.ln();
        s_w += w;
        s_wx += w * x;
        s_wy += w * y;
        s_wxx += w * x * x;
        s_wxy += w * x * y;
    }
    let det = s_w * s_wxx - s_wx * s_wx;
    let (mut v, mut tc) = if det.abs() > 0.0 {
        let ln_v = (s_wy * s_wxx - s_wx * s_wxy) / det;
        let slope = (s_w * s_wxy - s_wx * s_wy) / det;
        let tc = if slope < 0.0 { (-1.0 / slope).sqrt() } else { tc_guess };
        (ln_v.exp(), tc)
    } else {
        (max_depth, tc_guess)
    };

    // Gauss-Newton refinement of the untransformed squared error.
    for _ in 0..30 {
        let (mut jj_vv, mut jj_vt, mut jj_tt, mut g_v, mut g_t) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&tau, &d) in taus.iter().zip(&depths) {
            let x = tau / tc;
            let e = (-x * x).exp();
            let r = v * e - d;
            let dv = e;
            let dt = v * e * 2.0 * tau * tau / (tc * tc * tc);
            jj_vv += dv * dv;
            jj_vt += dv * dt;
            jj_tt += dt * dt;
            g_v += dv * r;
            g_t += dt * r;
        }
        let det = jj_vv * jj_tt - jj_vt * jj_vt;
        if det.abs() < 1e-300 {
            break;
        }
        let step_v = (jj_tt * g_v - jj_vt * g_t) / det;
        let step_t = (jj_vv * g_t - jj_vt * g_v) / det;
        v -= step_v;
        tc -= step_t;
        if tc <= 0.0 {
            tc = tc_guess;
        }
        if step_v.abs() <= 1e-12 * v.abs().max(1e-12)
            && step_t.abs() <= 1e-12 * tc.abs().max(1e-30)
        {
            break;
        }
    }

    let mut sq = 0.0;
    for (&tau, &d) in taus.iter().zip(&depths) {
        let x = tau / tc;
        let r = v * (-x * x).exp() - d;
        sq += r * r;
    }
    let residual_rms = (sq / taus.len() as f64).sqrt();
    if residual_rms > 0.05 {
        return Err(PhotonicsError::FitDiverged { residual_rms });
    }
    Ok(DipFit {
        visibility: v,
        coherence_time: Duration::from_fs_f64(tc * 1e15),
        residual_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CENTER: f64 = 1.1937e15; // rad/s, ~1578 nm

    fn symmetric_jsa(sigma_plus: f64, sigma_minus: f64) -> JointSpectralAmplitude {
        JointSpectralAmplitude::new(CENTER, CENTER, sigma_plus, sigma_minus).unwrap()
    }

    /// Trapezoid-rule evaluation of the interferogram in the original
    /// (ws, wi) axes: the independent cross-check for the midpoint code.
    fn trapezoid_reference(jsa: &JointSpectralAmplitude, tau_s: f64, n: usize) -> f64 {
        let half = 6.0 * (jsa.sigma_plus() + jsa.sigma_minus()) / 2.0;
        let (s_lo, s_hi) = (jsa.center_s() - half, jsa.center_s() + half);
        let (i_lo, i_hi) = (jsa.center_i() - half, jsa.center_i() + half);
        let hs = (s_hi - s_lo) / n as f64;
        let hi_step = (i_hi - i_lo) / n as f64;
        let mut direct = 0.0;
        let mut cross = 0.0;
        for a in 0..=n {
            let ws = s_lo + a as f64 * hs;
            let wa = if a == 0 || a == n { 0.5 } else { 1.0 };
            for b in 0..=n {
                let wi = i_lo + b as f64 * hi_step;
                let wb = if b == 0 || b == n { 0.5 } else { 1.0 };
                let w = wa * wb;
                let amp = jsa.amplitude(ws, wi);
                let swapped = jsa.amplitude(wi, ws);
                direct += w * amp * amp;
                cross += w * (amp * swapped).abs() * ((ws - wi) * tau_s).cos();
            }
        }
        (direct - cross) / direct
    }

    #[test]
    fn symmetric_jsa_dips_to_zero_at_zero_delay() {
        let jsa = symmetric_jsa(2.0e12, 5.0e11);
        let p = hom_coincidence_probability(&jsa, Duration::ZERO, &QuadratureSpec::default())
            .unwrap();
        assert!(p.abs() < 1e-6, "dip floor {p}");
    }

    #[test]
    fn huge_delay_returns_to_baseline() {
        let jsa = symmetric_jsa(2.0e12, 5.0e11);
        let tc = std::f64::consts::SQRT_2 / jsa.sigma_minus();
        let delay = Duration::from_fs_f64(1e6 * tc * 1e15);
        let p = hom_coincidence_probability(&jsa, delay, &QuadratureSpec::default()).unwrap();
        assert!((p - 1.0).abs() < 1e-3, "large-delay limit {p}");
    }

    #[test]
    fn quadrature_matches_independent_trapezoid_reference() {
        // sigma_plus = 2 sigma_minus keeps the reference grid affordable.
        let sm = 5.0e11;
        let jsa = JointSpectralAmplitude::new(CENTER + 2.0e11, CENTER - 2.0e11, 2.0 * sm, sm)
            .unwrap();
        let tc = std::f64::consts::SQRT_2 / sm;
        for frac in [0.0, 0.5, 1.0, 2.0] {
            let tau_s = frac * tc;
            let mine = hom_coincidence_probability(
                &jsa,
                Duration::from_fs_f64(tau_s * 1e15),
                &QuadratureSpec { points_per_sigma: 32.0, ..Default::default() },
            )
            .unwrap();
            let reference = trapezoid_reference(&jsa, tau_s, 2600);
            assert!(
                (mine - reference).abs() < 1e-4,
                "tau = {frac} Tc: quadrature {mine} vs reference {reference}"
            );
        }
    }

    #[test]
    fn quadrature_is_symmetric_in_delay() {
        let jsa = symmetric_jsa(1.5e12, 4.0e11);
        let spec = QuadratureSpec::default();
        for fs in [500.0, 1500.0, 4000.0] {
            let plus =
                hom_coincidence_probability(&jsa, Duration::from_fs_f64(fs), &spec).unwrap();
            let minus =
                hom_coincidence_probability(&jsa, Duration::from_fs_f64(-fs), &spec).unwrap();
            assert!((plus - minus).abs() < 1e-12);
        }
    }

    #[test]
    fn halving_grid_spacing_is_converged() {
        let jsa = JointSpectralAmplitude::from_dip_targets(
            0.68,
            Duration::from_ps(3),
            CENTER,
            pump_sigma_from_bandwidth(789e-9, 22e-9),
        )
        .unwrap();
        let spec = QuadratureSpec::default();
        for fs in [0.0, 1000.0, 3000.0, 9000.0] {
            let d = Duration::from_fs_f64(fs);
            let coarse = hom_coincidence_probability(&jsa, d, &spec).unwrap();
            let fine = hom_coincidence_probability(&jsa, d, &spec.refined()).unwrap();
            assert!((coarse - fine).abs() < 1e-4, "not converged at {fs} fs");
        }
    }

    #[test]
    fn normalization_integrates_to_one() {
        // Direct 2D trapezoid of |A|^2 in the original axes.
        let jsa = JointSpectralAmplitude::new(CENTER + 1.0e11, CENTER - 1.0e11, 1.2e12, 4.0e11)
            .unwrap();
        let half = 6.5 * (jsa.sigma_plus() + jsa.sigma_minus()) / 2.0;
        let n = 3000usize;
        let hs = 2.0 * half / n as f64;
        let mut total = 0.0;
        for a in 0..=n {
            let ws = jsa.center_s() - half + a as f64 * hs;
            let wa = if a == 0 || a == n { 0.5 } else { 1.0 };
            for b in 0..=n {
                let wi = jsa.center_i() - half + b as f64 * hs;
                let wb = if b == 0 || b == n { 0.5 } else { 1.0 };
                let amp = jsa.amplitude(ws, wi);
                total += wa * wb * amp * amp;
            }
        }
        total *= hs * hs;
        assert!((total - 1.0).abs() < 1e-6, "norm {total}");
    }

    #[test]
    fn underresolved_grid_is_rejected() {
        let jsa = symmetric_jsa(1.0e12, 4.0e11);
        let bad = QuadratureSpec { points_per_sigma: 4.0, ..Default::default() };
        assert!(matches!(
            hom_coincidence_probability(&jsa, Duration::ZERO, &bad),
            Err(PhotonicsError::GridUnderresolved(_))
        ));
        let narrow = QuadratureSpec { span_sigmas: 3.0, ..Default::default() };
        assert!(matches!(
            hom_coincidence_probability(&jsa, Duration::ZERO, &narrow),
            Err(PhotonicsError::GridUnderresolved(_))
        ));
    }

    #[test]
    fn envelope_matches_stated_values() {
        let model = HomDipModel::new(0.68, Duration::from_ps(3), 3000.0).unwrap();
        assert!((model.envelope(Duration::ZERO) - 0.32).abs() < 1e-12);
        assert!((model.envelope(Duration::from_ns(10)) - 1.0).abs() < 1e-12);
        // At tau = Tc the dip term is V/e.
        let at_tc = model.envelope(Duration::from_ps(3));
        assert!((at_tc - (1.0 - 0.68 / std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn envelope_stays_within_bounds_with_minimum_at_zero() {
        let model = HomDipModel::new(0.68, Duration::from_ps(3), 3000.0).unwrap();
        let floor = model.envelope(Duration::ZERO);
        assert!((floor - (1.0 - model.visibility)).abs() < 1e-15);
        for fs in [-20_000i128, -5_000, -1, 1, 700, 5_000, 20_000, 10_000_000] {
            let v = model.envelope(Duration::from_fs(fs));
            assert!(v >= floor && v <= 1.0, "envelope {v} at {fs} fs");
        }
    }

    #[test]
    fn envelope_agrees_with_quadrature_for_matched_jsa() {
        let model = HomDipModel::new(0.68, Duration::from_ps(3), 3000.0).unwrap();
        let jsa = JointSpectralAmplitude::from_dip_targets(
            0.68,
            Duration::from_ps(3),
            CENTER,
            pump_sigma_from_bandwidth(789e-9, 22e-9),
        )
        .unwrap();
        let spec = QuadratureSpec::default();
        let q = hom_coincidence_probability(&jsa, Duration::from_ps(3), &spec).unwrap();
        assert!((q - model.envelope(Duration::from_ps(3))).abs() < 1e-3);
    }

    #[test]
    fn dip_fit_recovers_unit_visibility_for_symmetric_jsa() {
        let fit = dip_from_jsa(&symmetric_jsa(1.5e12, 4.714e11)).unwrap();
        assert!((fit.visibility - 1.0).abs() < 0.01, "V = {}", fit.visibility);
        assert!(fit.residual_rms < 1e-3);
    }

    #[test]
    fn dip_fit_sees_reduced_visibility_for_offset_centers() {
        let sm = 4.714e11;
        let jsa =
            JointSpectralAmplitude::new(CENTER + 2.0e11, CENTER - 2.0e11, 1.5e12, sm).unwrap();
        let fit = dip_from_jsa(&jsa).unwrap();
        let split = 4.0e11_f64;
        let expected_v = (-(split * split) / (2.0 * sm * sm)).exp();
        assert!(fit.visibility < 1.0);
        assert!((fit.visibility - expected_v).abs() < 0.01);
    }

    #[test]
    fn coherence_time_scales_inversely_with_sigma_minus() {
        // sigma_minus much narrower than sigma_plus; doubling it should
        // halve the fitted coherence time within 10%.
        let f1 = dip_from_jsa(&symmetric_jsa(2.0e13, 3.0e11)).unwrap();
        let f2 = dip_from_jsa(&symmetric_jsa(2.0e13, 6.0e11)).unwrap();
        let ratio = f1.coherence_time.as_fs_f64() / f2.coherence_time.as_fs_f64();
        assert!((ratio - 2.0).abs() < 0.2, "Tc ratio {ratio}");
        // Fourier-width check: the fitted width matches the 1/e crossing of
        // the quadrature curve directly.
        let spec = QuadratureSpec::default();
        let jsa = symmetric_jsa(2.0e13, 3.0e11);
        let tc = f1.coherence_time;
        let depth_at_tc =
            1.0 - hom_coincidence_probability(&jsa, tc, &spec).unwrap();
        assert!((depth_at_tc - f1.visibility / std::f64::consts::E).abs() < 0.01);
    }

    #[test]
    fn flat_response_fits_zero_visibility() {
        // Visibility ~0 via a huge center split.
        let sm = 4.0e11;
        let jsa =
            JointSpectralAmplitude::new(CENTER + 4.0e12, CENTER - 4.0e12, 1.5e13, sm).unwrap();
        let fit = dip_from_jsa(&jsa).unwrap();
        assert!(fit.visibility < 1e-6);
    }

    #[test]
    fn dip_targets_roundtrip() {
        let jsa = JointSpectralAmplitude::from_dip_targets(
            0.68,
            Duration::from_ps(3),
            CENTER,
            pump_sigma_from_bandwidth(789e-9, 22e-9),
        )
        .unwrap();
        let fit = dip_from_jsa(&jsa).unwrap();
        assert!((fit.visibility - 0.68).abs() < 0.01);
        assert!((fit.coherence_time.as_ps_f64() - 3.0).abs() < 0.03);
    }
}
