//! The simulated apparatus: pulsed pair source, two fiber channels with
//! temperature-driven drift, fixed and motorized delay lines, gated
//! single-photon detectors on the tap ports, and the time-tagger model with
//! its systematic noise floor.
//!
//! Only detected events are simulated (tens of kHz), never the full pulse
//! train (75 MHz); long runs stay cheap. All randomness flows through named
//! substreams of the run seed, so identical seed + configuration + command
//! sequence reproduces event streams bit for bit, and reconfiguring one
//! subsystem never shifts another's draws.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::PlantError;
use crate::photonics::HomDipModel;
use crate::seeds::substream_rng;
use crate::timebase::{ClockId, Duration, TimeTag, TimestampSeries, FS_PER_S};

/// Rounded division for non-negative divisors; ties away from zero.
fn div_round_nearest(a: i128, b: i128) -> i128 {
    debug_assert!(b > 0);
    if a >= 0 {
        (a + b / 2) / b
    } else {
        -((-a + b / 2) / b)
    }
}

/// Nearest point of the `rate_hz` grid (slot k sits at k/rate seconds).
fn snap_to_rate_grid(t_fs: i128, rate_hz: u64) -> i128 {
    let rate = rate_hz as i128;
    let k = div_round_nearest(t_fs * rate, FS_PER_S);
    div_round_nearest(k * FS_PER_S, rate)
}

/// Pulsed pair-source rates.
///
/// `pair_rate_hz` is the detected coincidence rate at the interferometer
/// output far from the dip; detection losses are already folded in. The
/// singles rates are the detected rates at the source outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceConfig {
    pub rep_rate_hz: u64,
    pub pair_rate_hz: f64,
    pub singles_rate_a_hz: f64,
    pub singles_rate_b_hz: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            rep_rate_hz: 75_000_000,
            pair_rate_hz: 3000.0,
            singles_rate_a_hz: 104_000.0,
            singles_rate_b_hz: 140_000.0,
        }
    }
}

/// Ambient temperature model: mean + diurnal sinusoid + Ornstein-Uhlenbeck
/// wander (+ optional linear ramp for tracking tests).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureProcess {
    pub mean_k: f64,
    pub diurnal_amplitude_k: f64,
    pub diurnal_period_s: f64,
    pub diurnal_phase_rad: f64,
    pub ou_sigma_k: f64,
    pub ou_tau_s: f64,
    pub linear_rate_k_per_s: f64,
}

impl Default for TemperatureProcess {
    fn default() -> Self {
        TemperatureProcess {
            mean_k: 295.0,
            diurnal_amplitude_k: 0.5,
            diurnal_period_s: 86_400.0,
            diurnal_phase_rad: 0.0,
            ou_sigma_k: 0.05,
            ou_tau_s: 300.0,
            linear_rate_k_per_s: 0.0,
        }
    }
}

/// Number of spectral modes in the OU synthesis.
const OU_MODES: usize = 128;

/// Evaluable temperature field; pure once built.
///
/// The OU component is synthesized as a sum of cosines with frequencies
/// drawn from the OU spectral density (a Lorentzian, i.e. Cauchy-distributed
/// frequencies) and uniform phases. The ensemble autocovariance is exactly
/// sigma^2 exp(-|dt|/tau) and the long-run sample variance of one
/// realization is exactly sigma^2, while evaluation at arbitrary times stays
/// O(modes) and needs no mutable state.
#[derive(Debug, Clone)]
pub struct TemperatureField {
    cfg: TemperatureProcess,
    modes: Vec<(f64, f64)>, // (omega rad/s, phase)
    mode_amplitude: f64,
}

impl TemperatureField {
    pub fn new(cfg: TemperatureProcess, master_seed: u64, stream: &str) -> Self {
        let mut rng = substream_rng(master_seed, stream);
        let mut modes = Vec::with_capacity(OU_MODES);
        for _ in 0..OU_MODES {
            let u: f64 = rng.random();
            let omega = (std::f64::consts::PI * (u - 0.5)).tan() / cfg.ou_tau_s.max(1e-9);
            let phase: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            modes.push((omega, phase));
        }
        let mode_amplitude = cfg.ou_sigma_k * (2.0 / OU_MODES as f64).sqrt();
        TemperatureField { cfg, modes, mode_amplitude }
    }

    pub fn config(&self) -> &TemperatureProcess {
        &self.cfg
    }

    /// Temperature in kelvin at `t`; deterministic given the seed.
    pub fn temperature_at(&self, t: TimeTag) -> f64 {
        let ts = t.as_secs_f64();
        let mut value = self.cfg.mean_k + self.cfg.linear_rate_k_per_s * ts;
        if self.cfg.diurnal_amplitude_k != 0.0 {
            let w = 2.0 * std::f64::consts::PI / self.cfg.diurnal_period_s;
            value += self.cfg.diurnal_amplitude_k * (w * ts + self.cfg.diurnal_phase_rad).sin();
        }
        if self.cfg.ou_sigma_k != 0.0 {
            let mut ou = 0.0;
            for &(omega, phase) in &self.modes {
                ou += (omega * ts + phase).cos();
            }
            value += self.mode_amplitude * ou;
        }
        value
    }
}

/// One spooled fiber channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberChannelConfig {
    pub nominal_delay: Duration,
    /// Delay sensitivity to temperature, fs per kelvin.
    pub thermal_coefficient_fs_per_k: f64,
    pub temperature: TemperatureProcess,
}

impl Default for FiberChannelConfig {
    fn default() -> Self {
        FiberChannelConfig {
            // ~2 km of standard fiber.
            nominal_delay: Duration::from_ns(9794),
            thermal_coefficient_fs_per_k: 40.0,
            temperature: TemperatureProcess::default(),
        }
    }
}

/// Runtime channel: config plus its seeded temperature field.
#[derive(Debug, Clone)]
pub struct FiberChannel {
    cfg: FiberChannelConfig,
    field: TemperatureField,
}

impl FiberChannel {
    fn new(cfg: FiberChannelConfig, master_seed: u64, stream: &str) -> Self {
        let field = TemperatureField::new(cfg.temperature, master_seed, stream);
        FiberChannel { cfg, field }
    }

    pub fn config(&self) -> &FiberChannelConfig {
        &self.cfg
    }

    pub fn temperature_at(&self, t: TimeTag) -> f64 {
        self.field.temperature_at(t)
    }

    /// Propagation delay at `t`, rounded to 1 fs:
    /// nominal + coefficient * (T(t) - mean).
    pub fn delay_at(&self, t: TimeTag) -> Duration {
        let dt_k = self.field.temperature_at(t) - self.cfg.temperature.mean_k;
        self.cfg.nominal_delay
            + Duration::from_fs_f64(self.cfg.thermal_coefficient_fs_per_k * dt_k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayLineKind {
    Fixed,
    Motorized,
}

/// An optical delay line. Fixed lines reject set requests; motorized lines
/// quantize to their resolution and clamp to their range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayLine {
    kind: DelayLineKind,
    range: (Duration, Duration),
    resolution: Duration,
    setting: Duration,
}

impl DelayLine {
    pub fn fixed(delay: Duration) -> Self {
        DelayLine {
            kind: DelayLineKind::Fixed,
            range: (delay, delay),
            resolution: Duration::from_fs(1),
            setting: delay,
        }
    }

    pub fn motorized(
        min: Duration,
        max: Duration,
        resolution: Duration,
        initial: Duration,
    ) -> Result<Self, PlantError> {
        if !resolution.is_positive() {
            return Err(PlantError::InvalidConfig("delay line resolution must be positive".into()));
        }
        if min > max {
            return Err(PlantError::InvalidConfig("delay line range is inverted".into()));
        }
        let mut line = DelayLine {
            kind: DelayLineKind::Motorized,
            range: (min, max),
            resolution,
            setting: min,
        };
        line.request(initial)?;
        Ok(line)
    }

    /// Requests a new setting; returns the setting actually reached.
    pub fn request(&mut self, requested: Duration) -> Result<Duration, PlantError> {
        if self.kind == DelayLineKind::Fixed {
            return Err(PlantError::FixedDelayLine);
        }
        let q = requested.quantize(self.resolution);
        self.setting = q.clamp(self.range.0, self.range.1);
        Ok(self.setting)
    }

    pub fn kind(&self) -> DelayLineKind {
        self.kind
    }

    pub fn range(&self) -> (Duration, Duration) {
        self.range
    }

    pub fn resolution(&self) -> Duration {
        self.resolution
    }

    pub fn setting(&self) -> Duration {
        self.setting
    }
}

/// Gated single-photon detector parameters.
///
/// Values are representative of gated InGaAs devices and are configurable;
/// they are not measured constants of any particular instrument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub jitter_sigma: Duration,
    pub dead_time: Duration,
    pub dark_rate_hz: f64,
    pub gate_rate_hz: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            efficiency: 0.20,
            jitter_sigma: Duration::from_ps(120),
            dead_time: Duration::from_ns(10_000),
            dark_rate_hz: 1000.0,
            gate_rate_hz: 75_000_000,
        }
    }
}

/// The four detectors: D1/D2 on the interferometer outputs, D3/D4 on the
/// 10% taps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectorBank {
    pub d1: DetectorConfig,
    pub d2: DetectorConfig,
    pub d3: DetectorConfig,
    pub d4: DetectorConfig,
}

/// Time-tagger model: bin quantization, white per-event timing noise, and
/// a small bounded random-walk systematic.
///
/// The white term dominates the instrument stability floor: per-event noise
/// sigma_w gives a self-test time deviation of sigma_w / sqrt(m) that is
/// calibrated against the instrument's measured floor (and keeps falling at
/// long averaging times, as measured). The bounded walk adds the slow
/// correlated residue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcspcModel {
    pub bin_width: Duration,
    /// White timing noise per measurement event, fs (1 sigma).
    pub white_sigma_fs: f64,
    /// Systematic walk scale, fs per sqrt(second) of elapsed time.
    pub systematic_step_fs: f64,
    /// Reflection bound on the systematic walk, fs.
    pub systematic_bound_fs: f64,
}

impl Default for TcspcModel {
    fn default() -> Self {
        TcspcModel {
            bin_width: Duration::from_ps(4),
            // Calibrated so a 1 Hz self-test shows ~0.9 ps TDEV at 1000 s
            // (28.5 ps / sqrt(1000) = 0.90 ps), falling to ~0.23 ps at
            // 16000 s.
            white_sigma_fs: 28_500.0,
            systematic_step_fs: 5.0,
            systematic_bound_fs: 400.0,
        }
    }
}

/// How interferometer-output coincidences are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountingMode {
    /// Event-level Poisson counting (the physical default).
    Poisson,
    /// Deterministic expected-value counts; the noiseless ensemble-rate
    /// stub used by controller tracking-bound tests.
    Expected,
}

/// Full plant configuration.
#[derive(Debug, Clone)]
pub struct PlantConfig {
    pub source: SourceConfig,
    pub visibility: f64,
    pub coherence_time: Duration,
    pub channel_a: FiberChannelConfig,
    pub channel_b: FiberChannelConfig,
    pub odl: DelayLine,
    pub mdl: DelayLine,
    pub detectors: DetectorBank,
    pub tcspc: TcspcModel,
    /// Tap coupler split fraction sent to D3/D4 (the rest feeds the
    /// interferometer).
    pub tap_fraction: f64,
    /// Static path tails from the splitter to the interferometer inputs.
    pub hom_tail_a: Duration,
    pub hom_tail_b: Duration,
    /// Static path tails from the tap ports to D3/D4.
    pub tap_tail_a: Duration,
    pub tap_tail_b: Duration,
    /// True clock difference A - B: the value offset extraction should
    /// recover. Applied to clock B's readout, not to any optical path.
    pub true_offset: Duration,
    pub hom_counting: CountingMode,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let channel_a = FiberChannelConfig::default();
        // Channel B gets its own diurnal phase so the two paths drift
        // differentially, as unmatched spools do.
        let channel_b = FiberChannelConfig {
            temperature: TemperatureProcess { diurnal_phase_rad: 1.0, ..Default::default() },
            ..Default::default()
        };
        PlantConfig {
            source: SourceConfig::default(),
            visibility: 0.68,
            coherence_time: Duration::from_ps(3),
            channel_a,
            channel_b,
            odl: DelayLine::fixed(Duration::from_ps(100)),
            mdl: DelayLine::motorized(
                Duration::ZERO,
                Duration::from_ps(560),
                Duration::from_fs(1),
                Duration::from_ps(100),
            )
            .expect("default MDL config is valid"),
            detectors: DetectorBank::default(),
            tcspc: TcspcModel::default(),
            tap_fraction: 0.1,
            hom_tail_a: Duration::ZERO,
            hom_tail_b: Duration::ZERO,
            tap_tail_a: Duration::ZERO,
            tap_tail_b: Duration::ZERO,
            true_offset: Duration::ZERO,
            hom_counting: CountingMode::Poisson,
        }
    }
}

impl PlantConfig {
    /// All constraint violations, collected (empty when valid).
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let s = &self.source;
        if s.rep_rate_hz == 0 {
            errs.push("source.rep_rate_hz must be positive".into());
        }
        if s.pair_rate_hz < 0.0 || s.singles_rate_a_hz < 0.0 || s.singles_rate_b_hz < 0.0 {
            errs.push("source rates must be non-negative".into());
        }
        // A zero singles rate disables that uncorrelated stream entirely
        // (reduced test configurations); otherwise pairs cannot outnumber
        // singles.
        for (name, rate) in
            [("singles_rate_a_hz", s.singles_rate_a_hz), ("singles_rate_b_hz", s.singles_rate_b_hz)]
        {
            if rate > 0.0 && s.pair_rate_hz > rate {
                errs.push(format!("source.pair_rate_hz cannot exceed source.{name}"));
            }
        }
        if s.rep_rate_hz > 0 && s.pair_rate_hz / s.rep_rate_hz as f64 > 1e-2 {
            errs.push("source.pair_rate_hz must be far below the repetition rate".into());
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            errs.push(format!("visibility {} outside [0, 1]", self.visibility));
        }
        if !self.coherence_time.is_positive() {
            errs.push("coherence_time must be positive".into());
        }
        if !(self.tap_fraction > 0.0 && self.tap_fraction < 1.0) {
            errs.push(format!("tap_fraction {} outside (0, 1)", self.tap_fraction));
        }
        for (name, d) in [
            ("d1", &self.detectors.d1),
            ("d2", &self.detectors.d2),
            ("d3", &self.detectors.d3),
            ("d4", &self.detectors.d4),
        ] {
            if !(0.0..=1.0).contains(&d.efficiency) {
                errs.push(format!("detector {name}.efficiency {} outside [0, 1]", d.efficiency));
            }
            if d.jitter_sigma < Duration::ZERO {
                errs.push(format!("detector {name}.jitter_sigma must be non-negative"));
            }
            if d.dead_time < Duration::ZERO {
                errs.push(format!("detector {name}.dead_time must be non-negative"));
            }
            if d.dark_rate_hz < 0.0 {
                errs.push(format!("detector {name}.dark_rate_hz must be non-negative"));
            }
            if d.gate_rate_hz == 0 {
                errs.push(format!("detector {name}.gate_rate_hz must be positive"));
            }
        }
        for (name, ch) in [("channel_a", &self.channel_a), ("channel_b", &self.channel_b)] {
            if ch.nominal_delay < Duration::ZERO {
                errs.push(format!("{name}.nominal_delay must be non-negative"));
            }
            let t = &ch.temperature;
            if t.ou_sigma_k != 0.0 && t.ou_tau_s <= 0.0 {
                errs.push(format!("{name}.temperature.ou_tau_s must be positive"));
            }
            if t.diurnal_amplitude_k != 0.0 && t.diurnal_period_s <= 0.0 {
                errs.push(format!("{name}.temperature.diurnal_period_s must be positive"));
            }
        }
        if !self.tcspc.bin_width.is_positive() {
            errs.push("tcspc.bin_width must be positive".into());
        }
        if self.tcspc.systematic_step_fs < 0.0 {
            errs.push("tcspc.systematic_step_fs must be non-negative".into());
        }
        if self.tcspc.white_sigma_fs < 0.0 {
            errs.push("tcspc.white_sigma_fs must be non-negative".into());
        }
        if self.tcspc.systematic_bound_fs <= 0.0 {
            errs.push("tcspc.systematic_bound_fs must be positive".into());
        }
        errs
    }
}

/// Homogeneous Poisson arrival stream carried across batches.
#[derive(Debug, Clone)]
struct PoissonStream {
    rate_hz: f64,
    next_fs: i128,
    rng: ChaCha12Rng,
}

impl PoissonStream {
    fn new(rate_hz: f64, rng: ChaCha12Rng) -> Self {
        let mut stream = PoissonStream { rate_hz, next_fs: 0, rng };
        stream.next_fs = if rate_hz > 0.0 { stream.draw_gap() } else { i128::MAX };
        stream
    }

    fn draw_gap(&mut self) -> i128 {
        let u: f64 = self.rng.random();
        let gap_s = -(1.0 - u).ln() / self.rate_hz;
        (Duration::from_secs_f64(gap_s).as_fs()).max(1)
    }

    /// Appends all arrivals strictly before `end_fs`, in order.
    fn drain_into(&mut self, end_fs: i128, out: &mut Vec<i128>) {
        if self.rate_hz <= 0.0 {
            return;
        }
        while self.next_fs < end_fs {
            out.push(self.next_fs);
            let gap = self.draw_gap();
            self.next_fs += gap;
        }
    }
}

/// Detection pipeline state for one detector.
#[derive(Debug, Clone)]
struct DetectorUnit {
    cfg: DetectorConfig,
    rng: ChaCha12Rng,
    last_tag_fs: Option<i128>,
}

impl DetectorUnit {
    fn new(cfg: DetectorConfig, rng: ChaCha12Rng) -> Self {
        DetectorUnit { cfg, rng, last_tag_fs: None }
    }

    /// Runs one arrival through efficiency, jitter and dead time. Returns
    /// the recorded tag, if any. `arrival_fs` must already sit on the
    /// detector's gate comb.
    fn process(&mut self, arrival_fs: i128, apply_efficiency: bool, out: &mut Vec<i128>) {
        if apply_efficiency {
            let eff = self.cfg.efficiency;
            if eff <= 0.0 {
                return;
            }
            if eff < 1.0 && self.rng.random::<f64>() >= eff {
                return;
            }
        }
        let mut tag = arrival_fs;
        let jitter = self.cfg.jitter_sigma.as_fs();
        if jitter > 0 {
            let draw: f64 = self.rng.sample(StandardNormal);
            tag += Duration::from_fs_f64(jitter as f64 * draw).as_fs();
        }
        // Dead time applies to recorded tags: no two closer than dead_time.
        if let Some(last) = self.last_tag_fs {
            if tag - last < self.cfg.dead_time.as_fs() {
                return;
            }
        }
        self.last_tag_fs = Some(tag);
        out.push(tag);
    }
}

/// Events produced by one [`PlantState::advance`] call.
#[derive(Debug, Clone)]
pub struct EventBatch {
    pub start: TimeTag,
    pub duration: Duration,
    /// Coincidence count at the interferometer output over the batch.
    pub hom_coincidences: u64,
    /// Tap detections timestamped by clock A.
    pub d3: TimestampSeries,
    /// Tap detections timestamped by clock B.
    pub d4: TimestampSeries,
    /// Simulation-truth path imbalance at batch start (at the current MDL
    /// setting).
    pub truth_imbalance: Duration,
}

impl EventBatch {
    pub fn hom_rate_hz(&self) -> f64 {
        self.hom_coincidences as f64 / self.duration.as_secs_f64()
    }
}

/// Bounded-random-walk time-tagger systematic plus bin quantization.
#[derive(Debug, Clone)]
pub struct TcspcUnit {
    model: TcspcModel,
    walk_fs: f64,
    last_t: Option<TimeTag>,
    rng: ChaCha12Rng,
}

impl TcspcUnit {
    pub fn new(model: TcspcModel, master_seed: u64, stream: &str) -> Self {
        TcspcUnit { model, walk_fs: 0.0, last_t: None, rng: substream_rng(master_seed, stream) }
    }

    pub fn model(&self) -> &TcspcModel {
        &self.model
    }

    /// Advances the systematic walk to time `at` (variance grows linearly
    /// in elapsed time, reflected at the bound), adds white per-event
    /// noise, and returns `delta + noise + systematic`, quantized to the
    /// bin width. This is the start-stop measurement path (one digitized
    /// difference per call), e.g. a 1 Hz pulse-pair self-test.
    ///
    /// Queries must be time-ordered; out-of-order queries see the walk
    /// frozen at its latest state.
    pub fn measure(&mut self, delta: Duration, at: TimeTag) -> Duration {
        self.measure_unquantized(delta, at).quantize(self.model.bin_width)
    }

    /// Applies the instrument systematic and white noise to a channel
    /// timestamp without bin quantization.
    ///
    /// Channel tags feed the correlation histogram, whose bin width is the
    /// difference digitization; quantizing each channel to the same
    /// absolute grid as well would pin every difference to a bin edge and
    /// bias the fitted peak by half a bin.
    pub fn transform_tag(&mut self, tag: TimeTag) -> TimeTag {
        let walked = self.measure_unquantized(tag.elapsed(), tag);
        TimeTag::from_fs(walked.as_fs())
    }

    fn measure_unquantized(&mut self, delta: Duration, at: TimeTag) -> Duration {
        let dt_s = match self.last_t {
            Some(last) if at > last => (at - last).as_secs_f64(),
            None => 0.0,
            _ => 0.0,
        };
        if dt_s > 0.0 && self.model.systematic_step_fs > 0.0 {
            let draw: f64 = self.rng.sample(StandardNormal);
            self.walk_fs += self.model.systematic_step_fs * dt_s.sqrt() * draw;
            let bound = self.model.systematic_bound_fs;
            while self.walk_fs.abs() > bound {
                self.walk_fs = self.walk_fs.signum() * 2.0 * bound - self.walk_fs;
            }
        }
        if self.last_t.is_none_or(|last| at > last) {
            self.last_t = Some(at);
        }
        let mut error = self.walk_fs;
        if self.model.white_sigma_fs > 0.0 {
            let draw: f64 = self.rng.sample(StandardNormal);
            error += self.model.white_sigma_fs * draw;
        }
        delta + Duration::from_fs_f64(error)
    }

    /// Current systematic offset, fs (truth channel for tests).
    pub fn systematic_fs(&self) -> f64 {
        self.walk_fs
    }
}

/// The full simulated system; a single-owner mutable state machine.
#[derive(Debug, Clone)]
pub struct PlantState {
    cfg: PlantConfig,
    dip: HomDipModel,
    channel_a: FiberChannel,
    channel_b: FiberChannel,
    odl: DelayLine,
    mdl: DelayLine,
    hom_pairs: PoissonStream,
    tap_pairs: PoissonStream,
    singles_a: PoissonStream,
    singles_b: PoissonStream,
    dark_a: PoissonStream,
    dark_b: PoissonStream,
    det3: DetectorUnit,
    det4: DetectorUnit,
    hom_rng: ChaCha12Rng,
    tcspc: TcspcUnit,
    now: TimeTag,
}

impl PlantState {
    pub fn new(cfg: PlantConfig, seed: u64) -> Result<Self, PlantError> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(PlantError::InvalidConfig(errs.join("; ")));
        }
        let dip = HomDipModel::new(cfg.visibility, cfg.coherence_time, cfg.source.pair_rate_hz)
            .map_err(|e| PlantError::InvalidConfig(e.to_string()))?;

        // Detected tap-pair rate is pair_rate * (tap/(1-tap))^2: the same
        // detector losses that set pair_rate apply at the taps, so the
        // efficiencies cancel between arrival rate and detection thinning.
        let tap_ratio = cfg.tap_fraction / (1.0 - cfg.tap_fraction);
        let eff_product = cfg.detectors.d3.efficiency * cfg.detectors.d4.efficiency;
        let tap_pair_arrival_rate = if eff_product > 0.0 {
            cfg.source.pair_rate_hz * tap_ratio * tap_ratio / eff_product
        } else {
            0.0
        };

        let channel_a = FiberChannel::new(cfg.channel_a, seed, "plant.temperature.a");
        let channel_b = FiberChannel::new(cfg.channel_b, seed, "plant.temperature.b");
        Ok(PlantState {
            dip,
            channel_a,
            channel_b,
            odl: cfg.odl,
            mdl: cfg.mdl,
            hom_pairs: PoissonStream::new(
                cfg.source.pair_rate_hz,
                substream_rng(seed, "plant.emission.hom"),
            ),
            tap_pairs: PoissonStream::new(
                tap_pair_arrival_rate,
                substream_rng(seed, "plant.emission.tap"),
            ),
            singles_a: PoissonStream::new(
                cfg.source.singles_rate_a_hz * cfg.tap_fraction,
                substream_rng(seed, "plant.singles.a"),
            ),
            singles_b: PoissonStream::new(
                cfg.source.singles_rate_b_hz * cfg.tap_fraction,
                substream_rng(seed, "plant.singles.b"),
            ),
            dark_a: PoissonStream::new(
                cfg.detectors.d3.dark_rate_hz,
                substream_rng(seed, "plant.dark.d3"),
            ),
            dark_b: PoissonStream::new(
                cfg.detectors.d4.dark_rate_hz,
                substream_rng(seed, "plant.dark.d4"),
            ),
            det3: DetectorUnit::new(cfg.detectors.d3, substream_rng(seed, "plant.detect.d3")),
            det4: DetectorUnit::new(cfg.detectors.d4, substream_rng(seed, "plant.detect.d4")),
            hom_rng: substream_rng(seed, "plant.thinning.hom"),
            tcspc: TcspcUnit::new(cfg.tcspc, seed, "plant.tcspc"),
            now: TimeTag::EPOCH,
            cfg,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn dip(&self) -> &HomDipModel {
        &self.dip
    }

    pub fn now(&self) -> TimeTag {
        self.now
    }

    pub fn odl(&self) -> &DelayLine {
        &self.odl
    }

    pub fn mdl(&self) -> &DelayLine {
        &self.mdl
    }

    /// Moves the motorized delay line; returns the setting reached.
    pub fn set_mdl(&mut self, requested: Duration) -> Result<Duration, PlantError> {
        self.mdl.request(requested)
    }

    /// Attempts to move the fixed line (always an error; exposed so misuse
    /// surfaces as a typed error, not silence).
    pub fn set_odl(&mut self, requested: Duration) -> Result<Duration, PlantError> {
        self.odl.request(requested)
    }

    pub fn temperature_a(&self, t: TimeTag) -> f64 {
        self.channel_a.temperature_at(t)
    }

    pub fn temperature_b(&self, t: TimeTag) -> f64 {
        self.channel_b.temperature_at(t)
    }

    pub fn channel_delay_a(&self, t: TimeTag) -> Duration {
        self.channel_a.delay_at(t)
    }

    pub fn channel_delay_b(&self, t: TimeTag) -> Duration {
        self.channel_b.delay_at(t)
    }

    /// Signal-minus-idler path imbalance at the interferometer at the
    /// current MDL setting.
    pub fn hom_imbalance(&self, t: TimeTag) -> Duration {
        self.hom_imbalance_with_mdl(t, self.mdl.setting())
    }

    /// Imbalance the interferometer would see with the MDL at
    /// `mdl_setting`; the simulation-truth channel for in-loop residuals.
    pub fn hom_imbalance_with_mdl(&self, t: TimeTag, mdl_setting: Duration) -> Duration {
        (self.channel_a.delay_at(t) + self.odl.setting() + self.cfg.hom_tail_a)
            - (self.channel_b.delay_at(t) + mdl_setting + self.cfg.hom_tail_b)
    }

    /// Passes a time difference through the time-tagger model (start-stop
    /// path: systematic + white noise + bin quantization).
    pub fn tcspc_measure(&mut self, delta: Duration, at: TimeTag) -> Duration {
        self.tcspc.measure(delta, at)
    }

    /// Applies the time-tagger systematic and white noise to a channel
    /// timestamp (no bin quantization; the correlation histogram's bin is
    /// the difference digitization).
    pub fn tcspc_transform_tag(&mut self, tag: TimeTag) -> TimeTag {
        self.tcspc.transform_tag(tag)
    }

    /// Advances the simulation by `dt`, producing the interferometer
    /// coincidence count and the tap timestamp streams for the interval.
    ///
    /// Channel delays are evaluated once per batch (they move well under a
    /// femtosecond within one dwell). Pair emissions and tap photons sit on
    /// the pulse comb; dark counts are aligned to the same comb, standing in
    /// for gate alignment. Clock B's readout offset is applied to recorded
    /// tags only, never to optical paths.
    ///
    /// # Panics
    /// Panics if `dt` is not positive.
    pub fn advance(&mut self, dt: Duration) -> EventBatch {
        assert!(dt.is_positive(), "advance requires a positive dt");
        let start = self.now;
        let end = start + dt;
        let end_fs = end.as_fs();
        let rep = self.cfg.source.rep_rate_hz;

        let delay_a = self.channel_a.delay_at(start);
        let delay_b = self.channel_b.delay_at(start);
        let imbalance = (delay_a + self.odl.setting() + self.cfg.hom_tail_a)
            - (delay_b + self.mdl.setting() + self.cfg.hom_tail_b);
        let keep_probability = self.dip.envelope(imbalance);

        let mut scratch = Vec::new();

        // Interferometer coincidences.
        let hom_coincidences = match self.cfg.hom_counting {
            CountingMode::Poisson => {
                self.hom_pairs.drain_into(end_fs, &mut scratch);
                let mut count = 0u64;
                for &_emission in &scratch {
                    if self.hom_rng.random::<f64>() < keep_probability {
                        count += 1;
                    }
                }
                count
            }
            CountingMode::Expected => {
                let expected =
                    self.cfg.source.pair_rate_hz * dt.as_secs_f64() * keep_probability;
                expected.round() as u64
            }
        };

        // Static path from source to each tap detector for this batch.
        let path3 = (delay_a + self.odl.setting() + self.cfg.tap_tail_a).as_fs();
        let path4 = (delay_b + self.mdl.setting() + self.cfg.tap_tail_b).as_fs();

        // Correlated tap pairs: one emission feeds both detectors.
        scratch.clear();
        self.tap_pairs.drain_into(end_fs, &mut scratch);
        let mut pairs3 = Vec::with_capacity(scratch.len());
        let mut pairs4 = Vec::with_capacity(scratch.len());
        for &raw in &scratch {
            let slot = snap_to_rate_grid(raw, rep);
            pairs3.push(slot + path3);
            pairs4.push(slot + path4);
        }

        // Uncorrelated source singles, on the same comb and path.
        scratch.clear();
        self.singles_a.drain_into(end_fs, &mut scratch);
        let singles3: Vec<i128> =
            scratch.iter().map(|&raw| snap_to_rate_grid(raw, rep) + path3).collect();
        scratch.clear();
        self.singles_b.drain_into(end_fs, &mut scratch);
        let singles4: Vec<i128> =
            scratch.iter().map(|&raw| snap_to_rate_grid(raw, rep) + path4).collect();

        // Dark counts fire within gates; the gate comb tracks the photon
        // arrival phase, so darks land on the same comb.
        scratch.clear();
        self.dark_a.drain_into(end_fs, &mut scratch);
        let darks3: Vec<i128> = scratch
            .iter()
            .map(|&raw| snap_to_rate_grid(raw, self.cfg.detectors.d3.gate_rate_hz) + path3)
            .collect();
        scratch.clear();
        self.dark_b.drain_into(end_fs, &mut scratch);
        let darks4: Vec<i128> = scratch
            .iter()
            .map(|&raw| snap_to_rate_grid(raw, self.cfg.detectors.d4.gate_rate_hz) + path4)
            .collect();

        let tags3 = run_detector(&mut self.det3, &pairs3, &singles3, &darks3);
        let tags4 = run_detector(&mut self.det4, &pairs4, &singles4, &darks4);

        // Clock B lags clock A by true_offset, so its readout subtracts it.
        let offset = self.cfg.true_offset.as_fs();
        let d3 =
            TimestampSeries::from_tags(ClockId::A, tags3.iter().map(|&t| TimeTag::from_fs(t)).collect());
        let d4 = TimestampSeries::from_tags(
            ClockId::B,
            tags4.iter().map(|&t| TimeTag::from_fs(t - offset)).collect(),
        );

        self.now = end;
        EventBatch { start, duration: dt, hom_coincidences, d3, d4, truth_imbalance: imbalance }
    }
}

/// Feeds three time-ordered candidate streams through a detector in global
/// time order. Pairs and singles are photon arrivals (efficiency applies);
/// darks bypass efficiency.
fn run_detector(
    det: &mut DetectorUnit,
    pairs: &[i128],
    singles: &[i128],
    darks: &[i128],
) -> Vec<i128> {
    let mut out = Vec::with_capacity(pairs.len() + singles.len() + darks.len());
    let (mut i, mut j, mut k) = (0, 0, 0);
    loop {
        let p = pairs.get(i).copied().unwrap_or(i128::MAX);
        let s = singles.get(j).copied().unwrap_or(i128::MAX);
        let d = darks.get(k).copied().unwrap_or(i128::MAX);
        if p == i128::MAX && s == i128::MAX && d == i128::MAX {
            break;
        }
        if p <= s && p <= d {
            det.process(p, true, &mut out);
            i += 1;
        } else if s <= d {
            det.process(s, true, &mut out);
            j += 1;
        } else {
            det.process(d, false, &mut out);
            k += 1;
        }
    }
    out
}
