//! Scenario runner: binds the plant, lock controller, offset extraction and
//! stability analysis into reproducible end-to-end experiments with file
//! outputs.
//!
//! One run produces one directory: a config echo (itself re-runnable), the
//! per-subsystem CSVs, and a key-value summary whose headline numbers are
//! recomputable from the CSVs exactly. Identical configuration and seed
//! give byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Scenario};
use crate::control::{scan_dip, write_scan_csv, CycleOutcome, DipScan, LockController, LockRecord};
use crate::error::{ScenarioError, SyncError};
use crate::metrology::{default_m_grid, rms, tdev, StabilitySeries, TdevCurve};
use crate::plant::{EventBatch, PlantState, TcspcUnit};
use crate::sync::{fit_gaussian, CorrelationHistogram, OffsetEstimate, WindowedCorrelator};
use crate::timebase::{Duration, TimeTag};

/// One offset-extraction window.
#[derive(Debug, Clone)]
pub struct OffsetPoint {
    pub index: usize,
    /// Window start time (simulation clock).
    pub start: TimeTag,
    /// The fit, or why this window is missing. Failed windows are recorded,
    /// never fabricated.
    pub estimate: Result<OffsetEstimate, SyncError>,
}

/// Offset series for one window length.
#[derive(Debug, Clone)]
pub struct WindowSeries {
    pub window: Duration,
    pub points: Vec<OffsetPoint>,
    /// Histogram of the last completed window (diagnostic output).
    pub last_histogram: Option<CorrelationHistogram>,
}

impl WindowSeries {
    pub fn successes(&self) -> impl Iterator<Item = (&OffsetPoint, &OffsetEstimate)> {
        self.points.iter().filter_map(|p| p.estimate.as_ref().ok().map(|e| (p, e)))
    }

    pub fn failed_count(&self) -> usize {
        self.points.iter().filter(|p| p.estimate.is_err()).count()
    }

    /// Longest gap-free run of successful estimates as a stability series
    /// (series are split at gaps rather than interpolated).
    pub fn longest_contiguous_series(&self) -> Option<StabilitySeries> {
        let mut best: Option<(usize, usize)> = None;
        let mut run_start = None;
        for (i, p) in self.points.iter().enumerate() {
            match (&p.estimate, run_start) {
                (Ok(_), None) => run_start = Some(i),
                (Err(_), Some(s)) => {
                    if best.is_none_or(|(bs, be)| i - s > be - bs) {
                        best = Some((s, i));
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run_start {
            let i = self.points.len();
            if best.is_none_or(|(bs, be)| i - s > be - bs) {
                best = Some((s, i));
            }
        }
        let (s, e) = best?;
        if e - s < 2 {
            return None;
        }
        let values: Vec<Duration> = self.points[s..e]
            .iter()
            .map(|p| p.estimate.as_ref().expect("contiguous run").tau_hat)
            .collect();
        Some(StabilitySeries::new(self.window, values))
    }
}

/// Everything a link scenario produces, in memory.
#[derive(Debug)]
pub struct LinkRun {
    pub scan: Option<DipScan>,
    pub lock: LockRecord,
    /// Start of the measurement phase (after initial acquisition).
    pub origin: TimeTag,
    pub series: Vec<WindowSeries>,
}

impl LinkRun {
    /// In-loop residual series, one sample per dither cycle.
    pub fn inloop_series(&self, dwell: Duration) -> Option<StabilitySeries> {
        if self.lock.entries.len() < 2 {
            return None;
        }
        let tau0 = Duration::from_fs(dwell.as_fs() * 2);
        Some(StabilitySeries::new(
            tau0,
            self.lock.entries.iter().map(|e| e.residual).collect(),
        ))
    }
}

/// Runs a locked or free-running link scenario, producing offset series for
/// each requested window length (the configured one, typically; acceptance
/// suites pass several). `on_batch` sees every event batch of the
/// measurement phase, in order.
pub fn run_link(
    cfg: &RunConfig,
    windows: &[Duration],
    mut on_batch: impl FnMut(&EventBatch) -> Result<(), ScenarioError>,
) -> Result<LinkRun, ScenarioError> {
    let locked = matches!(cfg.scenario, Scenario::Locked4km | Scenario::Locked0km);
    let mut plant = PlantState::new(cfg.plant.clone(), cfg.seed)?;
    let mut lock = LockRecord::default();
    let mut scan = None;
    let mut controller = if locked {
        let s = scan_dip(&mut plant, &cfg.controller)?;
        let c = LockController::new(cfg.controller, s.minimum_setting);
        scan = Some(s);
        Some(c)
    } else {
        None
    };

    let origin = plant.now();
    let end = origin + cfg.duration;
    let mut correlators: Vec<WindowedCorrelator> =
        windows.iter().map(|&w| {
            let c = crate::sync::CorrelationConfig { window: w, ..cfg.correlation };
            WindowedCorrelator::new(c, origin)
        }).collect();
    let mut fits: Vec<BTreeMap<usize, Result<OffsetEstimate, SyncError>>> =
        windows.iter().map(|_| BTreeMap::new()).collect();
    let mut last_hists: Vec<Option<CorrelationHistogram>> = windows.iter().map(|_| None).collect();

    let feed = |plant: &mut PlantState,
                correlators: &mut Vec<WindowedCorrelator>,
                batch: &EventBatch| {
        // The tagger's systematic and white noise ride on the start
        // channel; the correlation bin width is the difference
        // digitization, so channel tags are not re-quantized here.
        for &tag in batch.d3.tags() {
            let t = plant.tcspc_transform_tag(tag);
            for wc in correlators.iter_mut() {
                wc.push_a(t);
            }
        }
        for &tag in batch.d4.tags() {
            for wc in correlators.iter_mut() {
                wc.push_b(tag);
            }
        }
    };

    while plant.now() < end {
        match &mut controller {
            Some(ctrl) => match ctrl.cycle(&mut plant)? {
                CycleOutcome::Step(entry, batches) => {
                    lock.entries.push(entry);
                    for batch in &batches {
                        on_batch(batch)?;
                        feed(&mut plant, &mut correlators, batch);
                    }
                }
                CycleOutcome::RelockRequired => {
                    let s = scan_dip(&mut plant, &cfg.controller)?;
                    *ctrl = LockController::new(cfg.controller, s.minimum_setting);
                    lock.rescans += 1;
                }
            },
            None => {
                let batch = plant.advance(cfg.controller.dwell);
                on_batch(&batch)?;
                feed(&mut plant, &mut correlators, &batch);
            }
        }
        for (slot, wc) in correlators.iter_mut().enumerate() {
            for (idx, hist) in wc.drain_completed() {
                if window_complete(idx, windows[slot], cfg.duration) {
                    last_hists[slot] = Some(hist.clone());
                    fits[slot].insert(idx, fit_gaussian(&hist));
                }
            }
        }
    }
    for (slot, wc) in correlators.into_iter().enumerate() {
        for (idx, hist) in wc.finish() {
            if window_complete(idx, windows[slot], cfg.duration)
                && !fits[slot].contains_key(&idx)
            {
                last_hists[slot] = Some(hist.clone());
                fits[slot].insert(idx, fit_gaussian(&hist));
            }
        }
    }

    let mut series = Vec::new();
    for (slot, &window) in windows.iter().enumerate() {
        let total = (cfg.duration.as_fs() / window.as_fs()) as usize;
        let mut points = Vec::with_capacity(total);
        for idx in 0..total {
            let estimate = fits[slot].remove(&idx).unwrap_or(Err(SyncError::NoPeak {
                max_count: 0,
                background: 0.0,
            }));
            points.push(OffsetPoint {
                index: idx,
                start: origin + Duration::from_fs(idx as i128 * window.as_fs()),
                estimate,
            });
        }
        series.push(WindowSeries { window, points, last_histogram: last_hists[slot].take() });
    }
    Ok(LinkRun { scan, lock, origin, series })
}

fn window_complete(idx: usize, window: Duration, duration: Duration) -> bool {
    (idx as i128 + 1) * window.as_fs() <= duration.as_fs()
}

/// The time-tagger self-test: a constant 1 Hz pulse-pair difference through
/// the instrument model.
pub fn run_selftest(cfg: &RunConfig) -> StabilitySeries {
    let mut unit = TcspcUnit::new(cfg.plant.tcspc, cfg.seed, "plant.tcspc");
    let n = cfg.duration.as_secs_f64().floor() as usize;
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let at = TimeTag::from_fs((k as i128 + 1) * crate::timebase::FS_PER_S);
        values.push(unit.measure(Duration::ZERO, at));
    }
    StabilitySeries::new(Duration::from_secs(1), values)
}

/// TDEV averaging factors for a series: the configured override, or powers
/// of two up to N/4 augmented with the factor nearest 1000 s.
pub fn m_grid_for(cfg: &RunConfig, series: &StabilitySeries) -> Vec<usize> {
    if let Some(ms) = &cfg.m_values {
        return ms.clone();
    }
    let mut grid = default_m_grid(series.len());
    let tau0_s = series.tau0().as_secs_f64();
    if tau0_s > 0.0 {
        let m_1000 = (1000.0 / tau0_s).round().max(1.0) as usize;
        if series.len() >= 3 * m_1000 + 1 && !grid.contains(&m_1000) {
            grid.push(m_1000);
        }
    }
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Headline numbers plus the output manifest.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub version: String,
    pub time_compression: f64,
    pub duration_s: f64,
    pub files: Vec<String>,
    pub windows_total: usize,
    pub windows_failed: usize,
    pub rescans: usize,
    pub scan_minimum_fs: Option<i128>,
    pub mean_offset_fs: Option<f64>,
    pub offset_stddev_fs: Option<f64>,
    pub rms_inloop_fs: Option<f64>,
    /// (averaging time s, tdev fs) points per curve.
    pub tdev_offset: Vec<(f64, f64)>,
    pub tdev_inloop: Vec<(f64, f64)>,
    pub tdev_selftest: Vec<(f64, f64)>,
}

impl RunSummary {
    fn new(cfg: &RunConfig) -> Self {
        RunSummary {
            scenario: cfg.scenario,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            time_compression: cfg.time_compression,
            duration_s: cfg.duration.as_secs_f64(),
            files: Vec::new(),
            windows_total: 0,
            windows_failed: 0,
            rescans: 0,
            scan_minimum_fs: None,
            mean_offset_fs: None,
            offset_stddev_fs: None,
            rms_inloop_fs: None,
            tdev_offset: Vec::new(),
            tdev_inloop: Vec::new(),
            tdev_selftest: Vec::new(),
        }
    }

    /// TDEV of the offset series at the averaging time nearest `tau_s`.
    pub fn tdev_offset_near(&self, tau_s: f64) -> Option<(f64, f64)> {
        self.tdev_offset
            .iter()
            .min_by(|a, b| {
                (a.0 - tau_s).abs().partial_cmp(&(b.0 - tau_s).abs()).expect("finite")
            })
            .copied()
    }

    fn curve_line(points: &[(f64, f64)]) -> String {
        points
            .iter()
            .map(|(tau, tdev)| format!("{tau}:{tdev}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "scenario = {}", self.scenario.name())?;
        writeln!(w, "seed = {}", self.seed)?;
        writeln!(w, "version = {}", self.version)?;
        writeln!(w, "time_compression = {}", self.time_compression)?;
        writeln!(w, "duration_s = {}", self.duration_s)?;
        writeln!(w, "windows_total = {}", self.windows_total)?;
        writeln!(w, "windows_failed = {}", self.windows_failed)?;
        writeln!(w, "rescans = {}", self.rescans)?;
        if let Some(v) = self.scan_minimum_fs {
            writeln!(w, "scan_minimum_fs = {v}")?;
        }
        if let Some(v) = self.mean_offset_fs {
            writeln!(w, "mean_offset_fs = {v}")?;
        }
        if let Some(v) = self.offset_stddev_fs {
            writeln!(w, "offset_stddev_fs = {v}")?;
        }
        if let Some(v) = self.rms_inloop_fs {
            writeln!(w, "rms_inloop_fs = {v}")?;
        }
        if !self.tdev_offset.is_empty() {
            writeln!(w, "tdev_offset_points = {}", Self::curve_line(&self.tdev_offset))?;
        }
        if !self.tdev_inloop.is_empty() {
            writeln!(w, "tdev_inloop_points = {}", Self::curve_line(&self.tdev_inloop))?;
        }
        if !self.tdev_selftest.is_empty() {
            writeln!(w, "tdev_selftest_points = {}", Self::curve_line(&self.tdev_selftest))?;
        }
        writeln!(w, "files = {}", self.files.join(","))?;
        Ok(())
    }
}

/// Sample mean and standard deviation (n-1) of offset centers, fs.
pub fn offset_stats(series: &WindowSeries) -> Option<(f64, f64)> {
    let taus: Vec<f64> =
        series.successes().map(|(_, e)| e.tau_hat.as_fs_f64()).collect();
    if taus.is_empty() {
        return None;
    }
    let n = taus.len() as f64;
    let mean = taus.iter().sum::<f64>() / n;
    let var = if taus.len() > 1 {
        taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self, ScenarioError> {
        std::fs::create_dir_all(root).map_err(|source| ScenarioError::Output {
            path: root.display().to_string(),
            source,
        })?;
        Ok(OutDir { root: root.to_path_buf(), files: Vec::new() })
    }

    fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<(), ScenarioError> {
        let path = self.root.join(name);
        let wrap = |source| ScenarioError::Output { path: path.display().to_string(), source };
        let file = File::create(&path).map_err(wrap)?;
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(wrap)?;
        w.flush().map_err(wrap)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn tdev_points(curve: &TdevCurve) -> Vec<(f64, f64)> {
    curve.points.iter().map(|p| (p.averaging_time.as_secs_f64(), p.tdev_fs)).collect()
}

fn write_tdev_csv<W: Write>(curve: &TdevCurve, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "averaging_time_s,tdev_fs,n_terms")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.averaging_time.as_secs_f64(), p.tdev_fs, p.n_terms)?;
    }
    Ok(())
}

fn write_offsets_csv<W: Write>(series: &WindowSeries, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "time_fs,tau_hat_fs,sigma_fs,fit_rms")?;
    for (p, e) in series.successes() {
        writeln!(
            w,
            "{},{},{},{}",
            p.start.as_fs(),
            e.tau_hat.as_fs(),
            e.sigma.as_fs(),
            e.fit_rms
        )?;
    }
    Ok(())
}

/// Executes the scenario and writes all outputs into `out_root`.
///
/// On success every file named in the summary manifest exists and is
/// non-empty.
pub fn run(cfg: &RunConfig, out_root: &Path) -> Result<RunSummary, ScenarioError> {
    let mut out = OutDir::create(out_root)?;
    let echo = cfg.echo_toml();
    out.write("config_echo.toml", |w| w.write_all(echo.as_bytes()))?;
    let mut summary = RunSummary::new(cfg);

    match cfg.scenario {
        Scenario::DipScan => {
            let mut plant = PlantState::new(cfg.plant.clone(), cfg.seed)?;
            let scan = scan_dip(&mut plant, &cfg.controller)?;
            out.write("dip_scan.csv", |w| write_scan_csv(&scan, w))?;
            summary.scan_minimum_fs = Some(scan.minimum_setting.as_fs());
        }
        Scenario::TcspcSelftest => {
            let series = run_selftest(cfg);
            out.write("selftest.csv", |w| {
                writeln!(w, "time_fs,measured_fs")?;
                for (k, v) in series.values().iter().enumerate() {
                    writeln!(
                        w,
                        "{},{}",
                        (k as i128 + 1) * crate::timebase::FS_PER_S,
                        v.as_fs()
                    )?;
                }
                Ok(())
            })?;
            let curve = tdev(&series, &m_grid_for(cfg, &series));
            out.write("selftest_tdev.csv", |w| write_tdev_csv(&curve, w))?;
            summary.tdev_selftest = tdev_points(&curve);
        }
        Scenario::Locked4km | Scenario::Locked0km | Scenario::FreeRunning => {
            run_link_scenario(cfg, &mut out, &mut summary)?;
        }
    }

    let mut body = Vec::new();
    summary.files = out.files.clone();
    summary.files.push("summary.txt".to_string());
    summary.write(&mut body).expect("in-memory write");
    out.write("summary.txt", |w| w.write_all(&body))?;

    for name in &summary.files {
        let path = out_root.join(name);
        let meta = std::fs::metadata(&path).map_err(|source| ScenarioError::Output {
            path: path.display().to_string(),
            source,
        })?;
        debug_assert!(meta.len() > 0, "manifest file {name} is empty");
    }
    Ok(summary)
}

fn run_link_scenario(
    cfg: &RunConfig,
    out: &mut OutDir,
    summary: &mut RunSummary,
) -> Result<(), ScenarioError> {
    let locked = matches!(cfg.scenario, Scenario::Locked4km | Scenario::Locked0km);

    // Optional raw timestamp dump, streamed batch by batch.
    let mut dump: Option<BufWriter<File>> = if cfg.dump_timestamps {
        let path = out.root.join("timestamps.csv");
        let wrap = |source| ScenarioError::Output { path: "timestamps.csv".into(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(wrap)?);
        writeln!(w, "clock_id,ticks_fs").map_err(wrap)?;
        Some(w)
    } else {
        None
    };

    let link = run_link(cfg, &[cfg.correlation.window], |batch| {
        if let Some(w) = &mut dump {
            batch
                .d3
                .write_csv_rows(w)
                .and_then(|_| batch.d4.write_csv_rows(w))
                .map_err(|source| ScenarioError::Output {
                    path: "timestamps.csv".into(),
                    source,
                })?;
        }
        Ok(())
    })?;
    if let Some(mut w) = dump {
        w.flush().map_err(|source| ScenarioError::Output {
            path: "timestamps.csv".into(),
            source,
        })?;
        out.files.push("timestamps.csv".to_string());
    }

    if let Some(scan) = &link.scan {
        out.write("dip_scan.csv", |w| write_scan_csv(scan, w))?;
        summary.scan_minimum_fs = Some(scan.minimum_setting.as_fs());
    }
    if locked {
        out.write("lock_record.csv", |w| link.lock.write_csv(w))?;
        summary.rescans = link.lock.rescans;
        if let Some(series) = link.inloop_series(cfg.controller.dwell) {
            summary.rms_inloop_fs = Some(rms(&series).expect("non-empty"));
            let curve = tdev(&series, &m_grid_for(cfg, &series));
            out.write("inloop_tdev.csv", |w| write_tdev_csv(&curve, w))?;
            summary.tdev_inloop = tdev_points(&curve);
        }
    }

    let series = &link.series[0];
    summary.windows_total = series.points.len();
    summary.windows_failed = series.failed_count();
    out.write("offsets.csv", |w| write_offsets_csv(series, w))?;
    if let Some(hist) = &series.last_histogram {
        out.write("histogram_last.csv", |w| hist.write_csv(w))?;
    }
    if let Some((mean, sd)) = offset_stats(series) {
        summary.mean_offset_fs = Some(mean);
        summary.offset_stddev_fs = Some(sd);
    }
    if let Some(stab) = series.longest_contiguous_series() {
        let curve = tdev(&stab, &m_grid_for(cfg, &stab));
        out.write("offset_tdev.csv", |w| write_tdev_csv(&curve, w))?;
        summary.tdev_offset = tdev_points(&curve);
    }
    Ok(())
}
