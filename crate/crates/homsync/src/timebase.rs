//! Exact-integer time representation shared by every other module.
//!
//! All timing in the simulator is carried as a signed 128-bit count of
//! femtoseconds. 64-bit femtoseconds overflow after about 2.6 simulated
//! hours, while runs here span up to ~10^6 simulated seconds; i128 covers
//! that with ~18 orders of magnitude to spare, and integer arithmetic keeps
//! long correlation sums free of floating-point drift. The only place a
//! value is ever rounded is the explicit [`Duration::quantize`].

use std::fmt;
use std::io::{self, BufRead, Write};
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// Femtoseconds per picosecond.
pub const FS_PER_PS: i128 = 1_000;
/// Femtoseconds per nanosecond.
pub const FS_PER_NS: i128 = 1_000_000;
/// Femtoseconds per second.
pub const FS_PER_S: i128 = 1_000_000_000_000_000;

/// A signed span of time with 1 fs resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[derive(Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration {
    ticks: i128,
}

impl Duration {
    pub const ZERO: Duration = Duration { ticks: 0 };

    pub const fn from_fs(ticks: i128) -> Self {
        Duration { ticks }
    }

    pub const fn from_ps(ps: i128) -> Self {
        Duration { ticks: ps * FS_PER_PS }
    }

    pub const fn from_ns(ns: i128) -> Self {
        Duration { ticks: ns * FS_PER_NS }
    }

    pub const fn from_secs(s: i128) -> Self {
        Duration { ticks: s * FS_PER_S }
    }

    /// Nearest femtosecond; halves round away from zero (`f64::round`).
    pub fn from_fs_f64(fs: f64) -> Self {
        Duration { ticks: fs.round() as i128 }
    }

    pub fn from_ps_f64(ps: f64) -> Self {
        Self::from_fs_f64(ps * FS_PER_PS as f64)
    }

    pub fn from_ns_f64(ns: f64) -> Self {
        Self::from_fs_f64(ns * FS_PER_NS as f64)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Self::from_fs_f64(s * FS_PER_S as f64)
    }

    pub const fn as_fs(self) -> i128 {
        self.ticks
    }

    /// Lossy conversion; exact only below 2^53 fs (~2.5 simulated hours).
    pub fn as_fs_f64(self) -> f64 {
        self.ticks as f64
    }

    pub fn as_ps_f64(self) -> f64 {
        self.ticks as f64 / FS_PER_PS as f64
    }

    pub fn as_secs_f64(self) -> f64 {
        self.ticks as f64 / FS_PER_S as f64
    }

    pub const fn abs(self) -> Duration {
        Duration { ticks: self.ticks.abs() }
    }

    pub const fn is_positive(self) -> bool {
        self.ticks > 0
    }

    /// Nearest integer multiple of `resolution`; ties round toward zero.
    ///
    /// Toward-zero tie handling makes the rule sign-symmetric:
    /// `quantize(-t, r) == -quantize(t, r)`.
    ///
    /// # Panics
    /// Panics if `resolution` is not positive.
    pub fn quantize(self, resolution: Duration) -> Duration {
        assert!(resolution.ticks > 0, "quantize requires a positive resolution");
        let r = resolution.ticks;
        let magnitude = self.ticks.unsigned_abs();
        let ru = r.unsigned_abs();
        let base = magnitude / ru;
        let rem = magnitude % ru;
        // Strict inequality keeps exact halves at `base`, i.e. toward zero.
        let steps = if 2 * rem > ru { base + 1 } else { base };
        let quantized = (steps as i128) * r;
        Duration { ticks: if self.ticks < 0 { -quantized } else { quantized } }
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration { ticks: self.ticks + rhs.ticks }
    }
}

impl AddAssign for Duration {
    fn add_assign(&mut self, rhs: Duration) {
        self.ticks += rhs.ticks;
    }
}

impl Sub for Duration {
    type Output = Duration;
    fn sub(self, rhs: Duration) -> Duration {
        Duration { ticks: self.ticks - rhs.ticks }
    }
}

impl SubAssign for Duration {
    fn sub_assign(&mut self, rhs: Duration) {
        self.ticks -= rhs.ticks;
    }
}

impl Neg for Duration {
    type Output = Duration;
    fn neg(self) -> Duration {
        Duration { ticks: -self.ticks }
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} fs", self.ticks)
    }
}

/// An absolute event time: femtoseconds since the simulation epoch.
///
/// The epoch is simulation start; there are no calendar semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[derive(Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeTag {
    ticks: i128,
}

impl TimeTag {
    pub const EPOCH: TimeTag = TimeTag { ticks: 0 };

    pub const fn from_fs(ticks: i128) -> Self {
        TimeTag { ticks }
    }

    pub const fn as_fs(self) -> i128 {
        self.ticks
    }

    pub fn as_secs_f64(self) -> f64 {
        self.ticks as f64 / FS_PER_S as f64
    }

    /// Span since the epoch.
    pub const fn elapsed(self) -> Duration {
        Duration { ticks: self.ticks }
    }
}

impl Add<Duration> for TimeTag {
    type Output = TimeTag;
    fn add(self, rhs: Duration) -> TimeTag {
        TimeTag { ticks: self.ticks + rhs.as_fs() }
    }
}

impl AddAssign<Duration> for TimeTag {
    fn add_assign(&mut self, rhs: Duration) {
        self.ticks += rhs.as_fs();
    }
}

impl Sub<Duration> for TimeTag {
    type Output = TimeTag;
    fn sub(self, rhs: Duration) -> TimeTag {
        TimeTag { ticks: self.ticks - rhs.as_fs() }
    }
}

impl Sub for TimeTag {
    type Output = Duration;
    fn sub(self, rhs: TimeTag) -> Duration {
        Duration::from_fs(self.ticks - rhs.ticks)
    }
}

impl fmt::Display for TimeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} fs", self.ticks)
    }
}

/// Which simulated clock recorded a timestamp stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClockId {
    A,
    B,
}

impl fmt::Display for ClockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClockId::A => write!(f, "A"),
            ClockId::B => write!(f, "B"),
        }
    }
}

/// A time-ordered stream of arrival timestamps from one clock.
///
/// Tags are non-decreasing. Equal tags are representable but the detector
/// model never emits them (dead time separates detections).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampSeries {
    clock_id: ClockId,
    tags: Vec<TimeTag>,
}

impl TimestampSeries {
    pub fn new(clock_id: ClockId) -> Self {
        TimestampSeries { clock_id, tags: Vec::new() }
    }

    /// Builds a series from tags in any order; sorts them.
    pub fn from_tags(clock_id: ClockId, mut tags: Vec<TimeTag>) -> Self {
        tags.sort_unstable();
        TimestampSeries { clock_id, tags }
    }

    /// Appends a tag.
    ///
    /// # Panics
    /// Panics if `tag` precedes the last tag already in the series.
    pub fn push(&mut self, tag: TimeTag) {
        if let Some(last) = self.tags.last() {
            assert!(tag >= *last, "timestamp series must be non-decreasing");
        }
        self.tags.push(tag);
    }

    pub fn clock_id(&self) -> ClockId {
        self.clock_id
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Tags `t` with `start <= t < start + length`, order preserved.
    ///
    /// # Panics
    /// Panics if `length` is negative.
    pub fn window(&self, start: TimeTag, length: Duration) -> TimestampSeries {
        assert!(length >= Duration::ZERO, "window length must be non-negative");
        let end = start + length;
        let lo = self.tags.partition_point(|t| *t < start);
        let hi = self.tags.partition_point(|t| *t < end);
        TimestampSeries { clock_id: self.clock_id, tags: self.tags[lo..hi].to_vec() }
    }

    /// Writes `clock_id,ticks_fs` rows (no header) for this series.
    pub fn write_csv_rows<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for tag in &self.tags {
            writeln!(w, "{},{}", self.clock_id, tag.as_fs())?;
        }
        Ok(())
    }
}

/// Writes several series to one CSV with columns `clock_id,ticks_fs`.
pub fn write_streams_csv<W: Write>(streams: &[&TimestampSeries], w: &mut W) -> io::Result<()> {
    writeln!(w, "clock_id,ticks_fs")?;
    for s in streams {
        s.write_csv_rows(w)?;
    }
    Ok(())
}

/// Reads a `clock_id,ticks_fs` CSV back into one series per clock id.
pub fn read_streams_csv<R: BufRead>(r: R) -> io::Result<Vec<TimestampSeries>> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("clock_id")) {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let id = parts.next().unwrap_or("");
        let ticks = parts
            .next()
            .and_then(|v| v.trim().parse::<i128>().ok())
            .ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("bad row {}: {line}", lineno + 1))
            })?;
        match id.trim() {
            "A" => a.push(TimeTag::from_fs(ticks)),
            "B" => b.push(TimeTag::from_fs(ticks)),
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("unknown clock id {other:?} on row {}", lineno + 1),
                ))
            }
        }
    }
    Ok(vec![
        TimestampSeries::from_tags(ClockId::A, a),
        TimestampSeries::from_tags(ClockId::B, b),
    ])
}
