//! Microsecond timestamps and the UTC buckets used for rotation and analysis.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

pub const MICROS_PER_SEC: u64 = 1_000_000;
pub const MICROS_PER_HOUR: u64 = 3_600 * MICROS_PER_SEC;
pub const MICROS_PER_DAY: u64 = 24 * MICROS_PER_HOUR;

/// Microseconds since the Unix epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs * MICROS_PER_SEC)
    }

    pub const fn from_micros(us: u64) -> Self {
        Timestamp(us)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> u64 {
        self.0 / MICROS_PER_SEC
    }

    pub fn subsec_micros(self) -> u32 {
        (self.0 % MICROS_PER_SEC) as u32
    }

    pub fn plus_micros(self, us: u64) -> Self {
        Timestamp(self.0 + us)
    }

    pub fn plus_secs(self, secs: u64) -> Self {
        Timestamp(self.0 + secs * MICROS_PER_SEC)
    }

    /// Elapsed microseconds since `earlier`, zero if `earlier` is later.
    pub fn since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    pub fn hour(self) -> HourBucket {
        HourBucket(self.0 / MICROS_PER_HOUR)
    }

    pub fn day(self) -> NaiveDate {
        self.datetime().date_naive()
    }

    pub fn datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.as_secs() as i64, self.subsec_micros() * 1000)
            .expect("timestamp in chrono range")
    }

    pub fn now() -> Self {
        let d = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap_or_default();
        Timestamp(d.as_micros() as u64)
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.timestamp_micros().max(0) as u64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.datetime().format("%Y-%m-%dT%H:%M:%S%.6fZ"))
    }
}

/// Start of a UTC day in microseconds.
pub fn day_start(day: NaiveDate) -> Timestamp {
    Timestamp::from_datetime(day.and_hms_opt(0, 0, 0).unwrap().and_utc())
}

/// Index of a UTC hour since the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HourBucket(pub u64);

impl HourBucket {
    pub fn start(self) -> Timestamp {
        Timestamp(self.0 * MICROS_PER_HOUR)
    }

    pub fn next(self) -> HourBucket {
        HourBucket(self.0 + 1)
    }

    /// `YYYY-MM-DD-HH`.
    pub fn label(self) -> String {
        let dt = self.start().datetime();
        format!(
            "{:04}-{:02}-{:02}-{:02}",
            dt.year(),
            dt.month(),
            dt.day(),
            dt.hour()
        )
    }

    pub fn parse_label(s: &str) -> Option<HourBucket> {
        let mut it = s.split('-');
        let y: i32 = it.next()?.parse().ok()?;
        let m: u32 = it.next()?.parse().ok()?;
        let d: u32 = it.next()?.parse().ok()?;
        let h: u32 = it.next()?.parse().ok()?;
        if it.next().is_some() {
            return None;
        }
        let dt = NaiveDate::from_ymd_opt(y, m, d)?.and_hms_opt(h, 0, 0)?.and_utc();
        Some(Timestamp::from_datetime(dt).hour())
    }

    /// `(YYYY, MM, DD, HH)` path components.
    pub fn components(self) -> (String, String, String, String) {
        let dt = self.start().datetime();
        (
            format!("{:04}", dt.year()),
            format!("{:02}", dt.month()),
            format!("{:02}", dt.day()),
            format!("{:02}", dt.hour()),
        )
    }
}

/// Source of time for components that rotate, pace or back off.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
    fn sleep_micros(&self, us: u64);
}

/// Wall clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }

    fn sleep_micros(&self, us: u64) {
        std::thread::sleep(std::time::Duration::from_micros(us));
    }
}

/// Logical clock; `sleep_micros` advances it instantly.
#[derive(Debug, Default)]
pub struct SimClock(AtomicU64);

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        SimClock(AtomicU64::new(start.0))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, us: u64) {
        self.0.fetch_add(us, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }

    fn sleep_micros(&self, us: u64) {
        self.advance(us);
    }
}
