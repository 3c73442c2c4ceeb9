//! Day-scoped HHMMSS timestamps.
//!
//! Times are stored as integers `hour * 10000 + minute * 100 + second`
//! together with a 1-based recording day. Arithmetic converts to seconds on
//! demand; the integer form is what lands on disk.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Largest legal HHMMSS code (23:59:59).
pub const MAX_HHMMSS: u32 = 235959;

/// Nominal length of a recording day used when measuring across days.
pub const DEFAULT_DAY_LENGTH_S: u64 = 86_400;

pub fn encode_time(hour: u32, minute: u32, second: u32) -> Result<u32> {
    if hour >= 24 || minute >= 60 || second >= 60 {
        return Err(Error::validation(format!(
            "time component out of range: {hour:02}:{minute:02}:{second:02}"
        )));
    }
    Ok(hour * 10000 + minute * 100 + second)
}

pub fn decode_time(code: u32) -> Result<(u32, u32, u32)> {
    let (hour, minute, second) = (code / 10000, (code / 100) % 100, code % 100);
    if hour >= 24 || minute >= 60 || second >= 60 {
        return Err(Error::validation(format!("invalid HHMMSS code {code}")));
    }
    Ok((hour, minute, second))
}

/// Seconds since midnight for a valid HHMMSS code.
pub fn hhmmss_to_seconds(code: u32) -> Result<u32> {
    let (h, m, s) = decode_time(code)?;
    Ok(h * 3600 + m * 60 + s)
}

/// Inverse of [`hhmmss_to_seconds`]; `secs` must be below 86400.
pub fn seconds_to_hhmmss(secs: u32) -> Result<u32> {
    encode_time(secs / 3600, (secs / 60) % 60, secs % 60)
}

/// A point in the recording: day plus HHMMSS time of day.
///
/// Field order gives the lexicographic `(day, t)` ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DayTime {
    pub day: u32,
    #[serde(rename = "t")]
    pub time_hhmmss: u32,
}

impl DayTime {
    pub fn new(day: u32, time_hhmmss: u32) -> Result<Self> {
        if day == 0 {
            return Err(Error::validation("day numbers start at 1"));
        }
        decode_time(time_hhmmss)?;
        Ok(Self { day, time_hhmmss })
    }

    pub fn from_hms(day: u32, hour: u32, minute: u32, second: u32) -> Result<Self> {
        Self::new(day, encode_time(hour, minute, second)?)
    }

    /// Seconds since midnight of `self.day`.
    pub fn second_of_day(&self) -> u32 {
        // Constructors validate the code, so the decode cannot fail.
        hhmmss_to_seconds(self.time_hhmmss).unwrap_or(0)
    }

    /// Absolute seconds from the start of day 1 given a nominal day length.
    pub fn absolute_seconds(&self, day_length_s: u64) -> u64 {
        (self.day as u64 - 1) * day_length_s + self.second_of_day() as u64
    }

    /// Shift by `delta` seconds within the same day, clamping to
    /// `[00:00:00, 23:59:59]`.
    pub fn offset_clamped(&self, delta: i64) -> DayTime {
        let secs = (self.second_of_day() as i64 + delta).clamp(0, 86_399) as u32;
        DayTime {
            day: self.day,
            time_hhmmss: seconds_to_hhmmss(secs).unwrap_or(MAX_HHMMSS),
        }
    }

    pub fn start_of_day(day: u32) -> DayTime {
        DayTime { day, time_hhmmss: 0 }
    }

    pub fn end_of_day(day: u32) -> DayTime {
        DayTime {
            day,
            time_hhmmss: MAX_HHMMSS,
        }
    }
}

pub fn seconds_between(a: DayTime, b: DayTime, day_length_s: u64) -> u64 {
    a.absolute_seconds(day_length_s)
        .abs_diff(b.absolute_seconds(day_length_s))
}

impl fmt::Display for DayTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, m, s) = decode_time(self.time_hhmmss).unwrap_or((99, 99, 99));
        write!(f, "D{} {:02}:{:02}:{:02}", self.day, h, m, s)
    }
}

impl FromStr for DayTime {
    type Err = Error;

    /// Parses `"D4 11:34:00"` (the `D` is case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("expected \"D<day> HH:MM:SS\", got {s:?}"));
        let s = s.trim();
        let rest = s
            .strip_prefix('D')
            .or_else(|| s.strip_prefix('d'))
            .ok_or_else(bad)?;
        let (day, clock) = rest.split_once(char::is_whitespace).ok_or_else(bad)?;
        let day: u32 = day.parse().map_err(|_| bad())?;
        let parts: Vec<&str> = clock.trim().split(':').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty() || p.len() > 2) {
            return Err(bad());
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| p.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        DayTime::from_hms(day, nums[0], nums[1], nums[2])
    }
}

impl<'de> Deserialize<'de> for DayTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Wire { day: u32, t: u32 },
        }
        let dt = match Repr::deserialize(deserializer)? {
            Repr::Text(s) => s.parse(),
            Repr::Wire { day, t } => DayTime::new(day, t),
        };
        dt.map_err(serde::de::Error::custom)
    }
}

/// A closed time span that never crosses a day boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: DayTime,
    pub end: DayTime,
}

impl TimeInterval {
    pub fn new(start: DayTime, end: DayTime) -> Result<Self> {
        let interval = Self { start, end };
        interval.validate()?;
        Ok(interval)
    }

    /// Interval on `day` from `start_t` to `end_t` (both HHMMSS).
    pub fn on_day(day: u32, start_t: u32, end_t: u32) -> Result<Self> {
        Self::new(DayTime::new(day, start_t)?, DayTime::new(day, end_t)?)
    }

    pub fn validate(&self) -> Result<()> {
        DayTime::new(self.start.day, self.start.time_hhmmss)?;
        DayTime::new(self.end.day, self.end.time_hhmmss)?;
        if self.start.day != self.end.day {
            return Err(Error::validation(format!(
                "interval {} .. {} crosses a day boundary",
                self.start, self.end
            )));
        }
        if self.start > self.end {
            return Err(Error::validation(format!(
                "interval start {} is after end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn day(&self) -> u32 {
        self.start.day
    }

    /// Half-open second span `[start, end)` on the interval's day. A
    /// zero-length interval covers its starting second.
    pub fn second_span(&self) -> (u32, u32) {
        let s = self.start.second_of_day();
        let e = self.end.second_of_day();
        (s, e.max(s + 1))
    }

    /// Half-open intersection test. Intervals on different days never meet.
    pub fn intersects(&self, other: &TimeInterval) -> bool {
        if self.day() != other.day() {
            return false;
        }
        let (a0, a1) = self.second_span();
        let (b0, b1) = other.second_span();
        a0 < b1 && b0 < a1
    }

    /// True if any part of the interval falls within the closed range
    /// `[from, to]`, which may span several days.
    pub fn overlaps_range(&self, from: DayTime, to: DayTime) -> bool {
        self.start <= to && self.end >= from
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, m, s) = decode_time(self.end.time_hhmmss).unwrap_or((99, 99, 99));
        write!(f, "{}-{:02}:{:02}:{:02}", self.start, h, m, s)
    }
}

impl PartialOrd for TimeInterval {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeInterval {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.start, self.end).cmp(&(other.start, other.end))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_schema_samples() {
        assert_eq!(encode_time(13, 26, 9).unwrap(), 132609);
        assert_eq!(encode_time(18, 40, 16).unwrap(), 184016);
        assert_eq!(encode_time(0, 0, 0).unwrap(), 0);
    }

    #[test]
    fn rejects_out_of_range_components() {
        assert!(encode_time(24, 0, 0).is_err());
        assert!(encode_time(0, 60, 0).is_err());
        assert!(encode_time(0, 0, 60).is_err());
    }

    #[test]
    fn decodes_samples() {
        assert_eq!(decode_time(132609).unwrap(), (13, 26, 9));
        assert_eq!(decode_time(0).unwrap(), (0, 0, 0));
        assert_eq!(decode_time(235959).unwrap(), (23, 59, 59));
        assert!(decode_time(126000).is_err());
        assert!(decode_time(100060).is_err());
        assert!(decode_time(240000).is_err());
    }

    #[test]
    fn seconds_between_examples() {
        let a = DayTime::new(1, 100000).unwrap();
        assert_eq!(seconds_between(a, a, DEFAULT_DAY_LENGTH_S), 0);
        let b = DayTime::new(1, 100005).unwrap();
        assert_eq!(seconds_between(a, b, DEFAULT_DAY_LENGTH_S), 5);
        let late = DayTime::new(1, 235959).unwrap();
        let early = DayTime::new(2, 1).unwrap();
        assert_eq!(seconds_between(late, early, 86_400), 2);
        assert_eq!(seconds_between(early, late, 86_400), 2);
    }

    #[test]
    fn parses_and_prints_text_form() {
        let t: DayTime = "D4 11:34:00".parse().unwrap();
        assert_eq!(t, DayTime::new(4, 113400).unwrap());
        assert_eq!(t.to_string(), "D4 11:34:00");
        assert!("4 11:34:00".parse::<DayTime>().is_err());
        assert!("D4 11:61:00".parse::<DayTime>().is_err());
        assert!("D0 11:00:00".parse::<DayTime>().is_err());
    }

    #[test]
    fn json_accepts_wire_and_text() {
        let a: DayTime = serde_json::from_str(r#"{"day":2,"t":155021}"#).unwrap();
        let b: DayTime = serde_json::from_str(r#""D2 15:50:21""#).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"{"day":2,"t":155021}"#);
        assert!(serde_json::from_str::<DayTime>(r#"{"day":2,"t":156021}"#).is_err());
    }

    #[test]
    fn interval_rules() {
        assert!(TimeInterval::on_day(1, 100000, 90000).is_err());
        let cross = TimeInterval {
            start: DayTime::new(1, 235900).unwrap(),
            end: DayTime::new(2, 100).unwrap(),
        };
        assert!(cross.validate().is_err());
        let w = TimeInterval::on_day(1, 100000, 100030).unwrap();
        let touching = TimeInterval::on_day(1, 95950, 100000).unwrap();
        assert!(!w.intersects(&touching));
        let inside = TimeInterval::on_day(1, 100010, 100010).unwrap();
        assert!(w.intersects(&inside));
    }

    #[test]
    fn offset_clamps_to_day() {
        let t = DayTime::new(3, 10).unwrap();
        assert_eq!(t.offset_clamped(-25).time_hhmmss, 0);
        let t = DayTime::new(3, 235950).unwrap();
        assert_eq!(t.offset_clamped(25).time_hhmmss, 235959);
    }

    proptest! {
        #[test]
        fn round_trip(h in 0u32..24, m in 0u32..60, s in 0u32..60) {
            prop_assert_eq!(decode_time(encode_time(h, m, s).unwrap()).unwrap(), (h, m, s));
        }

        #[test]
        fn ordering_matches_absolute_seconds(
            d1 in 1u32..8, t1 in 0u32..86_400, d2 in 1u32..8, t2 in 0u32..86_400,
        ) {
            let a = DayTime::new(d1, seconds_to_hhmmss(t1).unwrap()).unwrap();
            let b = DayTime::new(d2, seconds_to_hhmmss(t2).unwrap()).unwrap();
            let oracle = |d: u32, t: u32| (d as u64 - 1) * 86_400 + t as u64;
            prop_assert_eq!(a.cmp(&b), oracle(d1, t1).cmp(&oracle(d2, t2)));
            prop_assert_eq!(seconds_between(a, b, 86_400), oracle(d1, t1).abs_diff(oracle(d2, t2)));
        }
    }
}
