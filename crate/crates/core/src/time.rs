use core::fmt;
use core::ops::Sub;

use serde::{Deserialize, Serialize};

const NANOS_PER_MICRO: i64 = 1_000;
const NANOS_PER_MILLI: i64 = 1_000_000;
const NANOS_PER_SEC: i64 = 1_000_000_000;

/// A UTC instant with nanosecond resolution, counted from the Unix epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_nanos(nanos: i64) -> Self {
        Timestamp(nanos)
    }

    pub const fn from_micros(micros: i64) -> Self {
        Timestamp(micros * NANOS_PER_MICRO)
    }

    pub const fn from_millis(millis: i64) -> Self {
        Timestamp(millis * NANOS_PER_MILLI)
    }

    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs * NANOS_PER_SEC)
    }

    pub const fn from_secs_micros(secs: i64, micros: u32) -> Self {
        Timestamp(secs * NANOS_PER_SEC + micros as i64 * NANOS_PER_MICRO)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub const fn as_micros(self) -> i64 {
        self.0.div_euclid(NANOS_PER_MICRO)
    }

    pub const fn as_millis(self) -> i64 {
        self.0.div_euclid(NANOS_PER_MILLI)
    }

    pub const fn secs(self) -> i64 {
        self.0.div_euclid(NANOS_PER_SEC)
    }

    pub const fn subsec_micros(self) -> u32 {
        (self.0.rem_euclid(NANOS_PER_SEC) / NANOS_PER_MICRO) as u32
    }

    pub const fn subsec_nanos(self) -> u32 {
        self.0.rem_euclid(NANOS_PER_SEC) as u32
    }

    pub const fn offset_millis(self, millis: i64) -> Self {
        Timestamp(self.0 + millis * NANOS_PER_MILLI)
    }

    /// Seconds between `earlier` and `self` as a float.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / NANOS_PER_SEC as f64
    }
}

impl Sub for Timestamp {
    type Output = i64;

    /// Difference in nanoseconds.
    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.secs(), self.subsec_micros())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_instants_floor() {
        let t = Timestamp::from_nanos(-1);
        assert_eq!(t.secs(), -1);
        assert_eq!(t.subsec_nanos(), 999_999_999);
        assert_eq!(t.as_millis(), -1);
    }

    #[test]
    fn unit_conversions() {
        let t = Timestamp::from_secs_micros(5, 250_000);
        assert_eq!(t.as_millis(), 5_250);
        assert_eq!(t.as_micros(), 5_250_000);
        assert_eq!(t.offset_millis(750), Timestamp::from_secs(6));
        assert_eq!(Timestamp::from_secs(3) - Timestamp::from_secs(1), 2 * NANOS_PER_SEC);
    }
}
