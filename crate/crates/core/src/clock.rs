//! Simulated time. Nothing in the simulator reads the wall clock.

use std::fmt;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub NaiveDateTime);

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).ok().map(Timestamp)
    }

    pub fn plus_seconds(self, secs: i64) -> Self {
        Timestamp(self.0 + Duration::seconds(secs))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format(TIMESTAMP_FORMAT))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Slot {
    Morning,
    Evening,
}

impl Slot {
    pub fn index(self) -> u32 {
        match self {
            Slot::Morning => 0,
            Slot::Evening => 1,
        }
    }

    pub fn from_index(i: u32) -> Self {
        if i.is_multiple_of(2) {
            Slot::Morning
        } else {
            Slot::Evening
        }
    }
}

/// Trial-level clock: two decision slots per calendar day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    pub start_date: NaiveDate,
    pub current_day: u32,
    pub current_slot: Slot,
}

/// Controller-level clock times for the two slots; participants' own
/// notification windows are offsets from these.
pub const MORNING_HOUR: u32 = 8;
pub const EVENING_HOUR: u32 = 20;

impl SimClock {
    pub fn new(start_date: NaiveDate) -> Self {
        Self {
            start_date,
            current_day: 0,
            current_slot: Slot::Morning,
        }
    }

    pub fn tick(&self) -> u32 {
        self.current_day * 2 + self.current_slot.index()
    }

    pub fn at_tick(start_date: NaiveDate, tick: u32) -> Self {
        Self {
            start_date,
            current_day: tick / 2,
            current_slot: Slot::from_index(tick % 2),
        }
    }

    pub fn advance(&mut self) {
        match self.current_slot {
            Slot::Morning => self.current_slot = Slot::Evening,
            Slot::Evening => {
                self.current_slot = Slot::Morning;
                self.current_day += 1;
            }
        }
    }

    pub fn date(&self, day: u32) -> NaiveDate {
        self.start_date + Duration::days(i64::from(day))
    }

    /// Timestamp of a slot on a given trial day, shifted by `minute_offset`.
    pub fn slot_time(&self, day: u32, slot: Slot, minute_offset: i64) -> Timestamp {
        let hour = match slot {
            Slot::Morning => MORNING_HOUR,
            Slot::Evening => EVENING_HOUR,
        };
        let base = self.date(day).and_time(NaiveTime::from_hms_opt(hour, 0, 0).expect("valid hour"));
        Timestamp(base + Duration::minutes(minute_offset))
    }

    pub fn now(&self) -> Timestamp {
        self.slot_time(self.current_day, self.current_slot, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_is_strictly_monotone() {
        let mut c = SimClock::new(NaiveDate::from_ymd_opt(2023, 9, 1).unwrap());
        let mut last = c.now();
        let mut last_tick = c.tick();
        for _ in 0..20 {
            c.advance();
            assert!(c.now() > last);
            assert_eq!(c.tick(), last_tick + 1);
            last = c.now();
            last_tick = c.tick();
        }
        assert_eq!(c.current_day, 10);
    }

    #[test]
    fn timestamp_format_roundtrip() {
        let c = SimClock::new(NaiveDate::from_ymd_opt(2024, 3, 1).unwrap());
        let t = c.slot_time(3, Slot::Evening, 15);
        assert_eq!(t.to_string(), "2024-03-04 20:15:00");
        assert_eq!(Timestamp::parse("2024-03-04 20:15:00"), Some(t));
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, "\"2024-03-04 20:15:00\"");
    }
}
