//! Event-selector encoding for the programmable counter control registers.
//!
//! An event is named by two 8-bit fields, the event select code and the unit
//! mask. Together they span a 16-bit space of 65536 selectors, most of which
//! are not listed in any vendor catalog.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of selectors in the event space.
pub const EVENT_SPACE_SIZE: usize = 1 << 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectorParseError {
    #[error("selector `{0}` is not of the form 0xUUEE")]
    Malformed(String),
}

/// One point of the event space: `(event_code, umask)`.
///
/// Ordering follows the packed identity `umask * 256 + event_code`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct EventSelector {
    pub event_code: u8,
    pub umask: u8,
}

impl EventSelector {
    pub const fn new(event_code: u8, umask: u8) -> Self {
        Self { event_code, umask }
    }

    /// Packed 16-bit identity, umask in the high byte.
    pub const fn pack(self) -> u16 {
        ((self.umask as u16) << 8) | self.event_code as u16
    }

    pub const fn unpack(packed: u16) -> Self {
        Self {
            event_code: (packed & 0xff) as u8,
            umask: (packed >> 8) as u8,
        }
    }
}

impl PartialOrd for EventSelector {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventSelector {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.pack().cmp(&other.pack())
    }
}

/// Free-function form of [`EventSelector::pack`].
pub fn pack_selector(s: EventSelector) -> u16 {
    s.pack()
}

impl fmt::Display for EventSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:04X}", self.pack())
    }
}

impl FromStr for EventSelector {
    type Err = SelectorParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let hex = t
            .strip_prefix("0x")
            .or_else(|| t.strip_prefix("0X"))
            .ok_or_else(|| SelectorParseError::Malformed(s.to_string()))?;
        if hex.is_empty() || hex.len() > 4 {
            return Err(SelectorParseError::Malformed(s.to_string()));
        }
        u16::from_str_radix(hex, 16)
            .map(EventSelector::unpack)
            .map_err(|_| SelectorParseError::Malformed(s.to_string()))
    }
}

impl Serialize for EventSelector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EventSelector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Yields all 65536 selectors in ascending packed order.
pub fn enumerate_space() -> impl ExactSizeIterator<Item = EventSelector> + Clone {
    (0..EVENT_SPACE_SIZE).map(|p| EventSelector::unpack(p as u16))
}

/// Contents of an `IA32_PERFEVTSELx` register.
///
/// ```text
///  63        32 31    24 23  22  21  20  19  18  17  16 15    8 7      0
/// +------------+--------+---+---+---+---+---+---+---+---+-------+--------+
/// |  reserved  | cmask  |inv|en |any|int| pc| e | os|usr| umask | event  |
/// +------------+--------+---+---+---+---+---+---+---+---+-------+--------+
/// ```
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerfEvtSelValue {
    pub selector: EventSelector,
    pub usr: bool,
    pub os: bool,
    pub edge: bool,
    pub pin_control: bool,
    pub interrupt_enable: bool,
    pub any_thread: bool,
    pub enable: bool,
    pub invert: bool,
    pub counter_mask: u8,
}

const USR_BIT: u32 = 16;
const OS_BIT: u32 = 17;
const EDGE_BIT: u32 = 18;
const PC_BIT: u32 = 19;
const INT_BIT: u32 = 20;
const ANY_BIT: u32 = 21;
const EN_BIT: u32 = 22;
const INV_BIT: u32 = 23;
const CMASK_SHIFT: u32 = 24;

impl PerfEvtSelValue {
    /// Counting mode used for scanning: user and kernel privilege, enabled,
    /// no edge detection, inversion or threshold.
    pub fn scanning(selector: EventSelector) -> Self {
        Self {
            selector,
            usr: true,
            os: true,
            enable: true,
            ..Self::default()
        }
    }

    pub fn with_any_thread(mut self, any_thread: bool) -> Self {
        self.any_thread = any_thread;
        self
    }

    pub fn render(&self) -> u64 {
        let flag = |b: bool, bit: u32| (b as u64) << bit;
        self.selector.event_code as u64
            | (self.selector.umask as u64) << 8
            | flag(self.usr, USR_BIT)
            | flag(self.os, OS_BIT)
            | flag(self.edge, EDGE_BIT)
            | flag(self.pin_control, PC_BIT)
            | flag(self.interrupt_enable, INT_BIT)
            | flag(self.any_thread, ANY_BIT)
            | flag(self.enable, EN_BIT)
            | flag(self.invert, INV_BIT)
            | (self.counter_mask as u64) << CMASK_SHIFT
    }

    /// Inverse of [`render`](Self::render). Bits 63:32 are ignored.
    pub fn decode(raw: u64) -> Self {
        let bit = |b: u32| raw >> b & 1 == 1;
        Self {
            selector: EventSelector::new(raw as u8, (raw >> 8) as u8),
            usr: bit(USR_BIT),
            os: bit(OS_BIT),
            edge: bit(EDGE_BIT),
            pin_control: bit(PC_BIT),
            interrupt_enable: bit(INT_BIT),
            any_thread: bit(ANY_BIT),
            enable: bit(EN_BIT),
            invert: bit(INV_BIT),
            counter_mask: (raw >> CMASK_SHIFT) as u8,
        }
    }
}

/// Free-function form of [`PerfEvtSelValue::render`].
pub fn render_msr_value(v: &PerfEvtSelValue) -> u64 {
    v.render()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_examples() {
        assert_eq!(pack_selector(EventSelector::new(0x6C, 0x01)), 0x016C);
        assert_eq!(pack_selector(EventSelector::new(0, 0)), 0);
        assert_eq!(pack_selector(EventSelector::new(0xFF, 0xFF)), 0xFFFF);
    }

    #[test]
    fn render_examples() {
        let v = PerfEvtSelValue {
            selector: EventSelector::new(0x3C, 0x00),
            usr: true,
            os: true,
            enable: true,
            ..Default::default()
        };
        assert_eq!(render_msr_value(&v), 0x0000_0000_0043_003C);
        assert_eq!(PerfEvtSelValue::default().render(), 0);

        let v = PerfEvtSelValue {
            selector: EventSelector::new(0x6C, 0x01),
            enable: true,
            usr: true,
            counter_mask: 2,
            ..Default::default()
        };
        // bit-OR of each field placed independently; usr is bit 16
        let expected: u64 = 0x6C | (0x01 << 8) | (1 << 22) | (1 << 16) | (2 << 24);
        assert_eq!(expected, 0x0000_0000_0241_016C);
        assert_eq!(v.render(), expected);
    }

    #[test]
    fn scanning_defaults_match_user_kernel_enable() {
        let v = PerfEvtSelValue::scanning(EventSelector::new(0x3C, 0));
        assert_eq!(v.render(), 0x43003C);
        assert!(!v.any_thread);
    }

    #[test]
    fn enumerate_space_ordering() {
        let space: Vec<_> = enumerate_space().collect();
        assert_eq!(space.len(), 65536);
        assert_eq!(space[0], EventSelector::new(0, 0));
        assert_eq!(space[0x016C], EventSelector::new(0x6C, 0x01));
        assert!(space.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn selector_text_roundtrip() {
        let s = EventSelector::new(0x6C, 0x01);
        assert_eq!(s.to_string(), "0x016C");
        assert_eq!("0x016C".parse::<EventSelector>().unwrap(), s);
        assert_eq!("0x16c".parse::<EventSelector>().unwrap(), s);
        assert!("016C".parse::<EventSelector>().is_err());
        assert!("0x10000".parse::<EventSelector>().is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"0x016C\"");
        assert_eq!(serde_json::from_str::<EventSelector>(&json).unwrap(), s);
    }
}
