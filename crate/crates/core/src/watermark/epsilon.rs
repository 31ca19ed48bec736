use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::WatermarkError;

/// Verification tolerance in (0, 1], held as an exact decimal fraction so
/// `ceil(ε·|T|)` has no float-boundary ambiguity (0.3 × 10 is exactly 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Epsilon {
    num: u64,
    den: u64,
}

impl Epsilon {
    pub const HALF: Epsilon = Epsilon { num: 1, den: 2 };

    pub fn from_ratio(num: u64, den: u64) -> Result<Self, WatermarkError> {
        if den == 0 || num == 0 || num > den {
            return Err(WatermarkError::Argument(format!(
                "epsilon {num}/{den} outside (0, 1]"
            )));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// Reads `value` through its shortest round-trip decimal form.
    pub fn new(value: f64) -> Result<Self, WatermarkError> {
        if !value.is_finite() {
            return Err(WatermarkError::Argument(format!(
                "epsilon {value} outside (0, 1]"
            )));
        }
        format!("{value}").parse()
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Smallest integer `k` with `k ≥ ε·queried`.
    pub fn threshold(&self, queried: usize) -> usize {
        let product = self.num as u128 * queried as u128;
        product.div_ceil(self.den as u128) as usize
    }

    /// `correct ≥ ceil(ε·queried)`.
    pub fn admits(&self, correct: usize, queried: usize) -> bool {
        correct >= self.threshold(queried)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl FromStr for Epsilon {
    type Err = WatermarkError;

    /// Accepts decimals (`0.5`, `1`, `.25`) and fractions (`3/10`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WatermarkError::Argument(format!("cannot read epsilon `{s}`"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            return Self::from_ratio(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            );
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if (int.is_empty() && frac.is_empty())
            || !int.chars().all(|c| c.is_ascii_digit())
            || !frac.chars().all(|c| c.is_ascii_digit())
        {
            return Err(bad());
        }
        let frac = frac.trim_end_matches('0');
        if frac.len() > 18 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac_value: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_value))
            .ok_or_else(bad)?;
        Self::from_ratio(num, den)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl Serialize for Epsilon {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        Epsilon::new(v).map_err(serde::de::Error::custom)
    }
}
