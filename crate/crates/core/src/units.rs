//! Byte sizes and timestamps.

use std::fmt;

use thiserror::Error;

/// Timestamps are integer nanoseconds relative to the first event of a trace.
///
/// Profiler traces carry sub-microsecond precision; keeping nanoseconds avoids
/// collapsing sibling operators into false containment.
pub type Nanos = i64;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
pub const TIB: u64 = 1 << 40;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid size `{input}`: {reason}")]
pub struct SizeParseError {
    pub input: String,
    pub reason: &'static str,
}

/// Parses a byte count such as `4096`, `512KiB`, `8 GiB` or `1.5MiB`.
///
/// Only binary suffixes are accepted. Fractional values must resolve to a
/// whole number of bytes.
pub fn parse_size(input: &str) -> Result<u64, SizeParseError> {
    let err = |reason| SizeParseError {
        input: input.to_string(),
        reason,
    };
    let s = input.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, suffix) = s.split_at(split);
    if num.is_empty() {
        return Err(err("missing number"));
    }
    let unit = match suffix.trim() {
        "" | "B" => 1,
        "KiB" => KIB,
        "MiB" => MIB,
        "GiB" => GIB,
        "TiB" => TIB,
        _ => return Err(err("unknown suffix (use B, KiB, MiB, GiB or TiB)")),
    };
    if let Some((int, frac)) = num.split_once('.') {
        if frac.contains('.') {
            return Err(err("malformed number"));
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| err("malformed number"))?
        };
        let denom = 10u64
            .checked_pow(frac.len() as u32)
            .ok_or_else(|| err("too many decimals"))?;
        let frac_val: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| err("malformed number"))?
        };
        let whole = int.checked_mul(unit).ok_or_else(|| err("overflow"))?;
        let scaled = (frac_val as u128) * (unit as u128);
        if !scaled.is_multiple_of(denom as u128) {
            return Err(err("not a whole number of bytes"));
        }
        whole
            .checked_add((scaled / denom as u128) as u64)
            .ok_or_else(|| err("overflow"))
    } else {
        let n: u64 = num.parse().map_err(|_| err("malformed number"))?;
        n.checked_mul(unit).ok_or_else(|| err("overflow"))
    }
}

/// Human-readable rendering with a binary suffix, for summaries only.
pub struct HumanBytes(pub u64);

impl fmt::Display for HumanBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        if b >= GIB {
            write!(f, "{:.2} GiB", b as f64 / GIB as f64)
        } else if b >= MIB {
            write!(f, "{:.2} MiB", b as f64 / MIB as f64)
        } else if b >= KIB {
            write!(f, "{:.2} KiB", b as f64 / KIB as f64)
        } else {
            write!(f, "{b} B")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suffixes() {
        assert_eq!(parse_size("1024").unwrap(), 1024);
        assert_eq!(parse_size("8GiB").unwrap(), 8 * GIB);
        assert_eq!(parse_size("8 GiB").unwrap(), 8 * GIB);
        assert_eq!(parse_size("512KiB").unwrap(), 512 * KIB);
        assert_eq!(parse_size("1.5MiB").unwrap(), 3 * MIB / 2);
        assert_eq!(parse_size("3MiB").unwrap(), 3 * MIB);
        assert_eq!(parse_size("12B").unwrap(), 12);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_size("").is_err());
        assert!(parse_size("GiB").is_err());
        assert!(parse_size("8GB").is_err());
        assert!(parse_size("0.3B").is_err());
        assert!(parse_size("1.2.3MiB").is_err());
        assert!(parse_size("99999999999999999999").is_err());
    }

    #[test]
    fn human_rendering() {
        assert_eq!(HumanBytes(512).to_string(), "512 B");
        assert_eq!(HumanBytes(2 * MIB).to_string(), "2.00 MiB");
    }
}
