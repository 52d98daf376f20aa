//! Shared bits of the CSV report writers.

use std::io::Write;

/// Run metadata written as `#` comment lines at the top of every report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub toolkit_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Extra `key value` lines, in order.
    pub notes: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(toolkit_version: impl Into<String>, config_hash: impl Into<String>, seed: Option<u64>) -> Self {
        Self { toolkit_version: toolkit_version.into(), config_hash: config_hash.into(), seed, notes: Vec::new() }
    }

    pub fn with_note(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.notes.push((key.into(), value.into()));
        self
    }
}

pub fn write_provenance(w: &mut impl Write, p: &Provenance) -> std::io::Result<()> {
    writeln!(w, "# toolkit lrfr {}", p.toolkit_version)?;
    writeln!(w, "# config_hash {}", p.config_hash)?;
    match p.seed {
        Some(s) => writeln!(w, "# seed {s}")?,
        None => writeln!(w, "# seed none")?,
    }
    for (k, v) in &p.notes {
        writeln!(w, "# {k} {v}")?;
    }
    Ok(())
}

/// Fixed-point rendering of `x` with `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x == 0.0 || !x.is_finite() {
        return format!("{:.*}", digits - 1, x);
    }
    // exponent after rounding to `digits`, so 0.9999999999 counts as 1.0
    let sci = format!("{:.*e}", digits - 1, x);
    let exp: i64 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (digits as i64 - 1 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.123456789123, 9), "0.123456789");
        assert_eq!(format_significant(1.5, 9), "1.50000000");
        assert_eq!(format_significant(0.0, 9), "0.00000000");
        assert_eq!(format_significant(0.99999999999, 9), "1.00000000");
        assert_eq!(format_significant(0.000123456789123, 9), "0.000123456789");
        assert_eq!(format_significant(2.0, 9), "2.00000000");
        assert_eq!(format_significant(1234567891.2, 9), "1234567891");
    }

    #[test]
    fn provenance_lines() {
        let mut buf = Vec::new();
        let p = Provenance::new("0.1.0", "deadbeef", Some(42)).with_note("resolution", "32");
        write_provenance(&mut buf, &p).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# toolkit lrfr 0.1.0\n# config_hash deadbeef\n# seed 42\n# resolution 32\n"
        );
    }
}
