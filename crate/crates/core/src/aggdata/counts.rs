use serde::{Deserialize, Serialize};

use super::DataError;

/// Event counts and arm sizes (arm 1 = treated, arm 0 = control).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmCounts {
    pub events1: u64,
    pub n1: u64,
    pub events0: u64,
    pub n0: u64,
}

impl ArmCounts {
    fn check(&self) -> Result<(), DataError> {
        if self.n1 == 0 || self.n0 == 0 {
            return Err(DataError::InvalidCount(format!("zero arm size (n1 = {}, n0 = {})", self.n1, self.n0)));
        }
        if self.events1 > self.n1 || self.events0 > self.n0 {
            return Err(DataError::InvalidCount(format!(
                "events exceed arm size ({}/{}, {}/{})",
                self.events1, self.n1, self.events0, self.n0
            )));
        }
        Ok(())
    }

    /// Both arms have all-or-nothing outcomes, so the Wald SE is 0.
    pub fn is_degenerate(&self) -> bool {
        let deg = |e: u64, n: u64| e == 0 || e == n;
        deg(self.events1, self.n1) && deg(self.events0, self.n0)
    }

    pub fn total(&self) -> u64 {
        self.n1 + self.n0
    }
}

/// Risk difference `p1 − p0` with its unpooled Wald standard error.
pub fn risk_difference_from_counts(events1: u64, n1: u64, events0: u64, n0: u64) -> Result<(f64, f64), DataError> {
    ArmCounts { events1, n1, events0, n0 }.check()?;
    let p1 = events1 as f64 / n1 as f64;
    let p0 = events0 as f64 / n0 as f64;
    let var = p1 * (1.0 - p1) / n1 as f64 + p0 * (1.0 - p0) / n0 as f64;
    Ok((p1 - p0, var.max(0.0).sqrt()))
}

/// Risk ratio `p1 / p0` with a delta-method standard error on the ratio scale.
pub fn risk_ratio_from_counts(events1: u64, n1: u64, events0: u64, n0: u64) -> Result<(f64, f64), DataError> {
    ArmCounts { events1, n1, events0, n0 }.check()?;
    if events1 == 0 || events0 == 0 {
        return Err(DataError::InvalidCount("risk ratio needs at least one event per arm".into()));
    }
    let p1 = events1 as f64 / n1 as f64;
    let p0 = events0 as f64 / n0 as f64;
    let rr = p1 / p0;
    let var_log = 1.0 / events1 as f64 - 1.0 / n1 as f64 + 1.0 / events0 as f64 - 1.0 / n0 as f64;
    Ok((rr, rr * var_log.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emperor_preserved_overall_row() {
        let (d, se) = risk_difference_from_counts(415, 2997, 511, 2991).unwrap();
        assert!((d - (-0.032)).abs() <= 0.0005);
        assert!((se - 0.009).abs() <= 0.0005);
    }

    #[test]
    fn dapa_hf_overall_row_unrounded() {
        let (d, se) = risk_difference_from_counts(382, 2373, 495, 2371).unwrap();
        assert!((d - (-0.0478)).abs() < 5e-5, "{d}");
        assert!((se - 0.0113).abs() < 5e-5, "{se}");
    }

    #[test]
    fn identical_degenerate_arms() {
        assert_eq!(risk_difference_from_counts(0, 100, 0, 100).unwrap(), (0.0, 0.0));
        assert!(ArmCounts { events1: 0, n1: 100, events0: 100, n0: 100 }.is_degenerate());
    }

    #[test]
    fn zero_denominator_is_an_error() {
        assert!(matches!(risk_difference_from_counts(0, 0, 1, 10), Err(DataError::InvalidCount(_))));
        assert!(risk_difference_from_counts(11, 10, 1, 10).is_err());
    }

    #[test]
    fn risk_ratio_delta_method() {
        let (rr, se) = risk_ratio_from_counts(20, 100, 40, 100).unwrap();
        assert!((rr - 0.5).abs() < 1e-15);
        let expect = 0.5 * (1.0f64 / 20.0 - 0.01 + 1.0 / 40.0 - 0.01).sqrt();
        assert!((se - expect).abs() < 1e-15);
    }
}
