//! Paired significance test over per-seed results.

use fgasl_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    /// Mean of `a − b`.
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Two-sided paired t-test of `a` against `b`.
///
/// When every difference is equal the statistic is undefined: a zero
/// difference gives `t = 0, p = 1` and any other gives `t = ±∞, p = 0`.
pub fn paired_seed_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(CoreError::Dimension {
            expected: a.len().to_string(),
            found: b.len().to_string(),
        }
        .into());
    }
    let n = a.len();
    if n < 3 {
        return Err(CoreError::TooFewPairs(n).into());
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        let (t, p_value) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(PairedTest { n, mean_diff: mean, t, p_value });
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("n >= 3 gives positive degrees of freedom");
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(PairedTest { n, mean_diff: mean, t, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series() {
        let r = paired_seed_test(&[0.5, 0.6, 0.7], &[0.5, 0.6, 0.7]).unwrap();
        assert_eq!((r.mean_diff, r.t, r.p_value), (0.0, 0.0, 1.0));
    }

    #[test]
    fn constant_shift() {
        let r = paired_seed_test(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.mean_diff, 0.5);
    }

    #[test]
    fn hand_case_has_zero_statistic() {
        let r = paired_seed_test(&[3.0, 5.0, 7.0], &[2.0, 4.0, 9.0]).unwrap();
        assert_eq!(r.mean_diff, 0.0);
        assert_eq!(r.t, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn textbook_value() {
        // d = [1, 2, 3, 4]: mean 2.5, sd sqrt(5/3), t = 3.873, df 3.
        let r = paired_seed_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r.t - 3.872983346207417).abs() < 1e-12);
        assert!((r.p_value - 0.030466).abs() < 1e-5);
    }

    #[test]
    fn needs_three_pairs() {
        assert!(paired_seed_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}
