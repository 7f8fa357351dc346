//! Average bin uncertainty, primaries scaling and mean deposited energy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postproc::TabRow;

pub const DEFAULT_GRANULARITY: u64 = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sum of bin weights is not positive")]
    ZeroWeight,
    #[error("target uncertainty must be positive, got {0}")]
    InvalidTarget(f64),
    #[error("current uncertainty must be finite and non-negative, got {0}")]
    InvalidCurrent(f64),
    #[error("current number of primaries must be positive")]
    InvalidNps,
    #[error("granularity must be positive")]
    InvalidGranularity,
    #[error("spectrum has no counts")]
    ZeroCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Weighted mean of the per-bin relative errors, percent.
    pub average_uncertainty: f64,
    pub total_weight: f64,
    pub n_bins: usize,
}

/// Count-weighted mean of the per-bin errors, `sum(c_i * U_i) / sum(c_i)`,
/// with the tabulated value as `c_i` and its error column as `U_i`.
pub fn average_uncertainty(rows: &[TabRow]) -> Result<UncertaintyReport, StatsError> {
    let (weighted, total) = rows
        .iter()
        .fold((0.0, 0.0), |(w, t), r| (w + r.value * r.err_pct, t + r.value));
    if !(total > 0.0) {
        return Err(StatsError::ZeroWeight);
    }
    Ok(UncertaintyReport {
        average_uncertainty: weighted / total,
        total_weight: total,
        n_bins: rows.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpsEstimate {
    pub required_nps: u64,
    /// `(current_u / target_u)^2 * current_nps` before rounding.
    pub raw_estimate: f64,
    pub current_nps: u64,
    pub current_u: f64,
    pub target_u: f64,
    pub granularity: u64,
}

/// Primaries needed to bring the average uncertainty from `current_u` down to
/// `target_u`, assuming it falls as `1/sqrt(N)`, rounded up to a multiple of
/// `granularity`.
pub fn required_nps(
    current_u: f64,
    target_u: f64,
    current_nps: u64,
    granularity: u64,
) -> Result<NpsEstimate, StatsError> {
    if !(target_u > 0.0) || !target_u.is_finite() {
        return Err(StatsError::InvalidTarget(target_u));
    }
    if !(current_u >= 0.0) || !current_u.is_finite() {
        return Err(StatsError::InvalidCurrent(current_u));
    }
    if current_nps == 0 {
        return Err(StatsError::InvalidNps);
    }
    if granularity == 0 {
        return Err(StatsError::InvalidGranularity);
    }
    let ratio = current_u / target_u;
    let raw = ratio * ratio * current_nps as f64;
    let steps = (raw / granularity as f64).ceil() as u64;
    Ok(NpsEstimate {
        required_nps: steps * granularity,
        raw_estimate: raw,
        current_nps,
        current_u,
        target_u,
        granularity,
    })
}

/// Count-weighted mean of bin midpoints for `(low, high, counts)` bins.
pub fn average_energy(bins: &[(f64, f64, f64)]) -> Result<f64, StatsError> {
    let (weighted, total) = bins
        .iter()
        .fold((0.0, 0.0), |(w, t), &(lo, hi, c)| (w + 0.5 * (lo + hi) * c, t + c));
    if !(total > 0.0) {
        return Err(StatsError::ZeroCounts);
    }
    Ok(weighted / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(c: f64, u: f64) -> TabRow {
        TabRow::new(1.0, 2.0, c, u)
    }

    #[test]
    fn symmetric_average() {
        let r = average_uncertainty(&[row(10.0, 5.0), row(10.0, 15.0)]).unwrap();
        assert_eq!(r.average_uncertainty, 10.0);
        assert_eq!(r.n_bins, 2);
        assert_eq!(r.total_weight, 20.0);
    }

    #[test]
    fn singleton_average() {
        let r = average_uncertainty(&[row(7.0, 42.73)]).unwrap();
        assert_eq!(r.average_uncertainty, 42.73);
    }

    #[test]
    fn zero_weight() {
        assert_eq!(
            average_uncertainty(&[row(0.0, 5.0), row(0.0, 1.0)]),
            Err(StatsError::ZeroWeight)
        );
        assert_eq!(average_uncertainty(&[]), Err(StatsError::ZeroWeight));
    }

    #[test]
    fn nps_from_twelve_and_a_half_percent() {
        let e = required_nps(12.5, 10.0, 1_000_000, DEFAULT_GRANULARITY).unwrap();
        assert_eq!(e.raw_estimate, 1_562_500.0);
        assert_eq!(e.required_nps, 1_600_000);
    }

    #[test]
    fn nps_unit_ratio_rounds_up_to_granularity() {
        assert_eq!(required_nps(10.0, 10.0, 1_000_000, 100_000).unwrap().required_nps, 1_000_000);
        assert_eq!(required_nps(10.0, 10.0, 1_234_567, 100_000).unwrap().required_nps, 1_300_000);
    }

    #[test]
    fn nps_general_example() {
        // (42.7305060397987 / 10)^2 * 3e6 = 54_776_...; next multiple of 1e5.
        let e = required_nps(42.730_506_039_798_7, 10.0, 3_000_000, 100_000).unwrap();
        assert!(e.raw_estimate > 54_700_000.0 && e.raw_estimate < 54_800_000.0);
        assert_eq!(e.required_nps, 54_800_000);
    }

    #[test]
    fn nps_rejects_bad_target() {
        assert_eq!(required_nps(5.0, 0.0, 10, 1), Err(StatsError::InvalidTarget(0.0)));
        assert_eq!(required_nps(5.0, -1.0, 10, 1), Err(StatsError::InvalidTarget(-1.0)));
        assert_eq!(required_nps(5.0, 1.0, 0, 1), Err(StatsError::InvalidNps));
    }

    #[test]
    fn average_energy_worked_example() {
        let e = average_energy(&[(0.0, 0.1, 10.0), (0.1, 0.2, 20.0)]).unwrap();
        assert!((e - 3.5 / 30.0).abs() < 1e-15);
        assert!((e - 0.1167).abs() < 5e-5);
    }

    #[test]
    fn average_energy_single_bin_and_symmetry() {
        assert_eq!(average_energy(&[(2.0, 4.0, 9.0)]).unwrap(), 3.0);
        let m = 5.0;
        let bins: Vec<_> = (0..4)
            .map(|k| (m - 2.0 + k as f64, m - 1.0 + k as f64, 3.0))
            .collect();
        assert!((average_energy(&bins).unwrap() - m).abs() < 1e-12);
        assert_eq!(average_energy(&[(0.0, 1.0, 0.0)]), Err(StatsError::ZeroCounts));
    }

    proptest! {
        #[test]
        fn weighted_mean_bounds_and_scale(
            bins in prop::collection::vec((0.0f64..1e3, 0.0f64..100.0), 1..40),
            k in 1e-3f64..1e3,
        ) {
            prop_assume!(bins.iter().any(|b| b.0 > 0.0));
            let rows: Vec<_> = bins.iter().map(|&(c, u)| row(c, u)).collect();
            let u = average_uncertainty(&rows).unwrap().average_uncertainty;
            let lo = bins.iter().filter(|b| b.0 > 0.0).map(|b| b.1).fold(f64::INFINITY, f64::min);
            let hi = bins.iter().filter(|b| b.0 > 0.0).map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(u >= lo - 1e-9 && u <= hi + 1e-9);
            let scaled: Vec<_> = bins.iter().map(|&(c, u)| row(c * k, u)).collect();
            let us = average_uncertainty(&scaled).unwrap().average_uncertainty;
            prop_assert!((us - u).abs() <= 1e-9 * u.max(1.0));
        }

        #[test]
        fn nps_monotone_in_target(u in 0.1f64..100.0, t1 in 0.1f64..50.0, t2 in 0.1f64..50.0, n in 1u64..10_000_000) {
            let (small, large) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let a = required_nps(u, small, n, 100_000).unwrap().required_nps;
            let b = required_nps(u, large, n, 100_000).unwrap().required_nps;
            prop_assert!(a >= b);
            prop_assert!(required_nps(u, u, n, 100_000).unwrap().required_nps >= n);
        }

        #[test]
        fn average_energy_within_range(bins in prop::collection::vec((0.0f64..10.0, 0.01f64..5.0, 0.0f64..100.0), 1..30)) {
            prop_assume!(bins.iter().any(|b| b.2 > 0.0));
            let triples: Vec<_> = bins.iter().map(|&(lo, w, c)| (lo, lo + w, c)).collect();
            let e = average_energy(&triples).unwrap();
            let min_lb = triples.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
            let max_ub = triples.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e >= min_lb - 1e-12 && e <= max_ub + 1e-12);
        }
    }
}
