//! Observed daily incidence and the under-reporting fraction eta(t).

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("incidence series must contain at least one day")]
    Empty,
    #[error("under-reporting fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("under-reporting breakpoints must have strictly increasing day offsets")]
    NonIncreasingBreakpoints,
}

/// Piecewise-linear reporting fraction over day offsets, constant before the
/// first breakpoint and after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderReporting {
    breakpoints: Vec<(f64, f64)>,
}

impl UnderReporting {
    /// Every infection reported with the same probability.
    pub fn constant(fraction: f64) -> Result<Self, DataError> {
        Self::new(vec![(0.0, fraction)])
    }

    /// Full reporting, eta = 1 everywhere.
    pub fn full() -> Self {
        Self {
            breakpoints: vec![(0.0, 1.0)],
        }
    }

    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self, DataError> {
        if breakpoints.is_empty() {
            return Err(DataError::Empty);
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DataError::NonIncreasingBreakpoints);
            }
        }
        for &(_, f) in &breakpoints {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DataError::BadFraction(f));
            }
        }
        Ok(Self { breakpoints })
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    /// eta at day offset `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        if t <= bp[0].0 {
            return bp[0].1;
        }
        if t >= bp[bp.len() - 1].0 {
            return bp[bp.len() - 1].1;
        }
        let i = bp.partition_point(|&(d, _)| d <= t);
        let (d0, f0) = bp[i - 1];
        let (d1, f1) = bp[i];
        f0 + (f1 - f0) * (t - d0) / (d1 - d0)
    }
}

/// Observed counts: `counts[j]` is the number of reported cases on day
/// offset `j + 1` (the first difference of cumulative infections between
/// days `j` and `j + 1` of the model grid).
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceSeries {
    pub start_date: Option<NaiveDate>,
    pub counts: Vec<u64>,
    pub eta: UnderReporting,
}

impl IncidenceSeries {
    pub fn new(
        start_date: Option<NaiveDate>,
        counts: Vec<u64>,
        eta: UnderReporting,
    ) -> Result<Self, DataError> {
        if counts.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            start_date,
            counts,
            eta,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Day offset of observation `j` (counts start on day 1).
    pub fn day_offset(&self, j: usize) -> f64 {
        (j + 1) as f64
    }

    /// Observed count scaled up by the reporting fraction: the "effective"
    /// number of true infections behind observation `j`.
    pub fn effective_count(&self, j: usize) -> f64 {
        self.counts[j] as f64 / self.eta.eval(self.day_offset(j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn seroprevalence_ramp() -> UnderReporting {
        UnderReporting::new(vec![(92.0, 0.15), (231.0, 0.54)]).unwrap()
    }

    #[test]
    fn eta_is_constant_outside_the_ramp() {
        let eta = seroprevalence_ramp();
        assert_eq!(eta.eval(50.0), 0.15);
        assert_eq!(eta.eval(0.0), 0.15);
        assert_eq!(eta.eval(300.0), 0.54);
        assert_eq!(eta.eval(231.0), 0.54);
    }

    #[test]
    fn eta_interpolates_linearly() {
        let eta = seroprevalence_ramp();
        let mid = 0.15 + 0.39 * (161.5 - 92.0) / 139.0;
        assert_abs_diff_eq!(eta.eval(161.5), mid, epsilon = 1e-12);
        assert_abs_diff_eq!(eta.eval(161.5), 0.345, epsilon = 1e-12);
        // Quarter point of the ramp.
        assert_abs_diff_eq!(
            eta.eval(92.0 + 139.0 / 4.0),
            0.15 + 0.39 / 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn eta_with_three_breakpoints_uses_the_right_segment() {
        let eta = UnderReporting::new(vec![(0.0, 0.2), (10.0, 0.4), (20.0, 1.0)]).unwrap();
        assert_abs_diff_eq!(eta.eval(5.0), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(eta.eval(15.0), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn eta_validation() {
        assert!(matches!(
            UnderReporting::new(vec![]),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            UnderReporting::new(vec![(0.0, 0.5), (0.0, 0.6)]),
            Err(DataError::NonIncreasingBreakpoints)
        ));
        assert!(matches!(
            UnderReporting::new(vec![(0.0, 0.0)]),
            Err(DataError::BadFraction(_))
        ));
        assert!(matches!(
            UnderReporting::new(vec![(0.0, 1.2)]),
            Err(DataError::BadFraction(_))
        ));
        assert!(UnderReporting::constant(1.0).is_ok());
    }

    #[test]
    fn effective_counts_scale_by_eta() {
        let series = IncidenceSeries::new(
            None,
            vec![10, 20, 30],
            UnderReporting::constant(0.5).unwrap(),
        )
        .unwrap();
        assert_eq!(series.effective_count(0), 20.0);
        assert_eq!(series.effective_count(2), 60.0);
        assert_eq!(series.day_offset(0), 1.0);

        let full = IncidenceSeries::new(None, vec![10], UnderReporting::full()).unwrap();
        assert_eq!(full.effective_count(0), 10.0);
    }

    #[test]
    fn empty_series_is_rejected() {
        assert!(IncidenceSeries::new(None, vec![], UnderReporting::full()).is_err());
    }
}
