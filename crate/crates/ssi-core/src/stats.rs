//! Scalar observables along trajectories and the summary statistics used to
//! quantify energy behaviour.

use crate::error::{Result, SsiError};
use crate::integrate::TrajectoryRecord;
use crate::phase::{HamiltonianField, PhaseState};

/// A uniformly sampled scalar series, usually an energy along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySeries {
    pub t0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl EnergySeries {
    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + self.h * index as f64
    }
}

/// Evaluate a scalar field along a trajectory.
pub fn scalar_series(
    traj: &TrajectoryRecord,
    mut f: impl FnMut(&PhaseState) -> Result<f64>,
) -> Result<EnergySeries> {
    let mut values = Vec::with_capacity(traj.states.len());
    for s in &traj.states {
        values.push(f(s)?);
    }
    Ok(EnergySeries {
        t0: traj.t0,
        h: traj.h,
        values,
    })
}

/// The exact-Hamiltonian series `H(z_k)` along a trajectory.
pub fn energy_series<F: HamiltonianField + ?Sized>(
    traj: &TrajectoryRecord,
    field: &F,
) -> Result<EnergySeries> {
    scalar_series(traj, |z| Ok(field.value(z)))
}

/// Band width, mean, and linear trend of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    /// `max - min` (invariant under mean subtraction).
    pub band_width: f64,
    pub mean: f64,
    /// Least-squares slope of `value` against time.
    pub trend_slope: f64,
}

pub fn series_stats(series: &EnergySeries) -> Result<SeriesStats> {
    if series.values.is_empty() {
        return Err(SsiError::Domain("statistics of an empty series".into()));
    }
    let n = series.values.len() as f64;
    let mean = series.values.iter().sum::<f64>() / n;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &series.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }

    // Slope via centered least squares; a single sample has no trend.
    let trend_slope = if series.values.len() < 2 {
        0.0
    } else {
        let t_mean = series.t0 + series.h * (series.values.len() - 1) as f64 / 2.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &v) in series.values.iter().enumerate() {
            let dt = series.time_at(i) - t_mean;
            num += dt * (v - mean);
            den += dt * dt;
        }
        num / den
    };

    Ok(SeriesStats {
        band_width: hi - lo,
        mean,
        trend_slope,
    })
}

/// Population variance of a series (used for conservation diagnostics).
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn series(values: Vec<f64>) -> EnergySeries {
        EnergySeries {
            t0: 0.0,
            h: 0.5,
            values,
        }
    }

    #[test]
    fn constant_series_has_no_band_and_no_trend() {
        let s = series(vec![2.5; 40]);
        let stats = series_stats(&s).unwrap();
        assert_eq!(stats.band_width, 0.0);
        assert_eq!(stats.trend_slope, 0.0);
        assert_eq!(stats.mean, 2.5);
    }

    #[test]
    fn linear_series_recovers_its_slope() {
        let s = EnergySeries {
            t0: 1.0,
            h: 0.25,
            values: (0..100).map(|i| 3.0 - 0.7 * (1.0 + 0.25 * i as f64)).collect(),
        };
        let stats = series_stats(&s).unwrap();
        assert_relative_eq!(stats.trend_slope, -0.7, max_relative = 1e-12);
    }

    #[test]
    fn empty_series_is_a_domain_error() {
        assert!(series_stats(&series(vec![])).is_err());
    }

    #[test]
    fn variance_basics() {
        assert_eq!(variance(&[1.0, 1.0, 1.0]), 0.0);
        assert_relative_eq!(variance(&[0.0, 2.0]), 1.0, max_relative = 1e-15);
    }
}
