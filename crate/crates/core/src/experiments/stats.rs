use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean with its 95% Student-t interval and the five-number summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; needs two points.
    pub sd: Option<f64>,
    pub ci95: Option<[f64; 2]>,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quartiles of sorted data by linear interpolation between order
/// statistics at rank `p * (n - 1)`.
pub fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let at = |p: f64| {
        let r = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (r - lo as f64)
    };
    (at(0.25), at(0.5), at(0.75))
}

/// Summary of one score series. The second value lists warnings, such as an
/// omitted interval for a single point.
pub fn series_stats(scores: &[f64]) -> Result<(SeriesStats, Vec<String>)> {
    if scores.is_empty() {
        return Err(Error::data("empty score series"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::data("score series contains a non-finite value"));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = quartiles(&sorted);
    let mut warnings = Vec::new();
    let (sd, ci95) = if n < 2 {
        warnings.push("fewer than two points: confidence interval omitted".to_string());
        (None, None)
    } else {
        let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::data(e.to_string()))?.inverse_cdf(0.975);
        let half = t * sd / (n as f64).sqrt();
        (Some(sd), Some([mean - half, mean + half]))
    };
    Ok((SeriesStats { n, mean, sd, ci95, min: sorted[0], q1, median, q3, max: sorted[n - 1] }, warnings))
}
