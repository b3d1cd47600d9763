use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{tap_axis, TapSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Strict interior local maxima per epoch, divided by the epoch length (1/s).
    pub f2: f64,
    /// Population variance of the peak code position, chips².
    pub f3: f64,
}

impl FeatureVector {
    pub fn to_vec(self) -> Vec<f64> {
        alloc::vec![self.f2, self.f3]
    }
}

fn strict_maxima(row: &[f64]) -> usize {
    row.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count()
}

/// First index of the largest tap.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn feature_f2(series: &TapSeries) -> f64 {
    if series.taps.is_empty() {
        return 0.0;
    }
    let total: usize = series.taps.iter().map(|r| strict_maxima(r)).sum();
    total as f64 / series.taps.len() as f64 / series.ti
}

pub fn feature_f3(series: &TapSeries) -> f64 {
    if series.taps.is_empty() {
        return 0.0;
    }
    let axis = tap_axis();
    let pos: Vec<f64> = series.taps.iter().map(|r| axis[argmax(r)]).collect();
    let w = pos.len() as f64;
    let mean = pos.iter().sum::<f64>() / w;
    pos.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / w
}

pub fn features(series: &TapSeries) -> FeatureVector {
    FeatureVector {
        f2: feature_f2(series),
        f3: feature_f3(series),
    }
}
