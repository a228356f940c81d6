//! Mapping between raw 16-bit intensities and the `[-1, 1]` model domain.

use serde::{Deserialize, Serialize};

use crate::raster::{ImagePlane, ValueDomain};

/// Linear percentile scaling: `low` maps to -1 and `high` to +1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityNormalization {
    pub low: f64,
    pub high: f64,
    pub low_percentile: f64,
    pub high_percentile: f64,
}

pub const DEFAULT_LOW_PERCENTILE: f64 = 0.1;
pub const DEFAULT_HIGH_PERCENTILE: f64 = 99.9;

impl IntensityNormalization {
    /// Fit the given percentiles over every pixel of `frames` using an exact
    /// 16-bit histogram (nearest-rank).
    pub fn fit<'a>(
        frames: impl IntoIterator<Item = &'a [u16]>,
        low_percentile: f64,
        high_percentile: f64,
    ) -> Option<Self> {
        let mut hist = vec![0u64; 1 << 16];
        let mut total = 0u64;
        for frame in frames {
            for &v in frame {
                hist[v as usize] += 1;
            }
            total += frame.len() as u64;
        }
        if total == 0 {
            return None;
        }
        let rank = |p: f64| -> f64 {
            let target = ((p / 100.0) * total as f64 - 1e-9).ceil().max(1.0) as u64;
            let mut seen = 0;
            for (v, &c) in hist.iter().enumerate() {
                seen += c;
                if seen >= target {
                    return v as f64;
                }
            }
            65535.0
        };
        let low = rank(low_percentile);
        let mut high = rank(high_percentile);
        if high <= low {
            high = low + 1.0;
        }
        Some(Self {
            low,
            high,
            low_percentile,
            high_percentile,
        })
    }

    pub fn fit_default<'a>(frames: impl IntoIterator<Item = &'a [u16]>) -> Option<Self> {
        Self::fit(frames, DEFAULT_LOW_PERCENTILE, DEFAULT_HIGH_PERCENTILE)
    }

    /// Identity-like scaling over the full 16-bit range.
    pub fn full_range() -> Self {
        Self {
            low: 0.0,
            high: 65535.0,
            low_percentile: 0.0,
            high_percentile: 100.0,
        }
    }

    pub fn normalize_value(&self, raw: f64) -> f64 {
        (2.0 * (raw - self.low) / (self.high - self.low) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn raw_value(&self, normalized: f64) -> u16 {
        let v = self.low + (normalized.clamp(-1.0, 1.0) + 1.0) * 0.5 * (self.high - self.low);
        v.round().clamp(0.0, 65535.0) as u16
    }

    pub fn normalize(&self, image: &ImagePlane) -> ImagePlane {
        match image.domain() {
            ValueDomain::Normalized => image.clone(),
            ValueDomain::Raw => image
                .map(|v| self.normalize_value(v))
                .with_domain(ValueDomain::Normalized),
        }
    }

    pub fn to_raw(&self, image: &ImagePlane) -> Vec<u16> {
        match image.domain() {
            ValueDomain::Raw => image
                .data()
                .iter()
                .map(|v| v.round().clamp(0.0, 65535.0) as u16)
                .collect(),
            ValueDomain::Normalized => image.data().iter().map(|&v| self.raw_value(v)).collect(),
        }
    }
}
