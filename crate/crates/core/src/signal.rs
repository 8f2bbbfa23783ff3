//! Time-series types, normalization and sliding-window mechanics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniformly sampled power signal in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    /// Seconds since the Unix epoch of the first sample.
    pub start_timestamp: f64,
    /// Seconds between consecutive samples.
    pub interval: f64,
    values: Vec<f64>,
}

impl PowerSeries {
    /// Builds a cleaned series. Negative readings are clamped to zero;
    /// non-finite readings are rejected.
    pub fn new(start_timestamp: f64, interval: f64, values: Vec<f64>) -> Result<Self> {
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample interval must be positive, got {interval}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("power reading at index {i}")));
        }
        let values = values.into_iter().map(|v| v.max(0.0)).collect();
        Ok(Self {
            start_timestamp,
            interval,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        self.start_timestamp + index as f64 * self.interval
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> PowerSeries {
        PowerSeries {
            start_timestamp: self.timestamp(start),
            interval: self.interval,
            values: self.values[start..end].to_vec(),
        }
    }

    /// A series sharing this one's time grid but carrying other values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<PowerSeries> {
        PowerSeries::new(self.start_timestamp, self.interval, values)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Mean and population standard deviation used to standardize the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::TooShort {
                what: "normalization",
                needed: 1,
                found: 0,
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::DegenerateSeries(format!(
                "standard deviation is {std}; cannot normalize a constant series"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn compute_normalization(series: &PowerSeries) -> Result<NormalizationStats> {
    NormalizationStats::from_values(series.values())
}

pub fn normalize(values: &[f64], stats: &NormalizationStats) -> Vec<f64> {
    values.iter().map(|&v| stats.apply(v)).collect()
}

pub fn denormalize(values: &[f64], stats: &NormalizationStats) -> Vec<f64> {
    values.iter().map(|&z| stats.invert(z)).collect()
}

/// Geometry of the sequence-to-subsequence windows.
///
/// The input window centered at `t` covers `t - w/2 ..= t + ceil(w/2) - 1`
/// and the output window covers `t - q/2 ..= t + ceil(q/2) - 1` (floors on
/// the left), so the two are nested and co-centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub output_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(input_len: usize, output_len: usize, stride: usize) -> Result<Self> {
        let spec = Self {
            input_len,
            output_len,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.output_len && self.output_len < self.input_len) {
            return Err(Error::InvalidArgument(format!(
                "window lengths must satisfy 0 < q < w (w={}, q={})",
                self.input_len, self.output_len
            )));
        }
        if !(0 < self.stride && self.stride <= self.output_len) {
            return Err(Error::InvalidArgument(format!(
                "stride must satisfy 0 < stride <= q (stride={}, q={})",
                self.stride, self.output_len
            )));
        }
        Ok(())
    }

    /// Same geometry with a different stride.
    pub fn with_stride(&self, stride: usize) -> Result<Self> {
        Self::new(self.input_len, self.output_len, stride)
    }

    /// Half-open input index range for a center (may extend past the series).
    pub fn input_range(&self, center: usize) -> (isize, isize) {
        let c = center as isize;
        let w = self.input_len as isize;
        (c - w / 2, c - w / 2 + w)
    }

    /// Half-open output index range for a center.
    pub fn output_range(&self, center: usize) -> (isize, isize) {
        let c = center as isize;
        let q = self.output_len as isize;
        (c - q / 2, c - q / 2 + q)
    }

    /// Centers whose output windows tile `[0, len)`: starts step by `stride`
    /// and a final window is anchored at the end when the step misses it.
    pub fn centers(&self, len: usize) -> Result<Vec<usize>> {
        let q = self.output_len;
        if len < q {
            return Err(Error::TooShort {
                what: "windowing",
                needed: q,
                found: len,
            });
        }
        let last = len - q;
        let mut starts: Vec<usize> = (0..=last).step_by(self.stride).collect();
        if starts.last() != Some(&last) {
            starts.push(last);
        }
        Ok(starts.into_iter().map(|s| s + q / 2).collect())
    }
}

/// Aggregate replicate-padded by `w/2` samples on both sides, normalized.
/// Index `t` of the original series lives at `t + w/2` here, so the input
/// window for center `t` is `padded[t .. t + w]`.
#[derive(Debug, Clone)]
pub struct PaddedInput {
    values: Vec<f64>,
    input_len: usize,
}

impl PaddedInput {
    pub fn new(aggregate: &[f64], input_len: usize, stats: &NormalizationStats) -> Self {
        let pad = input_len / 2;
        let first = aggregate.first().copied().unwrap_or(0.0);
        let last = aggregate.last().copied().unwrap_or(0.0);
        let values = std::iter::repeat(first)
            .take(pad)
            .chain(aggregate.iter().copied())
            .chain(std::iter::repeat(last).take(pad))
            .map(|v| stats.apply(v))
            .collect();
        Self { values, input_len }
    }

    pub fn window(&self, center: usize) -> &[f64] {
        &self.values[center..center + self.input_len]
    }
}

/// Center-aligned training examples.
#[derive(Debug, Clone, Default)]
pub struct WindowBatch {
    pub centers: Vec<usize>,
    /// Normalized aggregate, `w` samples each.
    pub inputs: Vec<Vec<f64>>,
    /// Raw appliance watts, `q` samples each.
    pub target_power: Vec<Vec<f64>>,
    /// State labels, `q` each.
    pub target_states: Vec<Vec<usize>>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Copies out the examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        WindowBatch {
            centers: indices.iter().map(|&i| self.centers[i]).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            target_power: indices
                .iter()
                .map(|&i| self.target_power[i].clone())
                .collect(),
            target_states: indices
                .iter()
                .map(|&i| self.target_states[i].clone())
                .collect(),
        }
    }
}

pub fn make_windows(
    aggregate: &PowerSeries,
    appliance: &PowerSeries,
    states: &[usize],
    spec: &WindowSpec,
    stats: &NormalizationStats,
) -> Result<WindowBatch> {
    spec.validate()?;
    let len = aggregate.len();
    if appliance.len() != len {
        return Err(Error::LengthMismatch {
            what: "appliance vs aggregate",
            expected: len,
            found: appliance.len(),
        });
    }
    if states.len() != len {
        return Err(Error::LengthMismatch {
            what: "state labels vs aggregate",
            expected: len,
            found: states.len(),
        });
    }
    let centers = spec.centers(len)?;
    let padded = PaddedInput::new(aggregate.values(), spec.input_len, stats);
    let q = spec.output_len;
    let mut batch = WindowBatch::default();
    for &c in &centers {
        let start = c - q / 2;
        batch.inputs.push(padded.window(c).to_vec());
        batch
            .target_power
            .push(appliance.values()[start..start + q].to_vec());
        batch.target_states.push(states[start..start + q].to_vec());
    }
    batch.centers = centers;
    Ok(batch)
}

/// Averages overlapping window predictions per timestep and clamps at zero.
pub fn stitch_predictions(windows: &[(usize, Vec<f64>)], len: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (center, pred) in windows {
        let start = window_start(*center, pred.len(), len)?;
        for (k, v) in pred.iter().enumerate() {
            sum[start + k] += v;
            count[start + k] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .enumerate()
        .map(|(i, (&s, &n))| {
            if n == 0 {
                Err(Error::CoverageGap { index: i })
            } else {
                Ok((s / n as f64).max(0.0))
            }
        })
        .collect()
}

/// Per-timestep labels from overlapping windows: each timestep takes the
/// label of the window whose center is nearest (earlier window on ties).
pub fn stitch_states(windows: &[(usize, Vec<usize>)], len: usize) -> Result<Vec<usize>> {
    let mut best: Vec<Option<(usize, usize)>> = vec![None; len];
    for (center, labels) in windows {
        let start = window_start(*center, labels.len(), len)?;
        for (k, &label) in labels.iter().enumerate() {
            let t = start + k;
            let dist = t.abs_diff(*center);
            match best[t] {
                Some((d, _)) if d <= dist => {}
                _ => best[t] = Some((dist, label)),
            }
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(i, b)| b.map(|(_, l)| l).ok_or(Error::CoverageGap { index: i }))
        .collect()
}

fn window_start(center: usize, q: usize, len: usize) -> Result<usize> {
    let start = center
        .checked_sub(q / 2)
        .filter(|s| s + q <= len)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "window of length {q} at center {center} falls outside [0, {len})"
            ))
        })?;
    Ok(start)
}
