//! Normalization, chronological splitting, windowing, and input imputation.

use std::ops::Range;

use super::series::TrafficSeries;
use crate::error::{Error, Result};

/// Per-channel z-score statistics, computed from the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn normalize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Z-scores the whole series using statistics from unmasked entries of
/// `train_range` only; masked entries are set to 0 after normalization.
/// The returned values are `T*N*C` in the series' row-major layout.
pub fn zscore_normalize(
    series: &TrafficSeries,
    train_range: Range<usize>,
) -> Result<(Vec<f64>, NormStats)> {
    if train_range.is_empty() || train_range.end > series.num_steps() {
        return Err(Error::invalid(
            "zscore_normalize",
            format!("bad train range {train_range:?} for T={}", series.num_steps()),
        ));
    }
    let c_len = series.channels();
    let mut mean = vec![0.0f64; c_len];
    let mut count = vec![0usize; c_len];
    for t in train_range.clone() {
        for n in 0..series.num_nodes() {
            for c in 0..c_len {
                if series.is_present(t, n, c) {
                    mean[c] += series.value(t, n, c) as f64;
                    count[c] += 1;
                }
            }
        }
    }
    for c in 0..c_len {
        if count[c] == 0 {
            return Err(Error::invalid(
                "zscore_normalize",
                format!("channel {c} has no unmasked training entries"),
            ));
        }
        mean[c] /= count[c] as f64;
    }
    let mut var = vec![0.0f64; c_len];
    for t in train_range.clone() {
        for n in 0..series.num_nodes() {
            for c in 0..c_len {
                if series.is_present(t, n, c) {
                    let d = series.value(t, n, c) as f64 - mean[c];
                    var[c] += d * d;
                }
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .zip(&count)
        .map(|(v, &n)| (v / n as f64).sqrt().max(1e-6))
        .collect();
    let stats = NormStats { mean, std };

    let mut out = vec![0.0f64; series.values().len()];
    for t in 0..series.num_steps() {
        for n in 0..series.num_nodes() {
            for c in 0..c_len {
                let idx = series.index(t, n, c);
                if series.mask()[idx] == 1 {
                    out[idx] = stats.normalize(series.value(t, n, c) as f64, c);
                }
            }
        }
    }
    Ok((out, stats))
}

/// Chronological split ratios; each must be positive and they must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        // The 7:1:2 convention.
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.val <= 0.0 || self.test <= 0.0 {
            return Err(Error::invalid("SplitSpec", "empty split: every ratio must be > 0"));
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "SplitSpec",
                format!("ratios must sum to 1, got {}", self.train + self.val + self.test),
            ));
        }
        Ok(())
    }
}

/// Contiguous, non-overlapping train/val/test index ranges in time order.
/// Val and test get `max(1, floor(ratio * T))` steps; the remainder goes to
/// train.
pub fn chronological_split(t_len: usize, spec: &SplitSpec) -> Result<[Range<usize>; 3]> {
    spec.validate()?;
    let val = ((spec.val * t_len as f64).floor() as usize).max(1);
    let test = ((spec.test * t_len as f64).floor() as usize).max(1);
    if val + test >= t_len {
        return Err(Error::invalid(
            "chronological_split",
            format!("T={t_len} too short for val={val} + test={test} plus training data"),
        ));
    }
    let train = t_len - val - test;
    Ok([0..train, train..train + val, train + val..t_len])
}

/// One training sample: an imputed input window, its Q-step target, and the
/// target's presence mask (kept intact for loss masking). `origin` is the
/// series index of the last input step.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub origin: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub target_mask: Vec<f64>,
}

/// Windowed samples over one split, in normalized units, plus the
/// normalization statistics needed to map predictions back.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub input_len: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub channels: usize,
    pub samples: Vec<WindowSample>,
    pub stats: NormStats,
}

impl WindowedDataset {
    /// Keeps every `stride`-th sample; a dataset-size knob for desk-scale
    /// training runs.
    pub fn thin(&self, stride: usize) -> WindowedDataset {
        let stride = stride.max(1);
        WindowedDataset {
            input_len: self.input_len,
            horizon: self.horizon,
            num_nodes: self.num_nodes,
            channels: self.channels,
            samples: self
                .samples
                .iter()
                .step_by(stride)
                .cloned()
                .collect(),
            stats: self.stats.clone(),
        }
    }
}

/// Last-observation-carried-forward along time, per (node, channel); leading
/// missing entries become 0 (the normalized mean).
pub fn impute_inputs(values: &mut [f64], mask: &[u8], steps: usize, nodes: usize, channels: usize) {
    for n in 0..nodes {
        for c in 0..channels {
            let mut last: Option<f64> = None;
            for t in 0..steps {
                let idx = (t * nodes + n) * channels + c;
                if mask[idx] == 1 {
                    last = Some(values[idx]);
                } else {
                    values[idx] = last.unwrap_or(0.0);
                }
            }
        }
    }
}

/// Cuts every window whose input and target both fit inside `split`:
/// one sample per valid offset, `len - P - Q + 1` in total.
pub fn make_windows(
    series: &TrafficSeries,
    normalized: &[f64],
    split: Range<usize>,
    input_len: usize,
    horizon: usize,
    stats: &NormStats,
) -> Result<WindowedDataset> {
    if input_len == 0 || horizon == 0 {
        return Err(Error::invalid("make_windows", "P and Q must be >= 1"));
    }
    let len = split.len();
    if len < input_len + horizon {
        return Err(Error::invalid(
            "make_windows",
            format!("split of {len} steps too short for P={input_len} + Q={horizon}"),
        ));
    }
    let n = series.num_nodes();
    let c = series.channels();
    let frame = n * c;
    let mut samples = Vec::with_capacity(len - input_len - horizon + 1);
    for offset in 0..=(len - input_len - horizon) {
        let in_start = split.start + offset;
        let origin = in_start + input_len - 1;
        let mut input = normalized[in_start * frame..(in_start + input_len) * frame].to_vec();
        let in_mask = &series.mask()[in_start * frame..(in_start + input_len) * frame];
        impute_inputs(&mut input, in_mask, input_len, n, c);
        let t_start = origin + 1;
        let target = normalized[t_start * frame..(t_start + horizon) * frame].to_vec();
        let target_mask: Vec<f64> = series.mask()[t_start * frame..(t_start + horizon) * frame]
            .iter()
            .map(|&m| m as f64)
            .collect();
        samples.push(WindowSample {
            origin,
            input,
            target,
            target_mask,
        });
    }
    Ok(WindowedDataset {
        input_len,
        horizon,
        num_nodes: n,
        channels: c,
        samples,
        stats: stats.clone(),
    })
}

/// Normalize + split + window in one step, returning (train, val, test).
pub fn prepare_datasets(
    series: &TrafficSeries,
    spec: &SplitSpec,
    input_len: usize,
    horizon: usize,
) -> Result<[WindowedDataset; 3]> {
    let ranges = chronological_split(series.num_steps(), spec)?;
    let (normalized, stats) = zscore_normalize(series, ranges[0].clone())?;
    let mut out = Vec::with_capacity(3);
    for r in &ranges {
        out.push(make_windows(series, &normalized, r.clone(), input_len, horizon, &stats)?);
    }
    Ok(out.try_into().map_err(|_| Error::invalid("prepare_datasets", "internal"))?)
}
