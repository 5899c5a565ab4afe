//! Splits a conversation into contiguous chunks and pads each chunk with
//! context messages borrowed from its neighbours.
//!
//! Two boundary detectors are available:
//!
//! - **Gap threshold**: cut wherever two consecutive messages are more than
//!   `min_gap` apart (strictly greater).
//! - **Smoothed activity**: build a Gaussian-smoothed message-rate signal and
//!   cut at local minima that sit below half the mean of their flanking peaks.
//!
//! Both detectors finish by folding chunks smaller than `min_chunk_size` into
//! the chunk before them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, MessageId};

/// Context messages attached on each side of a chunk.
pub const DEFAULT_CONTEXT: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("min_gap must be positive (got {0} minutes)")]
    NonPositiveGap(i64),
    #[error("kernel_bandwidth must be positive (got {0} minutes)")]
    NonPositiveBandwidth(i64),
    #[error("min_chunk_size must be at least 1")]
    ZeroChunkSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMethod {
    GapThreshold,
    SmoothedActivity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub method: SegmentationMethod,
    pub min_gap_minutes: i64,
    /// Gaussian sigma, smoothed-activity only.
    pub kernel_bandwidth_minutes: i64,
    pub min_chunk_size: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            method: SegmentationMethod::GapThreshold,
            min_gap_minutes: 180,
            kernel_bandwidth_minutes: 60,
            min_chunk_size: 3,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.min_gap_minutes <= 0 {
            return Err(SegmentError::NonPositiveGap(self.min_gap_minutes));
        }
        if self.kernel_bandwidth_minutes <= 0 {
            return Err(SegmentError::NonPositiveBandwidth(self.kernel_bandwidth_minutes));
        }
        if self.min_chunk_size == 0 {
            return Err(SegmentError::ZeroChunkSize);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub core_ids: Vec<MessageId>,
    #[serde(default)]
    pub leading_context_ids: Vec<MessageId>,
    #[serde(default)]
    pub trailing_context_ids: Vec<MessageId>,
}

impl Chunk {
    /// Leading context, core, then trailing context.
    pub fn presented_ids(&self) -> impl Iterator<Item = (MessageId, bool)> + '_ {
        self.leading_context_ids
            .iter()
            .map(|id| (*id, true))
            .chain(self.core_ids.iter().map(|id| (*id, false)))
            .chain(self.trailing_context_ids.iter().map(|id| (*id, true)))
    }

    pub fn presented_len(&self) -> usize {
        self.leading_context_ids.len() + self.core_ids.len() + self.trailing_context_ids.len()
    }
}

/// Chunks file layout written by the `segment` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub config: SegmentationConfig,
    pub context: usize,
    pub chunks: Vec<Chunk>,
}

/// Partition the dataset into chunks (without context).
pub fn segment(dataset: &Dataset, config: &SegmentationConfig) -> Result<Vec<Chunk>, SegmentError> {
    config.validate()?;
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    let minutes: Vec<f64> = dataset
        .messages()
        .iter()
        .map(|m| m.timestamp.and_utc().timestamp() as f64 / 60.0)
        .collect();
    let cuts = match config.method {
        SegmentationMethod::GapThreshold => gap_boundaries(&minutes, config.min_gap_minutes as f64),
        SegmentationMethod::SmoothedActivity => {
            activity_boundaries(&minutes, config.kernel_bandwidth_minutes as f64)
        }
    };
    let spans = merge_runts(split_at(minutes.len(), &cuts), config.min_chunk_size);
    let ids: Vec<MessageId> = dataset.messages().iter().map(|m| m.id).collect();
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| Chunk {
            index,
            core_ids: ids[start..end].to_vec(),
            leading_context_ids: Vec::new(),
            trailing_context_ids: Vec::new(),
        })
        .collect())
}

/// Indices `i` such that a boundary falls between message `i - 1` and `i`.
pub fn gap_boundaries(minutes: &[f64], min_gap: f64) -> Vec<usize> {
    (1..minutes.len())
        .filter(|&i| minutes[i] - minutes[i - 1] > min_gap)
        .collect()
}

/// Half-open spans `[start, end)` between the given cut indices.
fn split_at(len: usize, cuts: &[usize]) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for &cut in cuts {
        if cut > start && cut < len {
            spans.push((start, cut));
            start = cut;
        }
    }
    if start < len {
        spans.push((start, len));
    }
    spans
}

/// Runts fold backwards; a leading runt has nowhere to go and stays.
fn merge_runts(spans: Vec<(usize, usize)>, min_size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (start, end) in spans {
        match out.last_mut() {
            Some(prev) if end - start < min_size => prev.1 = end,
            _ => out.push((start, end)),
        }
    }
    out
}

/// Boundaries at qualifying minima of the kernel-smoothed event rate.
pub fn activity_boundaries(minutes: &[f64], bandwidth: f64) -> Vec<usize> {
    if minutes.len() < 2 {
        return Vec::new();
    }
    let (grid, signal) = smoothed_rate(minutes, bandwidth);
    let minima = local_minima(&signal);

    let mut cuts = Vec::new();
    for (k, &(lo, hi)) in minima.iter().enumerate() {
        let left_from = if k == 0 { 0 } else { minima[k - 1].1 };
        let right_to = if k + 1 == minima.len() { signal.len() } else { minima[k + 1].0 + 1 };
        let left_peak = signal[left_from..=lo].iter().cloned().fold(0.0, f64::max);
        let right_peak = signal[hi..right_to].iter().cloned().fold(0.0, f64::max);
        let value = signal[lo];
        if value < 0.5 * (left_peak + right_peak) / 2.0 {
            let at = (grid[lo] + grid[hi]) / 2.0;
            // first message strictly after the minimum
            let cut = minutes.partition_point(|&t| t <= at);
            if cut > 0 && cut < minutes.len() && cuts.last() != Some(&cut) {
                cuts.push(cut);
            }
        }
    }
    cuts
}

/// Gaussian kernel density of message times sampled on a regular grid.
fn smoothed_rate(minutes: &[f64], sigma: f64) -> (Vec<f64>, Vec<f64>) {
    const MAX_SAMPLES: f64 = 200_000.0;
    let reach = 4.0 * sigma;
    let start = minutes[0] - reach;
    let end = minutes[minutes.len() - 1] + reach;
    let step = (sigma / 5.0).max(1.0).max((end - start) / MAX_SAMPLES);
    let samples = ((end - start) / step).ceil() as usize + 1;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());

    let grid: Vec<f64> = (0..samples).map(|i| start + i as f64 * step).collect();
    let mut signal = vec![0.0; samples];
    for &t in minutes {
        let lo = (((t - reach - start) / step).floor().max(0.0)) as usize;
        let hi = ((((t + reach - start) / step).ceil()) as usize).min(samples - 1);
        for i in lo..=hi {
            let z = (grid[i] - t) / sigma;
            signal[i] += norm * (-0.5 * z * z).exp();
        }
    }
    (grid, signal)
}

/// Interior minima as inclusive index ranges, so flat valleys count once.
fn local_minima(signal: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let n = signal.len();
    let mut i = 1;
    while i + 1 < n {
        if signal[i] < signal[i - 1] {
            let mut j = i;
            while j + 1 < n && signal[j + 1] == signal[i] {
                j += 1;
            }
            if j + 1 < n && signal[j + 1] > signal[i] {
                out.push((i, j));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Gives every chunk up to `k` trailing ids of the previous core as leading
/// context and up to `k` leading ids of the next core as trailing context.
pub fn attach_context(chunks: &[Chunk], k: usize) -> Vec<Chunk> {
    chunks
        .iter()
        .enumerate()
        .map(|(i, chunk)| {
            let leading = match i.checked_sub(1).map(|p| &chunks[p].core_ids) {
                Some(prev) => prev[prev.len().saturating_sub(k)..].to_vec(),
                None => Vec::new(),
            };
            let trailing = match chunks.get(i + 1) {
                Some(next) => next.core_ids[..k.min(next.core_ids.len())].to_vec(),
                None => Vec::new(),
            };
            Chunk {
                index: chunk.index,
                core_ids: chunk.core_ids.clone(),
                leading_context_ids: leading,
                trailing_context_ids: trailing,
            }
        })
        .collect()
}
