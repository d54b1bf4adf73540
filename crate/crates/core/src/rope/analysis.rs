use std::io::{self, Write};
use std::ops::Range;

use super::{apply_rope, RopeConfig, RopeError, RotaryTable};

/// Positions `0..8192`.
pub const DEFAULT_WINDOW: Range<usize> = 0..8192;

/// `𝟙·R(x)·𝟙ᵀ = Σ_j 2·cos(x·θ_j)` for an explicit frequency list.
pub fn similarity_from_frequencies(freqs: &[f64], x: f64) -> f64 {
    freqs.iter().map(|&f| 2.0 * (x * f).cos()).sum()
}

/// All-ones similarity of two identical vectors `x` positions apart.
pub fn rope_similarity(config: &RopeConfig, x: f64) -> Result<f64, RopeError> {
    Ok(similarity_from_frequencies(&config.frequencies()?, x))
}

/// Same quantity computed by literally rotating the all-ones vector in the
/// configured layout and dotting with all-ones.
pub fn rope_similarity_by_rotation(config: &RopeConfig, x: usize) -> Result<f64, RopeError> {
    let table = RotaryTable::new(config, x + 1)?;
    let ones = vec![1.0f64; config.dim];
    let rotated = apply_rope(&ones, x, &table, config.layout)?;
    Ok(rotated.iter().sum())
}

/// Normalized similarity `(1/d)·RoPE(x)` at every position `0..max_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecaySeries {
    pub values: Vec<f64>,
}

impl DecaySeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn negative_count(&self) -> usize {
        self.values.iter().filter(|v| **v < 0.0).count()
    }
}

pub fn decay_series(config: &RopeConfig, max_pos: usize) -> Result<DecaySeries, RopeError> {
    let freqs = config.frequencies()?;
    let d = config.dim as f64;
    Ok(DecaySeries {
        values: (0..max_pos)
            .map(|x| similarity_from_frequencies(&freqs, x as f64) / d)
            .collect(),
    })
}

/// Similarity restricted to the standard-schedule pairs `channels`
/// (1-based, inclusive, within `1..=parent_dim/2`), normalized by `2·|range|`.
pub fn band_series(
    theta: f64,
    parent_dim: usize,
    channels: std::ops::RangeInclusive<usize>,
    max_pos: usize,
) -> Result<DecaySeries, RopeError> {
    let (lo, hi) = (*channels.start(), *channels.end());
    let max = parent_dim / 2;
    if lo == 0 || lo > hi || hi > max {
        return Err(RopeError::Band { lo, hi, max });
    }
    let all = RopeConfig::standard(theta, parent_dim).frequencies()?;
    let band = &all[lo - 1..hi];
    let norm = 2.0 * band.len() as f64;
    Ok(DecaySeries {
        values: (0..max_pos)
            .map(|x| similarity_from_frequencies(band, x as f64) / norm)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityMetrics {
    /// Share of values below zero inside the window.
    pub negative_fraction: f64,
    /// `max − min` over the last quarter of the window.
    pub tail_oscillation: f64,
    /// First value minus the mean of the last quarter.
    pub attenuation: f64,
}

pub fn stability_metrics(series: &DecaySeries, window: Range<usize>) -> Result<StabilityMetrics, RopeError> {
    let end = window.end.min(series.len());
    let start = window.start.min(end);
    let values = &series.values[start..end];
    if values.len() < 16 {
        return Err(RopeError::Window(values.len()));
    }
    let negative_fraction = values.iter().filter(|v| **v < 0.0).count() as f64 / values.len() as f64;
    let tail = &values[values.len() * 3 / 4..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(StabilityMetrics {
        negative_fraction,
        tail_oscillation: hi - lo,
        attenuation: values[0] - mean,
    })
}

/// `pos,value[,ideal]` CSV with 9 significant digits.
pub fn write_series_csv(out: &mut impl Write, series: &DecaySeries, ideal: Option<&[f64]>) -> io::Result<()> {
    match ideal {
        Some(_) => writeln!(out, "pos,value,ideal")?,
        None => writeln!(out, "pos,value")?,
    }
    for (pos, v) in series.values.iter().enumerate() {
        match ideal {
            Some(ideal) => writeln!(out, "{pos},{},{}", sig9(*v), sig9(ideal[pos]))?,
            None => writeln!(out, "{pos},{}", sig9(*v))?,
        }
    }
    Ok(())
}

/// Fixed 9-significant-digit rendering used by every CSV the crate emits.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.00000000".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    }
}
