//! Rotary position embedding: frequency schedules, both channel layouts, and
//! the all-ones similarity analytics used to measure positional stability.

mod analysis;
mod quadrature;

pub use analysis::{
    band_series, decay_series, rope_similarity, rope_similarity_by_rotation, sig9, similarity_from_frequencies,
    stability_metrics, write_series_csv, DecaySeries, StabilityMetrics, DEFAULT_WINDOW,
};
pub use quadrature::{ideal_curve, ideal_curve_with, QuadratureRule, DEFAULT_IDEAL_STEPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RopeError {
    #[error("rotary dimension must be even and positive, got {0}")]
    OddDim(usize),
    #[error("theta must exceed 1, got {0}")]
    Theta(f64),
    #[error("frequency-aware schedule needs dim divisible by 8, got {0}")]
    FrequencyAwareDim(usize),
    #[error("subsampling {parent_dim} by stride {stride} (phase {phase}) cannot give dim {dim}")]
    Subsample {
        parent_dim: usize,
        dim: usize,
        stride: usize,
        phase: usize,
    },
    #[error("adjacent layout cannot be strided by {0} without splitting rotation pairs")]
    PairSplit(usize),
    #[error("position {pos} outside rotary table of {max_pos} positions")]
    Position { pos: usize, max_pos: usize },
    #[error("vector length {got} does not match rotary dim {dim}")]
    Length { got: usize, dim: usize },
    #[error("channel range {lo}..={hi} is empty or outside 1..={max}")]
    Band { lo: usize, hi: usize, max: usize },
    #[error("stability window holds {0} points, need at least 16")]
    Window(usize),
}

/// Which channels share a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Layout {
    /// Channels `2j` and `2j+1` (0-based) form pair `j`.
    Adjacent,
    /// Channels `j` and `j + dim/2` form pair `j` (GPT-NeoX style).
    #[default]
    HalfSplit,
}

impl Layout {
    /// 0-based channel indices of rotation pair `j` in a `dim`-wide head.
    #[inline]
    pub fn pair(self, j: usize, dim: usize) -> (usize, usize) {
        match self {
            Layout::Adjacent => (2 * j, 2 * j + 1),
            Layout::HalfSplit => (j, j + dim / 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Adjacent => "adjacent",
            Layout::HalfSplit => "half_split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adjacent" => Some(Layout::Adjacent),
            "half_split" | "half-split" => Some(Layout::HalfSplit),
            _ => None,
        }
    }
}

/// Frequency schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RopeMode {
    /// `θ_j = theta^{-(j-1)/(dim/2)}`.
    Standard,
    /// Skips the highest frequencies and samples the low-frequency end twice
    /// as densely. Requires `dim % 8 == 0`.
    FrequencyAware,
    /// Every `stride`-th frequency of a standard `parent_dim` schedule,
    /// starting at `phase`.
    Subsampled {
        parent_dim: usize,
        stride: usize,
        phase: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub theta: f64,
    pub dim: usize,
    pub mode: RopeMode,
    pub layout: Layout,
}

impl RopeConfig {
    pub fn standard(theta: f64, dim: usize) -> Self {
        Self {
            theta,
            dim,
            mode: RopeMode::Standard,
            layout: Layout::HalfSplit,
        }
    }

    pub fn frequency_aware(theta: f64, dim: usize) -> Self {
        Self {
            mode: RopeMode::FrequencyAware,
            ..Self::standard(theta, dim)
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn validate(&self) -> Result<(), RopeError> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(RopeError::OddDim(self.dim));
        }
        if !self.theta.is_finite() || self.theta <= 1.0 {
            return Err(RopeError::Theta(self.theta));
        }
        match self.mode {
            RopeMode::Standard => Ok(()),
            RopeMode::FrequencyAware if !self.dim.is_multiple_of(8) => Err(RopeError::FrequencyAwareDim(self.dim)),
            RopeMode::FrequencyAware => Ok(()),
            RopeMode::Subsampled {
                parent_dim,
                stride,
                phase,
            } => {
                let ok = stride >= 1
                    && phase < stride
                    && parent_dim % 2 == 0
                    && parent_dim % stride == 0
                    && parent_dim / stride == self.dim
                    && (parent_dim / 2) % stride == 0;
                if ok {
                    Ok(())
                } else {
                    Err(RopeError::Subsample {
                        parent_dim,
                        dim: self.dim,
                        stride,
                        phase,
                    })
                }
            }
        }
    }

    /// The `dim/2` rotation frequencies `θ_1..θ_{dim/2}`.
    pub fn frequencies(&self) -> Result<Vec<f64>, RopeError> {
        self.validate()?;
        let d = self.dim;
        let freqs = match self.mode {
            RopeMode::Standard => standard_frequencies(self.theta, d),
            RopeMode::FrequencyAware => {
                let df = d as f64;
                (1..=d / 2)
                    .map(|j| {
                        let j = j as f64;
                        // first quarter of pairs: exponent range [1/4, 3/4);
                        // second quarter: [1, 5/4), leaving (3/4, 1) unsampled
                        let exponent = if j <= df / 4.0 {
                            -2.0 * (j - 1.0 + df / 8.0) / df
                        } else {
                            -(j - 1.0 + 3.0 * df / 4.0) / df
                        };
                        self.theta.powf(exponent)
                    })
                    .collect()
            }
            RopeMode::Subsampled {
                parent_dim,
                stride,
                phase,
            } => standard_frequencies(self.theta, parent_dim)
                .into_iter()
                .skip(phase)
                .step_by(stride)
                .collect(),
        };
        Ok(freqs)
    }
}

fn standard_frequencies(theta: f64, dim: usize) -> Vec<f64> {
    let half = (dim / 2) as f64;
    (0..dim / 2).map(|j| theta.powf(-(j as f64) / half)).collect()
}

/// Precomputed `cos(x·θ_j)` / `sin(x·θ_j)` for positions `0..max_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryTable {
    max_pos: usize,
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(config: &RopeConfig, max_pos: usize) -> Result<Self, RopeError> {
        let freqs = config.frequencies()?;
        Ok(Self::from_frequencies(&freqs, max_pos))
    }

    pub fn from_frequencies(freqs: &[f64], max_pos: usize) -> Self {
        let half = freqs.len();
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for x in 0..max_pos {
            for &f in freqs {
                let angle = x as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self {
            max_pos,
            half,
            cos,
            sin,
        }
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    pub fn dim(&self) -> usize {
        2 * self.half
    }

    pub fn cos_row(&self, pos: usize) -> &[f64] {
        &self.cos[pos * self.half..(pos + 1) * self.half]
    }

    pub fn sin_row(&self, pos: usize) -> &[f64] {
        &self.sin[pos * self.half..(pos + 1) * self.half]
    }

    fn check_pos(&self, pos: usize) -> Result<(), RopeError> {
        if pos >= self.max_pos {
            Err(RopeError::Position {
                pos,
                max_pos: self.max_pos,
            })
        } else {
            Ok(())
        }
    }

    /// `[len × dim/2]` cosine and sine blocks for positions `start..start+len`.
    pub fn angles<T: Scalar>(&self, start: usize, len: usize) -> Result<(Tensor<T>, Tensor<T>), RopeError> {
        if len > 0 {
            self.check_pos(start + len - 1)?;
        }
        let span = start * self.half..(start + len) * self.half;
        let conv = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
        let cos = Tensor::new(vec![len, self.half], conv(&self.cos[span.clone()])).expect("table slice");
        let sin = Tensor::new(vec![len, self.half], conv(&self.sin[span])).expect("table slice");
        Ok((cos, sin))
    }
}

/// Rotates one head vector to position `pos`.
pub fn apply_rope<T: Scalar>(v: &[T], pos: usize, table: &RotaryTable, layout: Layout) -> Result<Vec<T>, RopeError> {
    let mut out = v.to_vec();
    apply_rope_in_place(&mut out, pos, table, layout)?;
    Ok(out)
}

pub fn apply_rope_in_place<T: Scalar>(
    v: &mut [T],
    pos: usize,
    table: &RotaryTable,
    layout: Layout,
) -> Result<(), RopeError> {
    let dim = table.dim();
    if v.len() != dim {
        return Err(RopeError::Length { got: v.len(), dim });
    }
    table.check_pos(pos)?;
    let (c, s) = (table.cos_row(pos), table.sin_row(pos));
    for j in 0..dim / 2 {
        let (i0, i1) = layout.pair(j, dim);
        let (cj, sj) = (T::from_f64_lossy(c[j]), T::from_f64_lossy(s[j]));
        let (a, b) = (v[i0], v[i1]);
        v[i0] = a * cj - b * sj;
        v[i1] = b * cj + a * sj;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-15 * w.abs().max(1.0), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn standard_schedule() {
        let f = RopeConfig::standard(10000.0, 8).frequencies().unwrap();
        let t: f64 = 10000.0;
        assert_close(&f, &[1.0, t.powf(-0.25), t.powf(-0.5), t.powf(-0.75)]);
    }

    #[test]
    fn frequency_aware_schedule() {
        let f = RopeConfig::frequency_aware(10000.0, 8).frequencies().unwrap();
        let t: f64 = 10000.0;
        assert_close(&f, &[t.powf(-0.25), t.powf(-0.5), t.powf(-1.0), t.powf(-1.125)]);
        assert_eq!(
            RopeConfig::frequency_aware(10000.0, 12).frequencies(),
            Err(RopeError::FrequencyAwareDim(12))
        );
    }

    #[test]
    fn subsampled_schedule() {
        let cfg = RopeConfig {
            mode: RopeMode::Subsampled {
                parent_dim: 8,
                stride: 2,
                phase: 0,
            },
            ..RopeConfig::standard(10000.0, 4)
        };
        assert_close(&cfg.frequencies().unwrap(), &[1.0, 0.01]);
        let bad = RopeConfig {
            mode: RopeMode::Subsampled {
                parent_dim: 8,
                stride: 3,
                phase: 0,
            },
            ..RopeConfig::standard(10000.0, 4)
        };
        assert!(matches!(bad.validate(), Err(RopeError::Subsample { .. })));
    }

    #[test]
    fn invalid_configs() {
        assert_eq!(RopeConfig::standard(10000.0, 7).validate(), Err(RopeError::OddDim(7)));
        assert_eq!(RopeConfig::standard(1.0, 8).validate(), Err(RopeError::Theta(1.0)));
    }

    #[test]
    fn table_row_zero_is_identity() {
        let table = RotaryTable::new(&RopeConfig::standard(10000.0, 16), 64).unwrap();
        assert!(table.cos_row(0).iter().all(|&c| c == 1.0));
        assert!(table.sin_row(0).iter().all(|&s| s == 0.0));
        for p in 0..64 {
            for (c, s) in table.cos_row(p).iter().zip(table.sin_row(p)) {
                assert!((c * c + s * s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn position_zero_is_identity() {
        let table = RotaryTable::new(&RopeConfig::standard(10000.0, 8), 4).unwrap();
        let v = [0.3f64, -1.0, 2.0, 0.5, 1.5, -0.25, 0.0, 4.0];
        for layout in [Layout::Adjacent, Layout::HalfSplit] {
            assert_eq!(apply_rope(&v, 0, &table, layout).unwrap(), v.to_vec());
        }
    }

    #[test]
    fn quarter_turn_half_split() {
        // θ_1 = 1, so position must supply the angle; use a one-frequency table
        let table = RotaryTable::from_frequencies(&[std::f64::consts::FRAC_PI_2, 0.0], 2);
        let out = apply_rope(&[1.0f64, 0.0, 1.0, 0.0], 1, &table, Layout::HalfSplit).unwrap();
        let want = [-1.0, 0.0, 1.0, 0.0];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_position() {
        let table = RotaryTable::new(&RopeConfig::standard(10000.0, 4), 3).unwrap();
        assert_eq!(
            apply_rope(&[1.0f64; 4], 3, &table, Layout::HalfSplit),
            Err(RopeError::Position { pos: 3, max_pos: 3 })
        );
        assert!(matches!(
            apply_rope(&[1.0f64; 6], 0, &table, Layout::HalfSplit),
            Err(RopeError::Length { .. })
        ));
    }

    fn any_config() -> impl Strategy<Value = (RopeConfig, usize)> {
        let modes = prop_oneof![
            Just(RopeMode::Standard),
            Just(RopeMode::FrequencyAware),
            Just(RopeMode::Subsampled {
                parent_dim: 64,
                stride: 2,
                phase: 1
            }),
        ];
        let layouts = prop_oneof![Just(Layout::Adjacent), Just(Layout::HalfSplit)];
        (modes, layouts, prop_oneof![Just(16usize), Just(32)], 0usize..512).prop_map(|(mode, layout, dim, pos)| {
            let dim = if matches!(mode, RopeMode::Subsampled { .. }) {
                32
            } else {
                dim
            };
            (
                RopeConfig {
                    theta: 10000.0,
                    dim,
                    mode,
                    layout,
                },
                pos,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn rotation_is_isometry((cfg, pos) in any_config(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let table = RotaryTable::new(&cfg, 512).unwrap();
            let out = apply_rope(&v, pos, &table, cfg.layout).unwrap();
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-6);
        }

        #[test]
        fn dot_product_depends_on_offset_only(
            (cfg, _) in any_config(),
            seed in any::<u64>(),
            m in 0usize..400,
            n in 0usize..400,
            shift in 0usize..100,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let table = RotaryTable::new(&cfg, 512).unwrap();
            let dot = |a: usize, b: usize| {
                let qa = apply_rope(&q, a, &table, cfg.layout).unwrap();
                let kb = apply_rope(&k, b, &table, cfg.layout).unwrap();
                qa.iter().zip(&kb).map(|(x, y)| x * y).sum::<f64>()
            };
            prop_assert!((dot(m, n) - dot(m + shift, n + shift)).abs() < 1e-5);
        }
    }
}
