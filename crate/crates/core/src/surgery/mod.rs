//! Cuts a trained model's attention heads down to narrower `d_qk`/`d_vo` by
//! channel selection, picks the rotary schedule for the reduced heads, and
//! attaches LoRA adapters to the FFN.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::attention::{AttentionWeights, HeadGeometry};
use crate::budget::kv_bytes_per_token;
use crate::model::{FfnLora, LoraAdapter, Model, ModelError, ParamKind};
use crate::numerics::{Scalar, Tensor};
use crate::rope::{Layout, RopeConfig, RopeError, RopeMode};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("cannot reduce {what} from {old} to {new}: not an integer stride")]
    Stride { what: &'static str, old: usize, new: usize },
    #[error("reduced d_qk must be even, got {0}")]
    OddQk(usize),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error("LoRA adapters are already attached")]
    LoraAttached,
    #[error("LoRA rank must be at least 1")]
    Rank,
    #[error("random query/key selection has no subsampled rotary schedule; use the frequency-aware schedule")]
    RandomNeedsFrequencyAware,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How channels are chosen inside each head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Selection {
    /// Every stride-th channel, starting at 0.
    #[default]
    Strided,
    /// A seeded random subset; query/key channels are chosen as whole rotation pairs.
    Random { seed: u64 },
}

/// Rotary schedule for the reduced heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum PostRope {
    /// The parent frequencies at the retained pairs; keeps the reduced model
    /// equivalent to the selection of the original.
    Subsampled,
    #[default]
    FrequencyAware,
}

impl PostRope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subsampled" => Some(Self::Subsampled),
            "freq-aware" | "frequency-aware" | "frequency_aware" => Some(Self::FrequencyAware),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurgeryPlan {
    pub d_qk: usize,
    pub d_vo: usize,
    pub selection: Selection,
    pub rope: PostRope,
    /// `(rank, alpha)`; `None` leaves the FFN untouched.
    pub lora: Option<(usize, f64)>,
    /// Seed for LoRA `A` initialization.
    pub seed: u64,
}

fn stride(what: &'static str, old: usize, new: usize) -> Result<usize, SurgeryError> {
    if new == 0 || new > old || !old.is_multiple_of(new) {
        return Err(SurgeryError::Stride { what, old, new });
    }
    Ok(old / new)
}

/// Per-head column indices kept by strided selection: `0, s, 2s, …`.
pub fn strided_indices(old: usize, new: usize) -> Result<Vec<usize>, SurgeryError> {
    let s = stride("head width", old, new)?;
    Ok((0..new).map(|k| k * s).collect())
}

/// Query/key channel indices for `selection`, ordered so that new channel
/// `k` comes from old channel `idx[k]`.
pub fn qk_indices(old: usize, new: usize, layout: Layout, selection: Selection) -> Result<Vec<usize>, SurgeryError> {
    let s = stride("d_qk", old, new)?;
    if !new.is_multiple_of(2) {
        return Err(SurgeryError::OddQk(new));
    }
    if layout == Layout::Adjacent && s > 1 {
        return Err(RopeError::PairSplit(s).into());
    }
    match selection {
        Selection::Strided => strided_indices(old, new),
        Selection::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (half_old, half_new) = (old / 2, new / 2);
            let mut pairs = sample(&mut rng, half_old, half_new).into_vec();
            pairs.sort_unstable();
            Ok(match layout {
                Layout::HalfSplit => pairs
                    .iter()
                    .copied()
                    .chain(pairs.iter().map(|j| j + half_old))
                    .collect(),
                Layout::Adjacent => pairs.iter().flat_map(|&j| [2 * j, 2 * j + 1]).collect(),
            })
        }
    }
}

pub fn vo_indices(old: usize, new: usize, selection: Selection) -> Result<Vec<usize>, SurgeryError> {
    stride("d_vo", old, new)?;
    match selection {
        Selection::Strided => strided_indices(old, new),
        Selection::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0FF0);
            let mut idx = sample(&mut rng, old, new).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Picks columns `idx` inside each `width`-wide block of `t`.
fn select_cols<T: Scalar>(t: &Tensor<T>, width: usize, idx: &[usize]) -> Tensor<T> {
    let blocks = t.cols() / width;
    let mut data = Vec::with_capacity(t.rows() * blocks * idx.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        for b in 0..blocks {
            data.extend(idx.iter().map(|&i| row[b * width + i]));
        }
    }
    Tensor::new(vec![t.rows(), blocks * idx.len()], data).expect("selection shape")
}

/// Picks rows `idx` inside each `width`-tall block of `t`.
fn select_rows<T: Scalar>(t: &Tensor<T>, width: usize, idx: &[usize]) -> Tensor<T> {
    let blocks = t.rows() / width;
    let mut data = Vec::with_capacity(blocks * idx.len() * t.cols());
    for b in 0..blocks {
        for &i in idx {
            data.extend_from_slice(t.row(b * width + i));
        }
    }
    Tensor::new(vec![blocks * idx.len(), t.cols()], data).expect("selection shape")
}

/// Applies explicit per-head index maps to all four attention matrices.
pub fn downsample_attention_with<T: Scalar>(
    w: &AttentionWeights<T>,
    old: &HeadGeometry,
    qk: &[usize],
    vo: &[usize],
) -> Result<AttentionWeights<T>, SurgeryError> {
    w.validate(old).map_err(ModelError::from)?;
    Ok(AttentionWeights {
        w_q: select_cols(&w.w_q, old.d_qk, qk),
        w_k: select_cols(&w.w_k, old.d_qk, qk),
        w_v: select_cols(&w.w_v, old.d_vo, vo),
        w_o: select_rows(&w.w_o, old.d_vo, vo),
    })
}

/// Strided reduction of one layer's attention from `old` to `new` head widths.
pub fn downsample_attention<T: Scalar>(
    w: &AttentionWeights<T>,
    old: &HeadGeometry,
    new: &HeadGeometry,
) -> Result<AttentionWeights<T>, SurgeryError> {
    if old.d_model != new.d_model || old.n_heads != new.n_heads || old.n_kv_heads != new.n_kv_heads {
        return Err(ModelError::Config("surgery changes only head widths".into()).into());
    }
    let qk = strided_indices(old.d_qk, new.d_qk)?;
    if !new.d_qk.is_multiple_of(2) {
        return Err(SurgeryError::OddQk(new.d_qk));
    }
    let vo = strided_indices(old.d_vo, new.d_vo)?;
    downsample_attention_with(w, old, &qk, &vo)
}

/// Rotary config whose frequencies are those of the pairs kept by strided
/// selection with `stride`.
pub fn derive_rope_subsample(old: &RopeConfig, stride: usize) -> Result<RopeConfig, SurgeryError> {
    old.validate()?;
    if stride == 1 {
        return Ok(*old);
    }
    if old.layout == Layout::Adjacent {
        return Err(RopeError::PairSplit(stride).into());
    }
    let (parent_dim, parent_stride, parent_phase) = match old.mode {
        RopeMode::Standard => (old.dim, 1, 0),
        RopeMode::Subsampled {
            parent_dim,
            stride,
            phase,
        } => (parent_dim, stride, phase),
        RopeMode::FrequencyAware => {
            return Err(RopeError::Subsample {
                parent_dim: old.dim,
                dim: old.dim / stride,
                stride,
                phase: 0,
            }
            .into())
        }
    };
    let cfg = RopeConfig {
        dim: old.dim / stride,
        mode: RopeMode::Subsampled {
            parent_dim,
            stride: parent_stride * stride,
            phase: parent_phase,
        },
        ..*old
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Adds zero-delta adapters to gate, up and down of every block and freezes
/// the base model.
pub fn attach_lora<T: Scalar>(model: &mut Model<T>, rank: usize, alpha: f64, seed: u64) -> Result<(), SurgeryError> {
    if rank == 0 {
        return Err(SurgeryError::Rank);
    }
    if model.blocks.iter().any(|b| b.lora.is_some()) {
        return Err(SurgeryError::LoraAttached);
    }
    let (d, f) = (model.config().d_model, model.config().d_ffn);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut model.blocks {
        b.lora = Some(FfnLora {
            gate: LoraAdapter::new(d, f, rank, alpha, &mut rng),
            up: LoraAdapter::new(d, f, rank, alpha, &mut rng),
            down: LoraAdapter::new(f, d, rank, alpha, &mut rng),
        });
    }
    model.base_frozen = true;
    Ok(())
}

/// Parameters updated during recovery: attention matrices and LoRA factors.
pub fn trainable_census<T: Scalar>(model: &Model<T>) -> usize {
    model.count_params(&[ParamKind::Attention, ParamKind::Lora])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurgeryReport {
    pub old_geometry: HeadGeometry,
    pub new_geometry: HeadGeometry,
    pub selection: Selection,
    pub qk_indices: Vec<usize>,
    pub vo_indices: Vec<usize>,
    pub old_rope: RopeConfig,
    pub new_rope: RopeConfig,
    pub lora: Option<(usize, f64)>,
    pub params_before: usize,
    pub params_after: usize,
    pub attention_params_before: usize,
    pub attention_params_after: usize,
    pub trainable_params: usize,
    pub kv_bytes_per_token_f32_before: u64,
    pub kv_bytes_per_token_f32_after: u64,
}

impl SurgeryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full surgery on a model: head reduction in every layer, new rotary
/// schedule, optional LoRA.
pub fn perform_surgery<T: Scalar>(
    model: &Model<T>,
    plan: &SurgeryPlan,
) -> Result<(Model<T>, SurgeryReport), SurgeryError> {
    let cfg = *model.config();
    let old = cfg.geom;
    let new = old.with_head_dims(plan.d_qk, plan.d_vo);
    let qk = qk_indices(old.d_qk, plan.d_qk, cfg.rope.layout, plan.selection)?;
    let vo = vo_indices(old.d_vo, plan.d_vo, plan.selection)?;
    let new_rope = match (plan.rope, plan.selection) {
        (PostRope::Subsampled, Selection::Strided) => derive_rope_subsample(&cfg.rope, old.d_qk / plan.d_qk)?,
        (PostRope::Subsampled, Selection::Random { .. }) if plan.d_qk != old.d_qk => {
            return Err(SurgeryError::RandomNeedsFrequencyAware)
        }
        (PostRope::Subsampled, Selection::Random { .. }) => cfg.rope,
        (PostRope::FrequencyAware, _) => {
            let r = RopeConfig::frequency_aware(cfg.rope.theta, plan.d_qk).with_layout(cfg.rope.layout);
            r.validate()?;
            r
        }
    };

    let mut out = model.clone();
    for b in &mut out.blocks {
        b.attention = downsample_attention_with(&b.attention, &old, &qk, &vo)?;
    }
    out.set_attention_shape(new, new_rope)?;
    if let Some((rank, alpha)) = plan.lora {
        attach_lora(&mut out, rank, alpha, plan.seed)?;
    }
    let all = |m: &Model<T>| m.params().iter().map(|p| p.tensor.len()).sum::<usize>();
    let report = SurgeryReport {
        old_geometry: old,
        new_geometry: new,
        selection: plan.selection,
        qk_indices: qk,
        vo_indices: vo,
        old_rope: cfg.rope,
        new_rope,
        lora: plan.lora,
        params_before: all(model),
        params_after: all(&out),
        attention_params_before: model.count_params(&[ParamKind::Attention]),
        attention_params_after: out.count_params(&[ParamKind::Attention]),
        trainable_params: trainable_census(&out),
        kv_bytes_per_token_f32_before: kv_bytes_per_token(&old, cfg.n_layers, 4).expect("4-byte elements"),
        kv_bytes_per_token_f32_after: kv_bytes_per_token(&new, cfg.n_layers, 4).expect("4-byte elements"),
    };
    Ok((out, report))
}
