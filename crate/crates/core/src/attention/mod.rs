//! Causal self-attention with independent query-key (`d_qk`) and
//! value-output (`d_vo`) head widths and grouped key/value heads.
//!
//! Weights use right multiplication: `q = h·W_Q`. Head `i` owns the
//! contiguous column block `[i·d_qk, (i+1)·d_qk)` of `W_Q` (likewise for the
//! other matrices; `W_O` is sliced by rows). Query head `i` reads key/value
//! head `⌊i·n_kv/n_heads⌋`.

mod cache;

pub use cache::{KvCache, KvHead, LayerKvCache};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::rope::{apply_rope_in_place, Layout, RopeError, RotaryTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error("invalid head geometry: {0}")]
    Geometry(String),
    #[error("{name} has shape {got:?}, expected {want:?}")]
    WeightShape {
        name: &'static str,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("cache holds {cached} tokens but token position {pos} was supplied")]
    CachePosition { cached: usize, pos: usize },
    #[error("sequence of {seq} tokens exceeds rotary table capacity {capacity}")]
    TooLong { seq: usize, capacity: usize },
}

/// Attention shape with decoupled per-head widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_qk: usize,
    pub d_vo: usize,
}

impl HeadGeometry {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let fail = |m: String| Err(AttentionError::Geometry(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail(format!("zero extent in {self:?}"));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads {} not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_qk < 2 || !self.d_qk.is_multiple_of(2) {
            return fail(format!("d_qk {} must be even and at least 2", self.d_qk));
        }
        if self.d_vo < 2 {
            return fail(format!("d_vo {} must be at least 2", self.d_vo));
        }
        Ok(())
    }

    /// Key/value head read by query head `i`.
    #[inline]
    pub fn kv_head_for(&self, i: usize) -> usize {
        i * self.n_kv_heads / self.n_heads
    }

    pub fn with_head_dims(self, d_qk: usize, d_vo: usize) -> Self {
        Self { d_qk, d_vo, ..self }
    }
}

/// Softmax temperature `1/√d_qk`.
pub fn scale_factor(geom: &HeadGeometry) -> f64 {
    1.0 / (geom.d_qk as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn zeros(geom: &HeadGeometry) -> Self {
        let [q, k, v, o] = Self::shapes(geom);
        Self {
            w_q: Tensor::zeros(&q),
            w_k: Tensor::zeros(&k),
            w_v: Tensor::zeros(&v),
            w_o: Tensor::zeros(&o),
        }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn random(geom: &HeadGeometry, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut gen = |shape: [usize; 2]| {
            let data = (0..shape[0] * shape[1])
                .map(|_| T::from_f64_lossy(normal.sample(rng)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };
        let [q, k, v, o] = Self::shapes(geom);
        Self {
            w_q: gen(q),
            w_k: gen(k),
            w_v: gen(v),
            w_o: gen(o),
        }
    }

    pub fn shapes(geom: &HeadGeometry) -> [[usize; 2]; 4] {
        [
            [geom.d_model, geom.n_heads * geom.d_qk],
            [geom.d_model, geom.n_kv_heads * geom.d_qk],
            [geom.d_model, geom.n_kv_heads * geom.d_vo],
            [geom.n_heads * geom.d_vo, geom.d_model],
        ]
    }

    pub fn validate(&self, geom: &HeadGeometry) -> Result<(), AttentionError> {
        geom.validate()?;
        let names = ["W_Q", "W_K", "W_V", "W_O"];
        for ((name, t), want) in names.iter().zip(self.tensors()).zip(Self::shapes(geom)) {
            if t.shape() != want {
                return Err(AttentionError::WeightShape {
                    name,
                    got: t.shape().to_vec(),
                    want: want.to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    pub fn cast<U: Scalar>(&self) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
        }
    }
}

/// Tape handles for one layer's attention matrices.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, w: &AttentionWeights<T>, trainable: bool) -> Self {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            w_q: reg(&w.w_q),
            w_k: reg(&w.w_k),
            w_v: reg(&w.w_v),
            w_o: reg(&w.w_o),
        }
    }
}

/// Records full-sequence causal attention of `h: [seq × d_model]` (token
/// positions `0..seq`) on the tape and returns the `[seq × d_model]` output.
pub fn attend_tape<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    w: &AttentionVars,
    geom: &HeadGeometry,
    table: &RotaryTable,
    layout: Layout,
) -> Result<Var, AttentionError> {
    let seq = tape.value(h).rows();
    if seq > table.max_pos() {
        return Err(AttentionError::TooLong {
            seq,
            capacity: table.max_pos(),
        });
    }
    if table.dim() != geom.d_qk {
        return Err(AttentionError::Geometry(format!(
            "rotary dim {} differs from d_qk {}",
            table.dim(),
            geom.d_qk
        )));
    }
    let q = tape.matmul(h, w.w_q)?;
    let k = tape.matmul(h, w.w_k)?;
    let v = tape.matmul(h, w.w_v)?;
    let (cos, sin) = table.angles::<T>(0, seq)?;
    let q = tape.rotate_pairs(q, cos.clone(), sin.clone(), layout, geom.d_qk)?;
    let k = tape.rotate_pairs(k, cos, sin, layout, geom.d_qk)?;

    let scale = T::from_f64_lossy(scale_factor(geom));
    let mut kv_blocks = Vec::with_capacity(geom.n_kv_heads);
    for g in 0..geom.n_kv_heads {
        let kg = tape.slice_cols(k, g * geom.d_qk, geom.d_qk)?;
        let vg = tape.slice_cols(v, g * geom.d_vo, geom.d_vo)?;
        kv_blocks.push((kg, vg));
    }
    let mut out: Option<Var> = None;
    for i in 0..geom.n_heads {
        let (kg, vg) = kv_blocks[geom.kv_head_for(i)];
        let qi = tape.slice_cols(q, i * geom.d_qk, geom.d_qk)?;
        let scores = tape.matmul_nt(qi, kg)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores, true)?;
        let head = tape.matmul(probs, vg)?;
        let w_oi = tape.slice_rows(w.w_o, i * geom.d_vo, geom.d_vo)?;
        let contrib = tape.matmul(head, w_oi)?;
        out = Some(match out {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    Ok(out.expect("at least one head"))
}

/// Full-sequence attention outside of any training tape.
pub fn attend_full<T: Scalar>(
    h: &Tensor<T>,
    w: &AttentionWeights<T>,
    geom: &HeadGeometry,
    table: &RotaryTable,
    layout: Layout,
) -> Result<Tensor<T>, AttentionError> {
    w.validate(geom)?;
    if h.cols() != geom.d_model {
        return Err(AttentionError::WeightShape {
            name: "H",
            got: h.shape().to_vec(),
            want: vec![h.rows(), geom.d_model],
        });
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let vars = AttentionVars::register(&mut tape, w, false);
    let out = attend_tape(&mut tape, hv, &vars, geom, table, layout)?;
    Ok(tape.value(out).clone())
}

/// Processes the token at `pos` against a layer cache already holding
/// positions `0..pos`, appending this token's rotated key and value.
pub fn attend_incremental<T: Scalar>(
    h: &[T],
    cache: &mut LayerKvCache<T>,
    w: &AttentionWeights<T>,
    geom: &HeadGeometry,
    table: &RotaryTable,
    layout: Layout,
    pos: usize,
) -> Result<Vec<T>, AttentionError> {
    if pos != cache.len() {
        return Err(AttentionError::CachePosition {
            cached: cache.len(),
            pos,
        });
    }
    cache.check_geometry(geom)?;
    if h.len() != geom.d_model {
        return Err(AttentionError::WeightShape {
            name: "h",
            got: vec![h.len()],
            want: vec![geom.d_model],
        });
    }
    let row = Tensor::new(vec![1, geom.d_model], h.to_vec())?;
    let mut q = row.matmul(&w.w_q)?.into_data();
    let mut k = row.matmul(&w.w_k)?.into_data();
    let v = row.matmul(&w.w_v)?.into_data();
    for head in q.chunks_exact_mut(geom.d_qk) {
        apply_rope_in_place(head, pos, table, layout)?;
    }
    for head in k.chunks_exact_mut(geom.d_qk) {
        apply_rope_in_place(head, pos, table, layout)?;
    }
    cache.append(&k, &v)?;

    let scale = scale_factor(geom);
    let len = cache.len();
    let mut concat = vec![T::zero(); geom.n_heads * geom.d_vo];
    let mut scores = vec![T::zero(); len];
    let mut probs = vec![T::zero(); len];
    for i in 0..geom.n_heads {
        let kv = &cache.heads()[geom.kv_head_for(i)];
        let qi = &q[i * geom.d_qk..(i + 1) * geom.d_qk];
        for (p, s) in scores.iter_mut().enumerate() {
            let key = kv.key(p);
            let dot: T = qi.iter().zip(key).map(|(&a, &b)| a * b).sum();
            *s = dot * T::from_f64_lossy(scale);
        }
        crate::numerics::softmax_into(&scores, &mut probs);
        let mut acc = vec![0.0f64; geom.d_vo];
        for (p, &pr) in probs.iter().enumerate() {
            let pr = pr.as_f64();
            for (a, &val) in acc.iter_mut().zip(kv.value(p)) {
                *a += pr * val.as_f64();
            }
        }
        for (dst, a) in concat[i * geom.d_vo..(i + 1) * geom.d_vo].iter_mut().zip(acc) {
            *dst = T::from_f64_lossy(a);
        }
    }
    let concat = Tensor::new(vec![1, concat.len()], concat)?;
    let out = concat.matmul(&w.w_o)?;
    out.check_finite("attend_incremental")?;
    Ok(out.into_data())
}
