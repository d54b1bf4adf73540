//! Toy pre-norm decoder language model: RMS norms, rotary attention with
//! decoupled head widths, SiLU-gated FFN with optional LoRA adapters.

mod checkpoint;
mod corpus;
mod forward;
mod lora;

pub use checkpoint::{load, load_from_bytes, save, save_to_bytes, CheckpointError, FORMAT_VERSION, MAGIC};
pub use corpus::{encode_bytes, toy_corpus, Batch, Corpus};
pub use forward::{BlockVars, ForwardOutput, ModelVars};
pub use lora::LoraAdapter;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionWeights, HeadGeometry};
use crate::numerics::{NumericsError, Scalar, Tensor};
use crate::rope::{RopeConfig, RopeError, RotaryTable};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("sequence of {seq} tokens exceeds max_seq {max}")]
    TooLong { seq: usize, max: usize },
    #[error("corpus is empty or has no sequence of at least two tokens")]
    EmptyCorpus,
    #[error("LoRA: {0}")]
    Lora(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub geom: HeadGeometry,
    pub d_ffn: usize,
    pub rope: RopeConfig,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Byte vocabulary, 128 wide, 4 layers of 4 query / 2 kv heads of 32.
    pub fn desk() -> Self {
        Self {
            vocab: 256,
            d_model: 128,
            n_layers: 4,
            geom: HeadGeometry {
                d_model: 128,
                n_heads: 4,
                n_kv_heads: 2,
                d_qk: 32,
                d_vo: 32,
            },
            d_ffn: 512,
            rope: RopeConfig::standard(10000.0, 32),
            max_seq: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ffn == 0 || self.max_seq == 0 {
            return fail(format!("all extents must be positive: {self:?}"));
        }
        if self.geom.d_model != self.d_model {
            return fail(format!("geometry d_model {} != {}", self.geom.d_model, self.d_model));
        }
        self.geom.validate()?;
        self.rope.validate()?;
        if self.rope.dim != self.geom.d_qk {
            return fail(format!("rope dim {} != d_qk {}", self.rope.dim, self.geom.d_qk));
        }
        Ok(())
    }
}

/// What a parameter tensor belongs to; drives which tensors a stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embedding,
    Norm,
    Attention,
    Ffn,
    Lora,
    Unembedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnLora<T> {
    pub gate: LoraAdapter<T>,
    pub up: LoraAdapter<T>,
    pub down: LoraAdapter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockWeights<T> {
    pub attn_norm: Tensor<T>,
    pub attention: AttentionWeights<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn_gate: Tensor<T>,
    pub ffn_up: Tensor<T>,
    pub ffn_down: Tensor<T>,
    pub lora: Option<FfnLora<T>>,
}

impl<T: Scalar> DecoderBlockWeights<T> {
    /// Folds the adapters into the base FFN matrices, returning them.
    pub fn merge_lora(&mut self) -> Result<Option<FfnLora<T>>, ModelError> {
        let Some(lora) = self.lora.take() else { return Ok(None) };
        self.ffn_gate = self.ffn_gate.add(&lora.gate.delta()?)?;
        self.ffn_up = self.ffn_up.add(&lora.up.delta()?)?;
        self.ffn_down = self.ffn_down.add(&lora.down.delta()?)?;
        Ok(Some(lora))
    }

    /// Inverse of [`merge_lora`](Self::merge_lora).
    pub fn unmerge_lora(&mut self, lora: FfnLora<T>) -> Result<(), ModelError> {
        if self.lora.is_some() {
            return Err(ModelError::Lora("block already carries adapters".into()));
        }
        self.ffn_gate = self.ffn_gate.sub(&lora.gate.delta()?)?;
        self.ffn_up = self.ffn_up.sub(&lora.up.delta()?)?;
        self.ffn_down = self.ffn_down.sub(&lora.down.delta()?)?;
        self.lora = Some(lora);
        Ok(())
    }

    fn cast<U: Scalar>(&self) -> DecoderBlockWeights<U> {
        DecoderBlockWeights {
            attn_norm: self.attn_norm.cast(),
            attention: self.attention.cast(),
            ffn_norm: self.ffn_norm.cast(),
            ffn_gate: self.ffn_gate.cast(),
            ffn_up: self.ffn_up.cast(),
            ffn_down: self.ffn_down.cast(),
            lora: self.lora.as_ref().map(|l| FfnLora {
                gate: l.gate.cast(),
                up: l.up.cast(),
                down: l.down.cast(),
            }),
        }
    }
}

/// A named view of one parameter tensor.
pub struct Param<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor<T>,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    table: RotaryTable,
    pub embed: Tensor<T>,
    pub blocks: Vec<DecoderBlockWeights<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
    /// Set once adapters are attached: base FFN, norms and embeddings stay fixed.
    pub base_frozen: bool,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed == other.embed
            && self.blocks == other.blocks
            && self.final_norm == other.final_norm
            && self.unembed == other.unembed
            && self.base_frozen == other.base_frozen
    }
}

impl<T: Scalar> Model<T> {
    /// Gaussian initialization (std 0.02, residual projections scaled by
    /// `1/√(2L)`), unit norm gains.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut gaussian = |rows: usize, cols: usize, s: f64| {
            let n = Normal::new(0.0, s).expect("finite std");
            let data = (0..rows * cols)
                .map(|_| T::from_f64_lossy(n.sample(&mut rng)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("shape")
        };
        let d = config.d_model;
        let g = config.geom;
        let embed = gaussian(config.vocab, d, std);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attention = AttentionWeights {
                w_q: gaussian(d, g.n_heads * g.d_qk, std),
                w_k: gaussian(d, g.n_kv_heads * g.d_qk, std),
                w_v: gaussian(d, g.n_kv_heads * g.d_vo, std),
                w_o: gaussian(g.n_heads * g.d_vo, d, resid_std),
            };
            blocks.push(DecoderBlockWeights {
                attn_norm: Tensor::full(&[1, d], T::one()),
                attention,
                ffn_norm: Tensor::full(&[1, d], T::one()),
                ffn_gate: gaussian(d, config.d_ffn, std),
                ffn_up: gaussian(d, config.d_ffn, std),
                ffn_down: gaussian(config.d_ffn, d, resid_std),
                lora: None,
            });
        }
        let unembed = gaussian(d, config.vocab, std);
        Self::from_parts(config, embed, blocks, Tensor::full(&[1, d], T::one()), unembed)
    }

    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor<T>,
        blocks: Vec<DecoderBlockWeights<T>>,
        final_norm: Tensor<T>,
        unembed: Tensor<T>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let table = RotaryTable::new(&config.rope, config.max_seq)?;
        let model = Self {
            config,
            table,
            embed,
            blocks,
            final_norm,
            unembed,
            base_frozen: false,
        };
        model.validate_shapes()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn table(&self) -> &RotaryTable {
        &self.table
    }

    /// Replaces the head geometry and rotary schedule; callers must already
    /// have reshaped the attention weights to match.
    pub fn set_attention_shape(&mut self, geom: HeadGeometry, rope: RopeConfig) -> Result<(), ModelError> {
        let config = ModelConfig {
            geom,
            rope,
            ..self.config
        };
        config.validate()?;
        self.table = RotaryTable::new(&rope, config.max_seq)?;
        self.config = config;
        self.validate_shapes()
    }

    /// Swaps only the rotary schedule (dimension must be unchanged).
    pub fn set_rope(&mut self, rope: RopeConfig) -> Result<(), ModelError> {
        self.set_attention_shape(self.config.geom, rope)
    }

    /// Expected shape of every named parameter under the current config.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params()
            .into_iter()
            .map(|p| (p.name, p.tensor.shape().to_vec()))
            .collect()
    }

    pub fn validate_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let d = c.d_model;
        let check = |name: &str, t: &Tensor<T>, want: &[usize]| {
            if t.shape() != want {
                Err(ModelError::Config(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        check("embed", &self.embed, &[c.vocab, d])?;
        check("final_norm", &self.final_norm, &[1, d])?;
        check("unembed", &self.unembed, &[d, c.vocab])?;
        if self.blocks.len() != c.n_layers {
            return Err(ModelError::Config(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                c.n_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            b.attention.validate(&c.geom)?;
            check(&format!("blocks.{l}.attn_norm"), &b.attn_norm, &[1, d])?;
            check(&format!("blocks.{l}.ffn_norm"), &b.ffn_norm, &[1, d])?;
            check(&format!("blocks.{l}.ffn.gate"), &b.ffn_gate, &[d, c.d_ffn])?;
            check(&format!("blocks.{l}.ffn.up"), &b.ffn_up, &[d, c.d_ffn])?;
            check(&format!("blocks.{l}.ffn.down"), &b.ffn_down, &[c.d_ffn, d])?;
            if let Some(lora) = &b.lora {
                for (name, ad, rows, cols) in [
                    ("gate", &lora.gate, d, c.d_ffn),
                    ("up", &lora.up, d, c.d_ffn),
                    ("down", &lora.down, c.d_ffn, d),
                ] {
                    check(&format!("blocks.{l}.lora.{name}.a"), &ad.a, &[rows, ad.rank])?;
                    check(&format!("blocks.{l}.lora.{name}.b"), &ad.b, &[ad.rank, cols])?;
                }
            }
        }
        Ok(())
    }

    pub fn lora_settings(&self) -> Option<(usize, f64)> {
        self.blocks.first()?.lora.as_ref().map(|l| (l.gate.rank, l.gate.alpha))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            table: self.table.clone(),
            embed: self.embed.cast(),
            blocks: self.blocks.iter().map(DecoderBlockWeights::cast).collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
            base_frozen: self.base_frozen,
        }
    }

    /// Every parameter in a fixed order (the checkpoint and optimizer order).
    pub fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        let mut push = |name: String, kind, tensor| out.push(Param { name, kind, tensor });
        push("embed".into(), ParamKind::Embedding, &self.embed);
        for (l, b) in self.blocks.iter().enumerate() {
            push(format!("blocks.{l}.attn_norm"), ParamKind::Norm, &b.attn_norm);
            push(format!("blocks.{l}.attn.w_q"), ParamKind::Attention, &b.attention.w_q);
            push(format!("blocks.{l}.attn.w_k"), ParamKind::Attention, &b.attention.w_k);
            push(format!("blocks.{l}.attn.w_v"), ParamKind::Attention, &b.attention.w_v);
            push(format!("blocks.{l}.attn.w_o"), ParamKind::Attention, &b.attention.w_o);
            push(format!("blocks.{l}.ffn_norm"), ParamKind::Norm, &b.ffn_norm);
            push(format!("blocks.{l}.ffn.gate"), ParamKind::Ffn, &b.ffn_gate);
            push(format!("blocks.{l}.ffn.up"), ParamKind::Ffn, &b.ffn_up);
            push(format!("blocks.{l}.ffn.down"), ParamKind::Ffn, &b.ffn_down);
            if let Some(lora) = &b.lora {
                for (name, ad) in [("gate", &lora.gate), ("up", &lora.up), ("down", &lora.down)] {
                    push(format!("blocks.{l}.lora.{name}.a"), ParamKind::Lora, &ad.a);
                    push(format!("blocks.{l}.lora.{name}.b"), ParamKind::Lora, &ad.b);
                }
            }
        }
        push("final_norm".into(), ParamKind::Norm, &self.final_norm);
        push("unembed".into(), ParamKind::Unembedding, &self.unembed);
        out
    }

    /// Mutable counterpart of [`params`](Self::params), same order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        out.push(ParamMut {
            name: "embed".into(),
            kind: ParamKind::Embedding,
            tensor: &mut self.embed,
        });
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("blocks.{l}.attn_norm"),
                kind: ParamKind::Norm,
                tensor: &mut b.attn_norm,
            });
            let [q, k, v, o] = b.attention.tensors_mut();
            out.push(ParamMut {
                name: format!("blocks.{l}.attn.w_q"),
                kind: ParamKind::Attention,
                tensor: q,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.attn.w_k"),
                kind: ParamKind::Attention,
                tensor: k,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.attn.w_v"),
                kind: ParamKind::Attention,
                tensor: v,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.attn.w_o"),
                kind: ParamKind::Attention,
                tensor: o,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.ffn_norm"),
                kind: ParamKind::Norm,
                tensor: &mut b.ffn_norm,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.ffn.gate"),
                kind: ParamKind::Ffn,
                tensor: &mut b.ffn_gate,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.ffn.up"),
                kind: ParamKind::Ffn,
                tensor: &mut b.ffn_up,
            });
            out.push(ParamMut {
                name: format!("blocks.{l}.ffn.down"),
                kind: ParamKind::Ffn,
                tensor: &mut b.ffn_down,
            });
            if let Some(lora) = &mut b.lora {
                for (name, ad) in [("gate", &mut lora.gate), ("up", &mut lora.up), ("down", &mut lora.down)] {
                    out.push(ParamMut {
                        name: format!("blocks.{l}.lora.{name}.a"),
                        kind: ParamKind::Lora,
                        tensor: &mut ad.a,
                    });
                    out.push(ParamMut {
                        name: format!("blocks.{l}.lora.{name}.b"),
                        kind: ParamKind::Lora,
                        tensor: &mut ad.b,
                    });
                }
            }
        }
        out.push(ParamMut {
            name: "final_norm".into(),
            kind: ParamKind::Norm,
            tensor: &mut self.final_norm,
        });
        out.push(ParamMut {
            name: "unembed".into(),
            kind: ParamKind::Unembedding,
            tensor: &mut self.unembed,
        });
        out
    }

    /// Scalar count of parameters of the given kinds.
    pub fn count_params(&self, kinds: &[ParamKind]) -> usize {
        self.params()
            .iter()
            .filter(|p| kinds.contains(&p.kind))
            .map(|p| p.tensor.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_many, Tape, Var};
    use crate::rope::Layout;

    fn tiny(layout: Layout) -> ModelConfig {
        ModelConfig {
            vocab: 20,
            d_model: 12,
            n_layers: 2,
            geom: HeadGeometry {
                d_model: 12,
                n_heads: 4,
                n_kv_heads: 2,
                d_qk: 8,
                d_vo: 6,
            },
            d_ffn: 24,
            rope: RopeConfig::standard(10000.0, 8).with_layout(layout),
            max_seq: 32,
        }
    }

    fn with_lora(mut m: Model<f64>, seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (m.config.d_model, m.config.d_ffn);
        for b in &mut m.blocks {
            let mut ad = |r, c| {
                let mut a = LoraAdapter::new(r, c, 3, 6.0, &mut rng);
                a.b = a.b.map(|_| 0.05);
                a
            };
            b.lora = Some(FfnLora {
                gate: ad(d, f),
                up: ad(d, f),
                down: ad(f, d),
            });
        }
        m
    }

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk().validate().unwrap();
        let mut bad = ModelConfig::desk();
        bad.rope.dim = 16;
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        for layout in [Layout::HalfSplit, Layout::Adjacent] {
            let m = with_lora(Model::<f64>::random(tiny(layout), 1).unwrap(), 2);
            let ids: Vec<usize> = (0..17).map(|i| (i * 7 + 3) % 20).collect();
            let full = m.forward(&ids).unwrap();
            let mut cache = m.new_cache(4);
            for (p, &t) in ids.iter().enumerate() {
                let step = m.decode_step(t, &mut cache).unwrap();
                for (a, b) in step.iter().zip(full.row(p)) {
                    assert!((a - b).abs() < 1e-10, "pos {p}: {a} vs {b}");
                }
            }
            assert_eq!(cache.len(), ids.len());
        }
    }

    #[test]
    fn hidden_states_cover_every_layer() {
        let m = Model::<f32>::random(tiny(Layout::HalfSplit), 5).unwrap();
        let (logits, hidden) = m.forward_with_hidden(&[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), &[3, 20]);
        assert_eq!(hidden.len(), 3);
        assert_eq!(hidden[0].row(1), m.embed.row(2));
        assert!(matches!(m.forward(&[25]), Err(ModelError::Token { id: 25, vocab: 20 })));
        assert!(matches!(m.forward(&[0; 33]), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn lora_merge_round_trip() {
        let m = with_lora(Model::<f64>::random(tiny(Layout::HalfSplit), 1).unwrap(), 9);
        let ids = [4, 5, 6, 7, 1];
        let before = m.forward(&ids).unwrap();
        let mut merged = m.clone();
        let mut saved = Vec::new();
        for b in &mut merged.blocks {
            saved.push(b.merge_lora().unwrap().unwrap());
        }
        assert!(merged.forward(&ids).unwrap().max_abs_diff(&before) < 1e-12);
        for (b, l) in merged.blocks.iter_mut().zip(saved) {
            b.unmerge_lora(l).unwrap();
        }
        assert!(merged.forward(&ids).unwrap().max_abs_diff(&before) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fresh = LoraAdapter::<f64>::new(12, 24, 4, 8.0, &mut rng);
        assert_eq!(fresh.delta().unwrap().data().iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn generate_is_greedy_and_deterministic() {
        let m = Model::<f32>::random(tiny(Layout::HalfSplit), 4).unwrap();
        let a = m.generate(&[1, 2], 10).unwrap();
        assert_eq!(a, m.generate(&[1, 2], 10).unwrap());
        assert_eq!(a.len(), 10);
        let logits = m.forward(&[1, 2]).unwrap();
        assert_eq!(a[0], forward::argmax(logits.row(1)));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut m = with_lora(Model::<f64>::random(tiny(Layout::HalfSplit), 6).unwrap(), 7);
        // larger weights so every path carries a visible gradient
        for p in m.params_mut() {
            if p.kind != ParamKind::Norm {
                *p.tensor = p.tensor.scale(10.0);
            }
        }
        let ids = [3, 1, 4, 1, 5, 9];
        let n = m.params().len();
        // check one attention matrix, one LoRA factor and the embedding
        let picks: Vec<usize> = m
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| ["blocks.1.attn.w_k", "blocks.0.lora.down.a", "embed"].contains(&p.name.as_str()))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(picks.len(), 3);
        let inputs: Vec<Tensor<f64>> = picks.iter().map(|&i| m.params()[i].tensor.clone()).collect();
        let err = grad_check_many(
            |tape: &mut Tape<f64>, xs: &[Var]| {
                let vars_all = m.register(tape, &|_| false);
                let mut ordered = vars_all.ordered();
                for (&i, &x) in picks.iter().zip(xs) {
                    ordered[i] = x;
                }
                assert_eq!(ordered.len(), n);
                let vars = rebuild(&vars_all, &ordered);
                let out = m.forward_tape(tape, &vars, &ids[..5]).expect("forward");
                tape.cross_entropy(out.logits, &ids[1..])
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn rebuild(v: &ModelVars, ordered: &[Var]) -> ModelVars {
        let mut it = ordered.iter().copied();
        let mut next = || it.next().unwrap();
        let embed = next();
        let blocks = v
            .blocks
            .iter()
            .map(|b| {
                let attn_norm = next();
                let attention = crate::attention::AttentionVars {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                };
                let (ffn_norm, gate, up, down) = (next(), next(), next(), next());
                let lora = b.lora.map(|l| l.map(|(_, _, s)| (next(), next(), s)));
                BlockVars {
                    attn_norm,
                    attention,
                    ffn_norm,
                    gate,
                    up,
                    down,
                    lora,
                }
            })
            .collect();
        ModelVars {
            embed,
            blocks,
            final_norm: next(),
            unembed: next(),
        }
    }
}
