use super::lora::{adapted_matmul, adapted_matmul_plain};
use super::{Model, ModelError, ParamKind};
use crate::attention::{attend_incremental, attend_tape, AttentionVars, KvCache};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Tape handles for one decoder block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub attention: AttentionVars,
    pub ffn_norm: Var,
    pub gate: Var,
    pub up: Var,
    pub down: Var,
    /// `(A, B, scaling)` for gate, up, down.
    pub lora: Option<[(Var, Var, f64); 3]>,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

impl ModelVars {
    /// Handles in the same order as [`Model::params`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            let a = b.attention;
            out.extend([
                b.attn_norm,
                a.w_q,
                a.w_k,
                a.w_v,
                a.w_o,
                b.ffn_norm,
                b.gate,
                b.up,
                b.down,
            ]);
            if let Some(l) = &b.lora {
                for (a, b, _) in l {
                    out.extend([*a, *b]);
                }
            }
        }
        out.extend([self.final_norm, self.unembed]);
        out
    }
}

/// Logits plus the residual stream after the embedding and after each block.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `hidden[0]` is the embedding output, `hidden[l]` follows block `l`.
    pub hidden: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Puts every parameter on the tape; those whose kind passes `trainable`
    /// become gradient leaves.
    pub fn register(&self, tape: &mut Tape<T>, trainable: &dyn Fn(ParamKind) -> bool) -> ModelVars {
        let mut reg = |kind: ParamKind, t: &Tensor<T>| {
            if trainable(kind) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embed = reg(ParamKind::Embedding, &self.embed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let attn_norm = reg(ParamKind::Norm, &b.attn_norm);
            let att = &b.attention;
            let attention = AttentionVars {
                w_q: reg(ParamKind::Attention, &att.w_q),
                w_k: reg(ParamKind::Attention, &att.w_k),
                w_v: reg(ParamKind::Attention, &att.w_v),
                w_o: reg(ParamKind::Attention, &att.w_o),
            };
            let ffn_norm = reg(ParamKind::Norm, &b.ffn_norm);
            let gate = reg(ParamKind::Ffn, &b.ffn_gate);
            let up = reg(ParamKind::Ffn, &b.ffn_up);
            let down = reg(ParamKind::Ffn, &b.ffn_down);
            let lora = b.lora.as_ref().map(|l| {
                [&l.gate, &l.up, &l.down]
                    .map(|ad| (reg(ParamKind::Lora, &ad.a), reg(ParamKind::Lora, &ad.b), ad.scaling()))
            });
            blocks.push(BlockVars {
                attn_norm,
                attention,
                ffn_norm,
                gate,
                up,
                down,
                lora,
            });
        }
        let final_norm = reg(ParamKind::Norm, &self.final_norm);
        let unembed = reg(ParamKind::Unembedding, &self.unembed);
        ModelVars {
            embed,
            blocks,
            final_norm,
            unembed,
        }
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<(), ModelError> {
        let c = &self.config;
        if ids.len() > c.max_seq {
            return Err(ModelError::TooLong {
                seq: ids.len(),
                max: c.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= c.vocab) {
            return Err(ModelError::Token { id, vocab: c.vocab });
        }
        Ok(())
    }

    /// One pre-norm block: `x + attn(norm(x))`, then `+ ffn(norm(·))`.
    pub fn block_tape(&self, tape: &mut Tape<T>, vars: &BlockVars, x: Var) -> Result<Var, ModelError> {
        let c = &self.config;
        let h = tape.rms_norm(x, vars.attn_norm)?;
        let a = attend_tape(tape, h, &vars.attention, &c.geom, &self.table, c.rope.layout)?;
        let x = tape.add(x, a)?;
        let h = tape.rms_norm(x, vars.ffn_norm)?;
        let [lg, lu, ld] = match vars.lora {
            Some(l) => l.map(Some),
            None => [None; 3],
        };
        let g = adapted_matmul(tape, h, vars.gate, lg)?;
        let g = tape.silu(g)?;
        let u = adapted_matmul(tape, h, vars.up, lu)?;
        let gu = tape.mul(g, u)?;
        let f = adapted_matmul(tape, gu, vars.down, ld)?;
        Ok(tape.add(x, f)?)
    }

    /// Final norm and unembedding of a residual stream.
    pub fn head_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, x: Var) -> Result<Var, ModelError> {
        let h = tape.rms_norm(x, vars.final_norm)?;
        Ok(tape.matmul(h, vars.unembed)?)
    }

    /// Full forward over one sequence (positions `0..ids.len()`).
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        ids: &[usize],
    ) -> Result<ForwardOutput, ModelError> {
        self.check_tokens(ids)?;
        let mut x = tape.gather_rows(vars.embed, ids)?;
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        hidden.push(x);
        for bv in &vars.blocks {
            x = self.block_tape(tape, bv, x)?;
            hidden.push(x);
        }
        let logits = self.head_tape(tape, vars, x)?;
        Ok(ForwardOutput { logits, hidden })
    }

    /// `[seq × vocab]` logits and the `L + 1` hidden states, without gradients.
    pub fn forward_with_hidden(&self, ids: &[usize]) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, &|_| false);
        let out = self.forward_tape(&mut tape, &vars, ids)?;
        let hidden = out.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        Ok((tape.value(out.logits).clone(), hidden))
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_with_hidden(ids)?.0)
    }

    pub fn new_cache(&self, capacity: usize) -> KvCache<T> {
        KvCache::new(&self.config.geom, self.config.n_layers, capacity)
    }

    /// Logits for `token` at position `cache.len()`, extending the cache.
    pub fn decode_step(&self, token: usize, cache: &mut KvCache<T>) -> Result<Vec<T>, ModelError> {
        let c = &self.config;
        let pos = cache.len();
        self.check_tokens(&[token])?;
        if pos >= c.max_seq {
            return Err(ModelError::TooLong {
                seq: pos + 1,
                max: c.max_seq,
            });
        }
        let mut x = Tensor::new(vec![1, c.d_model], self.embed.row(token).to_vec())?;
        for (l, b) in self.blocks.iter().enumerate() {
            let h = rms_norm_row(x.data(), b.attn_norm.data());
            let a = attend_incremental(
                &h,
                cache.layer_mut(l),
                &b.attention,
                &c.geom,
                &self.table,
                c.rope.layout,
                pos,
            )?;
            for (xv, av) in x.data_mut().iter_mut().zip(a) {
                *xv = *xv + av;
            }
            let h = Tensor::new(vec![1, c.d_model], rms_norm_row(x.data(), b.ffn_norm.data()))?;
            let lora = b.lora.as_ref();
            let g = adapted_matmul_plain(&h, &b.ffn_gate, lora.map(|l| &l.gate))?;
            let u = adapted_matmul_plain(&h, &b.ffn_up, lora.map(|l| &l.up))?;
            let gu: Vec<T> = g.data().iter().zip(u.data()).map(|(&g, &u)| silu(g) * u).collect();
            let gu = Tensor::new(vec![1, c.d_ffn], gu)?;
            let f = adapted_matmul_plain(&gu, &b.ffn_down, lora.map(|l| &l.down))?;
            x = x.add(&f)?;
        }
        let h = Tensor::new(vec![1, c.d_model], rms_norm_row(x.data(), self.final_norm.data()))?;
        let logits = h.matmul(&self.unembed)?;
        logits.check_finite("decode_step")?;
        Ok(logits.into_data())
    }

    /// Greedy continuation of `prompt` by `n` tokens through the KV cache.
    pub fn generate(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let total = prompt.len() + n;
        if total > self.config.max_seq {
            return Err(ModelError::TooLong {
                seq: total,
                max: self.config.max_seq,
            });
        }
        let mut cache = self.new_cache(total);
        let mut out = Vec::with_capacity(n);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.decode_step(t, &mut cache)?;
        }
        for i in 0..n {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < n {
                logits = self.decode_step(next, &mut cache)?;
            }
        }
        Ok(out)
    }

    /// Mean next-token negative log-likelihood (nats) over all predicted
    /// positions of `seqs`.
    pub fn log_perplexity(&self, seqs: &[Vec<usize>]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in seqs.iter().filter(|s| s.len() >= 2) {
            let logits = self.forward(&s[..s.len() - 1])?;
            for (r, &t) in s[1..].iter().enumerate() {
                let row = logits.row(r);
                let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
                total += lse - row[t].as_f64();
                count += 1;
            }
        }
        if count == 0 {
            return Err(ModelError::EmptyCorpus);
        }
        Ok(total / count as f64)
    }
}

fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T]) -> Vec<T> {
    let ms = x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len() as f64;
    let inv = T::from_f64_lossy(1.0 / (ms + 1e-8).sqrt());
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn silu<T: Scalar>(x: T) -> T {
    x * crate::numerics::sigmoid(x)
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
