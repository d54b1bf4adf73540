//! Recovery training: per-layer distillation against the teacher's hidden
//! states, then end-to-end next-token or KL training. Also plain next-token
//! pretraining for producing teachers.

mod loss;
mod optim;

pub use loss::{
    kl_loss, kl_loss_tape, ntp_loss, ntp_loss_tape, stage1_loss, stage1_loss_tape, teacher_probs, teacher_trace,
    DistillTrace,
};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamW};

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::attention::AttentionError;
use crate::model::{Corpus, Model, ModelError, ModelVars, ParamKind};
use crate::numerics::{KlDirection, NumericsError, Scalar, Tape, Tensor, Var};
use crate::rope::sig9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("trace holds {states} hidden states for a {layers}-layer student")]
    Trace { states: usize, layers: usize },
    #[error("sequence of {0} tokens is too short for next-token loss")]
    ShortSequence(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("teacher and student disagree: {0}")]
    Mismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

impl TrainError {
    fn is_non_finite(&self) -> bool {
        let n = match self {
            TrainError::Numerics(n) => Some(n),
            TrainError::Model(ModelError::Numerics(n)) => Some(n),
            TrainError::Model(ModelError::Attention(AttentionError::Numerics(n))) => Some(n),
            _ => None,
        };
        matches!(n, Some(NumericsError::NonFinite { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    /// Per-layer hidden-state distillation.
    One,
    /// End-to-end next-token cross-entropy.
    TwoNtp,
    /// End-to-end KL against the teacher's next-token distribution.
    TwoKl,
    /// Next-token training of every parameter (teacher production).
    Pretrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "one",
            Stage::TwoNtp => "two_ntp",
            Stage::TwoKl => "two_kl",
            Stage::Pretrain => "pretrain",
        }
    }

    /// Parameter kinds that receive updates.
    pub fn trainable(self) -> &'static [ParamKind] {
        match self {
            Stage::Pretrain => &[
                ParamKind::Embedding,
                ParamKind::Norm,
                ParamKind::Attention,
                ParamKind::Ffn,
                ParamKind::Lora,
                ParamKind::Unembedding,
            ],
            _ => &[ParamKind::Attention, ParamKind::Lora],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Peak learning rate; cosine-annealed to 0 over `steps`.
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub adamw: AdamW,
    pub seed: u64,
    pub kl_direction: KlDirection,
    /// Worker threads for per-sequence gradients; 0 means all cores.
    /// Results do not depend on it.
    #[serde(skip)]
    pub threads: usize,
}

/// Learning rate for end-to-end training runs.
pub const TRAIN_LR: f64 = 2e-5;
/// Learning rate preset for distillation runs.
pub const DISTILL_LR: f64 = 2e-7;

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            lr: TRAIN_LR,
            batch: 8,
            steps: 100,
            adamw: AdamW::default(),
            seed: 0,
            kl_direction: KlDirection::ReferenceFirst,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || a.eps.is_nan()
            || a.eps <= 0.0
            || a.weight_decay.is_nan()
            || a.weight_decay < 0.0
        {
            return Err(TrainError::Config(format!("bad AdamW settings {a:?}")));
        }
        Ok(())
    }

    /// `key=value` echo of every setting that affects the result.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let dir = match self.kl_direction {
            KlDirection::ReferenceFirst => "teacher_student",
            KlDirection::ModelFirst => "student_teacher",
        };
        for (k, v) in [
            ("stage", self.stage.name().to_string()),
            ("lr", sig9(self.lr)),
            ("schedule", "cosine".to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("beta1", sig9(self.adamw.beta1)),
            ("beta2", sig9(self.adamw.beta2)),
            ("eps", sig9(self.adamw.eps)),
            ("weight_decay", sig9(self.adamw.weight_decay)),
            ("seed", self.seed.to_string()),
            ("kl_direction", dir.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Batch loss before this step's update.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.step, sig9(r.loss), sig9(r.lr)).unwrap();
        }
        s
    }

    /// Mean loss of consecutive `window`-step blocks (a trailing partial
    /// block is dropped).
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.rows
            .chunks_exact(window.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn head_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.rows.len());
        (k > 0).then(|| self.rows[..k].iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }

    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.rows.len());
        (k > 0).then(|| self.rows[self.rows.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }
}

type ItemResult<T> = Result<(f64, Vec<Tensor<T>>), TrainError>;

/// Loss and gradients (for the `trainable` parameter indices) of one
/// sequence, scaled by `weight`.
fn item_grads<T, F>(
    model: &Model<T>,
    kinds: &[ParamKind],
    trainable: &[usize],
    seq: &[usize],
    weight: f64,
    loss: &F,
) -> ItemResult<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ModelVars, &[usize]) -> Result<Var, TrainError>,
{
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, &|k| kinds.contains(&k));
    let l = loss(&mut tape, &vars, seq)?;
    let l = tape.scale(l, T::from_f64_lossy(weight))?;
    let value = tape.scalar(l).as_f64();
    let grads = tape.backward(l)?;
    let ordered = vars.ordered();
    let shapes = model.params();
    let out = trainable
        .iter()
        .map(|&i| {
            grads
                .get(ordered[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shapes[i].tensor.shape()))
        })
        .collect();
    Ok((value, out))
}

/// Shared optimization loop. `loss` builds one sequence's loss on a tape.
fn optimize<T, F>(model: &mut Model<T>, corpus: &Corpus, cfg: &TrainConfig, loss: F) -> Result<TrainLog, TrainError>
where
    T: Scalar,
    F: Fn(&Model<T>, &mut Tape<T>, &ModelVars, &[usize]) -> Result<Var, TrainError> + Sync,
{
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let kinds = cfg.stage.trainable();
    let trainable: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| kinds.contains(&p.kind))
        .map(|(i, _)| i)
        .collect();
    let mut state = {
        let params = model.params();
        let refs: Vec<&Tensor<T>> = trainable.iter().map(|&i| params[i].tensor).collect();
        AdamState::new(&refs)
    };
    let threads = cfg.worker_threads();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = corpus.batch(step, cfg.batch, cfg.seed).seqs;
        let total: usize = batch.iter().map(Vec::len).sum();
        let snapshot: &Model<T> = model;
        let per_item = |s: &Vec<usize>| {
            let w = s.len() as f64 / total as f64;
            item_grads(snapshot, kinds, &trainable, s, w, &|tape, vars, seq| {
                loss(snapshot, tape, vars, seq)
            })
        };
        let results: Vec<ItemResult<T>> = if threads <= 1 || batch.len() <= 1 {
            batch.iter().map(per_item).collect()
        } else {
            let mut slots: Vec<Option<ItemResult<T>>> = (0..batch.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads.min(batch.len()))
                    .map(|t| {
                        let batch = &batch;
                        let per_item = &per_item;
                        scope.spawn(move || {
                            (t..batch.len())
                                .step_by(threads)
                                .map(|i| (i, per_item(&batch[i])))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                for h in handles {
                    for (i, r) in h.join().expect("worker thread") {
                        slots[i] = Some(r);
                    }
                }
            });
            slots.into_iter().map(|s| s.expect("every item computed")).collect()
        };

        let mut loss_value = 0.0;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for r in results {
            let (v, g) = r.map_err(|e| {
                if e.is_non_finite() {
                    TrainError::Divergence {
                        step,
                        detail: e.to_string(),
                    }
                } else {
                    e
                }
            })?;
            loss_value += v;
            grads = Some(match grads {
                None => g,
                Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.add(b)).collect::<Result<_, _>>()?,
            });
        }
        if !loss_value.is_finite() {
            return Err(TrainError::Divergence {
                step,
                detail: format!("loss {loss_value}"),
            });
        }
        let grads = grads.expect("non-empty batch");
        let lr = cosine_lr(step, cfg.steps, cfg.lr);
        log.rows.push(LogRow {
            step,
            loss: loss_value,
            lr,
        });
        let mut params = model.params_mut();
        let mut targets: Vec<&mut Tensor<T>> = Vec::with_capacity(trainable.len());
        let mut next = trainable.iter().peekable();
        for (i, p) in params.iter_mut().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
                targets.push(&mut *p.tensor);
            }
        }
        adamw_step(&mut targets, &grads, &mut state, &cfg.adamw, lr);
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::Divergence {
                step,
                detail: "non-finite weights after update".into(),
            });
        }
    }
    Ok(log)
}

fn check_pair<T: Scalar>(teacher: &Model<T>, student: &Model<T>) -> Result<(), TrainError> {
    let (t, s) = (teacher.config(), student.config());
    if t.n_layers != s.n_layers || t.d_model != s.d_model || t.vocab != s.vocab {
        return Err(TrainError::Mismatch(format!(
            "teacher (L={}, d={}, V={}) vs student (L={}, d={}, V={})",
            t.n_layers, t.d_model, t.vocab, s.n_layers, s.d_model, s.vocab
        )));
    }
    Ok(())
}

fn expect_stage(cfg: &TrainConfig, allowed: &[Stage]) -> Result<(), TrainError> {
    if allowed.contains(&cfg.stage) {
        Ok(())
    } else {
        Err(TrainError::Config(format!("stage {} not valid here", cfg.stage.name())))
    }
}

/// Stage I: each student block learns to map the teacher's input of that
/// layer to the teacher's output. Attention and LoRA factors only.
pub fn run_stage1<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    expect_stage(cfg, &[Stage::One])?;
    check_pair(teacher, student)?;
    optimize(student, corpus, cfg, |m, tape, vars, seq| {
        let (_, states) = teacher.forward_with_hidden(seq)?;
        stage1_loss_tape(tape, m, vars, &states)
    })
}

/// Stage II: end-to-end next-token (`TwoNtp`) or KL (`TwoKl`) training.
pub fn run_stage2<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    expect_stage(cfg, &[Stage::TwoNtp, Stage::TwoKl])?;
    check_pair(teacher, student)?;
    match cfg.stage {
        Stage::TwoNtp => optimize(student, corpus, cfg, |m, tape, vars, seq| {
            ntp_loss_tape(tape, m, vars, seq)
        }),
        _ => {
            let dir = cfg.kl_direction;
            optimize(student, corpus, cfg, |m, tape, vars, seq| {
                kl_loss_tape(tape, m, vars, seq, teacher_probs(teacher, seq)?, dir)
            })
        }
    }
}

/// Next-token training of all parameters.
pub fn pretrain<T: Scalar>(model: &mut Model<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    expect_stage(cfg, &[Stage::Pretrain])?;
    if model.base_frozen {
        return Err(TrainError::Config(
            "model has a frozen base; pretraining would update it".into(),
        ));
    }
    optimize(model, corpus, cfg, |m, tape, vars, seq| {
        ntp_loss_tape(tape, m, vars, seq)
    })
}

#[cfg(test)]
mod tests;
