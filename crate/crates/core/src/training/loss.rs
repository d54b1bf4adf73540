use super::TrainError;
use crate::model::{Model, ModelVars};
use crate::numerics::{KlDirection, Scalar, Tape, Tensor, Var};

/// Teacher hidden states `H^(0..L)` for each sequence of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTrace<T> {
    pub states: Vec<Vec<Tensor<T>>>,
}

pub fn teacher_trace<T: Scalar>(teacher: &Model<T>, batch: &[Vec<usize>]) -> Result<DistillTrace<T>, TrainError> {
    let states = batch
        .iter()
        .map(|s| teacher.forward_with_hidden(s).map(|(_, h)| h))
        .collect::<Result<_, _>>()?;
    Ok(DistillTrace { states })
}

/// Per-layer mean squared error of the student's blocks, each fed the
/// teacher's input to that layer, averaged over layers.
pub fn stage1_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student: &Model<T>,
    vars: &ModelVars,
    states: &[Tensor<T>],
) -> Result<Var, TrainError> {
    let layers = student.blocks.len();
    if states.len() != layers + 1 {
        return Err(TrainError::Trace {
            states: states.len(),
            layers,
        });
    }
    let mut total: Option<Var> = None;
    for (l, bv) in vars.blocks.iter().enumerate() {
        let input = tape.constant(states[l].clone());
        let target = tape.constant(states[l + 1].clone());
        let out = student.block_tape(tape, bv, input)?;
        let mse = tape.mse(out, target)?;
        total = Some(match total {
            None => mse,
            Some(acc) => tape.add(acc, mse)?,
        });
    }
    let total = total.ok_or(TrainError::Trace {
        states: states.len(),
        layers,
    })?;
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / layers as f64))?)
}

/// Mean next-token cross-entropy over the sequence's predicted positions.
pub fn ntp_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student: &Model<T>,
    vars: &ModelVars,
    seq: &[usize],
) -> Result<Var, TrainError> {
    if seq.len() < 2 {
        return Err(TrainError::ShortSequence(seq.len()));
    }
    let out = student.forward_tape(tape, vars, &seq[..seq.len() - 1])?;
    Ok(tape.cross_entropy(out.logits, &seq[1..])?)
}

/// Teacher next-token distributions at every position of `seq`.
pub fn teacher_probs<T: Scalar>(teacher: &Model<T>, seq: &[usize]) -> Result<Tensor<T>, TrainError> {
    let logits = teacher.forward(seq)?;
    let mut probs = Tensor::zeros(logits.shape());
    for r in 0..logits.rows() {
        crate::numerics::softmax_into(logits.row(r), probs.row_mut(r));
    }
    Ok(probs)
}

/// Mean per-position KL between teacher and student distributions.
pub fn kl_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student: &Model<T>,
    vars: &ModelVars,
    seq: &[usize],
    teacher_probs: Tensor<T>,
    direction: KlDirection,
) -> Result<Var, TrainError> {
    let out = student.forward_tape(tape, vars, seq)?;
    Ok(tape.kl_div(out.logits, teacher_probs, direction)?)
}

fn frozen<T: Scalar>(model: &Model<T>) -> (Tape<T>, ModelVars) {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, &|_| false);
    (tape, vars)
}

/// Stage-I loss of `student` against a trace, averaged over sequences.
pub fn stage1_loss<T: Scalar>(trace: &DistillTrace<T>, student: &Model<T>) -> Result<f64, TrainError> {
    if trace.states.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for states in &trace.states {
        let (mut tape, vars) = frozen(student);
        let l = stage1_loss_tape(&mut tape, student, &vars, states)?;
        total += tape.scalar(l).as_f64();
    }
    Ok(total / trace.states.len() as f64)
}

/// Cross-entropy averaged over every predicted position of every sequence.
pub fn ntp_loss<T: Scalar>(student: &Model<T>, batch: &[Vec<usize>]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch {
        let (mut tape, vars) = frozen(student);
        let l = ntp_loss_tape(&mut tape, student, &vars, s)?;
        total += tape.scalar(l).as_f64() * (s.len() - 1) as f64;
        count += s.len() - 1;
    }
    if count == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// KL averaged over every position of every sequence.
pub fn kl_loss<T: Scalar>(
    student: &Model<T>,
    teacher: &Model<T>,
    batch: &[Vec<usize>],
    direction: KlDirection,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch {
        let (mut tape, vars) = frozen(student);
        let l = kl_loss_tape(&mut tape, student, &vars, s, teacher_probs(teacher, s)?, direction)?;
        total += tape.scalar(l).as_f64() * s.len() as f64;
        count += s.len();
    }
    if count == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(total / count as f64)
}
