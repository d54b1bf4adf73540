//! Dense rank-2 tensors and a reverse-mode tape covering every primitive the
//! decoder needs. `f32` for training; `f64` for oracles and gradient checks.

mod tape;
mod tensor;

pub(crate) use tape::sigmoid;
pub use tape::{softmax_into, Gradients, KlDirection, Tape, Var};
pub use tensor::{matmul_ex, DType, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: range {start}..{start}+{len} exceeds extent {extent}")]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("expected a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    Step(f64),
}

/// Largest relative error between tape gradients and central finite
/// differences of the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, NumericsError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
///
/// Relative error per coordinate is `|g - fd| / max(|g|, |fd|, 1e-6)`, the
/// floor keeping coordinates whose true gradient is zero from dividing by
/// rounding noise.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(NumericsError::Step(eps));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NumericsError::NonScalar {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let g = analytic.data()[i];
            let denom = g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Ok(worst)
}
