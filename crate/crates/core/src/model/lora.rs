use rand::Rng;

use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

/// Additive low-rank update `(alpha/rank)·A·B` for an `[in × out]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` uniform in `±1/√in`, `B` zero, so the initial delta is exactly zero.
    pub fn new(rows: usize, cols: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (rows as f64).sqrt();
        let a = (0..rows * rank)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            a: Tensor::new(vec![rows, rank], a).expect("lora A shape"),
            b: Tensor::zeros(&[rank, cols]),
            rank,
            alpha,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Result<Tensor<T>, NumericsError> {
        Ok(self.a.matmul(&self.b)?.scale(T::from_f64_lossy(self.scaling())))
    }

    pub fn trainable_len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            rank: self.rank,
            alpha: self.alpha,
        }
    }
}

/// `x·W` plus the adapter path `scale·(x·A)·B` when present.
pub(crate) fn adapted_matmul<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    lora: Option<(Var, Var, f64)>,
) -> Result<Var, NumericsError> {
    let base = tape.matmul(x, w)?;
    match lora {
        None => Ok(base),
        Some((a, b, scaling)) => {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let scaled = tape.scale(xab, T::from_f64_lossy(scaling))?;
            tape.add(base, scaled)
        }
    }
}

/// Row-vector version of [`adapted_matmul`] without a tape.
pub(crate) fn adapted_matmul_plain<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    lora: Option<&LoraAdapter<T>>,
) -> Result<Tensor<T>, NumericsError> {
    let base = x.matmul(w)?;
    match lora {
        None => Ok(base),
        Some(l) => {
            let xab = x.matmul(&l.a)?.matmul(&l.b)?;
            base.add(&xab.scale(T::from_f64_lossy(l.scaling())))
        }
    }
}
