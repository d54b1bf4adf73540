use super::tensor::{matmul_into, Scalar, Tensor};
use super::NumericsError;
use crate::rope::Layout;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which argument of the KL divergence is the reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum KlDirection {
    /// `KL(reference ‖ model)`: the model is pulled to cover the reference.
    #[default]
    ReferenceFirst,
    /// `KL(model ‖ reference)`.
    ModelFirst,
}

const RMS_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Rotate {
        x: Var,
        cos: Tensor<T>,
        sin: Tensor<T>,
        layout: Layout,
        head_dim: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    KlDiv {
        logits: Var,
        reference: Tensor<T>,
        probs: Tensor<T>,
        direction: KlDirection,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation record.
///
/// Every primitive appends one node holding its output and whatever the
/// backward rule needs. `backward` walks the nodes in exact reverse order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Records a differentiable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Records a constant input; no gradient is produced for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let mut out = Tensor::zeros(&[0, 0]);
        matmul_into(self.value(a), ta, self.value(b), tb, &mut out, false)?;
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::Shape {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Row-wise RMS normalization followed by a per-column gain (`[1 × cols]`).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, NumericsError> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let cols = vx.cols();
        if vg.len() != cols {
            return Err(NumericsError::Shape {
                op: "rms_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vx.shape());
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            let inv_t = T::from_f64_lossy(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(vg.data()) {
                *o = v * inv_t * g;
            }
            inv_rms.push(inv_t);
        }
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Softmax over the last axis. With `causal`, entry `(i, j)` for `j > i`
    /// is masked out (requires a square score matrix).
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.cols() == 0 {
            return Err(NumericsError::Empty { op: "softmax_rows" });
        }
        if causal && vx.rows() != vx.cols() {
            return Err(NumericsError::Shape {
                op: "causal_softmax",
                lhs: vx.shape().to_vec(),
                rhs: vec![vx.rows(), vx.rows()],
            });
        }
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..vx.rows() {
            let visible = if causal { r + 1 } else { vx.cols() };
            softmax_into(&vx.row(r)[..visible], &mut out.row_mut(r)[..visible]);
        }
        self.push("softmax_rows", out, Op::Softmax { x }, &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let vt = self.value(table);
        let cols = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vt.rows() {
                return Err(NumericsError::Range {
                    op: "gather_rows",
                    start: id,
                    len: 1,
                    extent: vt.rows(),
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let out = self.value(x).slice_cols(start, len)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let out = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    /// Applies per-row pair rotations inside every `head_dim`-wide column
    /// block of `x`. `cos`/`sin` are `[rows × head_dim/2]`.
    pub fn rotate_pairs(
        &mut self,
        x: Var,
        cos: Tensor<T>,
        sin: Tensor<T>,
        layout: Layout,
        head_dim: usize,
    ) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        let half = head_dim / 2;
        if head_dim == 0
            || !head_dim.is_multiple_of(2)
            || !vx.cols().is_multiple_of(head_dim)
            || cos.shape() != [vx.rows(), half]
            || sin.shape() != cos.shape()
        {
            return Err(NumericsError::Shape {
                op: "rotate_pairs",
                lhs: vx.shape().to_vec(),
                rhs: cos.shape().to_vec(),
            });
        }
        let mut out = vx.clone();
        rotate_rows(&mut out, &cos, &sin, layout, head_dim, false);
        self.push(
            "rotate_pairs",
            out,
            Op::Rotate {
                x,
                cos,
                sin,
                layout,
                head_dim,
            },
            &[x],
        )
    }

    /// Mean next-token cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() || targets.is_empty() {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = Tensor::zeros(vl.shape());
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vl.cols() {
                return Err(NumericsError::Range {
                    op: "cross_entropy",
                    start: t,
                    len: 1,
                    extent: vl.cols(),
                });
            }
            let row = vl.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t].as_f64();
            for (p, &z) in probs.row_mut(r).iter_mut().zip(row) {
                *p = T::from_f64_lossy((z.as_f64() - lse).exp());
            }
        }
        let out = Tensor::scalar(T::from_f64_lossy(total / targets.len() as f64));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean per-row KL divergence between the softmax of `logits` and the
    /// fixed `reference` distribution rows.
    pub fn kl_div(&mut self, logits: Var, reference: Tensor<T>, direction: KlDirection) -> Result<Var, NumericsError> {
        let vl = self.value(logits);
        if vl.shape() != reference.shape() || vl.rows() == 0 {
            return Err(NumericsError::Shape {
                op: "kl_div",
                lhs: vl.shape().to_vec(),
                rhs: reference.shape().to_vec(),
            });
        }
        let mut probs = Tensor::zeros(vl.shape());
        let mut total = 0.0f64;
        for r in 0..vl.rows() {
            let row = vl.row(r);
            let lse = log_sum_exp(row);
            softmax_into(row, probs.row_mut(r));
            let mut acc = 0.0;
            for ((&q, &z), &pr) in probs.row(r).iter().zip(row).zip(reference.row(r)) {
                // log of the same rounded probabilities as the reference when
                // it was produced by softmax_into, so identical inputs give 0
                let log_q = if q > T::zero() {
                    q.as_f64().ln()
                } else {
                    z.as_f64() - lse
                };
                let pr = pr.as_f64();
                acc += match direction {
                    KlDirection::ReferenceFirst if pr > 0.0 => pr * (pr.ln() - log_q),
                    KlDirection::ReferenceFirst => 0.0,
                    KlDirection::ModelFirst => log_q.exp() * (log_q - pr.max(f64::MIN_POSITIVE).ln()),
                };
            }
            total += acc;
        }
        let out = Tensor::scalar(T::from_f64_lossy(total / vl.rows() as f64));
        self.push(
            "kl_div",
            out,
            Op::KlDiv {
                logits,
                reference,
                probs,
                direction,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push("sum", Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let s = vx.data().iter().map(|v| v.as_f64()).sum::<f64>() / vx.len() as f64;
        self.push("mean", Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericsError> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    // a = op(A); dA = g · op(B)ᵀ, transposed back if ta.
                    let mut ga = Tensor::zeros(&[0, 0]);
                    if ta {
                        matmul_into(vb, tb, g, true, &mut ga, false)?;
                    } else {
                        matmul_into(g, false, vb, !tb, &mut ga, false)?;
                    }
                    accumulate(grads, a, ga)?;
                }
                if self.wants(b) {
                    let mut gb = Tensor::zeros(&[0, 0]);
                    if tb {
                        matmul_into(g, true, va, ta, &mut gb, false)?;
                    } else {
                        matmul_into(va, !ta, g, false, &mut gb, false)?;
                    }
                    accumulate(grads, b, gb)?;
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone())?;
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(b) {
                    accumulate(grads, b, g.scale(-T::one()))?;
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    accumulate(grads, a, hadamard(g, vb))?;
                }
                if self.wants(b) {
                    accumulate(grads, b, hadamard(g, va))?;
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scale(s))?,
            &Op::Silu(a) => {
                let va = self.value(a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let s = sigmoid(x);
                        gy * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, a, Tensor::new(va.shape().to_vec(), data)?)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let cols = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                let mut ggain = vec![0.0f64; cols];
                for (r, inv) in inv_rms.iter().enumerate() {
                    let inv = inv.as_f64();
                    let (xr, gr) = (vx.row(r), g.row(r));
                    let mut dot = 0.0f64;
                    for c in 0..cols {
                        let u = gr[c].as_f64() * vg.data()[c].as_f64();
                        dot += u * xr[c].as_f64();
                        ggain[c] += gr[c].as_f64() * xr[c].as_f64() * inv;
                    }
                    let coef = inv * inv * inv * dot / cols as f64;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        let u = gr[c].as_f64() * vg.data()[c].as_f64();
                        *o = T::from_f64_lossy(inv * u - xr[c].as_f64() * coef);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, gx)?;
                }
                if self.wants(*gain) {
                    let gg = Tensor::new(vg.shape().to_vec(), ggain.into_iter().map(T::from_f64_lossy).collect())?;
                    accumulate(grads, *gain, gg)?;
                }
            }
            &Op::Softmax { x } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let dot = T::from_f64_lossy(dot);
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, x, gx)?;
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let mut gt = Tensor::zeros(vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            &Op::SliceCols { x, start } => {
                let vx = self.value(x);
                let mut gx = Tensor::zeros(vx.shape());
                let w = g.cols();
                for r in 0..vx.rows() {
                    gx.row_mut(r)[start..start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, x, gx)?;
            }
            &Op::SliceRows { x, start } => {
                let vx = self.value(x);
                let mut gx = Tensor::zeros(vx.shape());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, x, gx)?;
            }
            Op::Rotate {
                x,
                cos,
                sin,
                layout,
                head_dim,
            } => {
                let mut gx = g.clone();
                rotate_rows(&mut gx, cos, sin, *layout, *head_dim, true);
                accumulate(grads, *x, gx)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let up = g.data()[0].as_f64() / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] = row[t] - T::one();
                    for v in row.iter_mut() {
                        *v = T::from_f64_lossy(v.as_f64() * up);
                    }
                }
                accumulate(grads, *logits, gl)?;
            }
            Op::KlDiv {
                logits,
                reference,
                probs,
                direction,
            } => {
                let up = g.data()[0].as_f64() / probs.rows() as f64;
                let mut gl = Tensor::zeros(probs.shape());
                for r in 0..probs.rows() {
                    let (q, p) = (probs.row(r), reference.row(r));
                    match direction {
                        KlDirection::ReferenceFirst => {
                            let mass: f64 = p.iter().map(|v| v.as_f64()).sum();
                            for ((o, &qv), &pv) in gl.row_mut(r).iter_mut().zip(q).zip(p) {
                                *o = T::from_f64_lossy(up * (mass * qv.as_f64() - pv.as_f64()));
                            }
                        }
                        KlDirection::ModelFirst => {
                            let terms: Vec<f64> = q
                                .iter()
                                .zip(p)
                                .map(|(&qv, &pv)| {
                                    let qv = qv.as_f64();
                                    if qv > 0.0 {
                                        qv.ln() - pv.as_f64().max(f64::MIN_POSITIVE).ln()
                                    } else {
                                        0.0
                                    }
                                })
                                .collect();
                            let kl: f64 = q.iter().zip(&terms).map(|(&qv, t)| qv.as_f64() * t).sum();
                            for ((o, &qv), t) in gl.row_mut(r).iter_mut().zip(q).zip(&terms) {
                                *o = T::from_f64_lossy(up * qv.as_f64() * (t - kl));
                            }
                        }
                    }
                }
                accumulate(grads, *logits, gl)?;
            }
            &Op::Sum(x) => {
                let vx = self.value(x);
                accumulate(grads, x, Tensor::full(vx.shape(), g.data()[0]))?;
            }
            &Op::Mean(x) => {
                let vx = self.value(x);
                let v = T::from_f64_lossy(g.data()[0].as_f64() / vx.len() as f64);
                accumulate(grads, x, Tensor::full(vx.shape(), v))?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<(), NumericsError> {
    match &mut grads[v.0] {
        slot @ None => *slot = Some(g),
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(NumericsError::Shape {
                    op: "accumulate",
                    lhs: existing.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + x;
            }
        }
    }
    Ok(())
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("hadamard operands share a shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax of `src` written to `dst`; sums accumulate in f64.
pub fn softmax_into<T: Scalar>(src: &[T], dst: &mut [T]) {
    let m = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = 0.0f64;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - m).exp();
        total += e.as_f64();
        *d = e;
    }
    let inv = T::from_f64_lossy(1.0 / total);
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
}

/// Rotates channel pairs of every row in place; `inverse` applies `R(-x)`.
pub(crate) fn rotate_rows<T: Scalar>(
    x: &mut Tensor<T>,
    cos: &Tensor<T>,
    sin: &Tensor<T>,
    layout: Layout,
    head_dim: usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    for r in 0..x.rows() {
        let (c, s) = (cos.row(r), sin.row(r));
        for block in x.row_mut(r).chunks_exact_mut(head_dim) {
            for j in 0..half {
                let (i0, i1) = layout.pair(j, head_dim);
                let (a, b) = (block[i0], block[i1]);
                let sj = if inverse { -s[j] } else { s[j] };
                block[i0] = a * c[j] - b * sj;
                block[i1] = b * c[j] + a * sj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -5.0]]).unwrap());
        let y = tape.softmax_rows(x, false).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            assert!((v.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v.get(1, 0) - 1.0).abs() < 1e-6);
        assert!(v.get(1, 1) < 1e-6);

        let mut t32 = Tape::<f32>::new();
        let x = t32.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = t32.softmax_rows(x, false).unwrap();
        assert!((t32.value(y).get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[3, 3], 0.5));
        let y = tape.softmax_rows(x, true).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn nan_input_aborts_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_rows(&[vec![f32::NAN, 1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericsError::NonFinite { op: "matmul", .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(NumericsError::NonScalar { .. })));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let b = tape.add(a, a).unwrap();
        let c = tape.mul(b, a).unwrap();
        let s = tape.sum(c).unwrap();
        // s = 2a², ds/da = 4a
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[12.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full(&[1, 2], 1.0));
        let k = tape.constant(Tensor::full(&[1, 2], 2.0));
        let m = tape.mul(a, k).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0]);
    }
}
