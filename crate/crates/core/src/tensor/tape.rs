//! Wengert tape: every forward operation appends a node holding its value and
//! the information its backward rule needs; `backward` replays the nodes in
//! reverse order, accumulating gradients additively.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{self, BatchNormSaved};
use super::Tensor;
use crate::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::scalar::{gemm_acc, Scalar};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// A recorded operation and whatever it saved for backward.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MulScalar {
        x: usize,
        s: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Sum(usize),
    Gelu {
        x: usize,
        cdf: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: Box<BatchNormSaved<T>>,
        training: bool,
    },
    Softmax {
        x: usize,
        tau: f64,
        axis: usize,
    },
    AdaptiveAvgPool(usize),
    AvgPoolDown {
        x: usize,
        factor: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    MatMul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Scale { .. } => "scale",
            Op::Sum(_) => "sum",
            Op::Gelu { .. } => "gelu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Softmax { .. } => "softmax",
            Op::AdaptiveAvgPool(_) => "adaptive_avg_pool",
            Op::AvgPoolDown { .. } => "avg_pool_down",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Conv { .. } => "conv3d",
            Op::MatMul(..) => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::Scale { x, .. }
            | Op::Sum(x)
            | Op::Gelu { x, .. }
            | Op::Softmax { x, .. }
            | Op::AdaptiveAvgPool(x)
            | Op::AvgPoolDown { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> Result<&'static str> {
        Ok(self.nodes[self.idx(v)?].op.name())
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::MissingTape(format!(
                "variable {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericDomain(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records an input. Gradients are only tracked for leaves with `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Add(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a.index, b.index))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s)?;
        if sv.len() != 1 {
            return Err(Error::shape(format!(
                "scalar factor has shape {:?}",
                sv.shape()
            )));
        }
        let f = sv.data()[0];
        let xv = self.value(x)?;
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * f).collect(),
        )?;
        self.push(
            t,
            Op::MulScalar {
                x: x.index,
                s: s.index,
            },
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let xv = self.value(x)?;
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * f).collect(),
        )?;
        self.push(
            t,
            Op::Scale {
                x: x.index,
                factor: f,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.index))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let (y, cdf) = kernels::gelu_with_cdf(xv.data())?;
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(t, Op::Gelu { x: x.index, cdf })
    }

    /// Batch normalization over all axes but axis 1. `running` is `(mean, var)`;
    /// in training mode it is updated in place, otherwise it is used as the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&mut [T], &mut [T]),
        training: bool,
    ) -> Result<Var> {
        let xv = self.value(x)?;
        let (g, b) = (self.value(gamma)?.data(), self.value(beta)?.data());
        let (rm, rv) = running;
        let (y, saved) = if training {
            kernels::batch_norm(xv.data(), xv.shape(), g, b, None)?
        } else {
            kernels::batch_norm(xv.data(), xv.shape(), g, b, Some((rm, rv)))?
        };
        if training {
            let n = xv.len() / xv.shape()[1];
            let unbias = if n > 1 {
                n as f64 / (n - 1) as f64
            } else {
                1.0
            };
            let m = T::from_f64(kernels::BN_MOMENTUM);
            for c in 0..rm.len() {
                rm[c] = (T::one() - m) * rm[c] + m * saved.mean[c];
                rv[c] = (T::one() - m) * rv[c] + m * saved.var[c] * T::from_f64(unbias);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(
            t,
            Op::BatchNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                saved: Box::new(saved),
                training,
            },
        )
    }

    pub fn softmax(&mut self, x: Var, tau: f64, axis: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let y = kernels::softmax_with_temperature(xv.data(), xv.shape(), tau, axis)?;
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(
            t,
            Op::Softmax {
                x: x.index,
                tau,
                axis,
            },
        )
    }

    pub fn adaptive_avg_pool3d_to_unit(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let y = kernels::adaptive_avg_pool3d_to_unit(xv.data(), xv.shape())?;
        let s = xv.shape();
        let t = Tensor::new(vec![s[0], s[1], 1, 1, 1], y)?;
        self.push(t, Op::AdaptiveAvgPool(x.index))
    }

    pub fn avg_pool_down(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let (y, shape) = kernels::avg_pool3d_down(xv.data(), xv.shape(), factor)?;
        let t = Tensor::new(shape, y)?;
        self.push(t, Op::AvgPoolDown { x: x.index, factor })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *inputs
                    .first()
                    .ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?,
            )?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v)?;
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!(
                    "concat along axis {axis} of {first:?} and {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.index].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.index).collect(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x)?.clone().reshape(shape)?;
        self.push(t, Op::Reshape(x.index))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let y = conv3d_forward(self.value(x)?, self.value(w)?, bias, spec)?;
        self.push(
            y,
            Op::Conv {
                x: x.index,
                w: w.index,
                b: b.map(|v| v.index),
                spec: *spec,
            },
        )
    }

    /// `a: m×k` times `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            false,
            T::zero(),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a.index, b.index))
    }

    /// Adds a per-channel bias (length = axis-1 extent) to `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x)?, self.value(bias)?);
        let (b, c, inner) = kernels::channel_layout(xv.shape())?;
        if bv.len() != c {
            return Err(Error::shape(format!(
                "bias of length {} for {c} channels",
                bv.len()
            )));
        }
        let mut data = xv.data().to_vec();
        for n in 0..b {
            for ch in 0..c {
                data[(n * c + ch) * inner..][..inner]
                    .iter_mut()
                    .for_each(|v| *v += bv.data()[ch]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            t,
            Op::AddBias {
                x: x.index,
                bias: bias.index,
            },
        )
    }

    /// Mean cross-entropy of `B×C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits)?;
        let (loss, probs) = kernels::cross_entropy(lv.data(), lv.shape(), targets)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::MissingTape(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads {
            tape: self.id,
            grads,
        })
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn local_grads(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                vec![
                    (*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                    (*b, g.iter().zip(x).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::MulScalar { x, s } => {
                let f = self.val(*s).data()[0];
                let xv = self.val(*x).data();
                vec![
                    (*x, g.iter().map(|&g| g * f).collect()),
                    (*s, vec![g.iter().zip(xv).map(|(&g, &x)| g * x).sum()]),
                ]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&g| g * *factor).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).len()])],
            Op::Gelu { x, cdf } => vec![(
                *x,
                kernels::gelu_backward_with_cdf(self.val(*x).data(), cdf, g),
            )],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                training,
            } => {
                let (gx, gg, gb) = kernels::batch_norm_backward(
                    self.val(*x).shape(),
                    self.val(*gamma).data(),
                    saved,
                    *training,
                    g,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Softmax { x, tau, axis } => vec![(
                *x,
                kernels::softmax_backward(node.value.data(), node.value.shape(), *tau, *axis, g),
            )],
            Op::AdaptiveAvgPool(x) => vec![(
                *x,
                kernels::adaptive_avg_pool3d_backward(self.val(*x).shape(), g),
            )],
            Op::AvgPoolDown { x, factor } => vec![(
                *x,
                kernels::avg_pool3d_down_backward(self.val(*x).shape(), *factor, g),
            )],
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    let chunk = self.val(i).shape()[*axis] * inner;
                    let mut gi = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gi.extend_from_slice(&g[o * total + offset..][..chunk]);
                    }
                    offset += chunk;
                    res.push((i, gi));
                }
                res
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Conv { x, w, b, spec } => {
                let go = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let cg = conv3d_backward(&go, self.val(*x), self.val(*w), spec)?;
                let mut res = vec![(*x, cg.grad_x.into_data()), (*w, cg.grad_w.into_data())];
                if let Some(b) = b {
                    res.push((*b, cg.grad_b.into_data()));
                }
                res
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                gemm_acc(m, n, k, g, false, bv.data(), true, T::zero(), &mut ga);
                gemm_acc(k, m, n, av.data(), true, g, false, T::zero(), &mut gb);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias { x, bias } => {
                let (b, c, inner) = kernels::channel_layout(node.value.shape())?;
                let mut gb = vec![T::zero(); c];
                for n in 0..b {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        *acc += g[(n * c + ch) * inner..][..inner]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => vec![(
                *logits,
                kernels::cross_entropy_backward(probs, self.val(*logits).shape(), targets, g[0]),
            )],
        };
        Ok(out)
    }
}

/// Gradients produced by one backward sweep, indexed by the tape's variables.
#[derive(Debug)]
pub struct Grads<T> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to a leaf, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic_losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0])
                .unwrap()
                .with_grad(),
        );
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let vals = [1.0, -2.0, 3.5, 0.0, 4.0, -1.0];
        let x = tape.leaf(Tensor::from_f64(&[6], &vals).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        for (a, b) in g.get(x).unwrap().iter().zip(vals) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.scale(x, -1.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(Tape::backward(tape, y), Err(Error::Shape(_))));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::MissingTape(_))));

        let mut other = Tape::<f64>::new();
        let foreign = other.leaf(Tensor::zeros(&[1]).with_grad());
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(foreign), Err(Error::MissingTape(_))));
    }

    #[test]
    fn pooling_backward_conserves_mass() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 2, 3, 4]).with_grad());
        let p = tape.adaptive_avg_pool3d_to_unit(x).unwrap();
        let w = tape
            .leaf(Tensor::from_f64(&[2, 3, 1, 1, 1], &[0.5, -1.0, 2.0, 3.0, 0.25, -0.75]).unwrap());
        let m = tape.mul(p, w).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        let total: f64 = g.get(x).unwrap().iter().sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1], &[1e308]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NumericDomain(_))));
    }
}
