use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Element, Tensor};
use super::{nan_checks_enabled, AutodiffError, DropoutRng};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only valid for the tape that created them and only until the
/// next [`Tape::backward`] or [`Tape::clear`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    MaskKeys {
        a: usize,
        masked: Vec<bool>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        axis: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Dropout {
        a: usize,
        scale: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Transpose {
        a: usize,
        axes: (usize, usize),
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::MaskKeys { .. } => "mask_keys",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order; [`Tape::backward`] walks it once from the end.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
    nan_check: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
    generation: u64,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf created with [`Tape::param`]. Leaves without a path
    /// to the loss get zeros.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.remove(&var.index)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Number of times `b` repeats inside `a` when `b`'s shape is a suffix of `a`'s.
fn suffix_repeats(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

fn swap_axes<T: Copy>(data: &[T], shape: &[usize], axes: (usize, usize)) -> (Vec<usize>, Vec<T>) {
    let (i, j) = if axes.0 <= axes.1 { axes } else { (axes.1, axes.0) };
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    if i == j || data.is_empty() {
        return (out_shape, data.to_vec());
    }
    // View as [pre, shape[i], mid, shape[j], post] and swap the two axes.
    let pre: usize = shape[..i].iter().product();
    let a = shape[i];
    let mid: usize = shape[i + 1..j].iter().product();
    let b = shape[j];
    let post: usize = shape[j + 1..].iter().product();
    let mut out = Vec::with_capacity(data.len());
    for p in 0..pre {
        for jb in 0..b {
            for m in 0..mid {
                for ia in 0..a {
                    let base = (((p * a + ia) * mid + m) * b + jb) * post;
                    out.extend_from_slice(&data[base..base + post]);
                }
            }
        }
    }
    (out_shape, out)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: next_generation(),
            nan_check: nan_checks_enabled(),
        }
    }

    /// Forces the non-finite check on or off regardless of the environment.
    pub fn with_nan_check(mut self, enabled: bool) -> Self {
        self.nan_check = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; outstanding handles become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation = next_generation();
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn index(&self, var: Var) -> Result<usize, AutodiffError> {
        if var.generation != self.generation || var.index >= self.nodes.len() {
            return Err(AutodiffError::StaleVar);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>, AutodiffError> {
        let i = self.index(var)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, var: Var) -> Result<&[usize], AutodiffError> {
        Ok(self.value(var)?.shape())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var, AutodiffError> {
        if self.nan_check {
            let allow_neg_inf = matches!(op, Op::MaskKeys { .. });
            let bad = value
                .data()
                .iter()
                .any(|v| v.is_nan() || (v.is_infinite() && !(allow_neg_inf && *v < T::zero())));
            if bad {
                return Err(AutodiffError::NonFinite { op: op.name() });
            }
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// `a · b` where `a` is `[..., m, k]` and `b` is a `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[ia].value.numel() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            (k as isize, 1),
            self.nodes[ib].value.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a: ia, b: ib },
            &[ia, ib],
        )
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]` when
    /// `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(AutodiffError::shape("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for (gi, chunk) in out.chunks_mut((m * n).max(1)).enumerate().take(g) {
            T::gemm(
                m,
                k,
                n,
                &da[gi * m * k..(gi + 1) * m * k],
                (k as isize, 1),
                &db[gi * k * n..(gi + 1) * k * n],
                b_strides,
                chunk,
                false,
            );
        }
        self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a: ia, b: ib, trans_b },
            &[ia, ib],
        )
    }

    /// Elementwise sum; `b` may be broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y)
            .and_then(|(value, ia, ib)| self.push(value, Op::Add { a: ia, b: ib }, &[ia, ib]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y)
            .and_then(|(value, ia, ib)| self.push(value, Op::Mul { a: ia, b: ib }, &[ia, ib]))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize, usize), AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if suffix_repeats(va.shape(), vb.shape()).is_none() {
            return Err(AutodiffError::shape(name, va.shape(), vb.shape()));
        }
        let width = vb.numel().max(1);
        let out: Vec<T> = va
            .data()
            .chunks(width)
            .flat_map(|row| row.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((Tensor::from_parts(va.shape().to_vec(), out), ia, ib))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let out = v.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Scale { a: ia, factor }, &[ia])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        if axis >= v.shape().len() {
            return Err(AutodiffError::Axis {
                op: "softmax",
                axis,
                rank: v.shape().len(),
            });
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    total = total + e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / total;
                }
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Softmax { a: ia, axis }, &[ia])
    }

    /// Sets attention scores `[b·heads, queries, keys]` to `-inf` where the key
    /// position is invalid; `key_valid` is `[b, keys]`.
    pub fn mask_keys(&mut self, scores: Var, key_valid: &[bool], heads: usize) -> Result<Var, AutodiffError> {
        let ia = self.index(scores)?;
        let v = &self.nodes[ia].value;
        let s = v.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) || key_valid.len() != (s[0] / heads) * s[2] {
            return Err(AutodiffError::shape("mask_keys", s, &[key_valid.len()]));
        }
        let (g, q, k) = (s[0], s[1], s[2]);
        let mut out = v.data().to_vec();
        let mut masked = vec![false; out.len()];
        for gi in 0..g {
            let valid = &key_valid[(gi / heads) * k..(gi / heads + 1) * k];
            for qi in 0..q {
                let base = (gi * q + qi) * k;
                for (ki, &ok) in valid.iter().enumerate() {
                    if !ok {
                        out[base + ki] = T::neg_infinity();
                        masked[base + ki] = true;
                    }
                }
            }
        }
        let value = Tensor::from_parts(s.to_vec(), out);
        self.push(value, Op::MaskKeys { a: ia, masked }, &[ia])
    }

    /// Normalizes along `axis` to zero mean and unit (population) variance,
    /// then applies `gain` and `bias` (both shaped `[shape[axis]]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: T) -> Result<Var, AutodiffError> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let v = &self.nodes[ix].value;
        if axis >= v.shape().len() {
            return Err(AutodiffError::Axis {
                op: "layer_norm",
                axis,
                rank: v.shape().len(),
            });
        }
        let len = v.shape()[axis];
        for &ip in &[ig, ib] {
            let s = self.nodes[ip].value.shape();
            if s != [len] {
                return Err(AutodiffError::shape("layer_norm", v.shape(), s));
            }
        }
        let (outer, _, inner) = split_axis(v.shape(), axis);
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let data = v.data();
        let n = T::from_f64(len as f64);
        let mut out = vec![T::zero(); data.len()];
        let mut xhat = vec![T::zero(); data.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| data[at(i)]).sum::<T>() / n;
                let var = (0..len).map(|i| (data[at(i)] - mean).powi(2)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[o * inner + j] = inv;
                for i in 0..len {
                    let h = (data[at(i)] - mean) * inv;
                    xhat[at(i)] = h;
                    out[at(i)] = h * g[i] + b[i];
                }
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                axis,
                xhat,
                inv_std,
            },
            &[ix, ig, ib],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let out = v
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Gelu { a: ia }, &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let out = v.data().iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Relu { a: ia }, &[ia])
    }

    /// Inverted dropout: each element is kept with probability `1 - rate` and
    /// scaled by `1 / (1 - rate)`. A zero rate is the identity and draws nothing
    /// from `rng`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut DropoutRng) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::DropoutRate(rate));
        }
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let scale: Vec<T> = if rate == 0.0 {
            vec![T::one(); v.numel()]
        } else {
            (0..v.numel())
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                .collect()
        };
        let out = v.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Dropout { a: ia, scale }, &[ia])
    }

    /// Gathers rows of a `[rows, width]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let it = self.index(table)?;
        let v = &self.nodes[it].value;
        let s = v.shape();
        if s.len() != 2 {
            return Err(AutodiffError::shape("embedding_lookup", s, &[ids.len()]));
        }
        let (rows, width) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: id, len: rows });
            }
            out.extend_from_slice(&v.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::from_parts(vec![ids.len(), width], out);
        self.push(
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            &[it],
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, axis0: usize, axis1: usize) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let rank = v.shape().len();
        if axis0 >= rank || axis1 >= rank {
            return Err(AutodiffError::Axis {
                op: "transpose",
                axis: axis0.max(axis1),
                rank,
            });
        }
        let (shape, data) = swap_axes(v.data(), v.shape(), (axis0, axis1));
        let value = Tensor::from_parts(shape, data);
        self.push(
            value,
            Op::Transpose {
                a: ia,
                axes: (axis0, axis1),
            },
            &[ia],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AutodiffError::shape("reshape", v.shape(), shape));
        }
        let value = v.clone().with_shape(shape.to_vec());
        self.push(value, Op::Reshape { a: ia }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let total = self.nodes[ia].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { a: ia }, &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        if v.numel() == 0 {
            return Err(AutodiffError::shape("mean", v.shape(), &[1]));
        }
        let total: T = v.data().iter().copied().sum();
        let mean = total / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(mean), Op::Mean { a: ia }, &[ia])
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let il = self.index(logits)?;
        let v = &self.nodes[il].value;
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(AutodiffError::shape("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        let mut probs = vec![T::zero(); v.numel()];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(AutodiffError::IndexOutOfRange { index: label, len: c });
            }
            let row = &v.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            for (i, &x) in row.iter().enumerate() {
                probs[r * c + i] = (x - log_z).exp();
            }
            loss = loss + (log_z - row[label]);
        }
        let loss = loss / T::from_f64(labels.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            &[il],
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf made
    /// with [`Tape::param`] and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let il = self.index(loss)?;
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(AutodiffError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let generation = self.generation;
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(i, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        self.clear();
        Ok(Gradients { grads: out, generation })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k.max(1);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), &mut da, false);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, va.data(), (1, k as isize), g, (n as isize, 1), &mut db, false);
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                if wants(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    // B is [k, n] (or stored [n, k]); dA = dC · Bᵀ
                    let b_t = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for gi in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            (n as isize, 1),
                            &vb.data()[gi * k * n..(gi + 1) * k * n],
                            b_t,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for gi in 0..bs {
                        let ga = &va.data()[gi * m * k..(gi + 1) * m * k];
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            T::gemm(n, m, k, gc, (1, n as isize), ga, (k as isize, 1), out, false);
                        } else {
                            // dB[k, n] = Aᵀ · dC
                            T::gemm(k, m, n, ga, (1, k as isize), gc, (n as isize, 1), out, false);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    let width = nodes[*b].value.numel().max(1);
                    accumulate(grads, *b, reduce_rows(g, width));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                let width = vb.len().max(1);
                if wants(*a) {
                    let da = g.iter().enumerate().map(|(j, &gj)| gj * vb[j % width]).collect();
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let prod: Vec<T> = g.iter().zip(va).map(|(&gj, &x)| gj * x).collect();
                    accumulate(grads, *b, reduce_rows(&prod, width));
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().map(|&x| x * *factor).collect());
                }
            }
            Op::Softmax { a, axis } => {
                if wants(*a) {
                    let y = nodes[i].value.data();
                    let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + j;
                            let dot: T = (0..len).map(|t| y[at(t)] * g[at(t)]).sum();
                            for t in 0..len {
                                dx[at(t)] = y[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::MaskKeys { a, masked } => {
                if wants(*a) {
                    let dx = g
                        .iter()
                        .zip(masked)
                        .map(|(&x, &m)| if m { T::zero() } else { x })
                        .collect();
                    accumulate(grads, *a, dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let shape = nodes[*x].value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let gv = nodes[*gain].value.data();
                let n = T::from_f64(len as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgain = vec![T::zero(); len];
                let mut dbias = vec![T::zero(); len];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + j;
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for t in 0..len {
                            let dh = g[at(t)] * gv[t];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * xhat[at(t)];
                            dgain[t] = dgain[t] + g[at(t)] * xhat[at(t)];
                            dbias[t] = dbias[t] + g[at(t)];
                        }
                        let inv = inv_std[o * inner + j];
                        for t in 0..len {
                            let dh = g[at(t)] * gv[t];
                            dx[at(t)] = inv / n * (n * dh - sum_d - xhat[at(t)] * sum_dh);
                        }
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if wants(*bias) {
                    accumulate(grads, *bias, dbias);
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let dx = nodes[*a]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let d = half * (T::one() + t)
                                + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            gi * d
                        })
                        .collect();
                    accumulate(grads, *a, dx);
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let dx = nodes[*a]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(grads, *a, dx);
                }
            }
            Op::Dropout { a, scale } => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(scale).map(|(&x, &s)| x * s).collect());
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let tv = &nodes[*table].value;
                    let width = tv.shape()[1];
                    let mut dt = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        let dst = &mut dt[id * width..(id + 1) * width];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Transpose { a, axes } => {
                if wants(*a) {
                    let (_, dx) = swap_axes(g, nodes[i].value.shape(), *axes);
                    accumulate(grads, *a, dx);
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    accumulate(grads, *a, vec![g[0]; nodes[*a].value.numel()]);
                }
            }
            Op::Mean { a } => {
                if wants(*a) {
                    let n = nodes[*a].value.numel();
                    let v = g[0] / T::from_f64(n as f64);
                    accumulate(grads, *a, vec![v; n]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let c = nodes[*logits].value.shape()[1];
                    let scale = g[0] / T::from_f64(labels.len() as f64);
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        dx[r * c + label] = dx[r * c + label] - scale;
                    }
                    accumulate(grads, *logits, dx);
                }
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], index: usize, delta: Vec<T>) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn reduce_rows<T: Element>(data: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in data.chunks(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

fn next_generation() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}
