//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! the backward sweep is a single reverse walk over the tape.
//!
//! Activations are 2-D (`rows × features`); sequence batches are flattened
//! to `(batch · length) × d_model` and attention receives the batch layout
//! through [`AttentionSpec`].

use rand::Rng;

use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch layout and masking for a multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// `batch × k_len`; `false` marks padded keys.
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddConst {
        x: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Embedding {
        table: ParamId,
        table_shape: [usize; 2],
        ids: Vec<u32>,
        overridden: Vec<bool>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        smoothing: T,
        norm: T,
        probs: Vec<T>,
    },
    SqDist {
        a: Var,
        b: Var,
        weights: Vec<T>,
        norm: T,
    },
    BceLogits {
        logits: Var,
        labels: Vec<T>,
        weights: Vec<T>,
        norm: T,
    },
    Sum {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// Sum of squared gradient entries.
    pub fn sq_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|x| {
                let x = x.to_f64_lossy();
                x * x
            })
            .sum()
    }

    /// Add another replica's gradients (data-parallel reduction).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }
}

/// A computation tape. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    store_tag: Option<u64>,
}

fn check_2d<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store_tag: None,
        }
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

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities (`batch × heads × q_len × k_len`) saved by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn bind_store(&mut self, store: &ParamStore<T>) {
        match self.store_tag {
            None => self.store_tag = Some(store.tag()),
            Some(tag) => assert_eq!(
                tag,
                store.tag(),
                "a graph may only draw parameters from one store"
            ),
        }
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free-standing leaf, optionally tracked for gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `v` cut off from the backward pass.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.bind_store(store);
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (k2, n) = check_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            T::zero(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// Adds `bias` (length `n`) to every row of `x: m×n`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("rows of {n} vs bias {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// Linear map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// `x + c` for a constant `c`; gradient passes straight through.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddConst { x }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > T::zero() { *v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "features {n}, gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let rows = xv.rows();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); rows * n];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape().to_vec());
        for (orow, hrow) in out.data_mut().chunks_mut(n).zip(xhat.chunks(n)) {
            for j in 0..n {
                orow[j] = hrow[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    /// With `p == 0` this is the identity and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let numel = self.value(x).numel();
        let mask: Vec<T> = (0..numel)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Scaled dot-product multi-head attention over projected `q`, `k`, `v`.
    ///
    /// `q` is `(batch · q_len) × d`, `k` and `v` are `(batch · k_len) × d`.
    /// Masked scores get probability exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let d = self.value(q).cols();
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            ..
        } = spec;
        let bad = |what: String| Err(Error::shape("attention", what));
        if heads == 0 || !d.is_multiple_of(heads) {
            return bad(format!("d_model {d} not divisible by {heads} heads"));
        }
        if self.value(q).shape() != [batch * q_len, d] {
            return bad(format!(
                "q {:?}, expected [{}, {d}]",
                self.value(q).shape(),
                batch * q_len
            ));
        }
        for (name, t) in [("k", k), ("v", v)] {
            if self.value(t).shape() != [batch * k_len, d] {
                return bad(format!(
                    "{name} {:?}, expected [{}, {d}]",
                    self.value(t).shape(),
                    batch * k_len
                ));
            }
        }
        if spec.key_mask.len() != batch * k_len {
            return bad(format!(
                "key mask has {} entries, expected {}",
                spec.key_mask.len(),
                batch * k_len
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = Tensor::zeros([batch * q_len, d]);
        let od = out.data_mut();
        let mut scores = vec![T::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..k_len {
                        let allowed = spec.key_mask[b * k_len + j] && !(causal && j > i);
                        scores[j] = if allowed {
                            let krow = &kd[(b * k_len + j) * d + off..][..dh];
                            let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                            if s > max {
                                max = s;
                            }
                            s
                        } else {
                            T::neg_infinity()
                        };
                    }
                    let prow = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut total = T::zero();
                    for j in 0..k_len {
                        let p = if scores[j] == T::neg_infinity() {
                            T::zero()
                        } else {
                            (scores[j] - max).exp()
                        };
                        prow[j] = p;
                        total += p;
                    }
                    let orow = &mut od[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        prow[j] /= total;
                        let p = prow[j];
                        if p != T::zero() {
                            let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup into a parameter table. Rows listed in `overrides`
    /// (`(flat position, vector)`) take the given constant vector instead and
    /// send no gradient to the table.
    pub fn embedding(
        &mut self,
        store: &ParamStore<T>,
        table: ParamId,
        ids: &[u32],
        overrides: &[(usize, Vec<T>)],
    ) -> Result<Var> {
        self.bind_store(store);
        let tv = store.get(table);
        let (rows, d) = check_2d("embedding", tv)?;
        let mut out = Tensor::zeros([ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= rows {
                return Err(Error::IdOutOfRange { id, rows });
            }
            out.row_mut(r).copy_from_slice(tv.row(id as usize));
        }
        let mut overridden = vec![false; ids.len()];
        for (pos, vec) in overrides {
            if *pos >= ids.len() || vec.len() != d {
                return Err(Error::shape(
                    "embedding",
                    format!(
                        "override at {pos} with {} dims for {} rows of {d}",
                        vec.len(),
                        ids.len()
                    ),
                ));
            }
            out.row_mut(*pos).copy_from_slice(vec);
            overridden[*pos] = true;
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                table_shape: [rows, d],
                ids: ids.to_vec(),
                overridden,
            },
            true,
        ))
    }

    /// Numerically stable row-wise softmax over the last dim.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x }, rg)
    }

    /// Weighted mean token cross-entropy of `logits: n×V` against `targets`.
    ///
    /// Rows with zero weight (padding) contribute nothing. With label
    /// smoothing `eps` the target distribution is `(1-eps)·onehot + eps/V`.
    /// The result is divided by the total weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[T],
        smoothing: T,
    ) -> Result<Var> {
        let (n, vocab) = check_2d("cross_entropy", self.value(logits))?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{n} rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::IdOutOfRange { id: t, rows: vocab });
        }
        let norm = weights.iter().copied().sum::<T>();
        let vf = T::from_usize(vocab).unwrap();
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            if weights[r] != T::zero() {
                let nll = lse - row[targets[r] as usize];
                let loss = if smoothing != T::zero() {
                    let mean_nll = lse - row.iter().copied().sum::<T>() / vf;
                    (T::one() - smoothing) * nll + smoothing * mean_nll
                } else {
                    nll
                };
                total += weights[r] * loss;
            }
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let value = if norm > T::zero() {
            total / norm
        } else {
            T::zero()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                norm,
                probs,
            },
            rg,
        ))
    }

    /// `Σ_r w_r · ||a_r − b_r||² / norm` over matching rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var, weights: &[T], norm: T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rows() != weights.len() {
            return Err(Error::shape(
                "sq_dist",
                format!(
                    "{:?} vs {:?} with {} weights",
                    av.shape(),
                    bv.shape(),
                    weights.len()
                ),
            ));
        }
        let mut total = T::zero();
        for (r, &w) in weights.iter().enumerate() {
            if w != T::zero() {
                let s = av
                    .row(r)
                    .iter()
                    .zip(bv.row(r))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>();
                total += w * s;
            }
        }
        let value = if norm > T::zero() {
            total / norm
        } else {
            T::zero()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SqDist {
                a,
                b,
                weights: weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// Weighted binary cross-entropy on logits `n×1`:
    /// `Σ_r w_r · (softplus(z_r) − y_r z_r) / norm`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[T],
        weights: &[T],
        norm: T,
    ) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() || labels.len() != weights.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!(
                    "{:?} logits, {} labels, {} weights",
                    z.shape(),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let mut total = T::zero();
        for ((&zi, &y), &w) in z.data().iter().zip(labels).zip(weights) {
            if w != T::zero() {
                total += w * (softplus(zi) - y * zi);
            }
        }
        let value = if norm > T::zero() {
            total / norm
        } else {
            T::zero()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = T::from_usize(av.numel().max(1)).unwrap();
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, rg))
    }

    /// `Σ_i w_i · s_i` over scalars, accumulated left to right from zero.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {:?}", t.shape()),
                ));
            }
            acc += w * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaves tracked for gradients end
    /// up with `dloss/dleaf` (see [`Graph::grad`]); parameter gradients are
    /// returned. Running it again recomputes from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = Vec::new();
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut pgrads);
            self.nodes[i].grad = Some(g);
        }
        Ok(Gradients { grads: pgrads })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        pgrads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = param_slot(pgrads, *id, node.value.shape());
                slot.add_assign(g);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let nn = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    T::gemm(
                        m,
                        nn,
                        k,
                        gd,
                        false,
                        self.value(*b).data(),
                        true,
                        ga.data_mut(),
                        T::one(),
                    );
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    T::gemm(
                        k,
                        m,
                        nn,
                        self.value(*a).data(),
                        true,
                        gd,
                        false,
                        gb.data_mut(),
                        T::one(),
                    );
                }
            }
            Op::AddBias { x, bias } => {
                if self.requires_grad(*x) {
                    self.slot(grads, *x).add_assign(g);
                }
                if self.requires_grad(*bias) {
                    let n = g.cols();
                    let gb = self.slot(grads, *bias);
                    for row in gd.chunks(n) {
                        for (o, &r) in gb.data_mut().iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        self.slot(grads, v).add_assign(g);
                    }
                }
            }
            Op::AddConst { x } => {
                if self.requires_grad(*x) {
                    self.slot(grads, *x).add_assign(g);
                }
            }
            Op::Scale { x, s } => {
                if self.requires_grad(*x) {
                    let gx = self.slot(grads, *x);
                    for (o, &r) in gx.data_mut().iter_mut().zip(gd) {
                        *o += *s * r;
                    }
                }
            }
            Op::Relu { x } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data();
                    let gx = self.slot(grads, *x);
                    for ((o, &r), &xi) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if xi > T::zero() {
                            *o += r;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let nf = T::from_usize(n).unwrap();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let gg = self.slot(grads, *gamma);
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg.data_mut()[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = self.slot(grads, *beta);
                    for grow in gd.chunks(n) {
                        for (b, &v) in gb.data_mut().iter_mut().zip(grow) {
                            *b += v;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = self.slot(grads, *x);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, (grow, hrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hrow[j];
                        }
                        let k = inv_std[r] / nf;
                        let orow = gx.row_mut(r);
                        for j in 0..n {
                            orow[j] += k * (nf * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires_grad(*x) {
                    let gx = self.slot(grads, *x);
                    for ((o, &r), &m) in gx.data_mut().iter_mut().zip(gd).zip(mask) {
                        *o += r * m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.backprop_attention(*q, *k, *v, spec, probs, gd, grads),
            Op::Embedding {
                table,
                table_shape,
                ids,
                overridden,
            } => {
                let d = table_shape[1];
                let slot = param_slot(pgrads, *table, table_shape);
                for (r, &id) in ids.iter().enumerate() {
                    if overridden[r] {
                        continue;
                    }
                    let dst = &mut slot.data_mut()[id as usize * d..][..d];
                    for (o, &x) in dst.iter_mut().zip(&gd[r * d..][..d]) {
                        *o += x;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.requires_grad(*x) {
                    let y = &node.value;
                    let n = y.cols();
                    let gx = self.slot(grads, *x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * n..][..n];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                norm,
                probs,
            } => {
                if self.requires_grad(*logits) && *norm > T::zero() {
                    let up = gd[0];
                    let vocab = self.value(*logits).cols();
                    let uniform = *smoothing / T::from_usize(vocab).unwrap();
                    let gl = self.slot(grads, *logits);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let f = up * w / *norm;
                        let prow = &probs[r * vocab..][..vocab];
                        let orow = gl.row_mut(r);
                        for j in 0..vocab {
                            let mut q = uniform;
                            if j == targets[r] as usize {
                                q += T::one() - *smoothing;
                            }
                            orow[j] += f * (prow[j] - q);
                        }
                    }
                }
            }
            Op::SqDist {
                a,
                b,
                weights,
                norm,
            } => {
                if *norm > T::zero() {
                    let up = gd[0];
                    let two = T::one() + T::one();
                    for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                        if !self.requires_grad(v) {
                            continue;
                        }
                        let av = self.value(*a);
                        let bv = self.value(*b);
                        let mut delta = Tensor::zeros(av.shape().to_vec());
                        for (r, &w) in weights.iter().enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            let f = sign * two * w * up / *norm;
                            for ((o, &x), &y) in
                                delta.row_mut(r).iter_mut().zip(av.row(r)).zip(bv.row(r))
                            {
                                *o = f * (x - y);
                            }
                        }
                        self.slot(grads, v).add_assign(&delta);
                    }
                }
            }
            Op::BceLogits {
                logits,
                labels,
                weights,
                norm,
            } => {
                if self.requires_grad(*logits) && *norm > T::zero() {
                    let up = gd[0];
                    let z = self.value(*logits).data().to_vec();
                    let gl = self.slot(grads, *logits);
                    for (r, o) in gl.data_mut().iter_mut().enumerate() {
                        if weights[r] != T::zero() {
                            *o += up * weights[r] * (sigmoid(z[r]) - labels[r]) / *norm;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires_grad(*x) {
                    let up = gd[0];
                    self.slot(grads, *x)
                        .data_mut()
                        .iter_mut()
                        .for_each(|o| *o += up);
                }
            }
            Op::Mse { a, b } => {
                let up = gd[0];
                let n = T::from_usize(self.value(*a).numel().max(1)).unwrap();
                let two = T::one() + T::one();
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let delta: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| sign * two * up * (x - y) / n)
                        .collect();
                    for (o, d) in self.slot(grads, v).data_mut().iter_mut().zip(delta) {
                        *o += d;
                    }
                }
            }
            Op::WeightedSum { terms } => {
                let up = gd[0];
                for &(v, w) in terms {
                    if self.requires_grad(v) {
                        let s = self.slot(grads, v);
                        s.data_mut()[0] += w * up;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = *spec;
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let prow = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &gd[(b * q_len + i) * d + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..k_len {
                        let p = prow[j];
                        if p == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let base = (b * k_len + j) * d + off;
                        let vrow = &vd[base..][..dh];
                        dp[j] = go.iter().zip(vrow).map(|(&x, &y)| x * y).sum::<T>();
                        dot += p * dp[j];
                        for (o, &x) in gv[base..][..dh].iter_mut().zip(go) {
                            *o += p * x;
                        }
                    }
                    let qbase = (b * q_len + i) * d + off;
                    for j in 0..k_len {
                        let p = prow[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let kbase = (b * k_len + j) * d + off;
                        for t in 0..dh {
                            gq[qbase + t] += ds * kd[kbase + t];
                            gk[kbase + t] += ds * qd[qbase + t];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.requires_grad(var) {
                let slot = self.slot(grads, var);
                for (o, x) in slot.data_mut().iter_mut().zip(buf) {
                    *o += x;
                }
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> &'a mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }
}

fn param_slot<'a, T: Float>(
    pgrads: &'a mut Vec<Option<Tensor<T>>>,
    id: ParamId,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    if pgrads.len() <= id.0 {
        pgrads.resize(id.0 + 1, None);
    }
    pgrads[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn softplus<T: Float>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
