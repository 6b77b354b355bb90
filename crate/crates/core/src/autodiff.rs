//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar output walks the tape in reverse and returns
//! the gradient of every parameter that was read through [`Tape::param`].
//! Shape mismatches inside tape operations are programming errors and panic;
//! callers validate user input before building the graph.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{cast, Float, Tensor};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a parameter and returns its id. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients, indexed by parameter id. Parameters that did not
/// take part in the forward pass have no entry.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<F>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += s · other`, entry by entry.
    pub fn add_scaled(&mut self, other: &Gradients<F>, s: F) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_scaled(t, s),
                    None => {
                        let mut t = t.clone();
                        t.scale_in_place(s);
                        *mine = Some(t);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        self.grads.iter_mut().flatten().for_each(|g| g.scale_in_place(s));
    }

    /// Returns the id of the first parameter with a non-finite gradient.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.grads
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| !g.all_finite()))
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(usize),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    MatMul { x: Var, w: Var, trans_w: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    MaskedSoftmax(Var),
    Dropout { x: Var, mask: Vec<F> },
    Embedding { table: Var, ids: Vec<u32> },
    GatherRows { x: Var, rows: Vec<usize> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    Reshape(Var),
    WeightedSum { x: Var, coeffs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, scale: Vec<F>, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<'p, F: Float> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Reads parameter `id`. Repeated reads share one tape node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(self.params.tensor(id).clone(), Op::Param(id), true);
        self.param_vars[id] = Some(v);
        v
    }

    /// Reads a parameter by name. Panics if it does not exist.
    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.param(id)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a 1-D bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vx.last_dim();
        assert_eq!(vb.numel(), n, "bias length mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    fn matmul_impl(&mut self, x: Var, w: Var, trans_w: bool) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = if trans_w {
            (vw.shape()[1], vw.shape()[0])
        } else {
            (vw.shape()[0], vw.shape()[1])
        };
        assert_eq!(vx.last_dim(), k, "matmul inner dimension mismatch");
        let m = vx.numel() / k;
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        F::gemm(m, k, n, vx.data(), false, vw.data(), trans_w, out.data_mut(), false);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::MatMul { x, w, trans_w }, rg)
    }

    /// `x · w` with `x` of shape `(.., k)` and `w` of shape `(k, n)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        self.matmul_impl(x, w, false)
    }

    /// `x · wᵀ` with `x` of shape `(.., k)` and `w` of shape `(n, k)`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        self.matmul_impl(x, w, true)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Batched product over all leading axes: `(.., m, k) · (.., k, n)`, or
    /// `(.., m, k) · (.., n, k)ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() >= 2 && sa.len() == sb.len(), "bmm rank mismatch");
        let r = sa.len();
        assert_eq!(sa[..r - 2], sb[..r - 2], "bmm batch dimensions differ");
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let n = if trans_b {
            assert_eq!(sb[r - 1], k, "bmm inner dimension mismatch");
            sb[r - 2]
        } else {
            assert_eq!(sb[r - 2], k, "bmm inner dimension mismatch");
            sb[r - 1]
        };
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = Tensor::zeros(&shape);
        let (da, db) = (va.data(), vb.data());
        for (i, c) in out.data_mut().chunks_mut(m * n).enumerate().take(batch) {
            F::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                c,
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm { a, b, trans_b }, rg)
    }

    /// Gaussian error linear unit, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = cast::<F>(0.5);
        let inv_sqrt2 = cast::<F>(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .map(|v| half * v * (F::one() + (v * inv_sqrt2).gauss_error()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(F::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == n && b.len() == n, "layer_norm parameter length mismatch");
        let eps = cast::<F>(eps);
        let nf = cast::<F>(n as f64);
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out).unwrap();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last axis of `(B, .., Tk)` scores, where
    /// `key_mask` has `B·Tk` entries and zero marks a key that must receive
    /// no probability. A row with every key masked comes out all zeros.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[u8]) -> Var {
        let vx = self.value(x);
        let tk = vx.last_dim();
        assert!(tk > 0 && key_mask.len().is_multiple_of(tk), "key mask length mismatch");
        let batch = key_mask.len() / tk;
        assert!(batch > 0 && vx.rows().is_multiple_of(batch), "key mask batch mismatch");
        let rows_per_batch = vx.rows() / batch;
        let mut out = Tensor::zeros(vx.shape());
        for (r, (row, o)) in vx.data().chunks(tk).zip(out.data_mut().chunks_mut(tk)).enumerate() {
            let mask = &key_mask[(r / rows_per_batch) * tk..(r / rows_per_batch + 1) * tk];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m != 0)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                continue;
            }
            let mut total = F::zero();
            for ((o, &v), &m) in o.iter_mut().zip(row).zip(mask) {
                if m != 0 {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            o.iter_mut().for_each(|p| *p /= total);
        }
        let rg = self.rg(x);
        self.push(out, Op::MaskedSoftmax(x), rg)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. Returns `x` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be below 1");
        let keep = cast::<F>(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<F> = (0..vx.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Looks up rows of a `(V, H)` table; the result is `(ids.len(), H)`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.shape().len(), 2, "embedding table must be 2-D");
        let (v, h) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            assert!((id as usize) < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(vt.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), h], out).unwrap();
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Picks rows of `x` viewed as `(rows, last_dim)`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < vx.rows(), "gather row {r} out of range");
            out.extend_from_slice(vx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], out).unwrap();
        let rg = self.rg(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// `(B, T, heads·D)` to `(B, heads, T, D)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert!(s.len() == 3 && s[2].is_multiple_of(heads), "split_heads shape mismatch");
        let (b, t, d) = (s[0], s[1], s[2] / heads);
        let src = vx.data();
        let mut out = Tensor::zeros(&[b, heads, t, d]);
        let dst = out.data_mut();
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..heads {
                    let from = ((bi * t + ti) * heads + hi) * d;
                    let to = ((bi * heads + hi) * t + ti) * d;
                    dst[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SplitHeads { x, heads }, rg)
    }

    /// `(B, heads, T, D)` to `(B, T, heads·D)`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4, "merge_heads expects 4-D input");
        let out = Tensor::new(vec![s[0], s[2], s[1] * s[3]], merge(vx.data(), s)).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::MergeHeads(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// `Σ x_i · c_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[F]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.numel(), coeffs.len(), "weighted_sum length mismatch");
        let s = vx.data().iter().zip(coeffs).map(|(&a, &c)| a * c).sum::<F>();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                coeffs: coeffs.to_vec(),
            },
            rg,
        )
    }

    /// Weighted mean cross-entropy `Σ w_i·nll_i / Σ w_i` of `(N, C)` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let denom = weights.iter().copied().sum::<F>();
        self.cross_entropy_with_denominator(logits, targets, weights, denom)
    }

    /// `Σ w_i·nll_i / denom`. Splitting a batch into pieces that share one
    /// `denom` makes the piece losses add up to the whole-batch loss.
    pub fn cross_entropy_with_denominator(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[F],
        denom: F,
    ) -> Var {
        let vl = self.value(logits);
        let c = vl.last_dim();
        let n = vl.rows();
        assert!(targets.len() == n && weights.len() == n, "cross_entropy length mismatch");
        assert!(denom > F::zero(), "cross_entropy needs a positive denominator");
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = F::zero();
        for (i, row) in vl.data().chunks(c).enumerate() {
            assert!(targets[i] < c, "target {} out of range {c}", targets[i]);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let total = row.iter().map(|&v| (v - max).exp()).sum::<F>();
            let log_z = max + total.ln();
            loss += weights[i] * (log_z - row[targets[i]]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let scale = weights.iter().map(|&w| w / denom).collect();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            rg,
        )
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        let mut out = Gradients::empty(self.params.len());
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        out: &mut Gradients<F>,
    ) {
        let mut send = |v: Var, t: Tensor<F>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.grads[*id] = Some(g),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::AddBias(x, b) => {
                let n = g.last_dim();
                let mut gb = Tensor::zeros(&[n]);
                for row in g.data().chunks(n) {
                    for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(*b, gb.reshape(self.shape(*b)).unwrap());
                send(*x, g);
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s)),
            Op::MatMul { x, w, trans_w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let k = vx.last_dim();
                let n = g.last_dim();
                let m = vx.numel() / k;
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(vx.shape());
                    F::gemm(m, n, k, g.data(), false, vw.data(), !trans_w, gx.data_mut(), false);
                    send(*x, gx);
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros(vw.shape());
                    if *trans_w {
                        F::gemm(n, m, k, g.data(), true, vx.data(), false, gw.data_mut(), false);
                    } else {
                        F::gemm(k, m, n, vx.data(), true, g.data(), false, gw.data_mut(), false);
                    }
                    send(*w, gw);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let r = va.shape().len();
                let (m, k) = (va.shape()[r - 2], va.shape()[r - 1]);
                let n = g.last_dim();
                let batch = va.numel() / (m * k);
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    for i in 0..batch {
                        F::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &va.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            F::gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            F::gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Gelu(x) => {
                let half = cast::<F>(0.5);
                let inv_sqrt2 = cast::<F>(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = cast::<F>(0.398_942_280_401_432_7);
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let cdf = half * (F::one() + (v * inv_sqrt2).gauss_error());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        gv * (cdf + v * pdf)
                    })
                    .collect();
                send(*x, Tensor::new(vx.shape().to_vec(), data).unwrap());
            }
            Op::Tanh(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * (F::one() - y * y))
                    .collect();
                send(*x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.last_dim();
                let nf = cast::<F>(n as f64);
                let gam = self.value(*gamma).data();
                let mut ggam = vec![F::zero(); n];
                let mut gbeta = vec![F::zero(); n];
                let mut gx = Vec::with_capacity(g.numel());
                for (r, (gr, hr)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = F::zero();
                    let mut mean_dh = F::zero();
                    for j in 0..n {
                        ggam[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for j in 0..n {
                        gx.push(rstd[r] * (gr[j] * gam[j] - mean_d - hr[j] * mean_dh));
                    }
                }
                send(*gamma, Tensor::new(self.shape(*gamma).to_vec(), ggam).unwrap());
                send(*beta, Tensor::new(self.shape(*beta).to_vec(), gbeta).unwrap());
                send(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::MaskedSoftmax(x) => {
                let tk = g.last_dim();
                let mut gx = Vec::with_capacity(g.numel());
                for (p, gr) in node.value.data().chunks(tk).zip(g.data().chunks(tk)) {
                    let dot = p.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                    gx.extend(p.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                send(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                send(*x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(self.shape(*table));
                let h = g.last_dim();
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id as usize * h..(id as usize + 1) * h];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[i * h..(i + 1) * h]) {
                        *d += v;
                    }
                }
                send(*table, gt);
            }
            Op::GatherRows { x, rows } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = g.last_dim();
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for (a, &v) in dst.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *a += v;
                    }
                }
                send(*x, gx);
            }
            Op::SplitHeads { x, heads } => {
                let s = g.shape().to_vec();
                debug_assert_eq!(s[1], *heads);
                send(*x, Tensor::new(self.shape(*x).to_vec(), merge(g.data(), &s)).unwrap());
            }
            Op::MergeHeads(x) => {
                let s = self.shape(*x).to_vec();
                let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![F::zero(); g.numel()];
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..h {
                            let from = ((bi * t + ti) * h + hi) * d;
                            let to = ((bi * h + hi) * t + ti) * d;
                            gx[to..to + d].copy_from_slice(&g.data()[from..from + d]);
                        }
                    }
                }
                send(*x, Tensor::new(s, gx).unwrap());
            }
            Op::Reshape(x) => send(*x, g.reshape(self.shape(*x)).unwrap()),
            Op::WeightedSum { x, coeffs } => {
                let s = g.data()[0];
                let data = coeffs.iter().map(|&c| c * s).collect();
                send(*x, Tensor::new(self.shape(*x).to_vec(), data).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let s = g.data()[0];
                let c = self.value(*logits).last_dim();
                let mut gl = probs.clone();
                for (i, row) in gl.chunks_mut(c).enumerate() {
                    row[targets[i]] -= F::one();
                    let f = scale[i] * s;
                    row.iter_mut().for_each(|v| *v *= f);
                }
                send(*logits, Tensor::new(self.shape(*logits).to_vec(), gl).unwrap());
            }
        }
    }
}

/// `(B, H, T, D)` data laid out as `(B, T, H·D)`.
fn merge<F: Float>(src: &[F], s: &[usize]) -> Vec<F> {
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![F::zero(); src.len()];
    for bi in 0..b {
        for hi in 0..h {
            for ti in 0..t {
                let from = ((bi * h + hi) * t + ti) * d;
                let to = ((bi * t + ti) * h + hi) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    /// Compares tape gradients with central differences for every parameter.
    fn check<B>(params: ParamStore<f64>, build: B)
    where
        B: Fn(&mut Tape<f64>) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new(&params);
            let loss = build(&mut tape);
            tape.backward(loss)
        };
        let eval = |p: &ParamStore<f64>| {
            let mut tape = Tape::new(p);
            let loss = build(&mut tape);
            tape.value(loss).data()[0]
        };
        let h = 1e-5;
        for id in 0..params.len() {
            let g = analytic.get(id).unwrap_or_else(|| panic!("no grad for {}", params.name(id)));
            for i in 0..params.tensor(id).numel() {
                let mut plus = params.clone();
                plus.tensor_mut(id).data_mut()[i] += h;
                let mut minus = params.clone();
                minus.tensor_mut(id).data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel < 1e-6, "{}[{i}]: analytic {an} vs numeric {fd}", params.name(id));
            }
        }
    }

    fn coeffs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn linear_gelu_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        p.add("x", randn(&[2, 3, 4], &mut rng));
        p.add("w", randn(&[4, 5], &mut rng));
        p.add("b", randn(&[5], &mut rng));
        p.add("wt", randn(&[3, 5], &mut rng));
        let c = coeffs(18, 2);
        check(p, |t| {
            let (x, w, b, wt) = (t.param(0), t.param(1), t.param(2), t.param(3));
            let y = t.linear(x, w, b);
            let y = t.gelu(y);
            let y = t.matmul_t(y, wt);
            let y = t.tanh(y);
            let y = t.scale(y, 1.7);
            t.weighted_sum(y, &c)
        });
    }

    #[test]
    fn layer_norm_and_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        p.add("x", randn(&[3, 6], &mut rng));
        p.add("r", randn(&[3, 6], &mut rng));
        p.add("g", randn(&[6], &mut rng));
        p.add("b", randn(&[6], &mut rng));
        let c = coeffs(18, 4);
        check(p, |t| {
            let (x, r, g, b) = (t.param(0), t.param(1), t.param(2), t.param(3));
            let s = t.add(x, r);
            let y = t.layer_norm(s, g, b, 1e-12);
            t.weighted_sum(y, &c)
        });
    }

    #[test]
    fn attention_pieces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, tl, h, d) = (2, 3, 2, 2);
        let mut p = ParamStore::new();
        p.add("q", randn(&[b, tl, h * d], &mut rng));
        p.add("k", randn(&[b, tl, h * d], &mut rng));
        p.add("v", randn(&[b, tl, h * d], &mut rng));
        let key_mask = [1u8, 1, 0, 1, 0, 1];
        let c = coeffs(b * tl * h * d, 6);
        check(p, |t| {
            let q = t.param(0);
            let k = t.param(1);
            let v = t.param(2);
            let (q, k, v) = (t.split_heads(q, h), t.split_heads(k, h), t.split_heads(v, h));
            let s = t.bmm(q, k, true);
            let s = t.scale(s, 0.5);
            let pr = t.masked_softmax(s, &key_mask);
            let o = t.bmm(pr, v, false);
            let o = t.merge_heads(o);
            t.weighted_sum(o, &c)
        });
    }

    #[test]
    fn embedding_gather_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new();
        p.add("e", randn(&[5, 3], &mut rng));
        p.add("w", randn(&[3, 4], &mut rng));
        check(p, |t| {
            let e = t.param(0);
            let w = t.param(1);
            let x = t.embedding(e, &[1, 3, 1, 0]);
            let x = t.reshape(x, &[2, 2, 3]);
            let x = t.gather_rows(x, &[3, 0, 3]);
            let l = t.matmul(x, w);
            t.cross_entropy(l, &[2, 0, 1], &[1.0, 0.5, 2.0])
        });
    }

    #[test]
    fn masked_softmax_rows() {
        let p = ParamStore::<f64>::new();
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let y = t.masked_softmax(x, &[1, 0, 1, 0, 0, 0]);
        let v = t.value(y).data();
        let z = 1f64.exp() + 3f64.exp();
        assert!((v[0] - 1f64.exp() / z).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 3f64.exp() / z).abs() < 1e-15);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_value() {
        let p = ParamStore::<f64>::new();
        let mut t = Tape::new(&p);
        let l = t.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap());
        let loss = t.cross_entropy(l, &[0, 1], &[1.0, 3.0]);
        let nll1 = (1.0 + 2f64.exp()).ln();
        let expected = (2f64.ln() + 3.0 * nll1) / 4.0;
        assert!((t.value(loss).data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn dropout_is_inverted_and_masks_gradients() {
        let mut p = ParamStore::new();
        p.add("x", Tensor::full(&[20_000], 1.0f64));
        let mut t = Tape::new(&p);
        let x = t.param(0);
        let y = t.dropout(x, 0.25, &mut ChaCha8Rng::seed_from_u64(0));
        let v = t.value(y).data().to_vec();
        assert!(v.iter().all(|&a| a == 0.0 || (a - 4.0 / 3.0).abs() < 1e-12));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
        let ones = vec![1.0; 20_000];
        let s = t.weighted_sum(y, &ones);
        let g = t.backward(s);
        assert_eq!(g.get(0).unwrap().data(), &v[..]);
    }

    #[test]
    fn unused_params_have_no_gradient() {
        let mut p = ParamStore::new();
        p.add("a", Tensor::full(&[2], 1.0f64));
        p.add("b", Tensor::full(&[2], 1.0f64));
        let mut t = Tape::new(&p);
        let a = t.param(0);
        let s = t.weighted_sum(a, &[1.0, 2.0]);
        let g = t.backward(s);
        assert_eq!(g.get(0).unwrap().data(), &[1.0, 2.0]);
        assert!(g.get(1).is_none());
    }

    #[test]
    fn gradient_accumulation_helpers() {
        let mut a = Gradients::<f64>::empty(2);
        let mut b = Gradients::<f64>::empty(2);
        b.grads[1] = Some(Tensor::full(&[2], 2.0));
        a.add_scaled(&b, 0.5);
        a.add_scaled(&b, 0.5);
        assert_eq!(a.get(1).unwrap().data(), &[2.0, 2.0]);
        assert!((a.global_norm() - 8f64.sqrt()).abs() < 1e-15);
        b.grads[0] = Some(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        assert_eq!(b.first_non_finite(), Some(0));
    }
}
