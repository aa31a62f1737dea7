//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value plus whatever
//! it needs for the backward pass. Nodes are appended in topological order,
//! so the backward sweep is a single reverse walk over the tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the running statistics once the step is complete.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
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
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        kernel: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Trbl {
        probs: Var,
        labels: Vec<T>,
        weights: Vec<T>,
        clamp_eps: T,
    },
    Select {
        keep: Vec<bool>,
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward tape. One graph is built per forward pass and dropped after the
/// backward sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    bn_observations: Vec<BnObservation<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter; `None` if the parameter never entered the
    /// graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
            rng: None,
            bn_observations: Vec::new(),
        }
    }

    /// Train-mode graph whose dropout masks are drawn from `rng`.
    pub fn with_rng(mode: Mode, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(mode);
        g.rng = Some(rng);
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation<T>> {
        std::mem::take(&mut self.bn_observations)
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

    /// Attention weights `[batch, heads, n_q, n_k]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted (attribution, gradient checks).
    pub fn tracked_input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = if store.is_trainable(id) {
            self.tracked_input(store.get(id).clone())
        } else {
            self.input(store.get(id).clone())
        };
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds a `[n]` bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        if self.value(bias).rank() != 1 || self.value(x).last_dim() != n {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Same-padded, stride-1 cross-correlation. `x: [B, C_in, T]`,
    /// `w: [C_out, C_in, K]`, `bias: [C_out]` -> `[B, C_out, T]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || self.value(bias).shape() != [sw[0]] {
            return Err(shape_err(
                "conv1d",
                format!("input {sx:?}, weight {sw:?}, bias {:?}", self.value(bias).shape()),
            ));
        }
        let (batch, c_in, t) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let pad_left = (kernel - 1) / 2;
        let ck = c_in * kernel;
        let mut cols = vec![T::zero(); batch * ck * t];
        let xd = self.value(x).data();
        for b in 0..batch {
            let col_b = &mut cols[b * ck * t..(b + 1) * ck * t];
            for c in 0..c_in {
                let xrow = &xd[(b * c_in + c) * t..(b * c_in + c + 1) * t];
                for j in 0..kernel {
                    let dst = &mut col_b[(c * kernel + j) * t..(c * kernel + j + 1) * t];
                    // dst[i] = x[i + j - pad_left]
                    let shift = j as isize - pad_left as isize;
                    for (i, d) in dst.iter_mut().enumerate() {
                        let src = i as isize + shift;
                        if src >= 0 && (src as usize) < t {
                            *d = xrow[src as usize];
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[batch, c_out, t]);
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        for b in 0..batch {
            let ob = &mut out.data_mut()[b * c_out * t..(b + 1) * c_out * t];
            for (co, row) in ob.chunks_mut(t).enumerate() {
                row.fill(bd[co]);
            }
            T::gemm(
                c_out,
                ck,
                t,
                T::one(),
                wd,
                ck as isize,
                1,
                &cols[b * ck * t..(b + 1) * ck * t],
                t as isize,
                1,
                T::one(),
                ob,
                t as isize,
                1,
            );
        }
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                kernel,
                cols,
            },
            &[x, w, bias],
        ))
    }

    /// Batch normalization over `[B, C]` or `[B, C, L]`, per channel `C`.
    ///
    /// Train mode normalizes with the batch statistics and records them in
    /// the graph; infer mode uses the supplied running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        prefix: &str,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || shape.len() > 3 {
            return Err(shape_err("batch_norm", format!("input {shape:?}")));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let len = if shape.len() == 3 { shape[2] } else { 1 };
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(shape_err("batch_norm", "affine parameters must be [C]"));
        }
        let batch_stats = self.mode == Mode::Train;
        if batch_stats && batch < 2 {
            return Err(NnError::DegenerateBatch(batch));
        }
        let xd = self.value(x).data();
        let count = (batch * len) as f64;
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        let mut observation = None;
        if batch_stats {
            for c in 0..ch {
                let mut s = 0.0f64;
                for b in 0..batch {
                    for &v in &xd[(b * ch + c) * len..(b * ch + c + 1) * len] {
                        s += v.as_f64();
                    }
                }
                let mu = s / count;
                let mut ss = 0.0f64;
                for b in 0..batch {
                    for &v in &xd[(b * ch + c) * len..(b * ch + c + 1) * len] {
                        let dv = v.as_f64() - mu;
                        ss += dv * dv;
                    }
                }
                mean[c] = T::from_f64(mu);
                var[c] = T::from_f64(ss / count);
            }
            let unbiased = var
                .iter()
                .map(|&v| T::from_f64(v.as_f64() * count / (count - 1.0)))
                .collect();
            observation = Some(BnObservation {
                prefix: prefix.to_string(),
                mean: mean.clone(),
                var: unbiased,
            });
        } else {
            if running_mean.len() != ch || running_var.len() != ch {
                return Err(shape_err("batch_norm", "running statistics must be [C]"));
            }
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = Tensor::zeros(&shape);
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * len;
                for i in base..base + len {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out.data_mut()[i] = h * g[c] + be[c];
                }
            }
        }
        self.bn_observations.extend(observation);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Window 2, stride 2 max pooling over the last axis of `[B, C, T]`;
    /// an odd tail element forms its own window.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(shape_err("max_pool", format!("input {shape:?}")));
        }
        let (rows, t) = (shape[0] * shape[1], shape[2]);
        let t_out = t.div_ceil(2);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[shape[0], shape[1], t_out]);
        let mut argmax = vec![0usize; rows * t_out];
        for r in 0..rows {
            for o in 0..t_out {
                let i0 = r * t + 2 * o;
                let mut best = i0;
                if 2 * o + 1 < t && xd[i0 + 1] > xd[i0] {
                    best = i0 + 1;
                }
                out.data_mut()[r * t_out + o] = xd[best];
                argmax[r * t_out + o] = best;
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout. Identity in infer mode (the input node is returned).
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::DropoutProbability(p));
        }
        if self.mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let scale = T::from_f64(1.0 / (1.0 - p));
        let rng = self.rng.get_or_insert_with(|| {
            use rand::SeedableRng;
            ChaCha8Rng::seed_from_u64(0)
        });
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err("layer_norm", "affine parameters must match trailing axis"));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(self.value(x).shape());
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mu) * is;
                xhat[r * d + i] = h;
                out.data_mut()[r * d + i] = h * g[i] + be[i];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    /// `q: [B, n, d]`, `k, v: [B, m, d]` -> `[B, n, d]` with heads
    /// concatenated along the last axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (batch, n, d) = (sq[0], sq[1], sq[2]);
        let m = sk[1];
        if heads == 0 || d % heads != 0 {
            return Err(NnError::HeadsMismatch { d, h: heads });
        }
        let dk = d / heads;
        let scale = T::one() / T::from_f64(dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![T::zero(); batch * heads * n * m];
        let mut out = Tensor::zeros(&[batch, n, d]);
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    let qi = &qd[(b * n + i) * d + h * dk..(b * n + i) * d + (h + 1) * dk];
                    let w = &mut weights[((b * heads + h) * n + i) * m..((b * heads + h) * n + i + 1) * m];
                    for (j, wj) in w.iter_mut().enumerate() {
                        let kj = &kd[(b * m + j) * d + h * dk..(b * m + j) * d + (h + 1) * dk];
                        *wj = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    }
                    softmax_in_place(w);
                    let o = &mut out.data_mut()[(b * n + i) * d + h * dk..(b * n + i) * d + (h + 1) * dk];
                    for (j, &wj) in w.iter().enumerate() {
                        let vj = &vd[(b * m + j) * d + h * dk..(b * m + j) * d + (h + 1) * dk];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += wj * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Concatenates `[R, da]` and `[R, db]` along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (rows, da, db) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[rows, da + db]);
        for r in 0..rows {
            out.data_mut()[r * (da + db)..r * (da + db) + da].copy_from_slice(self.value(a).row(r));
            out.data_mut()[r * (da + db) + da..(r + 1) * (da + db)].copy_from_slice(self.value(b).row(r));
        }
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Mean risk-balanced cross-entropy over a batch of two-class
    /// probability rows `[N, 2]`; the positive-class probability is column 1.
    /// Positives are weighted by `lambda`, negatives by 1.
    pub fn trbl_loss(&mut self, probs: Var, labels: &[u8], lambda: T, clamp_eps: T) -> Result<Var> {
        let s = self.value(probs).shape().to_vec();
        if s.len() != 2 || s[1] != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(shape_err(
                "trbl_loss",
                format!("probs {s:?}, {} labels", labels.len()),
            ));
        }
        let n = labels.len();
        let y: Vec<T> = labels.iter().map(|&l| if l == 1 { T::one() } else { T::zero() }).collect();
        let weights: Vec<T> = y.iter().map(|&yi| T::one() - yi + lambda * yi).collect();
        let pd = self.value(probs).data();
        let mut total = T::zero();
        for i in 0..n {
            let p = clamp(pd[2 * i + 1], clamp_eps);
            let bce = -(y[i] * p.ln() + (T::one() - y[i]) * (T::one() - p).ln());
            total += bce * weights[i];
        }
        let out = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(
            out,
            Op::Trbl {
                probs,
                labels: y,
                weights,
                clamp_eps,
            },
            &[probs],
        ))
    }

    /// Row-wise choice along the leading axis: row `r` comes from `a` when
    /// `keep[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, keep: &[bool], a: Var, b: Var) -> Result<Var> {
        same_shape("select_rows", self.value(a).shape(), self.value(b).shape())?;
        let rows = self.value(a).shape().first().copied().unwrap_or(1);
        if keep.len() != rows {
            return Err(shape_err("select_rows", format!("{} flags for {rows} rows", keep.len())));
        }
        let per = self.value(a).len() / rows.max(1);
        let mut out = self.value(b).clone();
        for (r, &k) in keep.iter().enumerate() {
            if k {
                out.data_mut()[r * per..(r + 1) * per].copy_from_slice(&self.value(a).data()[r * per..(r + 1) * per]);
            }
        }
        Ok(self.push(
            out,
            Op::Select {
                keep: keep.to_vec(),
                a,
                b,
            },
            &[a, b],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll { x }, &[x])
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", "weight count differs from input size"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&w)
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, &[x]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let shape = self.value(out).shape();
        if self.value(out).len() != 1 {
            return Err(NnError::NonScalarOutput(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(shape, T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<T>, dout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = dout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, sa);
                    // dA = dOut · Bᵀ
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, self.value(*b).data(), 1, n as isize, T::one(), ga.data_mut(), k as isize, 1);
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, sb);
                    // dB = Aᵀ · dOut
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k as isize, g, n as isize, 1, T::one(), gb.data_mut(), n as isize, 1);
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    grad_slot(grads, *x, dout.shape()).add_assign(dout);
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let gb = grad_slot(grads, *bias, &[n]);
                    for row in g.chunks(n) {
                        for (a, &b) in gb.data_mut().iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if self.needs(p) {
                        grad_slot(grads, p, dout.shape()).add_assign(dout);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, dout.shape());
                    for ((o, &gi), &bi) in ga.data_mut().iter_mut().zip(g).zip(&bv) {
                        *o += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, dout.shape());
                    for ((o, &gi), &ai) in gb.data_mut().iter_mut().zip(g).zip(&av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, dout.shape());
                    for (o, &gi) in gx.data_mut().iter_mut().zip(g) {
                        *o += gi * *factor;
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                kernel,
                cols,
            } => {
                let sx = self.value(*x).shape().to_vec();
                let (batch, c_in, t) = (sx[0], sx[1], sx[2]);
                let c_out = self.value(*w).shape()[0];
                let ck = c_in * kernel;
                if self.needs(*bias) {
                    let gb = grad_slot(grads, *bias, &[c_out]);
                    for b in 0..batch {
                        for co in 0..c_out {
                            let s: T = g[(b * c_out + co) * t..(b * c_out + co + 1) * t].iter().copied().sum();
                            gb.data_mut()[co] += s;
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = grad_slot(grads, *w, &[c_out, c_in, *kernel]);
                    for b in 0..batch {
                        // dW += dOut_b · cols_bᵀ
                        T::gemm(
                            c_out,
                            t,
                            ck,
                            T::one(),
                            &g[b * c_out * t..(b + 1) * c_out * t],
                            t as isize,
                            1,
                            &cols[b * ck * t..(b + 1) * ck * t],
                            1,
                            t as isize,
                            T::one(),
                            gw.data_mut(),
                            ck as isize,
                            1,
                        );
                    }
                }
                if self.needs(*x) {
                    let pad_left = (kernel - 1) / 2;
                    let wd = self.value(*w).data();
                    let mut dcols = vec![T::zero(); ck * t];
                    let gx = grad_slot(grads, *x, &sx);
                    for b in 0..batch {
                        // dcols = Wᵀ · dOut_b
                        T::gemm(
                            ck,
                            c_out,
                            t,
                            T::one(),
                            wd,
                            1,
                            ck as isize,
                            &g[b * c_out * t..(b + 1) * c_out * t],
                            t as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            t as isize,
                            1,
                        );
                        let gxb = &mut gx.data_mut()[b * c_in * t..(b + 1) * c_in * t];
                        for c in 0..c_in {
                            for j in 0..*kernel {
                                let src = &dcols[(c * kernel + j) * t..(c * kernel + j + 1) * t];
                                let shift = j as isize - pad_left as isize;
                                for (i, &dv) in src.iter().enumerate() {
                                    let xi = i as isize + shift;
                                    if xi >= 0 && (xi as usize) < t {
                                        gxb[c * t + xi as usize] += dv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let (batch, ch) = (shape[0], shape[1]);
                let len = if shape.len() == 3 { shape[2] } else { 1 };
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * len;
                        for i in base..base + len {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    grad_slot(grads, *gamma, &[ch]).add_assign(&Tensor::from_vec(sum_gx.clone()));
                }
                if self.needs(*beta) {
                    grad_slot(grads, *beta, &[ch]).add_assign(&Tensor::from_vec(sum_g.clone()));
                }
                if self.needs(*x) {
                    let gm = self.value(*gamma).data().to_vec();
                    let gx = grad_slot(grads, *x, &shape);
                    let count = T::from_f64((batch * len) as f64);
                    for b in 0..batch {
                        for c in 0..ch {
                            let base = (b * ch + c) * len;
                            let k = gm[c] * inv_std[c];
                            for i in base..base + len {
                                let d = if *batch_stats {
                                    k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                                } else {
                                    k * g[i]
                                };
                                gx.data_mut()[i] += d;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let out = node.value.data();
                    let gx = grad_slot(grads, *x, dout.shape());
                    for ((o, &gi), &y) in gx.data_mut().iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = grad_slot(grads, *x, &shape);
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx.data_mut()[src] += gi;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, dout.shape());
                    for ((o, &gi), &m) in gx.data_mut().iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = grad_slot(grads, *x, &shape);
                    for (o, &gi) in gx.data_mut().iter_mut().zip(g) {
                        *o += gi;
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
                let d = self.value(*x).last_dim();
                let rows = g.len() / d.max(1);
                let gm = self.value(*gamma).data().to_vec();
                if self.needs(*gamma) {
                    let gg = grad_slot(grads, *gamma, &[d]);
                    for r in 0..rows {
                        for i in 0..d {
                            gg.data_mut()[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = grad_slot(grads, *beta, &[d]);
                    for r in 0..rows {
                        for i in 0..d {
                            gb.data_mut()[i] += g[r * d + i];
                        }
                    }
                }
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = grad_slot(grads, *x, &shape);
                    let dn = T::from_f64(d as f64);
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..d {
                            let gh = g[r * d + i] * gm[i];
                            s1 += gh;
                            s2 += gh * xhat[r * d + i];
                        }
                        for i in 0..d {
                            let gh = g[r * d + i] * gm[i];
                            gx.data_mut()[r * d + i] += inv_std[r] * (gh - s1 / dn - xhat[r * d + i] * s2 / dn);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let sq = self.value(*q).shape().to_vec();
                let sk = self.value(*k).shape().to_vec();
                let (batch, n, d) = (sq[0], sq[1], sq[2]);
                let m = sk[1];
                let dk = d / heads;
                let scale = T::one() / T::from_f64(dk as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dkv = vec![T::zero(); kd.len()];
                let mut dvv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); m];
                for b in 0..batch {
                    for h in 0..*heads {
                        let hs = h * dk..(h + 1) * dk;
                        for i in 0..n {
                            let go = &g[(b * n + i) * d + hs.start..(b * n + i) * d + hs.end];
                            let w = &weights[((b * heads + h) * n + i) * m..((b * heads + h) * n + i + 1) * m];
                            for j in 0..m {
                                let vj = &vd[(b * m + j) * d + hs.start..(b * m + j) * d + hs.end];
                                dp[j] = go.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                                let dvj = &mut dvv[(b * m + j) * d + hs.start..(b * m + j) * d + hs.end];
                                for (o, &gg) in dvj.iter_mut().zip(go) {
                                    *o += w[j] * gg;
                                }
                            }
                            let dot: T = dp.iter().zip(w).map(|(&a, &c)| a * c).sum();
                            for j in 0..m {
                                let ds = w[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let qi = &qd[(b * n + i) * d + hs.start..(b * n + i) * d + hs.end];
                                let kj = &kd[(b * m + j) * d + hs.start..(b * m + j) * d + hs.end];
                                let dqi = &mut dq[(b * n + i) * d + hs.start..(b * n + i) * d + hs.end];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let dkj = &mut dkv[(b * m + j) * d + hs.start..(b * m + j) * d + hs.end];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                for (p, dv, shape) in [(*q, dq, &sq), (*k, dkv, &sk), (*v, dvv, &sk)] {
                    if self.needs(p) {
                        grad_slot(grads, p, shape).add_assign(&Tensor::new(shape.clone(), dv).expect("attention grad"));
                    }
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (rows, da, db) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, &sa);
                    for r in 0..rows {
                        for i in 0..da {
                            ga.data_mut()[r * da + i] += g[r * (da + db) + i];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, &sb);
                    for r in 0..rows {
                        for i in 0..db {
                            gb.data_mut()[r * db + i] += g[r * (da + db) + da + i];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let d = node.value.last_dim();
                    let y = node.value.data();
                    let gx = grad_slot(grads, *x, dout.shape());
                    for (r, (gr, yr)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            gx.data_mut()[r * d + i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::Trbl {
                probs,
                labels,
                weights,
                clamp_eps,
            } => {
                if self.needs(*probs) {
                    let n = labels.len();
                    let pd = self.value(*probs).data().to_vec();
                    let gp = grad_slot(grads, *probs, &[n, 2]);
                    let scale = g[0] / T::from_f64(n as f64);
                    for i in 0..n {
                        let p = pd[2 * i + 1];
                        if p < *clamp_eps || p > T::one() - *clamp_eps {
                            continue;
                        }
                        let y = labels[i];
                        let dl = -(y / p) + (T::one() - y) / (T::one() - p);
                        gp.data_mut()[2 * i + 1] += scale * weights[i] * dl;
                    }
                }
            }
            Op::Select { keep, a, b } => {
                let shape = dout.shape().to_vec();
                let rows = keep.len();
                let per = g.len() / rows.max(1);
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, &shape);
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for i in r * per..(r + 1) * per {
                                ga.data_mut()[i] += g[i];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, &shape);
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            for i in r * per..(r + 1) * per {
                                gb.data_mut()[i] += g[i];
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = grad_slot(grads, *x, &shape);
                    for o in gx.data_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = grad_slot(grads, *x, &shape);
                    for (o, &wi) in gx.data_mut().iter_mut().zip(w) {
                        *o += g[0] * wi;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn clamp<T: Real>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
