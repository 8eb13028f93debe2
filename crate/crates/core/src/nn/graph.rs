//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are kept
//! on the tape; [`Graph::backward`] walks it in reverse and returns
//! [`Gradients`] keyed by parameter (store uid, index) and by node.
//!
//! Tensors use NCHW layout for images and `[rows, cols]` for matrices.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, ncr, Scalar, Tensor};
use crate::par;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param { store: u64, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddChannel { x: Var, bias: Var },
    AddSampleChannel { x: Var, v: Var },
    Silu(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var },
    MatMul(Var, Var),
    MixRows(Var, Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<S>, rstd: Vec<S> },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    ToTokens(Var),
    FromTokens(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<S> },
    GlobalAvgPool(Var),
    Mse(Var, Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_cache: HashMap<(u64, usize), Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Gradients<S> {
    params: HashMap<(u64, usize), Tensor<S>>,
    leaves: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&(store.uid(), id.index()))
    }

    /// Gradient with respect to an input created by [`Graph::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v.0)
    }

    /// Squared L2 norm of all gradient entries attributed to `store`.
    /// Frozen parameters never receive gradients, so a fully frozen store
    /// reports exactly zero.
    pub fn sq_norm(&self, store: &ParamStore<S>) -> f64 {
        self.params
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid())
            .map(|(_, g)| g.sq_norm())
            .sum()
    }

    /// Scale every parameter gradient by `factor`.
    pub fn scale(&mut self, factor: S) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Load a parameter onto the tape. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(
            store.get(id).clone(),
            Op::Param {
                store: key.0,
                index: key.1,
            },
            store.is_trainable(id),
        );
        self.param_cache.insert(key, v);
        v
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::lit(c);
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::lit(c);
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// `x[n, c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, r) = ncr(self.shape(x));
        assert_eq!(self.value(bias).len(), c, "add_channel: bias length");
        let vx = self.value(x);
        let vb = self.value(bias).data();
        let mut out = vx.data().to_vec();
        for (i, chunk) in out.chunks_mut(r).enumerate() {
            let b = vb[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        debug_assert_eq!(out.len(), n * c * r);
        let t = Tensor::from_vec(vx.shape(), out);
        let ng = self.ng(x) || self.ng(bias);
        self.push(t, Op::AddChannel { x, bias }, ng)
    }

    /// `x[n, c, ...] + v[n, c]`.
    pub fn add_sample_channel(&mut self, x: Var, v: Var) -> Var {
        let (n, c, r) = ncr(self.shape(x));
        assert_eq!(self.shape(v), &[n, c], "add_sample_channel: vector shape");
        let vx = self.value(x);
        let vv = self.value(v).data();
        let mut out = vx.data().to_vec();
        for (i, chunk) in out.chunks_mut(r).enumerate() {
            let b = vv[i];
            chunk.iter_mut().for_each(|e| *e += b);
        }
        let t = Tensor::from_vec(vx.shape(), out);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddSampleChannel { x, v }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x / (S::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// 2-D convolution, zero padding. `x: [N,C,H,W]`, `w: [O,C,KH,KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d: weight must be OCKK");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let geo = ConvGeom::new(&xs, &ws, stride, pad);
        let cols = im2col(self.value(x).data(), &geo);
        let mut out_mat = vec![S::zero(); geo.o * geo.cols()];
        gemm(
            geo.o,
            geo.ckk(),
            geo.cols(),
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out_mat,
            false,
        );
        let out = mat_to_batch(&out_mat, geo.n, geo.o, geo.p());
        let t = Tensor::from_vec(&[geo.n, geo.o, geo.ho, geo.wo], out);
        let ng = self.ng(x) || self.ng(w);
        self.push(t, Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// `x · wᵀ` with `x: [M, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear: input must be 2-D");
        assert_eq!(xs[1], ws[1], "linear: feature mismatch");
        let mut out = vec![S::zero(); xs[0] * ws[0]];
        gemm(
            xs[0],
            xs[1],
            ws[0],
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        let t = Tensor::from_vec(&[xs[0], ws[0]], out);
        let ng = self.ng(x) || self.ng(w);
        self.push(t, Op::Linear { x, w }, ng)
    }

    /// `a · b` with `a: [M, K]`, `b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_[1], bs[0], "matmul: inner dimension mismatch");
        let mut out = vec![S::zero(); as_[0] * bs[1]];
        gemm(
            as_[0],
            as_[1],
            bs[1],
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::from_vec(&[as_[0], bs[1]], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    /// `w · table` with `w: [M, K]`, `table: [K, D]`, accumulated in f64.
    ///
    /// Each output row is a weighted sum of table rows whose value does not
    /// depend (beyond the final rounding) on the order of the rows.
    pub fn mix_rows(&mut self, w: Var, table: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let ts = self.shape(table).to_vec();
        assert_eq!(ws[1], ts[0], "mix_rows: row count mismatch");
        let (m, k, d) = (ws[0], ws[1], ts[1]);
        let vw = self.value(w).data();
        let vt = self.value(table).data();
        let mut out = vec![S::zero(); m * d];
        let mut acc = vec![0f64; d];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..k {
                let p = vw[i * k + j].as_f64();
                for (a, &t) in acc.iter_mut().zip(&vt[j * d..(j + 1) * d]) {
                    *a += p * t.as_f64();
                }
            }
            for (o, &a) in out[i * d..(i + 1) * d].iter_mut().zip(&acc) {
                *o = S::lit(a);
            }
        }
        let t = Tensor::from_vec(&[m, d], out);
        let ng = self.ng(w) || self.ng(table);
        self.push(t, Op::MixRows(w, table), ng)
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, r) = ncr(&shape);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let cg = c / groups;
        let m = cg * r;
        let eps = S::lit(1e-5);
        let vx = self.value(x).data();
        let vg = self.value(gamma).data();
        let vb = self.value(beta).data();
        let mut mean = vec![S::zero(); n * groups];
        let mut rstd = vec![S::zero(); n * groups];
        let mut out = vec![S::zero(); vx.len()];
        let mf = S::lit(m as f64);
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * r;
                let seg = &vx[start..start + m];
                let mu = seg.iter().copied().sum::<S>() / mf;
                let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / mf;
                let rs = S::one() / (var + eps).sqrt();
                mean[ni * groups + gi] = mu;
                rstd[ni * groups + gi] = rs;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (gm, bt) = (vg[ch], vb[ch]);
                    let off = start + ci * r;
                    for j in 0..r {
                        out[off + j] = (vx[off + j] - mu) * rs * gm + bt;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&shape, out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            ng,
        )
    }

    /// 2×2 average pooling on NCHW.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2: odd spatial dims");
        let (h2, w2) = (s[2] / 2, s[3] / 2);
        let vx = self.value(x).data();
        let mut out = vec![S::zero(); s[0] * s[1] * h2 * w2];
        let q = S::lit(0.25);
        for (pi, plane) in out.chunks_mut(h2 * w2).enumerate() {
            let src = &vx[pi * s[2] * s[3]..(pi + 1) * s[2] * s[3]];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let a = src[2 * y * s[3] + 2 * xx];
                    let b = src[2 * y * s[3] + 2 * xx + 1];
                    let c = src[(2 * y + 1) * s[3] + 2 * xx];
                    let d = src[(2 * y + 1) * s[3] + 2 * xx + 1];
                    plane[y * w2 + xx] = (a + b + c + d) * q;
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], h2, w2], out);
        let ng = self.ng(x);
        self.push(t, Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2× upsampling on NCHW.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h2, w2) = (s[2] * 2, s[3] * 2);
        let vx = self.value(x).data();
        let mut out = vec![S::zero(); s[0] * s[1] * h2 * w2];
        for (pi, plane) in out.chunks_mut(h2 * w2).enumerate() {
            let src = &vx[pi * s[2] * s[3]..(pi + 1) * s[2] * s[3]];
            for y in 0..h2 {
                for xx in 0..w2 {
                    plane[y * w2 + xx] = src[(y / 2) * s[3] + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], h2, w2], out);
        let ng = self.ng(x);
        self.push(t, Op::Upsample2(x), ng)
    }

    /// Concatenate `[N, Ci, rest...]` tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let (n, _, r) = ncr(&first);
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, pr) = ncr(self.shape(p));
            assert!(pn == n && pr == r, "concat: incompatible shapes");
            ctot += pc;
        }
        let mut out = Vec::with_capacity(n * ctot * r);
        for ni in 0..n {
            for &p in parts {
                let (_, pc, _) = ncr(self.shape(p));
                let d = self.value(p).data();
                out.extend_from_slice(&d[ni * pc * r..(ni + 1) * pc * r]);
            }
        }
        let mut shape = first;
        shape[1] = ctot;
        let t = Tensor::from_vec(&shape, out);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::Concat(parts.to_vec()), ng)
    }

    /// `[N, C, H, W]` → `[N, H·W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let out = transpose_last2(self.value(x).data(), n, c, l);
        let t = Tensor::from_vec(&[n, l, c], out);
        let ng = self.ng(x);
        self.push(t, Op::ToTokens(x), ng)
    }

    /// `[N, H·W, C]` → `[N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[1], h * w, "from_tokens: token count");
        let out = transpose_last2(self.value(x).data(), s[0], s[1], s[2]);
        let t = Tensor::from_vec(&[s[0], s[2], h, w], out);
        let ng = self.ng(x);
        self.push(t, Op::FromTokens(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Scaled dot-product attention. `q: [N,Lq,D]`, `k: [N,Lk,D]`, `v: [N,Lk,Dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        let (n, lq, d) = (qs[0], qs[1], qs[2]);
        let (lk, dv) = (ks[1], vs[2]);
        assert!(ks[0] == n && vs[0] == n && ks[2] == d && vs[1] == lk, "attention shapes");
        let scale = S::lit(1.0 / (d as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![S::zero(); n * lq * lk];
        let mut out = vec![S::zero(); n * lq * dv];
        for ni in 0..n {
            let p = &mut probs[ni * lq * lk..(ni + 1) * lq * lk];
            gemm(
                lq,
                d,
                lk,
                &qd[ni * lq * d..(ni + 1) * lq * d],
                false,
                &kd[ni * lk * d..(ni + 1) * lk * d],
                true,
                p,
                false,
            );
            for row in p.chunks_mut(lk) {
                let mx = row
                    .iter()
                    .fold(S::neg_infinity(), |m, &v| if v * scale > m { v * scale } else { m });
                let mut z = S::zero();
                for e in row.iter_mut() {
                    *e = (*e * scale - mx).exp();
                    z += *e;
                }
                row.iter_mut().for_each(|e| *e = *e / z);
            }
            gemm(
                lq,
                lk,
                dv,
                p,
                false,
                &vd[ni * lk * dv..(ni + 1) * lk * dv],
                false,
                &mut out[ni * lq * dv..(ni + 1) * lq * dv],
                false,
            );
        }
        let t = Tensor::from_vec(&[n, lq, dv], out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(t, Op::Attention { q, k, v, probs }, ng)
    }

    /// Mean over all non-leading, non-channel axes: `[N, C, ...]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, r) = ncr(self.shape(x));
        let inv = S::lit(1.0 / r as f64);
        let out = self
            .value(x)
            .data()
            .chunks(r)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        let t = Tensor::from_vec(&[n, c], out);
        let ng = self.ng(x);
        self.push(t, Op::GlobalAvgPool(x), ng)
    }

    /// Mean squared error over every element; a scalar `[1]` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mse");
        let va = self.value(a).data();
        let vb = self.value(b).data();
        // Accumulate in f64 so the reduction is insensitive to summation order
        // at the tolerance tests care about.
        let s: f64 = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let t = Tensor::scalar(S::lit(s / va.len() as f64));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mse(a, b), ng)
    }

    /// Row-wise softmax of `[N, K]` logits.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2, "softmax expects [N, K]");
        let t = Tensor::from_vec(&s, softmax_rows(self.value(logits).data(), s[1]));
        let ng = self.ng(logits);
        self.push(t, Op::Softmax(logits), ng)
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s[0], labels.len(), "cross_entropy: label count");
        let k = s[1];
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < k, "cross_entropy: label {l} out of range");
            loss -= probs[i * k + l].as_f64().max(1e-30).ln();
        }
        let t = Tensor::scalar(S::lit(loss / labels.len() as f64));
        let ng = self.ng(logits);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        out: &mut Gradients<S>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(i, g);
            }
            Op::Param { store, index } => {
                out.params.insert((*store, *index), g);
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let vb = self.value(*b).data();
                    let d = g.data().iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.shape(), d));
                }
                if self.ng(*b) {
                    let va = self.value(*a).data();
                    let d = g.data().iter().zip(va).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.reshape(&shape));
            }
            Op::AddChannel { x, bias } => {
                if self.ng(*bias) {
                    let (_, c, r) = ncr(g.shape());
                    let mut db = vec![S::zero(); c];
                    for (j, chunk) in g.data().chunks(r).enumerate() {
                        db[j % c] += chunk.iter().copied().sum::<S>();
                    }
                    let bshape = self.shape(*bias).to_vec();
                    self.acc(grads, *bias, Tensor::from_vec(&bshape, db));
                }
                self.acc(grads, *x, g);
            }
            Op::AddSampleChannel { x, v } => {
                if self.ng(*v) {
                    let (n, c, r) = ncr(g.shape());
                    let dv = g.data().chunks(r).map(|ch| ch.iter().copied().sum::<S>()).collect();
                    self.acc(grads, *v, Tensor::from_vec(&[n, c], dv));
                }
                self.acc(grads, *x, g);
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                let d = g
                    .data()
                    .iter()
                    .zip(va)
                    .map(|(&gy, &x)| {
                        let s = S::one() / (S::one() + (-x).exp());
                        gy * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.shape(), d));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let geo = ConvGeom::new(&xs, &ws, *stride, *pad);
                let dmat = batch_to_mat(g.data(), geo.n, geo.o, geo.p());
                if self.ng(*w) {
                    let cols = im2col(self.value(*x).data(), &geo);
                    let mut dw = vec![S::zero(); geo.o * geo.ckk()];
                    gemm(geo.o, geo.cols(), geo.ckk(), &dmat, false, &cols, true, &mut dw, false);
                    self.acc(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if self.ng(*x) {
                    let mut dcols = vec![S::zero(); geo.ckk() * geo.cols()];
                    gemm(
                        geo.ckk(),
                        geo.o,
                        geo.cols(),
                        self.value(*w).data(),
                        true,
                        &dmat,
                        false,
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, &geo);
                    self.acc(grads, *x, Tensor::from_vec(&xs, dx));
                }
            }
            Op::Linear { x, w } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (m, fin, fout) = (xs[0], xs[1], ws[0]);
                if self.ng(*x) {
                    let mut dx = vec![S::zero(); m * fin];
                    gemm(m, fout, fin, g.data(), false, self.value(*w).data(), false, &mut dx, false);
                    self.acc(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![S::zero(); fout * fin];
                    gemm(fout, m, fin, g.data(), true, self.value(*x).data(), false, &mut dw, false);
                    self.acc(grads, *w, Tensor::from_vec(&ws, dw));
                }
            }
            Op::MatMul(a, b) | Op::MixRows(a, b) => {
                let as_ = self.shape(*a).to_vec();
                let bs = self.shape(*b).to_vec();
                let (m, k, n) = (as_[0], as_[1], bs[1]);
                if self.ng(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    self.acc(grads, *a, Tensor::from_vec(&as_, da));
                }
                if self.ng(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    self.acc(grads, *b, Tensor::from_vec(&bs, db));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let shape = self.shape(*x).to_vec();
                let (n, c, r) = ncr(&shape);
                let cg = c / groups;
                let m = cg * r;
                let mf = S::lit(m as f64);
                let vx = self.value(*x).data();
                let vg = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = vec![S::zero(); vx.len()];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let mu = mean[ni * groups + gi];
                        let rs = rstd[ni * groups + gi];
                        let start = (ni * c + gi * cg) * r;
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let off = start + ci * r;
                            for j in 0..r {
                                let xh = (vx[off + j] - mu) * rs;
                                let dy = gd[off + j];
                                dgamma[ch] += dy * xh;
                                dbeta[ch] += dy;
                                let dxh = dy * vg[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let a = sum_dxh / mf;
                        let b = sum_dxh_xh / mf;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let off = start + ci * r;
                            for j in 0..r {
                                let xh = (vx[off + j] - mu) * rs;
                                let dxh = gd[off + j] * vg[ch];
                                dx[off + j] = rs * (dxh - a - xh * b);
                            }
                        }
                    }
                }
                let gshape = self.shape(*gamma).to_vec();
                self.acc(grads, *gamma, Tensor::from_vec(&gshape, dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&gshape, dbeta));
                self.acc(grads, *x, Tensor::from_vec(&shape, dx));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (h2, w2) = (s[2] / 2, s[3] / 2);
                let q = S::lit(0.25);
                let mut dx = vec![S::zero(); s.iter().product()];
                for (pi, plane) in dx.chunks_mut(s[2] * s[3]).enumerate() {
                    let src = &g.data()[pi * h2 * w2..(pi + 1) * h2 * w2];
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            plane[y * s[3] + xx] = src[(y / 2) * w2 + xx / 2] * q;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&s, dx));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (h2, w2) = (s[2] * 2, s[3] * 2);
                let mut dx = vec![S::zero(); s.iter().product()];
                for (pi, plane) in dx.chunks_mut(s[2] * s[3]).enumerate() {
                    let src = &g.data()[pi * h2 * w2..(pi + 1) * h2 * w2];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            plane[(y / 2) * s[3] + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&s, dx));
            }
            Op::Concat(parts) => {
                let (n, ctot, r) = ncr(g.shape());
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let pc = ps[1];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * pc * r);
                        for ni in 0..n {
                            let base = (ni * ctot + offset) * r;
                            d.extend_from_slice(&g.data()[base..base + pc * r]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&ps, d));
                    }
                    offset += pc;
                }
            }
            Op::ToTokens(x) => {
                let s = self.shape(*x).to_vec();
                let d = transpose_last2(g.data(), s[0], s[2] * s[3], s[1]);
                self.acc(grads, *x, Tensor::from_vec(&s, d));
            }
            Op::FromTokens(x) => {
                let s = self.shape(*x).to_vec();
                let d = transpose_last2(g.data(), s[0], s[2], s[1]);
                self.acc(grads, *x, Tensor::from_vec(&s, d));
            }
            Op::Attention { q, k, v, probs } => {
                let qs = self.shape(*q).to_vec();
                let ks = self.shape(*k).to_vec();
                let vs = self.shape(*v).to_vec();
                let (n, lq, d) = (qs[0], qs[1], qs[2]);
                let (lk, dv) = (ks[1], vs[2]);
                let scale = S::lit(1.0 / (d as f64).sqrt());
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let gd = g.data();
                let mut dq = vec![S::zero(); qd.len()];
                let mut dk = vec![S::zero(); kd.len()];
                let mut dvv = vec![S::zero(); vd.len()];
                let mut dp = vec![S::zero(); lq * lk];
                for ni in 0..n {
                    let p = &probs[ni * lq * lk..(ni + 1) * lq * lk];
                    let go = &gd[ni * lq * dv..(ni + 1) * lq * dv];
                    let qn = &qd[ni * lq * d..(ni + 1) * lq * d];
                    let kn = &kd[ni * lk * d..(ni + 1) * lk * d];
                    let vn = &vd[ni * lk * dv..(ni + 1) * lk * dv];
                    gemm(lk, lq, dv, p, true, go, false, &mut dvv[ni * lk * dv..(ni + 1) * lk * dv], false);
                    gemm(lq, dv, lk, go, false, vn, true, &mut dp, false);
                    for (prow, drow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                        let dot: S = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for (e, &pv) in drow.iter_mut().zip(prow) {
                            *e = pv * (*e - dot) * scale;
                        }
                    }
                    gemm(lq, lk, d, &dp, false, kn, false, &mut dq[ni * lq * d..(ni + 1) * lq * d], false);
                    gemm(lk, lq, d, &dp, true, qn, false, &mut dk[ni * lk * d..(ni + 1) * lk * d], false);
                }
                self.acc(grads, *q, Tensor::from_vec(&qs, dq));
                self.acc(grads, *k, Tensor::from_vec(&ks, dk));
                self.acc(grads, *v, Tensor::from_vec(&vs, dvv));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let (_, _, r) = ncr(&s);
                let inv = S::lit(1.0 / r as f64);
                let mut dx = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, r));
                }
                self.acc(grads, *x, Tensor::from_vec(&s, dx));
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = g.data()[0] * S::lit(2.0 / va.len() as f64);
                let diff: Vec<S> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * k).collect();
                let shape = self.shape(*a).to_vec();
                if self.ng(*b) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::from_vec(&shape, neg));
                }
                self.acc(grads, *a, Tensor::from_vec(&shape, diff));
            }
            Op::Softmax(x) => {
                let s = self.shape(*x).to_vec();
                let k = s[1];
                let p = self.nodes[i].value.data();
                let mut d = Vec::with_capacity(p.len());
                for (pr, gr) in p.chunks(k).zip(g.data().chunks(k)) {
                    let dot: S = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.acc(grads, *x, Tensor::from_vec(&s, d));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(*logits).to_vec();
                let k = s[1];
                let scale = g.data()[0] * S::lit(1.0 / labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= S::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, Tensor::from_vec(&s, d));
            }
        }
    }
}

pub fn softmax_rows<S: Scalar>(data: &[S], k: usize) -> Vec<S> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for e in row.iter_mut() {
            *e = (*e - mx).exp();
            z += *e;
        }
        row.iter_mut().for_each(|e| *e = *e / z);
    }
    out
}

/// `[B, R, C]` → `[B, C, R]`.
fn transpose_last2<S: Scalar>(data: &[S], b: usize, r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for bi in 0..b {
        let src = &data[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn cols(&self) -> usize {
        self.n * self.p()
    }
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfold input patches into a `[C·KH·KW, N·Ho·Wo]` matrix.
fn im2col<S: Scalar>(x: &[S], geo: &ConvGeom) -> Vec<S> {
    let cols = geo.cols();
    let mut out = vec![S::zero(); geo.ckk() * cols];
    let (h, w) = (geo.h as isize, geo.w as isize);
    par::chunks_mut(&mut out, cols, |row, dst| {
        let kj = row % geo.kw;
        let ki = (row / geo.kw) % geo.kh;
        let ci = row / (geo.kw * geo.kh);
        for ni in 0..geo.n {
            let src = &x[(ni * geo.c + ci) * geo.h * geo.w..(ni * geo.c + ci + 1) * geo.h * geo.w];
            let dst_n = &mut dst[ni * geo.p()..(ni + 1) * geo.p()];
            for oy in 0..geo.ho {
                let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                let drow = &mut dst_n[oy * geo.wo..(oy + 1) * geo.wo];
                if iy < 0 || iy >= h {
                    continue;
                }
                let srow = &src[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                for (ox, d) in drow.iter_mut().enumerate() {
                    let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                    if ix >= 0 && ix < w {
                        *d = srow[ix as usize];
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into an NCHW buffer.
fn col2im<S: Scalar>(dcols: &[S], geo: &ConvGeom) -> Vec<S> {
    let per = geo.c * geo.h * geo.w;
    let mut dx = vec![S::zero(); geo.n * per];
    let cols = geo.cols();
    let (h, w) = (geo.h as isize, geo.w as isize);
    par::chunks_mut(&mut dx, per, |ni, dst| {
        for row in 0..geo.ckk() {
            let kj = row % geo.kw;
            let ki = (row / geo.kw) % geo.kh;
            let ci = row / (geo.kw * geo.kh);
            let src = &dcols[row * cols + ni * geo.p()..row * cols + (ni + 1) * geo.p()];
            let plane = &mut dst[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
            for oy in 0..geo.ho {
                let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                let prow = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                let srow = &src[oy * geo.wo..(oy + 1) * geo.wo];
                for (ox, &v) in srow.iter().enumerate() {
                    let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                    if ix >= 0 && ix < w {
                        prow[ix as usize] += v;
                    }
                }
            }
        }
    });
    dx
}

/// `[O, N·P]` → `[N, O, P]`.
fn mat_to_batch<S: Scalar>(m: &[S], n: usize, o: usize, p: usize) -> Vec<S> {
    if n == 1 {
        return m.to_vec();
    }
    let mut out = vec![S::zero(); n * o * p];
    for oi in 0..o {
        for ni in 0..n {
            out[(ni * o + oi) * p..(ni * o + oi + 1) * p]
                .copy_from_slice(&m[oi * n * p + ni * p..oi * n * p + (ni + 1) * p]);
        }
    }
    out
}

/// `[N, O, P]` → `[O, N·P]`.
fn batch_to_mat<S: Scalar>(b: &[S], n: usize, o: usize, p: usize) -> Vec<S> {
    if n == 1 {
        return b.to_vec();
    }
    let mut out = vec![S::zero(); n * o * p];
    for oi in 0..o {
        for ni in 0..n {
            out[oi * n * p + ni * p..oi * n * p + (ni + 1) * p]
                .copy_from_slice(&b[(ni * o + oi) * p..(ni * o + oi + 1) * p]);
        }
    }
    out
}
