//! Define-by-run tape with reverse-mode differentiation.
//!
//! Feature tensors follow a channels-last layout: `[batch, length, channels]`.
//! Every op records what its backward pass needs at forward time; nodes that
//! do not depend on a gradient-requiring input are skipped during backward.

use super::gemm::{gemm, MatRef};
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BcastAdd {
        x: Var,
        y: Var,
    },
    BcastMul {
        x: Var,
        y: Var,
    },
    BroadcastTo {
        x: Var,
    },
    Scale(Var, f64),
    Silu(Var),
    GroupNorm {
        x: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    TemporalMix {
        w: Var,
        x: Var,
    },
    Attend {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Sinusoidal {
        t: Var,
        freqs: Vec<f64>,
    },
    Mse(Var, Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass. Parameters are borrowed from a [`ParamStore`].
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    params_require_grad: bool,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

/// Offsets of a source tensor broadcast (size-1 axes) against `out_shape`.
/// Calls `f(out_row_offset, src_row_offset, src_inner_stride)` for every row.
fn for_each_bcast_row(out_shape: &[usize], src_shape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    assert_eq!(rank, src_shape.len(), "broadcast needs equal ranks");
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        assert!(
            src_shape[i] == out_shape[i] || src_shape[i] == 1,
            "cannot broadcast {src_shape:?} to {out_shape:?}"
        );
        strides[i] = if src_shape[i] == 1 && out_shape[i] != 1 { 0 } else { acc };
        acc *= src_shape[i];
    }
    let last = out_shape[rank - 1];
    let rows: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for row in 0..rows {
        let src_off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(row * last, src_off, strides[rank - 1]);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= kernel, "sequence too short for kernel");
    (len + 2 * pad - kernel) / stride + 1
}

impl<'p> Graph<'p> {
    /// Training pass: parameters accumulate gradients.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_store(Some(store), true)
    }

    /// Forward-only pass over a parameter store.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_store(Some(store), false)
    }

    /// Graph without parameters (leaf variables only).
    pub fn detached() -> Graph<'static> {
        Graph::with_store(None, false)
    }

    fn with_store(store: Option<&'p ParamStore>, params_require_grad: bool) -> Self {
        let n = store.map_or(0, ParamStore::len);
        Self {
            store,
            params_require_grad,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; n],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.param {
            Some(id) => self.store.expect("param node without store").get(id),
            None => node.value.as_ref().expect("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            requires_grad: self.params_require_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a[.., K] @ w[K, N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.rank(), 2, "matmul weight must be 2-d");
        let (k, n) = (wv.dim(0), wv.dim(1));
        assert_eq!(
            av.last_dim(),
            k,
            "matmul inner dims {:?} x {:?}",
            av.shape(),
            wv.shape()
        );
        let rows = av.rows();
        let mut out = vec![0.0; rows * n];
        gemm(
            MatRef::new(av.data(), rows, k),
            MatRef::new(wv.data(), k, n),
            &mut out,
            0.0,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires(a) || self.requires(w);
        self.push(Tensor::new(&shape, out), Op::MatMul { a, w }, rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        assert_eq!(xv.last_dim(), n, "bias size mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.requires(x) || self.requires(b);
        self.push(out, Op::AddBias { x, b }, rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    fn bcast_zip(&mut self, x: Var, y: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = xv.clone();
        let last = xv.last_dim();
        let yd = yv.data();
        let od = out.data_mut();
        for_each_bcast_row(xv.shape(), yv.shape(), |o, s, st| {
            for i in 0..last {
                od[o + i] = f(od[o + i], yd[s + i * st]);
            }
        });
        out
    }

    /// `x + y` where `y` broadcasts over its size-1 axes.
    pub fn bcast_add(&mut self, x: Var, y: Var) -> Var {
        let t = self.bcast_zip(x, y, |a, b| a + b);
        let rg = self.requires(x) || self.requires(y);
        self.push(t, Op::BcastAdd { x, y }, rg)
    }

    /// `x * y` where `y` broadcasts over its size-1 axes.
    pub fn bcast_mul(&mut self, x: Var, y: Var) -> Var {
        let t = self.bcast_zip(x, y, |a, b| a * b);
        let rg = self.requires(x) || self.requires(y);
        self.push(t, Op::BcastMul { x, y }, rg)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(shape);
        let last = shape[shape.len() - 1];
        let xd = xv.data();
        let od = out.data_mut();
        for_each_bcast_row(shape, xv.shape(), |o, s, st| {
            for i in 0..last {
                od[o + i] = xd[s + i * st];
            }
        });
        let rg = self.requires(x);
        self.push(out, Op::BroadcastTo { x }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * c).collect());
        let rg = self.requires(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * sigmoid(v)).collect());
        let rg = self.requires(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Group normalization over `[B, L, C]` without affine terms.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "group_norm expects [B, L, C]");
        let (b, l, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert!(
            groups > 0 && c % groups == 0,
            "channels {c} not divisible by {groups} groups"
        );
        let cg = c / groups;
        let count = (l * cg) as f64;
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        let mut mean = vec![0.0; b * groups];
        let mut rstd = vec![0.0; b * groups];
        for bi in 0..b {
            for g in 0..groups {
                let mut s = 0.0;
                for li in 0..l {
                    let base = (bi * l + li) * c + g * cg;
                    s += xd[base..base + cg].iter().sum::<f64>();
                }
                let mu = s / count;
                let mut var = 0.0;
                for li in 0..l {
                    let base = (bi * l + li) * c + g * cg;
                    var += xd[base..base + cg].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                let r = 1.0 / (var / count + eps).sqrt();
                for li in 0..l {
                    let base = (bi * l + li) * c + g * cg;
                    for j in base..base + cg {
                        out[j] = (xd[j] - mu) * r;
                    }
                }
                mean[bi * groups + g] = mu;
                rstd[bi * groups + g] = r;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor::new(&shape, out), Op::GroupNorm { x, groups, mean, rstd }, rg)
    }

    /// Unfolds `[B, L, C]` into `[B, L_out, kernel * C]` convolution windows
    /// (zero padding). Window element `j * C + c` is `x[b, o*stride + j - pad, c]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "im2col expects [B, L, C]");
        let (b, l, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let lo = conv_out_len(l, kernel, stride, pad);
        let xd = xv.data();
        let mut out = vec![0.0; b * lo * kernel * c];
        for bi in 0..b {
            for o in 0..lo {
                let dst = (bi * lo + o) * kernel * c;
                for j in 0..kernel {
                    let src = (o * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= l {
                        continue;
                    }
                    let s = (bi * l + src as usize) * c;
                    out[dst + j * c..dst + (j + 1) * c].copy_from_slice(&xd[s..s + c]);
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            Tensor::new(&[b, lo, kernel * c], out),
            Op::Im2Col { x, kernel, stride, pad },
            rg,
        )
    }

    /// Nearest-neighbour resampling of `[B, L, C]` to `[B, out_len, C]`.
    pub fn upsample(&mut self, x: Var, out_len: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "upsample expects [B, L, C]");
        let (b, l, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let xd = xv.data();
        let mut out = vec![0.0; b * out_len * c];
        for bi in 0..b {
            for o in 0..out_len {
                let src = o * l / out_len;
                let s = (bi * l + src) * c;
                let d = (bi * out_len + o) * c;
                out[d..d + c].copy_from_slice(&xd[s..s + c]);
            }
        }
        let rg = self.requires(x);
        self.push(Tensor::new(&[b, out_len, c], out), Op::Upsample { x }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            shape[axis] += s[axis];
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let len = pv.dim(axis) * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset;
                out[dst..dst + len].copy_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (outer, total, inner) = split_axis(xv.shape(), axis);
        assert!(start + len <= total, "slice out of range");
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            out.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let rg = self.requires(x);
        self.push(Tensor::new(&shape, out), Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.requires(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Mixes positions along the length axis: `out[b] = w @ x[b]` with
    /// `w: [L_out, L_in]`, `x: [B, L_in, C]`.
    pub fn temporal_mix(&mut self, w: Var, x: Var) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        assert_eq!(xv.rank(), 3, "temporal_mix expects [B, L, C]");
        let (b, li, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(wv.shape(), &[wv.dim(0), li], "temporal_mix weight mismatch");
        let lo = wv.dim(0);
        let mut out = vec![0.0; b * lo * c];
        for bi in 0..b {
            gemm(
                MatRef::new(wv.data(), lo, li),
                MatRef::new(&xv.data()[bi * li * c..(bi + 1) * li * c], li, c),
                &mut out[bi * lo * c..(bi + 1) * lo * c],
                0.0,
            );
        }
        let rg = self.requires(w) || self.requires(x);
        self.push(Tensor::new(&[b, lo, c], out), Op::TemporalMix { w, x }, rg)
    }

    /// Multi-head attention of one query per batch row over a token set.
    ///
    /// `q: [Bq, C]` with `Bq` either 1 (shared query) or `B`; `k, v: [B, T, C]`.
    /// Returns `[B, C]`.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(kv.shape(), vv.shape(), "key/value shape mismatch");
        let (b, t, c) = (kv.dim(0), kv.dim(1), kv.dim(2));
        let bq = qv.dim(0);
        assert!(bq == 1 || bq == b, "query batch must be 1 or {b}");
        assert_eq!(qv.dim(1), c, "query width mismatch");
        assert!(heads > 0 && c % heads == 0, "width {c} not divisible by {heads} heads");
        let d = c / heads;
        let inv = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; b * heads * t];
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let qrow = &qd[(if bq == 1 { 0 } else { bi }) * c..][..c];
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * t..][..t];
                let mut max = f64::NEG_INFINITY;
                for (ti, pv) in p.iter_mut().enumerate() {
                    let krow = &kd[(bi * t + ti) * c + h * d..][..d];
                    let s: f64 = qrow[h * d..(h + 1) * d].iter().zip(krow).map(|(a, b)| a * b).sum();
                    *pv = s * inv;
                    max = max.max(*pv);
                }
                let mut z = 0.0;
                for pv in p.iter_mut() {
                    *pv = (*pv - max).exp();
                    z += *pv;
                }
                for pv in p.iter_mut() {
                    *pv /= z;
                }
                let orow = &mut out[bi * c + h * d..][..d];
                for (ti, pv) in p.iter().enumerate() {
                    let vrow = &vd[(bi * t + ti) * c + h * d..][..d];
                    for (o, vvv) in orow.iter_mut().zip(vrow) {
                        *o += pv * vvv;
                    }
                }
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(Tensor::new(&[b, c], out), Op::Attend { q, k, v, heads, probs }, rg)
    }

    /// Attention weights `[B, heads, T]` recorded by an [`Graph::attend`] node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attend { k, heads, probs, .. } => {
                let ks = self.value(*k).shape();
                Some(Tensor::new(&[ks[0], *heads, ks[1]], probs.clone()))
            }
            _ => None,
        }
    }

    /// Sinusoidal embedding of a `[B]` tensor of (real-valued) positions into
    /// `[B, dim]`: first half `sin(t * f_i)`, second half `cos(t * f_i)` with
    /// `f_i = exp(-ln(10000) * i / (dim/2 - 1))`.
    pub fn sinusoidal(&mut self, t: Var, dim: usize) -> Var {
        assert!(dim >= 4 && dim.is_multiple_of(2), "embedding dim must be even and >= 4");
        let half = dim / 2;
        let scale = (10000f64).ln() / (half - 1) as f64;
        let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * scale).exp()).collect();
        let tv = self.value(t);
        assert_eq!(tv.rank(), 1, "sinusoidal expects [B]");
        let b = tv.len();
        let mut out = vec![0.0; b * dim];
        for (bi, &tt) in tv.data().iter().enumerate() {
            for (i, f) in freqs.iter().enumerate() {
                out[bi * dim + i] = (tt * f).sin();
                out[bi * dim + half + i] = (tt * f).cos();
            }
        }
        let rg = self.requires(t);
        self.push(Tensor::new(&[b, dim], out), Op::Sinusoidal { t, freqs }, rg)
    }

    /// Mean squared difference, as a 1-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.len() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (k, n) = (wv.dim(0), wv.dim(1));
                let rows = av.rows();
                if self.requires(*a) {
                    let mut ga = vec![0.0; rows * k];
                    gemm(MatRef::new(gd, rows, n), MatRef::new(wv.data(), k, n).t(), &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), ga));
                }
                if self.requires(*w) {
                    self.accumulate_with(grads, *w, |gw| {
                        gemm(MatRef::new(av.data(), rows, k).t(), MatRef::new(gd, rows, n), gw, 1.0);
                    });
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                let n = self.value(*b).len();
                self.accumulate_with(grads, *b, |gb| {
                    for row in gd.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Tensor::new(g.shape(), gd.iter().map(|v| -v).collect());
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let ga = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), ga));
                }
                if self.requires(*b) {
                    let gb = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), gb));
                }
            }
            Op::BcastAdd { x, y } => {
                self.accumulate(grads, *x, g.clone());
                let last = g.last_dim();
                let yshape = self.value(*y).shape().to_vec();
                self.accumulate_with(grads, *y, |gy| {
                    for_each_bcast_row(g.shape(), &yshape, |o, s, st| {
                        for i in 0..last {
                            gy[s + i * st] += gd[o + i];
                        }
                    });
                });
            }
            Op::BcastMul { x, y } => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let last = g.last_dim();
                if self.requires(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    let yd = yv.data();
                    for_each_bcast_row(g.shape(), yv.shape(), |o, s, st| {
                        for i in 0..last {
                            gx[o + i] = gd[o + i] * yd[s + i * st];
                        }
                    });
                    self.accumulate(grads, *x, Tensor::new(g.shape(), gx));
                }
                let xd = xv.data();
                self.accumulate_with(grads, *y, |gy| {
                    for_each_bcast_row(g.shape(), yv.shape(), |o, s, st| {
                        for i in 0..last {
                            gy[s + i * st] += gd[o + i] * xd[o + i];
                        }
                    });
                });
            }
            Op::BroadcastTo { x } => {
                let last = g.last_dim();
                let xshape = self.value(*x).shape().to_vec();
                self.accumulate_with(grads, *x, |gx| {
                    for_each_bcast_row(g.shape(), &xshape, |o, s, st| {
                        for i in 0..last {
                            gx[s + i * st] += gd[o + i];
                        }
                    });
                });
            }
            Op::Scale(x, c) => {
                let t = Tensor::new(g.shape(), gd.iter().map(|v| v * c).collect());
                self.accumulate(grads, *x, t);
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), gx));
            }
            Op::GroupNorm { x, groups, mean, rstd } => {
                let xv = self.value(*x);
                let (b, l, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let cg = c / groups;
                let count = (l * cg) as f64;
                let xd = xv.data();
                let mut gx = vec![0.0; xd.len()];
                for bi in 0..b {
                    for gi in 0..*groups {
                        let mu = mean[bi * groups + gi];
                        let r = rstd[bi * groups + gi];
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for li in 0..l {
                            let base = (bi * l + li) * c + gi * cg;
                            for j in base..base + cg {
                                sg += gd[j];
                                sgx += gd[j] * (xd[j] - mu) * r;
                            }
                        }
                        let (mg, mgx) = (sg / count, sgx / count);
                        for li in 0..l {
                            let base = (bi * l + li) * c + gi * cg;
                            for j in base..base + cg {
                                let xhat = (xd[j] - mu) * r;
                                gx[j] = r * (gd[j] - mg - xhat * mgx);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), gx));
            }
            Op::Im2Col { x, kernel, stride, pad } => {
                let xshape = self.value(*x).shape().to_vec();
                let (b, l, c) = (xshape[0], xshape[1], xshape[2]);
                let lo = g.dim(1);
                self.accumulate_with(grads, *x, |gx| {
                    for bi in 0..b {
                        for o in 0..lo {
                            let src = (bi * lo + o) * kernel * c;
                            for j in 0..*kernel {
                                let pos = (o * stride + j) as isize - *pad as isize;
                                if pos < 0 || pos as usize >= l {
                                    continue;
                                }
                                let d = (bi * l + pos as usize) * c;
                                for ci in 0..c {
                                    gx[d + ci] += gd[src + j * c + ci];
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x } => {
                let xshape = self.value(*x).shape().to_vec();
                let (b, l, c) = (xshape[0], xshape[1], xshape[2]);
                let out_len = g.dim(1);
                self.accumulate_with(grads, *x, |gx| {
                    for bi in 0..b {
                        for o in 0..out_len {
                            let src = o * l / out_len;
                            let s = (bi * l + src) * c;
                            let d = (bi * out_len + o) * c;
                            for ci in 0..c {
                                gx[s + ci] += gd[d + ci];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).dim(*axis) * inner;
                    self.accumulate_with(grads, p, |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            for (d, s) in gp[o * len..(o + 1) * len].iter_mut().zip(&gd[src..src + len]) {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.value(*x).shape().to_vec();
                let (outer, total, inner) = split_axis(&xshape, *axis);
                let len = g.dim(*axis);
                self.accumulate_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let d = (o * total + start) * inner;
                        for (a, b) in gx[d..d + len * inner]
                            .iter_mut()
                            .zip(&gd[o * len * inner..(o + 1) * len * inner])
                        {
                            *a += b;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::TemporalMix { w, x } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let (b, li, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let lo = wv.dim(0);
                if self.requires(*x) {
                    let mut gx = vec![0.0; b * li * c];
                    for bi in 0..b {
                        gemm(
                            MatRef::new(wv.data(), lo, li).t(),
                            MatRef::new(&gd[bi * lo * c..(bi + 1) * lo * c], lo, c),
                            &mut gx[bi * li * c..(bi + 1) * li * c],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), gx));
                }
                self.accumulate_with(grads, *w, |gw| {
                    for bi in 0..b {
                        gemm(
                            MatRef::new(&gd[bi * lo * c..(bi + 1) * lo * c], lo, c),
                            MatRef::new(&xv.data()[bi * li * c..(bi + 1) * li * c], li, c).t(),
                            gw,
                            1.0,
                        );
                    }
                });
            }
            Op::Attend { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (b, t, c) = (kv.dim(0), kv.dim(1), kv.dim(2));
                let bq = qv.dim(0);
                let d = c / heads;
                let inv = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; t];
                for bi in 0..b {
                    let qi = if bq == 1 { 0 } else { bi };
                    for h in 0..*heads {
                        let p = &probs[(bi * heads + h) * t..][..t];
                        let grow = &gd[bi * c + h * d..][..d];
                        for ti in 0..t {
                            let off = (bi * t + ti) * c + h * d;
                            let mut acc = 0.0;
                            for di in 0..d {
                                acc += grow[di] * vd[off + di];
                                gv[off + di] += p[ti] * grow[di];
                            }
                            dp[ti] = acc;
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for ti in 0..t {
                            let ds = p[ti] * (dp[ti] - dot) * inv;
                            let off = (bi * t + ti) * c + h * d;
                            for di in 0..d {
                                gq[qi * c + h * d + di] += ds * kd[off + di];
                                gk[off + di] += ds * qd[qi * c + h * d + di];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape(), gq));
                self.accumulate(grads, *k, Tensor::new(kv.shape(), gk));
                self.accumulate(grads, *v, Tensor::new(vv.shape(), gv));
            }
            Op::Sinusoidal { t, freqs } => {
                let td = self.value(*t).data();
                let half = freqs.len();
                let dim = 2 * half;
                let gt = td
                    .iter()
                    .enumerate()
                    .map(|(bi, &tt)| {
                        freqs
                            .iter()
                            .enumerate()
                            .map(|(i, f)| {
                                f * (tt * f).cos() * gd[bi * dim + i] - f * (tt * f).sin() * gd[bi * dim + half + i]
                            })
                            .sum()
                    })
                    .collect();
                self.accumulate(grads, *t, Tensor::new(&[td.len()], gt));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = 2.0 * gd[0] / av.len() as f64;
                let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * scale).collect();
                if self.requires(*b) {
                    let neg = diff.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), neg));
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), diff));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let t = Tensor::full(xv.shape(), gd[0] / xv.len() as f64);
                self.accumulate(grads, *x, t);
            }
            Op::Sum(x) => {
                let t = Tensor::full(self.value(*x).shape(), gd[0]);
                self.accumulate(grads, *x, t);
            }
        }
    }
}
