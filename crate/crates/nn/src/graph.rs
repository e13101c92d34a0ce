//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves copied from a [`ParamStore`]; [`Graph::backward`] walks the tape in
//! reverse and returns one gradient per parameter that was touched.

use std::collections::HashMap;

use crate::exec;
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Exp(Var),
    Silu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    AddChannelBias(Var, Var),
    AddRowBroadcast(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
    Reshape(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    PrependToken(Var, Var),
    DropFirstToken(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for the parameters used in one forward pass.
#[derive(Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<(ParamId, Tensor)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Elementwise accumulation of another pass over the same parameters.
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (id, g) in other.grads {
            match self.grads.iter_mut().find(|(p, _)| *p == id) {
                Some((_, t)) => t.add_assign(&g),
                None => self.grads.push((id, g)),
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Parameter leaf. Repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f32::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu(x).0);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean() as f32;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// `x`: `[n, cin, h, w]`, `w`: `[cout, cin, k, k]`, `b`: `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).nchw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-d");
        assert_eq!(ws[1], cin, "conv input channels {cin} vs weight {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k: ws[2],
            stride,
            pad,
        };
        let cout = ws[0];
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
        );
        let t = Tensor::new(&[n, cout, ho, wo], out).expect("conv shape");
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
            },
            &ins,
        )
    }

    /// `y = x·wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let din = *xs.last().expect("non-scalar input");
        assert_eq!(ws[1], din, "linear in-features {din} vs weight {ws:?}");
        let dout = ws[0];
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0f32; rows * dout];
        let mut beta = 0.0;
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bv);
            }
            beta = 1.0;
        }
        kernels::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            beta,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(&shape, out).expect("linear shape");
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Linear { x, w, b }, &ins)
    }

    /// `a`: `[bt, m, k]`; `b`: `[bt, k, n]`, or `[bt, n, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(sb[0], bt, "batch mismatch");
        assert_eq!(kb, k, "inner dimension mismatch {sa:?} x {sb:?}");
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; bt * m * n];
        exec::for_each_chunk_mut(&mut out, m * n, |i, y| {
            kernels::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                y,
                0.0,
            );
        });
        let t = Tensor::new(&[bt, m, n], out).expect("bmm shape");
        self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().unwrap();
        let y = kernels::softmax_rows(self.value(a).data(), d);
        let t = Tensor::new(self.shape(a), y).unwrap();
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let (y, xhat, inv_std) = kernels::group_norm_forward(
            self.value(x).data(),
            n,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            1e-5,
        );
        let t = Tensor::new(&[n, c, h, w], y).unwrap();
        self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xv.len()];
        let mut y = vec![0.0f32; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        for (r, row) in xv.chunks(d).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = (1.0 / (var + 1e-5).sqrt()) as f32;
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean as f32) * inv;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), y).unwrap();
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let y = kernels::upsample_nearest2x(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], y).unwrap();
        self.push(t, Op::Upsample2x(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).nchw();
        let (nb, cb, hb, wb) = self.value(b).nchw();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let hw = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out).unwrap();
        self.push(t, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&xd[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let t = Tensor::new(&[n, len, h, w], out).unwrap();
        self.push(t, Op::SliceChannels { x, start }, &[x])
    }

    /// `x`: `[n, c, h, w]` plus `v`: `[n, c]` broadcast over space.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        assert_eq!(self.shape(v), &[n, c], "channel bias shape");
        let hw = h * w;
        let vd = self.value(v).data().to_vec();
        let mut t = self.value(x).clone();
        for (p, chunk) in t.data_mut().chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|e| *e += vd[p]);
        }
        self.push(t, Op::AddChannelBias(x, v), &[x, v])
    }

    /// `x`: `[n, s, d]` plus `p`: `[s, d]` broadcast over the batch.
    pub fn add_row_broadcast(&mut self, x: Var, p: Var) -> Var {
        let per = self.value(p).numel();
        assert_eq!(self.value(x).numel() % per, 0, "row broadcast shape");
        let pd = self.value(p).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(per) {
            chunk.iter_mut().zip(&pd).for_each(|(a, b)| *a += b);
        }
        self.push(t, Op::AddRowBroadcast(x, p), &[x, p])
    }

    /// `[n, c, h, w]` to `[n, h·w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(s * hw + p) * c + ch] = xd[(s * c + ch) * hw + p];
                }
            }
        }
        let t = Tensor::new(&[n, hw, c], out).unwrap();
        self.push(t, Op::ToTokens(x), &[x])
    }

    /// `[n, h·w, c]` back to `[n, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, hw, c) = (s[0], s[1], s[2]);
        assert_eq!(hw, h * w, "token count vs spatial size");
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * c + ch) * hw + p] = xd[(b * hw + p) * c + ch];
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push(t, Op::FromTokens(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// `[n, s, heads·dh]` to `[n·heads, s, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.shape(x).to_vec();
        let (n, s, d) = (sh[0], sh[1], sh[2]);
        let dh = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..n {
            for hd in 0..heads {
                for t in 0..s {
                    let src = &xd[(b * s + t) * d + hd * dh..][..dh];
                    out[((b * heads + hd) * s + t) * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let t = Tensor::new(&[n * heads, s, dh], out).unwrap();
        self.push(t, Op::SplitHeads { x, heads }, &[x])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.shape(x).to_vec();
        let (nh, s, dh) = (sh[0], sh[1], sh[2]);
        let n = nh / heads;
        let d = dh * heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..n {
            for hd in 0..heads {
                for t in 0..s {
                    let src = &xd[((b * heads + hd) * s + t) * dh..][..dh];
                    out[(b * s + t) * d + hd * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let t = Tensor::new(&[n, s, d], out).unwrap();
        self.push(t, Op::MergeHeads { x, heads }, &[x])
    }

    /// Prepends a learned token `tok` (`[d]`) to every sequence of `x`.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Var {
        let sh = self.shape(x).to_vec();
        let (n, s, d) = (sh[0], sh[1], sh[2]);
        assert_eq!(self.value(tok).numel(), d, "token width");
        let (xd, td) = (self.value(x).data(), self.value(tok).data());
        let mut out = Vec::with_capacity(n * (s + 1) * d);
        for b in 0..n {
            out.extend_from_slice(td);
            out.extend_from_slice(&xd[b * s * d..(b + 1) * s * d]);
        }
        let t = Tensor::new(&[n, s + 1, d], out).unwrap();
        self.push(t, Op::PrependToken(x, tok), &[x, tok])
    }

    pub fn drop_first_token(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        let (n, s, d) = (sh[0], sh[1], sh[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * (s - 1) * d);
        for b in 0..n {
            out.extend_from_slice(&xd[(b * s + 1) * d..(b + 1) * s * d]);
        }
        let t = Tensor::new(&[n, s - 1, d], out).unwrap();
        self.push(t, Op::DropFirstToken(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = ParamGrads::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads.push((*id, g)),
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, vb, |d, y| d * y);
                    let gb = zip_map(&g, va, |d, x| d * x);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s), &mut grads),
                Op::Exp(a) => send(*a, zip_map(&g, &node.value, |d, y| d * y), &mut grads),
                Op::Silu(a) => {
                    let ga = zip_map(&g, self.value(*a), |d, x| {
                        let s = sigmoid(x);
                        d * s * (1.0 + x * (1.0 - s))
                    });
                    send(*a, ga, &mut grads);
                }
                Op::Sigmoid(a) => {
                    send(*a, zip_map(&g, &node.value, |d, y| d * y * (1.0 - y)), &mut grads)
                }
                Op::Gelu(a) => {
                    send(*a, zip_map(&g, self.value(*a), |d, x| d * gelu(x).1), &mut grads)
                }
                Op::Sum(a) => {
                    send(*a, Tensor::full(self.shape(*a), gd[0]), &mut grads);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel() as f32;
                    send(*a, Tensor::full(self.shape(*a), gd[0] / n), &mut grads);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cout,
                } => {
                    let xv = self.value(*x);
                    let n = xv.dim(0);
                    let cg = kernels::conv2d_backward(
                        xv.data(),
                        n,
                        geom,
                        self.value(*w).data(),
                        *cout,
                        gd,
                    );
                    send(*x, Tensor::new(xv.shape(), cg.dx).unwrap(), &mut grads);
                    send(*w, Tensor::new(self.shape(*w), cg.dweight).unwrap(), &mut grads);
                    if let Some(b) = b {
                        send(*b, Tensor::new(&[*cout], cg.dbias).unwrap(), &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (dout, din) = (wv.dim(0), wv.dim(1));
                    let rows = xv.numel() / din;
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0f32; rows * din];
                        kernels::gemm(rows, dout, din, gd, false, wv.data(), false, &mut dx, 0.0);
                        send(*x, Tensor::new(xv.shape(), dx).unwrap(), &mut grads);
                    }
                    let mut dw = vec![0.0f32; dout * din];
                    kernels::gemm(dout, rows, din, gd, true, xv.data(), false, &mut dw, 0.0);
                    send(*w, Tensor::new(wv.shape(), dw).unwrap(), &mut grads);
                    if let Some(b) = b {
                        let mut db = vec![0.0f32; dout];
                        for r in gd.chunks(dout) {
                            db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                        }
                        send(*b, Tensor::new(&[dout], db).unwrap(), &mut grads);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = (va.dim(1), va.dim(2));
                    let n = node.value.dim(2);
                    let (ad, bd) = (va.data(), vb.data());
                    let mut da = vec![0.0f32; ad.len()];
                    exec::for_each_chunk_mut(&mut da, m * k, |i, out| {
                        let dy = &gd[i * m * n..(i + 1) * m * n];
                        let bs = &bd[i * k * n..(i + 1) * k * n];
                        kernels::gemm(m, n, k, dy, false, bs, !trans_b, out, 0.0);
                    });
                    let mut db = vec![0.0f32; bd.len()];
                    exec::for_each_chunk_mut(&mut db, k * n, |i, out| {
                        let dy = &gd[i * m * n..(i + 1) * m * n];
                        let as_ = &ad[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::gemm(n, m, k, dy, true, as_, false, out, 0.0);
                        } else {
                            kernels::gemm(k, m, n, as_, true, dy, false, out, 0.0);
                        }
                    });
                    send(*a, Tensor::new(va.shape(), da).unwrap(), &mut grads);
                    send(*b, Tensor::new(vb.shape(), db).unwrap(), &mut grads);
                }
                Op::Softmax(a) => {
                    let d = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let mut dx = vec![0.0f32; y.len()];
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, Tensor::new(node.value.shape(), dx).unwrap(), &mut grads);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = self.value(*x).nchw();
                    let (dx, dg, db) = kernels::group_norm_backward(
                        gd,
                        xhat,
                        inv_std,
                        n,
                        c,
                        h * w,
                        *groups,
                        self.value(*gamma).data(),
                    );
                    send(*x, Tensor::new(&[n, c, h, w], dx).unwrap(), &mut grads);
                    send(*gamma, Tensor::new(&[c], dg).unwrap(), &mut grads);
                    send(*beta, Tensor::new(&[c], db).unwrap(), &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = *self.shape(*x).last().unwrap();
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0f32; gd.len()];
                    let mut dg = vec![0.0f32; d];
                    let mut db = vec![0.0f32; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut md = 0.0f32;
                        let mut mdx = 0.0f32;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            md += dh;
                            mdx += dh * hr[j];
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                        md /= d as f32;
                        mdx /= d as f32;
                        for j in 0..d {
                            dx[r * d + j] = inv * (gr[j] * gam[j] - md - hr[j] * mdx);
                        }
                    }
                    send(*x, Tensor::new(self.shape(*x), dx).unwrap(), &mut grads);
                    send(*gamma, Tensor::new(&[d], dg).unwrap(), &mut grads);
                    send(*beta, Tensor::new(&[d], db).unwrap(), &mut grads);
                }
                Op::Upsample2x(x) => {
                    let (n, c, h, w) = self.value(*x).nchw();
                    let dx = kernels::upsample_nearest2x_backward(gd, n * c, h, w);
                    send(*x, Tensor::new(&[n, c, h, w], dx).unwrap(), &mut grads);
                }
                Op::ConcatChannels(a, b) => {
                    let (n, ca, h, w) = self.value(*a).nchw();
                    let cb = self.value(*b).dim(1);
                    let hw = h * w;
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let base = s * (ca + cb) * hw;
                        da.extend_from_slice(&gd[base..base + ca * hw]);
                        db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    send(*a, Tensor::new(&[n, ca, h, w], da).unwrap(), &mut grads);
                    send(*b, Tensor::new(&[n, cb, h, w], db).unwrap(), &mut grads);
                }
                Op::SliceChannels { x, start } => {
                    let (n, c, h, w) = self.value(*x).nchw();
                    let len = node.value.dim(1);
                    let hw = h * w;
                    let mut dx = vec![0.0f32; n * c * hw];
                    for s in 0..n {
                        dx[(s * c + start) * hw..(s * c + start + len) * hw]
                            .copy_from_slice(&gd[s * len * hw..(s + 1) * len * hw]);
                    }
                    send(*x, Tensor::new(&[n, c, h, w], dx).unwrap(), &mut grads);
                }
                Op::AddChannelBias(x, v) => {
                    let (n, c, h, w) = self.value(*x).nchw();
                    let dv: Vec<f32> = gd.chunks(h * w).map(|r| r.iter().sum()).collect();
                    send(*v, Tensor::new(&[n, c], dv).unwrap(), &mut grads);
                    send(*x, g, &mut grads);
                }
                Op::AddRowBroadcast(x, p) => {
                    let per = self.value(*p).numel();
                    let mut dp = vec![0.0f32; per];
                    for chunk in gd.chunks(per) {
                        dp.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    send(*p, Tensor::new(self.shape(*p), dp).unwrap(), &mut grads);
                    send(*x, g, &mut grads);
                }
                Op::ToTokens(x) => {
                    let (n, c, h, w) = self.value(*x).nchw();
                    let hw = h * w;
                    let mut dx = vec![0.0f32; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(s * c + ch) * hw + p] = gd[(s * hw + p) * c + ch];
                            }
                        }
                    }
                    send(*x, Tensor::new(&[n, c, h, w], dx).unwrap(), &mut grads);
                }
                Op::FromTokens(x) => {
                    let (n, c, h, w) = node.value.nchw();
                    let hw = h * w;
                    let mut dx = vec![0.0f32; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(s * hw + p) * c + ch] = gd[(s * c + ch) * hw + p];
                            }
                        }
                    }
                    send(*x, Tensor::new(&[n, hw, c], dx).unwrap(), &mut grads);
                }
                Op::Reshape(x) => {
                    let t = g.reshape(self.shape(*x)).unwrap();
                    send(*x, t, &mut grads);
                }
                Op::SplitHeads { x, heads } => {
                    let sh = self.shape(*x).to_vec();
                    let (n, s, d) = (sh[0], sh[1], sh[2]);
                    let dh = d / heads;
                    let mut dx = vec![0.0f32; gd.len()];
                    for b in 0..n {
                        for hd in 0..*heads {
                            for t in 0..s {
                                dx[(b * s + t) * d + hd * dh..][..dh]
                                    .copy_from_slice(&gd[((b * heads + hd) * s + t) * dh..][..dh]);
                            }
                        }
                    }
                    send(*x, Tensor::new(&sh, dx).unwrap(), &mut grads);
                }
                Op::MergeHeads { x, heads } => {
                    let sh = self.shape(*x).to_vec();
                    let (nh, s, dh) = (sh[0], sh[1], sh[2]);
                    let d = dh * heads;
                    let mut dx = vec![0.0f32; gd.len()];
                    for b in 0..nh / heads {
                        for hd in 0..*heads {
                            for t in 0..s {
                                dx[((b * heads + hd) * s + t) * dh..][..dh]
                                    .copy_from_slice(&gd[(b * s + t) * d + hd * dh..][..dh]);
                            }
                        }
                    }
                    send(*x, Tensor::new(&sh, dx).unwrap(), &mut grads);
                }
                Op::PrependToken(x, tok) => {
                    let sh = self.shape(*x).to_vec();
                    let (n, s, d) = (sh[0], sh[1], sh[2]);
                    let mut dt = vec![0.0f32; d];
                    let mut dx = Vec::with_capacity(n * s * d);
                    for b in 0..n {
                        let base = b * (s + 1) * d;
                        dt.iter_mut().zip(&gd[base..base + d]).for_each(|(a, v)| *a += v);
                        dx.extend_from_slice(&gd[base + d..base + (s + 1) * d]);
                    }
                    send(*tok, Tensor::new(self.shape(*tok), dt).unwrap(), &mut grads);
                    send(*x, Tensor::new(&sh, dx).unwrap(), &mut grads);
                }
                Op::DropFirstToken(x) => {
                    let sh = self.shape(*x).to_vec();
                    let (n, s, d) = (sh[0], sh[1], sh[2]);
                    let mut dx = vec![0.0f32; n * s * d];
                    for b in 0..n {
                        dx[(b * s + 1) * d..(b + 1) * s * d]
                            .copy_from_slice(&gd[b * (s - 1) * d..(b + 1) * (s - 1) * d]);
                    }
                    send(*x, Tensor::new(&sh, dx).unwrap(), &mut grads);
                }
            }
        }
        out.grads.sort_by_key(|(id, _)| *id);
        out
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}
