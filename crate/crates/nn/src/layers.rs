//! Parameterized building blocks. Each layer owns only parameter ids; the
//! values live in a [`ParamStore`] so one store can be checkpointed whole.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, k, k], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    /// Zeroes weights and bias so the layer starts as the zero map.
    pub fn zero_init(self, store: &mut ParamStore) -> Self {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
        self
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[dout, din], bound, rng),
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::uniform(&[dout], bound, rng))
        });
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels);
        assert_eq!(channels % groups, 0, "{name}: {channels} channels / {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention. With `context == None` it is
/// self-attention; otherwise keys and values come from the context tokens.
#[derive(Debug, Clone)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(query_dim % heads, 0, "{name}: width not divisible by heads");
        Self {
            to_q: Linear::new(store, &format!("{name}.to_q"), query_dim, query_dim, false, rng),
            to_k: Linear::new(store, &format!("{name}.to_k"), context_dim, query_dim, false, rng),
            to_v: Linear::new(store, &format!("{name}.to_v"), context_dim, query_dim, false, rng),
            to_out: Linear::new(store, &format!("{name}.to_out"), query_dim, query_dim, true, rng),
            heads,
            head_dim: query_dim / heads,
        }
    }

    /// `x`: `[n, s, query_dim]`, `context`: `[n, l, context_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Option<Var>) -> Var {
        let ctx = context.unwrap_or(x);
        let q = self.to_q.forward(g, store, x);
        let k = self.to_k.forward(g, store, ctx);
        let v = self.to_v.forward(g, store, ctx);
        let (q, k, v) = if self.heads > 1 {
            (
                g.split_heads(q, self.heads),
                g.split_heads(k, self.heads),
                g.split_heads(v, self.heads),
            )
        } else {
            (q, k, v)
        };
        let scores = g.batch_matmul(q, k, true);
        let scores = g.scale(scores, 1.0 / (self.head_dim as f32).sqrt());
        let attn = g.softmax(scores);
        let mut out = g.batch_matmul(attn, v, false);
        if self.heads > 1 {
            out = g.merge_heads(out, self.heads);
        }
        self.to_out.forward(g, store, out)
    }
}
