use serde::{Deserialize, Serialize};
use vlmdiff_nn::{Attention, Conv2d, Graph, GroupNorm, LayerNorm, Linear, ParamStore, Tensor, Var};

use super::EpsModel;
use crate::error::{Error, Result};
use crate::nets::{ResBlock, GROUPS};
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    pub latent_dim: usize,
    /// Channel width per level; each level after the first halves the
    /// spatial size.
    pub channels: Vec<usize>,
    pub heads: usize,
    /// `(L, D)` of the condition the cross-attention reads.
    pub condition: (usize, usize),
}

impl UNetArch {
    pub fn validate(&self, latent_hw: (usize, usize)) -> Result<()> {
        let down = 1usize << (self.channels.len().saturating_sub(1));
        if self.channels.is_empty() || self.channels.iter().any(|&c| c % GROUPS.min(c) != 0 || c % self.heads != 0) {
            return Err(Error::Config(format!(
                "diff.channels must be non-empty multiples of {GROUPS} and of diff.heads"
            )));
        }
        if !latent_hw.0.is_multiple_of(down) || !latent_hw.1.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "latent size {latent_hw:?} cannot be halved {} times",
                self.channels.len() - 1
            )));
        }
        Ok(())
    }
}

/// Self-attention, cross-attention on the condition, then a feed-forward
/// layer, all residual over the flattened spatial tokens.
#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl AttnBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, arch: &UNetArch, rng: &mut impl rand::Rng) -> Self {
        let cd = arch.condition.1;
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, GROUPS),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            self_attn: Attention::new(store, &format!("{name}.self"), c, c, arch.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
            cross_attn: Attention::new(store, &format!("{name}.cross"), c, cd, arch.heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), c),
            ff1: Linear::new(store, &format!("{name}.ff1"), c, 4 * c, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * c, c, true, rng),
        }
    }

    fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, ctx: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let n = self.norm.forward(g, st, x);
        let mut t = g.to_tokens(n);
        let a = self.ln1.forward(g, st, t);
        let a = self.self_attn.forward(g, st, a, None);
        t = g.add(t, a);
        let a = self.ln2.forward(g, st, t);
        let a = self.cross_attn.forward(g, st, a, Some(ctx));
        t = g.add(t, a);
        let a = self.ln3.forward(g, st, t);
        let a = self.ff1.forward(g, st, a);
        let a = g.gelu(a);
        let a = self.ff2.forward(g, st, a);
        t = g.add(t, a);
        let back = g.from_tokens(t, h, w);
        let delta = g.sub(back, n);
        g.add(x, delta)
    }
}

/// Small attention U-Net predicting the noise in `z_t`.
pub struct UNet {
    pub arch: UNetArch,
    pub store: ParamStore,
    temb_dim: usize,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, AttnBlock, Option<Conv2d>)>,
    mid: (ResBlock, AttnBlock, ResBlock),
    up: Vec<(ResBlock, AttnBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Self {
        let mut rng = util::rng_for(seed, "unet/init");
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let ch = arch.channels.clone();
        let c0 = ch[0];
        let temb_dim = 4 * c0;
        let temb1 = Linear::new(s, "temb.1", c0, temb_dim, true, rng);
        let temb2 = Linear::new(s, "temb.2", temb_dim, temb_dim, true, rng);
        let conv_in = Conv2d::same(s, "in", arch.latent_dim, c0, rng);
        let levels = ch.len();
        let mut prev = c0;
        let down = (0..levels)
            .map(|i| {
                let rb = ResBlock::new(s, &format!("down.{i}.res"), prev, ch[i], Some(temb_dim), rng);
                let at = AttnBlock::new(s, &format!("down.{i}.attn"), ch[i], &arch, rng);
                let ds = (i + 1 < levels)
                    .then(|| Conv2d::new(s, &format!("down.{i}.ds"), ch[i], ch[i], 3, 2, 1, rng));
                prev = ch[i];
                (rb, at, ds)
            })
            .collect();
        let last = ch[levels - 1];
        let mid = (
            ResBlock::new(s, "mid.res1", last, last, Some(temb_dim), rng),
            AttnBlock::new(s, "mid.attn", last, &arch, rng),
            ResBlock::new(s, "mid.res2", last, last, Some(temb_dim), rng),
        );
        let mut prev = last;
        let up = (0..levels)
            .rev()
            .map(|i| {
                let rb = ResBlock::new(s, &format!("up.{i}.res"), prev + ch[i], ch[i], Some(temb_dim), rng);
                let at = AttnBlock::new(s, &format!("up.{i}.attn"), ch[i], &arch, rng);
                let us = (i > 0).then(|| Conv2d::same(s, &format!("up.{i}.us"), ch[i], ch[i], rng));
                prev = ch[i];
                (rb, at, us)
            })
            .collect();
        let norm_out = GroupNorm::new(s, "out.norm", c0, GROUPS);
        let conv_out = Conv2d::same(s, "out.conv", c0, arch.latent_dim, rng).zero_init(s);
        Self {
            arch,
            store,
            temb_dim,
            temb1,
            temb2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    fn timestep_embedding(&self, t: &[usize]) -> Tensor {
        let dim = self.arch.channels[0];
        let half = dim / 2;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            for j in 0..dim {
                let k = (j % half) as f64;
                let freq = (-(10000f64.ln()) * k / half as f64).exp();
                let a = ti as f64 * freq;
                data.push(if j < half { a.sin() } else { a.cos() } as f32);
            }
        }
        Tensor::new(&[t.len(), dim], data).expect("timestep embedding")
    }
}

impl EpsModel for UNet {
    fn predict(&self, g: &mut Graph, zt: Var, t: &[usize], cond: Var) -> Var {
        let st = &self.store;
        let te = g.input(self.timestep_embedding(t));
        let te = self.temb1.forward(g, st, te);
        let te = g.silu(te);
        let te = self.temb2.forward(g, st, te);
        let te = g.silu(te);
        debug_assert_eq!(g.shape(te)[1], self.temb_dim);

        let mut h = self.conv_in.forward(g, st, zt);
        let mut skips = Vec::with_capacity(self.down.len());
        for (rb, at, ds) in &self.down {
            h = rb.forward(g, st, h, Some(te));
            h = at.forward(g, st, h, cond);
            skips.push(h);
            if let Some(ds) = ds {
                h = ds.forward(g, st, h);
            }
        }
        h = self.mid.0.forward(g, st, h, Some(te));
        h = self.mid.1.forward(g, st, h, cond);
        h = self.mid.2.forward(g, st, h, Some(te));
        for (rb, at, us) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip);
            h = rb.forward(g, st, h, Some(te));
            h = at.forward(g, st, h, cond);
            if let Some(us) = us {
                h = g.upsample2x(h);
                h = us.forward(g, st, h);
            }
        }
        h = self.norm_out.forward(g, st, h);
        h = g.silu(h);
        self.conv_out.forward(g, st, h)
    }
}
