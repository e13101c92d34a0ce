//! Building blocks shared by the autoencoder and the denoiser.

use rand::Rng;
use vlmdiff_nn::{Conv2d, Graph, GroupNorm, Linear, ParamStore, Var};

pub const GROUPS: usize = 8;

/// Pre-activation residual block: `x + conv(act(norm(conv(act(norm(x))))))`,
/// optionally with a per-channel time-embedding bias after the first conv.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    temb: Option<Linear>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, GROUPS),
            conv1: Conv2d::same(store, &format!("{name}.conv1"), cin, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, GROUPS),
            conv2: Conv2d::same(store, &format!("{name}.conv2"), cout, cout, rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
            temb: temb_dim.map(|d| Linear::new(store, &format!("{name}.temb"), d, cout, true, rng)),
        }
    }

    /// `temb` is `[N, temb_dim]`, already activated.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, store, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, store, h);
        if let (Some(lin), Some(t)) = (&self.temb, temb) {
            let bias = lin.forward(g, store, t);
            h = g.add_channel_bias(h, bias);
        }
        let h = self.norm2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        g.add(skip, h)
    }
}
