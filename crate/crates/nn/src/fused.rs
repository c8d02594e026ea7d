//! Channel and spatial gating, the fused attention `FA`, and the wiring that
//! joins the reconstruction and glyph branches of a block.

use charformer_core::config::ConnectionScheme;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, Linear};
use crate::params::ParamStore;

pub const SPATIAL_KERNEL: usize = 7;

/// `f ⊙ σ(MLP(avgpool f) + MLP(maxpool f))` with a shared two-layer MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels),
        }
    }

    fn mlp(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }

    /// The `[n, 1, 1, c]` gate.
    pub fn gate(&self, g: &mut Graph, f: Var) -> Var {
        let avg = g.mean_hw(f);
        let max = g.max_hw(f);
        let a = self.mlp(g, avg);
        let m = self.mlp(g, max);
        let z = g.add(a, m);
        g.sigmoid(z)
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let gate = self.gate(g, f);
        g.mul_bcast(f, gate)
    }
}

/// `f ⊙ σ(conv7×7([mean_c f; max_c f]))`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), 2, 1, SPATIAL_KERNEL, 1, false),
        }
    }

    /// The `[n, h, w, 1]` gate.
    pub fn gate(&self, g: &mut Graph, f: Var) -> Var {
        let mean = g.mean_c(f);
        let max = g.max_c(f);
        let pooled = g.concat_last(&[mean, max]);
        let s = self.conv.forward(g, pooled);
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let gate = self.gate(g, f);
        g.mul_bcast(f, gate)
    }
}

/// `FA(f) = Ms(Mc(f) + f) + Mc(f) + f`.
#[derive(Debug, Clone)]
pub struct FusedAttention {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl FusedAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            channel: ChannelAttention::new(store, rng, &format!("{name}.channel"), channels, hidden),
            spatial: SpatialAttention::new(store, rng, &format!("{name}.spatial")),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let mc = self.channel.forward(g, f);
        let t = g.add(mc, f);
        let ms = self.spatial.forward(g, t);
        g.add(ms, t)
    }
}

/// Join the two branch outputs of a block into `(f_rec, f_gly)`.
///
/// | scheme   | `f_rec`           | `f_gly`       |
/// |----------|-------------------|---------------|
/// | `con_a`  | `FA(r + g) + r`   | `FA(r + g) + g` |
/// | `con_b`  | `FA(r + g) + r`   | `g`           |
/// | `con_c`  | `FA(g) + r`       | `FA(g) + g`   |
/// | `con_d`  | `FA(r + g)`       | `g`           |
/// | `no_fa`  | `r + g`           | `g`           |
///
/// `FA` is evaluated once and shared by both additions.
pub fn fuse_branches(
    g: &mut Graph,
    scheme: ConnectionScheme,
    fa: Option<&FusedAttention>,
    rsab: Var,
    gsnb: Var,
) -> (Var, Var) {
    assert_eq!(g.shape(rsab), g.shape(gsnb), "branch shapes differ");
    let fa = || fa.expect("connection scheme needs fused attention");
    match scheme {
        ConnectionScheme::ConA => {
            let s = g.add(rsab, gsnb);
            let a = fa().forward(g, s);
            (g.add(a, rsab), g.add(a, gsnb))
        }
        ConnectionScheme::ConB => {
            let s = g.add(rsab, gsnb);
            let a = fa().forward(g, s);
            (g.add(a, rsab), gsnb)
        }
        ConnectionScheme::ConC => {
            let a = fa().forward(g, gsnb);
            (g.add(a, rsab), g.add(a, gsnb))
        }
        ConnectionScheme::ConD => {
            let s = g.add(rsab, gsnb);
            (fa().forward(g, s), gsnb)
        }
        ConnectionScheme::NoFa => (g.add(rsab, gsnb), gsnb),
    }
}

pub fn uses_fused_attention(scheme: ConnectionScheme) -> bool {
    scheme != ConnectionScheme::NoFa
}
