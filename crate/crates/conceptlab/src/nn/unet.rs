//! The conditional noise-prediction U-Net.
//!
//! Two down-sampling and two up-sampling blocks with skip connections,
//! 3x3 convolutions and GELU activations, average-pool down / nearest-
//! neighbor up, optional global self-attention at the bottleneck. The
//! sinusoidal time embedding enters each block as a learned per-channel
//! bias; the conditioning tuple passes through a learned affine embedding
//! and is concatenated channel-wise to the input of every up block.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{AvgPool2, Conv2d, Gelu, Linear, SelfAttention2d, Upsample2};
use super::{ParamMut, Parameterized};

fn default_base_channels() -> usize {
    64
}
fn default_multipliers() -> (usize, usize) {
    (1, 2)
}
fn default_true() -> bool {
    true
}
fn default_cond_dim() -> usize {
    16
}
fn default_time_dim() -> usize {
    32
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// channel multipliers for the two resolution levels; mirrored on the
    /// way up
    #[serde(default = "default_multipliers")]
    pub channel_multipliers: (usize, usize),
    #[serde(default = "default_true")]
    pub use_attention: bool,
    #[serde(default = "default_cond_dim")]
    pub cond_embed_dim: usize,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            base_channels: default_base_channels(),
            channel_multipliers: default_multipliers(),
            use_attention: default_true(),
            cond_embed_dim: default_cond_dim(),
            time_embed_dim: default_time_dim(),
        }
    }
}

/// conv -> (+ time bias) -> GELU -> conv, with an identity or 1x1 shortcut.
struct ResBlock {
    conv1: Conv2d,
    tproj: Linear,
    act: Gelu,
    conv2: Conv2d,
    short: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3, rng),
            tproj: Linear::new(format!("{name}.tproj"), tdim, cout, rng),
            act: Gelu::default(),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3, rng),
            short: if cin != cout {
                Some(Conv2d::new(format!("{name}.short"), cin, cout, 1, rng))
            } else {
                None
            },
        }
    }

    fn forward(&mut self, x: &Array4<f32>, temb: &Array2<f32>, train: bool) -> Array4<f32> {
        let mut h = self.conv1.forward(x, train);
        let tb = self.tproj.forward(temb, train);
        let (bsz, cout, hh, ww) = h.dim();
        {
            let hs = h.as_slice_mut().expect("layout");
            let n = hh * ww;
            for b in 0..bsz {
                for c in 0..cout {
                    let bias = tb[(b, c)];
                    for v in &mut hs[(b * cout + c) * n..(b * cout + c + 1) * n] {
                        *v += bias;
                    }
                }
            }
        }
        let a = self.act.forward(&h, train);
        let mut y = self.conv2.forward(&a, train);
        match &mut self.short {
            Some(sc) => y += &sc.forward(x, train),
            None => y += x,
        }
        y
    }

    /// Returns (dx, d_temb).
    fn backward(&mut self, dy: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let da = self.conv2.backward(dy);
        let dh = self.act.backward(&da);
        let (bsz, cout, hh, ww) = dh.dim();
        let mut dtb = Array2::<f32>::zeros((bsz, cout));
        {
            let dhs = dh.as_slice().expect("layout");
            let n = hh * ww;
            for b in 0..bsz {
                for c in 0..cout {
                    dtb[(b, c)] = dhs[(b * cout + c) * n..(b * cout + c + 1) * n].iter().sum();
                }
            }
        }
        let dtemb = self.tproj.backward(&dtb);
        let mut dx = self.conv1.backward(&dh);
        match &mut self.short {
            Some(sc) => dx += &sc.backward(dy),
            None => dx += dy,
        }
        (dx, dtemb)
    }
}

impl Parameterized for ResBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.conv1.visit_params(f);
        self.tproj.visit_params(f);
        self.conv2.visit_params(f);
        if let Some(sc) = &mut self.short {
            sc.visit_params(f);
        }
    }
}

/// Sinusoidal features of the timestep indices.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Array2<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f32>::zeros((ts.len(), dim));
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (10_000f32).powf(-(i as f32) / half as f32);
            let arg = t as f32 * freq;
            out[(b, i)] = arg.sin();
            out[(b, half + i)] = arg.cos();
        }
    }
    out
}

struct ForwardCache {
    temb: Array2<f32>,
    skip_hw: (usize, usize),
}

/// The conditional noise predictor.
pub struct CondUnet {
    pub spec: NetworkSpec,
    pub cond_width: usize,
    cond_embed: Linear,
    stem: Conv2d,
    down1: ResBlock,
    pool1: AvgPool2,
    down2: ResBlock,
    pool2: AvgPool2,
    mid: ResBlock,
    attn: Option<SelfAttention2d>,
    up_s1: Upsample2,
    up1: ResBlock,
    up_s2: Upsample2,
    up2: ResBlock,
    head: Conv2d,
    cache: Option<ForwardCache>,
}

impl CondUnet {
    pub fn new(spec: NetworkSpec, cond_width: usize, rng: &mut impl Rng) -> Self {
        assert!(cond_width >= 1);
        let c1 = spec.base_channels * spec.channel_multipliers.0;
        let c2 = spec.base_channels * spec.channel_multipliers.1;
        let e = spec.cond_embed_dim;
        let td = spec.time_embed_dim;
        CondUnet {
            cond_embed: Linear::new("cond_embed", cond_width, e, rng),
            stem: Conv2d::new("stem", 3, c1, 3, rng),
            down1: ResBlock::new("down1", c1, c1, td, rng),
            pool1: AvgPool2::default(),
            down2: ResBlock::new("down2", c1, c2, td, rng),
            pool2: AvgPool2::default(),
            mid: ResBlock::new("mid", c2, c2, td, rng),
            attn: if spec.use_attention {
                Some(SelfAttention2d::new("attn", c2, rng))
            } else {
                None
            },
            up_s1: Upsample2::default(),
            up1: ResBlock::new("up1", c2 + c2 + e, c2, td, rng),
            up_s2: Upsample2::default(),
            up2: ResBlock::new("up2", c2 + c1 + e, c1, td, rng),
            head: Conv2d::new("head", c1, 3, 3, rng),
            spec,
            cond_width,
            cache: None,
        }
    }

    /// Channel-axis concatenation into a freshly allocated standard-layout
    /// array (`ndarray::concatenate` would return a permuted layout).
    fn concat_channels(parts: &[&Array4<f32>]) -> Array4<f32> {
        let (bsz, _, h, w) = parts[0].dim();
        let ctot: usize = parts.iter().map(|p| p.dim().1).sum();
        let mut out = Array4::<f32>::zeros((bsz, ctot, h, w));
        let mut at = 0;
        for p in parts {
            let c = p.dim().1;
            out.slice_mut(ndarray::s![.., at..at + c, .., ..]).assign(p);
            at += c;
        }
        out
    }

    fn broadcast_cond(ce: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
        let (bsz, e) = ce.dim();
        let mut out = Array4::<f32>::zeros((bsz, e, h, w));
        for b in 0..bsz {
            for c in 0..e {
                out.slice_mut(ndarray::s![b, c, .., ..]).fill(ce[(b, c)]);
            }
        }
        out
    }

    /// Predict the noise component of `x` at timesteps `ts` under
    /// conditioning vectors `cond`.
    pub fn forward(&mut self, x: &Array4<f32>, ts: &[usize], cond: &Array2<f32>, train: bool) -> Array4<f32> {
        let (bsz, _, h, w) = x.dim();
        assert_eq!(ts.len(), bsz);
        assert_eq!(cond.dim(), (bsz, self.cond_width), "conditioning width");
        assert!(h % 4 == 0 && w % 4 == 0, "spatial dims must be divisible by 4");

        let temb = sinusoidal_embedding(ts, self.spec.time_embed_dim);
        let ce = self.cond_embed.forward(cond, train);

        let s0 = self.stem.forward(x, train);
        let d1 = self.down1.forward(&s0, &temb, train);
        let p1 = self.pool1.forward(&d1);
        let d2 = self.down2.forward(&p1, &temb, train);
        let p2 = self.pool2.forward(&d2);
        let mut m = self.mid.forward(&p2, &temb, train);
        if let Some(attn) = &mut self.attn {
            m = attn.forward(&m, train);
        }
        let u1in = self.up_s1.forward(&m);
        let cond1 = Self::broadcast_cond(&ce, h / 2, w / 2);
        let cat1 = Self::concat_channels(&[&u1in, &d2, &cond1]);
        let u1 = self.up1.forward(&cat1, &temb, train);
        let u2in = self.up_s2.forward(&u1);
        let cond2 = Self::broadcast_cond(&ce, h, w);
        let cat2 = Self::concat_channels(&[&u2in, &d1, &cond2]);
        let u2 = self.up2.forward(&cat2, &temb, train);
        let out = self.head.forward(&u2, train);

        if train {
            self.cache = Some(ForwardCache {
                temb,
                skip_hw: (h, w),
            });
        }
        out
    }

    /// Backpropagate from the output gradient; accumulates parameter
    /// gradients. The input gradient is not needed by any caller.
    pub fn backward(&mut self, dout: &Array4<f32>) {
        let cache = self.cache.take().expect("forward(train=true) before backward");
        let (h, w) = cache.skip_hw;
        let c1 = self.spec.base_channels * self.spec.channel_multipliers.0;
        let c2 = self.spec.base_channels * self.spec.channel_multipliers.1;
        let e = self.spec.cond_embed_dim;

        let du2 = self.head.backward(dout);
        let (dcat2, _dt_up2) = self.up2.backward(&du2);
        let du2in = dcat2.slice(ndarray::s![.., 0..c2, .., ..]).to_owned();
        let dskip0 = dcat2.slice(ndarray::s![.., c2..c2 + c1, .., ..]).to_owned();
        let dce2 = dcat2
            .slice(ndarray::s![.., c2 + c1..c2 + c1 + e, .., ..])
            .sum_axis(Axis(3))
            .sum_axis(Axis(2));

        let du1 = self.up_s2.backward(&du2in);
        let (dcat1, _dt_up1) = self.up1.backward(&du1);
        let du1in = dcat1.slice(ndarray::s![.., 0..c2, .., ..]).to_owned();
        let dskip1 = dcat1.slice(ndarray::s![.., c2..c2 + c2, .., ..]).to_owned();
        let dce1 = dcat1
            .slice(ndarray::s![.., c2 + c2..c2 + c2 + e, .., ..])
            .sum_axis(Axis(3))
            .sum_axis(Axis(2));

        let mut dm = self.up_s1.backward(&du1in);
        if let Some(attn) = &mut self.attn {
            dm = attn.backward(&dm);
        }
        let (dp2, _dt_mid) = self.mid.backward(&dm);
        let mut dd2 = self.pool2.backward(&dp2);
        dd2 += &dskip1;
        let (dp1, _dt_d2) = self.down2.backward(&dd2);
        let mut dd1 = self.pool1.backward(&dp1);
        dd1 += &dskip0;
        let (ds0, _dt_d1) = self.down1.backward(&dd1);
        let _ = self.stem.backward(&ds0);

        let dce = dce1 + dce2;
        let _ = self.cond_embed.backward(&dce);
        let _ = (h, w, cache.temb);
    }
}

impl Parameterized for CondUnet {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.stem.visit_params(f);
        self.down1.visit_params(f);
        self.down2.visit_params(f);
        self.mid.visit_params(f);
        if let Some(attn) = &mut self.attn {
            attn.visit_params(f);
        }
        self.up1.visit_params(f);
        self.up2.visit_params(f);
        self.head.visit_params(f);
        self.cond_embed.visit_params(f);
    }
}
