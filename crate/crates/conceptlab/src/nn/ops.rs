//! Layer implementations: conv, linear, pooling, upsampling, GELU, and
//! single-head global self-attention. Forward passes cache what backward
//! needs; backward passes accumulate parameter gradients.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{chunk_ranges, gemm_rm, sgemm_strided, ParamMut, Parameterized, BATCH_CHUNKS};

fn he_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// 2D convolution, kernel 1x1 or 3x3 (pad 1), stride 1. Weights are stored
/// GEMM-ready as `[cout, cin*k*k]`.
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub gw: Vec<f32>,
    pub gb: Vec<f32>,
    cache_x: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, ksize: usize, rng: &mut impl Rng) -> Self {
        assert!(ksize == 1 || ksize == 3, "only 1x1 and 3x3 kernels");
        let k = cin * ksize * ksize;
        Conv2d {
            name: name.into(),
            cin,
            cout,
            ksize,
            w: he_normal(rng, k, cout * k),
            b: vec![0.0; cout],
            gw: vec![0.0; cout * k],
            gb: vec![0.0; cout],
            cache_x: None,
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    /// im2col for one sample, 3x3 pad 1: col is [cin*9, h*w] row-major.
    fn im2col3(x: &[f32], cin: usize, h: usize, w: usize, col: &mut [f32]) {
        let n = h * w;
        for c in 0..cin {
            let xc = &x[c * n..(c + 1) * n];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = &mut col[(c * 9 + ky * 3 + kx) * n..(c * 9 + ky * 3 + kx + 1) * n];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let dst = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &xc[sy as usize * w..(sy as usize + 1) * w];
                        // valid x range given kx offset
                        match kx {
                            0 => {
                                dst[0] = 0.0;
                                dst[1..].copy_from_slice(&src_row[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src_row),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src_row[1..]);
                                dst[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of a column gradient back to the input image.
    fn col2im3(dcol: &[f32], cin: usize, h: usize, w: usize, dx: &mut [f32]) {
        let n = h * w;
        for c in 0..cin {
            let xc = &mut dx[c * n..(c + 1) * n];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = &dcol[(c * 9 + ky * 3 + kx) * n..(c * 9 + ky * 3 + kx + 1) * n];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut xc[sy as usize * w..(sy as usize + 1) * w];
                        let src = &row[y * w..(y + 1) * w];
                        match kx {
                            0 => {
                                for i in 1..w {
                                    dst[i - 1] += src[i];
                                }
                            }
                            1 => {
                                for i in 0..w {
                                    dst[i] += src[i];
                                }
                            }
                            _ => {
                                for i in 0..w - 1 {
                                    dst[i + 1] += src[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (bsz, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "{}: input channels", self.name);
        let n = h * w;
        let kdim = self.kdim();
        let mut out = Array4::<f32>::zeros((bsz, self.cout, h, w));
        let per = chunk_ranges(bsz, BATCH_CHUNKS)[0].1;
        let xs: Vec<_> = x.axis_chunks_iter(Axis(0), per).collect();
        let outs: Vec<_> = out.axis_chunks_iter_mut(Axis(0), per).collect();
        xs.into_par_iter().zip(outs).for_each(|(xc, mut oc)| {
            let mut col = if self.ksize == 3 { vec![0.0f32; kdim * n] } else { Vec::new() };
            for bi in 0..xc.dim().0 {
                let xb = xc.index_axis(Axis(0), bi);
                let xb = xb.as_slice().expect("standard layout");
                let mut ob = oc.index_axis_mut(Axis(0), bi);
                let ob = ob.as_slice_mut().expect("standard layout");
                if self.ksize == 3 {
                    Self::im2col3(xb, cin, h, w, &mut col);
                    gemm_rm(self.cout, kdim, n, 1.0, &self.w, &col, 0.0, ob);
                } else {
                    gemm_rm(self.cout, cin, n, 1.0, &self.w, xb, 0.0, ob);
                }
                for c in 0..self.cout {
                    let bias = self.b[c];
                    for v in &mut ob[c * n..(c + 1) * n] {
                        *v += bias;
                    }
                }
            }
        });
        if train {
            self.cache_x = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache_x.take().expect("forward(train=true) before backward");
        let (bsz, cin, h, w) = x.dim();
        let n = h * w;
        let kdim = self.kdim();
        let mut dx = Array4::<f32>::zeros((bsz, cin, h, w));
        let per = chunk_ranges(bsz, BATCH_CHUNKS)[0].1;

        let xs: Vec<_> = x.axis_chunks_iter(Axis(0), per).collect();
        let dys: Vec<_> = dy.axis_chunks_iter(Axis(0), per).collect();
        let dxs: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), per).collect();

        // each chunk returns its own (gw, gb); summed afterwards in fixed order
        let partials: Vec<(Vec<f32>, Vec<f32>)> = xs
            .into_par_iter()
            .zip(dys)
            .zip(dxs)
            .map(|((xc, dyc), mut dxc)| {
                let mut gw = vec![0.0f32; self.w.len()];
                let mut gb = vec![0.0f32; self.cout];
                let mut col = if self.ksize == 3 { vec![0.0f32; kdim * n] } else { Vec::new() };
                let mut dcol = vec![0.0f32; kdim * n];
                for bi in 0..xc.dim().0 {
                    let xb = xc.index_axis(Axis(0), bi);
                    let xb = xb.as_slice().expect("standard layout");
                    let dyb = dyc.index_axis(Axis(0), bi);
                    let dyb = dyb.as_slice().expect("standard layout");
                    let mut dxb = dxc.index_axis_mut(Axis(0), bi);
                    let dxb = dxb.as_slice_mut().expect("standard layout");

                    let colref: &[f32] = if self.ksize == 3 {
                        Self::im2col3(xb, cin, h, w, &mut col);
                        &col
                    } else {
                        xb
                    };
                    // gw += dy_b (cout x n) @ col^T (n x kdim)
                    sgemm_strided(
                        self.cout, n, kdim, 1.0, dyb, n, 1, colref, 1, n, 1.0, &mut gw, kdim, 1,
                    );
                    for c in 0..self.cout {
                        gb[c] += dyb[c * n..(c + 1) * n].iter().sum::<f32>();
                    }
                    // dcol = w^T (kdim x cout) @ dy_b (cout x n)
                    sgemm_strided(
                        kdim, self.cout, n, 1.0, &self.w, 1, kdim, dyb, n, 1, 0.0, &mut dcol, n, 1,
                    );
                    if self.ksize == 3 {
                        Self::col2im3(&dcol, cin, h, w, dxb);
                    } else {
                        dxb.copy_from_slice(&dcol[..cin * n]);
                    }
                }
                (gw, gb)
            })
            .collect();
        for (gw, gb) in partials {
            for (acc, v) in self.gw.iter_mut().zip(&gw) {
                *acc += v;
            }
            for (acc, v) in self.gb.iter_mut().zip(&gb) {
                *acc += v;
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        let kdim = self.cin * self.ksize * self.ksize;
        f(ParamMut {
            name: format!("{}.w", self.name),
            shape: vec![self.cout, kdim],
            data: &mut self.w,
            grad: &mut self.gw,
        });
        f(ParamMut {
            name: format!("{}.b", self.name),
            shape: vec![self.cout],
            data: &mut self.b,
            grad: &mut self.gb,
        });
    }
}

/// Fully connected layer over 2-D batches.
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub w: Vec<f32>, // [dout, din]
    pub b: Vec<f32>,
    pub gw: Vec<f32>,
    pub gb: Vec<f32>,
    cache_x: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            w: he_normal(rng, din, dout * din),
            b: vec![0.0; dout],
            gw: vec![0.0; dout * din],
            gb: vec![0.0; dout],
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let (bsz, din) = x.dim();
        assert_eq!(din, self.din, "{}: input width", self.name);
        let mut out = Array2::<f32>::zeros((bsz, self.dout));
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        // y = x @ w^T
        sgemm_strided(bsz, din, self.dout, 1.0, xs, din, 1, &self.w, 1, din, 0.0, os, self.dout, 1);
        for bi in 0..bsz {
            for (j, bj) in self.b.iter().enumerate() {
                os[bi * self.dout + j] += bj;
            }
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache_x.take().expect("forward(train=true) before backward");
        let (bsz, din) = x.dim();
        let dys = dy.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        // gw += dy^T @ x
        sgemm_strided(self.dout, bsz, din, 1.0, dys, 1, self.dout, xs, din, 1, 1.0, &mut self.gw, din, 1);
        for bi in 0..bsz {
            for j in 0..self.dout {
                self.gb[j] += dys[bi * self.dout + j];
            }
        }
        let mut dx = Array2::<f32>::zeros((bsz, din));
        let dxs = dx.as_slice_mut().expect("standard layout");
        // dx = dy @ w
        gemm_rm(bsz, self.dout, din, 1.0, dys, &self.w, 0.0, dxs);
        dx
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: format!("{}.w", self.name),
            shape: vec![self.dout, self.din],
            data: &mut self.w,
            grad: &mut self.gw,
        });
        f(ParamMut {
            name: format!("{}.b", self.name),
            shape: vec![self.dout],
            data: &mut self.b,
            grad: &mut self.gb,
        });
    }
}

/// GELU (tanh approximation), elementwise.
#[derive(Default)]
pub struct Gelu {
    cache_x: Option<Array4<f32>>,
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub(crate) fn gelu_val(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Gelu {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = x.mapv(gelu_val);
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache_x.take().expect("forward(train=true) before backward");
        let mut dx = x.mapv(gelu_grad);
        dx *= dy;
        dx
    }
}

/// 2x2 average pooling, stride 2.
#[derive(Default)]
pub struct AvgPool2 {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2 {
    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (bsz, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool needs even spatial dims");
        self.in_dim = Some((bsz, c, h, w));
        let mut out = Array4::<f32>::zeros((bsz, c, h / 2, w / 2));
        for b in 0..bsz {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xcol in 0..w / 2 {
                        let s = x[(b, ch, 2 * y, 2 * xcol)]
                            + x[(b, ch, 2 * y, 2 * xcol + 1)]
                            + x[(b, ch, 2 * y + 1, 2 * xcol)]
                            + x[(b, ch, 2 * y + 1, 2 * xcol + 1)];
                        out[(b, ch, y, xcol)] = 0.25 * s;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (bsz, c, h, w) = self.in_dim.take().expect("forward before backward");
        let mut dx = Array4::<f32>::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xcol in 0..w / 2 {
                        let g = 0.25 * dy[(b, ch, y, xcol)];
                        dx[(b, ch, 2 * y, 2 * xcol)] = g;
                        dx[(b, ch, 2 * y, 2 * xcol + 1)] = g;
                        dx[(b, ch, 2 * y + 1, 2 * xcol)] = g;
                        dx[(b, ch, 2 * y + 1, 2 * xcol + 1)] = g;
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbor 2x upsampling.
#[derive(Default)]
pub struct Upsample2 {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl Upsample2 {
    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (bsz, c, h, w) = x.dim();
        self.in_dim = Some((bsz, c, h, w));
        let mut out = Array4::<f32>::zeros((bsz, c, h * 2, w * 2));
        for b in 0..bsz {
            for ch in 0..c {
                for y in 0..h {
                    for xcol in 0..w {
                        let v = x[(b, ch, y, xcol)];
                        out[(b, ch, 2 * y, 2 * xcol)] = v;
                        out[(b, ch, 2 * y, 2 * xcol + 1)] = v;
                        out[(b, ch, 2 * y + 1, 2 * xcol)] = v;
                        out[(b, ch, 2 * y + 1, 2 * xcol + 1)] = v;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (bsz, c, h, w) = self.in_dim.take().expect("forward before backward");
        let mut dx = Array4::<f32>::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for ch in 0..c {
                for y in 0..h {
                    for xcol in 0..w {
                        dx[(b, ch, y, xcol)] = dy[(b, ch, 2 * y, 2 * xcol)]
                            + dy[(b, ch, 2 * y, 2 * xcol + 1)]
                            + dy[(b, ch, 2 * y + 1, 2 * xcol)]
                            + dy[(b, ch, 2 * y + 1, 2 * xcol + 1)];
                    }
                }
            }
        }
        dx
    }
}

/// Single-head global self-attention over all spatial positions, with a
/// residual connection. Projections are 1x1 convolutions.
pub struct SelfAttention2d {
    pub channels: usize,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
    cache: Option<AttnCache>,
}

struct AttnCache {
    q: Array4<f32>,
    k: Array4<f32>,
    v: Array4<f32>,
    attn: Array3<f32>, // [b, n, n], rows sum to 1
}

impl SelfAttention2d {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        SelfAttention2d {
            channels,
            q: Conv2d::new(format!("{name}.q"), channels, channels, 1, rng),
            k: Conv2d::new(format!("{name}.k"), channels, channels, 1, rng),
            v: Conv2d::new(format!("{name}.v"), channels, channels, 1, rng),
            proj: Conv2d::new(format!("{name}.proj"), channels, channels, 1, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (bsz, c, h, w) = x.dim();
        let n = h * w;
        let scale = 1.0 / (c as f32).sqrt();
        let q = self.q.forward(x, train);
        let k = self.k.forward(x, train);
        let v = self.v.forward(x, train);

        let mut attn = Array3::<f32>::zeros((bsz, n, n));
        let mut o = Array4::<f32>::zeros((bsz, c, h, w));
        let per = chunk_ranges(bsz, BATCH_CHUNKS)[0].1;
        let qs: Vec<_> = q.axis_chunks_iter(Axis(0), per).collect();
        let ks: Vec<_> = k.axis_chunks_iter(Axis(0), per).collect();
        let vs: Vec<_> = v.axis_chunks_iter(Axis(0), per).collect();
        let attns: Vec<_> = attn.axis_chunks_iter_mut(Axis(0), per).collect();
        let os: Vec<_> = o.axis_chunks_iter_mut(Axis(0), per).collect();
        qs.into_par_iter()
            .zip(ks)
            .zip(vs)
            .zip(attns)
            .zip(os)
            .for_each(|((((qc, kc), vc), mut ac), mut oc)| {
                for bi in 0..qc.dim().0 {
                    let qb = qc.index_axis(Axis(0), bi);
                    let qb = qb.as_slice().expect("layout");
                    let kb = kc.index_axis(Axis(0), bi);
                    let kb = kb.as_slice().expect("layout");
                    let vb = vc.index_axis(Axis(0), bi);
                    let vb = vb.as_slice().expect("layout");
                    let mut ab = ac.index_axis_mut(Axis(0), bi);
                    let ab = ab.as_slice_mut().expect("layout");
                    let mut ob = oc.index_axis_mut(Axis(0), bi);
                    let ob = ob.as_slice_mut().expect("layout");

                    // scores = scale * q^T k, rows indexed by query token
                    sgemm_strided(n, c, n, scale, qb, 1, n, kb, n, 1, 0.0, ab, n, 1);
                    for row in ab.chunks_exact_mut(n) {
                        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                        let mut z = 0.0;
                        for val in row.iter_mut() {
                            *val = (*val - m).exp();
                            z += *val;
                        }
                        let inv = 1.0 / z;
                        for val in row.iter_mut() {
                            *val *= inv;
                        }
                    }
                    // o = v @ attn^T
                    sgemm_strided(c, n, n, 1.0, vb, n, 1, ab, 1, n, 0.0, ob, n, 1);
                }
            });

        let y = self.proj.forward(&o, train);
        if train {
            self.cache = Some(AttnCache { q, k, v, attn });
        }
        y + x
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("forward(train=true) before backward");
        let (bsz, c, h, w) = cache.q.dim();
        let n = h * w;
        let scale = 1.0 / (c as f32).sqrt();

        let do_ = self.proj.backward(dy);
        let mut dq = Array4::<f32>::zeros((bsz, c, h, w));
        let mut dk = Array4::<f32>::zeros((bsz, c, h, w));
        let mut dv = Array4::<f32>::zeros((bsz, c, h, w));

        let per = chunk_ranges(bsz, BATCH_CHUNKS)[0].1;
        let dos: Vec<_> = do_.axis_chunks_iter(Axis(0), per).collect();
        let qs: Vec<_> = cache.q.axis_chunks_iter(Axis(0), per).collect();
        let ks: Vec<_> = cache.k.axis_chunks_iter(Axis(0), per).collect();
        let vs: Vec<_> = cache.v.axis_chunks_iter(Axis(0), per).collect();
        let attns: Vec<_> = cache.attn.axis_chunks_iter(Axis(0), per).collect();
        let dqs: Vec<_> = dq.axis_chunks_iter_mut(Axis(0), per).collect();
        let dks: Vec<_> = dk.axis_chunks_iter_mut(Axis(0), per).collect();
        let dvs: Vec<_> = dv.axis_chunks_iter_mut(Axis(0), per).collect();

        dos.into_par_iter()
            .zip(qs)
            .zip(ks)
            .zip(vs)
            .zip(attns)
            .zip(dqs)
            .zip(dks)
            .zip(dvs)
            .for_each(|(((((((doc, qc), kc), vc), ac), mut dqc), mut dkc), mut dvc)| {
                let nb = doc.dim().0;
                let mut da = vec![0.0f32; n * n];
                let mut ds = vec![0.0f32; n * n];
                for bi in 0..nb {
                    let dob = doc.index_axis(Axis(0), bi);
                    let dob = dob.as_slice().expect("layout");
                    let qb = qc.index_axis(Axis(0), bi);
                    let qb = qb.as_slice().expect("layout");
                    let kb = kc.index_axis(Axis(0), bi);
                    let kb = kb.as_slice().expect("layout");
                    let vb = vc.index_axis(Axis(0), bi);
                    let vb = vb.as_slice().expect("layout");
                    let ab = ac.index_axis(Axis(0), bi);
                    let ab = ab.as_slice().expect("layout");
                    let mut dqb = dqc.index_axis_mut(Axis(0), bi);
                    let dqb = dqb.as_slice_mut().expect("layout");
                    let mut dkb = dkc.index_axis_mut(Axis(0), bi);
                    let dkb = dkb.as_slice_mut().expect("layout");
                    let mut dvb = dvc.index_axis_mut(Axis(0), bi);
                    let dvb = dvb.as_slice_mut().expect("layout");

                    // dv = do @ attn
                    sgemm_strided(c, n, n, 1.0, dob, n, 1, ab, n, 1, 0.0, dvb, n, 1);
                    // da = do^T @ v
                    sgemm_strided(n, c, n, 1.0, dob, 1, n, vb, n, 1, 0.0, &mut da, n, 1);
                    // softmax backward per row
                    for i in 0..n {
                        let arow = &ab[i * n..(i + 1) * n];
                        let darow = &da[i * n..(i + 1) * n];
                        let dot: f32 = arow.iter().zip(darow).map(|(a, g)| a * g).sum();
                        let dsrow = &mut ds[i * n..(i + 1) * n];
                        for j in 0..n {
                            dsrow[j] = arow[j] * (darow[j] - dot);
                        }
                    }
                    // dq = scale * k @ ds^T ; dk = scale * q @ ds
                    sgemm_strided(c, n, n, scale, kb, n, 1, &ds, 1, n, 0.0, dqb, n, 1);
                    sgemm_strided(c, n, n, scale, qb, n, 1, &ds, n, 1, 0.0, dkb, n, 1);
                }
            });

        let mut dx = self.q.backward(&dq);
        dx += &self.k.backward(&dk);
        dx += &self.v.backward(&dv);
        dx += dy; // residual
        dx
    }
}

impl Parameterized for SelfAttention2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.q.visit_params(f);
        self.k.visit_params(f);
        self.v.visit_params(f);
        self.proj.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    /// Finite-difference check for a single layer.
    fn fd_check_conv(ksize: usize) {
        let mut r = rng();
        let mut conv = Conv2d::new("t", 2, 3, ksize, &mut r);
        let x: Array4<f32> = Array::from_shape_fn((2, 2, 4, 4), |_| r.gen_range(-1.0..1.0));
        // loss = sum(y * m) for a fixed mask m
        let m: Array4<f32> = Array::from_shape_fn((2, 3, 4, 4), |_| r.gen_range(-1.0..1.0));
        let y = conv.forward(&x, true);
        let _ = y;
        let dx = conv.backward(&m);

        let h = 1e-2f32;
        // input gradient
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let yp = conv.forward(&xp, false);
            let ym = conv.forward(&xm, false);
            let fd = ((&yp - &ym) * &m).sum() / (2.0 * h);
            assert!(
                (fd - dx[idx]).abs() < 2e-2 * fd.abs().max(1.0),
                "conv{ksize} dx mismatch: fd={fd} vs {}",
                dx[idx]
            );
        }
        // weight gradient
        for wi in [0usize, 5, conv.w.len() - 1] {
            let orig = conv.w[wi];
            conv.w[wi] = orig + h;
            let yp = conv.forward(&x, false);
            conv.w[wi] = orig - h;
            let ym = conv.forward(&x, false);
            conv.w[wi] = orig;
            let fd = ((&yp - &ym) * &m).sum() / (2.0 * h);
            assert!(
                (fd - conv.gw[wi]).abs() < 2e-2 * fd.abs().max(1.0),
                "conv{ksize} gw mismatch at {wi}: fd={fd} vs {}",
                conv.gw[wi]
            );
        }
    }

    #[test]
    fn conv3_finite_difference() {
        fd_check_conv(3);
    }

    #[test]
    fn conv1_finite_difference() {
        fd_check_conv(1);
    }

    #[test]
    fn pool_upsample_inverse_shapes() {
        let mut r = rng();
        let x: Array4<f32> = Array::from_shape_fn((1, 2, 4, 4), |_| r.gen_range(-1.0..1.0));
        let mut pool = AvgPool2::default();
        let y = pool.forward(&x);
        assert_eq!(y.dim(), (1, 2, 2, 2));
        let dx = pool.backward(&y);
        assert_eq!(dx.dim(), x.dim());

        let mut up = Upsample2::default();
        let z = up.forward(&y);
        assert_eq!(z.dim(), (1, 2, 4, 4));
        let dz = up.backward(&z);
        // sum of each 2x2 block equals 4x the block value
        assert!((dz[(0, 0, 0, 0)] - 4.0 * y[(0, 0, 0, 0)]).abs() < 1e-6);
    }

    #[test]
    fn gelu_gradient_matches_fd() {
        for &x in &[-2.0f32, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-3;
            let fd = (gelu_val(x + h) - gelu_val(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_residual_passes() {
        let mut r = rng();
        let mut attn = SelfAttention2d::new("a", 4, &mut r);
        let x: Array4<f32> = Array::from_shape_fn((2, 4, 2, 2), |_| r.gen_range(-1.0..1.0));
        let y = attn.forward(&x, true);
        assert_eq!(y.dim(), x.dim());
        let cache = attn.cache.as_ref().unwrap();
        for b in 0..2 {
            for i in 0..4 {
                let s: f32 = (0..4).map(|j| cache.attn[(b, i, j)]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        let dx = attn.backward(&y.clone());
        assert_eq!(dx.dim(), x.dim());
    }

    #[test]
    fn conv_is_deterministic_across_calls() {
        let mut r = rng();
        let mut conv = Conv2d::new("t", 3, 8, 3, &mut r);
        let x: Array4<f32> = Array::from_shape_fn((5, 3, 8, 8), |_| r.gen_range(-1.0..1.0));
        let a = conv.forward(&x, false);
        let b = conv.forward(&x, false);
        assert_eq!(a, b);
    }
}
