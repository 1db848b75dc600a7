//! Minimal neural-network substrate with hand-written backprop.
//!
//! There is no tape or graph: the network is a fixed DAG and every layer
//! implements `forward` (caching what its backward pass needs) and
//! `backward` (returning the input gradient and accumulating parameter
//! gradients). All heavy math lowers to f32 GEMM via `matrixmultiply`,
//! parallelized over a fixed number of batch chunks so results do not
//! depend on thread scheduling.

mod adam;
mod ops;
mod unet;

pub use adam::AdamW;
pub use ops::{AvgPool2, Conv2d, Gelu, Linear, SelfAttention2d, Upsample2};
pub use unet::{CondUnet, NetworkSpec};

/// Fixed chunk count for batch-parallel layers. Accumulation order within
/// and across chunks is fixed, so outputs are bit-identical regardless of
/// how many worker threads execute the chunks.
pub const BATCH_CHUNKS: usize = 8;

pub(crate) fn chunk_ranges(batch: usize, chunks: usize) -> Vec<(usize, usize)> {
    let chunks = chunks.min(batch).max(1);
    let per = batch.div_ceil(chunks);
    let mut out = Vec::new();
    let mut start = 0;
    while start < batch {
        let end = (start + per).min(batch);
        out.push((start, end));
        start = end;
    }
    out
}

/// Row-major GEMM with explicit strides: C = alpha * A @ B + beta * C.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major GEMM over contiguous buffers.
pub fn gemm_rm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    sgemm_strided(m, k, n, alpha, a, k, 1, b, n, 1, beta, c, n, 1);
}

/// Mutable view of one named parameter tensor and its gradient.
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f32],
    pub grad: &'a mut [f32],
}

/// Anything holding trainable parameters exposes them in a stable order.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>));

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.data.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }
}
