//! Forward and backward kernels for the layer kinds the networks use.
//!
//! Tensors are NHWC `f32`. Convolutions are 3x3, stride 1, zero "same"
//! padding, lowered to a matrix product over an im2col buffer. Conv weights
//! are laid out `[3, 3, cin, cout]`, which is exactly the `[9 * cin, cout]`
//! matrix the product needs.

use std::cell::RefCell;

/// Dense NHWC activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "tensor data length");
        Self { n, h, w, c, data }
    }

    /// Spatial-and-channel shape `(h, w, c)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }
}

/// Sets flush-to-zero and denormals-are-zero on the current thread until
/// dropped. Subnormal activations and gradients otherwise slow training
/// down by an order of magnitude as it converges.
pub(crate) struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    pub(crate) fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            // FTZ (bit 15) and DAZ (bit 6) of MXCSR.
            let saved = read_mxcsr();
            write_mxcsr(saved | (1 << 15) | (1 << 6));
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_mxcsr(self.saved);
    }
}

#[cfg(target_arch = "x86_64")]
fn read_mxcsr() -> u32 {
    let mut v = 0u32;
    // SAFETY: stmxcsr stores the 32-bit control register to valid memory.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack, preserves_flags)) };
    v
}

#[cfg(target_arch = "x86_64")]
fn write_mxcsr(v: u32) {
    // SAFETY: only rounding/exception-mask bits that the caller read back are changed.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &v, options(nostack, readonly, preserves_flags)) };
}

// Upper bound on the im2col scratch, in floats (16 MiB).
const COL_BUDGET: usize = 4 << 20;

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        if s.len() < len {
            s.resize(len, 0.0);
        }
        f(&mut s[..len])
    })
}

fn samples_per_chunk(x: &Tensor) -> usize {
    let per_sample = x.h * x.w * 9 * x.c;
    (COL_BUDGET / per_sample.max(1)).clamp(1, x.n.max(1))
}

/// Row `(s, y, x)` of the column matrix holds the 3x3 neighbourhood of that
/// pixel across all input channels, tap-major.
fn im2col(x: &Tensor, first: usize, count: usize, cols: &mut [f32]) {
    let (h, w, c) = (x.h, x.w, x.c);
    let k = 9 * c;
    for s in 0..count {
        let src = x.sample(first + s);
        for yy in 0..h {
            for xx in 0..w {
                let row = &mut cols[((s * h + yy) * w + xx) * k..][..k];
                for ky in 0..3 {
                    let sy = yy as i64 + ky as i64 - 1;
                    for kx in 0..3 {
                        let sx = xx as i64 + kx as i64 - 1;
                        let dst = &mut row[(ky * 3 + kx) * c..][..c];
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            dst.fill(0.0);
                        } else {
                            let off = (sy as usize * w + sx as usize) * c;
                            dst.copy_from_slice(&src[off..off + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input grid.
fn col2im(cols: &[f32], dx: &mut Tensor, first: usize, count: usize) {
    let (h, w, c) = (dx.h, dx.w, dx.c);
    let k = 9 * c;
    let len = dx.sample_len();
    for s in 0..count {
        let dst = &mut dx.data[(first + s) * len..][..len];
        for yy in 0..h {
            for xx in 0..w {
                let row = &cols[((s * h + yy) * w + xx) * k..][..k];
                for ky in 0..3 {
                    let sy = yy as i64 + ky as i64 - 1;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as i64 + kx as i64 - 1;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let off = (sy as usize * w + sx as usize) * c;
                        for (d, &g) in dst[off..off + c].iter_mut().zip(&row[(ky * 3 + kx) * c..][..c]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (isize, isize),
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: all index ranges implied by (m, k, n) and the strides lie inside
    // the slices; callers pass dense row- or column-major views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub fn conv3x3_forward(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize) -> Tensor {
    let (hw, k) = (x.h * x.w, 9 * x.c);
    assert_eq!(weight.len(), k * cout, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let mut out = Tensor::zeros(x.n, x.h, x.w, cout);
    for row in out.data.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    let chunk = samples_per_chunk(x);
    let mut first = 0;
    while first < x.n {
        let count = chunk.min(x.n - first);
        let rows = count * hw;
        with_scratch(rows * k, |cols| {
            im2col(x, first, count, cols);
            let dst = &mut out.data[first * hw * cout..(first + count) * hw * cout];
            gemm(
                rows,
                k,
                cout,
                cols,
                (k as isize, 1),
                weight,
                (cout as isize, 1),
                1.0,
                dst,
                (cout as isize, 1),
            );
        });
        first += count;
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
pub fn conv3x3_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_dx: bool,
) -> Option<Tensor> {
    let cout = dy.c;
    let (hw, k) = (x.h * x.w, 9 * x.c);
    assert_eq!((dy.n, dy.h, dy.w), (x.n, x.h, x.w));
    for row in dy.data.chunks_exact(cout) {
        for (b, &g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.h, x.w, x.c));
    let chunk = samples_per_chunk(x);
    let mut first = 0;
    while first < x.n {
        let count = chunk.min(x.n - first);
        let rows = count * hw;
        let dyc = &dy.data[first * hw * cout..(first + count) * hw * cout];
        with_scratch(rows * k, |cols| {
            im2col(x, first, count, cols);
            // dW += cols^T * dy
            gemm(
                k,
                rows,
                cout,
                cols,
                (1, k as isize),
                dyc,
                (cout as isize, 1),
                1.0,
                dweight,
                (cout as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // dcols = dy * W^T, reusing the scratch.
                gemm(
                    rows,
                    cout,
                    k,
                    dyc,
                    (cout as isize, 1),
                    weight,
                    (1, cout as isize),
                    0.0,
                    cols,
                    (k as isize, 1),
                );
                col2im(cols, dx, first, count);
            }
        });
        first += count;
    }
    dx
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose activation was clamped.
pub fn relu_backward_inplace(dy: &mut Tensor, activated: &Tensor) {
    for (g, &a) in dy.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the output and, per output element,
/// the winning position inside its window (0..4, raster order).
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (oh, ow, c) = (x.h / 2, x.w / 2, x.c);
    let mut out = Tensor::zeros(x.n, oh, ow, c);
    let mut arg = vec![0u8; out.data.len()];
    for s in 0..x.n {
        let src = x.sample(s);
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((s * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0u8;
                    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = src[((2 * oy + dy) * x.w + 2 * ox + dx) * c + ch];
                        if v > best {
                            best = v;
                            bi = i as u8;
                        }
                    }
                    out.data[o + ch] = best;
                    arg[o + ch] = bi;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[u8], in_h: usize, in_w: usize) -> Tensor {
    let c = dy.c;
    let mut dx = Tensor::zeros(dy.n, in_h, in_w, c);
    for s in 0..dy.n {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let o = ((s * dy.h + oy) * dy.w + ox) * c;
                for ch in 0..c {
                    let a = arg[o + ch] as usize;
                    let (iy, ix) = (2 * oy + a / 2, 2 * ox + a % 2);
                    dx.data[((s * in_h + iy) * in_w + ix) * c + ch] += dy.data[o + ch];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (oh, ow, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = Tensor::zeros(x.n, oh, ow, c);
    for s in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((s * x.h + oy / 2) * x.w + ox / 2) * c;
                let dst = ((s * oh + oy) * ow + ox) * c;
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w, c) = (dy.h / 2, dy.w / 2, dy.c);
    let mut dx = Tensor::zeros(dy.n, h, w, c);
    for s in 0..dy.n {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let src = ((s * dy.h + oy) * dy.w + ox) * c;
                let dst = ((s * h + oy / 2) * w + ox / 2) * c;
                for ch in 0..c {
                    dx.data[dst + ch] += dy.data[src + ch];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shapes");
    let c = a.c + b.c;
    let mut out = Tensor::zeros(a.n, a.h, a.w, c);
    for ((dst, ra), rb) in out
        .data
        .chunks_exact_mut(c)
        .zip(a.data.chunks_exact(a.c))
        .zip(b.data.chunks_exact(b.c))
    {
        dst[..a.c].copy_from_slice(ra);
        dst[a.c..].copy_from_slice(rb);
    }
    out
}

pub fn split_channels(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = d.c - ca;
    let mut a = Tensor::zeros(d.n, d.h, d.w, ca);
    let mut b = Tensor::zeros(d.n, d.h, d.w, cb);
    for ((src, ra), rb) in d
        .data
        .chunks_exact(d.c)
        .zip(a.data.chunks_exact_mut(ca))
        .zip(b.data.chunks_exact_mut(cb))
    {
        ra.copy_from_slice(&src[..ca]);
        rb.copy_from_slice(&src[ca..]);
    }
    (a, b)
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed binary cross-entropy of logits against {0, 1} targets, and the
/// per-element gradient `sigmoid(z) - y` scaled by `scale`.
pub fn bce_with_logits(logits: &[f32], targets: &[f32], scale: f32) -> (f64, Vec<f32>) {
    assert_eq!(logits.len(), targets.len());
    let mut loss = 0.0f64;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let l = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            loss += l as f64;
            (sigmoid(z) - y) * scale
        })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution, no lowering.
    fn naive_conv(x: &Tensor, wt: &[f32], b: &[f32], cout: usize) -> Tensor {
        let mut out = Tensor::zeros(x.n, x.h, x.w, cout);
        for s in 0..x.n {
            for y in 0..x.h as i64 {
                for xx in 0..x.w as i64 {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= x.h as i64 || sx >= x.w as i64 {
                                    continue;
                                }
                                for ci in 0..x.c {
                                    let xv = x.data[((s * x.h + sy as usize) * x.w + sx as usize) * x.c + ci];
                                    let wv = wt[(((ky * 3 + kx) as usize) * x.c + ci) * cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data[((s * x.h + y as usize) * x.w + xx as usize) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let v = (i as u32)
                    .wrapping_mul(2654435761)
                    .wrapping_add(seed.wrapping_mul(40503));
                (v % 2001) as f32 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn lowered_conv_matches_direct_conv() {
        for &(n, h, w, cin, cout) in &[(2, 5, 4, 3, 2), (1, 1, 1, 4, 3), (3, 2, 2, 1, 5)] {
            let x = Tensor::from_vec(n, h, w, cin, pseudo(n * h * w * cin, 1));
            let wt = pseudo(9 * cin * cout, 2);
            let b = pseudo(cout, 3);
            let got = conv3x3_forward(&x, &wt, &b, cout);
            let want = naive_conv(&x, &wt, &b, cout);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_routing() {
        let x = Tensor::from_vec(1, 2, 2, 1, vec![1.0, 5.0, 3.0, 2.0]);
        let (p, arg) = maxpool2_forward(&x);
        assert_eq!(p.data, vec![5.0]);
        assert_eq!(arg, vec![1]);
        let dx = maxpool2_backward(&Tensor::from_vec(1, 1, 1, 1, vec![7.0]), &arg, 2, 2);
        assert_eq!(dx.data, vec![0.0, 7.0, 0.0, 0.0]);
        let u = upsample2_forward(&p);
        assert_eq!(u.data, vec![5.0; 4]);
        assert_eq!(upsample2_backward(&u).data, vec![20.0]);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::from_vec(2, 2, 1, 2, pseudo(8, 4));
        let b = Tensor::from_vec(2, 2, 1, 3, pseudo(12, 5));
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.c, 5);
        let (a2, b2) = split_channels(&cat, 2);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let (l, g) = bce_with_logits(&[0.0, 0.0], &[0.0, 1.0], 1.0);
        assert!((l / 2.0 - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(g, vec![0.5, -0.5]);
        let (l, _) = bce_with_logits(&[80.0, -80.0], &[1.0, 0.0], 1.0);
        assert!(l.is_finite() && l < 1e-6);
    }
}
