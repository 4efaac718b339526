//! Raw loops behind the tape ops. Everything here works on slices in
//! row-major order and never allocates tape nodes.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_a_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_at_b<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride_w + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// 1×1, unpadded, unit stride: the input image already is the column
    /// matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1
            && self.kernel_w == 1
            && self.pad_h == 0
            && self.pad_w == 0
            && self.stride_h == 1
            && self.stride_w == 1
    }
}

/// Unfolds one `[C,H,W]` image into `[C·kh·kw, Ho·Wo]` patch columns.
pub fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride_h + ki) as isize - g.pad_h as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride_w + kj) as isize - g.pad_w as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride_h + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride_w + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[T],
    kernel: &[T],
) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_channels * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..batch {
        let image = &input[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        if g.is_pointwise() {
            gemm(out_channels, k, p, kernel, image, dst);
        } else {
            im2col(g, image, &mut cols);
            gemm(out_channels, k, p, kernel, &cols, dst);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Vec<T>, Vec<T>) {
    let p = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let mut d_input = if want_input { vec![T::zero(); input.len()] } else { Vec::new() };
    let mut d_kernel = if want_kernel { vec![T::zero(); kernel.len()] } else { Vec::new() };
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut d_cols = if pointwise || !want_input { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..batch {
        let image = &input[n * in_len..(n + 1) * in_len];
        let go = &grad_out[n * out_channels * p..(n + 1) * out_channels * p];
        if want_kernel {
            if pointwise {
                gemm_a_bt(out_channels, p, k, go, image, &mut d_kernel);
            } else {
                im2col(g, image, &mut cols);
                gemm_a_bt(out_channels, p, k, go, &cols, &mut d_kernel);
            }
        }
        if want_input {
            let di = &mut d_input[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm_at_b(k, out_channels, p, kernel, go, di);
            } else {
                d_cols.iter_mut().for_each(|v| *v = T::zero());
                gemm_at_b(k, out_channels, p, kernel, go, &mut d_cols);
                col2im(g, &d_cols, di);
            }
        }
    }
    (d_input, d_kernel)
}

/// Space-to-depth on `[N,C,H,W]`: output channel `4c + q` holds the
/// quadrant `q` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right) of
/// every 2×2 block of input channel `c`.
pub fn space_to_depth<T: Scalar>(n: usize, c: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let q = (y % 2) * 2 + (xx % 2);
                    let src = ((b * c + ch) * h + y) * w + xx;
                    let dst = ((b * c * 4 + ch * 4 + q) * h2 + y / 2) * w2 + xx / 2;
                    out[dst] = x[src];
                }
            }
        }
    }
    out
}

/// Exact inverse of [`space_to_depth`]; `c` is the channel count of the
/// squeezed input (a multiple of 4).
pub fn depth_to_space<T: Scalar>(n: usize, c: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let c0 = c / 4;
    let (h0, w0) = (h * 2, w * 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c0 {
            for y in 0..h0 {
                for xx in 0..w0 {
                    let q = (y % 2) * 2 + (xx % 2);
                    let dst = ((b * c0 + ch) * h0 + y) * w0 + xx;
                    let src = ((b * c + ch * 4 + q) * h + y / 2) * w + xx / 2;
                    out[dst] = x[src];
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling; returns values and the flat argmax index of
/// each window.
pub fn max_pool2<T: Scalar>(n: usize, c: usize, h: usize, w: usize, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    let mut arg = Vec::with_capacity(n * c * h2 * w2);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
