//! Low-level numeric kernels shared by the tape operations.

/// `c = a · b (+ c if accumulate)` with `a` logically m×k and `b` logically k×n,
/// each optionally stored transposed. `c` is row-major m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n buffers checked
    // above, and `c` does not alias `a` or `b`.
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
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one CHW image into a (C·k·k) × (Ho·Wo) patch matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back into a CHW image.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Separable valid-mode filtering of one H×W plane with a 1-D kernel applied
/// along both axes. Output is (H−k+1)×(W−k+1).
pub(crate) fn blur_plane(x: &[f32], h: usize, w: usize, kernel: &[f32], out: &mut [f32]) {
    let k = kernel.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0f32; h * wo];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for ox in 0..wo {
            let mut acc = 0.0f32;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * row[ox + j];
            }
            tmp[y * wo + ox] = acc;
        }
    }
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0f32;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(oy + i) * wo + ox];
            }
            out[oy * wo + ox] = acc;
        }
    }
}

/// Adjoint of [`blur_plane`].
pub(crate) fn blur_plane_backward(dy: &[f32], h: usize, w: usize, kernel: &[f32], dx: &mut [f32]) {
    let k = kernel.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut dtmp = vec![0.0f32; h * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let g = dy[oy * wo + ox];
            for (i, &kv) in kernel.iter().enumerate() {
                dtmp[(oy + i) * wo + ox] += kv * g;
            }
        }
    }
    for y in 0..h {
        for ox in 0..wo {
            let g = dtmp[y * wo + ox];
            for (j, &kv) in kernel.iter().enumerate() {
                dx[y * w + ox + j] += kv * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                assert_eq!(c, want);
            }
        }
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        let plus_one: Vec<f32> = want.iter().map(|v| v + 1.0).collect();
        assert_eq!(c, plus_one);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..40).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let len = g.col_rows() * g.col_cols();
        let y: Vec<f32> = (0..len).map(|i| ((i * 3) % 5) as f32 - 2.0).collect();
        let mut cols = vec![0.0; len];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im_add(&y, &g, &mut back);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn blur_backward_is_adjoint() {
        let (h, w) = (6, 7);
        let kernel = [0.25, 0.5, 0.25];
        let x: Vec<f32> = (0..h * w).map(|i| ((i * 5) % 9) as f32).collect();
        let (ho, wo) = (h - 2, w - 2);
        let y: Vec<f32> = (0..ho * wo).map(|i| ((i * 2) % 7) as f32 - 3.0).collect();
        let mut out = vec![0.0; ho * wo];
        blur_plane(&x, h, w, &kernel, &mut out);
        let mut dx = vec![0.0; h * w];
        blur_plane_backward(&y, h, w, &kernel, &mut dx);
        let lhs: f32 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}
