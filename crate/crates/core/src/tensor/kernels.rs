//! Low-level numeric kernels shared by the graph operations.

use super::Float;

/// `C = alpha * op(A) * op(B) + beta * C` over row-major buffers.
///
/// `op(A)` is `m x k`; when `ta` is set, `a` is stored as `k x m`.
/// `op(B)` is `k x n`; when `tb` is set, `b` is stored as `n x k`.
/// With `beta == 0` the prior contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: A buffer too small");
    assert!(b.len() >= k * n, "gemm: B buffer too small");
    assert!(c.len() >= m * n, "gemm: C buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reached through these strides,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// Zero padding applied symmetrically on each spatial axis of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size (odd kernels only).
    Same,
    /// No padding.
    Valid,
    /// Explicit `(rows, cols)` padding.
    Explicit(usize, usize),
}

impl Padding {
    pub(crate) fn resolve(self, kh: usize, kw: usize) -> (usize, usize) {
        match self {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
            Padding::Explicit(h, w) => (h, w),
        }
    }
}

/// Geometry of a stride-1 sliding window over one `channels x h x w` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds `img` into `cols` of shape `[channels*kh*kw, out_h*out_w]`.
    pub fn im2col<T: Float>(&self, img: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = oh * ow;
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for y in 0..oh {
                        let sy = y as isize + i as isize - self.ph as isize;
                        let line = &mut dst[y * ow..(y + 1) * ow];
                        if sy < 0 || sy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for (x, out) in line.iter_mut().enumerate() {
                            let sx = x as isize + j as isize - self.pw as isize;
                            *out = if sx < 0 || sx >= self.w as isize {
                                T::zero()
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatter-adds `cols` back into `img`.
    pub fn col2im<T: Float>(&self, cols: &[T], img: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = oh * ow;
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for y in 0..oh {
                        let sy = y as isize + i as isize - self.ph as isize;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for x in 0..ow {
                            let sx = x as isize + j as isize - self.pw as isize;
                            if sx >= 0 && sx < self.w as isize {
                                dst[sx as usize] += src[y * ow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(false, false, m, n, k, 1.0, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }

        // Same product via explicitly transposed storage.
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(true, true, m, n, k, 1.0, &at, &bt, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window { channels: 2, h: 4, w: 5, kh: 3, kw: 3, ph: 1, pw: 1 };
        let img: Vec<f64> = (0..2 * 4 * 5).map(|v| (v as f64 * 0.7).cos()).collect();
        let cols_probe: Vec<f64> = (0..win.col_rows() * win.col_cols())
            .map(|v| (v as f64 * 0.13).sin())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        win.im2col(&img, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        win.col2im(&cols_probe, &mut back);
        let rhs: f64 = back.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
