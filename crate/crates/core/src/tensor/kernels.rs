//! Raw buffer kernels behind the tape ops. Everything here works on plain
//! row-major slices; shape checking happens in the callers.

/// `c = a · b` with `a: m×k`, `b: k×n`, overwriting `c: m×n`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, false, b, false, c, m, k, n, 0.0);
}

/// General `c = op(a) · op(b) + beta·c`, where `op` optionally transposes.
/// `a` is stored as m×k (or k×m when `ta`), `b` as k×n (or n×k when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug asserts above pin every buffer to its m/k/n extent and
    // the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
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
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h() * self.out_w()
    }
}

/// Unfold one image `c_in×h×w` into a `patch_len × (out_h·out_w)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
pub fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. `x: batch×in_len`, `w: c_out×patch_len`, output `batch×out_len`.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry, batch: usize) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let mut out = vec![0.0; batch * g.out_len()];
    let mut cols = vec![0.0; g.patch_len() * plane];
    for b in 0..batch {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        let y = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        matmul(w, &cols, y, g.c_out, g.patch_len(), plane);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut y[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradient of a batched convolution with respect to its input.
pub fn conv2d_grad_input(dy: &[f64], w: &[f64], g: &ConvGeometry, batch: usize) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let mut dx = vec![0.0; batch * g.in_len()];
    let mut dcols = vec![0.0; g.patch_len() * plane];
    for b in 0..batch {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(w, true, dyb, false, &mut dcols, g.patch_len(), g.c_out, plane, 0.0);
        col2im(&dcols, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    dx
}

/// Gradients with respect to the kernel and bias, summed over the batch in
/// sample order.
pub fn conv2d_grad_weight(dy: &[f64], x: &[f64], g: &ConvGeometry, batch: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = g.out_h() * g.out_w();
    let mut dw = vec![0.0; g.c_out * g.patch_len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; g.patch_len() * plane];
    for b in 0..batch {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(dyb, false, &cols, true, &mut dw, g.c_out, plane, g.patch_len(), 1.0);
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dyb[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    (dw, db)
}

/// 2×2 stride-2 max pooling over `planes` maps of `h×w`. Returns the pooled
/// values and, for each output, the linear input index that won. Ties go to
/// the lowest linear index.
pub fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
