//! Raw loops behind the graph ops: dense GEMM, im2col convolution and
//! max pooling.

/// `c = alpha * a(m×k) * b(k×n) + beta * c`, each operand addressed through
/// explicit row/column strides so transposes need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a strided, zero-padded window. Floor division, so
/// trailing rows that do not fill a whole stride are dropped.
pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; g.batch * g.c_out * ncol];
    let in_sz = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        let dst = &mut out[b * g.c_out * ncol..(b + 1) * g.c_out * ncol];
        gemm(g.c_out, rows, ncol, k, (rows, 1), &cols, (ncol, 1), dst, 0.0);
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; rows * ncol];
    let mut dcols = vec![0.0; rows * ncol];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dk = need_dk.then(|| vec![0.0; k.len()]);
    for b in 0..g.batch {
        let go = &gout[b * g.c_out * ncol..(b + 1) * g.c_out * ncol];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            // dk(c_out × rows) += go(c_out × ncol) · colsᵀ(ncol × rows)
            gemm(g.c_out, ncol, rows, go, (ncol, 1), &cols, (1, ncol), dk, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols(rows × ncol) = kᵀ(rows × c_out) · go(c_out × ncol)
            gemm(rows, g.c_out, ncol, k, (1, rows), go, (ncol, 1), &mut dcols, 0.0);
            col2im_add(&dcols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dk)
}

/// Max pooling over `[B, C, H, W]` with `-inf` padding. Returns the pooled
/// values and, for each, the flat input offset it came from.
pub(crate) fn max_pool_forward(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for ki in 0..kernel {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let at = base + ii as usize * w + jj as usize;
                        if best_at == usize::MAX || x[at] > best || x[at].is_nan() {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (out, arg)
}
