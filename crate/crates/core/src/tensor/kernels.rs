//! Raw loops behind the graph ops. Everything is row-major NCHW.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Half-open range of output columns whose input column for kernel
    /// offset `kx` lands inside the image.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let last_in = self.width - 1 + p;
        let hi = if last_in < kx {
            0
        } else {
            ((last_in - kx) / s + 1).min(self.out_w())
        };
        (lo, hi.max(lo))
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        (iy < self.height).then_some(iy)
    }
}

/// Unfolds one image `[Ci,H,W]` into `cols[(ci*kh+ky)*kw+kx][oy*ow+ox]`.
#[inline(always)]
fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    cols.fill(0.0);
    for ci in 0..g.in_ch {
        let plane = &img[ci * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * ohw..][..ohw];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let src = &plane[iy * g.width..][..g.width];
                    let dst = &mut row[oy * ow..][lo..hi];
                    if g.stride == 1 {
                        let start = lo + kx - g.padding;
                        dst.copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[(lo + j) * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`], accumulating into `img`.
#[inline(always)]
fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for ci in 0..g.in_ch {
        let plane = &mut img[ci * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * ohw..][..ohw];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let dst = &mut plane[iy * g.width..][..g.width];
                    let src = &row[oy * ow..][lo..hi];
                    if g.stride == 1 {
                        let start = lo + kx - g.padding;
                        for (d, s) in dst[start..start + (hi - lo)].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (j, s) in src.iter().enumerate() {
                            dst[(lo + j) * g.stride + kx - g.padding] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Runs `body` through an AVX2-enabled copy when the CPU supports it. The
/// code uses no fused multiply-add, so both paths round identically.
macro_rules! simd_dispatch {
    ($body:ident($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn wide<R>(f: impl FnOnce() -> R) -> R {
                f()
            }
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { wide(#[inline(always)] || $body($($arg),*)) };
            }
        }
        $body($($arg),*)
    }};
}

/// `out += Σ_j coef[j]·rows[j]`, folding four rows per pass over `out`.
#[inline(always)]
fn fused_axpy(out: &mut [f64], coef: impl Fn(usize) -> f64, rows: &[f64], n_rows: usize) {
    let len = out.len();
    let mut j = 0;
    while j + 4 <= n_rows {
        let (a, b, c, d) = (coef(j), coef(j + 1), coef(j + 2), coef(j + 3));
        let r0 = &rows[j * len..][..len];
        let r1 = &rows[(j + 1) * len..][..len];
        let r2 = &rows[(j + 2) * len..][..len];
        let r3 = &rows[(j + 3) * len..][..len];
        for p in 0..len {
            out[p] += (a * r0[p] + b * r1[p]) + (c * r2[p] + d * r3[p]);
        }
        j += 4;
    }
    while j < n_rows {
        let a = coef(j);
        for (o, r) in out.iter_mut().zip(&rows[j * len..][..len]) {
            *o += a * r;
        }
        j += 1;
    }
}

/// Dot product with four independent partial sums, fixed summation order.
#[inline(always)]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    simd_dispatch!(conv2d_forward_body(g, x, w))
}

#[inline(always)]
fn conv2d_forward_body(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let ohw = g.out_h() * g.out_w();
    let (in_len, rows) = (g.in_ch * g.height * g.width, g.in_ch * g.kh * g.kw);
    let mut cols = vec![0.0; rows * ohw];
    let mut out = vec![0.0; g.batch * g.out_ch * ohw];
    for b in 0..g.batch {
        im2col(g, &x[b * in_len..][..in_len], &mut cols);
        let out_img = &mut out[b * g.out_ch * ohw..][..g.out_ch * ohw];
        for (co, orow) in out_img.chunks_exact_mut(ohw).enumerate() {
            let wrow = &w[co * rows..][..rows];
            fused_axpy(orow, |r| wrow[r], &cols, rows);
        }
    }
    out
}

/// Returns `(dx, dw)`; each is skipped when not wanted.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    simd_dispatch!(conv2d_backward_body(g, x, w, dy, want_dx, want_dw))
}

#[inline(always)]
fn conv2d_backward_body(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ohw = g.out_h() * g.out_w();
    let (in_len, rows) = (g.in_ch * g.height * g.width, g.in_ch * g.kh * g.kw);
    let mut cols = vec![0.0; rows * ohw];
    let mut dcols = vec![0.0; rows * ohw];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for b in 0..g.batch {
        let dy_img = &dy[b * g.out_ch * ohw..][..g.out_ch * ohw];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_len..][..in_len], &mut cols);
            for (co, drow) in dy_img.chunks_exact(ohw).enumerate() {
                for (r, col) in cols.chunks_exact(ohw).enumerate() {
                    dw[co * rows + r] += dot4(drow, col);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for (r, dcol) in dcols.chunks_exact_mut(ohw).enumerate() {
                fused_axpy(dcol, |co| w[co * rows + r], dy_img, g.out_ch);
            }
            col2im(g, &dcols, &mut dx[b * in_len..][..in_len]);
        }
    }
    (dx, dw)
}

/// Max pooling over NCHW planes, no padding. Returns values and the flat
/// input index each output was taken from; ties keep the first index.
pub(crate) fn maxpool_forward(
    shape: &[usize],
    x: &[f64],
    size: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, [usize; 2]) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, [oh, ow])
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `dA = dY · Bᵀ`
pub(crate) fn matmul_grad_a(dy: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = drow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(d, bv)| d * bv)
                .sum();
        }
    }
    da
}

/// `dB = Aᵀ · dY`
pub(crate) fn matmul_grad_b(a: &[f64], dy: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let drow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, d) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
    db
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
