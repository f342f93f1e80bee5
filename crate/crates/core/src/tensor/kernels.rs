// Forward/backward kernels on raw row-major buffers. Shape validation lives
// in the tape layer; these functions assume consistent extents.

use super::{gemm, Mat, Scalar};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], col: &mut [S]) {
    let (ho, wo) = (g.ho, g.wo);
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, col: &[S], dx: &mut [S]) {
    let (ho, wo) = (g.ho, g.wo);
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>) -> Vec<S> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![S::zero(); g.n * g.o * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * cols] };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let on = &mut out[n * g.o * cols..(n + 1) * g.o * cols];
        if let Some(b) = b {
            for (o, chunk) in on.chunks_mut(cols).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        let colref: &[S] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        gemm(Mat::new(w, g.o, rows), Mat::new(colref, rows, cols), beta, on);
    }
    out
}

/// Returns (dx, dw, db). `dx` is only computed when requested.
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dout: &[S],
    want_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dw = vec![S::zero(); g.o * rows];
    let mut db = vec![S::zero(); g.o];
    let mut dx = want_dx.then(|| vec![S::zero(); x.len()]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * cols] };
    let mut dcol = vec![S::zero(); if want_dx { rows * cols } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dn = &dout[n * g.o * cols..(n + 1) * g.o * cols];
        for (o, chunk) in dn.chunks(cols).enumerate() {
            let mut acc = S::zero();
            for &v in chunk {
                acc += v;
            }
            db[o] += acc;
        }
        let colref: &[S] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        gemm(Mat::new(dn, g.o, cols), Mat::new(colref, rows, cols).t(), S::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                gemm(Mat::new(w, g.o, rows).t(), Mat::new(dn, g.o, cols), S::one(), dxn);
            } else {
                gemm(Mat::new(w, g.o, rows).t(), Mat::new(dn, g.o, cols), S::zero(), &mut dcol);
                col2im_add(g, &dcol, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Per-(sample, group) statistics for group normalization over `[N, C, S]`.
pub(crate) struct GroupStats<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, GroupStats<S>) {
    let cg = c / groups;
    let count = S::from_usize(cg * spatial).unwrap();
    let mut y = vec![S::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let base = (s * c + g * cg) * spatial;
            let seg = &x[base..base + cg * spatial];
            let mut acc = S::zero();
            for &v in seg {
                acc += v;
            }
            let mu = acc / count;
            let mut var = S::zero();
            for &v in seg {
                let d = v - mu;
                var += d * d;
            }
            let r = S::one() / (var / count + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let off = base + ci * spatial;
                for k in 0..spatial {
                    y[off + k] = (x[off + k] - mu) * r * gamma[ch] + beta[ch];
                }
            }
            mean.push(mu);
            rstd.push(r);
        }
    }
    (y, GroupStats { mean, rstd })
}

/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[S],
    stats: &GroupStats<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let cg = c / groups;
    let count = S::from_usize(cg * spatial).unwrap();
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for s in 0..n {
        for g in 0..groups {
            let idx = s * groups + g;
            let (mu, r) = (stats.mean[idx], stats.rstd[idx]);
            let base = (s * c + g * cg) * spatial;
            // Sums of dxhat and dxhat*xhat over the group.
            let mut sum_d = S::zero();
            let mut sum_dx = S::zero();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let off = base + ci * spatial;
                for k in 0..spatial {
                    let xhat = (x[off + k] - mu) * r;
                    let d = dy[off + k];
                    dgamma[ch] += d * xhat;
                    dbeta[ch] += d;
                    let dxhat = d * gamma[ch];
                    sum_d += dxhat;
                    sum_dx += dxhat * xhat;
                }
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let off = base + ci * spatial;
                for k in 0..spatial {
                    let xhat = (x[off + k] - mu) * r;
                    let dxhat = dy[off + k] * gamma[ch];
                    dx[off + k] = r * (dxhat - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// Softmax along the middle extent of an `[outer, len, inner]` view.
pub(crate) fn softmax_forward<S: Scalar>(x: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = S::neg_infinity();
            for k in 0..len {
                m = m.max(x[at(k)]);
            }
            let mut z = S::zero();
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                y[at(k)] = y[at(k)] / z;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = S::zero();
            for k in 0..len {
                dot += y[at(k)] * dy[at(k)];
            }
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn upsample2x_forward<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![S::zero(); planes * h2 * w2];
    for p in 0..planes {
        for yy in 0..h2 {
            for xx in 0..w2 {
                y[(p * h2 + yy) * w2 + xx] = x[(p * h + yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2x_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dx[(p * h + yy / 2) * w + xx / 2] += dy[(p * h2 + yy) * w2 + xx];
            }
        }
    }
    dx
}

pub(crate) fn avgpool2x_forward<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = S::from_f(0.25);
    let mut y = vec![S::zero(); planes * h2 * w2];
    for p in 0..planes {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let at = |dy: usize, dx: usize| x[(p * h + 2 * yy + dy) * w + 2 * xx + dx];
                y[(p * h2 + yy) * w2 + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
            }
        }
    }
    y
}

pub(crate) fn avgpool2x_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = S::from_f(0.25);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let g = dy[(p * h2 + yy) * w2 + xx] * quarter;
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[(p * h + 2 * yy + a) * w + 2 * xx + b] = g;
                }
            }
        }
    }
    dx
}

/// Mean pixelwise cross-entropy over `[N, C, P]` logits. Returns (loss, probs).
pub(crate) fn cross_entropy_forward<S: Scalar>(
    logits: &[S],
    targets: &[usize],
    n: usize,
    c: usize,
    p: usize,
) -> (S, Vec<S>) {
    let probs = softmax_forward(logits, n, c, p);
    let mut loss = S::zero();
    for s in 0..n {
        for k in 0..p {
            let cls = targets[s * p + k];
            // log-softmax directly, so confident predictions do not round to log(0)
            let mut m = S::neg_infinity();
            for j in 0..c {
                m = m.max(logits[(s * c + j) * p + k]);
            }
            let mut z = S::zero();
            for j in 0..c {
                z += (logits[(s * c + j) * p + k] - m).exp();
            }
            loss += z.ln() + m - logits[(s * c + cls) * p + k];
        }
    }
    (loss / S::from_usize(n * p).unwrap(), probs)
}

pub(crate) fn cross_entropy_backward<S: Scalar>(
    probs: &[S],
    targets: &[usize],
    n: usize,
    c: usize,
    p: usize,
    gout: S,
) -> Vec<S> {
    let scale = gout / S::from_usize(n * p).unwrap();
    let mut dx: Vec<S> = probs.iter().map(|&v| v * scale).collect();
    for s in 0..n {
        for k in 0..p {
            let cls = targets[s * p + k];
            dx[(s * c + cls) * p + k] -= scale;
        }
    }
    dx
}
