//! Raw numeric kernels over contiguous slices.
//!
//! Everything here works on one sample at a time in CHW layout. Convolutions
//! lower to an im2col matrix of shape `(C * k * k, Ho * Wo)` followed by a
//! GEMM; the deformable variant fills the same matrix with modulated bilinear
//! samples instead of integer-grid reads.

use matrixmultiply::dgemm;

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major with the given
/// row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the stated dimensions and strides;
    // the debug assertions at each call site check the lengths.
    unsafe {
        dgemm(
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
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = c * kk + ki * g.k + kj;
                let out = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

pub fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = c * kk + ki * g.k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain convolution of one sample. `out` has shape `(o, ho, wo)`.
pub fn conv_forward(
    x: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    o: usize,
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let rows = g.col_rows();
    debug_assert_eq!(weight.len(), o * rows);
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else {
        scratch.resize(rows * n, 0.0);
        im2col(x, g, scratch);
        scratch
    };
    gemm(o, rows, n, weight, rows as isize, 1, cols, n as isize, 1, 0.0, out);
    if let Some(b) = bias {
        for (oc, plane) in out.chunks_mut(n).enumerate() {
            for v in plane {
                *v += b[oc];
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `dx` is given, the input
/// gradient for one sample.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    o: usize,
    dy: &[f64],
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
    scratch: &mut Vec<f64>,
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let rows = g.col_rows();
    if let Some(db) = db {
        for (oc, plane) in dy.chunks(n).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            scratch.resize(rows * n, 0.0);
            im2col(x, g, scratch);
            scratch
        };
        // dw(o x rows) += dy(o x n) * cols^T(n x rows)
        gemm(o, n, rows, dy, n as isize, 1, cols, 1, n as isize, 1.0, dw);
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            // dx(c x n) += w^T(c x o) * dy(o x n)
            gemm(rows, o, n, weight, 1, rows as isize, dy, n as isize, 1, 1.0, dx);
        } else {
            scratch.resize(rows * n, 0.0);
            gemm(rows, o, n, weight, 1, rows as isize, dy, n as isize, 1, 0.0, scratch);
            col2im_add(scratch, g, dx);
        }
    }
}

/// Bilinear read of an `(h, w)` plane at fractional `(y, x)`; neighbours
/// outside the plane contribute zero.
#[inline]
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let taps = BilinearTaps::new(h, w, y, x);
    taps.apply(plane)
}

/// Value and partial derivatives `(v, dv/dy, dv/dx)` of [`bilinear`]. At
/// integer coordinates the derivative is the one-sided derivative of the cell
/// whose lower corner is `floor(y), floor(x)`.
pub fn bilinear_with_grad(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let taps = BilinearTaps::new(h, w, y, x);
    let v = taps.corner_values(plane);
    let (ly, lx) = (taps.ly, taps.lx);
    let value = (1.0 - ly) * (1.0 - lx) * v[0] + (1.0 - ly) * lx * v[1] + ly * (1.0 - lx) * v[2] + ly * lx * v[3];
    let dy = (1.0 - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
    let dx = (1.0 - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
    (value, dy, dx)
}

/// The four corners of a bilinear read. Out-of-range corners carry index 0
/// and a validity flag of false.
#[derive(Clone, Copy, Debug)]
struct BilinearTaps {
    idx: [usize; 4],
    valid: [bool; 4],
    ly: f64,
    lx: f64,
}

impl BilinearTaps {
    #[inline]
    fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let (y0, x0) = (y0 as i64, x0 as i64);
        let mut idx = [0usize; 4];
        let mut valid = [false; 4];
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        for (i, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                valid[i] = true;
                idx[i] = cy as usize * w + cx as usize;
            }
        }
        BilinearTaps { idx, valid, ly, lx }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (ly, lx) = (self.ly, self.lx);
        [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx]
    }

    #[inline]
    fn corner_values(&self, plane: &[f64]) -> [f64; 4] {
        let mut v = [0.0; 4];
        for i in 0..4 {
            if self.valid[i] {
                v[i] = plane[self.idx[i]];
            }
        }
        v
    }

    #[inline]
    fn apply(&self, plane: &[f64]) -> f64 {
        let wts = self.weights();
        let v = self.corner_values(plane);
        wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3]
    }
}

/// Geometry of a stride-1, "same"-padded deformable convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl DeformGeom {
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Integer tap displacement `(dy, dx)` of tap `t`, row-major from the
    /// top-left corner of the kernel.
    #[inline]
    pub fn tap(&self, t: usize) -> (isize, isize) {
        let r = (self.k / 2) as isize;
        ((t / self.k) as isize - r, (t % self.k) as isize - r)
    }

    #[inline]
    fn sample_pos(&self, offsets: &[f64], t: usize, p: usize) -> (f64, f64) {
        let hw = self.h * self.w;
        let (ty, tx) = self.tap(t);
        let py = (p / self.w) as isize + ty;
        let px = (p % self.w) as isize + tx;
        (py as f64 + offsets[2 * t * hw + p], px as f64 + offsets[(2 * t + 1) * hw + p])
    }
}

/// Modulated deformable im2col: `cols[(c*K + t), p] = m[t,p] * x_c(p + p_t + Δp_t)`.
pub fn deform_im2col(x: &[f64], offsets: &[f64], mask: &[f64], g: &DeformGeom, cols: &mut [f64]) {
    let hw = g.h * g.w;
    let kk = g.taps();
    let mut taps = Vec::with_capacity(kk * hw);
    for t in 0..kk {
        for p in 0..hw {
            let (y, xx) = g.sample_pos(offsets, t, p);
            taps.push(BilinearTaps::new(g.h, g.w, y, xx));
        }
    }
    for c in 0..g.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for t in 0..kk {
            let row = (c * kk + t) * hw;
            for p in 0..hw {
                cols[row + p] = mask[t * hw + p] * taps[t * hw + p].apply(plane);
            }
        }
    }
}

pub fn deform_forward(
    x: &[f64],
    offsets: &[f64],
    mask: &[f64],
    g: &DeformGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    o: usize,
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let hw = g.h * g.w;
    let rows = g.c * g.taps();
    scratch.resize(rows * hw, 0.0);
    deform_im2col(x, offsets, mask, g, scratch);
    gemm(o, rows, hw, weight, rows as isize, 1, scratch, hw as isize, 1, 0.0, out);
    if let Some(b) = bias {
        for (oc, plane) in out.chunks_mut(hw).enumerate() {
            for v in plane {
                *v += b[oc];
            }
        }
    }
}

/// Gradients of a deformable convolution for one sample. Every output slice
/// is accumulated into.
pub struct DeformGrads<'a> {
    pub dw: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
    pub dx: Option<&'a mut [f64]>,
    pub doffsets: Option<&'a mut [f64]>,
    pub dmask: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub fn deform_backward(
    x: &[f64],
    offsets: &[f64],
    mask: &[f64],
    g: &DeformGeom,
    weight: &[f64],
    o: usize,
    dy: &[f64],
    grads: DeformGrads<'_>,
    scratch: &mut Vec<f64>,
) {
    let hw = g.h * g.w;
    let kk = g.taps();
    let rows = g.c * kk;
    let DeformGrads { dw, db, dx, doffsets, dmask } = grads;
    if let Some(db) = db {
        for (oc, plane) in dy.chunks(hw).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        scratch.resize(rows * hw, 0.0);
        deform_im2col(x, offsets, mask, g, scratch);
        gemm(o, hw, rows, dy, hw as isize, 1, scratch, 1, hw as isize, 1.0, dw);
    }
    if dx.is_none() && doffsets.is_none() && dmask.is_none() {
        return;
    }
    // dcols(rows x hw) = w^T * dy
    scratch.resize(rows * hw, 0.0);
    gemm(rows, o, hw, weight, 1, rows as isize, dy, hw as isize, 1, 0.0, scratch);
    let dcols = &scratch[..];

    let mut dx = dx;
    let mut doffsets = doffsets;
    let mut dmask = dmask;
    for t in 0..kk {
        for p in 0..hw {
            let (y, xx) = g.sample_pos(offsets, t, p);
            let taps = BilinearTaps::new(g.h, g.w, y, xx);
            let wts = taps.weights();
            let m = mask[t * hw + p];
            let (mut gm, mut goy, mut gox) = (0.0, 0.0, 0.0);
            for c in 0..g.c {
                let gcol = dcols[(c * kk + t) * hw + p];
                if gcol == 0.0 {
                    continue;
                }
                let plane = &x[c * hw..(c + 1) * hw];
                let v = taps.corner_values(plane);
                let val = wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
                gm += gcol * val;
                let (ly, lx) = (taps.ly, taps.lx);
                goy += gcol * m * ((1.0 - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]));
                gox += gcol * m * ((1.0 - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]));
                if let Some(dx) = dx.as_deref_mut() {
                    let dplane = &mut dx[c * hw..(c + 1) * hw];
                    for i in 0..4 {
                        if taps.valid[i] {
                            dplane[taps.idx[i]] += gcol * m * wts[i];
                        }
                    }
                }
            }
            if let Some(dm) = dmask.as_deref_mut() {
                dm[t * hw + p] += gm;
            }
            if let Some(doff) = doffsets.as_deref_mut() {
                doff[2 * t * hw + p] += goy;
                doff[(2 * t + 1) * hw + p] += gox;
            }
        }
    }
}

/// Source indices and weights for 2x bilinear upsampling along one axis
/// (half-pixel centres, edge-clamped).
fn upsample_axis(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling of a stack of `(h, w)` planes.
pub fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let ay = upsample_axis(h);
    let ax = upsample_axis(w);
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..planes {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    }
}

pub fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let ay = upsample_axis(h);
    let ax = upsample_axis(w);
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..planes {
        let g = &dy[c * oh * ow..(c + 1) * oh * ow];
        let d = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                d[y0 * w + x1] += (1.0 - ly) * lx * v;
                d[y1 * w + x0] += ly * (1.0 - lx) * v;
                d[y1 * w + x1] += ly * lx * v;
            }
        }
    }
}

/// Forward difference along x: `g[y][x] = v[y][x+1] - v[y][x]`, zero in the
/// last column.
pub fn diff_x(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    for c in 0..planes {
        for y in 0..h {
            let row = (c * h + y) * w;
            for i in 0..w {
                out[row + i] = if i + 1 < w { x[row + i + 1] - x[row + i] } else { 0.0 };
            }
        }
    }
}

/// Forward difference along y: `g[y][x] = v[y+1][x] - v[y][x]`, zero in the
/// last row.
pub fn diff_y(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    for c in 0..planes {
        for y in 0..h {
            let row = (c * h + y) * w;
            for i in 0..w {
                out[row + i] = if y + 1 < h { x[row + w + i] - x[row + i] } else { 0.0 };
            }
        }
    }
}

pub fn diff_x_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    for c in 0..planes {
        for y in 0..h {
            let row = (c * h + y) * w;
            for i in 0..w.saturating_sub(1) {
                let g = dy[row + i];
                dx[row + i + 1] += g;
                dx[row + i] -= g;
            }
        }
    }
}

pub fn diff_y_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    for c in 0..planes {
        for y in 0..h.saturating_sub(1) {
            let row = (c * h + y) * w;
            for i in 0..w {
                let g = dy[row + i];
                dx[row + w + i] += g;
                dx[row + i] -= g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], o: usize) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += w[((oc * g.c + c) * g.k + ki) * g.k + kj]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
            let g = ConvGeom { c: 3, h: 6, w: 7, k, stride, pad };
            let x = pseudo(3 * 6 * 7, 1);
            let w = pseudo(4 * 3 * k * k, 2);
            let (ho, wo) = g.out_hw();
            let mut out = vec![0.0; 4 * ho * wo];
            conv_forward(&x, &g, &w, None, 4, &mut out, &mut Vec::new());
            let reference = naive_conv(&x, &g, &w, 4);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = vec![2.5; 2 * 3 * 4];
        let mut out = vec![0.0; 2 * 6 * 8];
        upsample2x_forward(&x, 2, 3, 4, &mut out);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn bilinear_grad_matches_difference_quotient() {
        let plane = pseudo(20, 3);
        let (v, dy, dx) = bilinear_with_grad(&plane, 4, 5, 1.3, 2.6);
        let h = 1e-6;
        let fy = (bilinear(&plane, 4, 5, 1.3 + h, 2.6) - bilinear(&plane, 4, 5, 1.3 - h, 2.6)) / (2.0 * h);
        let fx = (bilinear(&plane, 4, 5, 1.3, 2.6 + h) - bilinear(&plane, 4, 5, 1.3, 2.6 - h)) / (2.0 * h);
        assert_eq!(v, bilinear(&plane, 4, 5, 1.3, 2.6));
        assert!((dy - fy).abs() < 1e-8);
        assert!((dx - fx).abs() < 1e-8);
    }
}
