//! Dense optical flow between consecutive native frames via quadratic
//! polynomial expansion (Farneback's method), top-percentile magnitude
//! filtering, and 3x3 patch pooling down to the 2x102x137 flow feature.
//!
//! Each image is approximated locally by f(p + u) = c + b'u + u'Au under a
//! Gaussian applicability window. For two frames related by a displacement d,
//! the expansions satisfy A d = delta_b with A the averaged quadratic part
//! and delta_b derived from the linear parts, which is solved per pixel after
//! averaging the normal equations over a window. The estimate is refined
//! iteratively over an image pyramid so displacements larger than the
//! applicability radius remain recoverable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame8, NATIVE_H, NATIVE_W};

/// Pooled flow-feature height: (308 - 2) / 3.
pub const FLOW_H: usize = 102;
/// Pooled flow-feature width: (410 + 1) / 3.
pub const FLOW_W: usize = 137;
/// Channels (u, v).
pub const FLOW_C: usize = 2;

/// Fraction of pixels kept by magnitude filtering: the top 0.1% ("top 0.1
/// percentile" read as a fraction of pixels; configurable because the reading
/// "top 10%" is also defensible).
pub const DEFAULT_KEEP_FRACTION: f64 = 0.001;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("shape mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    ShapeMismatch { a_h: usize, a_w: usize, b_h: usize, b_w: usize },
    #[error("expected native {expect_h}x{expect_w} field, got {h}x{w}")]
    NotNative { h: usize, w: usize, expect_h: usize, expect_w: usize },
}

/// Hyperparameters of the displacement estimator. The defaults are the
/// documented normative values for this pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FarnebackParams {
    pub pyr_scale: f64,
    pub levels: usize,
    pub winsize: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            pyr_scale: 0.5,
            levels: 3,
            winsize: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

/// Per-pixel displacement field; `u` is the x (column) component and `v` the
/// y (row) component, in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlow {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl DenseFlow {
    pub fn zeros(h: usize, w: usize) -> Self {
        DenseFlow { h, w, u: vec![0.0; h * w], v: vec![0.0; h * w] }
    }

    pub fn magnitude(&self, i: usize) -> f32 {
        (self.u[i] * self.u[i] + self.v[i] * self.v[i]).sqrt()
    }

    /// Mean (u, v) over the interior, excluding a `margin`-pixel border.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let mut su = 0.0f64;
        let mut sv = 0.0f64;
        let mut n = 0usize;
        for y in margin..self.h.saturating_sub(margin) {
            for x in margin..self.w.saturating_sub(margin) {
                su += self.u[y * self.w + x] as f64;
                sv += self.v[y * self.w + x] as f64;
                n += 1;
            }
        }
        (su / n.max(1) as f64, sv / n.max(1) as f64)
    }
}

/// Pooled 2x102x137 flow feature, channel-major (all of u, then all of v).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowFeature {
    pub data: Vec<f32>,
}

impl FlowFeature {
    pub fn zeros() -> Self {
        FlowFeature { data: vec![0.0; FLOW_C * FLOW_H * FLOW_W] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * FLOW_H * FLOW_W + y * FLOW_W + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense optical flow from `prev` to `next`. Frames must share a shape; RGB
/// inputs are converted to luminance before this point (frames are stored
/// grayscale).
pub fn farneback_flow(
    prev: &Frame8,
    next: &Frame8,
    params: &FarnebackParams,
) -> Result<DenseFlow, FlowError> {
    if prev.h != next.h || prev.w != next.w {
        return Err(FlowError::ShapeMismatch {
            a_h: prev.h,
            a_w: prev.w,
            b_h: next.h,
            b_w: next.w,
        });
    }
    let img0: Vec<f32> = prev.data.iter().map(|&p| p as f32).collect();
    let img1: Vec<f32> = next.data.iter().map(|&p| p as f32).collect();
    Ok(farneback_flow_f32(&img0, &img1, prev.h, prev.w, params))
}

fn farneback_flow_f32(
    img0: &[f32],
    img1: &[f32],
    h: usize,
    w: usize,
    params: &FarnebackParams,
) -> DenseFlow {
    let mut flow = DenseFlow::zeros(0, 0);
    for k in (0..params.levels).rev() {
        let scale = params.pyr_scale.powi(k as i32);
        let lh = ((h as f64) * scale).round().max(1.0) as usize;
        let lw = ((w as f64) * scale).round().max(1.0) as usize;

        // Each level is built from the original image: blur matched to the
        // decimation factor, then bilinear resize.
        let sigma = (1.0 / scale - 1.0) * 0.5;
        let level0 = smooth_and_resize(img0, h, w, lh, lw, sigma);
        let level1 = smooth_and_resize(img1, h, w, lh, lw, sigma);

        let r0 = poly_expansion(&level0, lh, lw, params.poly_n, params.poly_sigma);
        let r1 = poly_expansion(&level1, lh, lw, params.poly_n, params.poly_sigma);

        flow = if flow.h == 0 {
            DenseFlow::zeros(lh, lw)
        } else {
            upsample_flow(&flow, lh, lw, 1.0 / params.pyr_scale)
        };

        for _ in 0..params.iterations {
            let m = displacement_equations(&r0, &r1, lh, lw, &flow);
            let m = box_blur_planes(&m, lh, lw, 5, params.winsize);
            solve_flow(&m, lh, lw, &mut flow);
        }
    }
    flow
}

/// Zero every pixel whose magnitude falls below the (1 - keep_fraction)
/// magnitude quantile. Ties at the threshold all survive, so at least
/// `ceil(keep_fraction * h * w)` pixels remain.
pub fn percentile_filter(flow: &DenseFlow, keep_fraction: f64) -> DenseFlow {
    assert!(keep_fraction > 0.0 && keep_fraction <= 1.0, "keep fraction in (0, 1]");
    let threshold = magnitude_threshold(flow, keep_fraction);
    apply_magnitude_threshold(flow, threshold)
}

/// The magnitude of the k-th strongest pixel, k = ceil(keep_fraction * n).
pub fn magnitude_threshold(flow: &DenseFlow, keep_fraction: f64) -> f32 {
    let n = flow.u.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut mags: Vec<f32> = (0..n).map(|i| flow.magnitude(i)).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    mags[k - 1]
}

/// Keep pixels with magnitude >= threshold, zero the rest.
pub fn apply_magnitude_threshold(flow: &DenseFlow, threshold: f32) -> DenseFlow {
    let mut out = flow.clone();
    for i in 0..out.u.len() {
        if flow.magnitude(i) < threshold {
            out.u[i] = 0.0;
            out.v[i] = 0.0;
        }
    }
    out
}

/// Average disjoint 3x3 patches of a native-resolution dense flow down to the
/// 2x102x137 feature. 308 rows lose one row at the top and bottom (-> 306);
/// 410 columns gain one edge-replicated column on the right (-> 411).
pub fn patch_pool(flow: &DenseFlow) -> Result<FlowFeature, FlowError> {
    if flow.h != NATIVE_H || flow.w != NATIVE_W {
        return Err(FlowError::NotNative {
            h: flow.h,
            w: flow.w,
            expect_h: NATIVE_H,
            expect_w: NATIVE_W,
        });
    }
    let mut out = FlowFeature::zeros();
    for (c, plane) in [&flow.u, &flow.v].into_iter().enumerate() {
        for py in 0..FLOW_H {
            for px in 0..FLOW_W {
                let mut acc = 0.0f64;
                for dy in 0..3 {
                    let y = 1 + py * 3 + dy; // skip the first source row
                    for dx in 0..3 {
                        let x = (px * 3 + dx).min(NATIVE_W - 1); // replicate last column
                        acc += plane[y * NATIVE_W + x] as f64;
                    }
                }
                out.data[c * FLOW_H * FLOW_W + py * FLOW_W + px] = (acc / 9.0) as f32;
            }
        }
    }
    Ok(out)
}

// --- displacement estimation internals ---

const POLY_PLANES: usize = 5; // bx, by, axx, ayy, axy

/// Quadratic expansion coefficients per pixel, interleaved
/// [bx, by, axx, ayy, axy]; axy already includes the 1/2 factor of the
/// symmetric quadratic form.
fn poly_expansion(img: &[f32], h: usize, w: usize, n: usize, sigma: f64) -> Vec<f32> {
    // Separable 1-D applicability kernels over [-n, n].
    let mut g = vec![0.0f64; 2 * n + 1];
    let mut s = 0.0;
    for i in 0..=2 * n {
        let x = i as f64 - n as f64;
        g[i] = (-x * x / (2.0 * sigma * sigma)).exp();
        s += g[i];
    }
    for v in g.iter_mut() {
        *v /= s;
    }
    let xg: Vec<f64> = g.iter().enumerate().map(|(i, &v)| (i as f64 - n as f64) * v).collect();
    let xxg: Vec<f64> =
        g.iter().enumerate().map(|(i, &v)| (i as f64 - n as f64).powi(2) * v).collect();

    // Normal-equation matrix for the basis {1, x, y, x^2, y^2, xy} under the
    // separable applicability; constant across pixels.
    let mut gm = [[0.0f64; 6]; 6];
    for iy in 0..=2 * n {
        let y = iy as f64 - n as f64;
        for ix in 0..=2 * n {
            let x = ix as f64 - n as f64;
            let wgt = g[iy] * g[ix];
            let basis = [1.0, x, y, x * x, y * y, x * y];
            for a in 0..6 {
                for b in 0..6 {
                    gm[a][b] += wgt * basis[a] * basis[b];
                }
            }
        }
    }
    let ginv = invert6(&gm);

    // Vertical pass: correlate columns with g, y*g, y^2*g.
    let mut vert = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut c0 = 0.0f64;
            let mut c1 = 0.0f64;
            let mut c2 = 0.0f64;
            for k in 0..=2 * n {
                let yy = (y as isize + k as isize - n as isize).clamp(0, h as isize - 1) as usize;
                let p = img[yy * w + x] as f64;
                c0 += g[k] * p;
                c1 += xg[k] * p;
                c2 += xxg[k] * p;
            }
            let o = (y * w + x) * 3;
            vert[o] = c0 as f32;
            vert[o + 1] = c1 as f32;
            vert[o + 2] = c2 as f32;
        }
    }

    // Horizontal pass combines into the six projections, then applies G^-1.
    let mut out = vec![0.0f32; h * w * POLY_PLANES];
    for y in 0..h {
        for x in 0..w {
            let mut b = [0.0f64; 6];
            for k in 0..=2 * n {
                let xx = (x as isize + k as isize - n as isize).clamp(0, w as isize - 1) as usize;
                let o = (y * w + xx) * 3;
                let (r0, r1, r2) = (vert[o] as f64, vert[o + 1] as f64, vert[o + 2] as f64);
                b[0] += g[k] * r0; // 1
                b[1] += xg[k] * r0; // x
                b[2] += g[k] * r1; // y
                b[3] += xxg[k] * r0; // x^2
                b[4] += g[k] * r2; // y^2
                b[5] += xg[k] * r1; // xy
            }
            let mut r = [0.0f64; 6];
            for (a, slot) in r.iter_mut().enumerate() {
                for (bb, &bv) in b.iter().enumerate() {
                    *slot += ginv[a][bb] * bv;
                }
            }
            let o = (y * w + x) * POLY_PLANES;
            out[o] = r[1] as f32; // bx
            out[o + 1] = r[2] as f32; // by
            out[o + 2] = r[3] as f32; // axx
            out[o + 3] = r[4] as f32; // ayy
            out[o + 4] = (r[5] / 2.0) as f32; // axy (off-diagonal of A)
        }
    }
    out
}

/// Per-pixel normal equations [gxx, gxy, gyy, hx, hy] for A d = delta_b,
/// folding in the current flow estimate as prior displacement.
fn displacement_equations(
    r0: &[f32],
    r1: &[f32],
    h: usize,
    w: usize,
    flow: &DenseFlow,
) -> Vec<f32> {
    let mut m = vec![0.0f32; h * w * 5];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = flow.u[i];
            let dy = flow.v[i];
            let o0 = i * POLY_PLANES;

            let warped = sample_poly(r1, h, w, x as f32 + dx, y as f32 + dy);
            let (a, c, bmat, dbx, dby);
            match warped {
                Some(r1v) => {
                    a = 0.5 * (r0[o0 + 2] + r1v[2]); // axx
                    bmat = 0.5 * (r0[o0 + 3] + r1v[3]); // ayy
                    c = 0.5 * (r0[o0 + 4] + r1v[4]); // axy
                    dbx = 0.5 * (r0[o0] - r1v[0]);
                    dby = 0.5 * (r0[o0 + 1] - r1v[1]);
                }
                None => {
                    // Out of range: no evidence, keep the prior displacement.
                    a = r0[o0 + 2];
                    bmat = r0[o0 + 3];
                    c = r0[o0 + 4];
                    dbx = 0.0;
                    dby = 0.0;
                }
            }
            // Total displacement: fold A * d_prior into the right-hand side.
            let hx = dbx + a * dx + c * dy;
            let hy = dby + c * dx + bmat * dy;

            // Down-weight a thin border band so replicate-padding artifacts
            // do not dominate after window averaging.
            let margin = 5usize;
            let dist = x.min(w - 1 - x).min(y).min(h - 1 - y);
            let scale = if dist < margin {
                let t = (dist + 1) as f32 / (margin + 1) as f32;
                t * t
            } else {
                1.0
            };
            let (a, bmat, c, hx, hy) =
                (a * scale, bmat * scale, c * scale, hx * scale, hy * scale);

            let o = i * 5;
            m[o] = a * a + c * c; // gxx
            m[o + 1] = c * (a + bmat); // gxy
            m[o + 2] = bmat * bmat + c * c; // gyy
            m[o + 3] = a * hx + c * hy; // A' h, x component
            m[o + 4] = c * hx + bmat * hy; // y component
        }
    }
    m
}

fn sample_poly(r: &[f32], h: usize, w: usize, fx: f32, fy: f32) -> Option<[f32; POLY_PLANES]> {
    let x0 = fx.floor();
    let y0 = fy.floor();
    if x0 < 0.0 || y0 < 0.0 || x0 as usize + 1 >= w || y0 as usize + 1 >= h {
        return None;
    }
    let (xi, yi) = (x0 as usize, y0 as usize);
    let tx = fx - x0;
    let ty = fy - y0;
    let w00 = (1.0 - tx) * (1.0 - ty);
    let w01 = tx * (1.0 - ty);
    let w10 = (1.0 - tx) * ty;
    let w11 = tx * ty;
    let mut out = [0.0f32; POLY_PLANES];
    let o00 = (yi * w + xi) * POLY_PLANES;
    let o01 = o00 + POLY_PLANES;
    let o10 = ((yi + 1) * w + xi) * POLY_PLANES;
    let o11 = o10 + POLY_PLANES;
    for k in 0..POLY_PLANES {
        out[k] = w00 * r[o00 + k] + w01 * r[o01 + k] + w10 * r[o10 + k] + w11 * r[o11 + k];
    }
    Some(out)
}

/// Mean filter over a square window with replicated borders, applied to each
/// of `planes` interleaved channels.
fn box_blur_planes(m: &[f32], h: usize, w: usize, planes: usize, winsize: usize) -> Vec<f32> {
    let r = winsize / 2;
    let norm = 1.0f64 / (winsize * winsize) as f64;
    // Horizontal then vertical running sums.
    let mut tmp = vec![0.0f32; m.len()];
    for y in 0..h {
        for p in 0..planes {
            let mut acc = 0.0f64;
            for k in -(r as isize)..=(r as isize) {
                let x = k.clamp(0, w as isize - 1) as usize;
                acc += m[(y * w + x) * planes + p] as f64;
            }
            tmp[(y * w) * planes + p] = acc as f32;
            for x in 1..w {
                let x_add = (x + r).min(w - 1);
                let x_sub = (x as isize - 1 - r as isize).clamp(0, w as isize - 1) as usize;
                acc += m[(y * w + x_add) * planes + p] as f64
                    - m[(y * w + x_sub) * planes + p] as f64;
                tmp[(y * w + x) * planes + p] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; m.len()];
    for x in 0..w {
        for p in 0..planes {
            let mut acc = 0.0f64;
            for k in -(r as isize)..=(r as isize) {
                let y = k.clamp(0, h as isize - 1) as usize;
                acc += tmp[(y * w + x) * planes + p] as f64;
            }
            out[x * planes + p] = (acc * norm) as f32;
            for y in 1..h {
                let y_add = (y + r).min(h - 1);
                let y_sub = (y as isize - 1 - r as isize).clamp(0, h as isize - 1) as usize;
                acc += tmp[(y_add * w + x) * planes + p] as f64
                    - tmp[(y_sub * w + x) * planes + p] as f64;
                out[(y * w + x) * planes + p] = (acc * norm) as f32;
            }
        }
    }
    out
}

fn solve_flow(m: &[f32], h: usize, w: usize, flow: &mut DenseFlow) {
    for i in 0..h * w {
        let o = i * 5;
        let (gxx, gxy, gyy, hx, hy) =
            (m[o] as f64, m[o + 1] as f64, m[o + 2] as f64, m[o + 3] as f64, m[o + 4] as f64);
        let det = gxx * gyy - gxy * gxy + 1e-3;
        flow.u[i] = ((gyy * hx - gxy * hy) / det) as f32;
        flow.v[i] = ((gxx * hy - gxy * hx) / det) as f32;
    }
}

fn upsample_flow(flow: &DenseFlow, nh: usize, nw: usize, gain: f64) -> DenseFlow {
    let mut out = DenseFlow::zeros(nh, nw);
    resize_bilinear(&flow.u, flow.h, flow.w, &mut out.u, nh, nw);
    resize_bilinear(&flow.v, flow.h, flow.w, &mut out.v, nh, nw);
    for v in out.u.iter_mut().chain(out.v.iter_mut()) {
        *v = (*v as f64 * gain) as f32;
    }
    out
}

fn smooth_and_resize(
    img: &[f32],
    h: usize,
    w: usize,
    nh: usize,
    nw: usize,
    sigma: f64,
) -> Vec<f32> {
    let src = if sigma > 1e-9 { gaussian_blur(img, h, w, sigma) } else { img.to_vec() };
    if nh == h && nw == w {
        return src;
    }
    let mut out = vec![0.0f32; nh * nw];
    resize_bilinear(&src, h, w, &mut out, nh, nw);
    out
}

fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let mut ksize = (sigma * 5.0).round() as usize;
    if ksize % 2 == 0 {
        ksize += 1;
    }
    ksize = ksize.max(3);
    let r = ksize / 2;
    let mut kernel = vec![0.0f64; ksize];
    let mut s = 0.0;
    for (i, kv) in kernel.iter_mut().enumerate() {
        let x = i as f64 - r as f64;
        *kv = (-x * x / (2.0 * sigma * sigma)).exp();
        s += *kv;
    }
    for kv in kernel.iter_mut() {
        *kv /= s;
    }
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r as isize).clamp(0, w as isize - 1) as usize;
                acc += kv * img[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r as isize).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

fn resize_bilinear(src: &[f32], h: usize, w: usize, dst: &mut [f32], nh: usize, nw: usize) {
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let v = (1.0 - ty) * ((1.0 - tx) * src[y0 * w + x0] as f64 + tx * src[y0 * w + x1] as f64)
                + ty * ((1.0 - tx) * src[y1 * w + x0] as f64 + tx * src[y1 * w + x1] as f64);
            dst[y * nw + x] = v as f32;
        }
    }
}

fn invert6(m: &[[f64; 6]; 6]) -> [[f64; 6]; 6] {
    // Gauss-Jordan with partial pivoting; the applicability Gram matrix is
    // well conditioned for any reasonable sigma.
    let mut a = *m;
    let mut inv = [[0.0f64; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let mut piv = col;
        for r in col + 1..6 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-30, "singular applicability matrix");
        for k in 0..6 {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..6 {
                        a[r][k] -= f * a[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}
