//! Grayscale frame buffers and the image geometry used across the pipeline:
//! luminance conversion, area-average downsampling and center rotation.

use serde::{Deserialize, Serialize};

/// Native sensor frame height in pixels.
pub const NATIVE_H: usize = 308;
/// Native sensor frame width in pixels.
pub const NATIVE_W: usize = 410;
/// Downsampled model-input frame height.
pub const SMALL_H: usize = 60;
/// Downsampled model-input frame width.
pub const SMALL_W: usize = 80;

/// Row-major 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame8 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Frame8 {
    pub fn new(h: usize, w: usize) -> Self {
        Frame8 { h, w, data: vec![0; h * w] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "frame data length mismatch");
        Frame8 { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Lift to f32 without rescaling.
    pub fn to_f32(&self) -> FrameF32 {
        FrameF32 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Row-major f32 frame used by the DSP-side image code.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameF32 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FrameF32 {
    pub fn new(h: usize, w: usize) -> Self {
        FrameF32 { h, w, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }
}

/// Frame variant stored in a trial: full native resolution or the 60x80
/// downsampled form that feeds the image encoder directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageVariant {
    Native,
    Small,
}

/// Rec. 601 luminance for RGB8 input rows.
pub fn rgb_to_luma(rgb: &[u8], h: usize, w: usize) -> Frame8 {
    assert_eq!(rgb.len(), h * w * 3);
    let mut out = Frame8::new(h, w);
    for i in 0..h * w {
        let r = rgb[3 * i] as f32;
        let g = rgb[3 * i + 1] as f32;
        let b = rgb[3 * i + 2] as f32;
        out.data[i] = (0.299 * r + 0.587 * g + 0.114 * b).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Area-average resize. Each destination pixel averages the exact source
/// rectangle it covers, with fractional edge weights, so constant images stay
/// constant and the reduction is alias-free for the ~5x downsample we use.
pub fn resize_area(src: &Frame8, dst_h: usize, dst_w: usize) -> Frame8 {
    let mut out = Frame8::new(dst_h, dst_w);
    let sy = src.h as f64 / dst_h as f64;
    let sx = src.w as f64 / dst_w as f64;
    for dy in 0..dst_h {
        let y0 = dy as f64 * sy;
        let y1 = (dy + 1) as f64 * sy;
        for dx in 0..dst_w {
            let x0 = dx as f64 * sx;
            let x1 = (dx + 1) as f64 * sx;
            let mut acc = 0.0f64;
            let mut area = 0.0f64;
            let yi0 = y0.floor() as usize;
            let yi1 = (y1.ceil() as usize).min(src.h);
            let xi0 = x0.floor() as usize;
            let xi1 = (x1.ceil() as usize).min(src.w);
            for y in yi0..yi1 {
                let wy = overlap(y as f64, (y + 1) as f64, y0, y1);
                if wy <= 0.0 {
                    continue;
                }
                for x in xi0..xi1 {
                    let wx = overlap(x as f64, (x + 1) as f64, x0, x1);
                    if wx <= 0.0 {
                        continue;
                    }
                    acc += wy * wx * src.at(y, x) as f64;
                    area += wy * wx;
                }
            }
            out.set(dy, dx, (acc / area).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[inline]
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Downsample a native 308x410 frame to the 60x80 model-input resolution.
pub fn downsample_to_small(src: &Frame8) -> Frame8 {
    resize_area(src, SMALL_H, SMALL_W)
}

/// Rotate an f32 frame by `theta_deg` around the image center with bilinear
/// sampling; out-of-bounds source pixels read as 0. `theta_deg == 0.0` is a
/// bit-exact identity fast path.
pub fn rotate_about_center(src: &[f32], h: usize, w: usize, theta_deg: f32) -> Vec<f32> {
    assert_eq!(src.len(), h * w);
    if theta_deg == 0.0 {
        return src.to_vec();
    }
    let theta = (theta_deg as f64).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // Inverse map: sample the source at the un-rotated position.
            let sx = cos_t * dx + sin_t * dy + cx;
            let sy = -sin_t * dx + cos_t * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0f64;
            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                let yy = y0 as i64 + oy;
                if yy < 0 || yy >= h as i64 || wy == 0.0 {
                    continue;
                }
                for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let xx = x0 as i64 + ox;
                    if xx < 0 || xx >= w as i64 || wx == 0.0 {
                        continue;
                    }
                    acc += wy * wx * src[yy as usize * w + xx as usize] as f64;
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let mut src = Frame8::new(NATIVE_H, NATIVE_W);
        src.data.fill(173);
        let out = downsample_to_small(&src);
        assert_eq!(out.h, SMALL_H);
        assert_eq!(out.w, SMALL_W);
        assert!(out.data.iter().all(|&v| v == 173));
    }

    #[test]
    fn resize_preserves_mean_closely() {
        let mut src = Frame8::new(308, 410);
        for y in 0..308 {
            for x in 0..410 {
                src.set(y, x, ((x * 7 + y * 13) % 256) as u8);
            }
        }
        let out = downsample_to_small(&src);
        let m_in: f64 = src.data.iter().map(|&v| v as f64).sum::<f64>() / src.data.len() as f64;
        let m_out: f64 = out.data.iter().map(|&v| v as f64).sum::<f64>() / out.data.len() as f64;
        assert!((m_in - m_out).abs() < 1.0, "mean drifted: {m_in} vs {m_out}");
    }

    #[test]
    fn rotate_zero_is_identity() {
        let src: Vec<f32> = (0..60 * 80).map(|i| (i % 251) as f32).collect();
        let out = rotate_about_center(&src, 60, 80, 0.0);
        assert_eq!(src, out);
    }

    // Exact 90-degree oracle: for H=60, W=80 the rotated sample positions land
    // on integer lattice points, so bilinear equals the closed-form transpose
    // mapping wherever the source position is in range.
    #[test]
    fn rotate_90_matches_transpose_flip_oracle() {
        let (h, w) = (60usize, 80usize);
        let src: Vec<f32> = (0..h * w).map(|i| ((i * 37) % 97) as f32).collect();
        let out = rotate_about_center(&src, h, w, 90.0);
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // theta = +90 deg: sx = sin*dy + cx = dy + cx, sy = -dx + cy
                let sx = dy + cx;
                let sy = -dx + cy;
                let sxr = sx.round();
                let syr = sy.round();
                assert!((sx - sxr).abs() < 1e-9 && (sy - syr).abs() < 1e-9);
                let expect = if sxr >= 0.0 && sxr < w as f64 && syr >= 0.0 && syr < h as f64 {
                    src[syr as usize * w + sxr as usize]
                } else {
                    0.0
                };
                let got = out[y * w + x];
                assert!(
                    (got - expect).abs() < 1e-6,
                    "mismatch at ({y},{x}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn rgb_luma_weights() {
        let rgb = vec![255, 0, 0, 0, 255, 0, 0, 0, 255];
        let out = rgb_to_luma(&rgb, 1, 3);
        assert_eq!(out.data, vec![76, 150, 29]);
    }
}
