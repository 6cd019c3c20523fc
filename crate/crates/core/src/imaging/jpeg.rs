//! In-process JPEG-style degradation: 8×8 block DCT, uniform quantization
//! with the standard tables scaled by a factor, and inverse DCT.

use std::f64::consts::PI;
use std::sync::OnceLock;

const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_Q: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., //
    18., 21., 26., 66., 99., 99., 99., 99., //
    24., 26., 56., 99., 99., 99., 99., 99., //
    47., 66., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99.,
];

/// `basis[u][x] = c(u) cos((2x + 1) u π / 16)` with orthonormal scaling.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
            }
        }
        b
    })
}

fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| b[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| b[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Quantizes one plane of 0..255-scaled samples in place. Partial edge
/// blocks are padded by edge replication and cropped afterwards.
fn quantize_plane(plane: &mut [f64], height: usize, width: usize, table: &[f64; 64], scale: f64) {
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(height - 1);
                    let sx = (bx + x).min(width - 1);
                    block[y * 8 + x] = plane[sy * width + sx] - 128.0;
                }
            }
            let mut coef = dct8x8(&block);
            for (c, q) in coef.iter_mut().zip(table) {
                let step = q * scale;
                *c = (*c / step).round() * step;
            }
            let rec = idct8x8(&coef);
            for y in 0..8.min(height - by) {
                for x in 0..8.min(width - bx) {
                    plane[(by + y) * width + bx + x] = rec[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

/// Applies block-DCT quantization to interleaved [0, 1] data. Colour images
/// go through JFIF YCbCr with the luma table on Y and chroma table on CbCr.
pub(super) fn degrade(data: &[f32], height: usize, width: usize, channels: usize, scale: f64) -> Vec<f64> {
    let n = height * width;
    if channels == 1 {
        let mut y: Vec<f64> = data.iter().map(|&v| f64::from(v) * 255.0).collect();
        quantize_plane(&mut y, height, width, &LUMA_Q, scale);
        return y.into_iter().map(|v| v / 255.0).collect();
    }
    let mut yp = vec![0.0; n];
    let mut cb = vec![0.0; n];
    let mut cr = vec![0.0; n];
    for i in 0..n {
        let r = f64::from(data[i * 3]) * 255.0;
        let g = f64::from(data[i * 3 + 1]) * 255.0;
        let b = f64::from(data[i * 3 + 2]) * 255.0;
        yp[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
        cr[i] = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    quantize_plane(&mut yp, height, width, &LUMA_Q, scale);
    quantize_plane(&mut cb, height, width, &CHROMA_Q, scale);
    quantize_plane(&mut cr, height, width, &CHROMA_Q, scale);
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (y, b, r) = (yp[i], cb[i] - 128.0, cr[i] - 128.0);
        out.push((y + 1.402 * r) / 255.0);
        out.push((y - 0.344_136 * b - 0.714_136 * r) / 255.0);
        out.push((y + 1.772 * b) / 255.0);
    }
    out
}
