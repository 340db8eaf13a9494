//! Blocking artifacts from 8x8 DCT quantization with IJG-scaled luminance
//! tables. There is no entropy coding: quantization is the only lossy step.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::{DegradeError, Result};
use crate::image::Image;

/// Standard JPEG luminance quantization table, row-major.
pub const LUMINANCE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled for quality `q` in 1..=100.
pub fn quantization_table(quality: u32) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(DegradeError::InvalidQuality(quality));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [0u16; 64];
    for (o, &q) in out.iter_mut().zip(&LUMINANCE_TABLE) {
        *o = ((q as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

/// `basis[u][x] = c(u) cos((2x + 1) u pi / 16)`, orthonormal.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// Orthonormal 2-D DCT-II of a level-shifted 8x8 block.
pub fn forward_dct(block: &[f64; 64]) -> [f64; 64] {
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

pub fn inverse_dct(coeffs: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coeffs[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Quantized levels `round(coeff / q)`.
pub fn quantize(coeffs: &[f64; 64], table: &[u16; 64]) -> [i32; 64] {
    let mut out = [0; 64];
    for ((o, &c), &q) in out.iter_mut().zip(coeffs).zip(table) {
        *o = (c / q as f64).round() as i32;
    }
    out
}

pub fn dequantize(levels: &[i32; 64], table: &[u16; 64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    for ((o, &l), &q) in out.iter_mut().zip(levels).zip(table) {
        *o = l as f64 * q as f64;
    }
    out
}

/// Compresses and decompresses every channel plane independently. Planes are
/// edge-padded to a multiple of 8, and the result is rounded to integers and
/// clipped to 0..255.
pub fn jpeg_degrade(image: &Image, quality: u32) -> Result<Image> {
    let table = quantization_table(quality)?;
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..image.channels() {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = src[sy * w + sx] as f64 - 128.0;
                    }
                }
                let levels = quantize(&forward_dct(&block), &table);
                let recon = inverse_dct(&dequantize(&levels, &table));
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        dst[(by + y) * w + bx + x] = (recon[y * 8 + x] + 128.0).round().clamp(0.0, 255.0) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_scaling() {
        assert_eq!(quantization_table(50).unwrap(), LUMINANCE_TABLE);
        assert!(quantization_table(100).unwrap().iter().all(|&q| q == 1));
        // q = 10 -> scale 500: 16 * 500 + 50 = 8050 / 100 = 80
        assert_eq!(quantization_table(10).unwrap()[0], 80);
        assert_eq!(quantization_table(1).unwrap()[0], 255);
        assert!(quantization_table(0).is_err());
        assert!(quantization_table(101).is_err());
    }

    #[test]
    fn dct_round_trips() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 29) % 97) as f64 - 48.0);
        let back = inverse_dct(&forward_dct(&block));
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
        // constant block -> DC only, DC = 8 * value
        let flat = forward_dct(&[3.0; 64]);
        assert!((flat[0] - 24.0).abs() < 1e-12);
        assert!(flat[1..].iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn requantization_is_identity() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 53) % 211) as f64 - 100.0);
        for q in [5, 10, 40, 90] {
            let table = quantization_table(q).unwrap();
            let levels = quantize(&forward_dct(&block), &table);
            let coeffs = dequantize(&levels, &table);
            assert_eq!(quantize(&coeffs, &table), levels);
            assert_eq!(dequantize(&quantize(&coeffs, &table), &table), coeffs);
        }
    }
}
