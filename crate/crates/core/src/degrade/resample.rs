use super::{DegradeError, Result};
use crate::image::Image;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and normalised weights for one output sample.
struct Taps {
    first: isize,
    weights: Vec<f64>,
}

/// Per-output contributions for `n_out` samples at ratio `scale`.
/// Downscaling widens the kernel by `1 / scale` (antialiasing).
fn contributions(n_out: usize, scale: f64) -> Vec<Taps> {
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let first = (u - width / 2.0).floor() as isize;
            let taps = width.ceil() as usize + 2;
            let mut weights: Vec<f64> =
                (0..taps).map(|j| kscale * cubic(kscale * (u - (first + j as isize) as f64))).collect();
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            Taps { first, weights }
        })
        .collect()
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Applies per-axis taps: rows first (along x), then columns (along y).
fn separable(image: &Image, out_h: usize, out_w: usize, along_x: &[Taps], along_y: &[Taps]) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut data = Vec::with_capacity(image.channels() * out_h * out_w);
    let mut tmp = vec![0.0f64; h * out_w];
    for c in 0..image.channels() {
        let src = image.plane(c);
        for y in 0..h {
            for (x, t) in along_x.iter().enumerate() {
                tmp[y * out_w + x] = t
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(j, wt)| wt * src[y * w + clamp_index(t.first + j as isize, w)] as f64)
                    .sum();
            }
        }
        for t in along_y {
            for x in 0..out_w {
                let v: f64 = t
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(j, wt)| wt * tmp[clamp_index(t.first + j as isize, h) * out_w + x])
                    .sum();
                data.push(v as f32);
            }
        }
    }
    Image::new(image.channels(), out_h, out_w, data).expect("consistent geometry")
}

/// Output extent `ceil(n * num / den)`.
pub fn resized_extent(n: usize, num: usize, den: usize) -> usize {
    (n * num).div_ceil(den)
}

/// Bicubic resize by the ratio `num / den` with edge replication.
pub fn bicubic_resize(image: &Image, num: usize, den: usize) -> Result<Image> {
    if num == 0 || den == 0 {
        return Err(DegradeError::InvalidScale(format!("{num}/{den}")));
    }
    let out_h = resized_extent(image.height(), num, den);
    let out_w = resized_extent(image.width(), num, den);
    if out_h == 0 || out_w == 0 {
        return Err(DegradeError::InvalidScale(format!("{num}/{den} gives an empty image")));
    }
    let scale = num as f64 / den as f64;
    let along_x = contributions(out_w, scale);
    let along_y = contributions(out_h, scale);
    Ok(separable(image, out_h, out_w, &along_x, &along_y))
}

/// Normalised 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(size: usize, std: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(DegradeError::EvenKernel(size));
    }
    if std.is_nan() || std <= 0.0 {
        return Err(DegradeError::InvalidBlur(std));
    }
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * std * std)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Separable truncated Gaussian blur with edge replication.
pub fn gaussian_blur(image: &Image, size: usize, std: f64) -> Result<Image> {
    let k = gaussian_kernel(size, std)?;
    let r = (size / 2) as isize;
    let taps = |n: usize| (0..n).map(|i| Taps { first: i as isize - r, weights: k.clone() }).collect::<Vec<_>>();
    Ok(separable(image, image.height(), image.width(), &taps(image.width()), &taps(image.height())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn extents() {
        assert_eq!(resized_extent(64, 1, 4), 16);
        assert_eq!(resized_extent(10, 1, 3), 4);
        assert_eq!(resized_extent(5, 2, 1), 10);
    }

    #[test]
    fn blur_rejects_bad_kernels() {
        let img = Image::filled(1, 4, 4, 1.0);
        assert!(matches!(gaussian_blur(&img, 4, 1.0), Err(DegradeError::EvenKernel(4))));
        assert!(gaussian_blur(&img, 3, 0.0).is_err());
        let k = gaussian_kernel(17, 2.6).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
