use super::Scalar;

/// Output extent of a zero-padded convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let plane = conv_output_extent(height, kernel, stride, pad).expect("valid conv geometry")
        * conv_output_extent(width, kernel, stride, pad).expect("valid conv geometry");
    debug_assert_eq!(cols.len(), channels * kernel * kernel * plane);
    im2col_ld(image, channels, height, width, kernel, stride, pad, cols, plane);
}

/// [`im2col`] into a matrix whose rows start `ld` elements apart, so several
/// images can share one column matrix side by side.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_ld<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
    ld: usize,
) {
    let out_h = conv_output_extent(height, kernel, stride, pad).expect("valid conv geometry");
    let out_w = conv_output_extent(width, kernel, stride, pad).expect("valid conv geometry");
    let plane = out_h * out_w;
    for c in 0..channels {
        let src = &image[c * height * width..(c + 1) * height * width];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * ld..row * ld + plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * width..(iy as usize + 1) * width];
                    if stride == 1 {
                        // ix = ox + kx - pad; valid for ox in [lo, hi)
                        let lo = pad.saturating_sub(kx).min(out_w);
                        let hi = (width + pad).saturating_sub(kx).min(out_w).max(lo);
                        line[..lo].iter_mut().for_each(|v| *v = T::zero());
                        line[hi..].iter_mut().for_each(|v| *v = T::zero());
                        let start = lo + kx - pad;
                        line[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *v = if ix < 0 || ix >= width as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image,
/// accumulating overlapping contributions.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    image: &mut [T],
) {
    let plane = conv_output_extent(height, kernel, stride, pad).expect("valid conv geometry")
        * conv_output_extent(width, kernel, stride, pad).expect("valid conv geometry");
    col2im_add_ld(cols, channels, height, width, kernel, stride, pad, image, plane);
}

/// [`col2im_add`] reading rows `ld` elements apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add_ld<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    image: &mut [T],
    ld: usize,
) {
    let out_h = conv_output_extent(height, kernel, stride, pad).expect("valid conv geometry");
    let out_w = conv_output_extent(width, kernel, stride, pad).expect("valid conv geometry");
    let plane = out_h * out_w;
    for c in 0..channels {
        let dst = &mut image[c * height * width..(c + 1) * height * width];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * ld..row * ld + plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let line = &src[oy * out_w..(oy + 1) * out_w];
                    let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx).min(out_w);
                        let hi = (width + pad).saturating_sub(kx).min(out_w).max(lo);
                        let start = lo + kx - pad;
                        for (d, &s) in dst_row[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for (ox, &s) in line.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < width {
                                dst_row[ix as usize] = dst_row[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formula() {
        assert_eq!(conv_output_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_output_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv_output_extent(2, 3, 1, 0), None);
        assert_eq!(conv_output_extent(4, 3, 0, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for all x, y
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 2)] {
            let (c, h, w, k) = (2, 5, 4, 3);
            let oh = conv_output_extent(h, k, stride, pad).unwrap();
            let ow = conv_output_extent(w, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let y: Vec<f64> = (0..c * k * k * oh * ow).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, c, h, w, k, stride, pad, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im_add(&y, c, h, w, k, stride, pad, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "stride {stride} pad {pad}");
        }
    }
}
