//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code paths it is used to check, apart from building the graph
//! whose value is being differentiated numerically.
#![allow(dead_code)]

use cfsnet::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Like [`random_tensor`] but keeps every value at least `margin` away from 0.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree (a kink lies within h).
    pub skipped: usize,
}

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding do not blow up the ratio.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares graph gradients of `build` against central finite differences
/// over every coordinate of every leaf, skipping coordinates where the
/// one-sided differences disagree.
pub fn fd_check(leaves: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> GradCheck {
    fd_check_with(leaves, build, true)
}

/// [`fd_check`] without kink detection: every coordinate is compared. For
/// graphs whose inputs are known to stay away from non-smooth points.
pub fn fd_check_all(leaves: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> GradCheck {
    fd_check_with(leaves, build, false)
}

fn fd_check_with(
    leaves: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    detect_kinks: bool,
) -> GradCheck {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let f0 = eval(leaves);

    let mut result = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut work = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().to_vec();
        for (i, &expected) in analytic.iter().enumerate() {
            let orig = work[li].data()[i];
            work[li].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&work);
            work[li].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&work);
            work[li].data_mut()[i] = orig;
            let right = (fp - f0) / FD_STEP;
            let left = (f0 - fm) / FD_STEP;
            if detect_kinks && rel_error(right, left) > 1e-3 {
                result.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            result.max_rel_error = result.max_rel_error.max(rel_error(expected, numeric));
            result.checked += 1;
        }
    }
    result
}

/// Direct zero-padded convolution, one output element at a time.
pub fn naive_conv2d(
    input: &[f64],
    shape: [usize; 4],
    weight: &[f64],
    wshape: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, w] = shape;
    let [cout, _, k, _] = wshape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.get(co).copied().unwrap_or(0.0);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// `out[n, c, r*h+i, r*w+j] = in[n, c*r*r + i*r + j, h, w]`, evaluated by
/// walking the output.
pub fn naive_pixel_shuffle(input: &[f64], shape: [usize; 4], r: usize) -> Vec<f64> {
    let [n, crr, h, w] = shape;
    let c = crr / (r * r);
    let mut out = vec![0.0; input.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h * r {
                for x in 0..w * r {
                    let (i, j) = (y % r, x % r);
                    let src = ((b * crr + ch * r * r + i * r + j) * h + y / r) * w + x / r;
                    out[((b * c + ch) * h * r + y) * w * r + x] = input[src];
                }
            }
        }
    }
    out
}
