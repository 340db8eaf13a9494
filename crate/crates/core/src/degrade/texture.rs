//! Seeded procedural images: fractal gradient noise overlaid with flat
//! shapes, giving both fine texture and sharp edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// One octave of gradient noise on a `cells x cells` lattice spanning the
/// unit square. Output lies roughly in [-0.7, 0.7].
struct GradientLattice {
    cells: usize,
    gradients: Vec<(f64, f64)>,
}

impl GradientLattice {
    fn new(cells: usize, rng: &mut ChaCha8Rng) -> Self {
        let gradients = (0..(cells + 1) * (cells + 1))
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            })
            .collect();
        Self { cells, gradients }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let (x, y) = (u * self.cells as f64, v * self.cells as f64);
        let (x0, y0) = ((x.floor() as usize).min(self.cells - 1), (y.floor() as usize).min(self.cells - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let dot = |ix: usize, iy: usize, dx: f64, dy: f64| {
            let (gx, gy) = self.gradients[iy * (self.cells + 1) + ix];
            gx * dx + gy * dy
        };
        let n00 = dot(x0, y0, fx, fy);
        let n10 = dot(x0 + 1, y0, fx - 1.0, fy);
        let n01 = dot(x0, y0 + 1, fx, fy - 1.0);
        let n11 = dot(x0 + 1, y0 + 1, fx - 1.0, fy - 1.0);
        let (sx, sy) = (fade(fx), fade(fy));
        lerp(lerp(n00, n10, sx), lerp(n01, n11, sx), sy)
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Stripes { angle: f64, period: f64, cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Shape {
        match rng.random_range(0..3) {
            0 => {
                let (y, x) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
                Shape::Rect { y0: y, x0: x, y1: y + rng.random_range(0.1..0.5), x1: x + rng.random_range(0.1..0.5) }
            }
            1 => Shape::Disk { cy: rng.random(), cx: rng.random(), r: rng.random_range(0.06..0.3) },
            _ => Shape::Stripes {
                angle: rng.random_range(0.0..std::f64::consts::PI),
                period: rng.random_range(0.03..0.12),
                cy: rng.random(),
                cx: rng.random(),
                r: rng.random_range(0.15..0.4),
            },
        }
    }

    fn covers(&self, v: f64, u: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => v >= y0 && v < y1 && u >= x0 && u < x1,
            Shape::Disk { cy, cx, r } => (v - cy).powi(2) + (u - cx).powi(2) < r * r,
            Shape::Stripes { angle, period, cy, cx, r } => {
                let inside = (v - cy).powi(2) + (u - cx).powi(2) < r * r;
                let t = (u * angle.cos() + v * angle.sin()) / period;
                inside && t.rem_euclid(1.0) < 0.5
            }
        }
    }
}

/// Deterministic `channels x height x width` image on the 0..255 scale.
pub fn procedural_image(seed: u64, channels: usize, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_cells = rng.random_range(2..5);
    let octaves: Vec<GradientLattice> = (0..5).map(|o| GradientLattice::new(base_cells << o, &mut rng)).collect();
    let shapes: Vec<(Shape, Vec<f64>, f64)> = (0..rng.random_range(3..9))
        .map(|_| {
            let shape = Shape::random(&mut rng);
            let level = rng.random_range(0.05..0.95);
            let tint = (0..channels).map(|_| (level + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0)).collect();
            (shape, tint, rng.random_range(0.3..0.8))
        })
        .collect();
    let contrast = rng.random_range(0.6..1.2);
    let tints: Vec<f64> = (0..channels).map(|_| rng.random_range(0.85..1.15)).collect();
    let side = height.max(width) as f64;

    let n = height * width;
    let mut data = vec![0.0f32; channels * n];
    for y in 0..height {
        for x in 0..width {
            let (v, u) = ((y as f64 + 0.5) / side, (x as f64 + 0.5) / side);
            let mut noise = 0.0;
            let mut amp = 1.0;
            for oct in &octaves {
                noise += amp * oct.sample(u, v);
                amp *= 0.55;
            }
            let ground = (0.5 + contrast * noise).clamp(0.0, 1.0);
            for c in 0..channels {
                let mut value = (ground * tints[c]).clamp(0.0, 1.0);
                for (shape, tint, texture) in &shapes {
                    if shape.covers(v, u) {
                        value = tint[c] * (1.0 - texture) + value * texture;
                    }
                }
                data[c * n + y * width + x] = (value * 255.0) as f32;
            }
        }
    }
    Image::new(channels, height, width, data).expect("consistent geometry")
}

/// `count` images with seeds derived from `seed`.
pub fn procedural_dataset(seed: u64, count: usize, channels: usize, height: usize, width: usize) -> Vec<Image> {
    (0..count)
        .map(|i| {
            procedural_image(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64), channels, height, width)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = procedural_image(5, 1, 40, 48);
        assert_eq!(a, procedural_image(5, 1, 40, 48));
        assert_ne!(a, procedural_image(6, 1, 40, 48));
        assert!(a.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        let mean = a.data().iter().sum::<f32>() / a.data().len() as f32;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / a.data().len() as f32;
        assert!(var.sqrt() > 10.0, "texture has contrast, std {}", var.sqrt());
    }

    #[test]
    fn dataset_images_differ() {
        let set = procedural_dataset(1, 3, 3, 16, 16);
        assert_eq!(set.len(), 3);
        assert_eq!(set[0].channels(), 3);
        assert_ne!(set[0], set[1]);
    }
}
