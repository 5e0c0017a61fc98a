//! Procedural 10-class image set in the CIFAR-10 binary layout, for hosts
//! without the real dataset.
//!
//! Classes: 0 disc, 1 square, 2 triangle, 3 horizontal stripes, 4 vertical
//! stripes, 5 diagonal stripes, 6 checkerboard, 7 ring, 8 cross, 9 dot grid.
//! Every image has a random two-colour gradient background, a randomly
//! placed and sized foreground in a contrasting colour, and pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, NUM_CLASSES, PIXELS, SIDE};
use crate::nn::params::standard_normal;

const NOISE_STD: f32 = 14.0;
const MIN_CONTRAST: f32 = 90.0;

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

fn distance(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Foreground geometry of one image.
struct Shape {
    class: usize,
    cx: f32,
    cy: f32,
    r: f32,
    period: f32,
    phase: f32,
    angle: f32,
}

impl Shape {
    fn sample(class: usize, rng: &mut ChaCha8Rng) -> Self {
        let r: f32 = rng.gen_range(6.0..12.0);
        let margin = r;
        Shape {
            class,
            cx: rng.gen_range(margin..SIDE as f32 - margin),
            cy: rng.gen_range(margin..SIDE as f32 - margin),
            r,
            period: rng.gen_range(3.0..6.0),
            phase: rng.gen_range(0.0..1.0),
            angle: rng.gen_range(-0.35..0.35),
        }
    }

    fn inside(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        // rotate into the shape frame
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let in_box = u.abs() <= self.r && v.abs() <= self.r;
        let stripe = |t: f32| ((t / self.period + self.phase).rem_euclid(1.0)) < 0.5;
        match self.class {
            0 => dx * dx + dy * dy <= self.r * self.r,
            1 => in_box,
            2 => {
                // upward triangle with apex at the top of the box
                let t = (v + self.r) / (2.0 * self.r);
                v <= self.r && v >= -self.r && u.abs() <= self.r * t
            }
            3 => in_box && stripe(v),
            4 => in_box && stripe(u),
            5 => in_box && stripe((u + v) * std::f32::consts::FRAC_1_SQRT_2),
            6 => in_box && (stripe(u) ^ stripe(v)),
            7 => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= self.r && d >= 0.55 * self.r
            }
            8 => {
                let w = 0.3 * self.r;
                (u.abs() <= w && v.abs() <= self.r) || (v.abs() <= w && u.abs() <= self.r)
            }
            _ => {
                let p = self.period + 1.0;
                let fu = (u / p + self.phase).rem_euclid(1.0) - 0.5;
                let fv = (v / p + self.phase).rem_euclid(1.0) - 0.5;
                in_box && (fu * fu + fv * fv) * p * p <= (0.3 * p).powi(2)
            }
        }
    }
}

/// Renders one image of `class` (channel-major bytes).
pub fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let bg0 = random_color(rng);
    let bg1 = random_color(rng);
    let mut fg = random_color(rng);
    let mid = [0, 1, 2].map(|c| 0.5 * (bg0[c] + bg1[c]));
    while distance(&fg, &mid) < MIN_CONTRAST {
        fg = random_color(rng);
    }
    let shape = Shape::sample(class, rng);
    let grad_angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (gs, gc) = grad_angle.sin_cos();
    let mut out = vec![0u8; PIXELS];
    // 2x2 supersampling for soft edges
    const SUB: [f32; 2] = [0.25, 0.75];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    if shape.inside(x as f32 + sx, y as f32 + sy) {
                        cover += 0.25;
                    }
                }
            }
            let t = ((x as f32 - 15.5) * gc + (y as f32 - 15.5) * gs) / 45.0 + 0.5;
            for c in 0..3 {
                let bg = bg0[c] * (1.0 - t) + bg1[c] * t;
                let v = bg * (1.0 - cover) + fg[c] * cover + NOISE_STD * standard_normal(rng);
                out[(c * SIDE + y) * SIDE + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// `n` images with uniformly drawn classes.
pub fn generate(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..NUM_CLASSES);
        pixels.extend(render(class, &mut rng));
        labels.push(class as u8);
    }
    Dataset::new(pixels, labels).expect("generator emits valid records")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = generate(50, 9);
        let b = generate(50, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_ne!(generate(50, 10), a);
        let again = Dataset::parse(&a.to_bytes()).unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn every_class_draws_a_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for class in 0..NUM_CLASSES {
            for _ in 0..20 {
                let s = Shape::sample(class, &mut rng);
                let covered = (0..SIDE * SIDE)
                    .filter(|i| s.inside((i % SIDE) as f32 + 0.5, (i / SIDE) as f32 + 0.5))
                    .count();
                assert!(covered >= 15, "class {class} covers only {covered} pixels");
            }
        }
    }
}
