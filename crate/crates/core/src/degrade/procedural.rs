//! Procedural training images: a colour gradient, hard-edged shapes and band-limited
//! sinusoidal texture, so every sample carries both low- and high-frequency content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::ImageTensor;

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Stripes { angle: f32, period: f32, y0: f32, x0: f32, y1: f32, x1: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Stripes {
                angle,
                period,
                y0,
                x0,
                y1,
                x1,
            } => {
                let inside = y >= y0 && y < y1 && x >= x0 && x < x1;
                let phase = (x * angle.cos() + y * angle.sin()) / period;
                inside && phase.rem_euclid(1.0) < 0.5
            }
        }
    }
}

/// Deterministic `size`×`size` RGB image for `seed`, quantized to 8-bit levels.
pub fn procedural_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f32;

    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());

    let num_shapes = rng.random_range(3..=7);
    let shapes: Vec<(Shape, [f32; 3])> = (0..num_shapes)
        .map(|_| {
            let kind = rng.random_range(0..3);
            let cy = rng.random_range(0.0..n);
            let cx = rng.random_range(0.0..n);
            let r = rng.random_range(0.08 * n..0.3 * n);
            let shape = match kind {
                0 => Shape::Disc { cy, cx, r },
                1 => Shape::Rect {
                    y0: cy - r,
                    x0: cx - r * rng.random_range(0.5..1.5),
                    y1: cy + r,
                    x1: cx + r * rng.random_range(0.5..1.5),
                },
                _ => Shape::Stripes {
                    angle: rng.random_range(0.0..std::f32::consts::PI),
                    period: rng.random_range(3.0..9.0),
                    y0: cy - r,
                    x0: cx - r,
                    y1: cy + r,
                    x1: cx + r,
                },
            };
            (shape, color(&mut rng))
        })
        .collect();

    // band-limited texture: a few oriented sinusoids
    let waves: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.04..0.3f32);
            let theta = rng.random_range(0.0..std::f32::consts::TAU);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = rng.random_range(0.02..0.07f32);
            let mix = color(&mut rng);
            (freq, theta, phase, amp, mix)
        })
        .collect();

    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = (((yf - n / 2.0) * dy + (xf - n / 2.0) * dx) / n + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, col) in &shapes {
            if shape.contains(yf, xf) {
                v = col[c];
            }
        }
        for &(freq, theta, phase, amp, mix) in &waves {
            let arg = std::f32::consts::TAU * freq * (xf * theta.cos() + yf * theta.sin()) + phase;
            v += amp * (0.5 + mix[c]) * arg.sin();
        }
        v
    })
    .quantize_u8()
}
