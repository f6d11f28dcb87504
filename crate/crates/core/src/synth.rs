//! Procedural RGB images for demos and toy-scale experiments.

use rand::Rng;

use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthStyle {
    /// Hard-edged shapes and gratings over the whole frame.
    Texture,
    /// The same content confined to a disc around the centre of a smooth
    /// background (photographs whose subject is centred).
    CenterSalient,
}

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Grating { fy: f32, fx: f32, phase: f32 },
}

/// `[3, h, w]` image in `[0, 1]`, a pure function of `(h, w, seed, style)`.
pub fn synthetic_image(h: usize, w: usize, seed: u64, style: SynthStyle) -> Tensor<f32> {
    let mut rng = seeded(seed, 0x5359_4e54);
    let (hf, wf) = (h as f32, w as f32);
    let bg: [[f32; 3]; 2] = [
        std::array::from_fn(|_| rng.random_range(0.2..0.8)),
        std::array::from_fn(|_| rng.random_range(0.2..0.8)),
    ];
    let bg_angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let shapes: Vec<(Shape, [f32; 3])> = (0..rng.random_range(10..18))
        .map(|_| {
            let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc {
                    cy: rng.random_range(0.0..hf),
                    cx: rng.random_range(0.0..wf),
                    r: rng.random_range(3.0..hf.min(wf) / 5.0),
                },
                1 => {
                    let (y, x) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                    Shape::Rect {
                        y0: y,
                        x0: x,
                        y1: y + rng.random_range(4.0..hf / 3.0),
                        x1: x + rng.random_range(4.0..wf / 3.0),
                    }
                }
                _ => {
                    let period: f32 = rng.random_range(6.0..24.0);
                    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    let k = std::f32::consts::TAU / period;
                    Shape::Grating {
                        fy: k * angle.sin(),
                        fx: k * angle.cos(),
                        phase: rng.random_range(0.0..std::f32::consts::TAU),
                    }
                }
            };
            (shape, colour)
        })
        .collect();
    let radius = 0.3 * hf.min(wf);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
            let t = 0.5 + 0.5 * ((yf / hf - 0.5) * bg_angle.sin() + (xf / wf - 0.5) * bg_angle.cos());
            let mut px: [f32; 3] = std::array::from_fn(|c| bg[0][c] * (1.0 - t) + bg[1][c] * t);
            let weight = match style {
                SynthStyle::Texture => 1.0,
                SynthStyle::CenterSalient => {
                    let d = ((yf - hf / 2.0).powi(2) + (xf - wf / 2.0).powi(2)).sqrt();
                    (1.0 - (d - radius) / 8.0).clamp(0.0, 1.0)
                }
            };
            if weight > 0.0 {
                for (shape, colour) in &shapes {
                    let alpha = match *shape {
                        Shape::Disc { cy, cx, r } => (((yf - cy).powi(2) + (xf - cx).powi(2)) <= r * r) as u8 as f32,
                        Shape::Rect { y0, x0, y1, x1 } => (yf >= y0 && yf < y1 && xf >= x0 && xf < x1) as u8 as f32,
                        Shape::Grating { fy, fx, phase } => 0.25 * (1.0 + (fy * yf + fx * xf + phase).sin()),
                    } * weight;
                    for c in 0..3 {
                        px[c] += alpha * (colour[c] - px[c]);
                    }
                }
            }
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches data")
}
