//! Procedural "geometric faces": the toy image source the generator is
//! trained on. Every image is a pure function of `(seed, index)`, and the
//! factors that produced it are returned alongside.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Image;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFactors {
    /// Mouth curvature in `[-1, 1]`; positive is a smile.
    pub smile: f64,
    pub has_hair: bool,
    pub face_radius: f64,
    pub center: (f64, f64),
    pub skin: [f64; 3],
    pub hair_color: [f64; 3],
    pub background: [[f64; 3]; 2],
}

impl ToyFactors {
    /// Binary attribute by name: `smile` or `hair`.
    pub fn attribute(&self, name: &str) -> Option<bool> {
        match name {
            "smile" => Some(self.smile > 0.0),
            "hair" => Some(self.has_hair),
            _ => None,
        }
    }
}

pub const ATTRIBUTES: [&str; 2] = ["smile", "hair"];

#[derive(Clone, Copy, Debug)]
pub struct ToyDataset {
    pub resolution: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn new(resolution: usize, seed: u64) -> Self {
        Self { resolution, seed }
    }

    pub fn factors(&self, index: u64) -> ToyFactors {
        let mut r = rng::indexed(self.seed, "toy-face", index);
        let mut color = |lo: f64, hi: f64| -> [f64; 3] {
            [r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)]
        };
        let bg0 = color(-0.9, 0.6);
        let bg1 = color(-0.9, 0.6);
        let hair_color = color(-1.0, 0.2);
        let tone: f64 = r.random_range(0.0..1.0);
        let skin = [
            0.35 + 0.55 * tone,
            0.05 + 0.5 * tone,
            -0.25 + 0.45 * tone,
        ];
        ToyFactors {
            smile: r.random_range(-1.0..1.0),
            has_hair: r.random_bool(0.5),
            face_radius: r.random_range(0.28..0.36),
            center: (r.random_range(0.45..0.55), r.random_range(0.5..0.58)),
            skin,
            hair_color,
            background: [bg0, bg1],
        }
    }

    pub fn image(&self, index: u64) -> (Image, ToyFactors) {
        let f = self.factors(index);
        (render(&f, self.resolution), f)
    }

    /// `[count, 3, R, R]` images for indices `start..start + count`.
    pub fn batch(&self, start: u64, count: usize) -> Tensor {
        let r = self.resolution;
        let mut data = Vec::with_capacity(count * 3 * r * r);
        for i in 0..count as u64 {
            data.extend_from_slice(self.image(start + i).0.data());
        }
        Tensor::from_parts(vec![count, 3, r, r], data)
    }
}

/// Coverage in `[0, 1]` from a signed distance (negative inside), with a
/// one-pixel soft edge.
fn cover(sd: f64, px: f64) -> f64 {
    (0.5 - sd / px).clamp(0.0, 1.0)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for c in 0..3 {
        dst[c] += a * (src[c] - dst[c]);
    }
}

pub fn render(f: &ToyFactors, res: usize) -> Image {
    let px = 1.0 / res as f64;
    let (cx, cy) = f.center;
    let rad = f.face_radius;
    let eye_dx = 0.38 * rad;
    let eye_y = cy - 0.22 * rad;
    let eye_r = 0.15 * rad;
    let mouth_y = cy + 0.42 * rad;
    let mouth_w = 0.5 * rad;
    let mut data = vec![0.0; 3 * res * res];
    for j in 0..res {
        for i in 0..res {
            let x = (i as f64 + 0.5) * px;
            let y = (j as f64 + 0.5) * px;
            let t = y;
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = f.background[0][k] * (1.0 - t) + f.background[1][k] * t;
            }
            if f.has_hair {
                let (hx, hy) = ((x - cx) / (1.15 * rad), (y - (cy - 0.18 * rad)) / (1.1 * rad));
                let sd = ((hx * hx + hy * hy).sqrt() - 1.0) * rad;
                blend(&mut c, f.hair_color, cover(sd, px));
            }
            let (fx, fy) = ((x - cx) / (0.9 * rad), (y - cy) / rad);
            let sd = ((fx * fx + fy * fy).sqrt() - 1.0) * rad;
            blend(&mut c, f.skin, cover(sd, px));
            for side in [-1.0, 1.0] {
                let (ex, ey) = (x - (cx + side * eye_dx), y - eye_y);
                let sd = (ex * ex + ey * ey).sqrt() - eye_r;
                blend(&mut c, [-0.85, -0.85, -0.8], cover(sd, px));
            }
            let u = (x - cx) / mouth_w;
            if u.abs() <= 1.2 {
                let curve_y = mouth_y + f.smile * 0.2 * rad * (1.0 - u * u);
                let along = (u.abs() - 1.0).max(0.0) * mouth_w;
                let sd = ((y - curve_y).abs().hypot(along)) - 0.07 * rad;
                blend(&mut c, [0.5, -0.7, -0.6], cover(sd, px));
            }
            for k in 0..3 {
                data[(k * res + j) * res + i] = c[k].clamp(-1.0, 1.0);
            }
        }
    }
    Image::new(Tensor::from_parts(vec![3, res, res], data)).expect("finite render")
}

/// A logistic-regression attribute classifier on raw pixels, fitted on toy
/// images whose factors are known. It labels generator samples, which carry
/// no factors of their own.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeProbe {
    pub attribute: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Accuracy on held-out toy images.
    pub accuracy: f64,
}

impl AttributeProbe {
    pub fn fit(data: &ToyDataset, attribute: &str, samples: usize, epochs: usize) -> crate::Result<Self> {
        if !ATTRIBUTES.contains(&attribute) {
            return Err(crate::AtlasError::Input(format!(
                "unknown attribute {attribute:?}; expected one of {ATTRIBUTES:?}"
            )));
        }
        let label = |f: &ToyFactors| if f.attribute(attribute) == Some(true) { 1.0 } else { 0.0 };
        let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = (0..samples as u64)
            .map(|i| {
                let (img, f) = data.image(i);
                (img.data().to_vec(), label(&f))
            })
            .unzip();
        let dim = xs[0].len();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut opt = crate::optim::Adam::new(
            crate::optim::AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            &[dim, 1],
        );
        let n = xs.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let err = (1.0 / (1.0 + (-z).exp()) - y) / n;
                gb += err;
                for (g, a) in gw.iter_mut().zip(x) {
                    *g += err * a;
                }
            }
            opt.begin_step();
            opt.update(0, &mut w, &gw, 1.0);
            let mut bv = [b];
            opt.update(1, &mut bv, &[gb], 1.0);
            b = bv[0];
        }
        let mut probe = Self {
            attribute: attribute.to_string(),
            weights: w,
            bias: b,
            accuracy: 0.0,
        };
        let held = 500u64;
        let start = samples as u64 + 1_000_000;
        let correct = (start..start + held)
            .filter(|&i| {
                let (img, f) = data.image(i);
                probe.predict(&img) == (label(&f) > 0.5)
            })
            .count();
        probe.accuracy = correct as f64 / held as f64;
        Ok(probe)
    }

    pub fn score(&self, img: &Image) -> f64 {
        img.data().iter().zip(&self.weights).map(|(a, c)| a * c).sum::<f64>() + self.bias
    }

    pub fn predict(&self, img: &Image) -> bool {
        self.score(img) > 0.0
    }
}
