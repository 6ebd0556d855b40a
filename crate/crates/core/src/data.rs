//! Seeded synthetic scenes for desk-scale probing.
//!
//! A scene is a textured rectangle (one of a few foreground classes) on a
//! noisy graded background, with its box, per-pixel class mask and per-pixel
//! depth. Pixel values are in `[0, 1]`.

use crate::analysis::BoxAnnotation;
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.80],
];

#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    /// `[size × size × 3]`
    pub image: Tensor<f64>,
    /// Foreground class, `0..n_classes`.
    pub class: usize,
    /// `(x0, y0, x1, y1)`, half-open.
    pub bbox: (usize, usize, usize, usize),
    /// Per-pixel label: 0 for background, `1 + class` inside the box.
    pub mask: Vec<usize>,
    /// Per-pixel depth, positive.
    pub depth: Vec<f64>,
    pub size: usize,
}

impl Scene {
    pub fn annotation(&self) -> BoxAnnotation {
        let (x0, y0, x1, y1) = self.bbox;
        BoxAnnotation {
            image_id: self.id.clone(),
            x0,
            y0,
            x1,
            y1,
        }
    }

    /// Label of each patch's centre pixel.
    pub fn patch_labels(&self, patch_size: usize) -> Vec<usize> {
        let g = self.size / patch_size;
        (0..g * g)
            .map(|i| {
                let (r, c) = (i / g, i % g);
                let (y, x) = (r * patch_size + patch_size / 2, c * patch_size + patch_size / 2);
                self.mask[y * self.size + x]
            })
            .collect()
    }

    /// Mean depth of each patch.
    pub fn patch_depths(&self, patch_size: usize) -> Vec<f64> {
        let g = self.size / patch_size;
        (0..g * g)
            .map(|i| {
                let (r, c) = (i / g, i % g);
                let mut acc = 0.0;
                for y in r * patch_size..(r + 1) * patch_size {
                    for x in c * patch_size..(c + 1) * patch_size {
                        acc += self.depth[y * self.size + x];
                    }
                }
                acc / (patch_size * patch_size) as f64
            })
            .collect()
    }

    pub fn image_as<S: Scalar>(&self) -> Tensor<S> {
        self.image.cast()
    }
}

/// One scene with `n_classes` possible foreground classes (at most 6).
pub fn scene(id: impl Into<String>, size: usize, n_classes: usize, rng: &mut Rng) -> Scene {
    let n_classes = n_classes.clamp(1, PALETTE.len());
    let class = rng.below(n_classes);
    let min_side = (size / 4).max(1);
    let max_side = (3 * size / 4).max(min_side + 1);
    let w = min_side + rng.below(max_side - min_side);
    let h = min_side + rng.below(max_side - min_side);
    let x0 = rng.below(size - w + 1);
    let y0 = rng.below(size - h + 1);
    let (x1, y1) = (x0 + w, y0 + h);
    let period = 2.0 + class as f64;
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);

    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    let mut depth = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / size as f64;
        for x in 0..size {
            let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
            let noise = 0.05 * rng.normal();
            if inside {
                let coord = if class % 2 == 0 { x } else { y } as f64;
                let stripe = 0.15 * (std::f64::consts::TAU * coord / period + phase).sin();
                for ch in 0..3 {
                    pixels.push((PALETTE[class][ch] + stripe + noise).clamp(0.0, 1.0));
                }
                mask.push(1 + class);
                depth.push(2.0 + 0.25 * stripe);
            } else {
                let base = 0.35 + 0.15 * fy;
                for _ in 0..3 {
                    pixels.push((base + noise).clamp(0.0, 1.0));
                }
                mask.push(0);
                // floor receding towards the top of the frame
                depth.push(6.0 - 3.0 * fy);
            }
        }
    }
    Scene {
        id: id.into(),
        image: Tensor::new(vec![size, size, 3], pixels).expect("pixel count matches shape"),
        class,
        bbox: (x0, y0, x1, y1),
        mask,
        depth,
        size,
    }
}

/// `count` scenes named `img0000`, `img0001`, ...
pub fn scenes(count: usize, size: usize, n_classes: usize, seed: u64) -> Vec<Scene> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| scene(format!("img{i:04}"), size, n_classes, &mut rng))
        .collect()
}

/// Image whose only image-level signal is a global bit.
///
/// Every patch is i.i.d. noise except one randomly placed beacon patch that
/// carries a fixed pattern with sign `2·bit − 1`. Every patch of the image is
/// labelled with the bit, so no patch other than the beacon knows its own
/// label from its pixels.
#[derive(Debug, Clone)]
pub struct GlobalBitSample {
    pub image: Tensor<f64>,
    pub bit: usize,
    pub beacon: usize,
    pub labels: Vec<usize>,
}

pub fn global_bit_sample(size: usize, patch_size: usize, rng: &mut Rng) -> GlobalBitSample {
    const NOISE: f64 = 1.0;
    const BEACON: f64 = 3.0;
    let g = size / patch_size;
    let bit = rng.below(2);
    let beacon = rng.below(g * g);
    let sign = if bit == 1 { 1.0 } else { -1.0 };
    // Fixed beacon pattern shared by all samples.
    let mut pattern_rng = Rng::new(0x5EED_BEAC);
    let pattern: Vec<f64> = (0..patch_size * patch_size * 3)
        .map(|_| if pattern_rng.uniform() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    let (br, bc) = (beacon / g, beacon % g);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let v = if y / patch_size == br && x / patch_size == bc {
                    let k = ((y % patch_size) * patch_size + x % patch_size) * 3 + ch;
                    sign * BEACON * pattern[k]
                } else {
                    NOISE * rng.normal()
                };
                data.push(v);
            }
        }
    }
    GlobalBitSample {
        image: Tensor::new(vec![size, size, 3], data).expect("pixel count matches shape"),
        bit,
        beacon,
        labels: vec![bit; g * g],
    }
}
