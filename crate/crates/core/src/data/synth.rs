use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassLabel, DataError, DatasetArchive, Result, IMAGE_SIDE, PLANE};

const NOISE_SIGMA: f32 = 0.05;

struct Lungs {
    cx: [f32; 2],
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Lungs {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mid = IMAGE_SIDE as f32 / 2.0;
        let shift = rng.random_range(-1.0..1.0);
        let gap = rng.random_range(18.5..19.5);
        Lungs {
            cx: [mid + shift - gap, mid + shift + gap],
            cy: mid + rng.random_range(-1.0..1.0),
            rx: rng.random_range(13.0..14.0),
            ry: rng.random_range(26.5..27.5),
        }
    }

    /// Soft membership in either lung, 1 inside, 0 outside.
    fn mask(&self, x: f32, y: f32) -> f32 {
        self.cx
            .iter()
            .map(|&cx| {
                let d = ((x - cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2);
                ((1.0 - d) * 3.0).clamp(0.0, 1.0)
            })
            .fold(0.0, f32::max)
    }

    /// Random point inside a lung, restricted to the given vertical band
    /// (fractions of the lung height, 0 = top).
    fn point(&self, rng: &mut ChaCha8Rng, band: (f32, f32)) -> (f32, f32) {
        let side = rng.random_range(0..2);
        let t = rng.random_range(band.0..band.1);
        let y = self.cy - self.ry + 2.0 * self.ry * t;
        let half = self.rx * (1.0 - ((y - self.cy) / self.ry).powi(2)).max(0.0).sqrt() * 0.7;
        let x = self.cx[side] + rng.random_range(-half..=half);
        (x, y)
    }
}

fn render(label: ClassLabel, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let lungs = Lungs::sample(rng);
    let brightness = rng.random_range(0.55..0.65);
    let mut img = vec![0.0f32; PLANE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let background = 0.12 + 0.08 * fy / IMAGE_SIDE as f32;
            img[y * IMAGE_SIDE + x] = background + (brightness - background) * lungs.mask(fx, fy);
        }
    }
    match label {
        ClassLabel::Normal => {}
        ClassLabel::Pneumonia => {
            // Consolidation: the lower fields turn opaque, with blotchy texture.
            let opacity = rng.random_range(0.18f32..0.24);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let t = (fy - (lungs.cy - lungs.ry)) / (2.0 * lungs.ry);
                    let band = ((t - 0.45) * 8.0).clamp(0.0, 1.0);
                    img[y * IMAGE_SIDE + x] += opacity * band * lungs.mask(fx, fy);
                }
            }
            for _ in 0..rng.random_range(3..6) {
                let (px, py) = lungs.point(rng, (0.5, 0.9));
                let r = rng.random_range(6.0f32..10.0);
                let r2 = r * r;
                let (x0, x1) = ((px - r).max(0.0) as usize, ((px + r) as usize + 1).min(IMAGE_SIDE));
                let (y0, y1) = ((py - r).max(0.0) as usize, ((py + r) as usize + 1).min(IMAGE_SIDE));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d2 = (x as f32 + 0.5 - px).powi(2) + (y as f32 + 0.5 - py).powi(2);
                        if d2 < r2 {
                            img[y * IMAGE_SIDE + x] += rng.random_range(-0.2..0.2);
                        }
                    }
                }
            }
        }
        ClassLabel::Tuberculosis => {
            // Faint apical infiltrate under the nodules.
            let haze = rng.random_range(0.12f32..0.16);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let t = (fy - (lungs.cy - lungs.ry)) / (2.0 * lungs.ry);
                    let band = ((0.42 - t) * 8.0).clamp(0.0, 1.0);
                    img[y * IMAGE_SIDE + x] += haze * band * lungs.mask(fx, fy);
                }
            }
            for _ in 0..rng.random_range(10..16) {
                let (px, py) = lungs.point(rng, (0.08, 0.4));
                let sigma = rng.random_range(1.2f32..2.0);
                let amp = rng.random_range(0.4f32..0.6);
                let reach = (3.0 * sigma).ceil() as isize;
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let (x, y) = (px as isize + dx, py as isize + dy);
                        if x < 0 || y < 0 || x >= IMAGE_SIDE as isize || y >= IMAGE_SIDE as isize {
                            continue;
                        }
                        let d2 = (x as f32 + 0.5 - px).powi(2) + (y as f32 + 0.5 - py).powi(2);
                        img[y as usize * IMAGE_SIDE + x as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    for v in &mut img {
        *v += noise.sample(rng);
    }
    img
}

/// Deterministic lung-like toy dataset, classes interleaved 0,1,2,0,1,2,...
/// Normal is a bright ellipse pair, Pneumonia adds a blotchy consolidation in
/// the lower fields, Tuberculosis adds small bright nodules in the upper
/// fields. Every image carries Gaussian noise with σ = 0.05.
pub fn synthesize_dataset(n_per_class: usize, seed: u64, channels: usize) -> Result<DatasetArchive> {
    let mut archive = DatasetArchive::new(channels)?;
    if n_per_class == 0 {
        return Err(DataError::TooFewSamples {
            total: 0,
            fraction: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = Vec::with_capacity(channels * PLANE);
    for i in 0..n_per_class * 3 {
        let label = ClassLabel::from_id(i % 3).expect("id < 3");
        let img = render(label, &mut rng);
        sample.clear();
        for _ in 0..channels {
            sample.extend(img.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        archive.push(label, &sample, format!("synthetic/{seed}/{i:05}"));
    }
    Ok(archive)
}
