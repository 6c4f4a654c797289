//! Procedural two-domain synthetic dataset.
//!
//! Domain X: textured circles over warm gradient backgrounds. Domain Y:
//! textured squares over cool gradient backgrounds. Pixel values live in
//! [−1, 1]; the palettes are separated so that per-channel mean statistics
//! differ by at least [`DOMAIN_MARGIN`] — enough signal for a toy
//! translation task, verified by test.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Guaranteed L2 distance between the domains' mean-pixel color vectors.
pub const DOMAIN_MARGIN: f64 = 0.2;

/// Procedural generators for both domains at one image size. Every sample
/// is a pure function of its seed.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticDomainPair {
    pub image_size: usize,
}

/// Which palette/shape family to draw from.
#[derive(Clone, Copy, PartialEq)]
enum Domain {
    X,
    Y,
}

impl SyntheticDomainPair {
    pub fn new(image_size: usize) -> Self {
        Self { image_size }
    }

    /// Textured circles on a warm gradient background.
    pub fn sample_x(&self, seed: u64) -> Tensor {
        self.sample(Domain::X, seed)
    }

    /// Textured squares on a cool gradient background, shifted palette.
    pub fn sample_y(&self, seed: u64) -> Tensor {
        self.sample(Domain::Y, seed)
    }

    fn sample(&self, domain: Domain, seed: u64) -> Tensor {
        // Separate seed spaces so x- and y-streams never collide.
        let stream = match domain {
            Domain::X => 0x5158_0000_0000_0000u64,
            Domain::Y => 0xA159_0000_0000_0000u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        let s = self.image_size;
        let mut img = vec![0.0f64; 3 * s * s];

        // Gradient background between two palette colors along a random
        // direction, plus a low-amplitude sinusoidal texture.
        let c0 = palette(&mut rng, domain);
        let c1 = palette(&mut rng, domain);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let tex_freq: f64 = rng.gen_range(2.0..6.0);
        let tex_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let tex_amp = 0.08;
        for i in 0..s {
            for j in 0..s {
                let u = (i as f64 * dy + j as f64 * dx) / s as f64;
                let t = 0.5 + 0.5 * (u * std::f64::consts::PI).sin();
                let tex = tex_amp
                    * (std::f64::consts::TAU * tex_freq * (i + j) as f64 / s as f64 + tex_phase)
                        .sin();
                for ch in 0..3 {
                    img[(ch * s + i) * s + j] = c0[ch] + t * (c1[ch] - c0[ch]) + tex;
                }
            }
        }

        // Foreground shapes: circles for X, axis-aligned squares for Y,
        // each with its own radial/striped texture.
        let shapes = rng.gen_range(1..=3);
        for _ in 0..shapes {
            let color = palette(&mut rng, domain);
            let cx: f64 = rng.gen_range(0.2..0.8) * s as f64;
            let cy: f64 = rng.gen_range(0.2..0.8) * s as f64;
            let r: f64 = rng.gen_range(0.12..0.28) * s as f64;
            let freq: f64 = rng.gen_range(0.5..2.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for i in 0..s {
                for j in 0..s {
                    let (di, dj) = (i as f64 - cy, j as f64 - cx);
                    let inside = match domain {
                        Domain::X => (di * di + dj * dj).sqrt() <= r,
                        Domain::Y => di.abs() <= r && dj.abs() <= r,
                    };
                    if !inside {
                        continue;
                    }
                    let tex = match domain {
                        // Concentric rings.
                        Domain::X => {
                            0.25 * ((di * di + dj * dj).sqrt() / r
                                * std::f64::consts::TAU
                                * freq
                                + phase)
                                .sin()
                        }
                        // Parallel stripes.
                        Domain::Y => {
                            0.25 * (dj / r * std::f64::consts::TAU * freq + phase).sin()
                        }
                    };
                    for ch in 0..3 {
                        img[(ch * s + i) * s + j] = color[ch] + tex;
                    }
                }
            }
        }

        for v in &mut img {
            *v = v.clamp(-1.0, 1.0);
        }
        Tensor::new(vec![3, s, s], img).expect("shape/data consistent by construction")
    }
}

/// Warm palette for X (red high, blue low); cool palette for Y (mirrored).
fn palette(rng: &mut impl Rng, domain: Domain) -> [f64; 3] {
    let hi = rng.gen_range(0.3..0.9);
    let lo = rng.gen_range(-0.9..-0.3);
    let g = rng.gen_range(-0.3..0.3);
    match domain {
        Domain::X => [hi, g, lo],
        Domain::Y => [lo, g, hi],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_image() {
        let pair = SyntheticDomainPair::new(32);
        assert_eq!(pair.sample_x(42).data(), pair.sample_x(42).data());
        assert_eq!(pair.sample_y(42).data(), pair.sample_y(42).data());
        assert_ne!(pair.sample_x(42).data(), pair.sample_x(43).data());
    }

    #[test]
    fn values_bounded() {
        let pair = SyntheticDomainPair::new(32);
        for seed in 0..5 {
            for img in [pair.sample_x(seed), pair.sample_y(seed)] {
                assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn domains_are_visually_distinct() {
        let pair = SyntheticDomainPair::new(32);
        let mean = |imgs: &[Tensor]| -> [f64; 3] {
            let mut m = [0.0; 3];
            let per = imgs[0].len() / 3;
            for img in imgs {
                for ch in 0..3 {
                    m[ch] += img.data()[ch * per..(ch + 1) * per].iter().sum::<f64>()
                        / per as f64
                        / imgs.len() as f64;
                }
            }
            m
        };
        let xs: Vec<Tensor> = (0..50).map(|s| pair.sample_x(s)).collect();
        let ys: Vec<Tensor> = (0..50).map(|s| pair.sample_y(s)).collect();
        let (mx, my) = (mean(&xs), mean(&ys));
        let dist = (0..3)
            .map(|c| (mx[c] - my[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            dist >= DOMAIN_MARGIN,
            "domain mean-pixel distance {dist} below margin {DOMAIN_MARGIN}"
        );
    }
}
