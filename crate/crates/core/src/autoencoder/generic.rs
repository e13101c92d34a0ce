use rand::Rng;

use crate::image::Image;
use crate::util;

/// Dataset-agnostic pretraining images: a random two-colour gradient
/// background with one to three random rectangles or ellipses on top.
pub fn generic_corpus(n: usize, resolution: (usize, usize), seed: u64) -> Vec<Image> {
    (0..n).map(|i| generic_image(resolution, seed, i)).collect()
}

fn random_rgb<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn generic_image((h, w): (usize, usize), seed: u64, i: usize) -> Image {
    let mut rng = util::rng_for(seed, &format!("generic/{i}"));
    let (c0, c1) = (random_rgb(&mut rng), random_rgb(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut im = Image::filled(h, w, c0);
    for y in 0..h {
        for x in 0..w {
            let u = ((x as f32 / w as f32 - 0.5) * ca + (y as f32 / h as f32 - 0.5) * sa + 0.5)
                .clamp(0.0, 1.0);
            im.set(y, x, std::array::from_fn(|k| c0[k] * (1.0 - u) + c1[k] * u));
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let color = random_rgb(&mut rng);
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(0.05..0.35) * h as f32;
        let rx = rng.random_range(0.05..0.35) * w as f32;
        let ellipse: bool = rng.random();
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    im.set(y, x, color);
                }
            }
        }
    }
    im
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_varied() {
        let a = generic_corpus(4, (16, 16), 1);
        assert_eq!(a, generic_corpus(4, (16, 16), 1));
        assert_ne!(a[0], a[1]);
        assert_ne!(a, generic_corpus(4, (16, 16), 2));
        assert!(a.iter().all(|im| im.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
