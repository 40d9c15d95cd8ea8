//! Synthetic thermal-like scenes: a sky-to-ground gradient, warm rectangular
//! structures, blob-shaped heat sources and a little sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);
    let top = rng.gen_range(0.1..0.3f32);
    let bottom = rng.gen_range(0.3..0.5f32);
    let mut img = Image::from_fn(height, width, |r, _| top + (bottom - top) * r as f32 / h);

    for _ in 0..rng.gen_range(1..4) {
        let (r0, c0) = (rng.gen_range(0.3..0.9) * h, rng.gen_range(0.0..0.9) * w);
        let (rh, cw) = (rng.gen_range(0.1..0.4) * h, rng.gen_range(0.1..0.3) * w);
        let level = rng.gen_range(0.35..0.65f32);
        for r in (r0 - rh).max(0.0) as usize..(r0.min(h)) as usize {
            for c in c0 as usize..((c0 + cw).min(w)) as usize {
                img.data_mut()[r * width + c] = level;
            }
        }
    }

    for _ in 0..rng.gen_range(2..6) {
        let (cr, cc) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
        let (sr, sc) = (rng.gen_range(0.03..0.12) * h, rng.gen_range(0.02..0.08) * w);
        let peak = rng.gen_range(0.3..0.5f32);
        for r in 0..height {
            for c in 0..width {
                let d = ((r as f32 - cr) / sr).powi(2) + ((c as f32 - cc) / sc).powi(2);
                img.data_mut()[r * width + c] += peak * (-0.5 * d).exp();
            }
        }
    }

    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-0.01..0.01f32)).clamp(0.0, 1.0);
    }
    img
}

/// `count` scenes seeded from `seed`.
pub fn scenes(count: usize, height: usize, width: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| scene(height, width, crate::degrade::mix_seed(seed, i as u64)))
        .collect()
}
