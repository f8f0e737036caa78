//! Bundled source-image corpus for the transmission experiments: 64
//! procedurally generated 32x32 RGB images (gradients, shapes, periodic
//! textures, value noise), plus an importer for user-supplied raw batches.
//!
//! All pixel values live on the u8 grid (k/255) so the generated corpus is
//! byte-identical to the checked-in `.imgb` asset.

use crate::datastore;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;

pub const CORPUS_SIZE: usize = 64;
pub const IMG_SIDE: usize = 32;
pub const IMG_CHANNELS: usize = 3;

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.35, 0.25],
    [0.20, 0.55, 0.90],
    [0.95, 0.80, 0.25],
    [0.30, 0.75, 0.40],
    [0.70, 0.30, 0.80],
    [0.95, 0.60, 0.20],
    [0.25, 0.80, 0.80],
    [0.85, 0.85, 0.85],
];

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn fill<F: FnMut(usize, usize) -> [f64; 3]>(mut px: F) -> Vec<f64> {
    let mut out = Vec::with_capacity(IMG_SIDE * IMG_SIDE * IMG_CHANNELS);
    for u in 0..IMG_SIDE {
        for v in 0..IMG_SIDE {
            let c = px(u, v);
            out.extend(c.iter().map(|&x| quantize(x)));
        }
    }
    out
}

/// Linear two-color gradient; direction and palette pair vary with `i`.
fn gradient_image(i: usize) -> Vec<f64> {
    let theta = i as f64 / 16.0 * std::f64::consts::PI;
    let (c, s) = (theta.cos(), theta.sin());
    let c0 = PALETTE[i % 8];
    let c1 = PALETTE[(i + 3) % 8];
    let side = (IMG_SIDE - 1) as f64;
    fill(|u, v| {
        let x = v as f64 / side - 0.5;
        let y = u as f64 / side - 0.5;
        let t = ((x * c + y * s) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        lerp3(c0, c1, t)
    })
}

/// A filled disc or axis-aligned square on a contrasting background.
fn shape_image(i: usize) -> Vec<f64> {
    let bg = PALETTE[(i + 5) % 8];
    let fg = PALETTE[i % 8];
    let mut rng = ChaCha12Rng::seed_from_u64(1000 + i as u64);
    let cx = rng.gen_range(10.0..22.0);
    let cy = rng.gen_range(10.0..22.0);
    let r = rng.gen_range(5.0..11.0);
    let square = i % 2 == 1;
    fill(|u, v| {
        let dx = v as f64 - cx;
        let dy = u as f64 - cy;
        let inside = if square {
            dx.abs() <= r && dy.abs() <= r
        } else {
            dx * dx + dy * dy <= r * r
        };
        if inside {
            fg
        } else {
            bg
        }
    })
}

/// Stripes or checkerboard with an index-dependent period.
fn texture_image(i: usize) -> Vec<f64> {
    let c0 = PALETTE[i % 8];
    let c1 = PALETTE[(i + 4) % 8];
    let period = 2 + i % 6;
    let checker = i % 2 == 0;
    fill(|u, v| {
        let a = u / period;
        let b = v / period;
        let on = if checker { (a + b) % 2 == 0 } else { b % 2 == 0 };
        if on {
            c0
        } else {
            c1
        }
    })
}

/// Bilinearly upsampled random value grid tinted by a palette color.
fn noise_image(i: usize) -> Vec<f64> {
    const GRID: usize = 8;
    let mut rng = ChaCha12Rng::seed_from_u64(2000 + i as u64);
    let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tint = PALETTE[i % 8];
    let scale = IMG_SIDE as f64 / GRID as f64;
    fill(|u, v| {
        let gy = (u as f64 / scale).min((GRID - 1) as f64 - 1e-9);
        let gx = (v as f64 / scale).min((GRID - 1) as f64 - 1e-9);
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |y: usize, x: usize| grid[y.min(GRID - 1) * GRID + x.min(GRID - 1)];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        let t = top * (1.0 - fy) + bot * fy;
        [tint[0] * t, tint[1] * t, tint[2] * t]
    })
}

/// The full 64-image bundled corpus, row-major HWC with channels innermost.
pub fn bundled_corpus() -> Vec<Vec<f64>> {
    (0..CORPUS_SIZE)
        .map(|i| match i / 16 {
            0 => gradient_image(i),
            1 => shape_image(i - 16),
            2 => texture_image(i - 32),
            _ => noise_image(i - 48),
        })
        .collect()
}

/// HWC -> CHW, the layout the JSCC coders consume.
pub fn to_chw(img: &[f64]) -> Vec<f64> {
    let px = IMG_SIDE * IMG_SIDE;
    let mut out = vec![0.0; img.len()];
    for p in 0..px {
        for c in 0..IMG_CHANNELS {
            out[c * px + p] = img[p * IMG_CHANNELS + c];
        }
    }
    out
}

/// CHW -> HWC, for the image metrics.
pub fn to_hwc(chw: &[f64]) -> Vec<f64> {
    let px = IMG_SIDE * IMG_SIDE;
    let mut out = vec![0.0; chw.len()];
    for p in 0..px {
        for c in 0..IMG_CHANNELS {
            out[p * IMG_CHANNELS + c] = chw[c * px + p];
        }
    }
    out
}

pub fn write_corpus(path: &Path, images: &[Vec<f64>]) -> Result<()> {
    let bytes = datastore::encode_image_batch(images, IMG_SIDE, IMG_SIDE, IMG_CHANNELS)?;
    std::fs::write(path, bytes).map_err(Error::from)
}

/// Load an `.imgb` batch, enforcing the 32x32x3 shape.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    let (images, h, w, c) = datastore::decode_image_batch(&bytes)?;
    if h != IMG_SIDE || w != IMG_SIDE || c != IMG_CHANNELS {
        return Err(Error::format(format!(
            "corpus must be {IMG_SIDE}x{IMG_SIDE}x{IMG_CHANNELS}, got {h}x{w}x{c}"
        )));
    }
    Ok(images)
}

/// Import a headerless byte dump of concatenated 32x32x3 u8 images (HWC,
/// channels innermost), e.g. center crops exported from another toolchain.
pub fn import_raw_batch(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let stride = IMG_SIDE * IMG_SIDE * IMG_CHANNELS;
    if bytes.is_empty() || bytes.len() % stride != 0 {
        return Err(Error::format(format!(
            "raw batch must be a positive multiple of {stride} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(stride)
        .map(|chunk| chunk.iter().map(|&b| b as f64 / 255.0).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_range_and_determinism() {
        let a = bundled_corpus();
        assert_eq!(a.len(), CORPUS_SIZE);
        for img in &a {
            assert_eq!(img.len(), IMG_SIDE * IMG_SIDE * IMG_CHANNELS);
            for &p in img {
                assert!((0.0..=1.0).contains(&p));
                // u8 grid
                assert_eq!(p, quantize(p));
            }
        }
        assert_eq!(a, bundled_corpus());
    }

    #[test]
    fn corpus_has_visual_variety() {
        // Every image differs from every other, and no image is constant.
        let imgs = bundled_corpus();
        for (i, img) in imgs.iter().enumerate() {
            let first = img[0];
            assert!(
                img.iter().any(|&p| p != first),
                "image {i} is constant"
            );
            for other in imgs.iter().skip(i + 1) {
                assert_ne!(img, other);
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_imgb() {
        let imgs = bundled_corpus();
        let bytes =
            datastore::encode_image_batch(&imgs, IMG_SIDE, IMG_SIDE, IMG_CHANNELS).unwrap();
        let (back, h, w, c) = datastore::decode_image_batch(&bytes).unwrap();
        assert_eq!((h, w, c), (IMG_SIDE, IMG_SIDE, IMG_CHANNELS));
        assert_eq!(back, imgs);
    }

    #[test]
    fn bundled_asset_matches_generator() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/corpus.imgb");
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, bundled_corpus());
    }

    #[test]
    fn chw_round_trip() {
        let img = &bundled_corpus()[7];
        assert_eq!(&to_hwc(&to_chw(img)), img);
    }

    #[test]
    fn raw_import_validates_length() {
        let stride = IMG_SIDE * IMG_SIDE * IMG_CHANNELS;
        let ok = import_raw_batch(&vec![128u8; 2 * stride]).unwrap();
        assert_eq!(ok.len(), 2);
        assert!((ok[0][0] - 128.0 / 255.0).abs() < 1e-12);
        assert!(import_raw_batch(&[]).is_err());
        assert!(import_raw_batch(&vec![0u8; stride + 1]).is_err());
    }
}
