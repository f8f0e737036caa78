//! Evaluation metrics: MSE/RMSE/MAE over real or complex arrays, PSNR, and
//! single-scale SSIM on the luminance plane.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// PSNR sentinel for a zero-MSE pair; keeps CSV output finite.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse_real(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dimension(format!(
            "mse over mismatched lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Complex MSE: each entry contributes |Δ|² = Δre² + Δim².
pub fn mse_complex(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dimension(format!(
            "mse over mismatched lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    Ok(s / a.len() as f64)
}

pub fn rmse_complex(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    Ok(mse_complex(a, b)?.sqrt())
}

pub fn mae_complex(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dimension("mae over mismatched lengths"));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`] for mse = 0.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if max_val <= 0.0 {
        return Err(Error::config("psnr max_val must be positive"));
    }
    let mse = mse_real(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// Single-scale SSIM with an 8x8 uniform window, stride 1, computed on the
/// luminance plane (mean of the RGB channels). Exponents α=β=γ=1,
/// c1=(0.01·MAX)², c2=(0.03·MAX)², c3=c2/2.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, channels: usize, max_val: f64) -> Result<f64> {
    const WIN: usize = 8;
    if a.len() != b.len() || a.len() != h * w * channels {
        return Err(Error::dimension("ssim shape mismatch"));
    }
    if h < WIN || w < WIN {
        return Err(Error::config("ssim window exceeds image size"));
    }
    let luma = |img: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for p in 0..h * w {
            let mut s = 0.0;
            for c in 0..channels {
                s += img[p * channels + c];
            }
            out[p] = s / channels as f64;
        }
        out
    };
    let la = luma(a);
    let lb = luma(b);
    let c1 = (0.01 * max_val) * (0.01 * max_val);
    let c2 = (0.03 * max_val) * (0.03 * max_val);
    let c3 = c2 / 2.0;
    let nwin = WIN * WIN;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..=h - WIN {
        for j in 0..=w - WIN {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in i..i + WIN {
                for v in j..j + WIN {
                    let x = la[u * w + v];
                    let y = lb[u * w + v];
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let ma = sa / nwin as f64;
            let mb = sb / nwin as f64;
            let va = (saa / nwin as f64 - ma * ma).max(0.0);
            let vb = (sbb / nwin as f64 - mb * mb).max(0.0);
            let cov = sab / nwin as f64 - ma * mb;
            let sda = va.sqrt();
            let sdb = vb.sqrt();
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let c = (2.0 * sda * sdb + c2) / (va + vb + c2);
            let s = (cov + c3) / (sda * sdb + c3);
            acc += l * c * s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn mse_closed_forms() {
        let a = vec![Complex64::new(1.0, 1.0); 8];
        assert_eq!(mse_complex(&a, &a).unwrap(), 0.0);
        let b: Vec<Complex64> = a.iter().map(|z| z + Complex64::new(0.1, 0.0)).collect();
        assert!((mse_complex(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((rmse_complex(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        assert!((mae_complex(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        assert!(mse_complex(&a, &b[..4]).is_err());
    }

    #[test]
    fn complex_mse_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a: Vec<Complex64> = (0..256)
                .map(|_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let b: Vec<Complex64> = (0..256)
                .map(|_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let mut s = 0.0;
            for i in 0..256 {
                let dre = a[i].re - b[i].re;
                let dim = a[i].im - b[i].im;
                s += dre * dre + dim * dim;
            }
            let oracle = s / 256.0;
            assert!((mse_complex(&a, &b).unwrap() - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = vec![0.5; 12];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_decreasing_in_mse() {
        let a = vec![0.5; 64];
        let mut prev = f64::INFINITY;
        for step in [0.01, 0.05, 0.1, 0.3] {
            let b: Vec<f64> = a.iter().map(|x| x + step).collect();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let a: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(ssim(&a, &a, 32, 32, 3, 1.0).unwrap(), 1.0);
        let ab = ssim(&a, &b, 32, 32, 3, 1.0).unwrap();
        let ba = ssim(&b, &a, 32, 32, 3, 1.0).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn ssim_constant_images_hand_value() {
        // S ≡ 0, S' ≡ 1: c = s = 1, l = c1/(1 + c1).
        let a = vec![0.0; 16 * 16 * 3];
        let b = vec![1.0; 16 * 16 * 3];
        let c1 = 0.01f64 * 0.01;
        let expect = c1 / (1.0 + c1);
        let got = ssim(&a, &b, 16, 16, 3, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}
