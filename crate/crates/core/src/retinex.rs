//! Retinex factorization `I = L ⊙ R` and residual recomposition
//! `Î = (L′ + ΔL) ⊙ (R′ + ΔR)`.

use crate::error::{Error, Result};
use crate::image::ImagePlane;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Luminance (one channel, floored at `eps`) and reflectance (three channels).
#[derive(Clone, Debug, PartialEq)]
pub struct RetinexPair {
    pub luminance: ImagePlane,
    pub reflectance: ImagePlane,
}

/// Additive corrections to both components.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPair {
    pub d_luminance: ImagePlane,
    pub d_reflectance: ImagePlane,
}

impl ResidualPair {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            d_luminance: ImagePlane::filled(height, width, 1, 0.0).expect("non-empty"),
            d_reflectance: ImagePlane::filled(height, width, 3, 0.0).expect("non-empty"),
        }
    }
}

/// Luminance initialized from the HSV value channel: `L = max(max_c I, eps)`,
/// `R = I / L`.
pub fn decompose(img: &ImagePlane, eps: f64) -> Result<RetinexPair> {
    img.require_channels(3, "decompose")?;
    if !(eps > 0.0) {
        return Err(Error::Range(format!("eps must be positive, got {eps}")));
    }
    let (h, w, _) = img.dims();
    let mut lum = Vec::with_capacity(h * w);
    let mut refl = Vec::with_capacity(h * w * 3);
    for p in img.pixels() {
        let l = p[0].max(p[1]).max(p[2]).max(eps);
        lum.push(l);
        refl.extend(p.iter().map(|c| c / l));
    }
    Ok(RetinexPair {
        luminance: ImagePlane::new(h, w, 1, lum)?,
        reflectance: ImagePlane::new(h, w, 3, refl)?.with_range(0.0, 1.0 / eps),
    })
}

/// Compensated product without any clamping.
pub fn recompose_unclamped(pair: &RetinexPair, residual: &ResidualPair) -> Result<ImagePlane> {
    let (h, w, _) = pair.luminance.dims();
    pair.luminance.require_channels(1, "recompose luminance")?;
    pair.reflectance.require_channels(3, "recompose reflectance")?;
    residual.d_luminance.require_same_shape(&pair.luminance, "luminance residual")?;
    residual.d_reflectance.require_same_shape(&pair.reflectance, "reflectance residual")?;
    if pair.reflectance.height() != h || pair.reflectance.width() != w {
        return Err(Error::shape("luminance and reflectance sizes differ"));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let l = pair.luminance.data()[i] + residual.d_luminance.data()[i];
        for c in 0..3 {
            let r = pair.reflectance.data()[i * 3 + c] + residual.d_reflectance.data()[i * 3 + c];
            out.push(l * r);
        }
    }
    Ok(ImagePlane::new(h, w, 3, out)?.with_range(f64::NEG_INFINITY, f64::INFINITY))
}

/// Compensated product clamped to `[0, 1]`.
pub fn recompose(pair: &RetinexPair, residual: &ResidualPair) -> Result<ImagePlane> {
    Ok(recompose_unclamped(pair, residual)?.clamp01().with_range(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, lo: f64, hi: f64, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn gray_and_red() {
        let gray = ImagePlane::filled(3, 3, 3, 0.5).unwrap();
        let p = decompose(&gray, DEFAULT_EPS).unwrap();
        assert!(p.luminance.data().iter().all(|&v| v == 0.5));
        assert!(p.reflectance.data().iter().all(|&v| v == 1.0));
        let red = ImagePlane::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let p = decompose(&red, DEFAULT_EPS).unwrap();
        assert_eq!(p.luminance.data(), &[1.0]);
        assert_eq!(p.reflectance.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_residual_is_identity() {
        let img = random(6, 5, 3, 0.0, 1.0, 1);
        let p = decompose(&img, DEFAULT_EPS).unwrap();
        let back = recompose(&p, &ResidualPair::zeros(6, 5)).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dark_pixels_use_floor() {
        let img = ImagePlane::new(1, 1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let p = decompose(&img, 1e-4).unwrap();
        assert_eq!(p.luminance.data(), &[1e-4]);
        assert_eq!(p.reflectance.data(), &[0.0; 3]);
        assert!(decompose(&img, 0.0).is_err());
    }

    #[test]
    fn arithmetic_example() {
        let pair = RetinexPair {
            luminance: ImagePlane::filled(2, 2, 1, 0.5).unwrap(),
            reflectance: ImagePlane::filled(2, 2, 3, 1.0).unwrap(),
        };
        let res = ResidualPair {
            d_luminance: ImagePlane::filled(2, 2, 1, 0.5).unwrap(),
            d_reflectance: ImagePlane::filled(2, 2, 3, 0.0).unwrap(),
        };
        assert!(recompose(&pair, &res).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_residual_matches_loop_and_clamps_only_at_end() {
        let pair = RetinexPair {
            luminance: random(4, 4, 1, 0.1, 1.0, 2),
            reflectance: random(4, 4, 3, 0.0, 1.0, 3),
        };
        let res = ResidualPair {
            d_luminance: random(4, 4, 1, -0.5, 0.8, 4),
            d_reflectance: random(4, 4, 3, -0.5, 0.8, 5),
        };
        let raw = recompose_unclamped(&pair, &res).unwrap();
        let out = recompose(&pair, &res).unwrap();
        let mut saw_outside = false;
        for y in 0..4 {
            for x in 0..4 {
                let l = pair.luminance.get(y, x, 0) + res.d_luminance.get(y, x, 0);
                for c in 0..3 {
                    let want = l * (pair.reflectance.get(y, x, c) + res.d_reflectance.get(y, x, c));
                    assert!((raw.get(y, x, c) - want).abs() < 1e-12);
                    assert_eq!(out.get(y, x, c), want.clamp(0.0, 1.0));
                    saw_outside |= !(0.0..=1.0).contains(&want);
                }
            }
        }
        assert!(saw_outside, "test data should exercise the clamp");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let pair = decompose(&ImagePlane::filled(2, 2, 3, 0.3).unwrap(), 1e-4).unwrap();
        assert!(recompose(&pair, &ResidualPair::zeros(3, 2)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn product_identity(seed in 0u64..500) {
                let img = random(5, 4, 3, 0.0, 1.0, seed);
                let p = decompose(&img, DEFAULT_EPS).unwrap();
                for i in 0..20 {
                    for c in 0..3 {
                        let prod = p.luminance.data()[i] * p.reflectance.data()[i * 3 + c];
                        prop_assert!((prod - img.data()[i * 3 + c]).abs() < 1e-6);
                    }
                    prop_assert!(p.luminance.data()[i] >= DEFAULT_EPS);
                }
            }

            #[test]
            fn achromatic_reflectance_is_one(v in DEFAULT_EPS..1.0f64) {
                let img = ImagePlane::filled(2, 2, 3, v).unwrap();
                let p = decompose(&img, DEFAULT_EPS).unwrap();
                prop_assert!(p.reflectance.data().iter().all(|&r| (r - 1.0).abs() < 1e-15));
            }
        }
    }
}
