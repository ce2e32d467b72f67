//! PSNR / SSIM and the aggregated evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::kv::KvMap;

/// Reported in place of +∞ for exact matches, so test-set means stay finite.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(pred: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
    pred.require_same_shape(reference, "mse")?;
    let n = pred.data().len() as f64;
    Ok(neumaier_sum(pred.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b))) / n)
}

/// Compensated summation, so that a constant error image gives exactly the
/// squared error back instead of accumulating rounding over every pixel.
fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &ImagePlane, reference: &ImagePlane, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Range(format!("peak must be positive, got {peak}")));
    }
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Local mean SSIM and mean contrast-structure term of one channel.
fn ssim_channel(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter_valid(x, h, w, &k), filter_valid(y, h, w, &k));
    let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &k), filter_valid(&yy, h, w, &k), filter_valid(&xy, h, w, &k));
    let n = mx.len() as f64;
    let (mut total, mut cs_total) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        total += l * cs;
        cs_total += cs;
    }
    (total / n, cs_total / n)
}

fn planes(img: &ImagePlane) -> Vec<Vec<f64>> {
    let c = img.channels();
    (0..c).map(|ch| img.data().iter().skip(ch).step_by(c).copied().collect()).collect()
}

fn ssim_parts(pred: &ImagePlane, reference: &ImagePlane) -> Result<(f64, f64)> {
    pred.require_same_shape(reference, "ssim")?;
    let (h, w, _) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if pred.data() == reference.data() {
        return Ok((1.0, 1.0));
    }
    let (pp, rp) = (planes(pred), planes(reference));
    let c = pp.len() as f64;
    let (mut s, mut cs) = (0.0, 0.0);
    for (a, b) in pp.iter().zip(&rp) {
        let (si, ci) = ssim_channel(a, b, h, w);
        s += si;
        cs += ci;
    }
    Ok((s / c, cs / c))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03, data
/// range 1) over the valid region, averaged over channels.
pub fn ssim(pred: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
    Ok(ssim_parts(pred, reference)?.0)
}

/// Mean of the contrast-structure factor alone. Unlike full SSIM it does not
/// depend on the local means, so a common intensity offset leaves it unchanged.
pub fn ssim_contrast_structure(pred: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
    Ok(ssim_parts(pred, reference)?.1)
}

/// A pluggable full-reference image metric.
pub trait ImageMetric: Send + Sync {
    fn name(&self) -> &str;
    fn higher_is_better(&self) -> bool {
        true
    }
    fn compute(&self, pred: &ImagePlane, reference: &ImagePlane) -> Result<f64>;
}

pub struct Psnr;

impl ImageMetric for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn compute(&self, pred: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
        psnr(pred, reference, 1.0)
    }
}

pub struct Ssim;

impl ImageMetric for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }

    fn compute(&self, pred: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
        ssim(pred, reference)
    }
}

/// Named metrics; perceptual metrics such as LPIPS can be registered by
/// callers that bring their own network.
#[derive(Default)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, Box<dyn ImageMetric>>,
}

impl MetricRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register(Box::new(Psnr));
        r.register(Box::new(Ssim));
        r
    }

    pub fn register(&mut self, metric: Box<dyn ImageMetric>) {
        self.metrics.insert(metric.name().to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Option<&dyn ImageMetric> {
        self.metrics.get(name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl SampleMetrics {
    pub fn compute(sample_id: impl Into<String>, pred: &ImagePlane, reference: &ImagePlane) -> Result<Self> {
        Ok(Self { sample_id: sample_id.into(), psnr: psnr(pred, reference, 1.0)?, ssim: ssim(pred, reference)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub sample_count: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Arithmetic means over the samples.
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len();
        let (psnr_db, ssim) = if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (
                per_sample.iter().map(|s| s.psnr).sum::<f64>() / n as f64,
                per_sample.iter().map(|s| s.ssim).sum::<f64>() / n as f64,
            )
        };
        Self { psnr_db, ssim, sample_count: n, per_sample }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("psnr_db", self.psnr_db);
        kv.set("ssim", self.ssim);
        kv.set("sample_count", self.sample_count);
        kv.set("ssim_mode", "rgb_channel_mean");
        kv.set("psnr_cap_db", PSNR_CAP_DB);
        kv
    }

    /// `sample_id,psnr,ssim` with one row per sample.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,psnr,ssim\n");
        for m in &self.per_sample {
            let _ = writeln!(s, "{},{},{}", m.sample_id, m.psnr, m.ssim);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(h, w, 3, |_, _, _| rng.random()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = random(8, 8, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = ImagePlane::filled(4, 4, 3, 0.3).unwrap();
        let c = ImagePlane::filled(4, 4, 3, 0.4).unwrap();
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let zero = ImagePlane::filled(40, 40, 3, 0.0).unwrap();
        assert_eq!(psnr(&ImagePlane::filled(40, 40, 3, 0.1).unwrap(), &zero, 1.0).unwrap(), 20.0);
        assert!(psnr(&b, &c, 0.0).is_err());
        assert!(psnr(&b, &random(4, 5, 0), 1.0).is_err());
    }

    #[test]
    fn ssim_basics() {
        let a = random(16, 16, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let small = random(10, 16, 3);
        assert!(matches!(ssim(&small, &small), Err(Error::Shape(_))));
        let checker = ImagePlane::from_fn(16, 16, 3, |y, x, _| ((y + x) % 2) as f64).unwrap();
        let inverse = ImagePlane::from_fn(16, 16, 3, |y, x, _| 1.0 - ((y + x) % 2) as f64).unwrap();
        assert!(ssim(&checker, &inverse).unwrap() < 0.0);
    }

    #[test]
    fn registry_and_report() {
        let reg = MetricRegistry::with_defaults();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["psnr", "ssim"]);
        let a = random(12, 12, 4);
        let b = random(12, 12, 5);
        let s1 = SampleMetrics::compute("x", &a, &b).unwrap();
        let s2 = SampleMetrics::compute("y", &a, &a).unwrap();
        assert_eq!(reg.get("psnr").unwrap().compute(&a, &b).unwrap(), s1.psnr);
        let rep = MetricReport::from_samples(vec![s1.clone(), s2.clone()]);
        assert!((rep.psnr_db - (s1.psnr + s2.psnr) / 2.0).abs() < 1e-12);
        assert!((rep.ssim - (s1.ssim + s2.ssim) / 2.0).abs() < 1e-12);
        assert_eq!(rep.to_csv().lines().count(), 3);
        assert_eq!(rep.to_kv().get("sample_count"), Some("2"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn psnr_symmetric_and_ssim_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
                let (a, b) = (random(12, 13, s1), random(12, 13, s2 + 1000));
                prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
                let s = ssim(&a, &b).unwrap();
                prop_assert!((-1.0..=1.0).contains(&s));
            }

            #[test]
            fn contrast_structure_shift_invariant(seed in 0u64..500, shift in -0.2f64..0.2) {
                let a = ImagePlane::from_fn(14, 14, 3, |y, x, c| 0.5 + 0.2 * (((y * 7 + x * 3 + c + seed as usize) % 11) as f64 / 11.0 - 0.5)).unwrap();
                let b = random(14, 14, seed).clamp01();
                let b = ImagePlane::new(14, 14, 3, b.data().iter().map(|v| 0.3 + 0.4 * v).collect()).unwrap();
                let shifted = |img: &ImagePlane| ImagePlane::new(14, 14, 3, img.data().iter().map(|v| v + shift).collect()).unwrap();
                let base = ssim_contrast_structure(&a, &b).unwrap();
                let moved = ssim_contrast_structure(&shifted(&a), &shifted(&b)).unwrap();
                prop_assert!((base - moved).abs() < 1e-6);
            }
        }
    }
}
