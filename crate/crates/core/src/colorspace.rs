//! RGB ↔ HSV and RGB → CIE L*a*b* conversions used to build guidance maps.

use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Cylindrical guidance maps of an RGB image.
///
/// Hue is in degrees, `[0, 360)`; achromatic pixels (saturation 0) carry hue 0.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMaps {
    pub height: usize,
    pub width: usize,
    pub hue: Vec<f64>,
    pub saturation: Vec<f64>,
    pub value: Vec<f64>,
}

impl GuidanceMaps {
    /// Hue rescaled to `[0, 1)` for use as a network input channel.
    pub fn hue_normalized(&self) -> Vec<f64> {
        self.hue.iter().map(|h| h / 360.0).collect()
    }

    /// The (H, S) pair as a two-channel image, hue normalized to `[0, 1)`.
    pub fn hue_saturation_image(&self) -> ImagePlane {
        let hn = self.hue_normalized();
        ImagePlane::from_fn(self.height, self.width, 2, |y, x, c| {
            let i = y * self.width + x;
            if c == 0 { hn[i] } else { self.saturation[i] }
        })
        .expect("guidance maps are non-empty")
    }

    pub fn value_image(&self) -> ImagePlane {
        ImagePlane::new(self.height, self.width, 1, self.value.clone())
            .expect("guidance maps are non-empty")
    }
}

/// Hexcone conversion of one pixel, returning `(hue°, saturation, value)`.
pub fn rgb_to_hsv_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 || s == 0.0 {
        return (0.0, 0.0, v);
    }
    let mut h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    (h, s, v)
}

pub fn hsv_to_rgb_pixel(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (v, v, v);
    }
    let sector = h / 60.0;
    let i = sector.floor();
    let f = sector - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn rgb_to_hsv(img: &ImagePlane) -> Result<GuidanceMaps> {
    img.require_channels(3, "rgb_to_hsv")?;
    let n = img.height() * img.width();
    let (mut hue, mut saturation, mut value) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.pixels() {
        let (h, s, v) = rgb_to_hsv_pixel(px[0], px[1], px[2]);
        hue.push(h);
        saturation.push(s);
        value.push(v);
    }
    Ok(GuidanceMaps { height: img.height(), width: img.width(), hue, saturation, value })
}

pub fn hsv_to_rgb(g: &GuidanceMaps) -> Result<ImagePlane> {
    let n = g.height * g.width;
    if g.hue.len() != n || g.saturation.len() != n || g.value.len() != n {
        return Err(Error::shape("guidance map lengths disagree with dimensions"));
    }
    if let Some(h) = g.hue.iter().find(|h| !(0.0..360.0).contains(*h)) {
        return Err(Error::Range(format!("hue {h} outside [0, 360)")));
    }
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (r, gg, b) = hsv_to_rgb_pixel(g.hue[i], g.saturation[i], g.value[i]);
        data.extend_from_slice(&[r, gg, b]);
    }
    ImagePlane::new(g.height, g.width, 3, data)
}

/// D65 reference white in XYZ.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// sRGB (gamma encoded) to CIE L*a*b* under D65.
pub fn rgb_to_lab_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (srgb_decode(r), srgb_decode(g), srgb_decode(b));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / WHITE[0]), lab_f(y / WHITE[1]), lab_f(z / WHITE[2]));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

pub fn rgb_to_lab(img: &ImagePlane) -> Result<ImagePlane> {
    img.require_channels(3, "rgb_to_lab")?;
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.pixels() {
        let (l, a, b) = rgb_to_lab_pixel(px[0], px[1], px[2]);
        data.extend_from_slice(&[l, a, b]);
    }
    Ok(ImagePlane::new(img.height(), img.width(), 3, data)?.with_range(-128.0, 128.0))
}
