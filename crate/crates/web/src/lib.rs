//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Studio`] holds one procedural scene. The page relights it with up to
//! three coloured lights and shows the guidance maps and the Haar pyramid
//! of the colour-lit render. Every view comes back as a [`Frame`] of RGBA
//! bytes ready for `ImageData`.

use rln2_core::colorspace::{hsv_to_rgb_pixel, rgb_to_hsv, rgb_to_lab};
use rln2_core::retinex::{decompose, DEFAULT_EPS};
use rln2_core::synthdata::{generate_scene, render_triplet, LightSpec, RenderOptions, SceneGeometry, SceneTriplet};
use rln2_core::wavelet::dwt2;
use rln2_core::{Error, ImagePlane, Result};
use wasm_bindgen::prelude::*;

const AMBIENT_LEVEL: f64 = 0.8;
const GAP: usize = 4;

#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Copies the pixels out, row-major RGBA.
    pub fn pixels(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Frame {
    /// Lays the panels out left to right with a dark gutter. Single-channel
    /// panels are shown as grey.
    pub fn row(panels: &[ImagePlane]) -> Frame {
        let height = panels.iter().map(ImagePlane::height).max().unwrap_or(0);
        let width = panels.iter().map(ImagePlane::width).sum::<usize>() + GAP * panels.len().saturating_sub(1);
        let mut rgba = vec![24u8; width * height * 4];
        for px in rgba.chunks_exact_mut(4) {
            px[3] = 255;
        }
        let mut x0 = 0;
        for p in panels {
            blit(&mut rgba, width, p, 0, x0);
            x0 += p.width() + GAP;
        }
        Frame { width, height, rgba }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blit(rgba: &mut [u8], stride: usize, img: &ImagePlane, y0: usize, x0: usize) {
    let c = img.channels();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            let o = ((y0 + y) * stride + x0 + x) * 4;
            for k in 0..3 {
                rgba[o + k] = to_byte(p[if c == 3 { k } else { 0 }]);
            }
        }
    }
}

/// Light parameters as the page sends them: hue in degrees, intensity in
/// [0.3, 1], azimuth and elevation in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightControl {
    pub hue: f64,
    pub saturation: f64,
    pub intensity: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl LightControl {
    pub fn to_light(self) -> Result<LightSpec> {
        let (el, az) = (self.elevation.to_radians(), self.azimuth.to_radians());
        LightSpec::new(
            [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()],
            self.intensity,
            self.hue.rem_euclid(360.0),
            self.saturation,
        )
    }

    /// Groups of five numbers in field order.
    pub fn parse_flat(values: &[f64]) -> Result<Vec<LightControl>> {
        if values.is_empty() || values.len() % 5 != 0 {
            return Err(Error::Config(format!("expected groups of 5 light values, got {}", values.len())));
        }
        Ok(values
            .chunks_exact(5)
            .map(|c| LightControl { hue: c[0], saturation: c[1], intensity: c[2], azimuth: c[3], elevation: c[4] })
            .collect())
    }
}

pub struct Scene {
    geometry: SceneGeometry,
    triplet: Option<SceneTriplet>,
}

impl Scene {
    pub fn new(seed: u64, size: usize) -> Result<Scene> {
        Ok(Scene { geometry: generate_scene(seed, size, size)?, triplet: None })
    }

    /// Colour-lit, white-lit and ambient renders.
    pub fn relight(&mut self, lights: &[LightControl], shadows: bool) -> Result<Frame> {
        let specs = lights.iter().map(|l| l.to_light()).collect::<Result<Vec<_>>>()?;
        let opts = RenderOptions { shadows, ..RenderOptions::default() };
        let t = render_triplet(&self.geometry, &specs, AMBIENT_LEVEL, opts)?;
        let frame = Frame::row(&[t.color_lit.clone(), t.white_lit.clone(), t.ambient.clone()]);
        self.triplet = Some(t);
        Ok(frame)
    }

    fn lit(&self) -> Result<&ImagePlane> {
        self.triplet.as_ref().map(|t| &t.color_lit).ok_or_else(|| Error::Config("relight the scene first".into()))
    }

    /// `hsv`: hue (at full saturation and value), saturation, value.
    /// `retinex`: luminance and reflectance. `lab`: L*, a*, b*, each
    /// rescaled to [0,1].
    pub fn guidance(&self, mode: &str) -> Result<Frame> {
        let img = self.lit()?;
        let (h, w, _) = img.dims();
        let panels = match mode {
            "hsv" => {
                let g = rgb_to_hsv(img)?;
                let hue = ImagePlane::from_fn(h, w, 3, |y, x, c| {
                    let (r, gg, b) = hsv_to_rgb_pixel(g.hue[y * w + x], 1.0, 1.0);
                    [r, gg, b][c]
                })?;
                let sat = ImagePlane::new(h, w, 1, g.saturation.clone())?;
                vec![hue, sat, g.value_image()]
            }
            "retinex" => {
                let p = decompose(img, DEFAULT_EPS)?;
                vec![p.luminance, p.reflectance.clamp01()]
            }
            "lab" => {
                let lab = rgb_to_lab(img)?;
                let scale = [(0.0, 100.0), (-128.0, 128.0), (-128.0, 128.0)];
                (0..3)
                    .map(|c| {
                        let (lo, hi) = scale[c];
                        ImagePlane::from_fn(h, w, 1, |y, x, _| (lab.get(y, x, c) - lo) / (hi - lo))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::Config(format!("unknown guidance view `{other}` (hsv, retinex, lab)"))),
        };
        Ok(Frame::row(&panels))
    }

    /// Classic wavelet mosaic: the low band recursively split in the top
    /// left, detail bands around it with a fixed display gain.
    pub fn subbands(&self, levels: usize, gain: f64) -> Result<Frame> {
        let img = self.lit()?;
        let (h, w, _) = img.dims();
        if levels == 0 || h % (1 << levels) != 0 || w % (1 << levels) != 0 {
            return Err(Error::Config(format!("{levels} levels do not divide a {h}x{w} image")));
        }
        let mut rgba = vec![0u8; w * h * 4];
        for px in rgba.chunks_exact_mut(4) {
            px[3] = 255;
        }
        let mut ll = img.clone();
        let shift = |b: &ImagePlane| remap(b, |v| 0.5 + gain * v);
        for _ in 0..levels {
            let s = dwt2(&ll)?;
            let (bh, bw) = (s.ll.height(), s.ll.width());
            blit(&mut rgba, w, &shift(&s.lh), bh, 0);
            blit(&mut rgba, w, &shift(&s.hl), 0, bw);
            blit(&mut rgba, w, &shift(&s.hh), bh, bw);
            // Orthonormal Haar doubles the low band's range at each level.
            ll = remap(&s.ll, |v| v / 2.0);
        }
        blit(&mut rgba, w, &ll, 0, 0);
        Ok(Frame { width: w, height: h, rgba })
    }
}

fn remap(img: &ImagePlane, f: impl Fn(f64) -> f64) -> ImagePlane {
    let data = img.data().iter().map(|&v| f(v)).collect();
    ImagePlane::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Studio {
    scene: Scene,
}

#[wasm_bindgen]
impl Studio {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Studio, JsError> {
        Ok(Studio { scene: Scene::new(u64::from(seed), size).map_err(js)? })
    }

    /// `lights` is a flat list of `[hue, saturation, intensity, azimuth,
    /// elevation]` groups.
    pub fn relight(&mut self, lights: &[f64], shadows: bool) -> Result<Frame, JsError> {
        let controls = LightControl::parse_flat(lights).map_err(js)?;
        self.scene.relight(&controls, shadows).map_err(js)
    }

    pub fn guidance(&self, mode: &str) -> Result<Frame, JsError> {
        self.scene.guidance(mode).map_err(js)
    }

    pub fn subbands(&self, levels: usize, gain: f64) -> Result<Frame, JsError> {
        self.scene.subbands(levels, gain).map_err(js)
    }
}
