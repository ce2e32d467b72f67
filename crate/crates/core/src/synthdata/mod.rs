//! Procedural cluttered scenes rendered under coloured, white and ambient
//! lighting.
//!
//! A scene is a height field over a textured ground plane with dome and box
//! shaped objects. Direct lights are Lambertian with hard shadows found by
//! marching the height field; the ambient reference is the albedo scaled by
//! a uniform level and is shadow-free by construction.

#[cfg(feature = "io")]
pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::hsv_to_rgb_pixel;
use crate::error::{Error, Result};
use crate::image::ImagePlane;

pub const GENERATOR_VERSION: &str = "rln2-synth-1";
pub const MIN_RESOLUTION: usize = 32;
pub const ALBEDO_RANGE: (f64, f64) = (0.05, 0.95);
pub const INTENSITY_RANGE: (f64, f64) = (0.3, 1.0);
pub const MAX_LIGHTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LightKind {
    Directional,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightSpec {
    /// Unit vector towards the light; x right, y down, z out of the image.
    pub direction: [f64; 3],
    pub intensity: f64,
    pub hue: f64,
    pub saturation: f64,
    pub kind: LightKind,
}

impl LightSpec {
    /// Normalizes `direction` and checks the ranges.
    pub fn new(direction: [f64; 3], intensity: f64, hue: f64, saturation: f64) -> Result<Self> {
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) || direction[2] <= 0.0 {
            return Err(Error::Range(format!("light direction {direction:?} must point into the upper hemisphere")));
        }
        if !(INTENSITY_RANGE.0..=INTENSITY_RANGE.1).contains(&intensity) {
            return Err(Error::Range(format!("light intensity {intensity} outside [0.3, 1]")));
        }
        if !(0.0..360.0).contains(&hue) || !(0.0..=1.0).contains(&saturation) {
            return Err(Error::Range(format!("light colour ({hue}, {saturation}) out of range")));
        }
        Ok(Self { direction: direction.map(|v| v / n), intensity, hue, saturation, kind: LightKind::Directional })
    }

    /// Elevation in [25°, 75°], any azimuth, intensity in the allowed range,
    /// any hue and a saturation of at least 0.4.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let elev = rng.random_range(25f64..75.0).to_radians();
        let az = rng.random_range(0f64..360.0).to_radians();
        let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
        Self::new(
            dir,
            rng.random_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1),
            rng.random_range(0f64..360.0),
            rng.random_range(0.4f64..=1.0),
        )
        .expect("sampled within range")
    }

    pub fn overhead_white(intensity: f64) -> Self {
        Self::new([0.0, 0.0, 1.0], intensity, 0.0, 0.0).expect("valid light")
    }

    /// The same light with its colour removed.
    pub fn whitened(&self) -> Self {
        Self { saturation: 0.0, ..*self }
    }

    pub fn rgb(&self) -> [f64; 3] {
        let (r, g, b) = hsv_to_rgb_pixel(self.hue, self.saturation, self.intensity);
        [r, g, b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    /// Surface elevation in pixel units, row-major.
    pub elevation: Vec<f64>,
    pub albedo: ImagePlane,
    pub normals: Vec<[f64; 3]>,
    pub roughness: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in [0,1] on a lattice with the given cell size.
fn value_noise<R: Rng>(rng: &mut R, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn normals_from_elevation(e: &[f64], h: usize, w: usize) -> Vec<[f64; 3]> {
    let at = |y: usize, x: usize| e[y * w + x];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = (at(y, x1) - at(y, x0)) / (x1 - x0).max(1) as f64;
            let gy = (at(y1, x) - at(y0, x)) / (y1 - y0).max(1) as f64;
            let n = (gx * gx + gy * gy + 1.0).sqrt();
            out.push([-gx / n, -gy / n, 1.0 / n]);
        }
    }
    out
}

impl SceneGeometry {
    /// A flat plane of uniform albedo.
    pub fn flat(height: usize, width: usize, albedo: [f64; 3]) -> Result<Self> {
        let albedo = ImagePlane::from_fn(height, width, 3, |_, _, c| albedo[c])?;
        Ok(Self {
            height,
            width,
            elevation: vec![0.0; height * width],
            albedo,
            normals: vec![[0.0, 0.0, 1.0]; height * width],
            roughness: vec![0.5; height * width],
        })
    }

    /// Builds a geometry from an elevation map and albedo, deriving normals.
    pub fn from_elevation(elevation: Vec<f64>, albedo: ImagePlane, roughness: Vec<f64>) -> Result<Self> {
        let (h, w, c) = albedo.dims();
        if c != 3 || elevation.len() != h * w || roughness.len() != h * w {
            return Err(Error::shape("elevation, albedo and roughness must share one H×W grid"));
        }
        let normals = normals_from_elevation(&elevation, h, w);
        Ok(Self { height: h, width: w, elevation, albedo, normals, roughness })
    }

    fn elevation_at(&self, y: f64, x: f64) -> f64 {
        let xi = (x.round() as isize).clamp(0, self.width as isize - 1) as usize;
        let yi = (y.round() as isize).clamp(0, self.height as isize - 1) as usize;
        self.elevation[yi * self.width + xi]
    }

    /// Hard shadow test by marching the height field towards the light.
    pub fn occluded(&self, y: usize, x: usize, dir: [f64; 3]) -> bool {
        self.occluded_below(y, x, dir, self.max_elevation())
    }

    pub fn max_elevation(&self) -> f64 {
        self.elevation.iter().copied().fold(0.0, f64::max)
    }

    /// The march stops once the ray rises above `top`.
    fn occluded_below(&self, y: usize, x: usize, dir: [f64; 3], top: f64) -> bool {
        let horiz = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        if horiz < 1e-9 {
            return false;
        }
        let (sx, sy, sz) = (dir[0] / horiz, dir[1] / horiz, dir[2] / horiz);
        let h0 = self.elevation[y * self.width + x];
        let mut t = 1.0;
        loop {
            let (px, py, pz) = (x as f64 + sx * t, y as f64 + sy * t, h0 + sz * t);
            if pz > top || px < -0.5 || py < -0.5 || px > self.width as f64 - 0.5 || py > self.height as f64 - 0.5 {
                return false;
            }
            if self.elevation_at(py, px) > pz + 0.5 {
                return true;
            }
            t += 0.5;
        }
    }
}

/// Procedural cluttered scene, deterministic in `seed`.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<SceneGeometry> {
    if height < MIN_RESOLUTION || width < MIN_RESOLUTION {
        return Err(Error::config(format!("scene resolution must be at least 32x32, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height, width);
    let scale = h.min(w) as f64;
    let base_hue = rng.random_range(0f64..360.0);
    let ground = hsv_to_rgb_pixel(base_hue, rng.random_range(0.05..0.3), rng.random_range(0.45..0.8));
    let coarse = value_noise(&mut rng, h, w, scale / 4.0);
    let fine = value_noise(&mut rng, h, w, 3.0);
    let mut elevation = vec![0.0; h * w];
    let mut albedo: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            let m = 0.75 + 0.35 * coarse[i];
            [ground.0 * m, ground.1 * m, ground.2 * m]
        })
        .collect();
    let mut roughness = vec![0.8; h * w];
    let objects = rng.random_range(4..=9);
    for _ in 0..objects {
        let hue = (base_hue + rng.random_range(-35f64..35.0)).rem_euclid(360.0);
        let col = hsv_to_rgb_pixel(hue, rng.random_range(0.1..0.5), rng.random_range(0.35..0.9));
        let rough = rng.random_range(0.15..0.9);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.06..0.2) * scale;
        let ry = rng.random_range(0.06..0.2) * scale;
        let peak = rng.random_range(0.04..0.15) * scale;
        let is_box = rng.random_bool(0.4);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let z = if is_box {
                    if dx.abs() <= 1.0 && dy.abs() <= 1.0 {
                        peak
                    } else {
                        continue;
                    }
                } else {
                    let r2 = dx * dx + dy * dy;
                    if r2 >= 1.0 {
                        continue;
                    }
                    peak * (1.0 - r2).sqrt()
                };
                let i = y * w + x;
                if z > elevation[i] {
                    elevation[i] = z;
                    albedo[i] = [col.0, col.1, col.2];
                    roughness[i] = rough;
                }
            }
        }
    }
    let (lo, hi) = ALBEDO_RANGE;
    let data = albedo
        .iter()
        .zip(&fine)
        .flat_map(|(a, f)| {
            let m = 0.9 + 0.2 * f;
            a.map(|v| (v * m).clamp(lo, hi))
        })
        .collect();
    SceneGeometry::from_elevation(elevation, ImagePlane::new(h, w, 3, data)?, roughness)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub shadows: bool,
    /// Adds a Blinn-Phong highlight of the light colour (view along +z).
    pub specular: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { shadows: true, specular: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTriplet {
    pub color_lit: ImagePlane,
    pub white_lit: ImagePlane,
    pub ambient: ImagePlane,
    pub lights: Vec<LightSpec>,
    pub scene_id: String,
    pub sample_id: String,
}

impl SceneTriplet {
    /// File stem `scene_sample`.
    pub fn id(&self) -> String {
        format!("{}_{}", self.scene_id, self.sample_id)
    }
}

fn shade(geom: &SceneGeometry, lights: &[LightSpec], opts: RenderOptions) -> ImagePlane {
    let (h, w) = (geom.height, geom.width);
    let mut data = vec![0.0; h * w * 3];
    let top = geom.max_elevation();
    for light in lights {
        let rgb = light.rgb();
        let d = light.direction;
        let half = {
            let v = [d[0], d[1], d[2] + 1.0];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|c| c / n)
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let n = geom.normals[i];
                let cos = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
                if cos <= 0.0 || (opts.shadows && geom.occluded_below(y, x, d, top)) {
                    continue;
                }
                let a = geom.albedo.pixel(y, x);
                let spec = if opts.specular {
                    let r = geom.roughness[i];
                    let nh = (n[0] * half[0] + n[1] * half[1] + n[2] * half[2]).max(0.0);
                    0.3 * (1.0 - r) * nh.powf(2.0 / (r * r).max(1e-3))
                } else {
                    0.0
                };
                for c in 0..3 {
                    data[i * 3 + c] += rgb[c] * (a[c] * cos + spec);
                }
            }
        }
    }
    ImagePlane::new(h, w, 3, data).expect("finite shading").clamp01()
}

/// Renders the coloured, white-aligned and ambient images of one lighting
/// sample.
pub fn render_triplet(
    geom: &SceneGeometry,
    lights: &[LightSpec],
    ambient_level: f64,
    opts: RenderOptions,
) -> Result<SceneTriplet> {
    if lights.is_empty() || lights.len() > MAX_LIGHTS {
        return Err(Error::config(format!("a sample needs 1 to 3 lights, got {}", lights.len())));
    }
    if !(0.0..=1.0).contains(&ambient_level) {
        return Err(Error::Range(format!("ambient level {ambient_level} outside [0,1]")));
    }
    let color_lit = shade(geom, lights, opts);
    let white: Vec<LightSpec> = lights.iter().map(LightSpec::whitened).collect();
    let white_lit = shade(geom, &white, opts);
    let ambient =
        ImagePlane::new(geom.height, geom.width, 3, geom.albedo.data().iter().map(|a| a * ambient_level).collect())?
            .clamp01();
    Ok(SceneTriplet {
        color_lit,
        white_lit,
        ambient,
        lights: lights.to_vec(),
        scene_id: String::new(),
        sample_id: String::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}' (train, val, test)"))),
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Number of scenes; splits are assigned per scene.
    pub scenes: usize,
    pub samples_per_scene: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Exact number of lights in every sample.
    pub lights_per_scene: usize,
    pub ambient_level: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub options: RenderOptions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenes: 20,
            samples_per_scene: 1,
            seed: 0,
            height: 64,
            width: 64,
            lights_per_scene: 2,
            ambient_level: 0.8,
            train_ratio: 0.8,
            val_ratio: 0.1,
            options: RenderOptions::default(),
        }
    }
}

/// One rendered sample together with its split and generation seed.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub split: Split,
    pub seed: u64,
    pub ambient_level: f64,
    pub triplet: SceneTriplet,
}

impl DatasetSpec {
    pub fn to_kv(&self) -> crate::kv::KvMap {
        let mut kv = crate::kv::KvMap::new();
        kv.set("scenes", self.scenes);
        kv.set("samples_per_scene", self.samples_per_scene);
        kv.set("seed", self.seed);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("lights_per_scene", self.lights_per_scene);
        kv.set("ambient_level", self.ambient_level);
        kv.set("train_ratio", self.train_ratio);
        kv.set("val_ratio", self.val_ratio);
        kv.set("shadows", self.options.shadows);
        kv.set("specular", self.options.specular);
        kv
    }

    /// Absent keys keep their defaults.
    pub fn from_kv(kv: &crate::kv::KvMap) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            scenes: kv.parse_or("scenes", d.scenes)?,
            samples_per_scene: kv.parse_or("samples_per_scene", d.samples_per_scene)?,
            seed: kv.parse_or("seed", d.seed)?,
            height: kv.parse_or("height", d.height)?,
            width: kv.parse_or("width", d.width)?,
            lights_per_scene: kv.parse_or("lights_per_scene", d.lights_per_scene)?,
            ambient_level: kv.parse_or("ambient_level", d.ambient_level)?,
            train_ratio: kv.parse_or("train_ratio", d.train_ratio)?,
            val_ratio: kv.parse_or("val_ratio", d.val_ratio)?,
            options: RenderOptions {
                shadows: kv.parse_or("shadows", d.options.shadows)?,
                specular: kv.parse_or("specular", d.options.specular)?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.samples_per_scene == 0 {
            return Err(Error::config("dataset needs at least one scene and one sample per scene"));
        }
        if !(1..=MAX_LIGHTS).contains(&self.lights_per_scene) {
            return Err(Error::config(format!("lights_per_scene must be 1..=3, got {}", self.lights_per_scene)));
        }
        if !(self.train_ratio >= 0.0 && self.val_ratio >= 0.0 && self.train_ratio + self.val_ratio <= 1.0) {
            return Err(Error::config("split ratios must be non-negative and sum to at most 1"));
        }
        if self.height < MIN_RESOLUTION || self.width < MIN_RESOLUTION {
            return Err(Error::config(format!("resolution must be at least {MIN_RESOLUTION}")));
        }
        Ok(())
    }

    /// Scene counts per split: train and val are rounded, test takes the rest.
    pub fn split_counts(&self) -> [usize; 3] {
        let train = (self.scenes as f64 * self.train_ratio).round() as usize;
        let val = ((self.scenes as f64 * self.val_ratio).round() as usize).min(self.scenes - train.min(self.scenes));
        let train = train.min(self.scenes);
        [train, val, self.scenes - train - val]
    }

    /// Split of every scene index, decided by a seeded shuffle.
    pub fn scene_splits(&self) -> Vec<Split> {
        let mut order: Vec<usize> = (0..self.scenes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5bd1_e995);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let [tr, va, _] = self.split_counts();
        let mut splits = vec![Split::Test; self.scenes];
        for (rank, &scene) in order.iter().enumerate() {
            splits[scene] = if rank < tr {
                Split::Train
            } else if rank < tr + va {
                Split::Val
            } else {
                Split::Test
            };
        }
        splits
    }

    fn scene_seed(&self, scene: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(scene as u64 + 1);
        rng.random()
    }

    /// Renders all samples of one scene.
    pub fn render_scene(&self, scene: usize, split: Split) -> Result<Vec<GeneratedSample>> {
        let seed = self.scene_seed(scene);
        let geom = generate_scene(seed, self.height, self.width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        (0..self.samples_per_scene)
            .map(|s| {
                let lights: Vec<LightSpec> = (0..self.lights_per_scene).map(|_| LightSpec::random(&mut rng)).collect();
                let mut t = render_triplet(&geom, &lights, self.ambient_level, self.options)?;
                t.scene_id = format!("s{scene:04}");
                t.sample_id = format!("{s:02}");
                Ok(GeneratedSample { split, seed, ambient_level: self.ambient_level, triplet: t })
            })
            .collect()
    }

    /// Renders the whole dataset in memory, parallel over scenes.
    pub fn generate(&self) -> Result<Vec<GeneratedSample>> {
        self.validate()?;
        let splits = self.scene_splits();
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(self.scenes);
        let mut per_scene: Vec<Option<Result<Vec<GeneratedSample>>>> = (0..self.scenes).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunks: Vec<_> = per_scene.chunks_mut(self.scenes.div_ceil(threads)).collect();
            let mut start = 0;
            for chunk in chunks {
                let first = start;
                start += chunk.len();
                let splits = &splits;
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(self.render_scene(first + j, splits[first + j]));
                    }
                });
            }
        });
        let mut out = Vec::new();
        for r in per_scene {
            out.extend(r.expect("every scene rendered")?);
        }
        Ok(out)
    }
}
