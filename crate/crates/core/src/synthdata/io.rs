//! CL3AN-style directory trees: `root/split/{input,white,gt}/scene_sample.png`
//! with an optional `meta/scene_sample.txt` key-value sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use super::{GeneratedSample, LightSpec, SceneTriplet, Split, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::kv::KvMap;

pub const INPUT_DIR: &str = "input";
pub const WHITE_DIR: &str = "white";
pub const GT_DIR: &str = "gt";
pub const META_DIR: &str = "meta";

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads an 8- or 16-bit image as RGB in [0,1].
pub fn read_image(path: &Path) -> Result<ImagePlane> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let deep = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let data: Vec<f64> = if deep {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    ImagePlane::new(h, w, 3, data)
}

/// Writes an RGB image as 8-bit PNG after clamping to [0,1].
pub fn write_image(path: &Path, img: &ImagePlane) -> Result<()> {
    img.require_channels(3, "png output")?;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, img.width() as u32, img.height() as u32, image::ColorType::Rgb8)
        .map_err(|e| image_error(path, e))
}

/// Rounds through 8-bit storage, i.e. what a PNG round trip returns.
pub fn quantize(img: &ImagePlane) -> ImagePlane {
    let data = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
    ImagePlane::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}

pub fn lights_to_kv(lights: &[LightSpec]) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("lights.count", lights.len());
    for (i, l) in lights.iter().enumerate() {
        let d = l.direction;
        kv.set(format!("lights.{i}.direction"), format!("{},{},{}", d[0], d[1], d[2]));
        kv.set(format!("lights.{i}.intensity"), l.intensity);
        kv.set(format!("lights.{i}.hue"), l.hue);
        kv.set(format!("lights.{i}.saturation"), l.saturation);
        kv.set(format!("lights.{i}.kind"), "directional");
    }
    kv
}

pub fn lights_from_kv(kv: &KvMap) -> Result<Vec<LightSpec>> {
    let n: usize = kv.parse_or("lights.count", 0)?;
    (0..n)
        .map(|i| {
            let dir_text = kv.require(&format!("lights.{i}.direction"))?;
            let parts: Vec<f64> = dir_text
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(format!("bad light direction `{dir_text}`")))?;
            if parts.len() != 3 {
                return Err(Error::format(format!("bad light direction `{dir_text}`")));
            }
            LightSpec::new(
                [parts[0], parts[1], parts[2]],
                kv.parse(&format!("lights.{i}.intensity"))?,
                kv.parse(&format!("lights.{i}.hue"))?,
                kv.parse(&format!("lights.{i}.saturation"))?,
            )
        })
        .collect()
}

/// Writes one sample's three PNGs and its sidecar.
pub fn write_sample(root: &Path, sample: &GeneratedSample) -> Result<()> {
    let split_dir = root.join(sample.split.as_str());
    for d in [INPUT_DIR, WHITE_DIR, GT_DIR, META_DIR] {
        fs::create_dir_all(split_dir.join(d))?;
    }
    let t = &sample.triplet;
    let stem = t.id();
    write_image(&split_dir.join(INPUT_DIR).join(format!("{stem}.png")), &t.color_lit)?;
    write_image(&split_dir.join(WHITE_DIR).join(format!("{stem}.png")), &t.white_lit)?;
    write_image(&split_dir.join(GT_DIR).join(format!("{stem}.png")), &t.ambient)?;
    let mut meta = lights_to_kv(&t.lights);
    meta.set("encoding", "linear");
    meta.set("seed", sample.seed);
    meta.set("version", GENERATOR_VERSION);
    meta.set("scene_id", &t.scene_id);
    meta.set("sample_id", &t.sample_id);
    meta.set("ambient_level", sample.ambient_level);
    fs::write(split_dir.join(META_DIR).join(format!("{stem}.txt")), meta.to_text())?;
    Ok(())
}

/// Lazily iterates the triplets of one split in lexicographic id order.
pub struct DatasetIter {
    dir: PathBuf,
    stems: std::vec::IntoIter<String>,
}

impl DatasetIter {
    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.len() == 0
    }

    fn load(&self, stem: &str) -> Result<SceneTriplet> {
        let file = format!("{stem}.png");
        let mut imgs = Vec::with_capacity(3);
        for d in [INPUT_DIR, WHITE_DIR, GT_DIR] {
            let p = self.dir.join(d).join(&file);
            if !p.is_file() {
                return Err(Error::Integrity(format!("sample `{stem}` has no `{d}` counterpart ({})", p.display())));
            }
            imgs.push(read_image(&p)?);
        }
        let ambient = imgs.pop().expect("three images");
        let white_lit = imgs.pop().expect("three images");
        let color_lit = imgs.pop().expect("three images");
        if !color_lit.same_shape(&white_lit) || !color_lit.same_shape(&ambient) {
            return Err(Error::Integrity(format!(
                "sample `{stem}` is not pixel-aligned: input {}x{}, white {}x{}, gt {}x{}",
                color_lit.height(),
                color_lit.width(),
                white_lit.height(),
                white_lit.width(),
                ambient.height(),
                ambient.width()
            )));
        }
        let meta_path = self.dir.join(META_DIR).join(format!("{stem}.txt"));
        let lights = if meta_path.is_file() {
            lights_from_kv(&KvMap::parse_text(&fs::read_to_string(&meta_path)?)?)?
        } else {
            Vec::new()
        };
        let (scene_id, sample_id) = match stem.rsplit_once('_') {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (stem.to_string(), String::new()),
        };
        Ok(SceneTriplet { color_lit, white_lit, ambient, lights, scene_id, sample_id })
    }
}

impl Iterator for DatasetIter {
    type Item = Result<SceneTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        let stem = self.stems.next()?;
        Some(self.load(&stem))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.stems.len(), Some(self.stems.len()))
    }
}

/// Opens `root/<split>`. A missing split directory is an integrity error;
/// an empty one yields nothing.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIter> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::Integrity(format!("split directory {} does not exist", dir.display())));
    }
    let mut stems = Vec::new();
    let input = dir.join(INPUT_DIR);
    if input.is_dir() {
        for entry in fs::read_dir(&input)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                    stems.push(s.to_string());
                }
            }
        }
    }
    stems.sort();
    Ok(DatasetIter { dir, stems: stems.into_iter() })
}

/// Loads a whole split into memory.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<SceneTriplet>> {
    load_dataset(root, split)?.collect()
}
