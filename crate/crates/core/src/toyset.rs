//! Synthetic toy faces drawn on the toy parser's layout, one identity per image.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::backbones::toy::layout;
use crate::backbones::toy::layout_label;
use crate::error::{Error, Result};
use crate::masks::Region;
use crate::noise::NoiseSource;

/// Side length of the bundled toy images.
pub const TOY_FACE_SIZE: u32 = 64;

/// Named image in a dataset; the name identifies the source.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetImage {
    pub id: String,
    pub image: RgbImage,
}

struct Palette {
    colors: [[f64; 3]; 9],
    iris: [f64; 3],
    iris_offset: (f64, f64),
    texture: [(f64, f64, f64, f64); 2],
}

fn palette(noise: &NoiseSource, index: u64) -> Palette {
    let u = noise.uniform_vec(index, 48, 0.0, 1.0);
    let mut k = 0;
    let mut next = || {
        k += 1;
        u[k - 1]
    };
    let mut color = |lo: f64, hi: f64| [0; 3].map(|_: u8| lo + (hi - lo) * next());
    let skin = color(90.0, 235.0);
    let hair = color(10.0, 200.0);
    let background = color(20.0, 250.0);
    let brows = color(10.0, 120.0);
    let lips = color(90.0, 220.0);
    let iris = color(20.0, 160.0);
    let shade = |c: [f64; 3], f: f64| c.map(|v| v * f);
    let mut colors = [[0.0; 3]; 9];
    colors[Region::Background.code() as usize] = background;
    colors[Region::Skin.code() as usize] = skin;
    colors[Region::LeftEye.code() as usize] = [235.0, 235.0, 230.0];
    colors[Region::RightEye.code() as usize] = [235.0, 235.0, 230.0];
    colors[Region::Nose.code() as usize] = shade(skin, 0.85);
    colors[Region::Mouth.code() as usize] = lips;
    colors[Region::Brows.code() as usize] = brows;
    colors[Region::Hair.code() as usize] = hair;
    colors[Region::Ears.code() as usize] = shade(skin, 0.93);
    let iris_offset = ((next() - 0.5) * 0.5, (next() - 0.5) * 0.5);
    let mut wave = || (6.0 + 14.0 * next(), 2.0 + 6.0 * next(), 2.0 + 6.0 * next(), std::f64::consts::TAU * next());
    let texture = [wave(), wave()];
    Palette {
        colors,
        iris,
        iris_offset,
        texture,
    }
}

/// Draws toy face `index` of the family generated from `seed`.
pub fn toy_face(seed: u64, index: usize, size: u32) -> RgbImage {
    let p = palette(&NoiseSource::new("toy-faces", seed), index as u64);
    let n = size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let u = (x as f64 + 0.5) / n;
        let v = (y as f64 + 0.5) / n;
        let region = layout_label(u, v);
        let mut c = p.colors[region.code() as usize];
        if matches!(region, Region::LeftEye | Region::RightEye) {
            let (eu, ev) = layout::EYES[(region == Region::RightEye) as usize];
            let r = layout::EYE_RADIUS;
            let iu = eu + p.iris_offset.0 * r;
            let iv = ev + p.iris_offset.1 * r;
            if ((u - iu) / (0.55 * r)).powi(2) + ((v - iv) / (0.55 * r)).powi(2) <= 1.0 {
                c = p.iris;
            }
        }
        if matches!(region, Region::Skin | Region::Hair | Region::Background) {
            let t: f64 = p
                .texture
                .iter()
                .map(|&(amp, fu, fv, phase)| amp * (std::f64::consts::TAU * (fu * u + fv * v) + phase).sin())
                .sum();
            c = c.map(|ch| ch + t);
        }
        Rgb(c.map(|ch| ch.round().clamp(0.0, 255.0) as u8))
    })
}

/// `count` toy faces named `face_00`, `face_01`, ...
pub fn toy_face_set(count: usize, seed: u64, size: u32) -> Vec<DatasetImage> {
    (0..count)
        .map(|i| DatasetImage {
            id: format!("face_{i:02}"),
            image: toy_face(seed, i, size),
        })
        .collect()
}

/// Writes each image as `<dir>/<id>.png`.
pub fn save_dataset(images: &[DatasetImage], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .map(|d| {
            let path = dir.join(format!("{}.png", d.id));
            d.image.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `*.png` in a directory, sorted by file name; ids are file stems.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetImage>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let image = load_rgb(&p)?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(DatasetImage { id, image })
        })
        .collect()
}

/// Decodes an image file into 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes)
}

/// Decodes PNG bytes; only 8-bit grayscale, RGB and RGBA inputs are accepted.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    use image::DynamicImage::*;
    match img {
        ImageRgb8(i) => Ok(i),
        ImageRgba8(_) | ImageLuma8(_) | ImageLumaA8(_) => Ok(img.to_rgb8()),
        _ => Err(Error::Image("expected an 8-bit image".into())),
    }
}
