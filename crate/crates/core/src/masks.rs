//! Region masks built from face segmentation label maps.
//!
//! Label codes: 0 background, 1 skin, 2 left eye, 3 right eye, 4 nose,
//! 5 mouth and lips, 6 brows, 7 hair, 8 ears.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};

pub const NUM_CODES: u8 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Skin = 1,
    LeftEye = 2,
    RightEye = 3,
    Nose = 4,
    Mouth = 5,
    Brows = 6,
    Hair = 7,
    Ears = 8,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Background,
        Region::Skin,
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::Mouth,
        Region::Brows,
        Region::Hair,
        Region::Ears,
    ];

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown region code {code}")))
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::Skin => "skin",
            Region::LeftEye => "left-eye",
            Region::RightEye => "right-eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::Brows => "brows",
            Region::Hair => "hair",
            Region::Ears => "ears",
        }
    }
}

impl FromStr for Region {
    type Err = Error;

    /// Accepts a region name or its numeric code.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code);
        }
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown region `{s}`")))
    }
}

/// Set of region codes as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RegionSet(u16);

impl RegionSet {
    pub const EMPTY: RegionSet = RegionSet(0);

    pub fn of(regions: &[Region]) -> Self {
        Self(regions.iter().fold(0, |acc, r| acc | (1 << r.code())))
    }

    pub fn from_codes(codes: &[u8]) -> Result<Self> {
        let mut set = Self::EMPTY;
        for &c in codes {
            set = set.with(Region::from_code(c)?);
        }
        Ok(set)
    }

    pub fn with(self, r: Region) -> Self {
        Self(self.0 | (1 << r.code()))
    }

    pub fn contains_code(self, code: u8) -> bool {
        code < NUM_CODES && self.0 & (1 << code) != 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn minus(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn intersects(self, other: Self) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn regions(self) -> impl Iterator<Item = Region> {
        Region::ALL
            .into_iter()
            .filter(move |r| self.contains_code(r.code()))
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.regions().map(Region::name).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

impl FromStr for RegionSet {
    type Err = Error;

    /// Comma-separated region names or codes, optionally in braces; `eyes` names both eyes.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim();
        let inner = inner
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .unwrap_or(inner);
        let mut set = Self::EMPTY;
        for item in inner.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            set = match item {
                "eyes" => set.with(Region::LeftEye).with(Region::RightEye),
                other => set.with(other.parse()?),
            };
        }
        Ok(set)
    }
}

/// Regions a preset may anonymize. Hair and background are never included.
pub fn face_regions() -> RegionSet {
    RegionSet::of(&[
        Region::Skin,
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::Mouth,
        Region::Brows,
        Region::Ears,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPreset {
    WholeFace,
    KeepEyes,
    KeepMouth,
    KeepEyesMouth,
    KeepNose,
    KeepNoseMouth,
    KeepEyesNose,
}

impl MaskPreset {
    pub const ALL: [MaskPreset; 7] = [
        MaskPreset::WholeFace,
        MaskPreset::KeepEyes,
        MaskPreset::KeepMouth,
        MaskPreset::KeepEyesMouth,
        MaskPreset::KeepNose,
        MaskPreset::KeepNoseMouth,
        MaskPreset::KeepEyesNose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskPreset::WholeFace => "whole-face",
            MaskPreset::KeepEyes => "keep-eyes",
            MaskPreset::KeepMouth => "keep-mouth",
            MaskPreset::KeepEyesMouth => "keep-eyes-mouth",
            MaskPreset::KeepNose => "keep-nose",
            MaskPreset::KeepNoseMouth => "keep-nose-mouth",
            MaskPreset::KeepEyesNose => "keep-eyes-nose",
        }
    }

    pub fn kept(self) -> RegionSet {
        let eyes = [Region::LeftEye, Region::RightEye];
        match self {
            MaskPreset::WholeFace => RegionSet::EMPTY,
            MaskPreset::KeepEyes => RegionSet::of(&eyes),
            MaskPreset::KeepMouth => RegionSet::of(&[Region::Mouth]),
            MaskPreset::KeepEyesMouth => RegionSet::of(&eyes).with(Region::Mouth),
            MaskPreset::KeepNose => RegionSet::of(&[Region::Nose]),
            MaskPreset::KeepNoseMouth => RegionSet::of(&[Region::Nose, Region::Mouth]),
            MaskPreset::KeepEyesNose => RegionSet::of(&eyes).with(Region::Nose),
        }
    }

    pub fn anonymized(self) -> RegionSet {
        face_regions().minus(self.kept())
    }
}

impl fmt::Display for MaskPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::invalid(format!(
                    "unknown mask preset `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl serde::Serialize for MaskPreset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for MaskPreset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Label grid at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} labels"),
                found: format!("{} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= NUM_CODES) {
            return Err(Error::invalid(format!("unknown region code {bad}")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&c| c == region.code()).count()
    }

    /// Binary image-resolution mask: 1 where the label is in `set`.
    pub fn indicator(&self, set: RegionSet) -> Vec<f32> {
        self.labels
            .iter()
            .map(|&c| if set.contains_code(c) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("label buffer matches dimensions")
    }
}

/// How an RGB or gray segmentation image maps to region codes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PaletteSidecar {
    rgb: BTreeMap<[u8; 3], u8>,
    gray: BTreeMap<u8, u8>,
}

impl PaletteSidecar {
    /// Parses lines of `R,G,B = code` or `V = code`; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `color = code`".into()))?;
            let code: u8 = rhs
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid code `{}`", rhs.trim())))?;
            if code >= NUM_CODES {
                return Err(parse_err(format!("unknown region code {code}")));
            }
            let parts: Vec<&str> = lhs.split(',').map(str::trim).collect();
            let comps: Vec<u8> = parts
                .iter()
                .map(|p| p.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(format!("invalid color `{}`", lhs.trim())))?;
            let dup = match comps.as_slice() {
                [v] => out.gray.insert(*v, code).is_some(),
                [r, g, b] => out.rgb.insert([*r, *g, *b], code).is_some(),
                _ => return Err(parse_err(format!("invalid color `{}`", lhs.trim()))),
            };
            if dup {
                return Err(parse_err(format!("duplicate color `{}`", lhs.trim())));
            }
        }
        Ok(out)
    }

    /// Default RGB palette used when no sidecar is given for a color image.
    pub fn default_palette() -> Self {
        let colors: [[u8; 3]; 9] = [
            [0, 0, 0],
            [204, 0, 0],
            [51, 51, 255],
            [204, 0, 204],
            [76, 153, 0],
            [255, 255, 0],
            [0, 204, 204],
            [0, 0, 204],
            [102, 51, 0],
        ];
        Self {
            rgb: colors
                .iter()
                .enumerate()
                .map(|(code, c)| (*c, code as u8))
                .collect(),
            gray: BTreeMap::new(),
        }
    }

    pub fn color_of(&self, code: u8) -> Option<[u8; 3]> {
        self.rgb.iter().find(|(_, &c)| c == code).map(|(k, _)| *k)
    }
}

/// Decodes a segmentation image. Gray images carry codes directly unless the sidecar
/// maps gray levels; color images are mapped through the sidecar or default palette.
pub fn decode_segmentation(bytes: &[u8], sidecar: Option<&PaletteSidecar>) -> Result<SegmentationMap> {
    let img = image::load_from_memory(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma8(gray) => {
            let map = sidecar.filter(|s| !s.gray.is_empty());
            gray.into_raw()
                .into_iter()
                .map(|v| match map {
                    Some(s) => s
                        .gray
                        .get(&v)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("gray level {v} not in sidecar"))),
                    None => Ok(v),
                })
                .collect::<Result<Vec<u8>>>()?
        }
        other => {
            let default = PaletteSidecar::default_palette();
            let palette = sidecar.filter(|s| !s.rgb.is_empty()).unwrap_or(&default);
            other
                .to_rgb8()
                .pixels()
                .map(|p| {
                    palette.rgb.get(&p.0).copied().ok_or_else(|| {
                        Error::invalid(format!("color {:?} not in segmentation palette", p.0))
                    })
                })
                .collect::<Result<Vec<u8>>>()?
        }
    };
    SegmentationMap::new(w, h, labels)
}

pub fn load_segmentation(path: &Path, sidecar: Option<&Path>) -> Result<SegmentationMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = match sidecar {
        Some(p) => Some(PaletteSidecar::parse(
            &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        )?),
        None => None,
    };
    decode_segmentation(&bytes, side.as_ref())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProvenance {
    pub preset: Option<String>,
    pub anonymized: RegionSet,
    pub kept: RegionSet,
}

/// Soft mask in `[0, 1]` at latent resolution; 1 means "anonymize here".
///
/// Values are snapped to multiples of 2⁻²⁴ on construction, which makes `1 − M`
/// exact in `f32` and complementation an exact involution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
    provenance: MaskProvenance,
    warning: Option<String>,
}

impl RegionMask {
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} mask"),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        let values = values.into_iter().map(snap).collect();
        Ok(Self {
            width,
            height,
            values,
            provenance: MaskProvenance {
                preset: None,
                anonymized: RegionSet::EMPTY,
                kept: RegionSet::EMPTY,
            },
            warning: None,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::from_values(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn provenance(&self) -> &MaskProvenance {
        &self.provenance
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// `1 − M`.
    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| 1.0 - v).collect(),
            provenance: MaskProvenance {
                preset: self.provenance.preset.as_ref().map(|p| format!("complement({p})")),
                anonymized: self.provenance.kept,
                kept: self.provenance.anonymized,
            },
            warning: None,
        }
    }

    /// Area-average downsampling by an integer factor.
    pub fn downsample_to(&self, width: usize, height: usize) -> Result<Self> {
        let values = area_downsample(&self.values, self.width, self.height, width, height)?;
        Ok(Self {
            width,
            height,
            values,
            provenance: self.provenance.clone(),
            warning: self.warning.clone(),
        })
    }

    fn with_provenance(mut self, provenance: MaskProvenance) -> Self {
        self.provenance = provenance;
        self
    }
}

const MASK_GRID: f64 = (1u32 << 24) as f64;

fn snap(v: f32) -> f32 {
    ((v as f64 * MASK_GRID).round() / MASK_GRID) as f32
}

fn area_downsample(
    values: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Result<Vec<f32>> {
    if dst_w == 0 || dst_h == 0 || src_w % dst_w != 0 || src_h % dst_h != 0 || src_w / dst_w != src_h / dst_h {
        return Err(Error::ShapeMismatch {
            expected: format!("an integer multiple of {dst_w}x{dst_h}"),
            found: format!("{src_w}x{src_h}"),
        });
    }
    let f = src_w / dst_w;
    let area = (f * f) as f64;
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for by in 0..dst_h {
        for bx in 0..dst_w {
            let mut acc = 0.0f64;
            for y in by * f..(by + 1) * f {
                for x in bx * f..(bx + 1) * f {
                    acc += values[y * src_w + x] as f64;
                }
            }
            out.push(snap((acc / area) as f32));
        }
    }
    Ok(out)
}

/// 1 on anonymized-region pixels, 0 elsewhere, then area-averaged to latent resolution.
pub fn mask_from_regions(
    seg: &SegmentationMap,
    anonymize: RegionSet,
    keep: RegionSet,
    latent_width: usize,
    latent_height: usize,
) -> Result<RegionMask> {
    if anonymize.intersects(keep) {
        return Err(Error::invalid(format!(
            "region sets overlap: anonymize {anonymize}, keep {keep}"
        )));
    }
    let full = seg.indicator(anonymize);
    let values = area_downsample(&full, seg.width, seg.height, latent_width, latent_height)?;
    let mut mask = RegionMask::from_values(latent_width, latent_height, values)?.with_provenance(
        MaskProvenance {
            preset: None,
            anonymized: anonymize,
            kept: keep,
        },
    );
    if mask.is_all_zero() {
        let msg = format!("empty mask: no pixels labelled {anonymize}");
        log::warn!("{msg}");
        mask.warning = Some(msg);
    }
    Ok(mask)
}

pub fn preset_mask(
    seg: &SegmentationMap,
    preset: MaskPreset,
    latent_width: usize,
    latent_height: usize,
) -> Result<RegionMask> {
    let mut mask = mask_from_regions(
        seg,
        preset.anonymized(),
        preset.kept(),
        latent_width,
        latent_height,
    )?;
    mask.provenance.preset = Some(preset.name().to_string());
    Ok(mask)
}

/// Encodes as an 8-bit single-channel PNG (`round(255·m)`).
pub fn encode_mask_png(mask: &RegionMask) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([(mask.at(x as usize, y as usize) * 255.0).round() as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Decodes an 8-bit single-channel image (`v / 255`). When `expected` is given the
/// image must have that size or an integer multiple of it (area-averaged down).
pub fn decode_mask_png(bytes: &[u8], expected: Option<(usize, usize)>) -> Result<RegionMask> {
    let img = image::load_from_memory(bytes)?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::invalid(format!(
            "mask file must be 8-bit single-channel, found {:?}",
            img.color()
        )));
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let values: Vec<f32> = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    let mask = RegionMask::from_values(w, h, values)?;
    match expected {
        Some((ew, eh)) if (ew, eh) != (w, h) => mask.downsample_to(ew, eh).map_err(|_| {
            Error::ShapeMismatch {
                expected: format!("{ew}x{eh} mask"),
                found: format!("{w}x{h}"),
            }
        }),
        _ => Ok(mask),
    }
}

pub fn save_mask_file(mask: &RegionMask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask_png(mask)?).map_err(|e| Error::io(path, e))
}

pub fn load_mask_file(path: &Path, expected: Option<(usize, usize)>) -> Result<RegionMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_png(&bytes, expected)
}
