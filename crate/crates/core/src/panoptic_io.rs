//! COCO panoptic archives: id-encoded RGB PNGs plus a JSON annotation file.
//!
//! A pixel `(r, g, b)` carries segment id `r + 256 g + 256² b`; void is
//! black. PNGs are written with fixed filter and compression settings, so
//! equal maps always produce equal bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{category_table, Category, CategoryTable, PanopticMap, Segment};

/// Ids must fit in three bytes.
pub const MAX_ID: u32 = (1 << 24) - 1;

pub fn id_to_rgb(id: u32) -> [u8; 3] {
    [id as u8, (id >> 8) as u8, (id >> 16) as u8]
}

pub fn rgb_to_id(rgb: [u8; 3]) -> u32 {
    u32::from(rgb[0]) | u32::from(rgb[1]) << 8 | u32::from(rgb[2]) << 16
}

/// Encodes an 8-bit RGB raster as PNG.
pub fn write_rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || rgb.len() != width * height * 3 {
        return Err(Error::shape("write_rgb_png", format!("{width}x{height}x3 bytes"), rgb.len()));
    }
    let w = u32::try_from(width).map_err(|_| Error::invalid("write_rgb_png", "width exceeds u32"))?;
    let h = u32::try_from(height).map_err(|_| Error::invalid("write_rgb_png", "height exceeds u32"))?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Default);
        enc.set_filter(png::FilterType::Sub);
        enc.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB or RGBA PNG into `(width, height, rgb)`.
pub fn read_rgb_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Schema(format!("panoptic PNG must be 8-bit, got {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Schema(format!("panoptic PNG must be RGB, got {other:?}"))),
    };
    let rgb = buf[..info.buffer_size()].chunks_exact(channels).flat_map(|px| [px[0], px[1], px[2]]).collect();
    Ok((w, h, rgb))
}

/// PNG bytes for the map's id raster.
pub fn encode_png(map: &PanopticMap) -> Result<Vec<u8>> {
    if map.ids.len() != map.width * map.height {
        return Err(Error::shape("encode_png", format!("{}x{} raster", map.width, map.height), map.ids.len()));
    }
    if let Some(&id) = map.ids.iter().find(|&&id| id > MAX_ID) {
        return Err(Error::invalid("encode_png", format!("segment id {id} does not fit in 24 bits")));
    }
    let rgb: Vec<u8> = map.ids.iter().flat_map(|&id| id_to_rgb(id)).collect();
    write_rgb_png(map.width, map.height, &rgb)
}

/// Inverse of [`encode_png`]. Every raster id must be listed in `segments`;
/// listed non-zero areas must match the raster, zero areas are filled in.
pub fn decode_png(bytes: &[u8], segments: &[Segment]) -> Result<PanopticMap> {
    let (width, height, rgb) = read_rgb_png(bytes)?;
    let ids: Vec<u32> = rgb.chunks_exact(3).map(|p| rgb_to_id([p[0], p[1], p[2]])).collect();
    let mut map = PanopticMap { width, height, ids, segments: segments.to_vec() };
    let counts = map.id_counts();
    for s in &mut map.segments {
        if s.area == 0 {
            s.area = counts.get(&s.id).copied().unwrap_or(0);
        }
    }
    map.validate()?;
    Ok(map)
}

/// Image key; COCO uses integers, Cityscapes conversions use strings.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Int(u64),
    Str(String),
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Int(n) => write!(f, "{n}"),
            ImageId::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: ImageId,
    pub file_name: String,
    pub segments_info: Vec<Segment>,
}

/// The annotation JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveJson {
    #[serde(default)]
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

/// One decoded image of an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveItem {
    pub image_id: ImageId,
    pub file_name: String,
    pub map: PanopticMap,
}

/// Annotation file loaded eagerly, PNGs decoded on demand.
#[derive(Clone, Debug)]
pub struct PanopticArchive {
    pub categories: CategoryTable,
    annotations: Vec<Annotation>,
    png_dir: PathBuf,
}

pub fn load_archive(json_path: impl AsRef<Path>, png_dir: impl AsRef<Path>) -> Result<PanopticArchive> {
    let json_path = json_path.as_ref();
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    // well-formed JSON of the wrong structure is a schema problem
    let json: ArchiveJson = serde_json::from_str(&text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => Error::Schema(format!("{}: {e}", json_path.display())),
        _ => Error::Format { path: json_path.to_path_buf(), reason: e.to_string() },
    })?;
    PanopticArchive::new(json, png_dir.as_ref())
}

impl PanopticArchive {
    pub fn new(json: ArchiveJson, png_dir: &Path) -> Result<Self> {
        let categories = category_table(&json.categories)?;
        let mut annotations = json.annotations;
        annotations.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = annotations.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Schema(format!("duplicate annotation for image {}", w[0].image_id)));
        }
        let unknown: Vec<String> = annotations
            .iter()
            .flat_map(|a| a.segments_info.iter().map(move |s| (a, s)))
            .filter(|(_, s)| !categories.contains_key(&s.category_id))
            .map(|(a, s)| format!("image {} segment {} category {}", a.image_id, s.id, s.category_id))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Schema(format!("unknown categories: {}", unknown.join("; "))));
        }
        Ok(Self { categories, annotations, png_dir: png_dir.to_path_buf() })
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Annotations in ascending image id order.
    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &ImageId> {
        self.annotations.iter().map(|a| &a.image_id)
    }

    /// Reads and decodes the `index`-th image in image id order.
    pub fn item(&self, index: usize) -> Result<ArchiveItem> {
        let a = &self.annotations[index];
        let path = self.png_dir.join(&a.file_name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut map = decode_png(&bytes, &a.segments_info).map_err(|e| match e {
            Error::Schema(reason) => Error::Schema(format!("{}: {reason}", path.display())),
            Error::PngDecode(err) => Error::Format { path: path.clone(), reason: err.to_string() },
            other => other,
        })?;
        map.resolve_categories(&self.categories)?;
        Ok(ArchiveItem { image_id: a.image_id.clone(), file_name: a.file_name.clone(), map })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<ArchiveItem>> + '_ {
        (0..self.len()).map(|i| self.item(i))
    }
}

/// Writes each map as `<png_dir>/<file_name>` and the annotation file at
/// `json_path`. Segment areas are recomputed from the rasters.
pub fn write_archive(
    json_path: impl AsRef<Path>,
    png_dir: impl AsRef<Path>,
    categories: &[Category],
    items: &[ArchiveItem],
) -> Result<()> {
    let (json_path, png_dir) = (json_path.as_ref(), png_dir.as_ref());
    category_table(categories)?;
    let mut seen = HashSet::new();
    fs::create_dir_all(png_dir).map_err(|e| Error::io(png_dir, e))?;
    let mut json = ArchiveJson {
        images: Vec::with_capacity(items.len()),
        annotations: Vec::with_capacity(items.len()),
        categories: categories.to_vec(),
    };
    for item in items {
        if !seen.insert(&item.image_id) {
            return Err(Error::Schema(format!("duplicate image id {}", item.image_id)));
        }
        let counts: BTreeMap<u32, u64> = item.map.id_counts();
        let mut segments = item.map.segments.clone();
        for s in &mut segments {
            s.area = counts.get(&s.id).copied().unwrap_or(0);
        }
        let map = PanopticMap { segments: segments.clone(), ..item.map.clone() };
        map.validate()?;
        let path = png_dir.join(&item.file_name);
        fs::write(&path, encode_png(&map)?).map_err(|e| Error::io(&path, e))?;
        json.images.push(ImageInfo {
            id: item.image_id.clone(),
            file_name: item.file_name.clone(),
            width: map.width,
            height: map.height,
        });
        json.annotations.push(Annotation {
            image_id: item.image_id.clone(),
            file_name: item.file_name.clone(),
            segments_info: segments,
        });
    }
    if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&json)?;
    fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_encoding() {
        assert_eq!(id_to_rgb(1), [1, 0, 0]);
        assert_eq!(id_to_rgb(256), [0, 1, 0]);
        assert_eq!(id_to_rgb(65536), [0, 0, 1]);
        assert_eq!(rgb_to_id([255, 255, 255]), MAX_ID);
    }

    #[test]
    fn overflow_is_rejected() {
        let mut m = PanopticMap::void(1, 1);
        m.ids[0] = MAX_ID + 1;
        assert!(encode_png(&m).is_err());
    }

    #[test]
    fn identical_maps_give_identical_bytes() {
        let mut m = PanopticMap::void(3, 2);
        m.ids = vec![0, 7, 7, 300, 300, 300];
        assert_eq!(encode_png(&m).unwrap(), encode_png(&m.clone()).unwrap());
    }
}
