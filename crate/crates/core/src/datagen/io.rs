use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::{Episode, ImageDims};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "episodes.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub image_dims: ImageDims,
    pub episode_count: usize,
    pub frames_per_episode: usize,
    pub input_dim: usize,
    pub generator_config: serde_json::Value,
    pub format_version: u32,
}

impl DatasetManifest {
    fn floats_per_point(&self) -> usize {
        self.input_dim + self.image_dims.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Build a manifest from the episodes; an empty list needs explicit shape info.
    pub fn new(
        name: &str,
        episodes: Vec<Episode>,
        shape: Option<(ImageDims, usize, usize)>,
        generator_config: serde_json::Value,
    ) -> Result<Self> {
        let (image_dims, frames, input_dim) = match (episodes.first(), shape) {
            (Some(e), _) => (e.dims, e.points(), e.input_dim),
            (None, Some(s)) => s,
            (None, None) => (ImageDims::new(1, 1, 1), 0, 1),
        };
        for (i, e) in episodes.iter().enumerate() {
            if e.dims != image_dims || e.points() != frames || e.input_dim != input_dim {
                return Err(Error::Shape(format!("episode {i} differs in dims from episode 0")));
            }
        }
        let manifest = DatasetManifest {
            name: name.to_owned(),
            image_dims,
            episode_count: episodes.len(),
            frames_per_episode: frames,
            input_dim,
            generator_config,
            format_version: FORMAT_VERSION,
        };
        Ok(Self { manifest, episodes })
    }

    pub fn total_images(&self) -> usize {
        self.manifest.episode_count * self.manifest.frames_per_episode
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let m = &dataset.manifest;
    if m.episode_count != dataset.episodes.len() {
        return Err(Error::Shape(format!("manifest says {} episodes, have {}", m.episode_count, dataset.episodes.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload = dir.join(PAYLOAD_FILE);
    let file = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
    let mut out = BufWriter::new(file);
    for (i, e) in dataset.episodes.iter().enumerate() {
        if e.dims != m.image_dims || e.points() != m.frames_per_episode || e.input_dim != m.input_dim {
            return Err(Error::Shape(format!("episode {i} does not match the manifest dims")));
        }
        for n in 0..e.points() {
            for v in e.input(n).iter().chain(e.image(n)) {
                out.write_all(&v.to_le_bytes()).map_err(|err| Error::io(&payload, err))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(&payload, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptDataset { path: path.clone(), reason: format!("bad manifest: {e}") })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::CorruptDataset { path, reason: format!("unsupported format version {}", m.format_version) });
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |reason: String| Error::CorruptDataset { path: path.clone(), reason };
    if manifest.episode_count > 0 && (manifest.input_dim == 0 || manifest.image_dims.is_empty() || manifest.frames_per_episode == 0) {
        return Err(corrupt("manifest has zero-sized points".into()));
    }
    let per_episode = manifest.frames_per_episode * manifest.floats_per_point();
    let expected = manifest.episode_count * per_episode * 4;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, manifest implies {expected} ({} episodes)",
            bytes.len(),
            manifest.episode_count
        )));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let (din, plen) = (manifest.input_dim, manifest.image_dims.len());
    let episodes = floats
        .chunks(per_episode.max(1))
        .take(manifest.episode_count)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(manifest.frames_per_episode * din);
            let mut images = Vec::with_capacity(manifest.frames_per_episode * plen);
            for point in chunk.chunks(din + plen) {
                inputs.extend_from_slice(&point[..din]);
                images.extend_from_slice(&point[din..]);
            }
            Episode::new(din, manifest.image_dims, inputs, images)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, episodes })
}

/// 8-bit PNG of a `[C, H, W]` float image in [0, 1]; C is 1 or 3.
pub fn write_png(path: &Path, dims: ImageDims, pixels: &[f32]) -> Result<()> {
    let (c, h, w) = (dims.channels, dims.height, dims.width);
    if pixels.len() != dims.len() || !(c == 1 || c == 3) {
        return Err(Error::Shape(format!("cannot write {} floats as a {c}x{h}x{w} PNG", pixels.len())));
    }
    let plane = h * w;
    let mut buf = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            buf.push((pixels[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&buf).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// One PNG per frame, `ep{e}_pt{n}.png`.
pub fn export_png(episodes: &[Episode], dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for (e, ep) in episodes.iter().enumerate() {
        for n in 0..ep.points() {
            write_png(&dir.join(format!("ep{e}_pt{n}.png")), ep.dims, ep.image(n))?;
            count += 1;
        }
    }
    Ok(count)
}
