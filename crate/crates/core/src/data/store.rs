//! On-disk dataset directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<id>.lmim       binary image tensor
//! <dir>/landmarks/<id>.json    landmark file
//! ```
//!
//! Image tensor layout (little-endian):
//!
//! ```text
//! magic     4 bytes  "LMIM"
//! version   u32      IMAGE_FORMAT_VERSION
//! dims      u32      2 or 3
//! extents   u32 x dims   (x, y[, z])
//! spacing   f64 x dims   mm
//! data      f32 x prod(extents), x fastest
//! ```
//!
//! Landmark files hold `{"names": [..], "coords": [[x, y], null, ..]}` where
//! `null` marks a landmark absent from the image.

use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetItem, Split};
use crate::domain::{Image, LandmarkSet};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"LMIM";
pub const IMAGE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_image(img: &Image) -> Vec<u8> {
    let dims = img.dims();
    let mut out = Vec::with_capacity(12 + 12 * dims + 4 * img.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    for &e in img.extents() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &s in img.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse an image tensor. Never panics on malformed input.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let corrupt = |m: &str| Error::Corrupt(format!("image tensor: {m}"));
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| corrupt("truncated header"))
    };
    if bytes.get(..4) != Some(IMAGE_MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(word(4)?);
    if version != IMAGE_FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let dims = u32::from_le_bytes(word(8)?) as usize;
    if !(2..=3).contains(&dims) {
        return Err(corrupt(&format!("{dims} axes")));
    }
    let mut pos = 12;
    let mut extents = Vec::with_capacity(dims);
    let mut len: usize = 1;
    for _ in 0..dims {
        let e = u32::from_le_bytes(word(pos)?) as usize;
        pos += 4;
        len = len.checked_mul(e).ok_or_else(|| corrupt("size overflow"))?;
        extents.push(e);
    }
    let mut spacing = Vec::with_capacity(dims);
    for _ in 0..dims {
        let b = bytes.get(pos..pos + 8).ok_or_else(|| corrupt("truncated header"))?;
        spacing.push(f64::from_le_bytes(b.try_into().unwrap_or_default()));
        pos += 8;
    }
    let expected = len
        .checked_mul(4)
        .and_then(|n| n.checked_add(pos))
        .ok_or_else(|| corrupt("size overflow"))?;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes for extents {extents:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Image::new(extents, spacing, data).map_err(|e| corrupt(&e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkFile {
    names: Vec<String>,
    coords: Vec<Option<Vec<f64>>>,
}

pub fn landmarks_to_json(lms: &LandmarkSet) -> Result<String> {
    let file = LandmarkFile {
        names: lms.names.clone(),
        coords: lms
            .coords
            .iter()
            .zip(&lms.present)
            .map(|(c, &p)| p.then(|| c.clone()))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn landmarks_from_json(text: &str) -> Result<LandmarkSet> {
    let file: LandmarkFile = serde_json::from_str(text)?;
    let dims = file
        .coords
        .iter()
        .flatten()
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::InvalidLandmarks("no landmark is present".into()))?;
    let present = file.coords.iter().map(Option::is_some).collect();
    let coords = file
        .coords
        .into_iter()
        .map(|c| c.unwrap_or_else(|| vec![f64::NAN; dims]))
        .collect();
    LandmarkSet::new(file.names, coords, present)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub landmarks: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: Option<u64>,
    /// Generator or ingestion settings, recorded verbatim.
    pub source: Option<serde_json::Value>,
    pub landmark_names: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Corrupt(format!("manifest version {}", m.version)));
        }
        for item in &m.items {
            check_relative(&item.image)?;
            check_relative(&item.landmarks)?;
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Manifest paths must stay inside the dataset directory.
fn check_relative(p: &str) -> Result<()> {
    let ok = !p.is_empty()
        && Path::new(p)
            .components()
            .all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::Corrupt(format!("manifest path {p:?} leaves the dataset directory")))
    }
}

fn safe_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("item id {id:?} is not a safe file name")))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a dataset directory and return its manifest.
pub fn save_dataset(ds: &Dataset, dir: &Path, source: Option<serde_json::Value>) -> Result<Manifest> {
    for sub in ["images", "landmarks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut items = Vec::with_capacity(ds.items.len());
    for item in &ds.items {
        safe_id(&item.id)?;
        let image = format!("images/{}.lmim", item.id);
        let landmarks = format!("landmarks/{}.json", item.id);
        write(&dir.join(&image), &encode_image(&item.image))?;
        write(&dir.join(&landmarks), landmarks_to_json(&item.landmarks)?.as_bytes())?;
        items.push(ManifestItem {
            id: item.id.clone(),
            image,
            landmarks,
            split: item.split,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: ds.seed,
        source,
        landmark_names: ds.landmark_names(),
        items,
    };
    write(&dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::from_json(&text)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut items = Vec::with_capacity(manifest.items.len());
    for m in &manifest.items {
        let ip = dir.join(&m.image);
        let image = decode_image(&std::fs::read(&ip).map_err(|e| Error::io(&ip, e))?)?;
        let lp = dir.join(&m.landmarks);
        let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
        let landmarks = landmarks_from_json(&text)?;
        if landmarks.names != manifest.landmark_names {
            return Err(Error::NameMismatch(format!(
                "{} does not match the manifest landmark names",
                lp.display()
            )));
        }
        items.push(DatasetItem {
            id: m.id.clone(),
            image,
            landmarks,
            split: m.split,
        });
    }
    Dataset::new(items, manifest.seed)
}
