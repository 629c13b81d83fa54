//! ISBI cephalometric X-ray ingestion.
//!
//! Expected layout: a directory of grayscale TIFF images (`*.tif` / `*.tiff`)
//! and two annotation directories, one per observer, each holding a
//! `<image stem>.txt` file per image. Annotation files list one `x,y` pixel
//! coordinate per line; only the first `num_landmarks` lines are read.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::ColorType;

use super::{Dataset, DatasetItem, Split};
use crate::domain::{Image, LandmarkSet};
use crate::error::{Error, Result};

pub const ISBI_LANDMARKS: usize = 19;
pub const ISBI_SPACING_MM: f64 = 0.1;
pub const ISBI_EXTENTS: [usize; 2] = [1935, 2400];

#[derive(Debug, Clone, PartialEq)]
pub struct IsbiOptions {
    /// Reject images whose `(x, y)` extents differ.
    pub expected_extents: Option<[usize; 2]>,
    pub spacing_mm: f64,
    pub num_landmarks: usize,
}

impl Default for IsbiOptions {
    fn default() -> Self {
        Self {
            expected_extents: Some(ISBI_EXTENTS),
            spacing_mm: ISBI_SPACING_MM,
            num_landmarks: ISBI_LANDMARKS,
        }
    }
}

/// Parse the first `count` coordinate lines of an annotation file.
/// Blank lines are skipped; lines after the `count`-th are ignored.
pub fn parse_annotation(text: &str, count: usize) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut out = Vec::with_capacity(count);
    for (lineno, line) in text.lines().enumerate() {
        if out.len() == count {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected \"x,y\", got {line:?}", lineno + 1));
        };
        let parse = |s: &str| -> std::result::Result<f64, String> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| format!("line {}: {s:?} is not a number", lineno + 1))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("line {}: non-finite coordinate", lineno + 1))
            }
        };
        out.push(vec![parse(x)?, parse(y)?]);
    }
    if out.len() < count {
        return Err(format!("found {} coordinate lines, need {count}", out.len()));
    }
    Ok(out)
}

/// Decode a single-channel 8- or 16-bit TIFF into a 2D image.
pub fn decode_tiff(bytes: &[u8], spacing_mm: f64) -> Result<Image> {
    let tiff_err = |e: tiff::TiffError| Error::Tiff(e.to_string());
    let mut dec = Decoder::new(Cursor::new(bytes)).map_err(tiff_err)?;
    match dec.colortype().map_err(tiff_err)? {
        ColorType::Gray(8) | ColorType::Gray(16) => {}
        other => return Err(Error::Tiff(format!("unsupported color type {other:?}"))),
    }
    let (w, h) = dec.dimensions().map_err(tiff_err)?;
    let data: Vec<f32> = match dec.read_image().map_err(tiff_err)? {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        _ => return Err(Error::Tiff("unexpected sample format".into())),
    };
    Image::new(
        vec![w as usize, h as usize],
        vec![spacing_mm, spacing_mm],
        data,
    )
    .map_err(|e| Error::Tiff(e.to_string()))
}

fn read_annotation(path: &Path, count: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Annotation {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_annotation(&text, count).map_err(|msg| Error::Annotation {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn landmark_names(count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("L{i}")).collect()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("tif" | "tiff")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no TIFF images in {}", dir.display())));
    }
    Ok(paths)
}

/// Load every image in `image_dir`. Ground truth is the component-wise mean
/// of the two observers. All items are tagged [`Split::Train`].
pub fn load_isbi(image_dir: &Path, annot_dirs: [&Path; 2], opts: &IsbiOptions) -> Result<Dataset> {
    let names = landmark_names(opts.num_landmarks);
    let items = list_images(image_dir)?
        .into_par_iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::InvalidImage(format!("bad file name {}", path.display())))?
                .to_string();
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = decode_tiff(&bytes, opts.spacing_mm)?;
            if let Some(exp) = opts.expected_extents {
                if image.extents() != exp {
                    return Err(Error::InvalidImage(format!(
                        "{} has extents {:?}, expected {exp:?}",
                        path.display(),
                        image.extents()
                    )));
                }
            }
            let a = read_annotation(&annot_dirs[0].join(format!("{stem}.txt")), opts.num_landmarks)?;
            let b = read_annotation(&annot_dirs[1].join(format!("{stem}.txt")), opts.num_landmarks)?;
            let coords = observer_mean(&a, &b);
            Ok(DatasetItem {
                id: stem,
                image,
                landmarks: LandmarkSet::all_present(names.clone(), coords)?,
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, None)
}

/// Image stem and the two observers' points.
pub type ObserverAnnotations = (String, [Vec<Vec<f64>>; 2]);

/// Read the two observers' raw annotations for every image, for
/// inter-observer statistics.
pub fn load_observer_annotations(
    image_dir: &Path,
    annot_dirs: [&Path; 2],
    count: usize,
) -> Result<Vec<ObserverAnnotations>> {
    list_images(image_dir)?
        .into_iter()
        .map(|path| {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let a = read_annotation(&annot_dirs[0].join(format!("{stem}.txt")), count)?;
            let b = read_annotation(&annot_dirs[1].join(format!("{stem}.txt")), count)?;
            Ok((stem, [a, b]))
        })
        .collect()
}

pub fn observer_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u + v) / 2.0).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tiff::encoder::{colortype, TiffEncoder};

    fn annotation(points: &[(f64, f64)], extra: &str) -> String {
        let mut s: String = points.iter().map(|(x, y)| format!("{x},{y}\n")).collect();
        s.push_str(extra);
        s
    }

    #[test]
    fn parse_first_lines_only() {
        let pts: Vec<(f64, f64)> = (0..19).map(|i| (i as f64, 2.0 * i as f64 + 0.5)).collect();
        let text = annotation(&pts, "3\n1\n2\n");
        let got = parse_annotation(&text, 19).unwrap();
        assert_eq!(got.len(), 19);
        assert_eq!(got[18], vec![18.0, 36.5]);
        assert!(parse_annotation("1,2\r\n 3 , 4 \n", 2).is_ok());
    }

    #[test]
    fn short_or_malformed_annotation_errors() {
        let pts: Vec<(f64, f64)> = (0..18).map(|i| (i as f64, 0.0)).collect();
        assert!(parse_annotation(&annotation(&pts, ""), 19).is_err());
        assert!(parse_annotation("1;2\n", 1).is_err());
        assert!(parse_annotation("1,2,3\n", 1).is_err());
        assert!(parse_annotation("a,2\n", 1).is_err());
        assert!(parse_annotation("inf,2\n", 1).is_err());
    }

    #[test]
    fn observer_mean_arithmetic() {
        let m = observer_mean(&[vec![100.0, 200.0]], &[vec![102.0, 198.0]]);
        assert_eq!(m, vec![vec![101.0, 199.0]]);
    }

    fn write_tiff8(path: &Path, w: u32, h: u32) {
        let data: Vec<u8> = (0..w * h).map(|i| (i % 251) as u8).collect();
        let mut f = std::fs::File::create(path).unwrap();
        TiffEncoder::new(&mut f)
            .unwrap()
            .write_image::<colortype::Gray8>(w, h, &data)
            .unwrap();
    }

    #[test]
    fn decode_gray16() {
        let (w, h) = (5u32, 3u32);
        let data: Vec<u16> = (0..w * h).map(|i| i as u16 * 1000).collect();
        let mut buf = Cursor::new(Vec::new());
        TiffEncoder::new(&mut buf)
            .unwrap()
            .write_image::<colortype::Gray16>(w, h, &data)
            .unwrap();
        let img = decode_tiff(buf.get_ref(), 0.1).unwrap();
        assert_eq!(img.extents(), &[5, 3]);
        assert_eq!(img.get(&[4, 2]), 14000.0);
        assert!(decode_tiff(b"not a tiff", 0.1).is_err());
    }

    #[test]
    fn load_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (img_dir, a_dir, b_dir) = (dir.path().join("img"), dir.path().join("a"), dir.path().join("b"));
        for d in [&img_dir, &a_dir, &b_dir] {
            std::fs::create_dir(d).unwrap();
        }
        let pts: Vec<(f64, f64)> = (0..19).map(|i| (10.0 + i as f64, 20.0)).collect();
        let shifted: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + 2.0, y - 2.0)).collect();
        for stem in ["001", "002"] {
            write_tiff8(&img_dir.join(format!("{stem}.tif")), 40, 30);
            std::fs::write(a_dir.join(format!("{stem}.txt")), annotation(&pts, "1\n")).unwrap();
            std::fs::write(b_dir.join(format!("{stem}.txt")), annotation(&shifted, "")).unwrap();
        }
        let opts = IsbiOptions {
            expected_extents: Some([40, 30]),
            ..IsbiOptions::default()
        };
        let ds = load_isbi(&img_dir, [&a_dir, &b_dir], &opts).unwrap();
        assert_eq!(ds.items.len(), 2);
        assert_eq!(ds.items[0].id, "001");
        assert_eq!(ds.items[0].landmarks.coords[0], vec![11.0, 19.0]);
        assert_eq!(ds.items[0].landmarks.names[18], "L19");
        assert_eq!(ds.items[0].image.spacing(), &[0.1, 0.1]);

        let same = load_isbi(&img_dir, [&a_dir, &a_dir], &opts).unwrap();
        assert_eq!(same.items[1].landmarks.coords[3], vec![13.0, 20.0]);

        let wrong = IsbiOptions::default();
        assert!(load_isbi(&img_dir, [&a_dir, &b_dir], &wrong).is_err());

        std::fs::remove_file(b_dir.join("002.txt")).unwrap();
        assert!(matches!(
            load_isbi(&img_dir, [&a_dir, &b_dir], &opts),
            Err(Error::Annotation { .. })
        ));
    }
}
