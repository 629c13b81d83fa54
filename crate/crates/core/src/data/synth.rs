//! Deterministic synthetic landmark images.
//!
//! Each landmark is the analytic feature point of a rendered structure: the
//! mode of a Gaussian blob, the center of a ring, or the intersection of a
//! cross. Structures are moved per item by a shared random translation
//! (`global_jitter`) plus an independent per-structure offset
//! (`local_jitter`), both uniform in `[-j, j]` per axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetItem, Split};
use crate::domain::{for_each_index, Image, LandmarkSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    /// Isotropic Gaussian; `size` is the standard deviation.
    Blob,
    /// Thin spherical shell; `size` is the radius.
    Ring,
    /// Axis-aligned bars crossing at the landmark; `size` is the arm length.
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub name: String,
    pub kind: StructureKind,
    pub position: Vec<f64>,
    pub size: f64,
    /// Line thickness (standard deviation) for rings and crosses.
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
}

fn default_width() -> f64 {
    1.2
}

fn default_intensity() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub extents: Vec<usize>,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    pub structures: Vec<StructureSpec>,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub global_jitter: f64,
    pub local_jitter: f64,
}

fn default_spacing() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    /// 128x128 images with a blob, a ring and a cross.
    pub fn default_2d() -> Self {
        Self {
            extents: vec![128, 128],
            spacing: 1.0,
            structures: vec![
                StructureSpec {
                    name: "blob".into(),
                    kind: StructureKind::Blob,
                    position: vec![40.0, 44.0],
                    size: 3.0,
                    width: default_width(),
                    intensity: 1.0,
                },
                StructureSpec {
                    name: "ring".into(),
                    kind: StructureKind::Ring,
                    position: vec![88.0, 48.0],
                    size: 7.0,
                    width: default_width(),
                    intensity: 1.0,
                },
                StructureSpec {
                    name: "cross".into(),
                    kind: StructureKind::Cross,
                    position: vec![62.0, 86.0],
                    size: 9.0,
                    width: default_width(),
                    intensity: 1.0,
                },
            ],
            noise: 0.1,
            global_jitter: 30.0,
            local_jitter: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=3).contains(&dims) {
            return bad(format!("synthetic images must be 2D or 3D, got {dims} axes"));
        }
        if self.extents.iter().any(|&e| e < 64) {
            return bad(format!("synthetic extents must be >= 64, got {:?}", self.extents));
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be > 0".into());
        }
        if !(self.noise >= 0.0) || !(self.global_jitter >= 0.0) || !(self.local_jitter >= 0.0) {
            return bad("noise and jitter must be >= 0".into());
        }
        if self.structures.is_empty() {
            return bad("at least one structure required".into());
        }
        for s in &self.structures {
            if s.position.len() != dims {
                return bad(format!("structure {} position has wrong dimension", s.name));
            }
            if !(s.size > 0.0) || !(s.width > 0.0) || !s.intensity.is_finite() {
                return bad(format!("structure {} needs positive size and width", s.name));
            }
        }
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.structures.iter().map(|s| s.name.clone()).collect()
    }
}

/// Distance beyond which a structure's intensity is negligible.
fn support_radius(s: &StructureSpec) -> f64 {
    match s.kind {
        StructureKind::Blob => 4.0 * s.size,
        StructureKind::Ring | StructureKind::Cross => s.size + 4.0 * s.width,
    }
}

fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn render_value(s: &StructureSpec, p: &[f64], x: &[f64]) -> f64 {
    let diff: Vec<f64> = x.iter().zip(p).map(|(a, b)| a - b).collect();
    let r2: f64 = diff.iter().map(|d| d * d).sum();
    let v = match s.kind {
        StructureKind::Blob => gauss(r2, s.size),
        StructureKind::Ring => {
            let d = r2.sqrt() - s.size;
            gauss(d * d, s.width)
        }
        StructureKind::Cross => {
            // one bar per axis; each bar runs along its axis through p
            let mut best: f64 = 0.0;
            for a in 0..diff.len() {
                let along = diff[a].abs();
                let perp2: f64 = diff
                    .iter()
                    .enumerate()
                    .filter(|&(b, _)| b != a)
                    .map(|(_, d)| d * d)
                    .sum();
                let cap = if along <= s.size {
                    1.0
                } else {
                    gauss((along - s.size).powi(2), s.width)
                };
                best = best.max(gauss(perp2, s.width) * cap);
            }
            best
        }
    };
    s.intensity * v
}

fn generate_item(spec: &SynthSpec, seed: u64, index: usize) -> Result<DatasetItem> {
    let dims = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let shift: Vec<f64> = (0..dims)
        .map(|_| jitter(&mut rng, spec.global_jitter))
        .collect();
    let mut positions = Vec::with_capacity(spec.structures.len());
    for (i, s) in spec.structures.iter().enumerate() {
        let p: Vec<f64> = (0..dims)
            .map(|a| s.position[a] + shift[a] + jitter(&mut rng, spec.local_jitter))
            .collect();
        let r = support_radius(s);
        let outside = p
            .iter()
            .zip(&spec.extents)
            .any(|(&c, &e)| c + r < 0.0 || c - r > (e - 1) as f64);
        if outside {
            return Err(Error::StructureOutOfBounds { index: i });
        }
        positions.push(p);
    }

    let len: usize = spec.extents.iter().product();
    let mut data = vec![0.0f64; len];
    for (s, p) in spec.structures.iter().zip(&positions) {
        let r = support_radius(s);
        let lo: Vec<usize> = p.iter().map(|&c| (c - r).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = p
            .iter()
            .zip(&spec.extents)
            .map(|(&c, &e)| ((c + r).ceil().max(0.0) as usize).min(e - 1))
            .collect();
        let box_ext: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| h + 1 - l).collect();
        let mut x = vec![0.0; dims];
        let mut idx = vec![0usize; dims];
        for_each_index(&box_ext, |b| {
            for a in 0..dims {
                idx[a] = lo[a] + b[a];
                x[a] = idx[a] as f64;
            }
            let mut off = 0;
            let mut stride = 1;
            for a in 0..dims {
                off += idx[a] * stride;
                stride *= spec.extents[a];
            }
            let v = render_value(s, p, &x);
            // overlapping structures: keep the brighter one
            if v.abs() > data[off].abs() {
                data[off] = v;
            }
        });
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise)
            .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let image = Image::new(
        spec.extents.clone(),
        vec![spec.spacing; dims],
        data.into_iter().map(|v| v as f32).collect(),
    )?;
    let landmarks = LandmarkSet::all_present(spec.names(), positions)?;
    Ok(DatasetItem {
        id: format!("synth_{index:05}"),
        image,
        landmarks,
        split: Split::Train,
    })
}

fn jitter<R: Rng>(rng: &mut R, range: f64) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// Generate `count` items. Output depends only on `(spec, count, seed)`;
/// items are generated in parallel from independent random streams.
pub fn synth_generate(spec: &SynthSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("count must be >= 1".into()));
    }
    let items = (0..count)
        .into_par_iter()
        .map(|i| generate_item(spec, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, Some(seed))
}
