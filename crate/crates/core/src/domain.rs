//! Domain types shared by every stage of the pipeline.
//!
//! Axis order is `(x, y[, z])` everywhere: image extents, spacings, landmark
//! coordinates and grid cell counts. Image data is stored with `x` varying
//! fastest. A voxel with index `i` has its center at continuous coordinate `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::DisplacementEncoding;

/// Scalar intensity image in two or three dimensions with per-axis spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    extents: Vec<usize>,
    spacing: Vec<f64>,
    data: Vec<f32>,
}

impl Image {
    pub fn new(extents: Vec<usize>, spacing: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        let dims = extents.len();
        if !(2..=3).contains(&dims) {
            return Err(Error::InvalidImage(format!(
                "image must be 2D or 3D, got {dims} axes"
            )));
        }
        if spacing.len() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: spacing.len(),
            });
        }
        if extents.contains(&0) {
            return Err(Error::InvalidImage(format!(
                "all extents must be >= 1, got {extents:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidImage(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let len: usize = extents.iter().product();
        if data.len() != len {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match extents {extents:?}",
                data.len()
            )));
        }
        Ok(Self {
            extents,
            spacing,
            data,
        })
    }

    pub fn zeros(extents: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        let len = extents.iter().product();
        Self::new(extents, spacing, vec![0.0; len])
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Linear offset of a voxel index (x fastest).
    pub fn offset(&self, index: &[usize]) -> usize {
        let mut off = 0;
        let mut stride = 1;
        for (a, &i) in index.iter().enumerate() {
            off += i * stride;
            stride *= self.extents[a];
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Value at a signed index, zero outside the image.
    pub fn get_or_zero(&self, index: &[isize]) -> f32 {
        let mut off = 0;
        let mut stride = 1;
        for (a, &i) in index.iter().enumerate() {
            if i < 0 || i as usize >= self.extents[a] {
                return 0.0;
            }
            off += i as usize * stride;
            stride *= self.extents[a];
        }
        self.data[off]
    }

    /// Shift and scale intensities to zero mean and unit variance.
    ///
    /// A constant image becomes all zeros.
    pub fn standardized(&self) -> Image {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let data = if std > 1e-12 {
            self.data
                .iter()
                .map(|&v| ((v as f64 - mean) / std) as f32)
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image {
            extents: self.extents.clone(),
            spacing: self.spacing.clone(),
            data,
        }
    }
}

/// Iterate all multi-indices of a grid with the first axis varying fastest.
pub fn for_each_index(extents: &[usize], mut f: impl FnMut(&[usize])) {
    if extents.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; extents.len()];
    loop {
        f(&idx);
        let mut a = 0;
        loop {
            if a == extents.len() {
                return;
            }
            idx[a] += 1;
            if idx[a] < extents[a] {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Named landmarks with continuous voxel coordinates and presence flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkSet {
    pub names: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(names: Vec<String>, coords: Vec<Vec<f64>>, present: Vec<bool>) -> Result<Self> {
        let set = Self {
            names,
            coords,
            present,
        };
        set.validate()?;
        Ok(set)
    }

    /// All landmarks present.
    pub fn all_present(names: Vec<String>, coords: Vec<Vec<f64>>) -> Result<Self> {
        let present = vec![true; coords.len()];
        Self::new(names, coords, present)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.names.len();
        if k == 0 {
            return Err(Error::InvalidLandmarks("at least one landmark required".into()));
        }
        if self.coords.len() != k || self.present.len() != k {
            return Err(Error::InvalidLandmarks(format!(
                "{} names, {} coordinates, {} presence flags",
                k,
                self.coords.len(),
                self.present.len()
            )));
        }
        let dims = self.coords[0].len();
        if !(2..=3).contains(&dims) {
            return Err(Error::InvalidLandmarks(format!(
                "coordinates must have 2 or 3 components, got {dims}"
            )));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if c.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: c.len(),
                });
            }
            if self.present[i] && c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidLandmarks(format!(
                    "landmark {} is present but has non-finite coordinates",
                    self.names[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    /// Same landmarks with `delta` added to every coordinate.
    pub fn translated(&self, delta: &[f64]) -> LandmarkSet {
        let coords = self
            .coords
            .iter()
            .map(|c| c.iter().zip(delta).map(|(v, d)| v + d).collect())
            .collect();
        LandmarkSet {
            names: self.names.clone(),
            coords,
            present: self.present.clone(),
        }
    }

    /// Same landmarks with each coordinate axis multiplied by `factors`.
    pub fn scaled(&self, factors: &[f64]) -> LandmarkSet {
        let coords = self
            .coords
            .iter()
            .map(|c| c.iter().zip(factors).map(|(v, f)| v * f).collect())
            .collect();
        LandmarkSet {
            names: self.names.clone(),
            coords,
            present: self.present.clone(),
        }
    }

    /// Single-landmark set holding landmark `k`.
    pub fn select(&self, k: usize) -> LandmarkSet {
        LandmarkSet {
            names: vec![self.names[k].clone()],
            coords: vec![self.coords[k].clone()],
            present: vec![self.present[k]],
        }
    }
}

/// Convert a voxel-space vector into millimetres.
pub fn vox_to_mm(coord: &[f64], spacing: &[f64]) -> Result<Vec<f64>> {
    if coord.len() != spacing.len() {
        return Err(Error::DimensionMismatch {
            expected: spacing.len(),
            got: coord.len(),
        });
    }
    Ok(coord.iter().zip(spacing).map(|(c, s)| c * s).collect())
}

/// Regular output grid of a fully convolutional network.
///
/// Each cell covers a box of `spacing` voxels per axis; the center of the cell
/// with index `j` lies at `j * spacing + (spacing - 1) / 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_reductions: u32,
    pub spacing: usize,
    pub cell_counts: Vec<usize>,
}

/// Grid produced by `n_reductions` stride-2 stages over an image of `extents`.
pub fn build_grid(extents: &[usize], n_reductions: u32) -> Result<PatchGrid> {
    if n_reductions == 0 {
        return Err(Error::InvalidConfig("n_reductions must be >= 1".into()));
    }
    if !(1..=3).contains(&extents.len()) {
        return Err(Error::InvalidConfig(format!(
            "grid needs 1 to 3 axes, got {}",
            extents.len()
        )));
    }
    let spacing = 1usize << n_reductions;
    for (axis, &extent) in extents.iter().enumerate() {
        if extent < spacing {
            return Err(Error::ExtentTooSmall {
                axis,
                extent,
                spacing,
            });
        }
    }
    Ok(PatchGrid {
        n_reductions,
        spacing,
        cell_counts: extents.iter().map(|e| e / spacing).collect(),
    })
}

impl PatchGrid {
    pub fn dims(&self) -> usize {
        self.cell_counts.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cell_counts.iter().product()
    }

    /// Extents covered by the grid (a multiple of the spacing per axis).
    pub fn covered_extents(&self) -> Vec<usize> {
        self.cell_counts.iter().map(|c| c * self.spacing).collect()
    }

    /// Multi-index of linear cell `j` (first axis fastest).
    pub fn cell_index(&self, mut j: usize) -> Vec<usize> {
        self.cell_counts
            .iter()
            .map(|&c| {
                let i = j % c;
                j /= c;
                i
            })
            .collect()
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        let mut off = 0;
        let mut stride = 1;
        for (a, &i) in index.iter().enumerate() {
            off += i * stride;
            stride *= self.cell_counts[a];
        }
        off
    }

    /// Center coordinate along one axis of cell index `i`.
    pub fn center_1d(&self, i: usize) -> f64 {
        let s = self.spacing as f64;
        i as f64 * s + (s - 1.0) / 2.0
    }

    pub fn center(&self, j: usize) -> Vec<f64> {
        self.cell_index(j)
            .into_iter()
            .map(|i| self.center_1d(i))
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.num_cells()).map(|j| self.center(j)).collect()
    }
}

/// Per-cell network outputs for `k` landmarks.
///
/// `displacements` is laid out `[cell][landmark][axis]`, `probabilities`
/// `[cell][landmark]`. Displacements are stored in the network's output
/// domain, described by `encoding`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionField {
    pub grid: PatchGrid,
    pub num_landmarks: usize,
    pub encoding: DisplacementEncoding,
    pub displacements: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl PredictionField {
    pub fn new(
        grid: PatchGrid,
        num_landmarks: usize,
        encoding: DisplacementEncoding,
        displacements: Vec<f64>,
        probabilities: Vec<f64>,
    ) -> Result<Self> {
        let cells = grid.num_cells();
        let dims = grid.dims();
        if displacements.len() != cells * num_landmarks * dims {
            return Err(Error::ShapeMismatch(format!(
                "displacements: expected {} values, got {}",
                cells * num_landmarks * dims,
                displacements.len()
            )));
        }
        if probabilities.len() != cells * num_landmarks {
            return Err(Error::ShapeMismatch(format!(
                "probabilities: expected {} values, got {}",
                cells * num_landmarks,
                probabilities.len()
            )));
        }
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::ShapeMismatch(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            grid,
            num_landmarks,
            encoding,
            displacements,
            probabilities,
        })
    }

    pub fn dims(&self) -> usize {
        self.grid.dims()
    }

    pub fn displacement(&self, cell: usize, k: usize) -> &[f64] {
        let d = self.dims();
        let start = (cell * self.num_landmarks + k) * d;
        &self.displacements[start..start + d]
    }

    pub fn probability(&self, cell: usize, k: usize) -> f64 {
        self.probabilities[cell * self.num_landmarks + k]
    }
}
