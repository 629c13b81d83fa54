//! Reference targets for the regression and classification heads.

use serde::{Deserialize, Serialize};

use crate::domain::{LandmarkSet, PatchGrid};
use crate::error::{Error, Result};

/// Domain in which the regression head predicts displacements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementEncoding {
    /// `sign(x) * ln(1 + |x|)` per component.
    #[default]
    Log,
    /// Plain voxel displacements.
    Raw,
}

impl DisplacementEncoding {
    pub fn encode(self, x: f64) -> f64 {
        match self {
            Self::Log => log_encode_scalar(x),
            Self::Raw => x,
        }
    }

    pub fn decode(self, y: f64) -> f64 {
        match self {
            Self::Log => log_decode_scalar(y),
            Self::Raw => y,
        }
    }
}

#[inline]
pub fn log_encode_scalar(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

#[inline]
pub fn log_decode_scalar(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

pub fn log_encode(d: &[f64]) -> Result<Vec<f64>> {
    check_finite(d)?;
    Ok(d.iter().map(|&x| log_encode_scalar(x)).collect())
}

pub fn log_decode(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v)?;
    Ok(v.iter().map(|&y| log_decode_scalar(y)).collect())
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(Error::NonFinite(format!("vector component {x}"))),
        None => Ok(()),
    }
}

/// Displacements from every cell center to every landmark, in voxels.
///
/// Layout `[cell][landmark][axis]`. Entries of absent landmarks are zero and
/// flagged in `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn displacement_targets(grid: &PatchGrid, lms: &LandmarkSet) -> Result<DisplacementField> {
    let dims = grid.dims();
    if lms.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: lms.dims(),
        });
    }
    let k = lms.len();
    let cells = grid.num_cells();
    let mut values = vec![0.0; cells * k * dims];
    for j in 0..cells {
        let center = grid.center(j);
        for (l, coord) in lms.coords.iter().enumerate() {
            if !lms.present[l] {
                continue;
            }
            let base = (j * k + l) * dims;
            for a in 0..dims {
                values[base + a] = coord[a] - center[a];
            }
        }
    }
    Ok(DisplacementField {
        values,
        valid: lms.present.clone(),
    })
}

/// Binary presence labels, layout `[cell][landmark]`.
///
/// A cell is positive for a landmark when the landmark lies in the half-open
/// box `[j * s, (j + 1) * s)` on every axis.
pub fn presence_labels(grid: &PatchGrid, lms: &LandmarkSet) -> Result<Vec<f64>> {
    let dims = grid.dims();
    if lms.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: lms.dims(),
        });
    }
    let k = lms.len();
    let mut labels = vec![0.0; grid.num_cells() * k];
    let s = grid.spacing as f64;
    for (l, coord) in lms.coords.iter().enumerate() {
        if !lms.present[l] {
            continue;
        }
        let mut index = Vec::with_capacity(dims);
        for a in 0..dims {
            let cell = (coord[a] / s).floor();
            if cell < 0.0 || cell >= grid.cell_counts[a] as f64 {
                break;
            }
            index.push(cell as usize);
        }
        if index.len() == dims {
            labels[grid.linear_index(&index) * k + l] = 1.0;
        }
    }
    Ok(labels)
}

/// Complete training target for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetField {
    pub grid: PatchGrid,
    pub num_landmarks: usize,
    pub encoding: DisplacementEncoding,
    /// Encoded displacements, `[cell][landmark][axis]`.
    pub displacements: Vec<f64>,
    /// `[cell][landmark]`, values in {0, 1}.
    pub labels: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn build_targets(
    grid: &PatchGrid,
    lms: &LandmarkSet,
    encoding: DisplacementEncoding,
) -> Result<TargetField> {
    let raw = displacement_targets(grid, lms)?;
    let labels = presence_labels(grid, lms)?;
    let displacements = raw.values.iter().map(|&x| encoding.encode(x)).collect();
    Ok(TargetField {
        grid: grid.clone(),
        num_landmarks: lms.len(),
        encoding,
        displacements,
        labels,
        valid: raw.valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::build_grid;
    use proptest::prelude::*;

    fn one(coord: Vec<f64>) -> LandmarkSet {
        LandmarkSet::all_present(vec!["a".into()], vec![coord]).unwrap()
    }

    #[test]
    fn displacement_examples() {
        let g = build_grid(&[72, 72, 72], 3).unwrap();
        let d = displacement_targets(&g, &one(vec![11.5, 11.5, 11.5])).unwrap();
        assert_eq!(&d.values[0..3], &[8.0, 8.0, 8.0]);
        // cell (1,1,1) has its center exactly on the landmark
        let j = g.linear_index(&[1, 1, 1]);
        assert_eq!(&d.values[j * 3..j * 3 + 3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_translation_shifts_displacements() {
        let g = build_grid(&[32, 32], 2).unwrap();
        let lms = one(vec![9.25, 20.0]);
        let t = [4.0, 8.0];
        let base = displacement_targets(&g, &lms).unwrap();
        // moving the grid by t is the same as moving the landmark by -t
        let shifted = displacement_targets(&g, &lms.translated(&[-t[0], -t[1]])).unwrap();
        for j in 0..g.num_cells() {
            for a in 0..2 {
                assert_eq!(shifted.values[j * 2 + a], base.values[j * 2 + a] - t[a]);
            }
        }
    }

    #[test]
    fn absent_landmark_is_invalid_and_unlabeled() {
        let g = build_grid(&[16, 16], 2).unwrap();
        let lms = LandmarkSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![3.0, 3.0], vec![5.0, 5.0]],
            vec![true, false],
        )
        .unwrap();
        let d = displacement_targets(&g, &lms).unwrap();
        assert_eq!(d.valid, vec![true, false]);
        let labels = presence_labels(&g, &lms).unwrap();
        let sums: Vec<f64> = (0..2)
            .map(|l| (0..g.num_cells()).map(|j| labels[j * 2 + l]).sum())
            .collect();
        assert_eq!(sums, vec![1.0, 0.0]);
    }

    #[test]
    fn label_at_cell_center() {
        let g = build_grid(&[72, 72, 72], 3).unwrap();
        let labels = presence_labels(&g, &one(vec![19.5, 3.5, 11.5])).unwrap();
        let j = g.linear_index(&[2, 0, 1]);
        for (i, &v) in labels.iter().enumerate() {
            assert_eq!(v, if i == j { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn label_outside_grid_is_zero() {
        let g = build_grid(&[20, 20], 2).unwrap(); // covers [0, 20)
        for c in [vec![-1.0, 5.0], vec![20.0, 5.0], vec![5.0, 250.0]] {
            let labels = presence_labels(&g, &one(c)).unwrap();
            assert!(labels.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encode_fixed_point_and_odd() {
        assert_eq!(log_encode_scalar(0.0), 0.0);
        for x in [1.0, 7.3, 100.0] {
            assert_eq!(log_encode_scalar(-x), -log_encode_scalar(x));
        }
        assert!(log_encode(&[1.0, f64::NAN]).is_err());
        assert!(log_decode(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn encode_roundtrip_dense() {
        let n = 200_001;
        for i in 0..n {
            let x = -1000.0 + 2000.0 * i as f64 / (n - 1) as f64;
            let back = log_decode_scalar(log_encode_scalar(x));
            assert!((back - x).abs() <= 1e-9, "x={x} back={back}");
        }
    }

    proptest! {
        #[test]
        fn labels_sum_to_at_most_one(x in -20.0f64..60.0, y in -20.0f64..60.0) {
            let g = build_grid(&[40, 36], 2).unwrap();
            let lms = one(vec![x, y]);
            let labels = presence_labels(&g, &lms).unwrap();
            let sum: f64 = labels.iter().sum();
            let inside = (0.0..40.0).contains(&x) && (0.0..36.0).contains(&y);
            prop_assert_eq!(sum, if inside { 1.0 } else { 0.0 });
            if inside {
                let j = labels.iter().position(|&v| v == 1.0).unwrap();
                let d = displacement_targets(&g, &lms).unwrap();
                let linf = d.values[j * 2..j * 2 + 2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(linf <= g.spacing as f64 / 2.0 + 0.5);
            }
        }

        #[test]
        fn encode_strictly_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            prop_assume!(a < b);
            prop_assert!(log_encode_scalar(a) < log_encode_scalar(b));
            prop_assert_eq!(log_encode_scalar(a).signum(), if a == 0.0 { 0.0f64.signum() } else { a.signum() });
        }

        #[test]
        fn encoding_preserves_linf_argmin(x in 0.0f64..32.0, y in 0.0f64..32.0) {
            let g = build_grid(&[32, 32], 2).unwrap();
            let d = displacement_targets(&g, &one(vec![x, y])).unwrap();
            let linf = |v: &[f64]| v.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            let argmin = |vals: &[f64]| {
                (0..g.num_cells())
                    .min_by(|&i, &j| linf(&vals[i * 2..i * 2 + 2]).partial_cmp(&linf(&vals[j * 2..j * 2 + 2])).unwrap())
                    .unwrap()
            };
            let enc: Vec<f64> = d.values.iter().map(|&v| log_encode_scalar(v)).collect();
            prop_assert_eq!(argmin(&d.values), argmin(&enc));
        }
    }
}
