//! Training crops and inference-time crops around landmark estimates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Image, LandmarkSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "landmark")]
pub enum CropConstraint {
    #[default]
    None,
    /// Crop must contain the landmark with this index.
    MustContainLandmark(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub extents: Vec<usize>,
    #[serde(default)]
    pub constraint: CropConstraint,
}

/// Copy the box starting at `origin` with size `extents`; voxels outside the
/// image read as zero.
pub fn crop_at(img: &Image, origin: &[isize], extents: &[usize]) -> Result<Image> {
    let dims = img.dims();
    if origin.len() != dims || extents.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: extents.len().min(origin.len()),
        });
    }
    if extents.contains(&0) {
        return Err(Error::InvalidConfig("crop extents must be >= 1".into()));
    }
    let src_ext = img.extents();
    let mut out = Image::zeros(extents.to_vec(), img.spacing().to_vec())?;
    // overlap along x, identical for every row
    let x0 = origin[0].max(0);
    let x1 = (origin[0] + extents[0] as isize).min(src_ext[0] as isize);
    if x1 <= x0 {
        return Ok(out);
    }
    let (dst_x0, len) = ((x0 - origin[0]) as usize, (x1 - x0) as usize);
    let depth = if dims == 3 { extents[2] } else { 1 };
    let src = img.data();
    let ex = extents[0];
    let ey = extents[1];
    let dst = out.data_mut();
    for z in 0..depth {
        let sz = if dims == 3 { origin[2] + z as isize } else { 0 };
        if dims == 3 && (sz < 0 || sz >= src_ext[2] as isize) {
            continue;
        }
        for y in 0..ey {
            let sy = origin[1] + y as isize;
            if sy < 0 || sy >= src_ext[1] as isize {
                continue;
            }
            let s = (sz as usize * src_ext[1] + sy as usize) * src_ext[0] + x0 as usize;
            let d = (z * ey + y) * ex + dst_x0;
            dst[d..d + len].copy_from_slice(&src[s..s + len]);
        }
    }
    Ok(out)
}

/// Random interior crop; landmark coordinates are returned in the crop frame.
///
/// With [`CropConstraint::MustContainLandmark`] the origin is drawn uniformly
/// from all origins whose crop contains the landmark, i.e. whose coordinate
/// `c` satisfies `origin <= c < origin + extent` on every axis.
pub fn sample_crop<R: Rng + ?Sized>(
    img: &Image,
    lms: &LandmarkSet,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<(Image, LandmarkSet)> {
    let origin = sample_origin(img.extents(), lms, spec, rng)?;
    let crop = crop_at(img, &origin, &spec.extents)?;
    let shift: Vec<f64> = origin.iter().map(|&o| -(o as f64)).collect();
    Ok((crop, lms.translated(&shift)))
}

pub fn sample_origin<R: Rng + ?Sized>(
    extents: &[usize],
    lms: &LandmarkSet,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<Vec<isize>> {
    let dims = extents.len();
    if spec.extents.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: spec.extents.len(),
        });
    }
    let mut origin = Vec::with_capacity(dims);
    for a in 0..dims {
        let (e, img_e) = (spec.extents[a], extents[a]);
        if e == 0 || e > img_e {
            return Err(Error::InvalidConfig(format!(
                "crop extent {e} does not fit image extent {img_e} on axis {a}"
            )));
        }
        let mut lo = 0isize;
        let mut hi = (img_e - e) as isize;
        if let CropConstraint::MustContainLandmark(k) = spec.constraint {
            if k >= lms.len() || !lms.present[k] {
                return Err(Error::NoFeasibleCrop(format!(
                    "landmark {k} is not present"
                )));
            }
            let c = lms.coords[k][a].floor();
            if !c.is_finite() || c.abs() > 1e15 {
                return Err(Error::NoFeasibleCrop(format!("landmark {k} is unbounded")));
            }
            let c = c as isize;
            lo = lo.max(c - e as isize + 1);
            hi = hi.min(c);
            if lo > hi {
                return Err(Error::NoFeasibleCrop(format!(
                    "landmark {k} at {:?} cannot lie inside a {e}-voxel crop on axis {a}",
                    lms.coords[k]
                )));
            }
        }
        origin.push(rng.random_range(lo as i64..=hi as i64) as isize);
    }
    Ok(origin)
}

/// Fixed-size crop centered on `round(center)`; the center lands on index
/// `floor(extent / 2)` of the crop. Returns the crop and the offset that maps
/// crop coordinates back to image coordinates (`p_image = p_crop + offset`).
pub fn crop_around(img: &Image, center: &[f64], extents: &[usize]) -> Result<(Image, Vec<isize>)> {
    if center.len() != img.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            got: center.len(),
        });
    }
    if center.iter().any(|c| !c.is_finite() || c.abs() > 1e12) {
        return Err(Error::NonFinite(format!("crop center {center:?}")));
    }
    let origin: Vec<isize> = center
        .iter()
        .zip(extents)
        .map(|(&c, &e)| c.round() as isize - (e / 2) as isize)
        .collect();
    let crop = crop_at(img, &origin, extents)?;
    Ok((crop, origin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::for_each_index;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(extents: Vec<usize>) -> Image {
        let n: usize = extents.iter().product();
        let dims = extents.len();
        Image::new(extents, vec![1.0; dims], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap()
    }

    fn one(coord: Vec<f64>) -> LandmarkSet {
        LandmarkSet::all_present(vec!["a".into()], vec![coord]).unwrap()
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = ramp(vec![6, 5, 4]);
        let lms = one(vec![1.0, 2.0, 3.0]);
        let spec = CropSpec {
            extents: vec![6, 5, 4],
            constraint: CropConstraint::None,
        };
        let (c, l) = sample_crop(&img, &lms, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c, img);
        assert_eq!(l, lms);
    }

    #[test]
    fn crop_frame_coordinates() {
        let img = ramp(vec![120, 120, 120]);
        let lms = one(vec![100.0, 100.0, 100.0]);
        let crop = crop_at(&img, &[90, 90, 90], &[16, 16, 16]).unwrap();
        assert_eq!(crop.get(&[0, 0, 0]), img.get(&[90, 90, 90]));
        assert_eq!(lms.translated(&[-90.0, -90.0, -90.0]).coords[0], vec![10.0, 10.0, 10.0]);
    }

    #[test]
    fn constrained_crop_always_contains_landmark() {
        let img = ramp(vec![64, 48]);
        let lms = LandmarkSet::all_present(
            vec!["a".into(), "b".into()],
            vec![vec![3.2, 40.7], vec![60.0, 1.0]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..2 {
            let spec = CropSpec {
                extents: vec![16, 16],
                constraint: CropConstraint::MustContainLandmark(k),
            };
            for _ in 0..1000 {
                let (_, l) = sample_crop(&img, &lms, &spec, &mut rng).unwrap();
                assert!(l.coords[k].iter().all(|&c| (0.0..16.0).contains(&c)));
            }
        }
    }

    #[test]
    fn constrained_crop_exhaustive_small_image() {
        // every feasible origin must appear, and only feasible ones
        let img = ramp(vec![10, 10]);
        let lms = one(vec![4.5, 7.0]);
        let spec = CropSpec {
            extents: vec![4, 4],
            constraint: CropConstraint::MustContainLandmark(0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            seen.insert(sample_origin(img.extents(), &lms, &spec, &mut rng).unwrap());
        }
        let mut expected = std::collections::BTreeSet::new();
        for ox in 0..=6isize {
            for oy in 0..=6isize {
                let inside = (ox as f64) <= 4.5 && 4.5 < (ox + 4) as f64 && (oy as f64) <= 7.0 && 7.0 < (oy + 4) as f64;
                if inside {
                    expected.insert(vec![ox, oy]);
                }
            }
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn infeasible_constraint_errors() {
        let img = ramp(vec![20, 20]);
        let spec = CropSpec {
            extents: vec![8, 8],
            constraint: CropConstraint::MustContainLandmark(0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_crop(&img, &one(vec![-5.0, 3.0]), &spec, &mut rng),
            Err(Error::NoFeasibleCrop(_))
        ));
        let absent = LandmarkSet::new(vec!["a".into()], vec![vec![3.0, 3.0]], vec![false]).unwrap();
        assert!(sample_crop(&img, &absent, &spec, &mut rng).is_err());
        let big = CropSpec {
            extents: vec![30, 8],
            constraint: CropConstraint::None,
        };
        assert!(sample_crop(&img, &one(vec![3.0, 3.0]), &big, &mut rng).is_err());
    }

    #[test]
    fn crop_around_centering_and_padding() {
        let img = ramp(vec![16, 16]);
        let (c, off) = crop_around(&img, &[7.5, 7.5], &[16, 16]).unwrap();
        assert_eq!(off, vec![0, 0]);
        assert_eq!(c, img);

        let img3 = ramp(vec![20, 20, 20]);
        let (c, off) = crop_around(&img3, &[0.0, 0.0, 0.0], &[16, 16, 16]).unwrap();
        assert_eq!(off, vec![-8, -8, -8]);
        for_each_index(&[16, 16, 16], |i| {
            let v = c.get(i);
            if i.iter().any(|&a| a < 8) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, img3.get(&[i[0] - 8, i[1] - 8, i[2] - 8]));
            }
        });
    }

    proptest! {
        #[test]
        fn crop_around_matches_direct_indexing(
            cx in -10.0f64..30.0, cy in -10.0f64..30.0, cz in -10.0f64..30.0,
            ex in 1usize..12, ey in 1usize..12, ez in 1usize..12,
        ) {
            let img = ramp(vec![17, 13, 9]);
            let (crop, off) = crop_around(&img, &[cx, cy, cz], &[ex, ey, ez]).unwrap();
            let mut ok = true;
            for_each_index(&[ex, ey, ez], |i| {
                let p: Vec<isize> = i.iter().zip(&off).map(|(&a, &o)| a as isize + o).collect();
                if crop.get(i) != img.get_or_zero(&p) {
                    ok = false;
                }
            });
            prop_assert!(ok);
        }
    }
}
