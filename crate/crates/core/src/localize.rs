//! Fusion of per-cell predictions into coordinates, and the global-to-local
//! pipeline.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{vox_to_mm, Image, LandmarkSet, PredictionField};
use crate::error::{Error, Result};
use crate::model::{checkpoint, Network, NetworkRole, TrainingMeta};
use crate::sampling::crop_around;

/// Minimum probability mass accepted by the confidence-weighted modes.
pub const MIN_MASS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Probability-weighted mean of `center + displacement`.
    #[default]
    Weighted,
    /// Unweighted mean of `center + displacement`.
    Uniform,
    /// Probability-weighted mean of cell centers.
    CentersWeighted,
}

/// Fuse landmark `k` of `field` into one voxel coordinate.
pub fn fuse(field: &PredictionField, mode: FusionMode, k: usize) -> Result<Vec<f64>> {
    if k >= field.num_landmarks {
        return Err(Error::InvalidConfig(format!(
            "landmark {k} out of range for {} outputs",
            field.num_landmarks
        )));
    }
    let dims = field.dims();
    let cells = field.grid.num_cells();
    if cells == 0 {
        return Err(Error::Empty("prediction field has no cells".into()));
    }
    let mut acc = vec![0.0; dims];
    let mut mass = 0.0;
    for j in 0..cells {
        let w = match mode {
            FusionMode::Uniform => 1.0,
            _ => field.probability(j, k),
        };
        let d = field.displacement(j, k);
        let idx = field.grid.cell_index(j);
        for (a, acc_a) in acc.iter_mut().enumerate() {
            let c = field.grid.center_1d(idx[a]);
            let target = match mode {
                FusionMode::CentersWeighted => c,
                _ => c + field.encoding.decode(d[a]),
            };
            *acc_a += w * target;
        }
        mass += w;
    }
    if mode != FusionMode::Uniform && !(mass > MIN_MASS) {
        return Err(Error::DegenerateConfidence {
            mass,
            threshold: MIN_MASS,
        });
    }
    let out: Vec<f64> = acc.into_iter().map(|s| s / mass).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("fused coordinate for landmark {k}")));
    }
    Ok(out)
}

/// Fuse every landmark of a field.
pub fn fuse_all(field: &PredictionField, mode: FusionMode) -> Result<Vec<Vec<f64>>> {
    (0..field.num_landmarks).map(|k| fuse(field, mode, k)).collect()
}

/// Global estimates for an already standardized image.
pub fn global_estimates(net: &Network<f32>, std_img: &Image, mode: FusionMode) -> Result<Vec<Vec<f64>>> {
    check_fusion(net, mode)?;
    let field = net.forward(std_img)?;
    fuse_all(&field, mode)
}

/// Classification-only networks carry no displacements and can only vote
/// with cell centers.
pub fn check_fusion(net: &Network<f32>, mode: FusionMode) -> Result<()> {
    if !net.config().regression_head && mode != FusionMode::CentersWeighted {
        return Err(Error::InvalidConfig(format!(
            "network without a regression head requires centers_weighted fusion, got {mode:?}"
        )));
    }
    Ok(())
}

/// Standardize `img`, run the global network and fuse each landmark.
pub fn global_localize(
    net: &Network<f32>,
    img: &Image,
    mode: FusionMode,
    names: &[String],
) -> Result<LandmarkSet> {
    let coords = global_estimates(net, &img.standardized(), mode)?;
    LandmarkSet::all_present(names.to_vec(), coords)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub coord: Vec<f64>,
    /// The local field had no usable confidence and `coord` is the input
    /// estimate unchanged.
    pub fallback: bool,
}

/// Refinement on an already standardized image.
pub fn refine_standardized(
    net: &Network<f32>,
    std_img: &Image,
    estimate: &[f64],
    extents: &[usize],
    mode: FusionMode,
) -> Result<Refinement> {
    if net.config().num_landmarks != 1 {
        return Err(Error::InvalidConfig(format!(
            "local network must predict one landmark, got {}",
            net.config().num_landmarks
        )));
    }
    let (crop, offset) = crop_around(std_img, estimate, extents)?;
    let field = net.forward(&crop)?;
    match fuse(&field, mode, 0) {
        Ok(r) => Ok(Refinement {
            coord: r.iter().zip(&offset).map(|(v, &o)| v + o as f64).collect(),
            fallback: false,
        }),
        Err(Error::DegenerateConfidence { .. }) => Ok(Refinement {
            coord: estimate.to_vec(),
            fallback: true,
        }),
        Err(e) => Err(e),
    }
}

/// Refine `estimate` with a single-landmark local network on a crop centered
/// at the estimate.
pub fn refine(
    net: &Network<f32>,
    img: &Image,
    estimate: &[f64],
    extents: &[usize],
    mode: FusionMode,
) -> Result<Refinement> {
    refine_standardized(net, &img.standardized(), estimate, extents, mode)
}

pub struct PipelineModel {
    pub global: Network<f32>,
    pub names: Vec<String>,
    pub global_fusion: FusionMode,
    /// One optional local network per landmark.
    pub locals: Vec<Option<Network<f32>>>,
    pub local_extents: Vec<usize>,
    pub local_fusion: FusionMode,
}

impl PipelineModel {
    pub fn new(global: Network<f32>, names: Vec<String>, global_fusion: FusionMode) -> Result<Self> {
        let k = global.config().num_landmarks;
        if names.len() != k {
            return Err(Error::NameMismatch(format!(
                "global network predicts {k} landmarks but {} names were given",
                names.len()
            )));
        }
        check_fusion(&global, global_fusion)?;
        let dims = global.config().dims;
        Ok(Self {
            global,
            names,
            global_fusion,
            locals: (0..k).map(|_| None).collect(),
            local_extents: vec![16; dims],
            local_fusion: FusionMode::Weighted,
        })
    }

    /// Load a global checkpoint; landmark names come from its metadata.
    pub fn load(global_path: &Path, global_fusion: FusionMode) -> Result<Self> {
        let (net, meta) = checkpoint::load(global_path)?;
        let names = names_or_default(&meta, net.config().num_landmarks);
        Self::new(net, names, global_fusion)
    }

    pub fn set_local(&mut self, k: usize, net: Network<f32>) -> Result<()> {
        let cfg = net.config();
        if k >= self.locals.len() {
            return Err(Error::InvalidConfig(format!("no landmark {k}")));
        }
        if cfg.num_landmarks != 1 || cfg.dims != self.global.config().dims {
            return Err(Error::InvalidConfig(format!(
                "local network for landmark {k} must be single-landmark and {}D",
                self.global.config().dims
            )));
        }
        if cfg.role != NetworkRole::Local {
            return Err(Error::InvalidConfig(format!(
                "network for landmark {k} is not a local network"
            )));
        }
        self.locals[k] = Some(net);
        Ok(())
    }

    pub fn load_local(&mut self, k: usize, path: &Path) -> Result<()> {
        let (net, _) = checkpoint::load(path)?;
        self.set_local(k, net)
    }
}

fn names_or_default(meta: &TrainingMeta, k: usize) -> Vec<String> {
    if meta.landmark_names.len() == k {
        meta.landmark_names.clone()
    } else {
        (0..k).map(|i| format!("landmark_{i}")).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub global_ms: f64,
    /// Per-landmark refinement time, zero where no local network exists.
    pub refine_ms: Vec<f64>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub landmarks: LandmarkSet,
    pub global: Vec<Vec<f64>>,
    pub refined: Vec<bool>,
    pub fallback: Vec<bool>,
    pub timings: Timings,
}

pub fn pipeline_localize(pm: &PipelineModel, img: &Image) -> Result<PipelineOutput> {
    let start = Instant::now();
    let std_img = img.standardized();
    let global = global_estimates(&pm.global, &std_img, pm.global_fusion)?;
    let global_ms = ms(start);
    let k = global.len();
    let mut coords = global.clone();
    let mut refined = vec![false; k];
    let mut fallback = vec![false; k];
    let mut refine_ms = vec![0.0; k];
    for (i, local) in pm.locals.iter().enumerate() {
        let Some(net) = local else { continue };
        let t = Instant::now();
        let r = refine_standardized(net, &std_img, &global[i], &pm.local_extents, pm.local_fusion)?;
        refine_ms[i] = ms(t);
        refined[i] = !r.fallback;
        fallback[i] = r.fallback;
        coords[i] = r.coord;
    }
    let landmarks = LandmarkSet::all_present(pm.names.clone(), coords)?;
    Ok(PipelineOutput {
        landmarks,
        global,
        refined,
        fallback,
        timings: Timings {
            global_ms,
            refine_ms,
            total_ms: ms(start),
        },
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkPrediction {
    pub name: String,
    pub voxel: Vec<f64>,
    pub mm: Vec<f64>,
    pub global_voxel: Vec<f64>,
    pub refined: bool,
    pub fallback: bool,
}

/// Per-image prediction record, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePrediction {
    pub image_id: String,
    pub spacing: Vec<f64>,
    pub landmarks: Vec<LandmarkPrediction>,
    pub timings: Timings,
}

impl ImagePrediction {
    pub fn from_output(image_id: &str, spacing: &[f64], out: &PipelineOutput) -> Result<Self> {
        let landmarks = (0..out.landmarks.len())
            .map(|i| {
                Ok(LandmarkPrediction {
                    name: out.landmarks.names[i].clone(),
                    voxel: out.landmarks.coords[i].clone(),
                    mm: vox_to_mm(&out.landmarks.coords[i], spacing)?,
                    global_voxel: out.global[i].clone(),
                    refined: out.refined[i],
                    fallback: out.fallback[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_id: image_id.to_string(),
            spacing: spacing.to_vec(),
            landmarks,
            timings: out.timings.clone(),
        })
    }

    pub fn to_landmark_set(&self) -> Result<LandmarkSet> {
        LandmarkSet::all_present(
            self.landmarks.iter().map(|l| l.name.clone()).collect(),
            self.landmarks.iter().map(|l| l.voxel.clone()).collect(),
        )
    }
}
