use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{join, AvgPool, BatchNorm, Conv, Head, ResidualPair, Slot, TensorRef};
use super::tensor::{FeatureMap, Float};
use crate::domain::{build_grid, Image, PatchGrid, PredictionField};
use crate::error::{Error, Result};
use crate::targets::DisplacementEncoding;

/// Role of a network in the global-to-local pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Architecture description; everything needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub dims: usize,
    pub num_landmarks: usize,
    pub role: NetworkRole,
    pub in_channels: usize,
    pub stem: Option<StemConfig>,
    pub block_widths: Vec<usize>,
    /// Residual pairs per block.
    pub block_pairs: Vec<usize>,
    /// Indices of blocks preceded by a 2x average pooling layer.
    pub pool_before: Vec<usize>,
    pub head_width: usize,
    pub encoding: DisplacementEncoding,
    /// `false` for classification-only networks.
    pub regression_head: bool,
}

impl NetworkConfig {
    /// Global multi-landmark network: 7-wide stride-2 stem, four residual
    /// blocks of (3, 4, 6, 3) pairs, pooling before the first two blocks.
    pub fn global(dims: usize, num_landmarks: usize) -> Self {
        Self {
            dims,
            num_landmarks,
            role: NetworkRole::Global,
            in_channels: 1,
            stem: Some(StemConfig {
                kernel: 7,
                channels: 16,
                stride: 2,
            }),
            block_widths: vec![32, 64, 128, 256],
            block_pairs: vec![3, 4, 6, 3],
            pool_before: vec![0, 1],
            head_width: 256,
            encoding: DisplacementEncoding::Log,
            regression_head: true,
        }
    }

    /// Global 2D network for large radiographs: pooling before every block.
    pub fn global_xray(num_landmarks: usize) -> Self {
        Self {
            pool_before: vec![0, 1, 2, 3],
            ..Self::global(2, num_landmarks)
        }
    }

    /// Specialized single-landmark network: block, pool, block, heads.
    pub fn local(dims: usize) -> Self {
        Self {
            dims,
            num_landmarks: 1,
            role: NetworkRole::Local,
            in_channels: 1,
            stem: None,
            block_widths: vec![32, 64],
            block_pairs: vec![1, 1],
            pool_before: vec![1],
            head_width: 64,
            encoding: DisplacementEncoding::Log,
            regression_head: true,
        }
    }

    pub fn n_reductions(&self) -> u32 {
        let stem = self.stem.as_ref().map_or(0, |s| u32::from(s.stride == 2));
        stem + self.pool_before.len() as u32
    }

    pub fn grid_spacing(&self) -> usize {
        1 << self.n_reductions()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=3).contains(&self.dims) {
            return bad(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if self.num_landmarks == 0 || self.in_channels == 0 || self.head_width == 0 {
            return bad("landmarks, input channels and head width must be > 0".into());
        }
        if self.block_widths.is_empty() || self.block_widths.len() != self.block_pairs.len() {
            return bad("block_widths and block_pairs must be non-empty and equal length".into());
        }
        if self.block_widths.contains(&0) || self.block_pairs.contains(&0) {
            return bad("block widths and pair counts must be > 0".into());
        }
        let mut pools = self.pool_before.clone();
        pools.sort_unstable();
        pools.dedup();
        if pools.len() != self.pool_before.len()
            || pools.iter().any(|&b| b >= self.block_widths.len())
        {
            return bad(format!("invalid pool positions {:?}", self.pool_before));
        }
        if let Some(stem) = &self.stem {
            if stem.channels == 0 || stem.kernel == 0 || stem.kernel % 2 == 0 {
                return bad("stem needs an odd kernel and > 0 channels".into());
            }
            if !(1..=2).contains(&stem.stride) {
                return bad(format!("stem stride must be 1 or 2, got {}", stem.stride));
            }
        }
        if self.n_reductions() == 0 {
            return bad("network must downsample at least once".into());
        }
        if self.role == NetworkRole::Local && self.num_landmarks != 1 {
            return bad("local networks predict exactly one landmark".into());
        }
        Ok(())
    }

    pub fn regression_channels(&self) -> usize {
        self.num_landmarks * self.dims
    }
}

/// Raw head outputs for a batch: regression values and classification logits.
#[derive(Debug, Clone)]
pub struct HeadOutputs<T> {
    /// `K * dims` channels ordered `[landmark][axis]`; absent for
    /// classification-only networks.
    pub regression: Option<FeatureMap<T>>,
    /// `K` channels of pre-sigmoid scores.
    pub logits: FeatureMap<T>,
}

#[derive(Debug, Clone)]
struct Stem<T> {
    conv: Conv<T>,
    bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
struct Block<T> {
    pool: Option<AvgPool>,
    pairs: Vec<ResidualPair<T>>,
    pool_in_shape: Option<[usize; 3]>,
}

/// Fully convolutional dual-head network.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    stem: Option<Stem<T>>,
    blocks: Vec<Block<T>>,
    regression: Option<Head<T>>,
    classification: Head<T>,
}

impl<T: Float> Network<T> {
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.dims;
        let mut channels = config.in_channels;
        let stem = config.stem.as_ref().map(|s| {
            let conv = Conv::new(dims, channels, s.channels, s.kernel, s.stride, false, rng);
            channels = s.channels;
            Stem {
                conv,
                bn: BatchNorm::new(s.channels, true),
            }
        });
        let mut blocks = Vec::with_capacity(config.block_widths.len());
        for (b, (&width, &pairs)) in config
            .block_widths
            .iter()
            .zip(&config.block_pairs)
            .enumerate()
        {
            let pool = config.pool_before.contains(&b).then(|| AvgPool::new(dims));
            let mut list = Vec::with_capacity(pairs);
            for _ in 0..pairs {
                list.push(ResidualPair::new(dims, channels, width, rng));
                channels = width;
            }
            blocks.push(Block {
                pool,
                pairs: list,
                pool_in_shape: None,
            });
        }
        let regression = config.regression_head.then(|| {
            Head::new(
                dims,
                channels,
                config.head_width,
                config.regression_channels(),
                rng,
            )
        });
        let classification = Head::new(dims, channels, config.head_width, config.num_landmarks, rng);
        Ok(Self {
            config,
            stem,
            blocks,
            regression,
            classification,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn n_reductions(&self) -> u32 {
        self.config.n_reductions()
    }

    /// Inference-mode forward pass (batch-norm running statistics).
    pub fn forward_maps(&self, x: &FeatureMap<T>) -> HeadOutputs<T> {
        let mut h = match &self.stem {
            Some(stem) => stem.bn.forward(&stem.conv.forward(x)),
            None => x.clone(),
        };
        for block in &self.blocks {
            if let Some(pool) = &block.pool {
                h = pool.forward(&h);
            }
            for pair in &block.pairs {
                h = pair.forward(&h);
            }
        }
        HeadOutputs {
            regression: self.regression.as_ref().map(|head| head.forward(&h)),
            logits: self.classification.forward(&h),
        }
    }

    /// Training-mode forward pass; caches activations for [`Self::backward`].
    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> HeadOutputs<T> {
        let mut h = match &mut self.stem {
            Some(stem) => {
                let h = stem.conv.forward_train(x);
                stem.bn.forward_train(&h)
            }
            None => x.clone(),
        };
        for block in &mut self.blocks {
            if let Some(pool) = &block.pool {
                block.pool_in_shape = Some(h.shape);
                h = pool.forward(&h);
            }
            for pair in &mut block.pairs {
                h = pair.forward_train(&h);
            }
        }
        HeadOutputs {
            regression: self.regression.as_mut().map(|head| head.forward_train(&h)),
            logits: self.classification.forward_train(&h),
        }
    }

    /// Backpropagate head-output gradients, accumulating parameter gradients.
    pub fn backward(&mut self, d_regression: Option<&FeatureMap<T>>, d_logits: &FeatureMap<T>) {
        let mut dh = self.classification.backward(d_logits);
        if let (Some(head), Some(dr)) = (self.regression.as_mut(), d_regression) {
            let dr = head.backward(dr);
            for (a, b) in dh.data.iter_mut().zip(&dr.data) {
                *a += *b;
            }
        }
        for block in self.blocks.iter_mut().rev() {
            for pair in block.pairs.iter_mut().rev() {
                dh = pair.backward(&dh);
            }
            if let Some(pool) = &block.pool {
                let shape = block.pool_in_shape.take().expect("pool shape cached");
                dh = pool.backward(&dh, shape);
            }
        }
        if let Some(stem) = &mut self.stem {
            let d = stem.bn.backward(&dh);
            stem.conv.backward(&d);
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    /// Every parameter and buffer with its path, in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        if let Some(stem) = &self.stem {
            stem.conv.tensors("stem.conv", &mut out);
            stem.bn.tensors("stem.bn", &mut out);
        }
        for (b, block) in self.blocks.iter().enumerate() {
            for (p, pair) in block.pairs.iter().enumerate() {
                pair.tensors(&format!("block{b}.pair{p}"), &mut out);
            }
        }
        if let Some(head) = &self.regression {
            head.tensors("regression", &mut out);
        }
        self.classification.tensors("classification", &mut out);
        out
    }

    pub fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        if let Some(stem) = &mut self.stem {
            stem.conv.tensors_mut("stem.conv", f);
            stem.bn.tensors_mut("stem.bn", f);
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (p, pair) in block.pairs.iter_mut().enumerate() {
                pair.tensors_mut(&join(&format!("block{b}"), &format!("pair{p}")), f);
            }
        }
        if let Some(head) = &mut self.regression {
            head.tensors_mut("regression", f);
        }
        self.classification.tensors_mut("classification", f);
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        // tensors_mut needs &mut; count through the read-only listing instead
        for (path, _, values) in self.tensors() {
            if !path.ends_with("running_mean") && !path.ends_with("running_var") {
                n += values.len();
            }
        }
        n
    }

    /// Output grid for an image of the given extents.
    pub fn grid_for(&self, extents: &[usize]) -> Result<PatchGrid> {
        if extents.len() != self.config.dims {
            return Err(Error::DimensionMismatch {
                expected: self.config.dims,
                got: extents.len(),
            });
        }
        build_grid(extents, self.n_reductions())
    }

    /// Stack equally sized images into a network input, dropping trailing
    /// voxels that do not fill a whole grid cell.
    pub fn input_batch(&self, images: &[&Image]) -> Result<(FeatureMap<T>, PatchGrid)> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("input batch".into()))?;
        let grid = self.grid_for(first.extents())?;
        if images.iter().any(|im| im.extents() != first.extents()) {
            return Err(Error::ShapeMismatch("batch images differ in extents".into()));
        }
        let covered = grid.covered_extents();
        let shape = spatial_shape(&covered);
        let sp: usize = shape.iter().product();
        let mut data = Vec::with_capacity(sp * images.len());
        for im in images {
            copy_truncated(im, &covered, &mut data);
        }
        Ok((FeatureMap::from_data(1, images.len(), shape, data), grid))
    }

    /// Inference on a single image.
    pub fn forward(&self, img: &Image) -> Result<PredictionField> {
        if self.config.in_channels != 1 {
            return Err(Error::InvalidConfig(
                "image inference requires a single input channel".into(),
            ));
        }
        let (x, grid) = self.input_batch(&[img])?;
        let out = self.forward_maps(&x);
        let mut fields = outputs_to_fields(&self.config, &grid, &out)?;
        Ok(fields.remove(0))
    }
}

/// Network spatial shape `[d, h, w]` for image extents `(x, y[, z])`.
pub fn spatial_shape(extents: &[usize]) -> [usize; 3] {
    match extents {
        [x, y] => [1, *y, *x],
        [x, y, z] => [*z, *y, *x],
        _ => panic!("extents must have 2 or 3 axes"),
    }
}

fn copy_truncated<T: Float>(img: &Image, covered: &[usize], out: &mut Vec<T>) {
    let ext = img.extents();
    let data = img.data();
    let (cx, cy) = (covered[0], covered[1]);
    let cz = covered.get(2).copied().unwrap_or(1);
    for z in 0..cz {
        for y in 0..cy {
            let start = (z * ext[1] + y) * ext[0];
            out.extend(data[start..start + cx].iter().map(|&v| T::from_f32(v).unwrap()));
        }
    }
}

/// Sigmoid evaluated in f64 with the logit bounded so that the result stays
/// strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-30.0, 30.0);
    1.0 / (1.0 + (-z).exp())
}

/// Convert batched head outputs into per-image prediction fields.
pub fn outputs_to_fields<T: Float>(
    config: &NetworkConfig,
    grid: &PatchGrid,
    out: &HeadOutputs<T>,
) -> Result<Vec<PredictionField>> {
    let k = config.num_landmarks;
    let dims = config.dims;
    let cells = grid.num_cells();
    let logits = &out.logits;
    if logits.spatial() != cells || logits.channels != k {
        return Err(Error::ShapeMismatch(format!(
            "network output has {} cells x {} channels, grid expects {} x {}",
            logits.spatial(),
            logits.channels,
            cells,
            k
        )));
    }
    let batch = logits.batch;
    let mut fields = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut probs = vec![0.0; cells * k];
        for l in 0..k {
            let base = (l * batch + b) * cells;
            for j in 0..cells {
                probs[j * k + l] = sigmoid(logits.data[base + j].as_f64());
            }
        }
        let mut disp = vec![0.0; cells * k * dims];
        let encoding = match &out.regression {
            Some(reg) => {
                for ch in 0..k * dims {
                    let base = (ch * batch + b) * cells;
                    for j in 0..cells {
                        disp[j * k * dims + ch] = reg.data[base + j].as_f64();
                    }
                }
                config.encoding
            }
            None => DisplacementEncoding::Raw,
        };
        fields.push(PredictionField::new(grid.clone(), k, encoding, disp, probs)?);
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_global(dims: usize) -> NetworkConfig {
        NetworkConfig {
            stem: Some(StemConfig {
                kernel: 3,
                channels: 4,
                stride: 2,
            }),
            block_widths: vec![4, 6],
            block_pairs: vec![1, 1],
            pool_before: vec![0],
            head_width: 8,
            ..NetworkConfig::global(dims, 2)
        }
    }

    #[test]
    fn reductions_per_variant() {
        assert_eq!(NetworkConfig::global(3, 8).n_reductions(), 3);
        assert_eq!(NetworkConfig::global_xray(19).n_reductions(), 5);
        assert_eq!(NetworkConfig::local(3).n_reductions(), 1);
    }

    #[test]
    fn head_channel_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::<f32>::build(NetworkConfig::local(3), &mut rng).unwrap();
        let img = Image::zeros(vec![16, 16, 16], vec![1.0; 3]).unwrap();
        let (x, grid) = net.input_batch(&[&img]).unwrap();
        assert_eq!(grid.cell_counts, vec![8, 8, 8]);
        let out = net.forward_maps(&x);
        assert_eq!(out.regression.as_ref().unwrap().channels, 3);
        assert_eq!(out.logits.channels, 1);

        let cfg = tiny_global(2);
        let net = Network::<f32>::build(cfg, &mut rng).unwrap();
        let img = Image::zeros(vec![16, 24], vec![1.0; 2]).unwrap();
        let (x, _) = net.input_batch(&[&img]).unwrap();
        let out = net.forward_maps(&x);
        assert_eq!(out.regression.unwrap().channels, 4);
        assert_eq!(out.logits.channels, 2);
        assert_eq!(out.logits.shape, [1, 6, 4]);
    }

    #[test]
    fn shapes_independent_of_seed() {
        let a = Network::<f32>::build(NetworkConfig::global(3, 8), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = Network::<f32>::build(NetworkConfig::global(3, 8), &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let sa: Vec<_> = a.tensors().into_iter().map(|(p, s, _)| (p, s)).collect();
        let sb: Vec<_> = b.tensors().into_iter().map(|(p, s, _)| (p, s)).collect();
        assert_eq!(sa, sb);
        assert_eq!(a.num_parameters(), b.num_parameters());
        assert_ne!(a.tensors()[0].2, b.tensors()[0].2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = NetworkConfig::global(3, 8);
        cfg.dims = 4;
        assert!(Network::<f32>::build(cfg, &mut rng).is_err());
        let mut cfg = NetworkConfig::local(2);
        cfg.num_landmarks = 2;
        assert!(Network::<f32>::build(cfg, &mut rng).is_err());
        let mut cfg = NetworkConfig::global(2, 1);
        cfg.pool_before = vec![7];
        assert!(Network::<f32>::build(cfg, &mut rng).is_err());
        let mut cfg = NetworkConfig::global(2, 1);
        cfg.block_pairs.pop();
        assert!(Network::<f32>::build(cfg, &mut rng).is_err());
    }

    #[test]
    fn forward_probabilities_open_interval_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::<f32>::build(tiny_global(2), &mut rng).unwrap();
        let data: Vec<f32> = (0..20 * 28).map(|i| ((i * 37) % 101) as f32 * 50.0).collect();
        let img = Image::new(vec![20, 28], vec![1.0, 1.0], data).unwrap();
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.cell_counts, vec![5, 7]);
        assert!(a.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn too_small_image_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::<f32>::build(tiny_global(2), &mut rng).unwrap();
        let img = Image::zeros(vec![3, 28], vec![1.0, 1.0]).unwrap();
        assert!(matches!(net.forward(&img), Err(Error::ExtentTooSmall { .. })));
    }
}
