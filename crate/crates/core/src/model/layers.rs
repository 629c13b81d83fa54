//! Layers with hand-written backward passes.
//!
//! Every layer has an inference path taking `&self` and a training path that
//! caches what its backward pass needs. Parameter gradients accumulate into
//! [`Param::grad`] until cleared.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{matmul, FeatureMap, Float};

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Float> Param<T> {
    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            value: vec![v; len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn he_normal<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let len = shape.iter().product();
        let value = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self {
            shape,
            value,
            grad: vec![T::zero(); len],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Mutable access to a named tensor of a layer.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a [usize], &'a mut Vec<T>),
}

/// Read-only view of a named tensor: path, shape, values.
pub type TensorRef<'a, T> = (String, Vec<usize>, &'a [T]);

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn im2col<T: Float>(x: &FeatureMap<T>, g: &ConvGeom) -> Vec<T> {
    let [id, ih, iw] = g.in_shape;
    let [od, oh, ow] = g.out_shape;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let in_sp = id * ih * iw;
    let out_sp = od * oh * ow;
    let cols_n = x.batch * out_sp;
    let mut cols = vec![T::zero(); x.channels * g.taps() * cols_n];
    let mut row = 0;
    for c in 0..x.channels {
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(od, id, kz, sd, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, ih, ky, sh, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, iw, kx, sw, pw);
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..x.batch {
                        let src = &x.data[(c * x.batch + b) * in_sp..(c * x.batch + b + 1) * in_sp];
                        let dst = &mut dst_row[b * out_sp..(b + 1) * out_sp];
                        for oz in z_lo..z_hi {
                            let iz = oz * sd + kz - pd;
                            for oy in y_lo..y_hi {
                                let iy = oy * sh + ky - ph;
                                let src_line = &src[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                let dst_line =
                                    &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                if sw == 1 {
                                    let ix0 = x_lo + kx - pw;
                                    dst_line[x_lo..x_hi]
                                        .copy_from_slice(&src_line[ix0..ix0 + (x_hi - x_lo)]);
                                } else {
                                    for ox in x_lo..x_hi {
                                        dst_line[ox] = src_line[ox * sw + kx - pw];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], channels: usize, batch: usize, g: &ConvGeom) -> FeatureMap<T> {
    let [id, ih, iw] = g.in_shape;
    let [od, oh, ow] = g.out_shape;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let in_sp = id * ih * iw;
    let out_sp = od * oh * ow;
    let cols_n = batch * out_sp;
    let mut dx = FeatureMap::zeros(channels, batch, g.in_shape);
    let mut row = 0;
    for c in 0..channels {
        for kz in 0..kd {
            let (z_lo, z_hi) = valid_range(od, id, kz, sd, pd);
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, ih, ky, sh, ph);
                for kx in 0..kw {
                    let (x_lo, x_hi) = valid_range(ow, iw, kx, sw, pw);
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..batch {
                        let dst = &mut dx.data[(c * batch + b) * in_sp..(c * batch + b + 1) * in_sp];
                        let src = &src_row[b * out_sp..(b + 1) * out_sp];
                        for oz in z_lo..z_hi {
                            let iz = oz * sd + kz - pd;
                            for oy in y_lo..y_hi {
                                let iy = oy * sh + ky - ph;
                                let dst_line =
                                    &mut dst[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                let src_line = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for ox in x_lo..x_hi {
                                    dst_line[ox * sw + kx - pw] += src_line[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    geom: ConvGeom,
    in_channels: usize,
    batch: usize,
    /// im2col matrix, or the raw input for pointwise convolutions.
    cols: Vec<T>,
}

/// N-d convolution with zero padding; 2D data uses a depth-1 kernel.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// `[out, in * taps]`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Float> Conv<T> {
    /// Cubic (or square, for `dims == 2`) kernel with "same"-style padding.
    pub fn new<R: Rng + ?Sized>(
        dims: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let spatial = |v: usize, flat: usize| if dims == 2 { [flat, v, v] } else { [v, v, v] };
        let kernel3 = spatial(kernel, 1);
        let stride3 = spatial(stride, 1);
        let pad3 = spatial(kernel / 2, 0);
        let fan_in = in_channels * kernel3.iter().product::<usize>();
        let weight = Param::he_normal(vec![out_channels, fan_in], fan_in, rng);
        let bias = bias.then(|| Param::filled(vec![out_channels], T::zero()));
        Self {
            in_channels,
            out_channels,
            kernel: kernel3,
            stride: stride3,
            pad: pad3,
            weight,
            bias,
            cache: None,
        }
    }

    fn geom(&self, in_shape: [usize; 3]) -> ConvGeom {
        let mut out_shape = [0; 3];
        for a in 0..3 {
            out_shape[a] = out_extent(in_shape[a], self.kernel[a], self.stride[a], self.pad[a]);
        }
        ConvGeom {
            in_shape,
            out_shape,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn compute(&self, x: &FeatureMap<T>, keep: bool) -> (FeatureMap<T>, Option<ConvCache<T>>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let g = self.geom(x.shape);
        let out_sp: usize = g.out_shape.iter().product();
        let n = x.batch * out_sp;
        let k = self.in_channels * g.taps();
        let mut y = FeatureMap::zeros(self.out_channels, x.batch, g.out_shape);
        let cols_owned;
        let cols: &[T] = if g.is_pointwise() {
            &x.data
        } else {
            cols_owned = im2col(x, &g);
            &cols_owned
        };
        matmul(
            self.out_channels,
            k,
            n,
            &self.weight.value,
            false,
            cols,
            false,
            &mut y.data,
            false,
        );
        if let Some(b) = &self.bias {
            for (o, chunk) in y.data.chunks_mut(n).enumerate() {
                let bo = b.value[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let cache = keep.then(|| ConvCache {
            geom: g,
            in_channels: x.channels,
            batch: x.batch,
            cols: cols.to_vec(),
        });
        (y, cache)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.compute(x, false).0
    }

    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (y, cache) = self.compute(x, true);
        self.cache = cache;
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let cache = self.cache.take().expect("conv backward without forward_train");
        let g = cache.geom;
        let n = dy.plane();
        let k = cache.in_channels * g.taps();
        assert_eq!(dy.channels, self.out_channels);
        // dW += dY * cols^T
        matmul(
            self.out_channels,
            n,
            k,
            &dy.data,
            false,
            &cache.cols,
            true,
            &mut self.weight.grad,
            true,
        );
        if let Some(b) = &mut self.bias {
            for (o, chunk) in dy.data.chunks(n).enumerate() {
                b.grad[o] += chunk.iter().copied().sum::<T>();
            }
        }
        // dcols = W^T * dY
        let mut dcols = vec![T::zero(); k * n];
        matmul(
            k,
            self.out_channels,
            n,
            &self.weight.value,
            true,
            &dy.data,
            false,
            &mut dcols,
            false,
        );
        if g.is_pointwise() {
            FeatureMap::from_data(cache.in_channels, cache.batch, g.in_shape, dcols)
        } else {
            col2im(&dcols, cache.in_channels, cache.batch, &g)
        }
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push((
            join(prefix, "weight"),
            self.weight.shape.clone(),
            &self.weight.value,
        ));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.shape.clone(), &b.value));
        }
    }

    pub fn tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Post-activation output, only kept when the ReLU is fused.
    out: Option<Vec<T>>,
}

/// Per-channel batch normalization, optionally fused with a ReLU.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub relu: bool,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    stat_shape: [usize; 1],
    cache: Option<BnCache<T>>,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize, relu: bool) -> Self {
        Self {
            channels,
            relu,
            momentum: 0.9,
            eps: 1e-5,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            stat_shape: [channels],
            cache: None,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let n = x.plane();
        let eps = T::from_f64_lossy(self.eps);
        let mut y = x.clone();
        for (c, chunk) in y.data.chunks_mut(n).enumerate() {
            let scale = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for v in chunk.iter_mut() {
                *v = *v * scale + shift;
                if self.relu && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let n = x.plane();
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(self.eps);
        let mom = T::from_f64_lossy(self.momentum);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); self.channels];
        let mut y = FeatureMap::zeros(x.channels, x.batch, x.shape);
        for c in 0..self.channels {
            let src = &x.data[c * n..(c + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[c] = istd;
            let unbiased = if n > 1 {
                var * nf / T::from_usize(n - 1).unwrap()
            } else {
                var
            };
            self.running_mean[c] = mom * self.running_mean[c] + (T::one() - mom) * mean;
            self.running_var[c] = mom * self.running_var[c] + (T::one() - mom) * unbiased;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let xh = &mut xhat[c * n..(c + 1) * n];
            let out = &mut y.data[c * n..(c + 1) * n];
            for i in 0..n {
                let h = (src[i] - mean) * istd;
                xh[i] = h;
                let v = g * h + b;
                out[i] = if self.relu && v < T::zero() { T::zero() } else { v };
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            out: self.relu.then(|| y.data.clone()),
        });
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let cache = self.cache.take().expect("batch norm backward without forward_train");
        let n = dy.plane();
        let nf = T::from_usize(n).unwrap();
        let mut dx = FeatureMap::zeros(dy.channels, dy.batch, dy.shape);
        let mut dyc = vec![T::zero(); n];
        for c in 0..self.channels {
            let src = &dy.data[c * n..(c + 1) * n];
            match &cache.out {
                Some(out) => {
                    let o = &out[c * n..(c + 1) * n];
                    for i in 0..n {
                        dyc[i] = if o[i] > T::zero() { src[i] } else { T::zero() };
                    }
                }
                None => dyc.copy_from_slice(src),
            }
            let xh = &cache.xhat[c * n..(c + 1) * n];
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..n {
                sum_dy += dyc[i];
                sum_dy_xh += dyc[i] * xh[i];
            }
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let g = self.gamma.value[c];
            let k = g * cache.inv_std[c] / nf;
            let out = &mut dx.data[c * n..(c + 1) * n];
            for i in 0..n {
                out[i] = k * (nf * dyc[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
        dx
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push((join(prefix, "gamma"), self.gamma.shape.clone(), &self.gamma.value));
        out.push((join(prefix, "beta"), self.beta.shape.clone(), &self.beta.value));
        out.push((
            join(prefix, "running_mean"),
            vec![self.channels],
            &self.running_mean,
        ));
        out.push((
            join(prefix, "running_var"),
            vec![self.channels],
            &self.running_var,
        ));
    }

    pub fn tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(
            &join(prefix, "running_mean"),
            Slot::Buffer(&self.stat_shape, &mut self.running_mean),
        );
        f(
            &join(prefix, "running_var"),
            Slot::Buffer(&self.stat_shape, &mut self.running_var),
        );
    }
}

/// Average pooling with equal size and stride; remainders are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AvgPool {
    pub factor: [usize; 3],
}

impl AvgPool {
    pub fn new(dims: usize) -> Self {
        Self {
            factor: if dims == 2 { [1, 2, 2] } else { [2, 2, 2] },
        }
    }

    pub fn out_shape(&self, s: [usize; 3]) -> [usize; 3] {
        [s[0] / self.factor[0], s[1] / self.factor[1], s[2] / self.factor[2]]
    }

    pub fn forward<T: Float>(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let [fd, fh, fw] = self.factor;
        let [id, ih, iw] = x.shape;
        let os = self.out_shape(x.shape);
        let [od, oh, ow] = os;
        let scale = T::one() / T::from_usize(fd * fh * fw).unwrap();
        let mut y = FeatureMap::zeros(x.channels, x.batch, os);
        let in_sp = id * ih * iw;
        let out_sp = od * oh * ow;
        for p in 0..x.channels * x.batch {
            let src = &x.data[p * in_sp..(p + 1) * in_sp];
            let dst = &mut y.data[p * out_sp..(p + 1) * out_sp];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for dz in 0..fd {
                            for dy in 0..fh {
                                let line = ((oz * fd + dz) * ih + oy * fh + dy) * iw + ox * fw;
                                for dx in 0..fw {
                                    acc += src[line + dx];
                                }
                            }
                        }
                        dst[(oz * oh + oy) * ow + ox] = acc * scale;
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Float>(&self, dy: &FeatureMap<T>, in_shape: [usize; 3]) -> FeatureMap<T> {
        let [fd, fh, fw] = self.factor;
        let [id, ih, iw] = in_shape;
        let [od, oh, ow] = dy.shape;
        let scale = T::one() / T::from_usize(fd * fh * fw).unwrap();
        let mut dx = FeatureMap::zeros(dy.channels, dy.batch, in_shape);
        let in_sp = id * ih * iw;
        let out_sp = od * oh * ow;
        for p in 0..dy.channels * dy.batch {
            let src = &dy.data[p * out_sp..(p + 1) * out_sp];
            let dst = &mut dx.data[p * in_sp..(p + 1) * in_sp];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = src[(oz * oh + oy) * ow + ox] * scale;
                        for dz in 0..fd {
                            for dyy in 0..fh {
                                let line = ((oz * fd + dz) * ih + oy * fh + dyy) * iw + ox * fw;
                                for dxx in 0..fw {
                                    dst[line + dxx] = g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Two 3x3 convolutions with batch norm and an identity (or projected) skip.
#[derive(Debug, Clone)]
pub struct ResidualPair<T> {
    pub conv1: Conv<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv<T>,
    pub bn2: BatchNorm<T>,
    pub projection: Option<(Conv<T>, BatchNorm<T>)>,
    out_cache: Option<Vec<T>>,
}

impl<T: Float> ResidualPair<T> {
    pub fn new<R: Rng + ?Sized>(dims: usize, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let projection = (in_ch != out_ch).then(|| {
            (
                Conv::new(dims, in_ch, out_ch, 1, 1, false, rng),
                BatchNorm::new(out_ch, false),
            )
        });
        Self {
            conv1: Conv::new(dims, in_ch, out_ch, 3, 1, false, rng),
            bn1: BatchNorm::new(out_ch, true),
            conv2: Conv::new(dims, out_ch, out_ch, 3, 1, false, rng),
            bn2: BatchNorm::new(out_ch, false),
            projection,
            out_cache: None,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let h = self.bn1.forward(&self.conv1.forward(x));
        let mut y = self.bn2.forward(&self.conv2.forward(&h));
        match &self.projection {
            Some((conv, bn)) => {
                let s = bn.forward(&conv.forward(x));
                add_relu(&mut y.data, &s.data);
            }
            None => add_relu(&mut y.data, &x.data),
        }
        y
    }

    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let h = self.conv1.forward_train(x);
        let h = self.bn1.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        let mut y = self.bn2.forward_train(&h);
        match &mut self.projection {
            Some((conv, bn)) => {
                let s = conv.forward_train(x);
                let s = bn.forward_train(&s);
                add_relu(&mut y.data, &s.data);
            }
            None => add_relu(&mut y.data, &x.data),
        }
        self.out_cache = Some(y.data.clone());
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let out = self.out_cache.take().expect("residual backward without forward_train");
        let mut d = dy.clone();
        for (g, &o) in d.data.iter_mut().zip(&out) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
        let dh = self.bn2.backward(&d);
        let dh = self.conv2.backward(&dh);
        let dh = self.bn1.backward(&dh);
        let mut dx = self.conv1.backward(&dh);
        match &mut self.projection {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                let ds = conv.backward(&ds);
                for (a, b) in dx.data.iter_mut().zip(&ds.data) {
                    *a += *b;
                }
            }
            None => {
                for (a, b) in dx.data.iter_mut().zip(&d.data) {
                    *a += *b;
                }
            }
        }
        dx
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.conv1.tensors(&join(prefix, "conv1"), out);
        self.bn1.tensors(&join(prefix, "bn1"), out);
        self.conv2.tensors(&join(prefix, "conv2"), out);
        self.bn2.tensors(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &self.projection {
            conv.tensors(&join(prefix, "proj_conv"), out);
            bn.tensors(&join(prefix, "proj_bn"), out);
        }
    }

    pub fn tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.tensors_mut(&join(prefix, "conv1"), f);
        self.bn1.tensors_mut(&join(prefix, "bn1"), f);
        self.conv2.tensors_mut(&join(prefix, "conv2"), f);
        self.bn2.tensors_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.projection {
            conv.tensors_mut(&join(prefix, "proj_conv"), f);
            bn.tensors_mut(&join(prefix, "proj_bn"), f);
        }
    }
}

fn add_relu<T: Float>(y: &mut [T], skip: &[T]) {
    for (v, &s) in y.iter_mut().zip(skip) {
        let t = *v + s;
        *v = if t > T::zero() { t } else { T::zero() };
    }
}

/// Output head: two pointwise hidden layers and a linear pointwise output.
#[derive(Debug, Clone)]
pub struct Head<T> {
    pub hidden1: Conv<T>,
    pub bn1: BatchNorm<T>,
    pub hidden2: Conv<T>,
    pub bn2: BatchNorm<T>,
    pub output: Conv<T>,
}

impl<T: Float> Head<T> {
    pub fn new<R: Rng + ?Sized>(
        dims: usize,
        in_ch: usize,
        width: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden1: Conv::new(dims, in_ch, width, 1, 1, false, rng),
            bn1: BatchNorm::new(width, true),
            hidden2: Conv::new(dims, width, width, 1, 1, false, rng),
            bn2: BatchNorm::new(width, true),
            output: Conv::new(dims, width, out_ch, 1, 1, true, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let h = self.bn1.forward(&self.hidden1.forward(x));
        let h = self.bn2.forward(&self.hidden2.forward(&h));
        self.output.forward(&h)
    }

    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let h = self.hidden1.forward_train(x);
        let h = self.bn1.forward_train(&h);
        let h = self.hidden2.forward_train(&h);
        let h = self.bn2.forward_train(&h);
        self.output.forward_train(&h)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let d = self.output.backward(dy);
        let d = self.bn2.backward(&d);
        let d = self.hidden2.backward(&d);
        let d = self.bn1.backward(&d);
        self.hidden1.backward(&d)
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.hidden1.tensors(&join(prefix, "hidden1"), out);
        self.bn1.tensors(&join(prefix, "bn1"), out);
        self.hidden2.tensors(&join(prefix, "hidden2"), out);
        self.bn2.tensors(&join(prefix, "bn2"), out);
        self.output.tensors(&join(prefix, "output"), out);
    }

    pub fn tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.hidden1.tensors_mut(&join(prefix, "hidden1"), f);
        self.bn1.tensors_mut(&join(prefix, "bn1"), f);
        self.hidden2.tensors_mut(&join(prefix, "hidden2"), f);
        self.bn2.tensors_mut(&join(prefix, "bn2"), f);
        self.output.tensors_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution for a single channel pair.
    fn naive_conv(x: &FeatureMap<f64>, conv: &Conv<f64>) -> FeatureMap<f64> {
        let g = conv.geom(x.shape);
        let mut y = FeatureMap::zeros(conv.out_channels, x.batch, g.out_shape);
        let taps = g.taps();
        let [id, ih, iw] = x.shape;
        let [od, oh, ow] = g.out_shape;
        for o in 0..conv.out_channels {
            for b in 0..x.batch {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value[o]);
                            for c in 0..conv.in_channels {
                                for kz in 0..g.kernel[0] {
                                    for ky in 0..g.kernel[1] {
                                        for kx in 0..g.kernel[2] {
                                            let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                                            let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= id as isize || iy >= ih as isize || ix >= iw as isize {
                                                continue;
                                            }
                                            let xi = (((c * x.batch + b) * id + iz as usize) * ih + iy as usize) * iw + ix as usize;
                                            let wi = o * conv.in_channels * taps + c * taps + (kz * g.kernel[1] + ky) * g.kernel[2] + kx;
                                            acc += conv.weight.value[wi] * x.data[xi];
                                        }
                                    }
                                }
                            }
                            let yi = (((o * x.batch + b) * od + oz) * oh + oy) * ow + ox;
                            y.data[yi] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, b: usize, shape: [usize; 3]) -> FeatureMap<f64> {
        let len = c * b * shape.iter().product::<usize>();
        FeatureMap::from_data(c, b, shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (dims, k, s, shape) in [
            (2, 3, 1, [1, 7, 6]),
            (2, 7, 2, [1, 10, 8]),
            (3, 3, 1, [4, 5, 6]),
            (3, 7, 2, [6, 6, 4]),
            (3, 1, 1, [2, 3, 3]),
        ] {
            let conv = Conv::<f64>::new(dims, 2, 3, k, s, true, &mut rng);
            let mut conv = conv;
            if let Some(b) = &mut conv.bias {
                b.value = vec![0.1, -0.2, 0.3];
            }
            let x = random_map(&mut rng, 2, 2, shape);
            let fast = conv.forward(&x);
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_even_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::<f32>::new(3, 1, 2, 7, 2, false, &mut rng);
        let x = FeatureMap::zeros(1, 1, [8, 12, 16]);
        assert_eq!(conv.forward(&x).shape, [4, 6, 8]);
        let conv2 = Conv::<f32>::new(2, 1, 2, 7, 2, false, &mut rng);
        let x = FeatureMap::zeros(1, 1, [1, 12, 16]);
        assert_eq!(conv2.forward(&x).shape, [1, 6, 8]);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = AvgPool::new(3);
        let x = random_map(&mut rng, 2, 1, [4, 4, 6]);
        let dy = random_map(&mut rng, 2, 1, pool.out_shape(x.shape));
        let y = pool.forward(&x);
        let dx = pool.backward(&dy, x.shape);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (dims, k, s, shape) in [(2, 7, 2, [1, 8, 10]), (3, 3, 1, [3, 4, 5])] {
            let mut conv = Conv::<f64>::new(dims, 2, 3, k, s, false, &mut rng);
            let x = random_map(&mut rng, 2, 2, shape);
            let y = conv.forward_train(&x);
            let dy = random_map(&mut rng, y.channels, y.batch, y.shape);
            let dx = conv.backward(&dy);
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn batch_norm_train_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::<f64>::new(3, false);
        let x = random_map(&mut rng, 3, 4, [1, 5, 5]);
        let y = bn.forward_train(&x);
        let n = y.plane();
        for c in 0..3 {
            let ch = &y.data[c * n..(c + 1) * n];
            let mean: f64 = ch.iter().sum::<f64>() / n as f64;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running statistics moved 10% towards the batch statistics
        assert!(bn.running_mean.iter().all(|m| m.abs() < 0.1));
    }
}
