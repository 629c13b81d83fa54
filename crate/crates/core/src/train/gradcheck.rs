//! Central finite-difference checks of the analytic loss gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::batch_loss_grad;
use crate::error::{Error, Result};
use crate::model::layers::{AvgPool, Conv, Param, Slot};
use crate::model::{FeatureMap, Float, HeadOutputs, Network};
use crate::targets::TargetField;

/// A model trainable by the loop and checkable by finite differences.
pub trait Trainable<T: Float> {
    fn forward_train(&mut self, x: &FeatureMap<T>) -> HeadOutputs<T>;
    fn backward(&mut self, d_regression: Option<&FeatureMap<T>>, d_logits: &FeatureMap<T>);
    /// Visit every trainable parameter in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

impl<T: Float> Trainable<T> for Network<T> {
    fn forward_train(&mut self, x: &FeatureMap<T>) -> HeadOutputs<T> {
        Network::forward_train(self, x)
    }

    fn backward(&mut self, d_regression: Option<&FeatureMap<T>>, d_logits: &FeatureMap<T>) {
        Network::backward(self, d_regression, d_logits)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.tensors_mut(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                f(p)
            }
        });
    }
}

/// Linear toy model: 2x average pooling followed by pointwise regression and
/// classification outputs, without normalization or activations.
#[derive(Debug, Clone)]
pub struct LinearHeads<T> {
    pool: AvgPool,
    regression: Conv<T>,
    classification: Conv<T>,
    in_shape: Option<[usize; 3]>,
}

impl<T: Float> LinearHeads<T> {
    pub fn new<R: rand::Rng + ?Sized>(dims: usize, in_channels: usize, num_landmarks: usize, rng: &mut R) -> Self {
        Self {
            pool: AvgPool::new(dims),
            regression: Conv::new(dims, in_channels, num_landmarks * dims, 1, 1, true, rng),
            classification: Conv::new(dims, in_channels, num_landmarks, 1, 1, true, rng),
            in_shape: None,
        }
    }
}

impl<T: Float> Trainable<T> for LinearHeads<T> {
    fn forward_train(&mut self, x: &FeatureMap<T>) -> HeadOutputs<T> {
        self.in_shape = Some(x.shape);
        let h = self.pool.forward(x);
        HeadOutputs {
            regression: Some(self.regression.forward_train(&h)),
            logits: self.classification.forward_train(&h),
        }
    }

    fn backward(&mut self, d_regression: Option<&FeatureMap<T>>, d_logits: &FeatureMap<T>) {
        let mut dh = self.classification.backward(d_logits);
        if let Some(dr) = d_regression {
            let d2 = self.regression.backward(dr);
            for (a, b) in dh.data.iter_mut().zip(&d2.data) {
                *a += *b;
            }
        }
        if let Some(shape) = self.in_shape.take() {
            let _ = self.pool.backward(&dh, shape);
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.regression.weight);
        if let Some(b) = &mut self.regression.bias {
            f(b);
        }
        f(&mut self.classification.weight);
        if let Some(b) = &mut self.classification.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `max |g_analytic - g_fd| / max(|g_fd|, 1e-6)`.
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub loss: f64,
}

fn loss_value<T: Float, M: Trainable<T> + ?Sized>(
    model: &mut M,
    x: &FeatureMap<T>,
    targets: &[TargetField],
    lambda: f64,
) -> Result<f64> {
    let out = model.forward_train(x);
    Ok(batch_loss_grad(&out, targets, lambda)?.0.total)
}

/// Analytic gradients of every parameter, flattened in visit order.
fn analytic<T: Float, M: Trainable<T> + ?Sized>(
    model: &mut M,
    x: &FeatureMap<T>,
    targets: &[TargetField],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    model.zero_grad();
    let out = model.forward_train(x);
    let (terms, d_reg, d_logits) = batch_loss_grad(&out, targets, lambda)?;
    model.backward(d_reg.as_ref(), &d_logits);
    let mut grads = Vec::new();
    model.visit_params(&mut |p| grads.extend(p.grad.iter().map(|g| g.as_f64())));
    Ok((terms.total, grads))
}

fn finite_difference<T: Float, M: Trainable<T> + ?Sized>(
    model: &mut M,
    flat: usize,
    x: &FeatureMap<T>,
    targets: &[TargetField],
    lambda: f64,
    eps: f64,
) -> Result<f64> {
    let original = param_value(model, flat);
    // divide by the step actually representable in T
    let hi = T::from_f64_lossy(original.as_f64() + eps);
    let lo = T::from_f64_lossy(original.as_f64() - eps);
    set_param(model, flat, hi);
    let plus = loss_value(model, x, targets, lambda)?;
    set_param(model, flat, lo);
    let minus = loss_value(model, x, targets, lambda)?;
    set_param(model, flat, original);
    Ok((plus - minus) / (hi.as_f64() - lo.as_f64()))
}

fn param_value<T: Float, M: Trainable<T> + ?Sized>(model: &mut M, flat: usize) -> T {
    let mut offset = 0;
    let mut out = T::zero();
    model.visit_params(&mut |p| {
        let n = p.value.len();
        if flat >= offset && flat < offset + n {
            out = p.value[flat - offset];
        }
        offset += n;
    });
    out
}

fn set_param<T: Float, M: Trainable<T> + ?Sized>(model: &mut M, flat: usize, value: T) {
    let mut offset = 0;
    model.visit_params(&mut |p| {
        let n = p.value.len();
        if flat >= offset && flat < offset + n {
            p.value[flat - offset] = value;
        }
        offset += n;
    });
}

fn pick(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n.min(total)).into_vec();
    idx.sort_unstable();
    idx
}

fn rel_error(ga: f64, gfd: f64) -> f64 {
    (ga - gfd).abs() / gfd.abs().max(1e-6)
}

fn report(loss: f64, pairs: &[(f64, f64)]) -> GradCheckReport {
    let mut rep = GradCheckReport {
        checked: pairs.len(),
        max_rel_error: 0.0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        loss,
    };
    for &(ga, gfd) in pairs {
        let e = rel_error(ga, gfd);
        if e > rep.max_rel_error || e.is_nan() {
            rep.max_rel_error = e;
            rep.worst_analytic = ga;
            rep.worst_fd = gfd;
        }
    }
    rep
}

/// Compare analytic and central-difference gradients on `n_params` randomly
/// chosen parameters, both evaluated in precision `T`.
pub fn grad_check<T: Float, M: Trainable<T> + ?Sized>(
    model: &mut M,
    x: &FeatureMap<T>,
    targets: &[TargetField],
    lambda: f64,
    eps: f64,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be > 0".into()));
    }
    let (loss, grads) = analytic(model, x, targets, lambda)?;
    let mut pairs = Vec::new();
    for flat in pick(grads.len(), n_params, seed) {
        let gfd = finite_difference(model, flat, x, targets, lambda, eps)?;
        pairs.push((grads[flat], gfd));
    }
    Ok(report(loss, &pairs))
}

/// Copy a network into another precision.
pub fn convert_network<T: Float, U: Float>(net: &Network<T>) -> Result<Network<U>> {
    let mut out = Network::<U>::build(net.config().clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let src = net.tensors();
    let mut i = 0;
    out.tensors_mut(&mut |_, slot| {
        let dst = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(_, b) => b,
        };
        for (d, s) in dst.iter_mut().zip(src[i].2) {
            *d = U::from_f64_lossy(s.as_f64());
        }
        i += 1;
    });
    Ok(out)
}

/// Single-precision analytic gradients checked against double-precision
/// central differences of the same weights, so that the reference itself is
/// not limited by `f32` round-off.
pub fn grad_check_mixed(
    net: &mut Network<f32>,
    x: &FeatureMap<f32>,
    targets: &[TargetField],
    lambda: f64,
    eps: f64,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut reference: Network<f64> = convert_network(net)?;
    let (loss, grads) = analytic(net, x, targets, lambda)?;
    let x64 = FeatureMap::from_data(
        x.channels,
        x.batch,
        x.shape,
        x.data.iter().map(|&v| v as f64).collect(),
    );
    let mut pairs = Vec::new();
    for flat in pick(grads.len(), n_params, seed) {
        let gfd = finite_difference(&mut reference, flat, &x64, targets, lambda, eps)?;
        pairs.push((grads[flat], gfd));
    }
    Ok(report(loss, &pairs))
}
