//! The training loop with validation-driven model selection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gradcheck::Trainable;
use super::loss::{batch_loss_grad, LossTerms};
use super::TrainConfig;
use crate::data::DatasetItem;
use crate::domain::{Image, LandmarkSet};
use crate::error::{Error, Result};
use crate::eval::percentile;
use crate::localize::{global_estimates, refine_standardized, FusionMode};
use crate::model::{checkpoint, Network, TrainingMeta};
use crate::sampling::sample_crop;
use crate::targets::build_targets;

/// A standardized image with its landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// Standardize images; with `landmark = Some(k)` keep only landmark `k` and
/// drop items where it is absent.
pub fn prepare_samples<'a>(
    items: impl IntoIterator<Item = &'a DatasetItem>,
    landmark: Option<usize>,
) -> Vec<TrainSample> {
    items
        .into_iter()
        .filter_map(|it| {
            let landmarks = match landmark {
                Some(k) => {
                    if k >= it.landmarks.len() || !it.landmarks.present[k] {
                        return None;
                    }
                    it.landmarks.select(k)
                }
                None => it.landmarks.clone(),
            };
            Some(TrainSample {
                image: it.image.standardized(),
                landmarks,
            })
        })
        .collect()
}

/// Scores a network on held-out data; lower is better.
pub trait Validator {
    fn evaluate(&mut self, net: &Network<f32>) -> Result<f64>;
}

fn median_or_inf(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("validation produced no errors".into()));
    }
    if errors.iter().any(|e| e.is_infinite()) {
        // failed localizations rank last
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        let pos = 0.5 * (v.len() - 1) as f64;
        let (lo, hi) = (v[pos.floor() as usize], v[pos.ceil() as usize]);
        return Ok(if lo == hi { lo } else { lo + (pos - pos.floor()) * (hi - lo) });
    }
    percentile(errors, 0.5)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Median voxel error of global localization over all present landmarks.
pub struct GlobalValidator {
    pub samples: Vec<TrainSample>,
    pub fusion: FusionMode,
}

impl Validator for GlobalValidator {
    fn evaluate(&mut self, net: &Network<f32>) -> Result<f64> {
        let mut errors = Vec::new();
        for s in &self.samples {
            match global_estimates(net, &s.image, self.fusion) {
                Ok(est) => {
                    for (k, e) in est.iter().enumerate() {
                        if s.landmarks.present[k] {
                            errors.push(euclid(e, &s.landmarks.coords[k]));
                        }
                    }
                }
                Err(Error::DegenerateConfidence { .. } | Error::NonFinite(_)) => {
                    let n = s.landmarks.present.iter().filter(|&&p| p).count();
                    errors.extend(std::iter::repeat_n(f64::INFINITY, n));
                }
                Err(e) => return Err(e),
            }
        }
        median_or_inf(&errors)
    }
}

/// Median voxel error after refining fixed start points with a local network.
pub struct LocalValidator {
    /// Single-landmark samples.
    pub samples: Vec<TrainSample>,
    /// One start point per sample.
    pub starts: Vec<Vec<f64>>,
    pub extents: Vec<usize>,
    pub fusion: FusionMode,
}

impl LocalValidator {
    /// Start points displaced from the truth by a seeded uniform offset in
    /// `[-max_offset, max_offset]` per axis, for use when no global
    /// estimates are available.
    pub fn perturbed_starts(samples: &[TrainSample], max_offset: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples
            .iter()
            .map(|s| {
                s.landmarks.coords[0]
                    .iter()
                    .map(|&c| c + rng.random_range(-max_offset..=max_offset))
                    .collect()
            })
            .collect()
    }
}

impl Validator for LocalValidator {
    fn evaluate(&mut self, net: &Network<f32>) -> Result<f64> {
        if self.starts.len() != self.samples.len() {
            return Err(Error::ShapeMismatch("one start point per validation sample required".into()));
        }
        let mut errors = Vec::with_capacity(self.samples.len());
        for (s, start) in self.samples.iter().zip(&self.starts) {
            match refine_standardized(net, &s.image, start, &self.extents, self.fusion) {
                Ok(r) => errors.push(euclid(&r.coord, &s.landmarks.coords[0])),
                Err(Error::NonFinite(_)) => errors.push(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        median_or_inf(&errors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean training loss over the iterations since the previous entry.
    pub train: Option<LossTerms>,
    pub validation_median_vox: Option<f64>,
    pub best_median_vox: Option<f64>,
    pub best_iteration: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Total loss of every step.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

pub struct TrainOutcome {
    /// Weights with the lowest validation error.
    pub best: Network<f32>,
    pub best_iteration: usize,
    pub best_metric: f64,
    pub log: TrainLog,
}

/// Where the loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited JSON log, appended as entries are produced.
    pub log: Option<PathBuf>,
    pub landmark_names: Vec<String>,
}

struct LogSink(Option<std::fs::File>, Option<PathBuf>);

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(f), Some(p.to_path_buf())))
            }
            None => Ok(Self(None, None)),
        }
    }

    fn push(&mut self, e: &LogEntry) -> Result<()> {
        if let (Some(f), Some(p)) = (&mut self.0, &self.1) {
            let line = serde_json::to_string(e)?;
            writeln!(f, "{line}").map_err(|err| Error::io(p, err))?;
        }
        Ok(())
    }
}

/// Train `net` on `samples`, validating every `validation_interval` steps and
/// at the end, and keep the weights with the lowest validation error.
///
/// Deterministic given the configuration, the samples and the seed.
pub fn train_loop(
    net: &mut Network<f32>,
    samples: &[TrainSample],
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let encoding = net.config().encoding;
    let lambda = cfg.effective_lambda();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut log = TrainLog::default();
    let mut sink = LogSink::open(outputs.log.as_deref())?;
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let mut window = (LossTerms::default(), 0usize);

    let meta = |iteration: usize, metric: f64| TrainingMeta {
        iteration,
        validation_metric: Some(metric),
        seed: cfg.seed,
        variant: Some(cfg.variant),
        landmark_names: outputs.landmark_names.clone(),
        crop_extents: cfg.crop.extents.clone(),
    };

    let mut validate = |it: usize,
                        net: &Network<f32>,
                        best: &mut Option<(f64, usize, Network<f32>)>,
                        window: &mut (LossTerms, usize),
                        log: &mut TrainLog,
                        sink: &mut LogSink|
     -> Result<()> {
        let metric = validator.evaluate(net)?;
        if best.as_ref().is_none_or(|(m, _, _)| metric < *m) {
            if let Some(p) = &outputs.checkpoint {
                checkpoint::save(net, meta(it, metric), p)?;
            }
            *best = Some((metric, it, net.clone()));
        }
        let b = best.as_ref().map(|(m, i, _)| (*m, *i));
        let entry = LogEntry {
            iteration: it,
            train: mean_terms(window),
            validation_median_vox: Some(metric),
            best_median_vox: b.map(|x| x.0),
            best_iteration: b.map(|x| x.1),
            best_checkpoint: outputs.checkpoint.clone().filter(|_| b.is_some()),
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        *window = (LossTerms::default(), 0);
        sink.push(&entry)?;
        log.entries.push(entry);
        Ok(())
    };

    if cfg.validate_at_start {
        validate(0, net, &mut best, &mut window, &mut log, &mut sink)?;
    }
    for it in 1..=cfg.iterations {
        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut lms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let (c, l) = sample_crop(&s.image, &s.landmarks, &cfg.crop, &mut rng)?;
            crops.push(c);
            lms.push(l);
        }
        let refs: Vec<&Image> = crops.iter().collect();
        let (x, grid) = net.input_batch(&refs)?;
        let targets = lms
            .iter()
            .map(|l| build_targets(&grid, l, encoding))
            .collect::<Result<Vec<_>>>()?;
        net.zero_grad();
        let out = net.forward_train(&x);
        let (terms, d_reg, d_logits) = batch_loss_grad(&out, &targets, lambda)?;
        if !terms.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!(
                    "loss {} (mae {}, bce {})",
                    terms.total, terms.mae, terms.bce
                ),
            });
        }
        Trainable::backward(net, d_reg.as_ref(), &d_logits);
        adam.step(net);
        log.step_losses.push(terms.total);
        window.0.total += terms.total;
        window.0.mae += terms.mae;
        window.0.bce += terms.bce;
        window.1 += 1;

        if it % cfg.validation_interval == 0 || it == cfg.iterations {
            validate(it, net, &mut best, &mut window, &mut log, &mut sink)?;
        } else if it % cfg.log_interval == 0 {
            let entry = LogEntry {
                iteration: it,
                train: mean_terms(&window),
                validation_median_vox: None,
                best_median_vox: best.as_ref().map(|b| b.0),
                best_iteration: best.as_ref().map(|b| b.1),
                best_checkpoint: None,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            window = (LossTerms::default(), 0);
            sink.push(&entry)?;
            log.entries.push(entry);
        }
    }
    let (best_metric, best_iteration, best) = best.ok_or_else(|| Error::Empty("no validation was run".into()))?;
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_metric,
        log,
    })
}

fn mean_terms(w: &(LossTerms, usize)) -> Option<LossTerms> {
    (w.1 > 0).then(|| {
        let n = w.1 as f64;
        LossTerms {
            total: w.0.total / n,
            mae: w.0.mae / n,
            bce: w.0.bce / n,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthSpec};
    use crate::model::{NetworkConfig, StemConfig};
    use crate::sampling::{CropConstraint, CropSpec};
    use crate::train::Variant;

    fn tiny_net(seed: u64) -> Network<f32> {
        let cfg = NetworkConfig {
            stem: Some(StemConfig { kernel: 3, channels: 4, stride: 2 }),
            block_widths: vec![4, 8],
            block_pairs: vec![1, 1],
            head_width: 8,
            ..NetworkConfig::global(2, 3)
        };
        Network::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn data() -> (Vec<TrainSample>, Vec<TrainSample>) {
        let ds = synth_generate(&SynthSpec::default_2d(), 6, 1).unwrap();
        let s = prepare_samples(&ds.items, None);
        (s[..4].to_vec(), s[4..].to_vec())
    }

    fn cfg(iterations: usize, interval: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            validation_interval: interval,
            log_interval: 2,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::new(CropSpec {
                extents: vec![32, 32],
                constraint: CropConstraint::None,
            })
        }
    }

    /// Returns a scripted sequence of metrics.
    struct Scripted(Vec<f64>, usize);

    impl Validator for Scripted {
        fn evaluate(&mut self, _: &Network<f32>) -> Result<f64> {
            self.1 += 1;
            Ok(self.0[self.1 - 1])
        }
    }

    #[test]
    fn deterministic_loss_sequence() {
        let (train, val) = data();
        let run = || {
            let mut net = tiny_net(1);
            let mut v = GlobalValidator { samples: val.clone(), fusion: FusionMode::Weighted };
            train_loop(&mut net, &train, &mut v, &cfg(6, 3), &TrainOutputs::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log.step_losses.len(), 6);
        assert_eq!(a.log.step_losses, b.log.step_losses);
        assert_eq!(a.best_metric, b.best_metric);
    }

    #[test]
    fn selection_keeps_lowest_metric() {
        let (train, _) = data();
        let mut net = tiny_net(2);
        let mut v = Scripted(vec![5.0, 3.0, 4.0, 2.5, 2.5], 0);
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            checkpoint: Some(dir.path().join("best.ckpt")),
            log: Some(dir.path().join("log.jsonl")),
            landmark_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let out = train_loop(&mut net, &train, &mut v, &cfg(8, 2), &outputs).unwrap();
        assert_eq!(out.best_metric, 2.5);
        assert_eq!(out.best_iteration, 6);
        let (loaded, meta) = checkpoint::load(outputs.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(meta.iteration, 6);
        assert_eq!(meta.validation_metric, Some(2.5));
        assert_eq!(meta.variant, Some(Variant::RLogC));
        let img = &train[0].image;
        assert_eq!(loaded.forward(img).unwrap(), out.best.forward(img).unwrap());
        let recorded: Vec<f64> = out.log.entries.iter().filter_map(|e| e.validation_median_vox).collect();
        assert_eq!(recorded, vec![5.0, 3.0, 4.0, 2.5, 2.5]);
        assert!(recorded.iter().all(|&m| out.best_metric <= m));
        let bests: Vec<f64> = out.log.entries.iter().filter_map(|e| e.best_median_vox).collect();
        assert!(bests.windows(2).all(|w| w[1] <= w[0]));
        let text = std::fs::read_to_string(outputs.log.as_ref().unwrap()).unwrap();
        assert_eq!(text, out.log.to_jsonl().unwrap());
    }

    #[test]
    fn first_validation_is_best_without_improvement() {
        let (train, _) = data();
        let initial = tiny_net(4);
        let mut net = initial.clone();
        let mut v = Scripted(vec![1.0, 9.0], 0);
        let out = train_loop(&mut net, &train, &mut v, &cfg(2, 2), &TrainOutputs::default()).unwrap();
        assert_eq!(out.best_iteration, 0);
        let img = &train[0].image;
        assert_eq!(out.best.forward(img).unwrap(), initial.forward(img).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let (train, _) = data();
        let mut net = tiny_net(5);
        net.tensors_mut(&mut |_, slot| {
            if let crate::model::layers::Slot::Param(p) = slot {
                p.value.iter_mut().for_each(|v| *v = f32::NAN);
            }
        });
        let mut v = Scripted(vec![1.0; 4], 0);
        let mut c = cfg(2, 2);
        c.validate_at_start = false;
        assert!(matches!(
            train_loop(&mut net, &train, &mut v, &c, &TrainOutputs::default()),
            Err(Error::Diverged { iteration: 1, .. })
        ));
    }

    #[test]
    fn local_validator_with_perturbed_starts() {
        let ds = synth_generate(&SynthSpec::default_2d(), 3, 2).unwrap();
        let samples = prepare_samples(&ds.items, Some(1));
        assert_eq!(samples[0].landmarks.len(), 1);
        let starts = LocalValidator::perturbed_starts(&samples, 4.0, 0);
        for (s, p) in samples.iter().zip(&starts) {
            for a in 0..2 {
                assert!((s.landmarks.coords[0][a] - p[a]).abs() <= 4.0);
            }
        }
        let cfg = NetworkConfig {
            block_widths: vec![4, 4],
            head_width: 4,
            ..NetworkConfig::local(2)
        };
        let net = Network::build(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut v = LocalValidator { samples, starts, extents: vec![16, 16], fusion: FusionMode::Weighted };
        assert!(v.evaluate(&net).unwrap().is_finite());
    }
}
