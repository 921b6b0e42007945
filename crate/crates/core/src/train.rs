//! Soft-IoU training with Adam and a milestone learning-rate schedule.

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD, Axis, IxDyn, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, CropMode, Sample};
use crate::metrics::EvalReport;
use crate::model::{BinaryMask, LcaeNet, LceInput, ProbMap};
use crate::nn::{Gradients, Mode, ParamStore, Real, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Multiply by `decay_factor` at each milestone.
    #[default]
    Step,
    /// `lr0 · (1 − epoch / epochs)^poly_power`.
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
    pub schedule: Schedule,
    pub poly_power: f64,
    pub seed: u64,
    pub loss_epsilon: f64,
    /// Random horizontal/vertical flips during training.
    pub flip: bool,
    pub precision: Precision,
    /// Probability threshold used for held-out metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 16,
            lr0: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_factor: 0.1,
            milestones: vec![200, 300],
            schedule: Schedule::Step,
            poly_power: 0.9,
            seed: 0,
            loss_epsilon: 1e-6,
            flip: true,
            precision: Precision::Single,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        // lr0 = 0 is a dry run: batch statistics move, parameters do not.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be non-negative, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0 && self.loss_epsilon > 0.0) {
            return bad("adam_eps and loss_epsilon must be positive".into());
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("milestones {:?} must be strictly ascending", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below epochs {}", self.milestones, self.epochs));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    match config.schedule {
        Schedule::Step => {
            let passed = config.milestones.iter().filter(|&&m| m <= epoch).count();
            config.lr0 * config.decay_factor.powi(passed as i32)
        }
        Schedule::Poly => {
            let frac = 1.0 - epoch.min(config.epochs) as f64 / config.epochs as f64;
            config.lr0 * frac.powf(config.poly_power)
        }
    }
}

/// `1 − (Σpt + ε) / (Σp + Σt − Σpt + ε)` summed over every pixel of every pair.
pub fn soft_iou_loss(probs: &[ProbMap], targets: &[BinaryMask], eps: f64) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", probs.len(), targets.len())));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (p, t) in probs.iter().zip(targets) {
        if p.dim() != t.dim() {
            return Err(Error::Dimension(format!("prediction {:?} and target {:?} differ", p.dim(), t.dim())));
        }
        Zip::from(p.values()).and(t.as_array()).for_each(|&p, &t| {
            let t = f64::from(t);
            inter += p * t;
            union += p + t - p * t;
        });
    }
    Ok(1.0 - (inter + eps) / (union + eps))
}

/// Adam moments, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: IndexMap<String, ArrayD<T>>,
    pub v: IndexMap<String, ArrayD<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().map(|(k, p)| (k.to_owned(), ArrayD::zeros(p.raw_dim()))).collect();
        OptimizerState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// Hyperparameters of a single Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam for one tensor; `step` is the 1-based update index.
pub fn adam_update<T: Real>(
    param: &mut ArrayD<T>,
    grad: &ArrayD<T>,
    m: &mut ArrayD<T>,
    v: &mut ArrayD<T>,
    step: u64,
    hp: AdamParams,
) {
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let c1 = T::of(1.0 - hp.beta1.powi(step as i32));
    let c2 = T::of(1.0 - hp.beta2.powi(step as i32));
    let (lr, eps) = (T::of(hp.lr), T::of(hp.eps));
    Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    });
}

/// One Adam step over every parameter; parameters without a gradient see zero.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let hp = AdamParams { lr, beta1: config.beta1, beta2: config.beta2, eps: config.adam_eps };
    for (name, param) in store.params_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::InvalidInput(format!("optimizer state lacks {name}")));
        };
        let zero;
        let grad = match grads.param(name) {
            Some(g) if g.shape() == param.shape() => g,
            Some(g) => {
                return Err(Error::Dimension(format!(
                    "gradient for {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    param.shape()
                )))
            }
            None => {
                zero = ArrayD::zeros(param.raw_dim());
                &zero
            }
        };
        adam_update(param, grad, m, v, state.step, hp);
    }
    Ok(())
}

/// Network-ready tensors for a list of samples (all the same size).
pub struct Batch {
    /// Standardised images, `N×1×H×W`.
    pub images: Array4<f64>,
    /// Images the attention branch reads.
    pub lce: Array4<f64>,
    /// Ground truth as `N×1×H×W` zeros and ones.
    pub targets: Array4<f64>,
    pub ids: Vec<String>,
}

pub fn make_batch(samples: &[Sample], lce_input: LceInput) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let (h, w) = first.dim();
    let n = samples.len();
    let mut batch = Batch {
        images: Array4::zeros((n, 1, h, w)),
        lce: Array4::zeros((n, 1, h, w)),
        targets: Array4::zeros((n, 1, h, w)),
        ids: Vec::with_capacity(n),
    };
    for (i, s) in samples.iter().enumerate() {
        if s.dim() != (h, w) {
            return Err(Error::Dimension(format!("sample {} is {:?}, batch is {:?}", s.id, s.dim(), (h, w))));
        }
        let std = data::standardize(&s.image);
        batch.images.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(std.pixels());
        let lce = match lce_input {
            LceInput::Standardized => std.pixels(),
            LceInput::Raw => s.image.pixels(),
        };
        batch.lce.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(lce);
        batch.targets.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(&s.mask.to_real::<f64>());
        batch.ids.push(s.id.clone());
    }
    Ok(batch)
}

/// Forward, Soft-IoU, backward and one Adam step on `batch`; returns the loss.
pub fn train_step<T: Real>(
    net: &mut LcaeNet<T>,
    state: &mut OptimizerState<T>,
    batch: &Batch,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let attention = net.attention(batch.lce.view())?;
    let mut tape = Tape::<T>::new();
    let x = tape.constant(batch.images.mapv(T::of).into_dyn());
    let a = tape.constant(attention.into_dyn());
    let (prob, stats) = net.forward(&mut tape, x, a, Mode::Train)?;
    let target = batch.targets.mapv(T::of).into_dyn();
    let loss_var = tape.soft_iou_loss(prob, &target, config.loss_epsilon)?;
    let loss = tape.value(loss_var)[IxDyn(&[])].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, ids: batch.ids.join(",") });
    }
    let grads = tape.backward(loss_var)?;
    adam_step(&mut net.store, &grads, state, lr, config)?;
    net.apply_batch_stats(&stats)?;
    Ok(loss)
}

/// Centre-crops (or pads) every sample to the network's input size.
pub fn fit_to_input(samples: &[Sample], size: [usize; 2]) -> Result<Vec<Sample>> {
    if size[0] != size[1] {
        return Err(Error::Config(format!("square input required, got {}x{}", size[0], size[1])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(samples
        .iter()
        .map(|s| if s.dim() == (size[0], size[1]) { s.clone() } else { data::pad_crop(s, size[0], CropMode::Center, &mut rng) })
        .collect())
}

/// Eval-mode probability maps, `batch_size` images at a time.
pub fn predict_samples<T: Real>(net: &LcaeNet<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<ProbMap>> {
    let fitted = fit_to_input(samples, net.config.input_size)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in fitted.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, net.config.lce_input)?;
        out.extend(net.predict_batch(&batch.images, Some(&batch.lce))?);
    }
    Ok(out)
}

/// Held-out metrics at `threshold`.
pub fn evaluate<T: Real>(net: &LcaeNet<T>, samples: &[Sample], threshold: f64, batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation samples".into()));
    }
    let probs = predict_samples(net, samples, batch_size)?;
    let preds: Vec<BinaryMask> = probs.iter().map(|p| p.threshold(threshold)).collect();
    let gts: Vec<BinaryMask> = fit_to_input(samples, net.config.input_size)?.into_iter().map(|s| s.mask).collect();
    EvalReport::evaluate(&preds, &gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval: Option<EvalReport>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,iou,pd,fa_e6";

    pub fn csv_row(&self) -> String {
        let (iou, pd, fa) = self.eval.map_or((f64::NAN, f64::NAN, f64::NAN), |e| (e.iou, e.pd, e.fa * 1e6));
        format!("{},{:e},{:.8},{:.6},{:.6},{:.4}", self.epoch, self.lr, self.loss, iou, pd, fa)
    }
}

pub struct TrainOutcome {
    /// Parameters with the best held-out IoU (the final ones if nothing was held out).
    pub best: LcaeNet<f64>,
    pub best_epoch: usize,
    pub last: LcaeNet<f64>,
    pub log: Vec<EpochLog>,
}

fn augment_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    rng.set_stream(index as u64);
    rng
}

/// Trains `net` on `train`, evaluating on `test` after every epoch.
/// `on_epoch` sees each log entry as soon as it is produced.
pub fn train_loop(
    net: &LcaeNet<f64>,
    train: &[Sample],
    test: &[Sample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    net.config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    match config.precision {
        Precision::Single => train_loop_in::<f32>(net.cast(), train, test, config, on_epoch),
        Precision::Double => train_loop_in::<f64>(net.clone(), train, test, config, on_epoch),
    }
}

fn train_loop_in<T: Real>(
    mut net: LcaeNet<T>,
    train: &[Sample],
    test: &[Sample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let [size, _] = net.config.input_size;
    let test = fit_to_input(test, net.config.input_size)?;
    let mut state = OptimizerState::new(&net.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, LcaeNet<f64>)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    let mut rng = augment_rng(config.seed, epoch, i);
                    let s = data::pad_crop(&train[i], size, CropMode::Random, &mut rng);
                    if config.flip { data::random_flip(&s, &mut rng) } else { s }
                })
                .collect();
            let batch = make_batch(&samples, net.config.lce_input)?;
            let loss = train_step(&mut net, &mut state, &batch, lr, config).map_err(|e| match e {
                Error::NonFiniteLoss { ids, .. } => Error::NonFiniteLoss { epoch, batch: b, ids },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let eval = if test.is_empty() {
            None
        } else {
            Some(evaluate(&net, &test, config.threshold, config.batch_size)?)
        };
        let entry = EpochLog { epoch, lr, loss: loss_sum / batches as f64, eval };
        on_epoch(&entry);
        let score = eval.map_or(f64::NEG_INFINITY, |e| e.iou);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, net.cast()));
        }
        log.push(entry);
    }
    let last = net.cast();
    let (best_epoch, best) = match best {
        Some((s, e, n)) if s.is_finite() => (e, n),
        _ => (config.epochs - 1, net.cast()),
    };
    Ok(TrainOutcome { best, best_epoch, last, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::model::ModelConfig;

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 5e-4);
        assert!((lr_schedule(199, &cfg) - 5e-4).abs() < 1e-18);
        assert!((lr_schedule(200, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(399, &cfg) - 5e-6).abs() < 1e-18);
        let poly = TrainConfig { schedule: Schedule::Poly, ..cfg };
        assert_eq!(lr_schedule(0, &poly), 5e-4);
        assert!(lr_schedule(399, &poly) < lr_schedule(200, &poly));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { milestones: vec![300, 200], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { milestones: vec![400], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr0: -1e-4, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate().is_ok());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        let cfg = TrainConfig::from_toml("epochs = 10\nmilestones = [5]\nschedule = \"poly\"").unwrap();
        assert_eq!((cfg.epochs, cfg.schedule, cfg.batch_size), (10, Schedule::Poly, 16));
        assert!(TrainConfig::from_toml("epoch = 3").is_err());
    }

    #[test]
    fn soft_iou_cases() {
        let t = BinaryMask::from_fn(4, 4, |r, c| r == c);
        let exact = ProbMap::new(t.to_real()).unwrap();
        assert_eq!(soft_iou_loss(&[exact], &[t.clone()], 1e-6).unwrap(), 0.0);
        let zero = ProbMap::new(ndarray::Array2::zeros((4, 4))).unwrap();
        let l = soft_iou_loss(&[zero], &[t.clone()], 1e-6).unwrap();
        assert_eq!(l, 1.0 - 1e-6 / (4.0 + 1e-6));
        let small = ProbMap::new(ndarray::Array2::zeros((3, 4))).unwrap();
        assert!(soft_iou_loss(&[small], &[t], 1e-6).is_err());
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let mut p = ArrayD::<f64>::from_elem(IxDyn(&[3]), 1.5);
        let g = ArrayD::zeros(IxDyn(&[3]));
        let mut m = ArrayD::<f64>::from_elem(IxDyn(&[3]), 0.2);
        let mut v = ArrayD::<f64>::from_elem(IxDyn(&[3]), 0.04);
        let hp = AdamParams { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_update(&mut p, &g, &mut m, &mut v, 5, hp);
        assert!((m[0] - 0.18).abs() < 1e-15 && (v[0] - 0.03996).abs() < 1e-15);
        assert!(p[0] < 1.5);
        let mut p2 = ArrayD::from_elem(IxDyn(&[3]), 1.5);
        let (mut m2, mut v2) = (ArrayD::zeros(IxDyn(&[3])), ArrayD::zeros(IxDyn(&[3])));
        adam_update(&mut p2, &g, &mut m2, &mut v2, 1, hp);
        assert_eq!(p2[0], 1.5);
    }

    #[test]
    fn tiny_training_run_is_reproducible() {
        let spec = SynthSpec { height: 16, width: 16, sigma: [0.5, 1.0], ..SynthSpec::default() };
        let samples: Vec<Sample> = data::synth_dataset(&spec, 4, 2).unwrap().into_iter().map(|(s, _)| s).collect();
        let cfg = ModelConfig { base_channels: 4, blocks: [1, 1, 1, 1], input_size: [16, 16], ..ModelConfig::default() };
        let net = LcaeNet::new(cfg, 0).unwrap();
        let tc = TrainConfig { epochs: 2, batch_size: 2, milestones: vec![], ..TrainConfig::default() };
        let a = train_loop(&net, &samples[..4], &samples[4..], &tc, &mut |_| {}).unwrap();
        let b = train_loop(&net, &samples[..4], &samples[4..], &tc, &mut |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
        assert_ne!(a.last.store, net.store);
        assert!(a.log.iter().all(|l| (0.0..=1.0).contains(&l.loss)));
    }

    #[test]
    fn rejects_empty_training_set() {
        let net = LcaeNet::new(ModelConfig { base_channels: 4, input_size: [16, 16], ..Default::default() }, 0).unwrap();
        let err = train_loop(&net, &[], &[], &TrainConfig::default(), &mut |_| {}).err().unwrap();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }
}
