//! Central finite-difference checks of tape gradients, in `f64`.
//!
//! Whole-network checks also take second-order one-sided differences. When
//! those disagree the probe straddles a ReLU kink, where the tape returns a
//! one-sided derivative. Such entries are compared with the closest one-sided
//! slope over a few shrinking steps, so that one side clears the kink.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::LcaeNet;
use crate::nn::{Mode, Tape, Var};
use crate::Result;

/// Perturbation used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Step for whole-network checks. Thousands of ReLUs sit downstream of each
/// parameter, so a shorter interval is crossed by fewer kinks.
pub const NETWORK_FD_STEP: f64 = 1e-6;

/// Relative gap between the two one-sided slopes that marks a ReLU kink
/// inside the probe interval.
pub const KINK_SPLIT: f64 = 1e-4;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Floor for whole-network checks. One-sided stencils at [`NETWORK_FD_STEP`]
/// carry about 2e-10 of round-off, which must stay well under the tolerance.
pub const NETWORK_REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, REL_FLOOR)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Outcome of one check.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Where the largest error occurred.
    pub worst: String,
    /// Entries whose probe interval straddled a kink; these are scored
    /// against the matching one-sided slope.
    pub kinks: usize,
}

impl CheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.record_floor(what, analytic, numeric, REL_FLOOR);
    }

    fn record_floor(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_err_floor(analytic, numeric, floor);
        self.checked += 1;
        if e >= self.max_rel_err {
            self.max_rel_err = e;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Flat indices to probe: all of them, or `limit` distinct ones drawn with `rng`.
fn probe_indices(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    *tape.value(v).iter().next().expect("scalar loss")
}

/// Compares the gradient of the scalar built by `build` with respect to each
/// of `inputs` against central differences. `limit` caps the entries probed
/// per input.
pub fn check_inputs<F>(inputs: &[ArrayD<f64>], limit: Option<usize>, seed: u64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[ArrayD<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(scalar(&tape, loss))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    let mut values = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let zero = ArrayD::zeros(inputs[i].raw_dim());
        let analytic = grads.wrt(var).unwrap_or(&zero);
        let analytic: Vec<f64> = analytic.iter().copied().collect();
        for j in probe_indices(inputs[i].len(), limit, &mut rng) {
            let orig = inputs[i].as_slice_memory_order().expect("contiguous input")[j];
            values[i].as_slice_memory_order_mut().expect("contiguous input")[j] = orig + FD_STEP;
            let up = eval(&values)?;
            values[i].as_slice_memory_order_mut().expect("contiguous input")[j] = orig - FD_STEP;
            let down = eval(&values)?;
            values[i].as_slice_memory_order_mut().expect("contiguous input")[j] = orig;
            report.record(|| format!("input {i}[{j}]"), analytic[j], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Soft-IoU training loss of `net` on one batch, recorded in train mode.
fn network_loss(
    net: &LcaeNet<f64>,
    tape: &mut Tape<f64>,
    images: &Array4<f64>,
    attention: &Array4<f64>,
    target: &ArrayD<f64>,
) -> Result<Var> {
    let x = tape.constant(images.clone().into_dyn());
    let a = tape.constant(attention.clone().into_dyn());
    let (prob, _) = net.forward(tape, x, a, Mode::Train)?;
    tape.soft_iou_loss(prob, target, 1e-6)
}

/// Checks the gradient of the training loss with respect to every parameter
/// tensor of `net`, probing at most `per_tensor` entries of each.
pub fn check_network(
    net: &LcaeNet<f64>,
    images: &Array4<f64>,
    attention: &Array4<f64>,
    target: &ArrayD<f64>,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let loss = network_loss(net, &mut tape, images, attention, target)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    let mut probe = net.clone();
    let names: Vec<String> = net.store.params().map(|(n, _)| n.to_owned()).collect();
    for name in names {
        let value = net.store.param(&name)?;
        let zero = ArrayD::zeros(value.raw_dim());
        let analytic: Vec<f64> = grads.param(&name).unwrap_or(&zero).iter().copied().collect();
        for j in probe_indices(value.len(), per_tensor, &mut rng) {
            let orig = value.as_slice_memory_order().expect("contiguous parameter")[j];
            let mut at = |delta: f64| -> Result<f64> {
                probe.store.param_mut(&name)?.as_slice_memory_order_mut().expect("contiguous parameter")[j] =
                    orig + delta;
                let mut tape = Tape::new();
                let loss = network_loss(&probe, &mut tape, images, attention, target)?;
                Ok(scalar(&tape, loss))
            };
            let h = NETWORK_FD_STEP;
            let base = at(0.0)?;
            let (up, down) = (at(h)?, at(-h)?);
            let central = (up - down) / (2.0 * h);
            // Second-order one-sided slope on the `side` (±1) of the current value.
            let mut slope = |side: f64, s: f64| -> Result<f64> {
                let (f1, f2) = (at(side * s)?, at(side * 2.0 * s)?);
                Ok(side * (-3.0 * base + 4.0 * f1 - f2) / (2.0 * s))
            };
            let a = analytic[j];
            let (right, left) = (slope(1.0, h)?, slope(-1.0, h)?);
            let err = |n: f64| rel_err_floor(a, n, NETWORK_REL_FLOOR);
            let numeric = if rel_err_floor(right, left, NETWORK_REL_FLOOR) > KINK_SPLIT {
                report.kinks += 1;
                let (r4, l4) = (slope(1.0, h / 4.0)?, slope(-1.0, h / 4.0)?);
                [right, left, r4, l4].into_iter().min_by(|x, y| err(*x).total_cmp(&err(*y))).expect("non-empty")
            } else {
                central
            };
            at(0.0)?;
            report.record_floor(|| format!("{name}[{j}]"), a, numeric, NETWORK_REL_FLOOR);
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// `Σ sigmoid(y)`: a scalar whose gradient differs for every element of `y`.
fn squash(t: &mut Tape<f64>, y: Var) -> Var {
    let s = t.sigmoid(y);
    t.sum(s)
}

/// Finite-difference checks of every differentiable tape operation on small
/// seeded inputs, probing every entry.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, CheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random(shape, &mut rng);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<ArrayD<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        check_inputs(&inputs, None, seed, f).map(|rep| out.push((name, rep)))
    };

    run("conv2d 3x3 pad 1 + bias", vec![r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])], &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        Ok(squash(t, y))
    })?;
    run("conv2d 3x3 stride 2", vec![r(&[2, 2, 6, 6]), r(&[2, 2, 3, 3])], &|t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 1)?;
        Ok(squash(t, y))
    })?;
    run("conv2d 1x1 stride 2", vec![r(&[2, 3, 4, 4]), r(&[2, 3, 1, 1])], &|t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 0)?;
        Ok(squash(t, y))
    })?;
    run("depthwise 3x3", vec![r(&[2, 3, 5, 4]), r(&[3, 1, 3, 3])], &|t, v| {
        let y = t.depthwise_conv(v[0], v[1], 1)?;
        Ok(squash(t, y))
    })?;
    run("batch norm (train)", vec![r(&[3, 2, 3, 3]), r(&[2]), r(&[2])], &|t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], crate::nn::BN_EPS)?;
        Ok(squash(t, y))
    })?;
    let mean = r(&[2]).into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    let var = r(&[2]).mapv(|v| v.abs() + 0.5).into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    run("batch norm (eval)", vec![r(&[2, 2, 3, 3]), r(&[2]), r(&[2])], &|t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], mean.view(), var.view(), crate::nn::BN_EPS)?;
        Ok(squash(t, y))
    })?;
    run("prelu", vec![r(&[1, 2, 3, 3]), r(&[1])], &|t, v| {
        let y = t.prelu(v[0], v[1])?;
        Ok(squash(t, y))
    })?;
    run("relu", vec![r(&[1, 2, 3, 3])], &|t, v| {
        let y = t.relu(v[0]);
        Ok(squash(t, y))
    })?;
    run("sigmoid", vec![r(&[1, 2, 3, 3])], &|t, v| {
        let y = t.sigmoid(v[0]);
        Ok(t.sum(y))
    })?;
    run("add", vec![r(&[1, 2, 2, 3]), r(&[1, 2, 2, 3])], &|t, v| {
        let y = t.add(v[0], v[1])?;
        Ok(squash(t, y))
    })?;
    run("spatial weighting", vec![r(&[2, 3, 3, 3]), r(&[2, 1, 3, 3])], &|t, v| {
        let y = t.mul_spatial(v[0], v[1])?;
        Ok(squash(t, y))
    })?;
    run("channel weighting", vec![r(&[2, 3, 3, 3]), r(&[2, 3, 1, 1])], &|t, v| {
        let y = t.mul_channel(v[0], v[1])?;
        Ok(squash(t, y))
    })?;
    run("global average pool", vec![r(&[2, 3, 3, 4])], &|t, v| {
        let y = t.global_avg_pool(v[0])?;
        Ok(squash(t, y))
    })?;
    run("channel conv1d", vec![r(&[2, 5, 1, 1]), r(&[3])], &|t, v| {
        let y = t.conv1d_channels(v[0], v[1])?;
        Ok(squash(t, y))
    })?;
    run("bilinear upsample", vec![r(&[1, 2, 3, 4])], &|t, v| {
        let y = t.upsample2(v[0])?;
        Ok(squash(t, y))
    })?;
    run("radix softmax", vec![r(&[2, 6, 1, 1])], &|t, v| {
        let y = t.radix_softmax(v[0], 2)?;
        Ok(squash(t, y))
    })?;
    run("channel slice", vec![r(&[2, 4, 2, 2])], &|t, v| {
        let y = t.channel_slice(v[0], 1, 2)?;
        Ok(squash(t, y))
    })?;
    let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |ix| f64::from(u8::from((ix[0] + ix[2] * ix[3]) % 3 == 0)));
    run("soft-IoU loss", vec![r(&[2, 1, 3, 3]).mapv(|v| 0.5 + 0.4 * v)], &|t, v| {
        t.soft_iou_loss(v[0], &target, 1e-6)
    })?;
    Ok(out)
}
