use indexmap::IndexMap;
use ndarray::{s, Array1, Array4, ArrayD, ArrayView1, ArrayView4, Axis, Ix1, Ix4, IxDyn};

use super::ops;
use super::Real;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n-1`) variance, the quantity folded into running statistics.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, pad: usize },
    BnTrain { x: Var, gamma: Var, beta: Var, xhat: Array4<T>, inv_std: Vec<T> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Array1<T>, inv_std: Array1<T> },
    Prelu { x: Var, slope: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulSpatial { x: Var, w: Var },
    MulChannel { x: Var, s: Var },
    Gap(Var),
    Conv1dChannels { x: Var, k: Var },
    Upsample2(Var),
    RadixSoftmax { x: Var, radix: usize },
    ChannelSlice { x: Var, start: usize },
    SoftIou { p: Var, target: ArrayD<T>, eps: f64 },
    Sum(Var),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward pass so it can be differentiated once.
///
/// Every op validates shapes and returns a new [`Var`]. [`Tape::backward`]
/// visits the recorded nodes in reverse exactly once and then marks the tape
/// consumed; a second call fails with [`Error::StaleTape`].
///
/// The tape also tallies forward FLOPs under the convention documented in
/// [`crate::model::complexity`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    consumed: bool,
    flops: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn view4<T>(a: &ArrayD<T>) -> ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn view1<T>(a: &ArrayD<T>) -> ArrayView1<'_, T> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

fn rank_check<T>(a: &ArrayD<T>, rank: usize, what: &str) -> Result<()> {
    if a.ndim() != rank {
        return Err(Error::Dimension(format!("{what} must have rank {rank}, got shape {:?}", a.shape())));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: IndexMap::new(), consumed: false, flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn value4(&self, v: Var) -> ArrayView4<'_, T> {
        view4(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input (its gradient is reported by [`Gradients::wrt`]).
    pub fn input(&mut self, value: impl Into<ArrayD<T>>) -> Var {
        self.push(value.into(), Op::Leaf, true)
    }

    /// A value treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: impl Into<ArrayD<T>>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    /// Registers (or reuses) the named parameter.
    pub fn param(&mut self, name: &str, value: &ArrayD<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_owned(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        rank_check(self.value(x), 4, "conv2d input")?;
        rank_check(self.value(w), 4, "conv2d kernel")?;
        let y = {
            let bias = match b {
                Some(b) => {
                    rank_check(self.value(b), 1, "conv2d bias")?;
                    Some(view1(self.value(b)))
                }
                None => None,
            };
            ops::conv2d(self.value4(x), self.value4(w), bias, stride, pad)?
        };
        let (cout, cin, k, _) = self.value4(w).dim();
        let out_elems = y.len() as u64;
        self.flops += 2 * (cin * k * k) as u64 * out_elems + if b.is_some() { out_elems } else { 0 };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        debug_assert_eq!(y.dim().1, cout);
        Ok(self.push(y.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    pub fn depthwise_conv(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        rank_check(self.value(x), 4, "depthwise input")?;
        rank_check(self.value(w), 4, "depthwise kernel")?;
        let y = ops::depthwise_conv(self.value4(x), self.value4(w), pad)?;
        let k = self.shape(w)[2];
        self.flops += 2 * (k * k) as u64 * y.len() as u64;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(y.into_dyn(), Op::Depthwise { x, w, pad }, needs))
    }

    /// Batch norm with batch statistics; the returned stats feed running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        rank_check(self.value(x), 4, "batch norm input")?;
        let (y, xhat, inv_std, mean, var) =
            ops::batch_norm_train(self.value4(x), view1(self.value(gamma)), view1(self.value(beta)), eps)?;
        let (n, _, h, w) = y.dim();
        let m = (n * h * w) as f64;
        let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
        self.flops += 2 * y.len() as u64;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(y.into_dyn(), Op::BnTrain { x, gamma, beta, xhat, inv_std }, needs);
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ArrayView1<T>,
        running_var: ArrayView1<T>,
        eps: f64,
    ) -> Result<Var> {
        rank_check(self.value(x), 4, "batch norm input")?;
        let y = ops::batch_norm_eval(
            self.value4(x),
            view1(self.value(gamma)),
            view1(self.value(beta)),
            running_mean,
            running_var,
            eps,
        )?;
        let inv_std = running_var.mapv(|v| T::one() / (v + T::of(eps)).sqrt());
        self.flops += 2 * y.len() as u64;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BnEval { x, gamma, beta, mean: running_mean.to_owned(), inv_std };
        Ok(self.push(y.into_dyn(), op, needs))
    }

    /// PReLU with a single learnable slope (a one-element parameter).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::Dimension("PReLU slope must be a single value".into()));
        }
        let a = *self.value(slope).iter().next().expect("one element");
        let y = self.value(x).mapv(|v| ops::prelu(v, a));
        self.flops += y.len() as u64;
        let needs = self.needs(x) || self.needs(slope);
        Ok(self.push(y, Op::Prelu { x, slope }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(T::zero()));
        self.flops += y.len() as u64;
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(ops::sigmoid);
        self.flops += y.len() as u64;
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y = self.value(a) + self.value(b);
        self.flops += y.len() as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    /// `x ⊙ w` where `w` is `N×1×H×W`, broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != 1 || xs[0] != ws[0] || xs[2..] != ws[2..] {
            return Err(Error::Dimension(format!("spatial weight {ws:?} does not broadcast over {xs:?}")));
        }
        let y = mul_planes(self.value4(x), self.value4(w), true);
        self.flops += y.len() as u64;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(y.into_dyn(), Op::MulSpatial { x, w }, needs))
    }

    /// `x ⊙ s` where `s` is `N×C×1×1`, broadcast over space.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() != 4 || ss.len() != 4 || xs[..2] != ss[..2] || ss[2] != 1 || ss[3] != 1 {
            return Err(Error::Dimension(format!("channel weight {ss:?} does not broadcast over {xs:?}")));
        }
        let y = mul_planes(self.value4(x), self.value4(s), false);
        self.flops += y.len() as u64;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(y.into_dyn(), Op::MulChannel { x, s }, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        rank_check(self.value(x), 4, "pool input")?;
        self.flops += self.value(x).len() as u64;
        let y = ops::global_avg_pool(self.value4(x));
        let needs = self.needs(x);
        Ok(self.push(y.into_dyn(), Op::Gap(x), needs))
    }

    pub fn conv1d_channels(&mut self, x: Var, k: Var) -> Result<Var> {
        rank_check(self.value(x), 4, "channel descriptor")?;
        rank_check(self.value(k), 1, "channel kernel")?;
        let y = ops::conv1d_channels(self.value4(x), view1(self.value(k)))?;
        self.flops += 6 * y.len() as u64;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(y.into_dyn(), Op::Conv1dChannels { x, k }, needs))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        rank_check(self.value(x), 4, "upsample input")?;
        let y = ops::bilinear_upsample_x2(self.value4(x));
        self.flops += 8 * y.len() as u64;
        let needs = self.needs(x);
        Ok(self.push(y.into_dyn(), Op::Upsample2(x), needs))
    }

    pub fn radix_softmax(&mut self, x: Var, radix: usize) -> Result<Var> {
        rank_check(self.value(x), 4, "softmax input")?;
        let y = ops::radix_softmax(self.value4(x), radix)?;
        self.flops += 3 * y.len() as u64;
        let needs = self.needs(x);
        Ok(self.push(y.into_dyn(), Op::RadixSoftmax { x, radix }, needs))
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        rank_check(self.value(x), 4, "slice input")?;
        let c = self.shape(x)[1];
        if start + len > c || len == 0 {
            return Err(Error::Dimension(format!("channel slice {start}..{} out of 0..{c}", start + len)));
        }
        let y = self.value4(x).slice(s![.., start..start + len, .., ..]).to_owned();
        let needs = self.needs(x);
        Ok(self.push(y.into_dyn(), Op::ChannelSlice { x, start }, needs))
    }

    /// `1 - (Σpt + ε) / (Σp + Σt - Σpt + ε)` over every element; `target` is constant.
    pub fn soft_iou_loss(&mut self, p: Var, target: &ArrayD<T>, eps: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} and target {:?} differ",
                self.shape(p),
                target.shape()
            )));
        }
        let (inter, union) = soft_iou_parts(self.value(p), target);
        let loss = 1.0 - (inter + eps) / (union + eps);
        let needs = self.needs(p);
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), T::of(loss)),
            Op::SoftIou { p, target: target.clone(), eps },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().map(|v| v.as_f64()).sum::<f64>();
        let needs = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), T::of(total)), Op::Sum(x), needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.adjoint(i, &g)?;
            grads[i] = Some(g);
            for (v, dg) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => zip_mut(acc, &dg, |a, d| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn adjoint(&self, i: usize, g: &ArrayD<T>) -> Result<Vec<(Var, ArrayD<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(self.value4(x), self.value4(w), view4(g), stride, pad, self.needs(x))?;
                if let Some(dx) = dx {
                    out.push((x, dx.into_dyn()));
                }
                out.push((w, dw.into_dyn()));
                if let Some(b) = b {
                    out.push((b, db.into_dyn()));
                }
            }
            &Op::Depthwise { x, w, pad } => {
                let (dx, dw) = ops::depthwise_conv_backward(self.value4(x), self.value4(w), view4(g), pad);
                out.push((x, dx.into_dyn()));
                out.push((w, dw.into_dyn()));
            }
            Op::BnTrain { x, gamma, beta, xhat, inv_std } => {
                let (dx, dgamma, dbeta) =
                    ops::batch_norm_train_backward(xhat.view(), inv_std, view1(self.value(*gamma)), view4(g));
                out.push((*x, dx.into_dyn()));
                out.push((*gamma, dgamma.into_dyn()));
                out.push((*beta, dbeta.into_dyn()));
            }
            Op::BnEval { x, gamma, beta, mean, inv_std } => {
                let gam = view1(self.value(*gamma));
                let xv = self.value4(*x);
                let g4 = view4(g);
                let c = gam.len();
                let mut dx = g4.to_owned();
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    dx.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * gam[ch] * is);
                    let gl = g4.index_axis(Axis(1), ch);
                    let xl = xv.index_axis(Axis(1), ch);
                    dbeta[ch] = gl.sum();
                    dgamma[ch] = ndarray::Zip::from(&gl)
                        .and(&xl)
                        .fold(T::zero(), |acc, &gv, &xv| acc + gv * (xv - mu) * is);
                }
                out.push((*x, dx.into_dyn()));
                out.push((*gamma, dgamma.into_dyn()));
                out.push((*beta, dbeta.into_dyn()));
            }
            &Op::Prelu { x, slope } => {
                let a = *self.value(slope).iter().next().expect("one element");
                let xv = self.value(x);
                let mut dx = g.clone();
                let mut da = T::zero();
                zip_mut(&mut dx, xv, |d, v| {
                    if v <= T::zero() {
                        da += *d * v;
                        *d *= a;
                    }
                });
                out.push((x, dx));
                out.push((slope, ArrayD::from_elem(self.value(slope).raw_dim(), da)));
            }
            &Op::Relu(x) => {
                let mut dx = g.clone();
                zip_mut(&mut dx, self.value(x), |d, v| {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                });
                out.push((x, dx));
            }
            &Op::Sigmoid(x) => {
                let mut dx = g.clone();
                zip_mut(&mut dx, &node.value, |d, y| *d *= y * (T::one() - y));
                out.push((x, dx));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::MulSpatial { x, w } => {
                let g4 = view4(g);
                let dx = mul_planes(g4, self.value4(w), true);
                let dw = plane_dots(g4, self.value4(x), true);
                out.push((x, dx.into_dyn()));
                out.push((w, dw.into_dyn()));
            }
            &Op::MulChannel { x, s } => {
                let g4 = view4(g);
                let dx = mul_planes(g4, self.value4(s), false);
                let ds = plane_dots(g4, self.value4(x), false);
                out.push((x, dx.into_dyn()));
                out.push((s, ds.into_dyn()));
            }
            &Op::Gap(x) => {
                let shape = self.value4(x).dim();
                let hw = T::of((shape.2 * shape.3) as f64);
                let g4 = view4(g).as_standard_layout().into_owned();
                let hw_len = shape.2 * shape.3;
                let mut dx = Array4::<T>::zeros(shape);
                let planes = dx.as_slice_mut().expect("fresh array").chunks_exact_mut(hw_len);
                for (plane, &gv) in planes.zip(g4.iter()) {
                    plane.fill(gv / hw);
                }
                out.push((x, dx.into_dyn()));
            }
            &Op::Conv1dChannels { x, k } => {
                let (dx, dk) = ops::conv1d_channels_backward(self.value4(x), view1(self.value(k)), view4(g));
                out.push((x, dx.into_dyn()));
                out.push((k, dk.into_dyn()));
            }
            &Op::Upsample2(x) => {
                out.push((x, ops::bilinear_upsample_x2_backward(view4(g)).into_dyn()));
            }
            &Op::RadixSoftmax { x, radix } => {
                let dx = ops::radix_softmax_backward(view4(&node.value), view4(g), radix);
                out.push((x, dx.into_dyn()));
            }
            &Op::ChannelSlice { x, start } => {
                let mut dx = Array4::<T>::zeros(self.value4(x).dim());
                let len = node.value.shape()[1];
                dx.slice_mut(s![.., start..start + len, .., ..]).assign(&view4(g));
                out.push((x, dx.into_dyn()));
            }
            Op::SoftIou { p, target, eps } => {
                let (inter, union) = soft_iou_parts(self.value(*p), target);
                let (ie, ue) = (inter + eps, union + eps);
                let scale = g.iter().next().expect("scalar").as_f64();
                let mut dp = ArrayD::<T>::zeros(target.raw_dim());
                ndarray::Zip::from(&mut dp).and(target).for_each(|d, &t| {
                    let t = t.as_f64();
                    *d = T::of(-scale * (t * ue - ie * (1.0 - t)) / (ue * ue));
                });
                out.push((*p, dp));
            }
            &Op::Sum(x) => {
                let s = *g.iter().next().expect("scalar");
                out.push((x, ArrayD::from_elem(self.value(x).raw_dim(), s)));
            }
        }
        Ok(out)
    }
}

fn soft_iou_parts<T: Real>(p: &ArrayD<T>, t: &ArrayD<T>) -> (f64, f64) {
    let (mut inter, mut sp, mut st) = (0.0f64, 0.0f64, 0.0f64);
    ndarray::Zip::from(p).and(t).for_each(|&p, &t| {
        let (p, t) = (p.as_f64(), t.as_f64());
        inter += p * t;
        sp += p;
        st += t;
    });
    (inter, sp + st - inter)
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter.
    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// `(name, gradient)` for every parameter on the tape, in registration order.
    /// Parameters that received no gradient are skipped.
    pub fn params(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.wrt(v).map(|g| (name.as_str(), g)))
    }
}

/// `dst[i] = f(dst[i], src[i])` elementwise, on slices when both are contiguous.
fn zip_mut<T: Real>(dst: &mut ArrayD<T>, src: &ArrayD<T>, mut f: impl FnMut(&mut T, T)) {
    match (dst.as_slice_mut(), src.as_slice()) {
        (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(a, &b)| f(a, b)),
        _ => ndarray::Zip::from(dst).and(src).for_each(|a, &b| f(a, b)),
    }
}

/// Scales every `H×W` plane of `x` by a factor map: by plane `n` of the
/// `N×1×H×W` tensor `f` when `spatial`, else by entry `(n, c)` of the `N×C×1×1` tensor `f`.
fn mul_planes<T: Real>(x: ArrayView4<T>, f: ArrayView4<T>, spatial: bool) -> Array4<T> {
    let (_, c, h, w) = x.dim();
    let hw = h * w;
    let (xs, fs) = (x.as_standard_layout(), f.as_standard_layout());
    let (xs, fs) = (xs.as_slice().expect("standard layout"), fs.as_slice().expect("standard layout"));
    let mut y = Array4::<T>::zeros(x.dim());
    let planes = y.as_slice_mut().expect("fresh array").chunks_exact_mut(hw).zip(xs.chunks_exact(hw));
    for (i, (dst, src)) in planes.enumerate() {
        if spatial {
            let fp = &fs[(i / c) * hw..(i / c + 1) * hw];
            for ((d, &v), &k) in dst.iter_mut().zip(src).zip(fp) {
                *d = v * k;
            }
        } else {
            let k = fs[i];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * k;
            }
        }
    }
    y
}

/// Reduction adjoint of [`mul_planes`]: sums `g ⊙ x` over channels when
/// `spatial` (giving `N×1×H×W`), else over space (giving `N×C×1×1`).
fn plane_dots<T: Real>(g: ArrayView4<T>, x: ArrayView4<T>, spatial: bool) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let (gs, xs) = (g.as_standard_layout(), x.as_standard_layout());
    let (gs, xs) = (gs.as_slice().expect("standard layout"), xs.as_slice().expect("standard layout"));
    let pairs = gs.chunks_exact(hw).zip(xs.chunks_exact(hw));
    if spatial {
        let mut out = Array4::<T>::zeros((n, 1, h, w));
        let os = out.as_slice_mut().expect("fresh array");
        for (i, (gp, xp)) in pairs.enumerate() {
            let dst = &mut os[(i / c) * hw..(i / c + 1) * hw];
            for ((d, &a), &b) in dst.iter_mut().zip(gp).zip(xp) {
                *d += a * b;
            }
        }
        out
    } else {
        let dots = pairs.map(|(gp, xp)| gp.iter().zip(xp).fold(T::zero(), |acc, (&a, &b)| acc + a * b));
        Array4::from_shape_vec((n, c, 1, 1), dots.collect()).expect("one entry per plane")
    }
}
