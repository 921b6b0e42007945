//! Numeric kernels and their adjoints on `N×C×H×W` batches.
//!
//! Convolutions go through im2col + GEMM over fixed-size groups of images.
//! Groups run in parallel, but every reduction across the batch is folded
//! sequentially in group order, so results do not depend on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

use super::Real;
use crate::{Error, Result};

/// Images per im2col/GEMM group.
const CONV_GROUP: usize = 4;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox·stride + kj − pad` is in range.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj { (self.w + self.pad - kj).div_ceil(self.stride).min(self.wo) } else { 0 };
        lo..hi.max(lo)
    }

    fn src_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

fn conv_geom<T>(x: &ArrayView4<T>, w: &ArrayView4<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (_, cin, h, wd) = x.dim();
    let (_, wcin, kh, kw) = w.dim();
    if stride == 0 {
        return Err(Error::InvalidInput("convolution stride must be positive".into()));
    }
    if wcin != cin {
        return Err(Error::Dimension(format!(
            "kernel expects {wcin} input channels, input has {cin}"
        )));
    }
    if kh != kw {
        return Err(Error::Dimension(format!("only square kernels are supported, got {kh}x{kw}")));
    }
    let ho = conv_out_size(h, kh, stride, pad)
        .ok_or_else(|| Error::Dimension(format!("kernel {kh} larger than padded height {h}+2*{pad}")))?;
    let wo = conv_out_size(wd, kw, stride, pad)
        .ok_or_else(|| Error::Dimension(format!("kernel {kw} larger than padded width {wd}+2*{pad}")))?;
    Ok(ConvGeom { cin, h, w: wd, k: kh, stride, pad, ho, wo })
}

/// Unfolds a group of images (`x` holds them back to back) into a
/// `(Cin·K·K) × (n·Ho·Wo)` patch matrix.
fn im2col<T: Real>(x: &[T], n: usize, g: &ConvGeom) -> Array2<T> {
    let (k, p) = (g.k, g.out_px());
    let mut cols = Array2::<T>::zeros((g.cin * k * k, n * p));
    let buf = cols.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..g.cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut buf[((ci * k + ki) * k + kj) * n * p..][..n * p];
                let valid = g.valid_cols(kj);
                for b in 0..n {
                    let plane = &x[b * g.in_len() + ci * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src_row(oy, ki) else { continue };
                        let src = &plane[iy * g.w..][..g.w];
                        let dst = &mut row[b * p + oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let off = kj as isize - g.pad as isize;
                            let (lo, hi) = (valid.start, valid.end);
                            dst[lo..hi].copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        } else {
                            for ox in valid.clone() {
                                dst[ox] = src[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`] for one image: scatters patch-matrix columns
/// `[b·P, (b+1)·P)` back onto `dx`.
fn col2im<T: Real>(cols: &ArrayView2<T>, b: usize, g: &ConvGeom, dx: &mut [T]) {
    let (k, p) = (g.k, g.out_px());
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((ci * k + ki) * k + kj);
                let row = row.as_slice().expect("contiguous patch row");
                let valid = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let Some(iy) = g.src_row(oy, ki) else { continue };
                    let dst = &mut plane[iy * g.w..][..g.w];
                    let src = &row[b * p + oy * g.wo..][..g.wo];
                    for ox in valid.clone() {
                        dst[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Copies a `C × (n·P)` group result into `n` consecutive `C × P` image blocks.
fn scatter_group<T: Real>(src: &Array2<T>, n: usize, dst: &mut [T]) {
    let (c, np) = src.dim();
    let p = np / n;
    for b in 0..n {
        for ch in 0..c {
            let from = src.slice(s![ch, b * p..(b + 1) * p]);
            dst[(b * c + ch) * p..][..p].copy_from_slice(from.as_slice().expect("contiguous row"));
        }
    }
}

/// Inverse of [`scatter_group`]: `n` image blocks `C × P` into one `C × (n·P)` matrix.
fn gather_group<T: Real>(src: &[T], n: usize, c: usize, p: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((c, n * p));
    for b in 0..n {
        for ch in 0..c {
            out.slice_mut(s![ch, b * p..(b + 1) * p])
                .as_slice_mut()
                .expect("contiguous row")
                .copy_from_slice(&src[(b * c + ch) * p..][..p]);
        }
    }
    out
}

fn weight_matrix<T: Real>(weight: &ArrayView4<T>) -> Array2<T> {
    let (cout, cin, k, _) = weight.dim();
    weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weight")
}

/// Dense cross-correlation. `weight` is `Cout×Cin×K×K`, `bias` has `Cout` entries.
pub fn conv2d<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    stride: usize,
    padding: usize,
) -> Result<Array4<T>> {
    let g = conv_geom(&x, &weight, stride, padding)?;
    let (n, cout) = (x.dim().0, weight.dim().0);
    if let Some(b) = &bias {
        if b.len() != cout {
            return Err(Error::Dimension(format!("bias has {} entries, expected {cout}", b.len())));
        }
    }
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let wmat = weight_matrix(&weight);
    let p = g.out_px();
    let mut out = Array4::<T>::zeros((n, cout, g.ho, g.wo));
    let out_s = out.as_slice_mut().expect("fresh array is contiguous");
    out_s
        .par_chunks_mut(CONV_GROUP * cout * p)
        .zip(xs.par_chunks(CONV_GROUP * g.in_len()))
        .for_each(|(o, xg)| {
            let m = xg.len() / g.in_len();
            let mut res = Array2::<T>::zeros((cout, m * p));
            if g.pointwise() {
                for b in 0..m {
                    let xm = ArrayView2::from_shape((g.cin, p), &xg[b * g.in_len()..][..g.in_len()]).expect("shape");
                    let mut r = res.slice_mut(s![.., b * p..(b + 1) * p]);
                    general_mat_mul(T::one(), &wmat, &xm, T::zero(), &mut r);
                }
            } else {
                let cols = im2col(xg, m, &g);
                general_mat_mul(T::one(), &wmat, &cols, T::zero(), &mut res);
            }
            if let Some(b) = &bias {
                for (mut row, &bv) in res.outer_iter_mut().zip(b.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
            scatter_group(&res, m, o);
        });
    Ok(out)
}

/// `W[co, ci, i, j] → W'[ci, co, K−1−i, K−1−j]`: the kernel of the transposed
/// stride-1 convolution.
fn flip_transpose<T: Real>(weight: &ArrayView4<T>) -> Array4<T> {
    let (cout, cin, k, _) = weight.dim();
    Array4::from_shape_fn((cin, cout, k, k), |(ci, co, i, j)| weight[[co, ci, k - 1 - i, k - 1 - j]])
}

/// Adjoint of [`conv2d`]: returns `(d_input, d_weight, d_bias)`. `d_input` is
/// skipped when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    dy: ArrayView4<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Array4<T>>, Array4<T>, Array1<T>)> {
    let g = conv_geom(&x, &weight, stride, padding)?;
    let (n, cout) = (x.dim().0, weight.dim().0);
    if dy.dim() != (n, cout, g.ho, g.wo) {
        return Err(Error::Dimension(format!(
            "output gradient {:?} does not match convolution output {:?}",
            dy.dim(),
            (n, cout, g.ho, g.wo)
        )));
    }
    let kk = g.cin * g.k * g.k;
    let p = g.out_px();
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let wmat = weight_matrix(&weight);
    // Stride-1 input gradients are a plain convolution with the flipped kernel.
    let transposed = stride == 1 && !g.pointwise() && padding < g.k;
    let scatter_dx = need_input && !transposed;

    let per_group: Vec<(Array2<T>, Option<Array2<T>>)> = xs
        .par_chunks(CONV_GROUP * g.in_len())
        .zip(dys.par_chunks(CONV_GROUP * cout * p))
        .map(|(xg, dyg)| {
            let m = xg.len() / g.in_len();
            let dym = gather_group(dyg, m, cout, p);
            let mut dw = Array2::<T>::zeros((cout, kk));
            if g.pointwise() {
                let xm = gather_group(xg, m, g.cin, p);
                general_mat_mul(T::one(), &dym, &xm.t(), T::zero(), &mut dw);
            } else {
                let cols = im2col(xg, m, &g);
                general_mat_mul(T::one(), &dym, &cols.t(), T::zero(), &mut dw);
            }
            let dcols = scatter_dx.then(|| {
                let mut dcols = Array2::<T>::zeros((kk, m * p));
                general_mat_mul(T::one(), &wmat.t(), &dym, T::zero(), &mut dcols);
                dcols
            });
            (dw, dcols)
        })
        .collect();

    let mut dweight = Array2::<T>::zeros((cout, kk));
    let mut dx_all = scatter_dx.then(|| Array4::<T>::zeros((n, g.cin, g.h, g.w)));
    for (gi, (dw, dcols)) in per_group.into_iter().enumerate() {
        dweight += &dw;
        let (Some(all), Some(dcols)) = (dx_all.as_mut(), dcols) else { continue };
        let m = dcols.dim().1 / p;
        let dst = all.as_slice_mut().expect("fresh array is contiguous");
        let group = &mut dst[gi * CONV_GROUP * g.in_len()..][..m * g.in_len()];
        if g.pointwise() {
            scatter_group(&dcols, m, group);
        } else {
            for b in 0..m {
                col2im(&dcols.view(), b, &g, &mut group[b * g.in_len()..][..g.in_len()]);
            }
        }
    }
    if need_input && transposed {
        let wt = flip_transpose(&weight);
        dx_all = Some(conv2d(dy.view(), wt.view(), None, 1, g.k - 1 - padding)?);
    }
    let dbias = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    let dweight = dweight.into_shape_with_order((cout, g.cin, g.k, g.k)).expect("shape");
    Ok((dx_all, dweight, dbias))
}

/// Output-row and output-column windows of tap `(ki, kj)` that read inside the input plane.
fn tap_window(o: usize, i: usize, kk: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kk);
    let hi = (i + p).saturating_sub(kk).min(o);
    (lo, hi.max(lo))
}

/// Per-channel `K×K` convolution; `weight` is `C×1×K×K`. Stride 1.
pub fn depthwise_conv<T: Real>(x: ArrayView4<T>, weight: ArrayView4<T>, padding: usize) -> Result<Array4<T>> {
    let (n, c, h, w) = x.dim();
    let (wc, one, k, k2) = weight.dim();
    if wc != c || one != 1 {
        return Err(Error::Dimension(format!(
            "depthwise kernel bank is {wc}x{one}, input has {c} channels"
        )));
    }
    if k != k2 {
        return Err(Error::Dimension("depthwise kernels must be square".into()));
    }
    let ho = conv_out_size(h, k, 1, padding).ok_or_else(|| Error::Dimension("kernel too large".into()))?;
    let wo = conv_out_size(w, k, 1, padding).ok_or_else(|| Error::Dimension("kernel too large".into()))?;
    let xs = x.as_standard_layout();
    let ws = weight.as_standard_layout();
    let (xs, ws) = (xs.as_slice().expect("standard layout"), ws.as_slice().expect("standard layout"));
    let mut out = Array4::<T>::zeros((n, c, ho, wo));
    let os = out.as_slice_mut().expect("fresh array");
    for (plane_idx, dst) in os.chunks_exact_mut(ho * wo).enumerate() {
        let ch = plane_idx % c;
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        for ki in 0..k {
            let (ylo, yhi) = tap_window(ho, h, ki, padding);
            for kj in 0..k {
                let wv = ws[(ch * k + ki) * k + kj];
                let (xlo, xhi) = tap_window(wo, w, kj, padding);
                for oy in ylo..yhi {
                    let iy = oy + ki - padding;
                    let s = &src[iy * w + xlo + kj - padding..iy * w + xhi + kj - padding];
                    for (d, &v) in dst[oy * wo + xlo..oy * wo + xhi].iter_mut().zip(s) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`depthwise_conv`]: `(d_input, d_weight)`.
pub fn depthwise_conv_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    dy: ArrayView4<T>,
    padding: usize,
) -> (Array4<T>, Array4<T>) {
    let (_, c, h, w) = x.dim();
    let k = weight.dim().2;
    let (ho, wo) = (dy.dim().2, dy.dim().3);
    let xs = x.as_standard_layout();
    let ws = weight.as_standard_layout();
    let gs = dy.as_standard_layout();
    let (xs, ws, gs) = (
        xs.as_slice().expect("standard layout"),
        ws.as_slice().expect("standard layout"),
        gs.as_slice().expect("standard layout"),
    );
    let mut dx = Array4::<T>::zeros(x.dim());
    let mut dw = Array4::<T>::zeros(weight.dim());
    let dws = dw.as_slice_mut().expect("fresh array");
    for (plane_idx, dst) in dx.as_slice_mut().expect("fresh array").chunks_exact_mut(h * w).enumerate() {
        let ch = plane_idx % c;
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        let g = &gs[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        for ki in 0..k {
            let (ylo, yhi) = tap_window(ho, h, ki, padding);
            for kj in 0..k {
                let tap = (ch * k + ki) * k + kj;
                let wv = ws[tap];
                let (xlo, xhi) = tap_window(wo, w, kj, padding);
                let mut acc = T::zero();
                for oy in ylo..yhi {
                    let start = (oy + ki - padding) * w + xlo + kj - padding;
                    let span = start..start + (xhi - xlo);
                    let gr = &g[oy * wo + xlo..oy * wo + xhi];
                    let sr = &src[span.clone()];
                    for (&gv, &v) in gr.iter().zip(sr) {
                        acc += gv * v;
                    }
                    for (d, &gv) in dst[span].iter_mut().zip(gr) {
                        *d += wv * gv;
                    }
                }
                dws[tap] += acc;
            }
        }
    }
    (dx, dw)
}

/// Applies `f(channel, plane)` to every contiguous `H×W` plane of a standard-layout tensor.
fn for_planes<T: Real>(x: &mut Array4<T>, mut f: impl FnMut(usize, &mut [T])) {
    let (_, c, h, w) = x.dim();
    for (i, plane) in x.as_slice_mut().expect("standard layout").chunks_exact_mut(h * w).enumerate() {
        f(i % c, plane);
    }
}

/// Per-channel mean and biased variance over `N×H×W`, accumulated in `f64`.
pub fn channel_moments<T: Real>(x: ArrayView4<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, plane) in xs.chunks_exact(h * w).enumerate() {
        mean[i % c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for (i, plane) in xs.chunks_exact(h * w).enumerate() {
        let mu = mean[i % c];
        var[i % c] += plane.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Training-mode batch normalisation. Returns `(y, x_hat, inv_std, mean, biased_var)`.
#[allow(clippy::type_complexity)]
pub fn batch_norm_train<T: Real>(
    x: ArrayView4<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
    eps: f64,
) -> Result<(Array4<T>, Array4<T>, Vec<T>, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension(format!("batch norm over {c} channels got {} scales", gamma.len())));
    }
    if n * h * w < 2 {
        return Err(Error::InvalidInput(
            "training-mode batch norm needs more than one value per channel".into(),
        ));
    }
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = x.as_standard_layout().into_owned();
    for_planes(&mut xhat, |ch, plane| {
        let (mu, is) = (T::of(mean[ch]), inv_std[ch]);
        plane.iter_mut().for_each(|v| *v = (*v - mu) * is);
    });
    let mut y = xhat.clone();
    for_planes(&mut y, |ch, plane| {
        let (g, b) = (gamma[ch], beta[ch]);
        plane.iter_mut().for_each(|v| *v = *v * g + b);
    });
    Ok((y, xhat, inv_std, mean, var))
}

/// Adjoint of [`batch_norm_train`]: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_train_backward<T: Real>(
    xhat: ArrayView4<T>,
    inv_std: &[T],
    gamma: ArrayView1<T>,
    dy: ArrayView4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = xhat.dim();
    let xs = xhat.as_standard_layout();
    let gs = dy.as_standard_layout();
    let (xs, gs) = (xs.as_slice().expect("standard layout"), gs.as_slice().expect("standard layout"));
    let m = (n * h * w) as f64;
    let (mut sum_g, mut sum_gx) = (vec![0.0f64; c], vec![0.0f64; c]);
    for (i, (xp, gp)) in xs.chunks_exact(h * w).zip(gs.chunks_exact(h * w)).enumerate() {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for (&a, &b) in xp.iter().zip(gp) {
            sg += b;
            sgx += a * b;
        }
        sum_g[i % c] += sg.as_f64();
        sum_gx[i % c] += sgx.as_f64();
    }
    let dbeta = Array1::from_iter(sum_g.iter().map(|&v| T::of(v)));
    let dgamma = Array1::from_iter(sum_gx.iter().map(|&v| T::of(v)));
    let mut dx = Array4::<T>::zeros(xhat.dim());
    let hw = h * w;
    for (i, d) in dx.as_slice_mut().expect("fresh array").chunks_exact_mut(hw).enumerate() {
        let ch = i % c;
        let scale = gamma[ch] * inv_std[ch];
        let (mg, mgx) = (T::of(sum_g[ch] / m), T::of(sum_gx[ch] / m));
        let (xp, gp) = (&xs[i * hw..(i + 1) * hw], &gs[i * hw..(i + 1) * hw]);
        for ((o, &a), &b) in d.iter_mut().zip(xp).zip(gp) {
            *o = scale * (b - mg - a * mgx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Evaluation-mode batch normalisation with fixed statistics.
pub fn batch_norm_eval<T: Real>(
    x: ArrayView4<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
    mean: ArrayView1<T>,
    var: ArrayView1<T>,
    eps: f64,
) -> Result<Array4<T>> {
    let c = x.dim().1;
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::Dimension(format!("batch norm over {c} channels: parameter length mismatch")));
    }
    let mut y = x.as_standard_layout().into_owned();
    for_planes(&mut y, |ch, plane| {
        let is = T::one() / (var[ch] + T::of(eps)).sqrt();
        let (g, b, mu) = (gamma[ch], beta[ch], mean[ch]);
        plane.iter_mut().for_each(|v| *v = (*v - mu) * is * g + b);
    });
    Ok(y)
}

/// Channel-wise mean over `H×W`; output `N×C×1×1`.
pub fn global_avg_pool<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let hw = (h * w) as f64;
    let means = xs
        .as_slice()
        .expect("standard layout")
        .chunks_exact(h * w)
        .map(|p| T::of(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw));
    Array4::from_shape_vec((n, c, 1, 1), means.collect()).expect("one mean per plane")
}

/// Zero-padded 3-tap cross-correlation along the channel axis of an `N×C×1×1` tensor.
pub fn conv1d_channels<T: Real>(v: ArrayView4<T>, kernel: ArrayView1<T>) -> Result<Array4<T>> {
    if kernel.len() != 3 {
        return Err(Error::Dimension(format!("channel kernel must have 3 taps, got {}", kernel.len())));
    }
    let (n, c, _, _) = v.dim();
    let at = |b: usize, i: isize| if i < 0 || i >= c as isize { T::zero() } else { v[[b, i as usize, 0, 0]] };
    Ok(Array4::from_shape_fn((n, c, 1, 1), |(b, ch, _, _)| {
        let i = ch as isize;
        kernel[0] * at(b, i - 1) + kernel[1] * at(b, i) + kernel[2] * at(b, i + 1)
    }))
}

/// Adjoint of [`conv1d_channels`]: `(d_input, d_kernel)`.
pub fn conv1d_channels_backward<T: Real>(
    v: ArrayView4<T>,
    kernel: ArrayView1<T>,
    dy: ArrayView4<T>,
) -> (Array4<T>, Array1<T>) {
    let (n, c, _, _) = v.dim();
    let mut dv = Array4::<T>::zeros(v.dim());
    let mut dk = Array1::<T>::zeros(3);
    for b in 0..n {
        for ch in 0..c {
            let g = dy[[b, ch, 0, 0]];
            for t in 0..3 {
                let src = ch as isize + t as isize - 1;
                if src >= 0 && (src as usize) < c {
                    dk[t] += g * v[[b, src as usize, 0, 0]];
                    dv[[b, src as usize, 0, 0]] += g * kernel[t];
                }
            }
        }
    }
    (dv, dk)
}

/// Source taps for half-pixel-aligned ×2 linear interpolation along one axis.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear ×2 upsampling with half-pixel alignment and edge clamping.
pub fn bilinear_upsample_x2<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    for b in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![b, ch, .., ..]);
            let mut o = out.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, my) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, mx) = (T::of(lx), T::of(1.0 - lx));
                    o[[oy, ox]] = my * (mx * plane[[y0, x0]] + lx * plane[[y0, x1]])
                        + ly * (mx * plane[[y1, x0]] + lx * plane[[y1, x1]]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_upsample_x2`].
pub fn bilinear_upsample_x2_backward<T: Real>(dy: ArrayView4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let g = dy.slice(s![b, ch, .., ..]);
            let mut d = dx.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, my) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, mx) = (T::of(lx), T::of(1.0 - lx));
                    let v = g[[oy, ox]];
                    d[[y0, x0]] += my * mx * v;
                    d[[y0, x1]] += my * lx * v;
                    d[[y1, x0]] += ly * mx * v;
                    d[[y1, x1]] += ly * lx * v;
                }
            }
        }
    }
    dx
}

/// Softmax across `radix` groups of `C` channels of an `N×(radix·C)×1×1` tensor:
/// channel `c` of every group competes with channel `c` of the other groups.
pub fn radix_softmax<T: Real>(x: ArrayView4<T>, radix: usize) -> Result<Array4<T>> {
    let (n, rc, _, _) = x.dim();
    if radix == 0 || rc % radix != 0 {
        return Err(Error::Dimension(format!("{rc} channels cannot be split into {radix} groups")));
    }
    let c = rc / radix;
    let mut out = Array4::<T>::zeros(x.dim());
    for b in 0..n {
        for ch in 0..c {
            let max = (0..radix).map(|r| x[[b, r * c + ch, 0, 0]]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for r in 0..radix {
                let e = (x[[b, r * c + ch, 0, 0]] - max).exp();
                out[[b, r * c + ch, 0, 0]] = e;
                total += e;
            }
            for r in 0..radix {
                out[[b, r * c + ch, 0, 0]] /= total;
            }
        }
    }
    Ok(out)
}

pub fn radix_softmax_backward<T: Real>(y: ArrayView4<T>, dy: ArrayView4<T>, radix: usize) -> Array4<T> {
    let (n, rc, _, _) = y.dim();
    let c = rc / radix;
    let mut dx = Array4::<T>::zeros(y.dim());
    for b in 0..n {
        for ch in 0..c {
            let dot = (0..radix)
                .map(|r| y[[b, r * c + ch, 0, 0]] * dy[[b, r * c + ch, 0, 0]])
                .fold(T::zero(), |a, v| a + v);
            for r in 0..radix {
                let i = r * c + ch;
                dx[[b, i, 0, 0]] = y[[b, i, 0, 0]] * (dy[[b, i, 0, 0]] - dot);
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn prelu<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        slope * v
    }
}

/// Helper for tests and callers holding a single `C×H×W` map.
pub fn batch_of_one<T: Real>(x: ArrayView3<T>) -> Array4<T> {
    x.to_owned().insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn max_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        assert_eq!(a.dim(), b.dim());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, b: &[f64], stride: usize, pad: usize) -> Array4<f64> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Array4::zeros((n, cout, ho, wo));
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[[co, ci, ki, kj]] * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_and_ones() {
        let x = rand4((2, 1, 4, 5), 1);
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let y = conv2d(x.view(), w.view(), Some(arr1(&[0.0]).view()), 1, 0).unwrap();
        assert_eq!(y, x);

        let ones = Array4::from_elem((1, 1, 3, 3), 1.0);
        let y = conv2d(ones.view(), ones.view(), None, 1, 0).unwrap();
        assert_eq!(y.dim(), (1, 1, 1, 1));
        assert_eq!(y[[0, 0, 0, 0]], 9.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = rand4((2, 2, 5, 5), 2);
        let w = rand4((3, 2, 3, 3), 3);
        let b = [0.1, -0.2, 0.3];
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = conv2d(x.view(), w.view(), Some(arr1(&b).view()), stride, pad).unwrap();
            assert!(max_diff(&y, &naive_conv(&x, &w, &b, stride, pad)) < 1e-9);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let dot = |a: &Array4<f64>, b: &Array4<f64>| (a * b).sum();
        for (i, &(k, stride, pad)) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (3, 1, 0), (3, 1, 2), (5, 1, 2), (3, 2, 0)]
            .iter()
            .enumerate()
        {
            let x = rand4((5, 3, 9, 8), i as u64);
            let w = rand4((4, 3, k, k), 100 + i as u64);
            let y = conv2d(x.view(), w.view(), None, stride, pad).unwrap();
            let dy = rand4(y.dim(), 200 + i as u64);
            let (dx, dw, _) = conv2d_backward(x.view(), w.view(), dy.view(), stride, pad, true).unwrap();
            let lhs = dot(&y, &dy);
            assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-9 * lhs.abs().max(1.0), "dx k{k} s{stride} p{pad}");
            assert!((lhs - dot(&w, &dw)).abs() < 1e-9 * lhs.abs().max(1.0), "dw k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn conv_errors() {
        let x = rand4((1, 2, 5, 5), 2);
        let w = rand4((3, 1, 3, 3), 3);
        assert!(matches!(conv2d(x.view(), w.view(), None, 1, 0), Err(Error::Dimension(_))));
        let w = rand4((3, 2, 3, 3), 3);
        assert!(matches!(conv2d(x.view(), w.view(), None, 0, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn conv_weight_grad_of_sum_is_input_correlation_with_ones() {
        let x = rand4((1, 1, 5, 5), 4);
        let w = rand4((1, 1, 3, 3), 5);
        let dy = Array4::from_elem((1, 1, 3, 3), 1.0);
        let (_, dw, db) = conv2d_backward(x.view(), w.view(), dy.view(), 1, 0, false).unwrap();
        for ki in 0..3 {
            for kj in 0..3 {
                let want: f64 = x.slice(s![0, 0, ki..ki + 3, kj..kj + 3]).sum();
                assert!((dw[[0, 0, ki, kj]] - want).abs() < 1e-12);
            }
        }
        assert_eq!(db[0], 9.0);
    }

    fn naive_depthwise(x: &Array4<f64>, w: &Array4<f64>, pad: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let k = w.dim().2;
        let mut out = Array4::zeros((n, c, h + 2 * pad - k + 1, wd + 2 * pad - k + 1));
        let (_, _, ho, wo) = out.dim();
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy + ki) as isize - pad as isize;
                                let ix = (ox + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    out[[b, ch, oy, ox]] += w[[ch, 0, ki, kj]] * x[[b, ch, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_cases() {
        let x = rand4((2, 2, 6, 5), 6);
        let mut ident = Array4::zeros((2, 1, 3, 3));
        ident[[0, 0, 1, 1]] = 1.0;
        ident[[1, 0, 1, 1]] = 1.0;
        assert_eq!(depthwise_conv(x.view(), ident.view(), 1).unwrap(), x);

        ident[[0, 0, 1, 1]] = 0.0;
        let y = depthwise_conv(x.view(), ident.view(), 1).unwrap();
        assert!(y.slice(s![.., 0, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(y.slice(s![.., 1, .., ..]), x.slice(s![.., 1, .., ..]));

        let w = rand4((2, 1, 3, 3), 7);
        let y = depthwise_conv(x.view(), w.view(), 1).unwrap();
        assert!(max_diff(&y, &naive_depthwise(&x, &w, 1)) < 1e-9);

        let bad = rand4((3, 1, 3, 3), 7);
        assert!(depthwise_conv(x.view(), bad.view(), 1).is_err());
    }

    #[test]
    fn batch_norm_statistics() {
        let x = rand4((3, 2, 4, 4), 8).mapv(|v| 5.0 * v + 2.0);
        let gamma = arr1(&[1.0, 1.0]);
        let beta = arr1(&[0.0, 0.0]);
        let (y, ..) = batch_norm_train(x.view(), gamma.view(), beta.view(), 1e-5).unwrap();
        let (mean, var) = channel_moments(y.view());
        for ch in 0..2 {
            assert!(mean[ch].abs() < 1e-6);
            assert!((var[ch] - 1.0).abs() < 1e-5);
        }
        let gamma = arr1(&[2.0, 0.5]);
        let beta = arr1(&[-1.0, 3.0]);
        let (y, ..) = batch_norm_train(x.view(), gamma.view(), beta.view(), 1e-5).unwrap();
        let (mean, var) = channel_moments(y.view());
        for ch in 0..2 {
            assert!((mean[ch] - beta[ch]).abs() < 1e-6);
            assert!((var[ch].sqrt() - gamma[ch]).abs() < 1e-5);
        }

        let constant = Array4::from_elem((2, 1, 3, 3), 7.0);
        let (_, xhat, ..) = batch_norm_train(constant.view(), arr1(&[1.0]).view(), arr1(&[0.0]).view(), 1e-5).unwrap();
        assert!(xhat.iter().all(|&v| v == 0.0));

        let single = Array4::from_elem((1, 1, 1, 1), 7.0);
        assert!(batch_norm_train(single.view(), arr1(&[1.0]).view(), arr1(&[0.0]).view(), 1e-5).is_err());
    }

    #[test]
    fn batch_norm_eval_identity() {
        let x = rand4((2, 2, 3, 3), 9);
        let one = arr1(&[1.0, 1.0]);
        let zero = arr1(&[0.0, 0.0]);
        let y = batch_norm_eval(x.view(), one.view(), zero.view(), zero.view(), one.view(), 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn pool_and_channel_conv() {
        let mut x = Array4::zeros((1, 2, 2, 2));
        x.slice_mut(s![0, 0, .., ..]).assign(&ndarray::arr2(&[[0.0, 2.0], [4.0, 6.0]]));
        x.slice_mut(s![0, 1, .., ..]).fill(-1.5);
        let p = global_avg_pool(x.view());
        assert_eq!(p[[0, 0, 0, 0]], 3.0);
        assert_eq!(p[[0, 1, 0, 0]], -1.5);

        let v = Array4::from_shape_vec((1, 3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let y = conv1d_channels(v.view(), arr1(&[1.0, 1.0, 1.0]).view()).unwrap();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![3.0, 6.0, 5.0]);
        let y = conv1d_channels(v.view(), arr1(&[0.0, 1.0, 0.0]).view()).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn upsample_cases() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample_x2(x.view());
        assert_eq!(y.dim(), (1, 1, 2, 4));
        for r in 0..2 {
            assert_eq!(y.slice(s![0, 0, r, ..]).to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
        }
        let one = Array4::from_elem((1, 1, 1, 1), 3.5);
        assert!(bilinear_upsample_x2(one.view()).iter().all(|&v| v == 3.5));
        let c = Array4::from_elem((2, 3, 4, 5), -1.25);
        assert!(bilinear_upsample_x2(c.view()).iter().all(|&v| v == -1.25));
        let r = rand4((1, 2, 5, 7), 10);
        let up = bilinear_upsample_x2(r.view());
        assert!((up.mean().unwrap() - r.mean().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn radix_softmax_sums_to_one() {
        let x = rand4((2, 6, 1, 1), 11);
        let y = radix_softmax(x.view(), 2).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                assert!((y[[b, c, 0, 0]] + y[[b, c + 3, 0, 0]] - 1.0).abs() < 1e-12);
            }
        }
        assert!(radix_softmax(x.view(), 4).is_err());
    }

    #[test]
    fn scalar_activations() {
        assert_eq!(prelu(-2.0, 0.25), -0.5);
        assert_eq!(prelu(3.0, 0.25), 3.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}
