//! Forward and backward kernels for the layer set used by the classifier.
//!
//! Every function here is pure: outputs depend only on the arguments. Parallel
//! loops partition outputs, so each element is produced by one task in a fixed
//! summation order and results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrad::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

/// Output extent of a sliding window along one axis.
pub fn window_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            return Err(Error::dim("conv3d", format!("input {input:?} / weight {weight:?} must be rank 5")));
        }
        if input[1] != weight[1] {
            return Err(Error::dim(
                "conv3d",
                format!("input has {} channels, weight expects {}", input[1], weight[1]),
            ));
        }
        let k = weight[2];
        if weight[3] != k || weight[4] != k {
            return Err(Error::dim("conv3d", format!("kernel {weight:?} is not cubic")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be positive".into()));
        }
        let mut dout = [0; 3];
        for a in 0..3 {
            dout[a] = window_out_extent(input[2 + a], k, stride, pad).ok_or_else(|| {
                Error::dim("conv3d", format!("kernel {k} exceeds padded extent of {input:?}"))
            })?;
        }
        Ok(Self {
            n: input[0],
            cin: input[1],
            cout: weight[0],
            k,
            stride,
            pad,
            din: [input[2], input[3], input[4]],
            dout,
        })
    }

    fn in_plane(&self) -> usize {
        self.din.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.dout.iter().product()
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Valid output index range along one axis for kernel offset `kk`:
    /// outputs `o` with `0 <= o*stride + kk - pad < extent`.
    fn valid_range(&self, axis: usize, kk: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let extent = self.din[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if extent - 1 - off < 0 { 0 } else { (extent - 1 - off) / s + 1 };
        let hi = hi.min(self.dout[axis] as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }

    /// Calls `f(out_row_offset, in_row_offset, ow_lo, len)` for every output row touched by
    /// tap (kd, kh, kw). Input column for output column `ow_lo + j` is
    /// `in_row_offset + (ow_lo + j) * stride + kw - pad`.
    #[inline]
    fn for_tap_rows(&self, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (d_lo, d_hi) = self.valid_range(0, kd);
        let (h_lo, h_hi) = self.valid_range(1, kh);
        let (w_lo, w_hi) = self.valid_range(2, kw);
        if w_hi <= w_lo {
            return;
        }
        let [_, hin, win] = self.din;
        let [_, hout, wout] = self.dout;
        for od in d_lo..d_hi {
            let id = od * self.stride + kd - self.pad;
            for oh in h_lo..h_hi {
                let ih = oh * self.stride + kh - self.pad;
                f((od * hout + oh) * wout, (id * hin + ih) * win, w_lo, w_hi - w_lo);
            }
        }
    }
}

/// 3D cross-correlation: `out[n,co] = bias[co] + sum_{ci,kd,kh,kw} w * x`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.numel() != g.cout {
        return Err(Error::dim("conv3d", format!("bias has {} entries for {} filters", bias.numel(), g.cout)));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let (in_plane, out_plane, taps, k) = (g.in_plane(), g.out_plane(), g.taps(), g.k);
    let mut out = vec![T::zero(); g.n * g.cout * out_plane];
    if out_plane > 0 {
        out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, plane)| {
            let (n, co) = (idx / g.cout, idx % g.cout);
            for ci in 0..g.cin {
                let xs = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                let ws = &w[(co * g.cin + ci) * taps..][..taps];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = ws[(kd * k + kh) * k + kw];
                            g.for_tap_rows(kd, kh, kw, |orow, irow, lo, len| {
                                let dst = &mut plane[orow + lo..orow + lo + len];
                                let start = irow + lo * g.stride + kw - g.pad;
                                if g.stride == 1 {
                                    for (o, &xv) in dst.iter_mut().zip(&xs[start..start + len]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (j, o) in dst.iter_mut().enumerate() {
                                        *o += wv * xs[start + j * g.stride];
                                    }
                                }
                            });
                        }
                    }
                }
            }
            let bv = b[co];
            for o in plane.iter_mut() {
                *o += bv;
            }
        });
    }
    let mut shape = vec![g.n, g.cout];
    shape.extend_from_slice(&g.dout);
    Tensor::new(shape, out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a conv3d with respect to the requested operands.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let mut expect = vec![g.n, g.cout];
    expect.extend_from_slice(&g.dout);
    if grad_out.shape() != expect.as_slice() {
        return Err(Error::dim("conv3d_backward", format!("grad {:?} vs output {expect:?}", grad_out.shape())));
    }
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    let (in_plane, out_plane, taps, k) = (g.in_plane(), g.out_plane(), g.taps(), g.k);

    let grad_input = need[0].then(|| {
        let mut dx = vec![T::zero(); g.n * g.cin * in_plane];
        dx.par_chunks_mut(in_plane.max(1)).enumerate().for_each(|(idx, plane)| {
            let (n, ci) = (idx / g.cin, idx % g.cin);
            for co in 0..g.cout {
                let dys = &dy[(n * g.cout + co) * out_plane..][..out_plane];
                let ws = &w[(co * g.cin + ci) * taps..][..taps];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = ws[(kd * k + kh) * k + kw];
                            g.for_tap_rows(kd, kh, kw, |orow, irow, lo, len| {
                                let src = &dys[orow + lo..orow + lo + len];
                                let start = irow + lo * g.stride + kw - g.pad;
                                if g.stride == 1 {
                                    for (d, &gv) in plane[start..start + len].iter_mut().zip(src) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in src.iter().enumerate() {
                                        plane[start + j * g.stride] += wv * gv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });
        dx
    });

    let grad_weight = need[1].then(|| {
        let mut dw = vec![T::zero(); g.cout * g.cin * taps];
        dw.par_chunks_mut(g.cin * taps).enumerate().for_each(|(co, chunk)| {
            for ci in 0..g.cin {
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = T::zero();
                            for n in 0..g.n {
                                let xs = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                                let dys = &dy[(n * g.cout + co) * out_plane..][..out_plane];
                                g.for_tap_rows(kd, kh, kw, |orow, irow, lo, len| {
                                    let src = &dys[orow + lo..orow + lo + len];
                                    let start = irow + lo * g.stride + kw - g.pad;
                                    if g.stride == 1 {
                                        for (&gv, &xv) in src.iter().zip(&xs[start..start + len]) {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for (j, &gv) in src.iter().enumerate() {
                                            acc += gv * xs[start + j * g.stride];
                                        }
                                    }
                                });
                            }
                            chunk[ci * taps + (kd * k + kh) * k + kw] = acc;
                        }
                    }
                }
            }
        });
        dw
    });

    let grad_bias = need[2].then(|| {
        (0..g.cout)
            .map(|co| {
                let mut acc = T::zero();
                for n in 0..g.n {
                    for &v in &dy[(n * g.cout + co) * out_plane..][..out_plane] {
                        acc += v;
                    }
                }
                acc
            })
            .collect::<Vec<_>>()
    });

    let mut in_shape = vec![g.n, g.cin];
    in_shape.extend_from_slice(&g.din);
    Ok(ConvGrads {
        input: grad_input.map(|d| Tensor::new(in_shape, d)).transpose()?,
        weight: grad_weight.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        bias: grad_bias.map(|d| Tensor::new(vec![g.cout], d)).transpose()?,
    })
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need at least (N, C), got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Saved state of a batch-norm forward, needed for its backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Batch statistics produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity blended into running variance.
    pub unbiased_var: Vec<T>,
}

/// Train mode normalizes by batch statistics; eval mode uses the running statistics.
pub fn batchnorm3d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    train: bool,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<BatchMoments<T>>)> {
    let (n, c, spatial) = channel_layout(input.shape(), "batchnorm3d")?;
    for (name, p) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if p.numel() != c {
            return Err(Error::dim("batchnorm3d", format!("{name} has {} entries for {c} channels", p.numel())));
        }
    }
    let count = n * spatial;
    if train && count == 0 {
        return Err(Error::EmptyBatch);
    }
    let x = input.data();
    let eps = T::of(epsilon);
    let mut moments = train.then(|| BatchMoments { mean: vec![T::zero(); c], unbiased_var: vec![T::zero(); c] });
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, var) = if train {
            let mut sum = T::zero();
            for b in 0..n {
                for &v in &x[(b * c + ch) * spatial..][..spatial] {
                    sum += v;
                }
            }
            let mu = sum / T::of(count as f64);
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &x[(b * c + ch) * spatial..][..spatial] {
                    sq += (v - mu) * (v - mu);
                }
            }
            let biased = sq / T::of(count as f64);
            if let Some(m) = moments.as_mut() {
                m.mean[ch] = mu;
                m.unbiased_var[ch] = if count > 1 { sq / T::of((count - 1) as f64) } else { biased };
            }
            (mu, biased)
        } else {
            (running_mean.data()[ch], running_var.data()[ch])
        };
        mean[ch] = mu;
        inv_std[ch] = T::one() / (var + eps).sqrt();
    }
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            let (mu, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + spatial {
                let xh = (x[i] - mu) * is;
                normalized[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BatchNormCache { normalized: Tensor::new(shape, normalized)?, inv_std, batch_stats: train },
        moments,
    ))
}

/// Returns (d input, d gamma, d beta).
pub fn batchnorm3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, spatial) = channel_layout(grad_out.shape(), "batchnorm3d_backward")?;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let count = T::of((n * spatial) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                dgamma[ch] += dy[i] * xh[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                // d x = g * inv_std / M * (M dy - sum dy - xhat * sum(dy xhat))
                for i in base..base + spatial {
                    dx[i] = scale * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count);
                }
            } else {
                for i in base..base + spatial {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Blends batch moments into running statistics in place.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    moments: &BatchMoments<T>,
    momentum: f64,
) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&moments.mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&moments.unbiased_var) {
        *r = keep * *r + m * b;
    }
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, negative_slope: f64) -> Tensor<T> {
    let s = T::of(negative_slope);
    input.map(|x| if x >= T::zero() { x } else { s * x })
}

/// Derivative is 1 for `x >= 0` (including exactly 0) and `negative_slope` below.
pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, negative_slope: f64) -> Tensor<T> {
    let s = T::of(negative_slope);
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= T::zero() { g } else { s * g })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Max pooling with floor semantics. Also returns, per output element, the flat
/// input offset of the first maximal element in row-major window order.
pub fn maxpool3d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::dim("maxpool3d", format!("input {s:?} must be rank 5")));
    }
    let mut dout = [0; 3];
    for a in 0..3 {
        dout[a] = window_out_extent(s[2 + a], kernel, stride, 0)
            .ok_or_else(|| Error::dim("maxpool3d", format!("kernel {kernel} exceeds extent of {s:?}")))?;
    }
    let (nc, din) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let in_plane: usize = din.iter().product();
    let out_plane: usize = dout.iter().product();
    let x = input.data();
    let mut out = vec![T::zero(); nc * out_plane];
    let mut arg = vec![0usize; nc * out_plane];
    for p in 0..nc {
        let base = p * in_plane;
        for od in 0..dout[0] {
            for oh in 0..dout[1] {
                for ow in 0..dout[2] {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let i = base
                                    + ((od * stride + kd) * din[1] + oh * stride + kh) * din[2]
                                    + ow * stride
                                    + kw;
                                // strict comparison keeps the first maximum
                                if best_at == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_at = i;
                                }
                            }
                        }
                    }
                    let o = p * out_plane + (od * dout[1] + oh) * dout[2] + ow;
                    out[o] = best;
                    arg[o] = best_at;
                }
            }
        }
    }
    let mut shape = vec![s[0], s[1]];
    shape.extend_from_slice(&dout);
    Ok((Tensor::new(shape, out)?, arg))
}

pub fn maxpool3d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// `out[n, o] = bias[o] + sum_f input[n, f] * weight[o, f]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
        return Err(Error::dim("linear", format!("input {is:?} vs weight {ws:?}")));
    }
    if bias.numel() != ws[0] {
        return Err(Error::dim("linear", format!("bias has {} entries for {} outputs", bias.numel(), ws[0])));
    }
    let (n, f, o) = (is[0], is[1], ws[0]);
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![T::zero(); n * o];
    for r in 0..n {
        let xr = &x[r * f..][..f];
        for j in 0..o {
            let wr = &w[j * f..][..f];
            let mut acc = T::zero();
            for (&a, &c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            out[r * o + j] = acc + b[j];
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Returns (d input, d weight, d bias).
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); o * f];
    let mut db = vec![T::zero(); o];
    for r in 0..n {
        for j in 0..o {
            let g = dy[r * o + j];
            db[j] += g;
            for c in 0..f {
                dx[r * f + c] += g * w[j * f + c];
                dw[j * f + c] += g * x[r * f + c];
            }
        }
    }
    (
        Tensor::new(vec![n, f], dx).expect("shape"),
        Tensor::new(vec![o, f], dw).expect("shape"),
        Tensor::new(vec![o], db).expect("shape"),
    )
}

/// Inverted-dropout multiplier: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect())
}

/// Applies dropout. `train == false` is the identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, rate: f64, train: bool, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T, R>(input.numel(), rate, rng)?;
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn rows<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(Error::dim(op, format!("expected (N, K), got {s:?}"))),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = rows(logits, "softmax")?;
    let z = logits.data();
    let mut out = vec![T::zero(); n * k];
    for r in 0..n {
        let row = &z[r * k..][..k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out[r * k..][..k].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in &mut out[r * k..][..k] {
            *o = *o / sum;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// `d logits` given softmax output `probs` and `d probs`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let (p, g) = (probs.data(), grad_out.data());
    let mut dz = vec![T::zero(); n * k];
    for r in 0..n {
        let dot: T = (0..k).map(|j| p[r * k + j] * g[r * k + j]).sum();
        for j in 0..k {
            dz[r * k + j] = p[r * k + j] * (g[r * k + j] - dot);
        }
    }
    Tensor::new(vec![n, k], dz).expect("shape")
}

/// Mean over the batch of `-log softmax(logits)[label]`, computed through log-sum-exp.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = rows(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let z = logits.data();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &z[r * k..][..k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[label];
    }
    let loss = if n == 0 { T::zero() } else { total / T::of(n as f64) };
    Ok((loss, softmax(logits)?))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], grad_loss: T) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = grad_loss / T::of(n.max(1) as f64);
    let mut dz = probs.data().to_vec();
    for (r, &label) in labels.iter().enumerate() {
        dz[r * k + label] -= T::one();
    }
    for v in &mut dz {
        *v *= scale;
    }
    Tensor::new(vec![n, k], dz).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let x = t1(&[1, 1, 1, 1, 1], &[3.0]);
        let w = t1(&[1, 1, 1, 1, 1], &[2.0]);
        let b = t1(&[1], &[0.5]);
        assert_eq!(conv3d(&x, &w, &b, 1, 0).unwrap().data(), &[6.5]);
    }

    #[test]
    fn conv_zero_weight_gives_zero() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3, 3], |i| i as f64 * 0.1 - 1.0);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = conv3d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(matches!(conv3d(&x, &w, &b, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_output_extent_follows_floor_formula() {
        let x = Tensor::<f32>::zeros(&[1, 1, 7, 6, 5]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 2, 1).unwrap();
        // floor((n + 2 - 3) / 2) + 1
        assert_eq!(y.shape(), &[1, 1, 4, 3, 3]);
        let y = conv3d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 4, 3]);
    }

    #[test]
    fn conv_backward_single_tap_passes_gradient_through() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3, 3], |i| i as f64);
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0; // centre tap
        let dy = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let g = conv3d_backward(&x, &w, &dy, 1, 1, [true, true, true]).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(g.bias.unwrap().data(), &[27.0]);
    }

    #[test]
    fn conv_backward_zero_grad_gives_zero() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 4, 4, 4], |i| (i as f64).sin());
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3, 3], |i| (i as f64).cos());
        let dy = Tensor::<f64>::zeros(&[2, 3, 4, 4, 4]);
        let g = conv3d_backward(&x, &w, &dy, 1, 1, [true, true, true]).unwrap();
        for t in [g.input.unwrap(), g.weight.unwrap(), g.bias.unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2, 2], |i| i as f64 * 0.3 - 2.0);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let (y, _, m) = batchnorm3d(&x, &ones, &zeros, &zeros, &ones, false, BN_EPSILON).unwrap();
        assert!(m.is_none());
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_on_constant_input_yields_beta() {
        let x = Tensor::<f64>::full(&[2, 2, 2, 2, 2], 4.0);
        let gamma = t1(&[2], &[1.5, 2.0]);
        let beta = t1(&[2], &[0.25, -1.0]);
        let (y, _, m) = batchnorm3d(&x, &gamma, &beta, &Tensor::zeros(&[2]), &Tensor::full(&[2], 1.0), true, BN_EPSILON)
            .unwrap();
        assert_eq!(m.unwrap().mean, vec![4.0, 4.0]);
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / 8) % 2;
            assert!((v - beta.data()[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_train_rejects_empty_batch() {
        let x = Tensor::<f64>::new(vec![0, 2, 2, 2, 2], vec![]).unwrap();
        let p = Tensor::full(&[2], 1.0);
        assert!(matches!(batchnorm3d(&x, &p, &p, &p, &p, true, BN_EPSILON), Err(Error::EmptyBatch)));
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut rm = Tensor::<f64>::zeros(&[1]);
        let mut rv = Tensor::<f64>::full(&[1], 1.0);
        let moments = BatchMoments { mean: vec![2.0], unbiased_var: vec![3.0] };
        update_running_stats(&mut rm, &mut rv, &moments, BN_MOMENTUM);
        assert!((rm.item() - 0.2).abs() < 1e-15);
        assert!((rv.item() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_values() {
        let x = t1(&[3], &[-1.0, 0.0, 2.0]);
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[-0.01, 0.0, 2.0]);
        assert_eq!(leaky_relu(&x, 1.0).data(), x.data());
        let g = leaky_relu_backward(&x, &Tensor::full(&[3], 1.0), 0.01);
        assert_eq!(g.data(), &[0.01, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_window_and_tie_break() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 2, 2], |i| (i + 1) as f64);
        let (y, _) = maxpool3d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[8.0]);

        let c = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 3.0);
        let (y, arg) = maxpool3d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let dx = maxpool3d_backward(c.shape(), &arg, &Tensor::full(y.shape(), 1.0));
        // only the first element of each window receives gradient
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    let expect = if d % 2 == 0 && h % 2 == 0 && w % 2 == 0 { 1.0 } else { 0.0 };
                    assert_eq!(dx.at(&[0, 0, d, h, w]), expect);
                }
            }
        }
    }

    #[test]
    fn maxpool_drops_leftover_border() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4, 3]);
        let (y, _) = maxpool3d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 1]);
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = t1(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap().data(), x.data());
        let y = linear(&x, &Tensor::zeros(&[2, 3]), &t1(&[2], &[0.5, -0.5])).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 0.5, -0.5]);
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dropout_identities_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[100], |i| i as f64);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_within_binomial_bound() {
        let n = 100_000usize;
        let x = Tensor::<f64>::full(&[n], 1.0);
        let a = dropout(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let survivors = a.data().iter().filter(|&&v| v != 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((survivors - 0.5 * n as f64).abs() < 3.0 * sigma);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn softmax_and_cross_entropy_basics() {
        let z = t1(&[1, 2], &[0.0, 0.0]);
        let (loss, p) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let z = t1(&[1, 2], &[1000.0, 0.0]);
        let (loss, p) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Tensor::<f64>::from_fn(&[5, 4], |i| ((i * 37) % 11) as f64 - 5.0);
        let p = softmax(&z).unwrap();
        for r in 0..5 {
            let s: f64 = p.data()[r * 4..][..4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
