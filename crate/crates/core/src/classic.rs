//! Standard layers used around DAU layers: dense convolution, 2x2 max
//! pooling, batch normalization, fully connected and softmax cross-entropy.
//!
//! Convolution is a correlation (no kernel flip), as in common frameworks.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plane::{gather_add2, scatter_add2, shifted_dot2};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    pub out_features: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// `[f][s][ky][kx]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub padding: usize,
    pub stride: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(
        out_features: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        padding: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!("kernel must be odd, got {kernel_h}x{kernel_w}")));
        }
        if out_features == 0 || in_channels == 0 || stride == 0 {
            return Err(Error::InvalidParam("conv needs F, S, stride >= 1".into()));
        }
        Ok(Self {
            out_features,
            in_channels,
            kernel_h,
            kernel_w,
            weights: vec![T::zero(); out_features * in_channels * kernel_h * kernel_w],
            bias: vec![T::zero(); out_features],
            padding,
            stride,
        })
    }

    /// "Same" padding, stride 1, weights `U(+-sqrt(3 / fan_in))`.
    pub fn initialized<R: Rng>(out_features: usize, in_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(out_features, in_channels, kernel, kernel, kernel / 2, 1)?;
        let limit = (3.0 / (in_channels * kernel * kernel) as f64).sqrt();
        p.weights.iter_mut().for_each(|v| *v = T::of(rng.random_range(-limit..limit)));
        Ok(p)
    }

    #[inline]
    pub fn weight_index(&self, f: usize, s: usize, ky: usize, kx: usize) -> usize {
        ((f * self.in_channels + s) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Shape(format!(
                "{h}x{w} input too small for {}x{} kernel",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            out_features: self.out_features,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            weights: self.weights.iter().map(|&v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
            padding: self.padding,
            stride: self.stride,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients<T: Real = f32> {
    pub dweights: Vec<T>,
    pub dbias: Vec<T>,
    pub dinput: Tensor<T>,
}

pub fn conv_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    p.check_input(x)?;
    let [n, _, h, w] = x.dims();
    let (oh, ow) = p.output_hw(h, w)?;
    let mut y = Tensor::zeros([n, p.out_features, oh, ow])?;
    let pad = p.padding as isize;
    y.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(plane, out)| {
        let (b, f) = (plane / p.out_features, plane % p.out_features);
        out.iter_mut().for_each(|v| *v = p.bias[f]);
        for s in 0..p.in_channels {
            let src = x.plane(b, s);
            for ky in 0..p.kernel_h {
                for kx in 0..p.kernel_w {
                    let c = p.weights[p.weight_index(f, s, ky, kx)];
                    let (dx, dy) = (kx as isize - pad, ky as isize - pad);
                    if p.stride == 1 {
                        gather_add2(out, (oh, ow), src, (h, w), c, dx, dy);
                    } else {
                        for oy in 0..oh {
                            let sy = (oy * p.stride) as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let sx = (ox * p.stride) as isize + dx;
                                if sx >= 0 && sx < w as isize {
                                    out[oy * ow + ox] += c * src[sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(y)
}

pub fn conv_backward<T: Real>(x: &Tensor<T>, dldy: &Tensor<T>, p: &ConvParams<T>) -> Result<ConvGradients<T>> {
    p.check_input(x)?;
    let [n, _, h, w] = x.dims();
    let (oh, ow) = p.output_hw(h, w)?;
    if dldy.dims() != [n, p.out_features, oh, ow] {
        return Err(Error::Shape(format!(
            "conv upstream gradient {:?} does not match output {:?}",
            dldy.dims(),
            [n, p.out_features, oh, ow]
        )));
    }
    let pad = p.padding as isize;
    let ksz = p.kernel_h * p.kernel_w;
    let mut dweights = vec![T::zero(); p.weights.len()];
    dweights
        .par_chunks_mut(p.in_channels * ksz)
        .enumerate()
        .for_each(|(f, dwf)| {
            for s in 0..p.in_channels {
                for ky in 0..p.kernel_h {
                    for kx in 0..p.kernel_w {
                        let (dx, dy) = (kx as isize - pad, ky as isize - pad);
                        let mut acc = 0.0f64;
                        for b in 0..n {
                            let g = dldy.plane(b, f);
                            let src = x.plane(b, s);
                            if p.stride == 1 {
                                acc += shifted_dot2(g, (oh, ow), src, (h, w), dx, dy);
                            } else {
                                acc += strided_dot(g, (oh, ow), src, (h, w), p.stride, dx, dy);
                            }
                        }
                        dwf[(s * p.kernel_h + ky) * p.kernel_w + kx] = T::of(acc);
                    }
                }
            }
        });
    let dbias = (0..p.out_features)
        .map(|f| T::of((0..n).map(|b| dldy.plane(b, f).iter().map(|v| v.as_f64()).sum::<f64>()).sum()))
        .collect();
    let mut dinput = Tensor::zeros(x.dims())?;
    dinput.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(plane, acc)| {
        let (b, s) = (plane / p.in_channels, plane % p.in_channels);
        for f in 0..p.out_features {
            let g = dldy.plane(b, f);
            for ky in 0..p.kernel_h {
                for kx in 0..p.kernel_w {
                    let c = p.weights[p.weight_index(f, s, ky, kx)];
                    let (dx, dy) = (kx as isize - pad, ky as isize - pad);
                    if p.stride == 1 {
                        scatter_add2(acc, (h, w), g, (oh, ow), c, dx, dy);
                    } else {
                        for oy in 0..oh {
                            let sy = (oy * p.stride) as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let sx = (ox * p.stride) as isize + dx;
                                if sx >= 0 && sx < w as isize {
                                    acc[sy as usize * w + sx as usize] += c * g[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(ConvGradients { dweights, dbias, dinput })
}

fn strided_dot<T: Real>(
    g: &[T],
    (oh, ow): (usize, usize),
    src: &[T],
    (h, w): (usize, usize),
    stride: usize,
    dx: isize,
    dy: isize,
) -> f64 {
    let mut acc = 0.0f64;
    for oy in 0..oh {
        let sy = (oy * stride) as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for ox in 0..ow {
            let sx = (ox * stride) as isize + dx;
            if sx >= 0 && sx < w as isize {
                acc += (g[oy * ow + ox] * src[sy as usize * w + sx as usize]).as_f64();
            }
        }
    }
    acc
}

/// Argmax routing recorded by [`maxpool2_forward`].
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_dims: [usize; 4],
    /// Flat input offset of the winner for every output element.
    argmax: Vec<usize>,
}

/// 2x2, stride-2 max pooling. Odd sizes are padded on the right/bottom with
/// `-inf`; ties go to the lowest flat input index.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, PoolCache) {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = Tensor::zeros([n, c, oh, ow]).expect("valid dims");
    let mut argmax = vec![0usize; n * c * oh * ow];
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (out, arg))| {
            let base = plane * h * w;
            let src = &x.data()[base..base + h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (yy, xx) = (2 * oy + dy, 2 * ox + dx);
                        if yy < h && xx < w {
                            let v = src[yy * w + xx];
                            if best_i == usize::MAX || v > best {
                                best = v;
                                best_i = yy * w + xx;
                            }
                        }
                    }
                    out[oy * ow + ox] = best;
                    arg[oy * ow + ox] = base + best_i;
                }
            }
        });
    (
        y,
        PoolCache {
            input_dims: x.dims(),
            argmax,
        },
    )
}

pub fn maxpool2_backward<T: Real>(dldy: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
    if dldy.len() != cache.argmax.len() {
        return Err(Error::Shape("pool gradient does not match cached forward".into()));
    }
    let mut dx = Tensor::zeros(cache.input_dims)?;
    let d = dx.data_mut();
    for (&i, &g) in cache.argmax.iter().zip(dldy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    /// Weight of the current batch in the running averages once enough
    /// batches have been seen; before that the plain average of all batches
    /// so far is kept (rate `max(momentum, 1 / (updates + 1))`).
    pub momentum: f64,
    /// Training batches folded into the running averages.
    pub updates: u64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: 1e-5,
            momentum: 0.1,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect();
        BatchNormState {
            scale: c(&self.scale),
            shift: c(&self.shift),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: self.epsilon,
            momentum: self.momentum,
            updates: self.updates,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real = f32> {
    normalized: Tensor<T>,
    inv_std: Vec<f64>,
    training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGradients<T: Real = f32> {
    pub dscale: Vec<T>,
    pub dshift: Vec<T>,
    pub dinput: Tensor<T>,
}

/// Per-channel normalization. In training mode batch statistics are used
/// and the running averages are updated.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    training: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = x.dims();
    if c != state.channels() {
        return Err(Error::Shape(format!("batch norm has {} channels, input has {c}", state.channels())));
    }
    let count = n * h * w;
    if training && count < 2 {
        return Err(Error::InvalidParam(format!(
            "batch norm in training needs N*H*W >= 2, got {count}"
        )));
    }
    let mut stats = vec![(0.0f64, 0.0f64); c];
    for (ch, st) in stats.iter_mut().enumerate() {
        if training {
            let mean = (0..n).flat_map(|b| x.plane(b, ch)).map(|v| v.as_f64()).sum::<f64>() / count as f64;
            let var = (0..n)
                .flat_map(|b| x.plane(b, ch))
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / count as f64;
            *st = (mean, var);
            let m = state.momentum.max(1.0 / (state.updates + 1) as f64);
            let unbiased = var * count as f64 / (count - 1) as f64;
            state.running_mean[ch] = T::of((1.0 - m) * state.running_mean[ch].as_f64() + m * mean);
            state.running_var[ch] = T::of((1.0 - m) * state.running_var[ch].as_f64() + m * unbiased);
        } else {
            *st = (state.running_mean[ch].as_f64(), state.running_var[ch].as_f64().max(0.0));
        }
    }
    if training {
        state.updates += 1;
    }
    let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.dims())?;
    let mut y = Tensor::zeros(x.dims())?;
    for b in 0..n {
        for ch in 0..c {
            let (mean, _) = stats[ch];
            let (g, s) = (state.scale[ch], state.shift[ch]);
            let src = x.plane(b, ch);
            let xn: Vec<T> = src.iter().map(|&v| T::of((v.as_f64() - mean) * inv_std[ch])).collect();
            y.plane_mut(b, ch).iter_mut().zip(&xn).for_each(|(o, &v)| *o = g * v + s);
            normalized.plane_mut(b, ch).copy_from_slice(&xn);
        }
    }
    Ok((
        y,
        BatchNormCache {
            normalized,
            inv_std,
            training,
        },
    ))
}

pub fn batchnorm_backward<T: Real>(
    dldy: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &BatchNormState<T>,
) -> Result<BatchNormGradients<T>> {
    if dldy.dims() != cache.normalized.dims() {
        return Err(Error::Shape("batch norm gradient does not match cached forward".into()));
    }
    let [n, c, h, w] = dldy.dims();
    let count = (n * h * w) as f64;
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    let mut dinput = Tensor::zeros(dldy.dims())?;
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for b in 0..n {
            for (&g, &xn) in dldy.plane(b, ch).iter().zip(cache.normalized.plane(b, ch)) {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * xn.as_f64();
            }
        }
        dscale[ch] = T::of(sum_gx);
        dshift[ch] = T::of(sum_g);
        let k = state.scale[ch].as_f64() * cache.inv_std[ch];
        for b in 0..n {
            let out = dinput.plane_mut(b, ch);
            let g = dldy.plane(b, ch);
            let xn = cache.normalized.plane(b, ch);
            for i in 0..h * w {
                let gi = g[i].as_f64();
                out[i] = T::of(if cache.training {
                    k * (gi - sum_g / count - xn[i].as_f64() * sum_gx / count)
                } else {
                    k * gi
                });
            }
        }
    }
    Ok(BatchNormGradients { dscale, dshift, dinput })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T: Real = f32> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> FcParams<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::InvalidParam("fully connected layer needs >= 1 input and output".into()));
        }
        Ok(Self {
            in_features,
            out_features,
            weights: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        })
    }

    pub fn initialized<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(in_features, out_features)?;
        let limit = (3.0 / in_features as f64).sqrt();
        p.weights.iter_mut().for_each(|v| *v = T::of(rng.random_range(-limit..limit)));
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> FcParams<U> {
        FcParams {
            in_features: self.in_features,
            out_features: self.out_features,
            weights: self.weights.iter().map(|&v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGradients<T: Real = f32> {
    pub dweights: Vec<T>,
    pub dbias: Vec<T>,
    pub dinput: Tensor<T>,
}

/// Flattens each sample and maps it to `[N, out, 1, 1]`.
pub fn fc_forward<T: Real>(x: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    if x.sample_len() != p.in_features {
        return Err(Error::Shape(format!(
            "fully connected layer expects {} inputs per sample, got {}",
            p.in_features,
            x.sample_len()
        )));
    }
    let n = x.batch();
    let mut y = Tensor::zeros([n, p.out_features, 1, 1])?;
    y.data_mut().par_chunks_mut(p.out_features).enumerate().for_each(|(b, out)| {
        let xs = x.sample(b);
        for (o, v) in out.iter_mut().enumerate() {
            let row = &p.weights[o * p.in_features..(o + 1) * p.in_features];
            *v = p.bias[o] + row.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
        }
    });
    Ok(y)
}

pub fn fc_backward<T: Real>(x: &Tensor<T>, dldy: &Tensor<T>, p: &FcParams<T>) -> Result<FcGradients<T>> {
    let n = x.batch();
    if dldy.dims() != [n, p.out_features, 1, 1] || x.sample_len() != p.in_features {
        return Err(Error::Shape("fully connected gradient shapes do not match".into()));
    }
    let mut dweights = vec![T::zero(); p.weights.len()];
    dweights.par_chunks_mut(p.in_features).enumerate().for_each(|(o, row)| {
        for b in 0..n {
            let g = dldy.data()[b * p.out_features + o];
            for (d, &xv) in row.iter_mut().zip(x.sample(b)) {
                *d += g * xv;
            }
        }
    });
    let dbias = (0..p.out_features)
        .map(|o| (0..n).map(|b| dldy.data()[b * p.out_features + o]).sum())
        .collect();
    let mut dinput = Tensor::zeros(x.dims())?;
    dinput.data_mut().par_chunks_mut(p.in_features).enumerate().for_each(|(b, dx)| {
        for o in 0..p.out_features {
            let g = dldy.data()[b * p.out_features + o];
            let row = &p.weights[o * p.in_features..(o + 1) * p.in_features];
            for (d, &wv) in dx.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
    });
    Ok(FcGradients { dweights, dbias, dinput })
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.batch();
    let classes = logits.sample_len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParam(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Tensor::zeros(logits.dims())?;
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        let z = logits.sample(b);
        let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() + max - z[label].as_f64();
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (i, e) in exps.iter().enumerate() {
            let onehot = if i == label { 1.0 } else { 0.0 };
            g[i] = T::of((e / total - onehot) / n as f64);
        }
    }
    Ok((T::of(loss / n as f64), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Naive correlation oracle.
    fn conv_direct(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let [n, _, h, w] = x.dims();
        let (oh, ow) = p.output_hw(h, w).unwrap();
        Tensor::from_fn([n, p.out_features, oh, ow], |b, f, oy, ox| {
            let mut acc = p.bias[f];
            for s in 0..p.in_channels {
                for ky in 0..p.kernel_h {
                    for kx in 0..p.kernel_w {
                        let sy = (oy * p.stride + ky) as i64 - p.padding as i64;
                        let sx = (ox * p.stride + kx) as i64 - p.padding as i64;
                        if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            acc += p.weights[p.weight_index(f, s, ky, kx)] * x.at(b, s, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [2, 1, 4, 5]);
        let mut p = ConvParams::<f64>::zeros(1, 1, 1, 1, 0, 1).unwrap();
        p.weights[0] = 1.0;
        p.bias[0] = 0.5;
        let y = conv_forward(&x, &p).unwrap();
        assert_eq!(y, x.map(|v| v + 0.5));
    }

    #[test]
    fn impulse_kernel_is_correlation() {
        // Kernel with a single 1 at (ky, kx) = (0, 2): output reads input at
        // (y - 1, x + 1). A flipped convolution would read (y + 1, x - 1).
        let mut p = ConvParams::<f64>::zeros(1, 1, 3, 3, 1, 1).unwrap();
        p.weights[2] = 1.0;
        let x = Tensor::from_fn([1, 1, 5, 5], |_, _, y, x| (y * 5 + x) as f64).unwrap();
        let y = conv_forward(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), x.at(0, 0, 1, 3));
        assert_eq!(y.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn random_conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, pad, stride) in [(3, 1, 1), (5, 2, 1), (3, 0, 1), (3, 1, 2)] {
            let x = rand_tensor(&mut rng, [2, 3, 7, 6]);
            let mut p = ConvParams::<f64>::zeros(4, 3, k, k, pad, stride).unwrap();
            p.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let fast = conv_forward(&x, &p).unwrap();
            let slow = conv_direct(&x, &p);
            assert_eq!(fast.dims(), slow.dims());
            assert!(fast.max_abs_diff(&slow) < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_channels() {
        assert!(ConvParams::<f32>::zeros(1, 1, 2, 3, 0, 1).is_err());
        let p = ConvParams::<f32>::zeros(1, 2, 3, 3, 1, 1).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]).unwrap();
        assert!(conv_forward(&x, &p).is_err());
    }

    #[test]
    fn pool_cases() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[4.0]);

        let c = Tensor::<f64>::filled([1, 1, 4, 4], 3.0).unwrap();
        let (y, cache) = maxpool2_forward(&c);
        assert!(y.data().iter().all(|&v| v == 3.0));
        let dx = maxpool2_backward(&Tensor::filled(y.dims(), 1.0).unwrap(), &cache).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(dx.at(0, 0, yy, xx), expect);
            }
        }
    }

    #[test]
    fn pool_odd_sizes_pad_with_neg_inf() {
        let x = Tensor::from_vec([1, 1, 3, 3], vec![-5.0f64, -4.0, -3.0, -2.0, -1.0, -6.0, -7.0, -8.0, -9.0]).unwrap();
        let (y, _) = maxpool2_forward(&x);
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[-1.0, -3.0, -7.0, -9.0]);
    }

    #[test]
    fn batchnorm_zero_variance_gives_shift() {
        let x = Tensor::<f64>::filled([2, 1, 2, 2], 4.0).unwrap();
        let mut st = BatchNormState::<f64>::new(1);
        st.shift[0] = 0.3;
        st.scale[0] = 2.0;
        let (y, _) = batchnorm_forward(&x, &mut st, true).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_normalized_input_passes_through() {
        let vals = vec![-1.0f64, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let x = Tensor::from_vec([2, 1, 2, 2], vals).unwrap();
        let mut st = BatchNormState::<f64>::new(1);
        let (y, _) = batchnorm_forward(&x, &mut st, true).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn batchnorm_running_stats_and_errors() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        let mut st = BatchNormState::<f64>::new(1);
        batchnorm_forward(&x, &mut st, true).unwrap();
        // The first batch replaces the initial values outright.
        assert_eq!((st.running_mean[0], st.running_var[0], st.updates), (2.0, 2.0, 1));
        let y = Tensor::from_vec([1, 1, 1, 2], vec![5.0f64, 5.0]).unwrap();
        batchnorm_forward(&y, &mut st, true).unwrap();
        // Second batch: plain average of both.
        assert!((st.running_mean[0] - 3.5).abs() < 1e-12);
        assert!((st.running_var[0] - 1.0).abs() < 1e-12);
        for _ in 0..20 {
            batchnorm_forward(&y, &mut st, true).unwrap();
        }
        // Afterwards the momentum rate takes over: 0.9 * m + 0.1 * 5.
        let before = st.running_mean[0];
        batchnorm_forward(&y, &mut st, true).unwrap();
        assert!((st.running_mean[0] - (0.9 * before + 0.5)).abs() < 1e-12);
        let one = Tensor::<f64>::zeros([1, 1, 1, 1]).unwrap();
        assert!(batchnorm_forward(&one, &mut st, true).is_err());
        assert!(batchnorm_forward(&one, &mut st, false).is_ok());
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::<f64>::zeros([2, 10, 1, 1]).unwrap();
        let (loss, _) = softmax_xent(&z, &[3, 7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let mut big = Tensor::<f64>::zeros([1, 4, 1, 1]).unwrap();
        big.data_mut()[2] = 1e3;
        let (loss, g) = softmax_xent(&big, &[2]).unwrap();
        assert!(loss < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        assert!(softmax_xent(&z, &[3, 10]).is_err());
        assert!(softmax_xent(&z, &[3]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tensor(&mut rng, [3, 5, 1, 1]);
        let (a, _) = softmax_xent(&z, &[0, 4, 2]).unwrap();
        let (b, _) = softmax_xent(&z.map(|v| v + 17.5), &[0, 4, 2]).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn fc_on_single_pixel_is_affine() {
        let x = Tensor::from_vec([1, 3, 1, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut p = FcParams::<f64>::zeros(3, 2).unwrap();
        p.weights = vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        p.bias = vec![0.1, -0.1];
        let y = fc_forward(&x, &p).unwrap();
        assert!((y.data()[0] - (-2.0 + 0.1)).abs() < 1e-12);
        assert!((y.data()[1] - (3.0 - 0.1)).abs() < 1e-12);
    }
}
