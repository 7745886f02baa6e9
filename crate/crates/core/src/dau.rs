//! Displaced aggregation unit (DAU) convolution.
//!
//! Each filter `(f, s)` is a mixture of `K` Gaussians with a shared, fixed
//! `sigma`; unit `k` has an amplification `w` and a continuous displacement
//! `mu`. Because every unit is the same Gaussian translated, the layer is
//! computed by blurring each input channel once and then reading the blurred
//! map at the learned sub-pixel offsets with bilinear interpolation.
//!
//! Sampling follows the gather convention: output pixel `(y, x)` reads the
//! blurred input at `(y + mu_y, x + mu_x)`. Reads outside the map return 0.

use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{blur_channels, blur_derivative_channels, Axis, GaussianKernelBank};
use crate::plane::{gather_add, scatter_add, shifted_dot};
use crate::tensor::{Real, Tensor};

/// Default bound on `|mu_x|` and `|mu_y|`, in pixels.
pub const DEFAULT_MAX_DISPLACEMENT: f64 = 4.0;

/// Spacing-defining extent of the initialization grid.
const INIT_EXTENT: f64 = 1.25;

/// How the displacement gradient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DmuMode {
    /// Samples `X * dG/dmu` at the unit position (continuous-model derivative).
    #[default]
    Analytic,
    /// Exact derivative of the bilinear sampling of the blurred map.
    Interp,
}

impl FromStr for DmuMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "interp" => Ok(Self::Interp),
            other => Err(Error::Config(format!("unknown dmu mode '{other}' (analytic|interp)"))),
        }
    }
}

impl std::fmt::Display for DmuMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Analytic => "analytic",
            Self::Interp => "interp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DauLayerParams<T: Real = f32> {
    pub out_features: usize,
    pub in_channels: usize,
    pub units: usize,
    /// Amplifications, indexed `[f][s][k]`.
    pub w: Vec<T>,
    /// Displacements `(mu_x, mu_y)`, indexed like `w`.
    pub mu: Vec<[T; 2]>,
    pub bias: Vec<T>,
    pub sigma: f64,
    pub max_displacement: f64,
    /// Pruned units are inactive: skipped by forward sampling and not counted.
    pub active: Vec<bool>,
}

/// Centered regular grid of initial unit positions.
///
/// Units fill a `rows x cols` grid (`cols = ceil(sqrt(K))`) spread evenly
/// over `[-1.25, 1.25]` on each axis, e.g. `K = 4` gives `(+-1.25, +-1.25)`.
pub fn init_grid(units: usize) -> Vec<[f64; 2]> {
    if units == 0 {
        return Vec::new();
    }
    let cols = (units as f64).sqrt().ceil() as usize;
    let rows = units.div_ceil(cols);
    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -INIT_EXTENT + 2.0 * INIT_EXTENT * i as f64 / (n - 1) as f64
        }
    };
    (0..units).map(|k| [coord(k % cols, cols), coord(k / cols, rows)]).collect()
}

impl<T: Real> DauLayerParams<T> {
    /// All-zero parameters with every unit at the origin.
    pub fn zeros(out_features: usize, in_channels: usize, units: usize, sigma: f64, max_displacement: f64) -> Result<Self> {
        if out_features == 0 || in_channels == 0 || units == 0 {
            return Err(Error::InvalidParam(format!(
                "DAU layer needs F, S, K >= 1 (got {out_features}, {in_channels}, {units})"
            )));
        }
        if !(max_displacement.is_finite() && max_displacement > 0.0) {
            return Err(Error::InvalidParam(format!("max displacement must be > 0, got {max_displacement}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidParam(format!("sigma must be > 0, got {sigma}")));
        }
        let n = out_features * in_channels * units;
        Ok(Self {
            out_features,
            in_channels,
            units,
            w: vec![T::zero(); n],
            mu: vec![[T::zero(); 2]; n],
            bias: vec![T::zero(); out_features],
            sigma,
            max_displacement,
            active: vec![true; n],
        })
    }

    /// Grid-placed units with fan-in scaled uniform amplifications
    /// (`U(+-sqrt(3 / (S*K)))`) and zero bias.
    pub fn initialized<R: Rng>(
        out_features: usize,
        in_channels: usize,
        units: usize,
        sigma: f64,
        max_displacement: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(out_features, in_channels, units, sigma, max_displacement)?;
        let limit = (3.0 / (in_channels * units) as f64).sqrt();
        let grid = init_grid(units);
        for i in 0..p.w.len() {
            p.w[i] = T::of(rng.random_range(-limit..limit));
            let [gx, gy] = grid[i % units];
            p.mu[i] = [T::of(gx), T::of(gy)];
        }
        p.clamp_displacements();
        Ok(p)
    }

    #[inline]
    pub fn unit_index(&self, f: usize, s: usize, k: usize) -> usize {
        (f * self.in_channels + s) * self.units + k
    }

    pub fn num_units(&self) -> usize {
        self.w.len()
    }

    pub fn active_units(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Projects every displacement back into `[-R_d, R_d]^2`.
    pub fn clamp_displacements(&mut self) {
        let r = T::of(self.max_displacement);
        for m in &mut self.mu {
            m[0] = m[0].max(-r).min(r);
            m[1] = m[1].max(-r).min(r);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.w.iter().chain(self.bias.iter()).all(|v| v.is_finite())
            && self.mu.iter().all(|m| m[0].is_finite() && m[1].is_finite())
    }

    pub fn cast<U: Real>(&self) -> DauLayerParams<U> {
        DauLayerParams {
            out_features: self.out_features,
            in_channels: self.in_channels,
            units: self.units,
            w: self.w.iter().map(|&v| U::of(v.as_f64())).collect(),
            mu: self.mu.iter().map(|m| [U::of(m[0].as_f64()), U::of(m[1].as_f64())]).collect(),
            bias: self.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
            sigma: self.sigma,
            max_displacement: self.max_displacement,
            active: self.active.clone(),
        }
    }

    fn check_consistent(&self) -> Result<()> {
        let n = self.out_features * self.in_channels * self.units;
        if self.w.len() != n || self.mu.len() != n || self.active.len() != n || self.bias.len() != self.out_features {
            return Err(Error::Shape(format!(
                "DAU parameter arrays do not match F={} S={} K={}",
                self.out_features, self.in_channels, self.units
            )));
        }
        Ok(())
    }
}

/// Bilinear interpolation weights for a sub-pixel displacement.
///
/// Returns the base cell `(floor(mu_x), floor(mu_y))` and `a[i][j]`, the
/// weight of the sample at `base + (i, j)` (`i` along x, `j` along y).
pub fn bilinear_weights<T: Real>(mu: [T; 2]) -> ([i64; 2], [[T; 2]; 2]) {
    let bx = mu[0].floor();
    let by = mu[1].floor();
    let fx = mu[0] - bx;
    let fy = mu[1] - by;
    let one = T::one();
    let a = [[(one - fx) * (one - fy), (one - fx) * fy], [fx * (one - fy), fx * fy]];
    let base = [bx.to_i64().expect("finite displacement"), by.to_i64().expect("finite displacement")];
    (base, a)
}

/// `(dx, dy, weight)` for the four bilinear taps of a displacement.
#[inline]
fn taps<T: Real>(mu: [T; 2]) -> [(isize, isize, T); 4] {
    let ([bx, by], a) = bilinear_weights(mu);
    let (bx, by) = (bx as isize, by as isize);
    [
        (bx, by, a[0][0]),
        (bx + 1, by, a[1][0]),
        (bx, by + 1, a[0][1]),
        (bx + 1, by + 1, a[1][1]),
    ]
}

/// `d a_ij / d f_x` and `d a_ij / d f_y`, in the tap order of [`taps`].
#[inline]
fn tap_derivatives<T: Real>(mu: [T; 2]) -> [[T; 2]; 4] {
    let fx = mu[0] - mu[0].floor();
    let fy = mu[1] - mu[1].floor();
    let one = T::one();
    [[-(one - fy), -(one - fx)], [one - fy, -fx], [-fy, one - fx], [fy, fx]]
}

/// Forward state retained for the backward pass.
#[derive(Debug)]
pub struct DauCache<T: Real = f32> {
    input: Tensor<T>,
    blurred: Tensor<T>,
    derivatives: OnceLock<(Tensor<T>, Tensor<T>)>,
    sigma: f64,
}

impl<T: Real> DauCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn blurred(&self) -> &Tensor<T> {
        &self.blurred
    }

    /// `X * dG/dmu_x` and `X * dG/dmu_y`, computed on first use.
    pub fn derivative_maps(&self, bank: &GaussianKernelBank) -> &(Tensor<T>, Tensor<T>) {
        self.derivatives.get_or_init(|| {
            (
                blur_derivative_channels(&self.input, bank, Axis::X),
                blur_derivative_channels(&self.input, bank, Axis::Y),
            )
        })
    }

    pub fn has_derivative_maps(&self) -> bool {
        self.derivatives.get().is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DauGradients<T: Real = f32> {
    pub dw: Vec<T>,
    pub dmu: Vec<[T; 2]>,
    pub dbias: Vec<T>,
    pub dinput: Tensor<T>,
}

fn check_bank(p_sigma: f64, bank: &GaussianKernelBank) -> Result<()> {
    if (p_sigma - bank.sigma()).abs() > 1e-12 {
        return Err(Error::InvalidParam(format!(
            "kernel bank sigma {} does not match layer sigma {p_sigma}",
            bank.sigma()
        )));
    }
    Ok(())
}

fn check_input<T: Real>(x: &Tensor<T>, p: &DauLayerParams<T>, bank: &GaussianKernelBank) -> Result<()> {
    p.check_consistent()?;
    check_bank(p.sigma, bank)?;
    if x.channels() != p.in_channels {
        return Err(Error::Shape(format!(
            "DAU layer expects {} input channels, got {}",
            p.in_channels,
            x.channels()
        )));
    }
    Ok(())
}

/// Samples already-blurred maps at the learned displacements and adds the bias.
fn sample_blurred<T: Real>(blurred: &Tensor<T>, p: &DauLayerParams<T>) -> Tensor<T> {
    let [n, _, h, w] = blurred.dims();
    let f_count = p.out_features;
    let mut y = Tensor::zeros([n, f_count, h, w]).expect("valid dims");
    y.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(plane, out)| {
        let (b, f) = (plane / f_count, plane % f_count);
        out.iter_mut().for_each(|v| *v = p.bias[f]);
        for s in 0..p.in_channels {
            let src = blurred.plane(b, s);
            for k in 0..p.units {
                let i = p.unit_index(f, s, k);
                if !p.active[i] {
                    continue;
                }
                for (dx, dy, a) in taps(p.mu[i]) {
                    gather_add(out, src, h, w, p.w[i] * a, dx, dy);
                }
            }
        }
    });
    y
}

/// Pre-activation output of a DAU layer through the blur-then-sample path.
pub fn dau_forward<T: Real>(
    x: &Tensor<T>,
    p: &DauLayerParams<T>,
    bank: &GaussianKernelBank,
) -> Result<(Tensor<T>, DauCache<T>)> {
    check_input(x, p, bank)?;
    let blurred = blur_channels(x, bank);
    let y = sample_blurred(&blurred, p);
    Ok((
        y,
        DauCache {
            input: x.clone(),
            blurred,
            derivatives: OnceLock::new(),
            sigma: p.sigma,
        },
    ))
}

/// Reference implementation that materializes each mixture filter as a dense
/// kernel and runs a plain zero-padded correlation on the unblurred input.
pub fn dau_forward_oracle<T: Real>(x: &Tensor<T>, p: &DauLayerParams<T>, bank: &GaussianKernelBank) -> Result<Tensor<T>> {
    check_input(x, p, bank)?;
    let rg = bank.radius() as i64;
    let reach = p
        .mu
        .iter()
        .flat_map(|m| m.iter())
        .map(|v| v.floor().abs().as_f64() as i64 + 1)
        .max()
        .unwrap_or(0)
        .max(p.max_displacement.ceil() as i64 + 1);
    let radius = reach + rg;
    let size = (2 * radius + 1) as usize;

    // Dense kernel per (f, s): splat w * a_ij at the four taps, then spread
    // each splat by g.
    let mut kernels = vec![vec![0.0f64; size * size]; p.out_features * p.in_channels];
    for f in 0..p.out_features {
        for s in 0..p.in_channels {
            let kern = &mut kernels[f * p.in_channels + s];
            for k in 0..p.units {
                let i = p.unit_index(f, s, k);
                if !p.active[i] {
                    continue;
                }
                for (ox, oy, a) in taps(p.mu[i]) {
                    let c = p.w[i].as_f64() * a.as_f64();
                    for v in -rg..=rg {
                        for u in -rg..=rg {
                            let kx = (ox as i64 + u + radius) as usize;
                            let ky = (oy as i64 + v + radius) as usize;
                            kern[ky * size + kx] += c * bank.g_at(u, v);
                        }
                    }
                }
            }
        }
    }

    let [n, _, h, w] = x.dims();
    let (hi, wi) = (h as i64, w as i64);
    Tensor::from_fn([n, p.out_features, h, w], |b, f, yy, xx| {
        let mut acc = p.bias[f].as_f64();
        for s in 0..p.in_channels {
            let kern = &kernels[f * p.in_channels + s];
            for ky in 0..size {
                let sy = yy as i64 + ky as i64 - radius;
                if sy < 0 || sy >= hi {
                    continue;
                }
                for kx in 0..size {
                    let sx = xx as i64 + kx as i64 - radius;
                    if sx < 0 || sx >= wi {
                        continue;
                    }
                    let kv = kern[ky * size + kx];
                    if kv != 0.0 {
                        acc += kv * x.at(b, s, sy as usize, sx as usize).as_f64();
                    }
                }
            }
        }
        T::of(acc)
    })
}

/// Reverse-mode gradients of a DAU layer.
pub fn dau_backward<T: Real>(
    dldy: &Tensor<T>,
    cache: &DauCache<T>,
    p: &DauLayerParams<T>,
    bank: &GaussianKernelBank,
    mode: DmuMode,
) -> Result<DauGradients<T>> {
    p.check_consistent()?;
    check_bank(p.sigma, bank)?;
    if (cache.sigma - p.sigma).abs() > 1e-12 || cache.input.channels() != p.in_channels {
        return Err(Error::Shape("DAU cache was produced by a different layer".into()));
    }
    let [n, _, h, w] = cache.input.dims();
    if dldy.dims() != [n, p.out_features, h, w] {
        return Err(Error::Shape(format!(
            "upstream gradient dims {:?} do not match layer output {:?}",
            dldy.dims(),
            [n, p.out_features, h, w]
        )));
    }
    let blurred = &cache.blurred;
    let derivs = match mode {
        DmuMode::Analytic => Some(cache.derivative_maps(bank)),
        DmuMode::Interp => None,
    };

    let per_feature = p.in_channels * p.units;
    let mut dw = vec![T::zero(); p.num_units()];
    let mut dmu = vec![[T::zero(); 2]; p.num_units()];
    dw.par_chunks_mut(per_feature)
        .zip(dmu.par_chunks_mut(per_feature))
        .enumerate()
        .for_each(|(f, (dw_f, dmu_f))| {
            for s in 0..p.in_channels {
                for k in 0..p.units {
                    let i = p.unit_index(f, s, k);
                    let local = s * p.units + k;
                    if !p.active[i] {
                        continue;
                    }
                    let t = taps(p.mu[i]);
                    let da = tap_derivatives(p.mu[i]);
                    let (mut gw, mut gx, mut gy) = (0.0f64, 0.0f64, 0.0f64);
                    for b in 0..n {
                        let g = dldy.plane(b, f);
                        let src = blurred.plane(b, s);
                        for (tap, &(dx, dy, a)) in t.iter().enumerate() {
                            let c = shifted_dot(g, src, h, w, dx, dy);
                            gw += a.as_f64() * c;
                            match derivs {
                                None => {
                                    gx += da[tap][0].as_f64() * c;
                                    gy += da[tap][1].as_f64() * c;
                                }
                                Some((mx, my)) => {
                                    gx += a.as_f64() * shifted_dot(g, mx.plane(b, s), h, w, dx, dy);
                                    gy += a.as_f64() * shifted_dot(g, my.plane(b, s), h, w, dx, dy);
                                }
                            }
                        }
                    }
                    let wk = p.w[i].as_f64();
                    dw_f[local] = T::of(gw);
                    dmu_f[local] = [T::of(wk * gx), T::of(wk * gy)];
                }
            }
        });

    let dbias = (0..p.out_features)
        .map(|f| {
            let total: f64 = (0..n)
                .map(|b| dldy.plane(b, f).iter().map(|v| v.as_f64()).sum::<f64>())
                .sum();
            T::of(total)
        })
        .collect();

    // Error on the blurred maps: scatter along the displacements (the
    // displacements rotated about the origin), then blur with the symmetric g.
    let mut dblurred = Tensor::zeros([n, p.in_channels, h, w]).expect("valid dims");
    dblurred
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, acc)| {
            let (b, s) = (plane / p.in_channels, plane % p.in_channels);
            for f in 0..p.out_features {
                let g = dldy.plane(b, f);
                for k in 0..p.units {
                    let i = p.unit_index(f, s, k);
                    if !p.active[i] {
                        continue;
                    }
                    for (dx, dy, a) in taps(p.mu[i]) {
                        scatter_add(acc, g, h, w, p.w[i] * a, dx, dy);
                    }
                }
            }
        });
    let dinput = blur_channels(&dblurred, bank);

    Ok(DauGradients { dw, dmu, dbias, dinput })
}

/// Distance from the border beyond which every bilinear tap of every active
/// unit lands inside the map, so the fast path and the oracle agree exactly.
pub fn safe_interior_margin<T: Real>(p: &DauLayerParams<T>) -> usize {
    p.mu.iter()
        .zip(&p.active)
        .filter(|(_, &a)| a)
        .flat_map(|(m, _)| m.iter())
        .map(|v| {
            let b = v.floor().as_f64() as i64;
            // The upper tap carries zero weight at integer coordinates.
            let top = if v.floor() == *v { b } else { b + 1 };
            b.abs().max(top.abs()) as usize
        })
        .max()
        .unwrap_or(0)
}

/// Multiplies every displacement (and the displacement bound) by `factor`,
/// the DAU counterpart of dilating a dense filter when resolution grows.
pub fn scale_displacements<T: Real>(p: &DauLayerParams<T>, factor: f64) -> Result<DauLayerParams<T>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidParam(format!("displacement scale factor must be > 0, got {factor}")));
    }
    let mut out = p.clone();
    let c = T::of(factor);
    for m in &mut out.mu {
        m[0] *= c;
        m[1] *= c;
    }
    out.max_displacement *= factor;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::build_bank;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, f: usize, s: usize, k: usize, sigma: f64) -> DauLayerParams<f64> {
        let mut p = DauLayerParams::<f64>::zeros(f, s, k, sigma, 4.0).unwrap();
        for i in 0..p.num_units() {
            p.w[i] = rng.random_range(-1.0..1.0);
            p.mu[i] = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        }
        for b in &mut p.bias {
            *b = rng.random_range(-0.5..0.5);
        }
        p
    }

    fn random_input(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let (b, a) = bilinear_weights([0.0f64, 0.0]);
        assert_eq!(b, [0, 0]);
        assert_eq!(a, [[1.0, 0.0], [0.0, 0.0]]);
        let (_, a) = bilinear_weights([0.5f64, 0.5]);
        assert_eq!(a, [[0.25, 0.25], [0.25, 0.25]]);
        let (b, a) = bilinear_weights([-1.25f64, 2.0]);
        assert_eq!(b, [-2, 2]);
        // fx = 0.75, fy = 0
        assert_eq!(a, [[0.25, 0.0], [0.75, 0.0]]);
    }

    #[test]
    fn init_grid_layouts() {
        assert_eq!(init_grid(1), vec![[0.0, 0.0]]);
        assert_eq!(init_grid(2), vec![[-1.25, 0.0], [1.25, 0.0]]);
        assert_eq!(init_grid(4), vec![[-1.25, -1.25], [1.25, -1.25], [-1.25, 1.25], [1.25, 1.25]]);
        assert_eq!(
            init_grid(6),
            vec![[-1.25, -1.25], [0.0, -1.25], [1.25, -1.25], [-1.25, 1.25], [0.0, 1.25], [1.25, 1.25]]
        );
    }

    #[test]
    fn identity_unit_is_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [2, 1, 7, 8]);
        let mut p = DauLayerParams::<f64>::zeros(1, 1, 1, 0.5, 4.0).unwrap();
        p.w[0] = 1.0;
        let (y, _) = dau_forward(&x, &p, &bank).unwrap();
        assert_eq!(y, blur_channels(&x, &bank));
    }

    #[test]
    fn bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [1, 2, 6, 6]);
        let mut p = DauLayerParams::<f64>::zeros(3, 2, 4, 0.5, 4.0).unwrap();
        p.bias = vec![0.7, -1.0, 2.5];
        let (y, _) = dau_forward(&x, &p, &bank).unwrap();
        for f in 0..3 {
            assert!(y.plane(0, f).iter().all(|&v| v == p.bias[f]));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let bank = build_bank(0.5).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]).unwrap();
        let p = DauLayerParams::<f32>::zeros(2, 2, 1, 0.5, 4.0).unwrap();
        assert!(matches!(dau_forward(&x, &p, &bank), Err(Error::Shape(_))));
        assert!(matches!(dau_forward_oracle(&x, &p, &bank), Err(Error::Shape(_))));
    }

    #[test]
    fn integer_shift_matches_shifted_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [1, 1, 9, 9]);
        let mut p = DauLayerParams::<f64>::zeros(1, 1, 1, 0.5, 4.0).unwrap();
        p.w[0] = 1.0;
        p.mu[0] = [2.0, 0.0];
        let blurred = blur_channels(&x, &bank);
        let (y, _) = dau_forward(&x, &p, &bank).unwrap();
        let oracle = dau_forward_oracle(&x, &p, &bank).unwrap();
        for yy in 0..9 {
            for xx in 0..9 {
                let expect = if xx + 2 < 9 { blurred.at(0, 0, yy, xx + 2) } else { 0.0 };
                assert_eq!(y.at(0, 0, yy, xx), expect);
                if xx + 2 + bank.radius() < 9 {
                    assert!((oracle.at(0, 0, yy, xx) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cancelling_units_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [1, 1, 8, 8]);
        let mut p = DauLayerParams::<f64>::zeros(1, 1, 2, 0.5, 4.0).unwrap();
        p.w = vec![0.8, -0.8];
        p.mu = vec![[1.3, -0.6], [1.3, -0.6]];
        p.bias = vec![0.25];
        let oracle = dau_forward_oracle(&x, &p, &bank).unwrap();
        assert!(oracle.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let (y, _) = dau_forward(&x, &p, &bank).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn fast_matches_oracle_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [1, 2, 9, 9]).cast::<f32>();
        let p = random_layer(&mut rng, 3, 2, 4, 0.5).cast::<f32>();
        let (y, _) = dau_forward(&x, &p, &bank).unwrap();
        let o = dau_forward_oracle(&x, &p, &bank).unwrap();
        let m = safe_interior_margin(&p);
        assert!(m <= 4);
        let mut checked = 0;
        for f in 0..3 {
            for yy in m..9 - m {
                for xx in m..9 - m {
                    assert!((y.at(0, f, yy, xx) - o.at(0, f, yy, xx)).abs() < 1e-5);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [2, 2, 6, 6]);
        let p = random_layer(&mut rng, 2, 2, 3, 0.5);
        let (y, cache) = dau_forward(&x, &p, &bank).unwrap();
        let zero = Tensor::zeros(y.dims()).unwrap();
        for mode in [DmuMode::Interp, DmuMode::Analytic] {
            let g = dau_backward(&zero, &cache, &p, &bank, mode).unwrap();
            assert!(g.dw.iter().all(|&v| v == 0.0));
            assert!(g.dmu.iter().all(|m| m[0] == 0.0 && m[1] == 0.0));
            assert!(g.dbias.iter().all(|&v| v == 0.0));
            assert!(g.dinput.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn impulse_upstream_samples_blurred_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = build_bank(0.5).unwrap();
        let x = random_input(&mut rng, [1, 1, 10, 10]);
        let mut p = DauLayerParams::<f64>::zeros(1, 1, 1, 0.5, 4.0).unwrap();
        p.w[0] = 0.9;
        p.mu[0] = [1.4, -0.7];
        let (y, cache) = dau_forward(&x, &p, &bank).unwrap();
        let mut g = Tensor::zeros(y.dims()).unwrap();
        let (y0, x0) = (5usize, 4usize);
        g.set(0, 0, y0, x0, 1.0);
        let grads = dau_backward(&g, &cache, &p, &bank, DmuMode::Interp).unwrap();
        // X~ at (x0 + 1.4, y0 - 0.7) by hand-rolled bilinear interpolation.
        let xb = cache.blurred();
        let (fx, fy) = (0.4, 0.3);
        let (sx, sy) = (x0 + 1, y0 - 1);
        let expect = (1.0 - fx) * (1.0 - fy) * xb.at(0, 0, sy, sx)
            + fx * (1.0 - fy) * xb.at(0, 0, sy, sx + 1)
            + (1.0 - fx) * fy * xb.at(0, 0, sy + 1, sx)
            + fx * fy * xb.at(0, 0, sy + 1, sx + 1);
        assert!((grads.dw[0] - expect).abs() < 1e-12);
        assert_eq!(grads.dbias[0], 1.0);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let bank = build_bank(0.5).unwrap();
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]).unwrap();
        let p = DauLayerParams::<f32>::zeros(2, 1, 1, 0.5, 4.0).unwrap();
        let (_, cache) = dau_forward(&x, &p, &bank).unwrap();
        let bad = Tensor::zeros([1, 1, 4, 4]).unwrap();
        assert!(dau_backward(&bad, &cache, &p, &bank, DmuMode::Interp).is_err());
        let other = DauLayerParams::<f32>::zeros(2, 1, 1, 0.7, 4.0).unwrap();
        let bank7 = build_bank(0.7).unwrap();
        let g = Tensor::zeros([1, 2, 4, 4]).unwrap();
        assert!(dau_backward(&g, &cache, &other, &bank7, DmuMode::Interp).is_err());
    }

    #[test]
    fn derivative_maps_are_lazy() {
        let bank = build_bank(0.5).unwrap();
        let x = Tensor::<f32>::filled([1, 1, 5, 5], 1.0).unwrap();
        let p = DauLayerParams::<f32>::zeros(1, 1, 1, 0.5, 4.0).unwrap();
        let (y, cache) = dau_forward(&x, &p, &bank).unwrap();
        assert!(!cache.has_derivative_maps());
        let g = Tensor::zeros(y.dims()).unwrap();
        dau_backward(&g, &cache, &p, &bank, DmuMode::Interp).unwrap();
        assert!(!cache.has_derivative_maps());
        dau_backward(&g, &cache, &p, &bank, DmuMode::Analytic).unwrap();
        assert!(cache.has_derivative_maps());
    }

    #[test]
    fn scale_examples() {
        let mut p = DauLayerParams::<f64>::zeros(1, 1, 1, 0.5, 4.0).unwrap();
        p.mu[0] = [1.5, -0.5];
        p.w[0] = 0.3;
        let q = scale_displacements(&p, 2.0).unwrap();
        assert_eq!(q.mu[0], [3.0, -1.0]);
        assert_eq!(q.max_displacement, 8.0);
        assert_eq!(q.w, p.w);
        assert_eq!(scale_displacements(&p, 1.0).unwrap(), p);
        let q = scale_displacements(&p, 4.0).unwrap();
        assert_eq!(q.mu[0], [6.0, -2.0]);
        assert!(scale_displacements(&p, 0.0).is_err());
        assert!(scale_displacements(&p, -2.0).is_err());
    }

    #[test]
    fn clamp_projects_onto_box() {
        let mut p = DauLayerParams::<f32>::zeros(1, 1, 2, 0.5, 4.0).unwrap();
        p.mu = vec![[5.5, -4.5], [3.0, -9.0]];
        p.clamp_displacements();
        assert_eq!(p.mu, vec![[4.0, -4.0], [3.0, -4.0]]);
    }

    #[test]
    fn initialized_is_deterministic_and_on_grid() {
        let a = DauLayerParams::<f32>::initialized(4, 3, 4, 0.5, 4.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = DauLayerParams::<f32>::initialized(4, 3, 4, 0.5, 4.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let limit = (3.0f32 / 12.0).sqrt();
        assert!(a.w.iter().all(|w| w.abs() <= limit));
        for (i, m) in a.mu.iter().enumerate() {
            let g = init_grid(4)[i % 4];
            assert_eq!([m[0] as f64, m[1] as f64], g);
        }
    }
}
