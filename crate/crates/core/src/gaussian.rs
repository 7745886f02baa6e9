//! Discretized Gaussian aggregation kernels.
//!
//! A [`GaussianKernelBank`] holds the zero-mean Gaussian `g` for a fixed
//! `sigma` plus the two kernels `dgx`, `dgy` that give the derivative of a
//! blurred map with respect to a displacement of the sampling point. The
//! Gaussian factorizes, so blurs run as two 1-D passes; the dense 2-D kernels
//! are kept for inspection and for the explicit-filter oracle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plane::valid_range;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernelBank {
    sigma: f64,
    radius: usize,
    /// Row-major `(2R+1)^2`, row index is the `y` offset.
    g: Vec<f64>,
    dgx: Vec<f64>,
    dgy: Vec<f64>,
    g1: Vec<f64>,
    dg1: Vec<f64>,
}

/// Truncation radius used for a given sigma.
pub fn kernel_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

fn recenter(k: &mut [f64]) {
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
}

pub fn build_bank(sigma: f64) -> Result<GaussianKernelBank> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidParam(format!("sigma must be finite and > 0, got {sigma}")));
    }
    let radius = kernel_radius(sigma);
    let r = radius as i64;
    let size = 2 * radius + 1;
    let var = sigma * sigma;

    let mut g1: Vec<f64> = (-r..=r).map(|u| (-((u * u) as f64) / (2.0 * var)).exp()).collect();
    let s1: f64 = g1.iter().sum();
    g1.iter_mut().for_each(|v| *v /= s1);
    let mut dg1: Vec<f64> = (-r..=r).zip(&g1).map(|(u, &g)| u as f64 / var * g).collect();
    recenter(&mut dg1);

    let mut g = Vec::with_capacity(size * size);
    for v in -r..=r {
        for u in -r..=r {
            g.push((-((u * u + v * v) as f64) / (2.0 * var)).exp());
        }
    }
    let s2: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s2);

    let mut dgx = vec![0.0; size * size];
    let mut dgy = vec![0.0; size * size];
    for (vi, v) in (-r..=r).enumerate() {
        for (ui, u) in (-r..=r).enumerate() {
            let i = vi * size + ui;
            dgx[i] = u as f64 / var * g[i];
            dgy[i] = v as f64 / var * g[i];
        }
    }
    recenter(&mut dgx);
    recenter(&mut dgy);

    Ok(GaussianKernelBank {
        sigma,
        radius,
        g,
        dgx,
        dgy,
        g1,
        dg1,
    })
}

impl GaussianKernelBank {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn dgx(&self) -> &[f64] {
        &self.dgx
    }

    pub fn dgy(&self) -> &[f64] {
        &self.dgy
    }

    /// Normalized 1-D marginal of `g`.
    pub fn marginal(&self) -> &[f64] {
        &self.g1
    }

    /// Value of `g` at integer offset `(u, v)` (x, y); zero outside the support.
    pub fn g_at(&self, u: i64, v: i64) -> f64 {
        let r = self.radius as i64;
        if u.abs() > r || v.abs() > r {
            return 0.0;
        }
        self.g[((v + r) as usize) * self.size() + (u + r) as usize]
    }

    /// Horizontal and vertical 1-D passes for the requested kernel.
    fn passes(&self, deriv: Option<Axis>) -> (&[f64], &[f64]) {
        match deriv {
            None => (&self.g1, &self.g1),
            Some(Axis::X) => (&self.dg1, &self.g1),
            Some(Axis::Y) => (&self.g1, &self.dg1),
        }
    }
}

/// Zero-padded separable correlation of every `(n, c)` plane.
pub(crate) fn correlate_separable<T: Real>(x: &Tensor<T>, kx: &[f64], ky: &[f64]) -> Tensor<T> {
    let (h, w) = (x.height(), x.width());
    let kx: Vec<T> = kx.iter().map(|&v| T::of(v)).collect();
    let ky: Vec<T> = ky.iter().map(|&v| T::of(v)).collect();
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut out = Tensor::zeros(x.dims()).expect("dims already valid");
    out.data_mut()
        .par_chunks_mut(h * w)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            let mut tmp = vec![T::zero(); h * w];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let trow = &mut tmp[y * w..(y + 1) * w];
                for (ki, &k) in kx.iter().enumerate() {
                    let du = ki as isize - rx;
                    let (lo, hi) = valid_range(w, du);
                    for xx in lo..hi {
                        trow[xx] += k * row[(xx as isize + du) as usize];
                    }
                }
            }
            for (ki, &k) in ky.iter().enumerate() {
                let dv = ki as isize - ry;
                let (lo, hi) = valid_range(h, dv);
                for y in lo..hi {
                    let sy = (y as isize + dv) as usize;
                    let (drow, srow) = (&mut dst[y * w..(y + 1) * w], &tmp[sy * w..(sy + 1) * w]);
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d += k * s;
                    }
                }
            }
        });
    out
}

/// Blurs every channel with `g` (the pre-aggregated map used by the fast path).
pub fn blur_channels<T: Real>(x: &Tensor<T>, bank: &GaussianKernelBank) -> Tensor<T> {
    let (kx, ky) = bank.passes(None);
    correlate_separable(x, kx, ky)
}

/// Correlates every channel with `dgx` or `dgy`.
pub fn blur_derivative_channels<T: Real>(x: &Tensor<T>, bank: &GaussianKernelBank, axis: Axis) -> Tensor<T> {
    let (kx, ky) = bank.passes(Some(axis));
    correlate_separable(x, kx, ky)
}
