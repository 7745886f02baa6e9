//! Shifted multiply-accumulate kernels over single `(H, W)` planes.

use crate::tensor::Real;

/// Output positions `p` in `[0, n)` such that `p + shift` is also in `[0, n)`.
#[inline]
pub(crate) fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    valid_range2(n, n, shift)
}

/// Positions `p` in `[0, dst_n)` with `p + shift` in `[0, src_n)`.
#[inline]
pub(crate) fn valid_range2(dst_n: usize, src_n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (src_n as isize - shift).clamp(0, dst_n as isize) as usize;
    (lo.min(hi), hi)
}

/// `dst[y][x] += c * src[y + dy][x + dx]` wherever the source is in bounds.
/// Both planes are `h x w`.
pub(crate) fn gather_add<T: Real>(dst: &mut [T], src: &[T], h: usize, w: usize, c: T, dx: isize, dy: isize) {
    gather_add2(dst, (h, w), src, (h, w), c, dx, dy)
}

/// [`gather_add`] for planes of different sizes.
pub(crate) fn gather_add2<T: Real>(
    dst: &mut [T],
    (dh, dw): (usize, usize),
    src: &[T],
    (sh, sw): (usize, usize),
    c: T,
    dx: isize,
    dy: isize,
) {
    if c == T::zero() {
        return;
    }
    let (y0, y1) = valid_range2(dh, sh, dy);
    let (x0, x1) = valid_range2(dw, sw, dx);
    if x0 >= x1 {
        return;
    }
    let n = x1 - x0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let d = &mut dst[y * dw + x0..y * dw + x1];
        let s = &src[sy * sw + sx0..sy * sw + sx0 + n];
        for (o, &i) in d.iter_mut().zip(s) {
            *o += c * i;
        }
    }
}

/// Adjoint of [`gather_add`]: `dst[y + dy][x + dx] += c * src[y][x]`.
pub(crate) fn scatter_add<T: Real>(dst: &mut [T], src: &[T], h: usize, w: usize, c: T, dx: isize, dy: isize) {
    gather_add(dst, src, h, w, c, -dx, -dy)
}

/// Adjoint of [`gather_add2`]; `dst` has the source geometry.
pub(crate) fn scatter_add2<T: Real>(
    dst: &mut [T],
    dst_dims: (usize, usize),
    src: &[T],
    src_dims: (usize, usize),
    c: T,
    dx: isize,
    dy: isize,
) {
    gather_add2(dst, dst_dims, src, src_dims, c, -dx, -dy)
}

/// `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over in-bounds positions, with a
/// double-precision accumulator.
pub(crate) fn shifted_dot<T: Real>(a: &[T], b: &[T], h: usize, w: usize, dx: isize, dy: isize) -> f64 {
    shifted_dot2(a, (h, w), b, (h, w), dx, dy)
}

pub(crate) fn shifted_dot2<T: Real>(
    a: &[T],
    (ah, aw): (usize, usize),
    b: &[T],
    (bh, bw): (usize, usize),
    dx: isize,
    dy: isize,
) -> f64 {
    let (y0, y1) = valid_range2(ah, bh, dy);
    let (x0, x1) = valid_range2(aw, bw, dx);
    if x0 >= x1 {
        return 0.0;
    }
    let n = x1 - x0;
    let mut acc = 0.0f64;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let ra = &a[y * aw + x0..y * aw + x1];
        let rb = &b[sy * bw + sx0..sy * bw + sx0 + n];
        let mut row = T::zero();
        for (&p, &q) in ra.iter().zip(rb) {
            row += p * q;
        }
        acc += row.as_f64();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(valid_range(5, 0), (0, 5));
        assert_eq!(valid_range(5, 2), (0, 3));
        assert_eq!(valid_range(5, -2), (2, 5));
        assert_eq!(valid_range(3, 7), (0, 0));
        assert_eq!(valid_range2(4, 6, -1), (1, 4));
        assert_eq!(valid_range2(6, 4, 1), (0, 3));
    }

    #[test]
    fn gather_scatter_adjoint() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        for (dx, dy) in [(0, 0), (1, -1), (-2, 1), (3, 2)] {
            let mut ga = vec![0.0; 12];
            gather_add(&mut ga, &a, 3, 4, 1.0, dx, dy);
            let mut sb = vec![0.0; 12];
            scatter_add(&mut sb, &b, 3, 4, 1.0, dx, dy);
            let lhs: f64 = ga.iter().zip(&b).map(|(p, q)| p * q).sum();
            let rhs: f64 = a.iter().zip(&sb).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-12);
            assert!((shifted_dot(&b, &a, 3, 4, dx, dy) - lhs).abs() < 1e-12);
        }
    }
}
