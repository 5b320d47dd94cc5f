
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Backend, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Conv,
    Transposed,
}

/// Kernel size, stride and zero padding of a (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kind: ConvKind::Conv,
            in_channels,
            out_channels,
            kernel: [kernel, kernel],
            stride,
            padding,
        }
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvGeometry {
            kind: ConvKind::Transposed,
            ..Self::conv(in_channels, out_channels, kernel, stride, padding)
        }
    }

    /// Taps per output channel (`in_channels * kh * kw`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel[0] * self.kernel[1]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape("convolution without channels".into()));
        }
        if self.kernel.contains(&0) || self.stride == 0 {
            return Err(Error::Shape("zero kernel size or stride".into()));
        }
        if self.padding >= self.kernel[0].min(self.kernel[1]) {
            return Err(Error::Shape(format!(
                "padding {} not smaller than kernel {:?}",
                self.padding, self.kernel
            )));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        let dim = |n: usize, k: usize| -> Option<usize> {
            match self.kind {
                ConvKind::Conv => {
                    let padded = n + 2 * self.padding;
                    (padded >= k).then(|| (padded - k) / self.stride + 1)
                }
                ConvKind::Transposed => {
                    let full = n.checked_sub(1)? * self.stride + k;
                    full.checked_sub(2 * self.padding)
                }
            }
        };
        match (
            dim(input.height, self.kernel[0]),
            dim(input.width, self.kernel[1]),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape::new(self.out_channels, h, w)),
            _ => Err(Error::Shape(format!("input {input} too small for {self:?}"))),
        }
    }
}

pub(crate) trait Scalar: Copy + Send + Sync {
    const ZERO: Self;
    fn add(self, other: Self) -> Self;
    /// `self + w * x`, rounded after the product for floats.
    fn mac(self, w: Self, x: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;

    #[inline(always)]
    fn add(self, other: f32) -> f32 {
        self + other
    }

    #[inline(always)]
    fn mac(self, w: f32, x: f32) -> f32 {
        self + w * x
    }
}

// Integer layers carry an overflow certificate, so wrapping never happens;
// wrapping ops keep debug builds as fast as release builds.
impl Scalar for i32 {
    const ZERO: i32 = 0;

    #[inline(always)]
    fn add(self, other: i32) -> i32 {
        self.wrapping_add(other)
    }

    #[inline(always)]
    fn mac(self, w: i32, x: i32) -> i32 {
        self.wrapping_add(w.wrapping_mul(x))
    }
}

const TILE: usize = 4;

/// Runs a (transposed) convolution with the accumulation order of `backend`.
///
/// Weights are laid out `(out, in, kh, kw)` for both kinds. For every output
/// element the contributing products are the same under every backend; only
/// the association of the sum changes.
pub(crate) fn convolve<T: Scalar>(
    geom: &ConvGeometry,
    input_shape: Shape,
    input: &[T],
    weights: &[T],
    bias: &[T],
    backend: Backend,
) -> Result<(Shape, Vec<T>)> {
    let out_shape = geom.output_shape(input_shape)?;
    if weights.len() != geom.weight_len() || bias.len() != geom.out_channels {
        return Err(Error::Shape(format!(
            "{} weights / {} biases for {geom:?}",
            weights.len(),
            bias.len()
        )));
    }
    if input.len() != input_shape.len() {
        return Err(Error::Shape(format!(
            "{} input elements for {input_shape}",
            input.len()
        )));
    }
    let plane = out_shape.plane();
    let fan_in = geom.fan_in();
    let taps = geom.kernel[0] * geom.kernel[1];
    let mut out = vec![T::ZERO; out_shape.len()];

    out.par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(oc, acc)| {
            let row = &weights[oc * fan_in..(oc + 1) * fan_in];
            let tap = |acc: &mut [T], ic: usize, t: usize| {
                let src = &input[ic * input_shape.plane()..(ic + 1) * input_shape.plane()];
                accumulate_tap(geom, input_shape, out_shape, src, row[ic * taps + t], t, acc);
            };
            match backend {
                Backend::Reference => {
                    acc.fill(bias[oc]);
                    for ic in 0..geom.in_channels {
                        for t in 0..taps {
                            tap(acc, ic, t);
                        }
                    }
                }
                Backend::Tiled => {
                    let mut partial = vec![T::ZERO; plane];
                    for start in (0..geom.in_channels).step_by(TILE) {
                        partial.fill(T::ZERO);
                        for ic in start..(start + TILE).min(geom.in_channels) {
                            for t in 0..taps {
                                tap(&mut partial, ic, t);
                            }
                        }
                        for (a, p) in acc.iter_mut().zip(&partial) {
                            *a = a.add(*p);
                        }
                    }
                    for a in acc.iter_mut() {
                        *a = a.add(bias[oc]);
                    }
                }
                Backend::Permuted => {
                    for ic in (0..geom.in_channels).rev() {
                        for t in (0..taps).rev() {
                            tap(acc, ic, t);
                        }
                    }
                    for a in acc.iter_mut() {
                        *a = a.add(bias[oc]);
                    }
                }
            }
        });
    Ok((out_shape, out))
}

/// Adds `w * input` for one kernel tap into every output position it reaches.
fn accumulate_tap<T: Scalar>(
    geom: &ConvGeometry,
    in_shape: Shape,
    out_shape: Shape,
    src: &[T],
    w: T,
    tap: usize,
    acc: &mut [T],
) {
    let (ky, kx) = (tap / geom.kernel[1], tap % geom.kernel[1]);
    let (s, p) = (geom.stride, geom.padding);
    match geom.kind {
        ConvKind::Conv => {
            // input index = out * s + k - p
            let (ox0, ox1) = valid_range(out_shape.width, in_shape.width, kx, s, p);
            for oy in 0..out_shape.height {
                let iy = oy * s + ky;
                if iy < p || iy - p >= in_shape.height {
                    continue;
                }
                if ox0 >= ox1 {
                    continue;
                }
                let src_row = &src[(iy - p) * in_shape.width..][..in_shape.width];
                let dst_row = &mut acc[oy * out_shape.width..][..out_shape.width];
                let start = ox0 * s + kx - p;
                let dst = &mut dst_row[ox0..ox1];
                if s == 1 {
                    for (d, &x) in dst.iter_mut().zip(&src_row[start..]) {
                        *d = d.mac(w, x);
                    }
                } else {
                    for (d, &x) in dst.iter_mut().zip(src_row[start..].iter().step_by(s)) {
                        *d = d.mac(w, x);
                    }
                }
            }
        }
        ConvKind::Transposed => {
            // output index = in * s + k - p
            let (ix0, ix1) = valid_range(in_shape.width, out_shape.width, kx, s, p);
            for iy in 0..in_shape.height {
                let oy = iy * s + ky;
                if oy < p || oy - p >= out_shape.height {
                    continue;
                }
                if ix0 >= ix1 {
                    continue;
                }
                let src_row = &src[iy * in_shape.width..][..in_shape.width];
                let dst_row = &mut acc[(oy - p) * out_shape.width..][..out_shape.width];
                let dst_taps = dst_row[ix0 * s + kx - p..].iter_mut().step_by(s);
                for (d, &x) in dst_taps.zip(&src_row[ix0..ix1]) {
                    *d = d.mac(w, x);
                }
            }
        }
    }
}

/// Range of `i` in `0..n` for which `i * s + k - p` lands inside `0..limit`.
fn valid_range(n: usize, limit: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // i * s + k - p <= limit - 1  <=>  i <= (limit - 1 + p - k) / s
    let hi = match (limit + p).checked_sub(k + 1) {
        Some(v) => (v / s + 1).min(n),
        None => 0,
    };
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(geom: &ConvGeometry, shape: Shape, x: &[i64], w: &[i64], b: &[i64]) -> Vec<i64> {
        let out = geom.output_shape(shape).unwrap();
        let (kh, kw) = (geom.kernel[0], geom.kernel[1]);
        let mut res = vec![0i64; out.len()];
        for oc in 0..out.channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let mut acc = b[oc];
                    for ic in 0..shape.channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (iy, ix) = match geom.kind {
                                    ConvKind::Conv => {
                                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                        (iy, ix)
                                    }
                                    ConvKind::Transposed => {
                                        let ny = oy as isize + geom.padding as isize - ky as isize;
                                        let nx = ox as isize + geom.padding as isize - kx as isize;
                                        let s = geom.stride as isize;
                                        if ny < 0 || nx < 0 || ny % s != 0 || nx % s != 0 {
                                            continue;
                                        }
                                        (ny / s, nx / s)
                                    }
                                };
                                if iy < 0 || ix < 0 || iy >= shape.height as isize || ix >= shape.width as isize {
                                    continue;
                                }
                                let xv = x[ic * shape.plane() + iy as usize * shape.width + ix as usize];
                                let wv = w[((oc * shape.channels + ic) * kh + ky) * kw + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    res[(oc * out.height + oy) * out.width + ox] = acc;
                }
            }
        }
        res
    }

    fn check(geom: ConvGeometry, shape: Shape) {
        let x: Vec<i32> = (0..shape.len() as i32).map(|i| (i * 7919) % 23 - 11).collect();
        let w: Vec<i32> = (0..geom.weight_len() as i32).map(|i| (i * 104729) % 13 - 6).collect();
        let b: Vec<i32> = (0..geom.out_channels as i32).map(|i| i * 3 - 1).collect();
        let expect = naive(
            &geom,
            shape,
            &x.iter().map(|&v| v as i64).collect::<Vec<_>>(),
            &w.iter().map(|&v| v as i64).collect::<Vec<_>>(),
            &b.iter().map(|&v| v as i64).collect::<Vec<_>>(),
        );
        for backend in Backend::ALL {
            let (_, got) = convolve(&geom, shape, &x, &w, &b, backend).unwrap();
            let got: Vec<i64> = got.iter().map(|&v| v as i64).collect();
            assert_eq!(got, expect, "{backend} {geom:?}");
        }
    }

    #[test]
    fn matches_naive_gather_for_all_geometries() {
        check(ConvGeometry::conv(3, 2, 3, 1, 1), Shape::new(3, 5, 6));
        check(ConvGeometry::conv(5, 4, 3, 2, 1), Shape::new(5, 8, 6));
        check(ConvGeometry::conv(2, 8, 2, 2, 0), Shape::new(2, 6, 4));
        check(ConvGeometry::conv(9, 3, 1, 1, 0), Shape::new(9, 3, 3));
        check(ConvGeometry::transposed(3, 2, 4, 2, 1), Shape::new(3, 4, 5));
        check(ConvGeometry::transposed(8, 2, 2, 2, 0), Shape::new(8, 3, 3));
        check(ConvGeometry::transposed(2, 3, 3, 1, 1), Shape::new(2, 4, 4));
    }

    #[test]
    fn output_shapes() {
        let down = ConvGeometry::conv(1, 1, 3, 2, 1);
        assert_eq!(down.output_shape(Shape::new(1, 16, 8)).unwrap(), Shape::new(1, 8, 4));
        let up = ConvGeometry::transposed(1, 1, 4, 2, 1);
        assert_eq!(up.output_shape(Shape::new(1, 8, 4)).unwrap(), Shape::new(1, 16, 8));
        let haar = ConvGeometry::transposed(4, 1, 2, 2, 0);
        assert_eq!(haar.output_shape(Shape::new(4, 3, 5)).unwrap(), Shape::new(1, 6, 10));
        assert!(down.output_shape(Shape::new(2, 16, 8)).is_err());
    }
}
