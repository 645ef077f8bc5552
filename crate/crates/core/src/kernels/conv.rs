//! Direct 2-D convolution kernels (cross-correlation, zero padding).
//!
//! Work is split over independent output planes, so results do not depend on
//! the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        (n, cin, h, w): (usize, usize, usize, usize),
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::invalid(op, format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let out = |len: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::invalid(
                    op,
                    format!("non-integral output size: ({len} + 2*{pad} - {k}) / {stride} + 1"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: out(h)?,
            ow: out(w)?,
        })
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Input row for output row `o` and tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Output columns `[lo, hi)` whose tap `t` lands inside a row of width `w`.
    #[inline]
    fn col_range(&self, t: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let p = self.pad as isize;
        let t = t as isize;
        // ox*s + t - p >= 0  and  ox*s + t - p <= w - 1
        let lo = if p - t <= 0 { 0 } else { ((p - t) + s - 1) / s };
        let hi_num = self.w as isize - 1 + p - t;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(self.ow as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }
}

/// `out[oy, ox] += wv * inp[iy, ox*s + kx - p]` for one kernel tap.
#[inline]
fn tap_forward<T: Real>(g: &ConvGeom, inp: &[T], out: &mut [T], wv: T, ky: usize, kx: usize) {
    let (lo, hi) = g.col_range(kx);
    if lo >= hi {
        return;
    }
    for oy in 0..g.oh {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        let orow = &mut out[oy * g.ow + lo..oy * g.ow + hi];
        let start = lo * g.stride + kx - g.pad;
        let irow = &inp[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            for (o, &i) in orow.iter_mut().zip(&irow[start..start + (hi - lo)]) {
                *o = *o + wv * i;
            }
        } else {
            for (j, o) in orow.iter_mut().enumerate() {
                *o = *o + wv * irow[start + j * g.stride];
            }
        }
    }
}

/// `dinp[iy, ox*s + kx - p] += wv * dout[oy, ox]` for one kernel tap.
#[inline]
fn tap_backward_input<T: Real>(g: &ConvGeom, dout: &[T], dinp: &mut [T], wv: T, ky: usize, kx: usize) {
    let (lo, hi) = g.col_range(kx);
    if lo >= hi {
        return;
    }
    for oy in 0..g.oh {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        let orow = &dout[oy * g.ow + lo..oy * g.ow + hi];
        let start = lo * g.stride + kx - g.pad;
        let irow = &mut dinp[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            for (i, &o) in irow[start..start + (hi - lo)].iter_mut().zip(orow) {
                *i = *i + wv * o;
            }
        } else {
            for (j, &o) in orow.iter().enumerate() {
                let i = &mut irow[start + j * g.stride];
                *i = *i + wv * o;
            }
        }
    }
}

/// `Σ dout[oy, ox] * inp[iy, ox*s + kx - p]` for one kernel tap.
#[inline]
fn tap_weight_grad<T: Real>(g: &ConvGeom, inp: &[T], dout: &[T], ky: usize, kx: usize) -> T {
    let (lo, hi) = g.col_range(kx);
    let mut acc = T::zero();
    if lo >= hi {
        return acc;
    }
    for oy in 0..g.oh {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        let orow = &dout[oy * g.ow + lo..oy * g.ow + hi];
        let start = lo * g.stride + kx - g.pad;
        let irow = &inp[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            acc = acc
                + orow
                    .iter()
                    .zip(&irow[start..start + (hi - lo)])
                    .map(|(&o, &i)| o * i)
                    .sum::<T>();
        } else {
            for (j, &o) in orow.iter().enumerate() {
                acc = acc + o * irow[start + j * g.stride];
            }
        }
    }
    acc
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let k2 = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.cout * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .enumerate()
        .for_each(|(plane, o)| {
            let (n, co) = (plane / g.cout, plane % g.cout);
            o.fill(b[co]);
            for ci in 0..g.cin {
                let inp = &x[(n * g.cin + ci) * g.in_plane()..][..g.in_plane()];
                let wk = &w[(co * g.cin + ci) * k2..][..k2];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv != T::zero() {
                            tap_forward(g, inp, o, wv, ky, kx);
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k2 = g.k * g.k;
    let mut dx = vec![T::zero(); g.n * g.cin * g.in_plane()];
    dx.par_chunks_mut(g.in_plane())
        .enumerate()
        .for_each(|(plane, di)| {
            let (n, ci) = (plane / g.cin, plane % g.cin);
            for co in 0..g.cout {
                let d = &dy[(n * g.cout + co) * g.out_plane()..][..g.out_plane()];
                let wk = &w[(co * g.cin + ci) * k2..][..k2];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        tap_backward_input(g, d, di, wk[ky * g.k + kx], ky, kx);
                    }
                }
            }
        });

    let mut dw = vec![T::zero(); g.cout * g.cin * k2];
    dw.par_chunks_mut(g.cin * k2)
        .enumerate()
        .for_each(|(co, dwc)| {
            for n in 0..g.n {
                let d = &dy[(n * g.cout + co) * g.out_plane()..][..g.out_plane()];
                for ci in 0..g.cin {
                    let inp = &x[(n * g.cin + ci) * g.in_plane()..][..g.in_plane()];
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let slot = &mut dwc[ci * k2 + ky * g.k + kx];
                            *slot = *slot + tap_weight_grad(g, inp, d, ky, kx);
                        }
                    }
                }
            }
        });

    let db = (0..g.cout)
        .map(|co| {
            (0..g.n)
                .map(|n| dy[(n * g.cout + co) * g.out_plane()..][..g.out_plane()].iter().copied().sum::<T>())
                .sum()
        })
        .collect();
    (dx, dw, db)
}

/// Depthwise variant: `cin == cout == C`, weights `[C, 1, k, k]`.
pub fn depthwise_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let k2 = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.cout * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .enumerate()
        .for_each(|(plane, o)| {
            let c = plane % g.cout;
            o.fill(b[c]);
            let inp = &x[plane * g.in_plane()..][..g.in_plane()];
            let wk = &w[c * k2..][..k2];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    tap_forward(g, inp, o, wk[ky * g.k + kx], ky, kx);
                }
            }
        });
    out
}

pub fn depthwise_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k2 = g.k * g.k;
    let mut dx = vec![T::zero(); g.n * g.cin * g.in_plane()];
    dx.par_chunks_mut(g.in_plane())
        .enumerate()
        .for_each(|(plane, di)| {
            let c = plane % g.cin;
            let d = &dy[plane * g.out_plane()..][..g.out_plane()];
            let wk = &w[c * k2..][..k2];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    tap_backward_input(g, d, di, wk[ky * g.k + kx], ky, kx);
                }
            }
        });

    let mut dw = vec![T::zero(); g.cout * k2];
    dw.par_chunks_mut(k2).enumerate().for_each(|(c, dwc)| {
        for n in 0..g.n {
            let plane = n * g.cout + c;
            let d = &dy[plane * g.out_plane()..][..g.out_plane()];
            let inp = &x[plane * g.in_plane()..][..g.in_plane()];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let slot = &mut dwc[ky * g.k + kx];
                    *slot = *slot + tap_weight_grad(g, inp, d, ky, kx);
                }
            }
        }
    });

    let db = (0..g.cout)
        .map(|c| {
            (0..g.n)
                .map(|n| dy[(n * g.cout + c) * g.out_plane()..][..g.out_plane()].iter().copied().sum::<T>())
                .sum()
        })
        .collect();
    (dx, dw, db)
}
