//! Bilinear resampling with half-pixel centers and edge clamping.

use rayon::prelude::*;

use crate::tensor::Real;

/// Interpolation taps for one output coordinate: two source indices and
/// their weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

pub(crate) fn taps<T: Real>(src_len: usize, dst_len: usize) -> Vec<Tap<T>> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let frac = s - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::of(1.0 - frac),
                w1: T::of(frac),
            }
        })
        .collect()
}

pub fn resize_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(p, o)| {
            let inp = &x[p * h * w..][..h * w];
            for (oy, t) in ty.iter().enumerate() {
                let r0 = &inp[t.i0 * w..][..w];
                let r1 = &inp[t.i1 * w..][..w];
                for (ox, u) in tx.iter().enumerate() {
                    let top = u.w0 * r0[u.i0] + u.w1 * r0[u.i1];
                    let bot = u.w0 * r1[u.i0] + u.w1 * r1[u.i1];
                    o[oy * ow + ox] = t.w0 * top + t.w1 * bot;
                }
            }
        });
    out
}

/// Transpose of [`resize_forward`].
pub fn resize_backward<T: Real>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    dx.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, d)| {
            let g = &dy[p * oh * ow..][..oh * ow];
            for (oy, t) in ty.iter().enumerate() {
                for (ox, u) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    let top = t.w0 * v;
                    let bot = t.w1 * v;
                    d[t.i0 * w + u.i0] = d[t.i0 * w + u.i0] + u.w0 * top;
                    d[t.i0 * w + u.i1] = d[t.i0 * w + u.i1] + u.w1 * top;
                    d[t.i1 * w + u.i0] = d[t.i1 * w + u.i0] + u.w0 * bot;
                    d[t.i1 * w + u.i1] = d[t.i1 * w + u.i1] + u.w1 * bot;
                }
            }
        });
    dx
}
