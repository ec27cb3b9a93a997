use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Precomputed bilinear taps for `grid_sample_bilinear`.
///
/// Grid coordinates are normalized to `[-1, 1]` with the corner convention:
/// `-1` is the centre of the first pixel and `+1` the centre of the last.
/// Taps falling outside the image get weight zero (zero padding).
#[derive(Debug)]
pub struct SamplePlan<T: Scalar> {
    pub(crate) n: usize,
    pub(crate) in_h: usize,
    pub(crate) in_w: usize,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
    /// Four (input pixel, weight) taps per output pixel, image-major.
    taps: Vec<[(u32, T); 4]>,
}

impl<T: Scalar> SamplePlan<T> {
    /// `grid` is `N × Ho × Wo × 2` holding `(x, y)` pairs.
    pub fn new(grid: &[T], grid_shape: &[usize], in_h: usize, in_w: usize) -> Result<Self> {
        if grid_shape.len() != 4 || grid_shape[3] != 2 || grid.len() != grid_shape.iter().product() {
            return Err(Error::shape(
                "grid_sample_bilinear",
                format!("grid {grid_shape:?} (expected N×Ho×Wo×2)"),
            ));
        }
        let (n, out_h, out_w) = (grid_shape[0], grid_shape[1], grid_shape[2]);
        let half = T::of(0.5);
        let sx = T::from_usize(in_w.saturating_sub(1)).unwrap_or_else(T::zero);
        let sy = T::from_usize(in_h.saturating_sub(1)).unwrap_or_else(T::zero);
        let mut taps = Vec::with_capacity(n * out_h * out_w);
        for p in grid.chunks_exact(2) {
            let x = (p[0] + T::one()) * half * sx;
            let y = (p[1] + T::one()) * half * sy;
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let mut t = [(0u32, T::zero()); 4];
            let corners = [
                (y0, x0, (T::one() - fy) * (T::one() - fx)),
                (y0, x0 + T::one(), (T::one() - fy) * fx),
                (y0 + T::one(), x0, fy * (T::one() - fx)),
                (y0 + T::one(), x0 + T::one(), fy * fx),
            ];
            for (slot, (cy, cx, w)) in t.iter_mut().zip(corners) {
                let inside = cy >= T::zero()
                    && cx >= T::zero()
                    && cy <= sy
                    && cx <= sx
                    && w != T::zero();
                if inside {
                    let iy = cy.to_usize().unwrap_or(0);
                    let ix = cx.to_usize().unwrap_or(0);
                    *slot = ((iy * in_w + ix) as u32, w);
                }
            }
            taps.push(t);
        }
        Ok(SamplePlan {
            n,
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        })
    }

    /// Gathers `image` (`N × C × H × W`) into `N × C × Ho × Wo`.
    pub(crate) fn gather(&self, image: &[T], c: usize) -> Vec<T> {
        let (ihw, ohw) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![T::zero(); self.n * c * ohw];
        for ni in 0..self.n {
            let taps = &self.taps[ni * ohw..(ni + 1) * ohw];
            for ci in 0..c {
                let src = &image[(ni * c + ci) * ihw..(ni * c + ci + 1) * ihw];
                let dst = &mut out[(ni * c + ci) * ohw..(ni * c + ci + 1) * ohw];
                for (d, t) in dst.iter_mut().zip(taps) {
                    let mut acc = T::zero();
                    for &(i, w) in t {
                        acc += w * src[i as usize];
                    }
                    *d = acc;
                }
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather).
    pub(crate) fn scatter(&self, grad: &[T], c: usize) -> Vec<T> {
        let (ihw, ohw) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![T::zero(); self.n * c * ihw];
        for ni in 0..self.n {
            let taps = &self.taps[ni * ohw..(ni + 1) * ohw];
            for ci in 0..c {
                let src = &grad[(ni * c + ci) * ohw..(ni * c + ci + 1) * ohw];
                let dst = &mut out[(ni * c + ci) * ihw..(ni * c + ci + 1) * ihw];
                for (g, t) in src.iter().zip(taps) {
                    for &(i, w) in t {
                        dst[i as usize] += w * *g;
                    }
                }
            }
        }
        out
    }
}
