//! Slice-level numeric kernels. Shapes are validated by the callers in `ops`.

use crate::scalar::Scalar;

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn can_broadcast(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len()
        && from
            .iter()
            .rev()
            .zip(to.iter().rev())
            .all(|(&f, &t)| f == t || f == 1)
}

/// For each flat index of `to`, the flat index of `from` it reads under
/// broadcasting. Calls `f(out_index, in_index)` in increasing `out_index`.
pub(crate) fn for_each_broadcast(from: &[usize], to: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = to.len();
    let off = r - from.len();
    let fs = strides(from);
    let mut in_strides = vec![0usize; r];
    for i in 0..from.len() {
        if from[i] != 1 {
            in_strides[off + i] = fs[i];
        }
    }
    let total: usize = to.iter().product();
    if total == 0 {
        return;
    }
    // Innermost dimension handled as a run for speed.
    let inner = if r == 0 { 1 } else { to[r - 1] };
    let inner_stride = if r == 0 { 0 } else { in_strides[r - 1] };
    let mut idx = vec![0usize; r.saturating_sub(1)];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for j in 0..inner {
            f(out, base + j * inner_stride);
            out += 1;
        }
        if out >= total {
            break;
        }
        // advance the outer multi-index
        let mut d = r - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            base += in_strides[d];
            if idx[d] < to[d] {
                break;
            }
            base -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to<T: Scalar>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); to.iter().product()];
    for_each_broadcast(from, to, |o, i| out[o] = x[i]);
    out
}

pub(crate) fn sum_to<T: Scalar>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); to.iter().product()];
    for_each_broadcast(to, from, |i, o| out[o] += x[i]);
    out
}

/// `C (m×n) = op(A) · op(B)` where `A` is stored `m×k` (or `k×m` if `ta`).
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        T::zero(),
        &mut c,
        n as isize,
        1,
    );
    c
}

/// Geometry of a stride-1 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn ow(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let p = g.pad as isize;
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - p;
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let p = g.pad as isize;
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// y[n] = W · im2col(x[n])
pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw_out, ckk) = (g.oh() * g.ow(), g.ckk());
    let mut y = vec![T::zero(); g.n * g.o * hw_out];
    let mut cols = vec![T::zero(); ckk * hw_out];
    let chw = g.c * g.h * g.w;
    for ni in 0..g.n {
        im2col(&x[ni * chw..(ni + 1) * chw], g, &mut cols);
        let out = &mut y[ni * g.o * hw_out..(ni + 1) * g.o * hw_out];
        T::gemm(
            g.o,
            ckk,
            hw_out,
            T::one(),
            w,
            ckk as isize,
            1,
            &cols,
            hw_out as isize,
            1,
            T::zero(),
            out,
            hw_out as isize,
            1,
        );
    }
    y
}

/// Adjoint of [`conv2d`] in its input: x[n] = col2im(Wᵀ · gy[n]).
pub(crate) fn conv2d_input_grad<T: Scalar>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw_out, ckk) = (g.oh() * g.ow(), g.ckk());
    let chw = g.c * g.h * g.w;
    let mut x = vec![T::zero(); g.n * chw];
    let mut cols = vec![T::zero(); ckk * hw_out];
    for ni in 0..g.n {
        let gy_n = &gy[ni * g.o * hw_out..(ni + 1) * g.o * hw_out];
        T::gemm(
            ckk,
            g.o,
            hw_out,
            T::one(),
            w,
            1,
            ckk as isize,
            gy_n,
            hw_out as isize,
            1,
            T::zero(),
            &mut cols,
            hw_out as isize,
            1,
        );
        col2im_add(&cols, g, &mut x[ni * chw..(ni + 1) * chw]);
    }
    x
}

/// Adjoint of [`conv2d`] in its weight: gW = Σ_n gy[n] · im2col(x[n])ᵀ.
pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw_out, ckk) = (g.oh() * g.ow(), g.ckk());
    let chw = g.c * g.h * g.w;
    let mut gw = vec![T::zero(); g.o * ckk];
    let mut cols = vec![T::zero(); ckk * hw_out];
    for ni in 0..g.n {
        im2col(&x[ni * chw..(ni + 1) * chw], g, &mut cols);
        let gy_n = &gy[ni * g.o * hw_out..(ni + 1) * g.o * hw_out];
        T::gemm(
            g.o,
            hw_out,
            ckk,
            T::one(),
            gy_n,
            hw_out as isize,
            1,
            &cols,
            1,
            hw_out as isize,
            T::one(),
            &mut gw,
            ckk as isize,
            1,
        );
    }
    gw
}

/// Zero padding of the last two axes; negative amounts crop.
pub(crate) fn pad2d<T: Scalar>(
    x: &[T],
    lead: usize,
    h: usize,
    w: usize,
    pads: [isize; 4],
) -> (usize, usize, Vec<T>) {
    let [top, bottom, left, right] = pads;
    let oh = (h as isize + top + bottom) as usize;
    let ow = (w as isize + left + right) as usize;
    let mut out = vec![T::zero(); lead * oh * ow];
    for l in 0..lead {
        let src = &x[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * oh * ow..(l + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy as isize - top;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = ox as isize - left;
                if ix >= 0 && ix < w as isize {
                    dst[oy * ow + ox] = src[iy as usize * w + ix as usize];
                }
            }
        }
    }
    (oh, ow, out)
}

pub(crate) fn sum_pool<T: Scalar>(x: &[T], lead: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![T::zero(); lead * oh * ow];
    for l in 0..lead {
        let src = &x[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * oh * ow..(l + 1) * oh * ow];
        for iy in 0..h {
            let row = &src[iy * w..(iy + 1) * w];
            let drow = &mut dst[(iy / k) * ow..(iy / k + 1) * ow];
            for (ix, v) in row.iter().enumerate() {
                drow[ix / k] += *v;
            }
        }
    }
    out
}

pub(crate) fn upsample<T: Scalar>(x: &[T], lead: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![T::zero(); lead * oh * ow];
    for l in 0..lead {
        let src = &x[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * oh * ow..(l + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / k) * w..(oy / k + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = srow[ox / k];
            }
        }
    }
    out
}


fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let inv = T::one() / T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() * inv;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
    (mean, var)
}

/// Normalizes each contiguous row of `cols` values to zero mean, unit variance.
pub(crate) fn group_norm<T: Scalar>(x: &[T], cols: usize, eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let (mean, var) = row_moments(row);
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
    }
    out
}

/// Input gradient of [`group_norm`] given the input, its output and the
/// output cotangent.
pub(crate) fn group_norm_grad<T: Scalar>(x: &[T], y: &[T], gy: &[T], cols: usize, eps: T) -> Vec<T> {
    let inv = T::one() / T::of(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    for (((row, yr), gr), o) in x
        .chunks_exact(cols)
        .zip(y.chunks_exact(cols))
        .zip(gy.chunks_exact(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let (_, var) = row_moments(row);
        let rstd = T::one() / (var + eps).sqrt();
        let gm = gr.iter().copied().sum::<T>() * inv;
        let gym = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() * inv;
        for ((o, &g), &v) in o.iter_mut().zip(gr).zip(yr) {
            *o = (g - gm - v * gym) * rstd;
        }
    }
    out
}
