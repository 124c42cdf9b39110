//! Slice-level compute kernels. Every kernel works on one sample so the
//! graph can fan samples out over threads and reduce in a fixed order.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// Output extent of a convolution over `input` pixels.
    pub fn conv_out(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output extent of a transposed convolution over `input` pixels.
    pub fn transposed_out(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.k - 2 * self.pad
    }
}

/// Unfolds a `C x H x W` plane stack into `(C*k*k) x (oh*ow)` columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = win.k;
    let spatial = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `C x H x W`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = win.k;
    let spatial = oh * ow;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry shared by the convolution kernels of one layer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.win.k == 1 && self.win.stride == 1 && self.win.pad == 0
    }

    fn patch(&self) -> usize {
        self.in_c * self.win.k * self.win.k
    }
}

/// One sample of `conv2d`. `weight` is `F x C x k x k`; `out` is `F x oh x ow`.
pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let spatial = g.oh * g.ow;
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        let mut buf = vec![T::zero(); g.patch() * spatial];
        im2col(x, g.in_c, g.h, g.w, g.win, g.oh, g.ow, &mut buf);
        owned = buf;
        &owned
    };
    match bias {
        Some(b) => {
            for (f, row) in out.chunks_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v = b[f]);
            }
        }
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
    let patch = g.patch();
    T::gemm(
        g.out_c,
        patch,
        spatial,
        weight,
        (patch as isize, 1),
        cols,
        (spatial as isize, 1),
        T::one(),
        out,
        (spatial as isize, 1),
    );
}

/// Backward of one `conv2d` sample. Accumulates into `dweight`/`dbias`
/// and overwrites `dx`.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) {
    let spatial = g.oh * g.ow;
    let patch = g.patch();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        let mut buf = vec![T::zero(); patch * spatial];
        im2col(x, g.in_c, g.h, g.w, g.win, g.oh, g.ow, &mut buf);
        owned = buf;
        &owned
    };
    // dW[F, patch] += dout[F, S] * cols^T[S, patch]
    T::gemm(
        g.out_c,
        spatial,
        patch,
        dout,
        (spatial as isize, 1),
        cols,
        (1, spatial as isize),
        T::one(),
        dweight,
        (patch as isize, 1),
    );
    if let Some(db) = dbias {
        for (f, row) in dout.chunks(spatial).enumerate() {
            db[f] = db[f] + row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        // dcols[patch, S] = W^T[patch, F] * dout[F, S]
        if g.is_pointwise() {
            T::gemm(
                patch,
                g.out_c,
                spatial,
                weight,
                (1, patch as isize),
                dout,
                (spatial as isize, 1),
                T::zero(),
                dx,
                (spatial as isize, 1),
            );
        } else {
            let mut dcols = vec![T::zero(); patch * spatial];
            T::gemm(
                patch,
                g.out_c,
                spatial,
                weight,
                (1, patch as isize),
                dout,
                (spatial as isize, 1),
                T::zero(),
                &mut dcols,
                (spatial as isize, 1),
            );
            dx.iter_mut().for_each(|v| *v = T::zero());
            col2im(&dcols, g.in_c, g.h, g.w, g.win, g.oh, g.ow, dx);
        }
    }
}

/// One sample of the transposed convolution.
///
/// Here `in_c`/`h`/`w` describe the small input, `out_c`/`oh`/`ow` the
/// upsampled output; `weight` is `in_c x out_c x k x k`.
pub(crate) fn conv_transpose_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let spatial = g.h * g.w;
    let patch = g.out_c * g.win.k * g.win.k;
    let mut cols = vec![T::zero(); patch * spatial];
    // cols[patch, S] = W^T[patch, in_c] * x[in_c, S]
    T::gemm(
        patch,
        g.in_c,
        spatial,
        weight,
        (1, patch as isize),
        x,
        (spatial as isize, 1),
        T::zero(),
        &mut cols,
        (spatial as isize, 1),
    );
    let out_plane = g.oh * g.ow;
    match bias {
        Some(b) => {
            for (f, row) in out.chunks_mut(out_plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b[f]);
            }
        }
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
    col2im(&cols, g.out_c, g.oh, g.ow, g.win, g.h, g.w, out);
}

pub(crate) fn conv_transpose_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) {
    let spatial = g.h * g.w;
    let patch = g.out_c * g.win.k * g.win.k;
    let mut dcols = vec![T::zero(); patch * spatial];
    im2col(dout, g.out_c, g.oh, g.ow, g.win, g.h, g.w, &mut dcols);
    // dW[in_c, patch] += x[in_c, S] * dcols^T[S, patch]
    T::gemm(
        g.in_c,
        spatial,
        patch,
        x,
        (spatial as isize, 1),
        &dcols,
        (1, spatial as isize),
        T::one(),
        dweight,
        (patch as isize, 1),
    );
    if let Some(db) = dbias {
        let out_plane = g.oh * g.ow;
        for (f, row) in dout.chunks(out_plane).enumerate() {
            db[f] = db[f] + row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        // dx[in_c, S] = W[in_c, patch] * dcols[patch, S]
        T::gemm(
            g.in_c,
            patch,
            spatial,
            weight,
            (patch as isize, 1),
            &dcols,
            (spatial as isize, 1),
            T::zero(),
            dx,
            (spatial as isize, 1),
        );
    }
}

/// Max-pools one plane; `argmax` receives the flat in-plane index of the
/// winner. Ties keep the first element in row-major window order.
pub(crate) fn maxpool_plane<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = oy * stride * w + ox * stride;
            let mut best_v = x[best];
            for ki in 0..k {
                for kj in 0..k {
                    let idx = (oy * stride + ki) * w + ox * stride + kj;
                    // NaN never wins, so a NaN window keeps its first element.
                    if x[idx] > best_v {
                        best_v = x[idx];
                        best = idx;
                    }
                }
            }
            out[oy * ow + ox] = best_v;
            argmax[oy * ow + ox] = best;
        }
    }
}
