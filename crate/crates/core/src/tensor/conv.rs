//! 2-D cross-correlation lowered to GEMM through an explicit patch gather.

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis, `None` if it would be empty.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
}

/// Gather `k x k` patches of one `[C, H, W]` image into a
/// `[C*k*k, OH*OW]` column matrix. Taps outside the image read zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, col: &mut [T]) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let g = Geometry {
        batch: 1,
        c_in: c,
        h,
        w,
        c_out: 0,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    im2col_strided(x, &g, col, oh * ow);
}

/// Output columns `lo..hi` whose tap `kx` lands inside a row of width `w`.
fn valid_span(w: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// As [`im2col`], writing each column-matrix row at a stride of `ld`
/// elements so several samples can share one wide matrix.
fn im2col_strided<T: Element>(x: &[T], g: &Geometry, col: &mut [T], ld: usize) {
    let (h, w, k, stride, pad, oh, ow) = (g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow);
    let p = oh * ow;
    for ci in 0..g.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * ld..][..p];
                let (lo, hi) = valid_span(w, ow, kx, stride, pad);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * stride + kx - pad;
                    let span = &mut dst[lo..hi];
                    if stride == 1 {
                        span.copy_from_slice(&src[first..first + span.len()]);
                    } else {
                        let src = &src[first..first + (span.len() - 1) * stride + 1];
                        for (i, d) in span.iter_mut().enumerate() {
                            *d = src[i * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix (rows `ld` apart) back onto a `[C, H, W]` image.
fn col2im<T: Element>(col: &[T], g: &Geometry, ld: usize, x: &mut [T]) {
    let (h, w, k, stride, pad, oh, ow) = (g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow);
    let p = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * ld..][..p];
                let (lo, hi) = valid_span(w, ow, kx, stride, pad);
                if lo == hi {
                    continue;
                }
                let first = lo * stride + kx - pad;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    if stride == 1 {
                        for (d, &v) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        let dst = &mut dst[first..first + (src.len() - 1) * stride + 1];
                        for (i, &v) in src.iter().enumerate() {
                            dst[i * stride] = dst[i * stride] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Column-matrix elements per chunk; keeps one chunk's gather, GEMM and
/// scatter resident in cache.
const CHUNK_ELEMS: usize = 1 << 15;

/// Samples per chunk for geometry `g`.
fn chunk_len(g: &Geometry) -> usize {
    (CHUNK_ELEMS / (g.col_rows() * g.col_cols()).max(1)).clamp(1, g.batch.max(1))
}

/// Column matrix `[C*k*k, nb*OH*OW]` for samples `start..start+nb`,
/// sample-major along the columns.
fn chunk_columns<T: Element>(xd: &[T], g: &Geometry, start: usize, nb: usize, col: &mut [T]) {
    let p = g.col_cols();
    let ld = nb * p;
    for i in 0..nb {
        let n = start + i;
        let xn = &xd[n * g.in_len()..(n + 1) * g.in_len()];
        im2col_strided(xn, g, &mut col[i * p..], ld);
    }
}

fn geometry(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize, pad: usize) -> Result<(Geometry, bool)> {
    let (batch, dims, batched) = match x {
        [n, c, h, w] => (*n, [*c, *h, *w], true),
        [c, h, w] => (1, [*c, *h, *w], false),
        _ => return Err(Error::shape("conv2d", format!("input must be 3-D or 4-D, got {x:?}"))),
    };
    let &[c_out, c_in, kh, kw] = w else {
        return Err(Error::shape("conv2d", format!("weight must be 4-D, got {w:?}")));
    };
    if c_in != dims[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square and odd, got {kh}x{kw}"),
        ));
    }
    if let Some(b) = bias {
        if b != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![c_out],
                rhs: b.to_vec(),
            });
        }
    }
    let oh = conv_output_size(dims[1], kh, stride, pad);
    let ow = conv_output_size(dims[2], kh, stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("non-positive output size for input {x:?}, kernel {kh}, stride {stride}, pad {pad}"),
        ));
    };
    Ok((
        Geometry {
            batch,
            c_in,
            h: dims[1],
            w: dims[2],
            c_out,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        },
        batched,
    ))
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of `x` (`[N, C, H, W]` or `[C, H, W]`) with
    /// `w` (`[C_out, C, k, k]`), plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (g, batched) = geometry(self.shape(x), self.shape(w), bias.map(|b| self.shape(b)), stride, pad)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bd = bias.map(|b| self.value(b).data());

        let (kr, p) = (g.col_rows(), g.col_cols());
        let chunk = chunk_len(&g);
        let mut col = vec![T::zero(); kr * chunk * p];
        let mut wide = vec![T::zero(); g.c_out * chunk * p];
        let mut out = vec![T::zero(); g.batch * g.out_len()];
        // Column matrices are kept for the weight gradient when one will be
        // needed, instead of being gathered a second time.
        let keep = self.requires_grad(w);
        let mut kept: Vec<Vec<T>> = Vec::new();
        for start in (0..g.batch).step_by(chunk) {
            // [C_out, k] x [k, nb*P], then reorder [C_out, nb, P] to [nb, C_out, P].
            let nb = chunk.min(g.batch - start);
            let ld = nb * p;
            chunk_columns(xd, &g, start, nb, &mut col);
            T::gemm(
                g.c_out,
                kr,
                ld,
                wd,
                false,
                &col[..kr * ld],
                false,
                T::zero(),
                &mut wide[..g.c_out * ld],
            );
            if keep {
                kept.push(col[..kr * ld].to_vec());
            }
            for i in 0..nb {
                let on = &mut out[(start + i) * g.out_len()..][..g.out_len()];
                for co in 0..g.c_out {
                    let dst = &mut on[co * p..(co + 1) * p];
                    dst.copy_from_slice(&wide[co * ld + i * p..][..p]);
                    if let Some(bd) = bd {
                        dst.iter_mut().for_each(|v| *v = *v + bd[co]);
                    }
                }
            }
        }
        let shape = if batched {
            vec![g.batch, g.c_out, g.oh, g.ow]
        } else {
            vec![g.c_out, g.oh, g.ow]
        };
        let value = Tensor::new(shape, out)?;

        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push("conv2d", value, &parents, move |ctx| {
            let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gx = ctx.needs[0].then(|| vec![T::zero(); xd.len()]);
            let mut gw = ctx.needs[1].then(|| vec![T::zero(); wd.len()]);
            let mut gb = (ctx.needs.len() > 2 && ctx.needs[2]).then(|| vec![T::zero(); g.c_out]);
            let chunk = chunk_len(&g);
            let mut go = vec![T::zero(); g.c_out * chunk * p];
            let mut col = vec![T::zero(); kr * chunk * p];
            for (ci, start) in (0..g.batch).step_by(chunk).enumerate() {
                let nb = chunk.min(g.batch - start);
                let ld = nb * p;
                for i in 0..nb {
                    let gn = &ctx.grad[(start + i) * g.out_len()..][..g.out_len()];
                    for co in 0..g.c_out {
                        go[co * ld + i * p..][..p].copy_from_slice(&gn[co * p..(co + 1) * p]);
                    }
                }
                let go = &go[..g.c_out * ld];
                if let Some(gb) = gb.as_mut() {
                    for (b, row) in gb.iter_mut().zip(go.chunks(ld)) {
                        *b = *b + row.iter().copied().sum();
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let cols = match kept.get(ci) {
                        Some(c) => c.as_slice(),
                        None => {
                            chunk_columns(xd, &g, start, nb, &mut col);
                            &col[..kr * ld]
                        }
                    };
                    T::gemm(g.c_out, ld, kr, go, false, cols, true, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dcol = &mut col[..kr * ld];
                    T::gemm(kr, g.c_out, ld, wd, true, go, false, T::zero(), dcol);
                    for i in 0..nb {
                        let n = start + i;
                        col2im(&dcol[i * p..], &g, ld, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() > 2 {
                grads.push(gb);
            }
            grads
        })
    }
}

/// Direct six-loop cross-correlation. Slow; kept as the reference the GEMM
/// path is tested against.
pub fn conv2d_naive<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, batched) = geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, pad)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = xd[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = wd[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((n * g.c_out + co) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    let shape = if batched {
        vec![g.batch, g.c_out, g.oh, g.ow]
    } else {
        vec![g.c_out, g.oh, g.ow]
    };
    Tensor::new(shape, out)
}
