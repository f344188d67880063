//! Reference-oriented deformable convolution.
//!
//! Offsets are predicted by a plain 3x3 convolution over the reference
//! feature map and then drive the sampling grid of two separate kernels, one
//! over the reference map and one over the distorted map. With all offsets at
//! zero both kernels reduce to ordinary stride-1 "same" convolutions.
//!
//! Offset layout: channel `2t` holds the row shift and `2t + 1` the column
//! shift of kernel tap `t` (taps in row-major order), in feature-map pixels.

use super::bilinear::Corners;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.k * self.k
    }
    fn plane(&self) -> usize {
        self.h * self.w
    }
    fn in_len(&self) -> usize {
        self.c_in * self.plane()
    }
    fn out_len(&self) -> usize {
        self.c_out * self.plane()
    }
    fn off_len(&self) -> usize {
        2 * self.taps() * self.plane()
    }
    fn col_rows(&self) -> usize {
        self.c_in * self.taps()
    }
}

/// Sampling corners for every (tap, output pixel) of one sample.
fn sample_grid<T: Element>(g: &Geometry, offsets: &[T]) -> Vec<Corners<T>> {
    let r = (g.k / 2) as isize;
    let p = g.plane();
    let mut grid = Vec::with_capacity(g.taps() * p);
    for t in 0..g.taps() {
        let (ky, kx) = ((t / g.k) as isize - r, (t % g.k) as isize - r);
        let dy = &offsets[2 * t * p..(2 * t + 1) * p];
        let dx = &offsets[(2 * t + 1) * p..(2 * t + 2) * p];
        for oy in 0..g.h {
            for ox in 0..g.w {
                let i = oy * g.w + ox;
                let y = T::from_f64((oy as isize + ky) as f64) + dy[i];
                let x = T::from_f64((ox as isize + kx) as f64) + dx[i];
                grid.push(Corners::new(g.h, g.w, y, x));
            }
        }
    }
    grid
}

/// Deformable column matrix `[C*k*k, H*W]` for one sample.
fn gather<T: Element>(g: &Geometry, x: &[T], grid: &[Corners<T>], col: &mut [T]) {
    let p = g.plane();
    for c in 0..g.c_in {
        let plane = &x[c * p..(c + 1) * p];
        for t in 0..g.taps() {
            let row = &mut col[(c * g.taps() + t) * p..][..p];
            for (v, corners) in row.iter_mut().zip(&grid[t * p..(t + 1) * p]) {
                *v = corners.sample(plane);
            }
        }
    }
}

fn geometry(x: &[usize], off: &[usize], w: &[usize]) -> Result<(Geometry, bool)> {
    let (batch, c_in, h, wd, batched) = match x {
        [n, c, h, w] => (*n, *c, *h, *w, true),
        [c, h, w] => (1, *c, *h, *w, false),
        _ => {
            return Err(Error::shape(
                "deform_conv",
                format!("input must be 3-D or 4-D, got {x:?}"),
            ))
        }
    };
    let &[c_out, wc, kh, kw] = w else {
        return Err(Error::shape("deform_conv", format!("weight must be 4-D, got {w:?}")));
    };
    if wc != c_in || kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch {
            op: "deform_conv",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let want: Vec<usize> = if batched {
        vec![batch, 2 * kh * kh, h, wd]
    } else {
        vec![2 * kh * kh, h, wd]
    };
    if off != want.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "deform_conv offsets",
            lhs: want,
            rhs: off.to_vec(),
        });
    }
    Ok((
        Geometry {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
        },
        batched,
    ))
}

impl<T: Element> Tape<T> {
    /// Deformable convolution of `x` (`[N, C, H, W]` or `[C, H, W]`) with
    /// `w` (`[C_out, C, k, k]`), stride 1, output the same size as the input.
    /// Each tap samples at its regular grid position plus the per-pixel
    /// shift stored in `offsets` (`[N, 2k², H, W]`).
    pub fn deform_conv(&mut self, x: Var, offsets: Var, w: Var) -> Result<Var> {
        let (g, batched) = geometry(self.shape(x), self.shape(offsets), self.shape(w))?;
        let (xd, od, wd) = (self.value(x).data(), self.value(offsets).data(), self.value(w).data());
        let (kr, p) = (g.col_rows(), g.plane());
        let mut col = vec![T::zero(); kr * p];
        let mut out = vec![T::zero(); g.batch * g.out_len()];
        let mut cells = Vec::new();
        for n in 0..g.batch {
            let grid = sample_grid(&g, &od[n * g.off_len()..(n + 1) * g.off_len()]);
            if self.tracks_kinks() {
                cells.extend(grid.iter().flat_map(|c| [c.cell.0, c.cell.1]));
            }
            gather(&g, &xd[n * g.in_len()..(n + 1) * g.in_len()], &grid, &mut col);
            let on = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
            T::gemm(g.c_out, kr, p, wd, false, &col, false, T::zero(), on);
        }
        self.note_kinks(cells);
        let shape = if batched {
            vec![g.batch, g.c_out, g.h, g.w]
        } else {
            vec![g.c_out, g.h, g.w]
        };
        let value = Tensor::new(shape, out)?;

        self.push("deform_conv", value, &[x, offsets, w], move |ctx| {
            let (xd, od, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let mut gx = ctx.needs[0].then(|| vec![T::zero(); xd.len()]);
            let mut go_ff = ctx.needs[1].then(|| vec![T::zero(); od.len()]);
            let mut gw = ctx.needs[2].then(|| vec![T::zero(); wd.len()]);
            let mut col = vec![T::zero(); kr * p];
            let mut dcol = vec![T::zero(); kr * p];
            for n in 0..g.batch {
                let grid = sample_grid(&g, &od[n * g.off_len()..(n + 1) * g.off_len()]);
                let xn = &xd[n * g.in_len()..(n + 1) * g.in_len()];
                let go = &ctx.grad[n * g.out_len()..(n + 1) * g.out_len()];
                if let Some(gw) = gw.as_mut() {
                    gather(&g, xn, &grid, &mut col);
                    T::gemm(g.c_out, p, kr, go, false, &col, true, T::one(), gw);
                }
                if gx.is_none() && go_ff.is_none() {
                    continue;
                }
                T::gemm(kr, g.c_out, p, wd, true, go, false, T::zero(), &mut dcol);
                for c in 0..g.c_in {
                    let plane = &xn[c * p..(c + 1) * p];
                    for t in 0..g.taps() {
                        let drow = &dcol[(c * g.taps() + t) * p..][..p];
                        let corners = &grid[t * p..(t + 1) * p];
                        if let Some(gx) = gx.as_mut() {
                            let gplane = &mut gx[n * g.in_len() + c * p..][..p];
                            for (cr, &d) in corners.iter().zip(drow) {
                                for q in 0..4 {
                                    if let Some(i) = cr.index[q] {
                                        gplane[i] = gplane[i] + cr.weight[q] * d;
                                    }
                                }
                            }
                        }
                        if let Some(goff) = go_ff.as_mut() {
                            let base = n * g.off_len() + 2 * t * p;
                            for (i, (cr, &d)) in corners.iter().zip(drow).enumerate() {
                                let (sy, sx) = cr.slope(plane);
                                goff[base + i] = goff[base + i] + sy * d;
                                goff[base + p + i] = goff[base + p + i] + sx * d;
                            }
                        }
                    }
                }
            }
            vec![gx, go_ff, gw]
        })
    }

    /// Sampling shifts for a `k x k` deformable kernel, predicted from the
    /// reference features alone by a 3x3 convolution with `2k²` outputs.
    pub fn predict_offsets(&mut self, f_ref: Var, weight: Var, bias: Option<Var>, kernel: usize) -> Result<Var> {
        let out_channels = self.shape(weight).first().copied().unwrap_or(0);
        if out_channels != 2 * kernel * kernel {
            return Err(Error::shape(
                "predict_offsets",
                format!(
                    "offset conv has {out_channels} output channels, a {kernel}x{kernel} kernel needs {}",
                    2 * kernel * kernel
                ),
            ));
        }
        self.conv2d(f_ref, weight, bias, 1, 1)
    }

    /// Apply shared `offsets` to both branches: the reference map through
    /// `w_ref` and the distorted map through `w_dist`.
    pub fn ref_deform_conv(
        &mut self,
        f_ref: Var,
        f_dist: Var,
        offsets: Var,
        w_ref: Var,
        w_dist: Var,
    ) -> Result<(Var, Var)> {
        if self.shape(f_ref) != self.shape(f_dist) {
            return Err(Error::ShapeMismatch {
                op: "ref_deform_conv",
                lhs: self.shape(f_ref).to_vec(),
                rhs: self.shape(f_dist).to_vec(),
            });
        }
        let r = self.deform_conv(f_ref, offsets, w_ref)?;
        let d = self.deform_conv(f_dist, offsets, w_dist)?;
        Ok((r, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offsets_reduce_to_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[2, 3, 5, 6], 1.0, &mut rng);
        let w = random_tensor(&[4, 3, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let off = tape.constant(Tensor::zeros([2, 18, 5, 6]));
        let d = tape.deform_conv(xv, off, wv).unwrap();
        let c = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        assert!(tape.value(d).max_abs_diff(tape.value(c)) < 1e-12);
    }

    #[test]
    fn offset_channel_count_is_checked() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::zeros([4, 8, 8]));
        let w_ok = tape.constant(Tensor::zeros([18, 4, 3, 3]));
        let w_bad = tape.constant(Tensor::zeros([9, 4, 3, 3]));
        let o = tape.predict_offsets(f, w_ok, None, 3).unwrap();
        assert_eq!(tape.shape(o), &[18, 8, 8]);
        assert!(tape.predict_offsets(f, w_bad, None, 3).is_err());

        let wk = tape.constant(Tensor::zeros([4, 4, 3, 3]));
        let short = tape.constant(Tensor::zeros([9, 8, 8]));
        assert!(tape.deform_conv(f, short, wk).is_err());
    }

    #[test]
    fn branch_shapes_must_agree() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 4, 4]));
        let b = tape.constant(Tensor::zeros([2, 5, 4]));
        let o = tape.constant(Tensor::zeros([18, 4, 4]));
        let w = tape.constant(Tensor::zeros([2, 2, 3, 3]));
        assert!(tape.ref_deform_conv(a, b, o, w, w).is_err());
    }
}
