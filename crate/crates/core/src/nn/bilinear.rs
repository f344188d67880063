use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// The four neighbours of a fractional location with their interpolation
/// weights and the weights' derivatives along y and x.
///
/// Neighbours outside the `h x w` grid have `index == None` and read as zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners<T> {
    pub index: [Option<usize>; 4],
    pub weight: [T; 4],
    pub dy: [T; 4],
    pub dx: [T; 4],
    /// Integer cell `(floor(y), floor(x))`, for kink tracking.
    pub cell: (i64, i64),
}

impl<T: Element> Corners<T> {
    pub fn new(h: usize, w: usize, y: T, x: T) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let hy = T::one() - ly;
        let hx = T::one() - lx;
        // Beyond one cell outside the grid every neighbour is out of range, so
        // clamping there keeps the integer arithmetic bounded without changing results.
        let iy = y0.as_f64().clamp(-2.0, h as f64 + 1.0) as i64;
        let ix = x0.as_f64().clamp(-2.0, w as f64 + 1.0) as i64;
        let at = |yy: i64, xx: i64| {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
        };
        Corners {
            index: [at(iy, ix), at(iy, ix + 1), at(iy + 1, ix), at(iy + 1, ix + 1)],
            weight: [hy * hx, hy * lx, ly * hx, ly * lx],
            dy: [-hx, -lx, hx, lx],
            dx: [-hy, hy, -ly, ly],
            cell: (iy, ix),
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut v = T::zero();
        for c in 0..4 {
            if let Some(i) = self.index[c] {
                v = v + self.weight[c] * plane[i];
            }
        }
        v
    }

    /// `(d sample / dy, d sample / dx)` on `plane`.
    #[inline]
    pub fn slope(&self, plane: &[T]) -> (T, T) {
        let (mut gy, mut gx) = (T::zero(), T::zero());
        for c in 0..4 {
            if let Some(i) = self.index[c] {
                gy = gy + self.dy[c] * plane[i];
                gx = gx + self.dx[c] * plane[i];
            }
        }
        (gy, gx)
    }
}

impl<T: Element> Tape<T> {
    /// Bilinear read of every channel of `fmap` (`[C, H, W]`) at the
    /// fractional location given by scalar vars `y`, `x`. Locations outside
    /// the map read zero. Differentiable in the map and in both coordinates.
    pub fn bilinear_sample(&mut self, fmap: Var, y: Var, x: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(fmap) else {
            return Err(Error::shape(
                "bilinear_sample",
                format!("feature map must be [C, H, W], got {:?}", self.shape(fmap)),
            ));
        };
        let (Some(yv), Some(xv)) = (self.value(y).item(), self.value(x).item()) else {
            return Err(Error::shape("bilinear_sample", "coordinates must be scalars"));
        };
        let corners = Corners::new(h, w, yv, xv);
        self.note_kinks([corners.cell.0, corners.cell.1]);
        let data = self.value(fmap).data();
        let out: Vec<T> = data.chunks(h * w).map(|plane| corners.sample(plane)).collect();
        let value = Tensor::new([c], out)?;
        self.push("bilinear_sample", value, &[fmap, y, x], move |ctx| {
            let data = ctx.inputs[0].data();
            let gmap = ctx.needs[0].then(|| {
                let mut g = vec![T::zero(); data.len()];
                for (plane, &go) in g.chunks_mut(h * w).zip(ctx.grad) {
                    for k in 0..4 {
                        if let Some(i) = corners.index[k] {
                            plane[i] = plane[i] + corners.weight[k] * go;
                        }
                    }
                }
                g
            });
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for (plane, &go) in data.chunks(h * w).zip(ctx.grad) {
                let (sy, sx) = corners.slope(plane);
                gy = gy + sy * go;
                gx = gx + sx * go;
            }
            vec![gmap, ctx.needs[1].then(|| vec![gy]), ctx.needs[2].then(|| vec![gx])]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(map: &Tensor<f64>, y: f64, x: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(map.clone());
        let yv = tape.constant(Tensor::scalar(y));
        let xv = tape.constant(Tensor::scalar(x));
        let s = tape.bilinear_sample(m, yv, xv).unwrap();
        tape.value(s).data().to_vec()
    }

    fn grid() -> Tensor<f64> {
        Tensor::from_f64s([1, 2, 2], &[1., 2., 3., 4.]).unwrap()
    }

    #[test]
    fn integer_coordinates_read_stored_values() {
        let map = Tensor::from_f64s([2, 2, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]).unwrap();
        assert_eq!(sample(&map, 0.0, 0.0), vec![1., 7.]);
        assert_eq!(sample(&map, 1.0, 2.0), vec![6., 12.]);
        assert_eq!(sample(&map, 0.0, 1.0), vec![2., 8.]);
    }

    #[test]
    fn center_of_two_by_two() {
        assert_eq!(sample(&grid(), 0.5, 0.5), vec![2.5]);
    }

    #[test]
    fn far_outside_reads_zero() {
        assert_eq!(sample(&grid(), -5.0, -5.0), vec![0.0]);
        assert_eq!(sample(&grid(), 1e30, 3.0), vec![0.0]);
    }

    #[test]
    fn partially_outside_fades_to_zero() {
        // Half a pixel above the top row: half of row 0.
        let v = sample(&grid(), -0.5, 0.0);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_map_and_coordinates() {
        let mut tape = Tape::<f64>::new();
        let m = tape.param(grid());
        let y = tape.param(Tensor::scalar(0.25));
        let x = tape.param(Tensor::scalar(0.75));
        let s = tape.bilinear_sample(m, y, x).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        // f = (1-y)(1-x)*1 + (1-y)x*2 + y(1-x)*3 + yx*4 = 1 + x + 2y
        assert!((tape.grad(y).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((tape.grad(x).unwrap()[0] - 1.0).abs() < 1e-12);
        let gm = tape.grad(m).unwrap();
        let want = [0.75 * 0.25, 0.75 * 0.75, 0.25 * 0.25, 0.25 * 0.75];
        for (a, b) in gm.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
