use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Clamp bound for probabilities fed to [`Tape::binary_cross_entropy`].
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    /// The right operand repeats over the left.
    Rhs,
    /// The left operand repeats over the right.
    Lhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_mode(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        Some(Broadcast::Same)
    } else if bn == 1 || is_suffix(b, a) {
        Some(Broadcast::Rhs)
    } else if an == 1 || is_suffix(a, b) {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

/// Fold a full-size gradient back onto a broadcast operand of length `n`.
fn reduce_to<T: Element>(full: Vec<T>, n: usize) -> Vec<T> {
    if full.len() == n {
        return full;
    }
    let mut out = vec![T::zero(); n];
    for (i, v) in full.into_iter().enumerate() {
        out[i % n] = out[i % n] + v;
    }
    out
}

impl<T: Element> Tape<T> {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(T, T) -> T,
        da: fn(T, T, T) -> T,
        db: fn(T, T, T) -> T,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = broadcast_mode(av.shape(), bv.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let (an, bn) = (av.numel(), bv.numel());
        let out_shape = match mode {
            Broadcast::Same | Broadcast::Rhs => av.shape().to_vec(),
            Broadcast::Lhs => bv.shape().to_vec(),
        };
        let n = an.max(bn);
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = (0..n).map(|i| f(ad[i % an], bd[i % bn])).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(op, value, &[a, b], move |ctx| {
            let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let (an, bn) = (ad.len(), bd.len());
            let ga = ctx.needs[0].then(|| {
                let full = (0..n).map(|i| da(ad[i % an], bd[i % bn], ctx.grad[i])).collect();
                reduce_to(full, an)
            });
            let gb = ctx.needs[1].then(|| {
                let full = (0..n).map(|i| db(ad[i % an], bd[i % bn], ctx.grad[i])).collect();
                reduce_to(full, bn)
            });
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |_, y, g| g / y, |x, y, g| -g * x / (y * y))
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.push("scalar_mul", value, &[a], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * c).collect())]
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push("add_scalar", value, &[a], |ctx| vec![Some(ctx.grad.to_vec())])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(T::zero()));
        if self.tracks_kinks() {
            let keys: Vec<i64> = self.value(a).data().iter().map(|&v| (v > T::zero()) as i64).collect();
            self.note_kinks(keys);
        }
        self.push("relu", value, &[a], |ctx| {
            let x = ctx.inputs[0].data();
            let g = x
                .iter()
                .zip(ctx.grad)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", value, &[a], |ctx| {
            let y = ctx.output.data();
            let g = y.iter().zip(ctx.grad).map(|(&y, &g)| g * y * (T::one() - y)).collect();
            vec![Some(g)]
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(lo).min(hi));
        if self.tracks_kinks() {
            let keys: Vec<i64> = self
                .value(a)
                .data()
                .iter()
                .map(|&v| {
                    if v < lo {
                        -1
                    } else if v > hi {
                        1
                    } else {
                        0
                    }
                })
                .collect();
            self.note_kinks(keys);
        }
        self.push("clamp", value, &[a], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = x
                .iter()
                .zip(ctx.grad)
                .map(|(&x, &g)| if x < lo || x > hi { T::zero() } else { g })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::EmptyInput("sum"));
        }
        let n = av.numel();
        let s = av.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[a], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean"));
        }
        let s = self.sum(a)?;
        self.scalar_mul(s, T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, &[a], |ctx| vec![Some(ctx.grad.to_vec())])
    }

    /// `[M x K] . [K x P] -> [M x P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, p) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, p]) if k == k2 => (*m, *k, *p),
            (l, r) => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: l.to_vec(),
                    rhs: r.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * p];
        T::gemm(m, k, p, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let value = Tensor::new([m, p], out)?;
        self.push("matmul", value, &[a, b], move |ctx| {
            let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs[0].then(|| {
                // dA = dC . B^T
                let mut g = vec![T::zero(); m * k];
                T::gemm(m, p, k, ctx.grad, false, bd, true, T::zero(), &mut g);
                g
            });
            let gb = ctx.needs[1].then(|| {
                // dB = A^T . dC
                let mut g = vec![T::zero(); k * p];
                T::gemm(k, m, p, ad, true, ctx.grad, false, T::zero(), &mut g);
                g
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let &[r, c] = av.shape() else {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", av.shape())));
        };
        let value = Tensor::new([c, r], transpose_buf(av.data(), r, c))?;
        self.push("transpose", value, &[a], move |ctx| {
            vec![Some(transpose_buf(ctx.grad, c, r))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = *av.shape().last().ok_or(Error::EmptyInput("softmax"))?;
        if d == 0 || av.numel() == 0 {
            return Err(Error::EmptyInput("softmax"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax", value, &[a], move |ctx| {
            let y = ctx.output.data();
            let mut g = vec![T::zero(); y.len()];
            for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(ctx.grad.chunks(d)) {
                let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                for ((o, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                    *o = y * (d - dot);
                }
            }
            vec![Some(g)]
        })
    }

    /// Mean squared error between equally shaped tensors.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "l2_loss",
                lhs: pv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let n = pv.numel();
        if n == 0 {
            return Err(Error::EmptyInput("l2_loss"));
        }
        let inv = T::one() / T::from_f64(n as f64);
        let loss: T = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            * inv;
        self.push("l2_loss", Tensor::scalar(loss), &[pred, target], move |ctx| {
            let (p, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let two = T::from_f64(2.0) * inv * ctx.grad[0];
            let d: Vec<T> = p.iter().zip(t).map(|(&p, &t)| two * (p - t)).collect();
            let gt = ctx.needs[1].then(|| d.iter().map(|&v| -v).collect());
            vec![ctx.needs[0].then_some(d), gt]
        })
    }

    /// Mean of `-(y ln p + (1-y) ln(1-p))`, with `p` clamped to
    /// `[BCE_EPSILON, 1 - BCE_EPSILON]`.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let pv = self.value(p);
        let n = pv.numel();
        if n == 0 {
            return Err(Error::EmptyInput("binary_cross_entropy"));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: pv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().any(|&y| !(y >= T::zero() && y <= T::one())) {
            return Err(Error::InvalidArgument(
                "binary_cross_entropy: labels must lie in [0, 1]".into(),
            ));
        }
        let eps = T::from_f64(BCE_EPSILON);
        let (lo, hi) = (eps, T::one() - eps);
        let inv = T::one() / T::from_f64(n as f64);
        let loss: T = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.max(lo).min(hi);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum::<T>()
            * inv;
        let labels = labels.to_vec();
        self.push("binary_cross_entropy", Tensor::scalar(loss), &[p], move |ctx| {
            let g0 = ctx.grad[0] * inv;
            let g = ctx.inputs[0]
                .data()
                .iter()
                .zip(&labels)
                .map(|(&p, &y)| {
                    if p < lo || p > hi {
                        T::zero()
                    } else {
                        g0 * ((T::one() - y) / (T::one() - p) - y / p)
                    }
                })
                .collect();
            vec![Some(g)]
        })
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let value = av.slice_rows(start, end)?;
        let total = av.numel();
        let stride = total / av.shape()[0].max(1);
        self.push("slice_rows", value, &[a], move |ctx| {
            let mut g = vec![T::zero(); total];
            g[start * stride..end * stride].copy_from_slice(ctx.grad);
            vec![Some(g)]
        })
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::stack_rows(&values)?;
        let sizes: Vec<usize> = values.iter().map(Tensor::numel).collect();
        self.push("concat_rows", value, parts, move |ctx| {
            let mut off = 0;
            sizes
                .iter()
                .zip(ctx.needs)
                .map(|(&n, &need)| {
                    let g = need.then(|| ctx.grad[off..off + n].to_vec());
                    off += n;
                    g
                })
                .collect()
        })
    }

    /// Concatenate 2-D tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let rows = match self.shape(first) {
            [r, _] => *r,
            s => return Err(Error::shape("concat_cols", format!("expected 2-D, got {s:?}"))),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == rows => widths.push(*c),
                s => {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: self.shape(first).to_vec(),
                        rhs: s.to_vec(),
                    })
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new([rows, total], data)?;
        self.push("concat_cols", value, parts, move |ctx| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (&w, &need) in widths.iter().zip(ctx.needs) {
                grads.push(need.then(|| {
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let base = r * total + offset;
                        g.extend_from_slice(&ctx.grad[base..base + w]);
                    }
                    g
                }));
                offset += w;
            }
            grads
        })
    }
}

fn transpose_buf<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1., 2., 3.]));
        let b = tape.constant(t(&[3], &[4., 5., 6.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5., 7., 9.]);
    }

    #[test]
    fn multiply_by_one_is_exact() {
        let mut tape = Tape::<f32>::new();
        let data = vec![0.1f32, -3.7, 1e-20, 6.02e23];
        let x = tape.constant(Tensor::new([4], data.clone()).unwrap());
        let y = tape.scalar_mul(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::<f64>::new();
        let m = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let row = tape.param(t(&[3], &[10., 20., 30.]));
        let s = tape.constant(t(&[], &[2.]));
        let col = tape.constant(t(&[2], &[1., 1.]));

        let r = tape.add(m, row).unwrap();
        assert_eq!(tape.value(r).data(), &[11., 22., 33., 14., 25., 36.]);
        let r2 = tape.mul(s, m).unwrap();
        assert_eq!(tape.shape(r2), &[2, 3]);
        assert!(matches!(tape.add(m, col), Err(Error::ShapeMismatch { .. })));

        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(row).unwrap(), &[2., 2., 2.]);
        assert_eq!(tape.grad(m).unwrap(), &[1.; 6]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17., 39.]);

        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        assert!(tape.matmul(b, b).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([0]));
        assert!(matches!(tape.softmax(x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn l2_of_identical_inputs_is_zero_with_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., -2., 0.5]));
        let y = tape.constant(t(&[3], &[1., -2., 0.5]));
        let loss = tape.l2_loss(x, y).unwrap();
        assert_eq!(tape.value(loss).item(), Some(0.0));
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.; 3]);
    }

    #[test]
    fn bce_at_one_half_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t(&[1], &[0.5]));
        let loss = tape.binary_cross_entropy(p, &[1.0]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_clamps_at_epsilon() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t(&[2], &[1.0, 0.0]));
        let loss = tape.binary_cross_entropy(p, &[1.0, 0.0]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!(v.is_finite() && v < 1e-6);
        assert!(tape.binary_cross_entropy(p, &[2.0, 0.0]).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., -2., 3.]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);

        tape.zero_grad();
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq).unwrap();
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(t(&[2], &[1., 2.]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DetachedLoss)));
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::<f32>::new().with_finite_checks(true);
        let a = tape.constant(Tensor::new([1], vec![1.0]).unwrap());
        let z = tape.constant(Tensor::new([1], vec![0.0]).unwrap());
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite("div"))));
    }

    #[test]
    fn concat_cols_and_slice_rows_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 1], &[1., 2.]));
        let b = tape.param(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let r = tape.slice_rows(c, 1, 2).unwrap();
        let w = tape.constant(t(&[3], &[1., 10., 100.]));
        let m = tape.mul(r, w).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0., 1.]);
        assert_eq!(tape.grad(b).unwrap(), &[0., 0., 10., 100.]);
    }
}
