//! Elementwise arithmetic, reductions and shape manipulation.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use crate::tape::{Tensor, Var};

/// Reduces a broadcast gradient back to `shape` by summing over the axes
/// that were expanded.
pub fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    assert_eq!(g.shape(), shape, "cannot reduce gradient to target shape");
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

fn broadcast(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        t.clone()
    } else {
        t.broadcast(IxDyn(shape))
            .expect("broadcast")
            .to_owned()
    }
}

/// Sequential left fold; keeps summation order fixed and independent of
/// ndarray's internal unrolling.
pub fn ordered_sum(t: &Tensor) -> f64 {
    t.iter().fold(0.0, |acc, &x| acc + x)
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(a.shape(), b.shape());
        let mut out = broadcast(&a, &shape);
        let bb = broadcast(&b, &shape);
        out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
        self.tape.op(out, &[self, other], move || {
            let a_shape = a.shape().to_vec();
            let b_shape = b.shape().to_vec();
            let ab = broadcast(&a, &shape);
            Box::new(move |g| {
                let (ga, gb) = grads(g, &ab, &bb);
                vec![
                    Some(sum_to_shape(&ga, &a_shape)),
                    Some(sum_to_shape(&gb, &b_shape)),
                ]
            })
        })
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    /// Broadcasting subtraction.
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x - y, |g, _, _| (g.clone(), g.mapv(|v| -v)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x * y, |g, a, b| (g * b, g * a))
    }

    /// Broadcasting elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |x, y| x / y,
            |g, a, b| {
                let ga = g / b;
                let mut gb = g * a;
                gb.zip_mut_with(b, |v, &y| *v = -*v / (y * y));
                (ga, gb)
            },
        )
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.mapv(&f);
        let y_saved = y.clone();
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx)
                    .and(&*x)
                    .and(&y_saved)
                    .for_each(|gv, &xv, &yv| *gv *= df(xv, yv));
                vec![Some(gx)]
            })
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().mapv(|v| v * c);
        self.tape.op(y, &[self], move || {
            Box::new(move |g| vec![Some(g.mapv(|v| v * c))])
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().mapv(|v| v + c);
        self.tape
            .op(y, &[self], || Box::new(|g| vec![Some(g.clone())]))
    }

    /// max(x, 0); the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact Gaussian-error linear unit, `x * Phi(x)`.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let s = ordered_sum(&x);
        let shape = x.raw_dim();
        self.tape
            .op(ArrayD::from_elem(IxDyn(&[]), s), &[self], move || {
                Box::new(move |g| {
                    let gv = *g.iter().next().unwrap();
                    vec![Some(ArrayD::from_elem(shape.clone(), gv))]
                })
            })
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        let x = self.value();
        let m = ordered_sum(&x) / n;
        let shape = x.raw_dim();
        self.tape
            .op(ArrayD::from_elem(IxDyn(&[]), m), &[self], move || {
                Box::new(move |g| {
                    let gv = *g.iter().next().unwrap() / n;
                    vec![Some(ArrayD::from_elem(shape.clone(), gv))]
                })
            })
    }

    /// Sum over one axis.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let x = self.value();
        let mut y = x.sum_axis(Axis(axis));
        if keepdim {
            y = y.insert_axis(Axis(axis));
        }
        let shape = x.shape().to_vec();
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let g = if keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                vec![Some(broadcast(&g, &shape))]
            })
        })
    }

    /// Mean over one axis.
    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    /// Row-major reshape; the element count must not change.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {old:?} to {shape:?}"));
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape grad");
                vec![Some(gx)]
            })
        })
    }

    /// Reorders axes; output is materialized in standard layout.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let y = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let gx = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                vec![Some(gx)]
            })
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Var<'t> {
        let n = self.ndim();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let full = x.shape().to_vec();
        assert!(start + len <= full[axis], "narrow out of bounds");
        let y = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(IxDyn(&full));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(gx)]
            })
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        tape.op(y, parts, move || {
            Box::new(move |g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = g
                            .slice_axis(Axis(axis), Slice::from(offset..offset + n))
                            .to_owned();
                        offset += n;
                        Some(part)
                    })
                    .collect()
            })
        })
    }

    /// Picks `x[r, c]` for each `(r, c)` of a rank-2 tensor into a vector.
    pub fn gather2(self, index: &[(usize, usize)]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "gather2 needs a matrix");
        let y = ArrayD::from_shape_vec(
            IxDyn(&[index.len()]),
            index.iter().map(|&(r, c)| x[[r, c]]).collect(),
        )
        .unwrap();
        let index = index.to_vec();
        let shape = x.shape().to_vec();
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                for (k, &(r, c)) in index.iter().enumerate() {
                    gx[[r, c]] += g[[k]];
                }
                vec![Some(gx)]
            })
        })
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
