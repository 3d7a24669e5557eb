//! Matrix products.

use ndarray::{s, Array3, ArrayView2, Ix2, Ix3};

use crate::tape::{Tensor, Var};

pub(crate) fn as_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

impl<'t> Var<'t> {
    /// `(m, k) @ (k, n) -> (m, n)`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (am, bm) = (as_matrix(&a), as_matrix(&b));
        assert_eq!(
            am.ncols(),
            bm.nrows(),
            "matmul inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let y = am.dot(&bm).into_dyn();
        self.tape.op(y, &[self, other], move || {
            Box::new(move |g| {
                let g = as_matrix(g);
                let ga = g.dot(&as_matrix(&b).t()).into_dyn();
                let gb = as_matrix(&a).t().dot(&g).into_dyn();
                vec![Some(ga), Some(gb)]
            })
        })
    }

    /// Batched `(n, m, k) @ (n, k, p) -> (n, m, p)`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs rank 3");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs rank 3");
        let (n, m, k) = a3.dim();
        let (nb, kb, p) = b3.dim();
        assert!(n == nb && k == kb, "bmm shapes {:?} x {:?}", a.shape(), b.shape());
        let mut y = Array3::<f64>::zeros((n, m, p));
        for i in 0..n {
            y.slice_mut(s![i, .., ..])
                .assign(&a3.slice(s![i, .., ..]).dot(&b3.slice(s![i, .., ..])));
        }
        self.tape.op(y.into_dyn(), &[self, other], move || {
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = Array3::<f64>::zeros((n, m, k));
                let mut gb = Array3::<f64>::zeros((n, k, p));
                for i in 0..n {
                    let gi = g3.slice(s![i, .., ..]);
                    ga.slice_mut(s![i, .., ..])
                        .assign(&gi.dot(&b3.slice(s![i, .., ..]).t()));
                    gb.slice_mut(s![i, .., ..])
                        .assign(&a3.slice(s![i, .., ..]).t().dot(&gi));
                }
                vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
            })
        })
    }

    /// Applies `x @ w + b` over the last axis of `x`, for any leading shape.
    /// `w` is `(in, out)`, `b` is `(out)`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Var<'t> {
        let shape = self.shape();
        let (&last, lead) = shape.split_last().expect("linear on scalar");
        let rows: usize = lead.iter().product();
        let out = w.shape()[1];
        let y = self.reshape(&[rows, last]).matmul(w);
        let y = match b {
            Some(b) => y.add(b),
            None => y,
        };
        let mut out_shape = lead.to_vec();
        out_shape.push(out);
        y.reshape(&out_shape)
    }
}

/// Plain matrix product on tensors, for callers outside the tape.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Tensor {
    as_matrix(a).dot(&as_matrix(b)).into_dyn()
}
