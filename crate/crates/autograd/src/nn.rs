//! Neural-network primitives with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::linalg::as_matrix;
use crate::tape::{Tensor, Var};

/// Standard-layout copy split into `(rows, last)`.
fn rows_of(t: &Tensor) -> (Vec<f64>, usize, usize) {
    let n = *t.shape().last().expect("rank >= 1");
    let data = t.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let rows = if n == 0 { 0 } else { data.len() / n };
    (data, rows, n)
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch")
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding.0 - kh) / self.stride.0 + 1;
        let ow = (w + 2 * self.padding.1 - kw) / self.stride.1 + 1;
        (oh, ow)
    }
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geo: Conv2dGeometry,
}

impl ConvDims {
    fn ncol(&self) -> usize {
        self.b * self.oh * self.ow
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ncol = self.ncol();
        let (sh, sw) = self.geo.stride;
        let (ph, pw) = (self.geo.padding.0 as isize, self.geo.padding.1 as isize);
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for bi in 0..self.b {
                        let xbase = (bi * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * sh + ki) as isize - ph;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let rbase = xbase + iy as usize * self.w;
                            let cbase = (bi * self.oh + oy) * self.ow;
                            for ox in 0..self.ow {
                                let ix = (ox * sw + kj) as isize - pw;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(row * ncol + cbase + ox, rbase + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Array2<f64> {
        let ncol = self.ncol();
        let mut cols = vec![0.0; self.c * self.kh * self.kw * ncol];
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
        Array2::from_shape_vec((self.c * self.kh * self.kw, ncol), cols).unwrap()
    }

    fn col2im(&self, cols: &Array2<f64>) -> Vec<f64> {
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().unwrap();
        let mut x = vec![0.0; self.b * self.c * self.h * self.w];
        self.for_each_tap(|ci, xi| x[xi] += cs[ci]);
        x
    }
}

/// `(O, B*oh*ow)` matrix to `(B, O, oh, ow)` tensor.
fn mat_to_nchw(m: &Array2<f64>, b: usize, oh: usize, ow: usize) -> Tensor {
    let o = m.nrows();
    let m = m.as_standard_layout();
    let ms = m.as_slice().unwrap();
    let hw = oh * ow;
    let mut out = vec![0.0; b * o * hw];
    for oi in 0..o {
        for bi in 0..b {
            let src = &ms[oi * b * hw + bi * hw..oi * b * hw + (bi + 1) * hw];
            out[(bi * o + oi) * hw..(bi * o + oi + 1) * hw].copy_from_slice(src);
        }
    }
    from_vec(&[b, o, oh, ow], out)
}

fn nchw_to_mat(t: &Tensor) -> Array2<f64> {
    let s = t.shape();
    let (b, o, hw) = (s[0], s[1], s[2] * s[3]);
    let t = t.as_standard_layout();
    let ts = t.as_slice().unwrap();
    let mut out = vec![0.0; b * o * hw];
    for bi in 0..b {
        for oi in 0..o {
            let src = &ts[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
            out[oi * b * hw + bi * hw..oi * b * hw + (bi + 1) * hw].copy_from_slice(src);
        }
    }
    Array2::from_shape_vec((o, b * hw), out).unwrap()
}

/// Row-interpolation matrix for half-pixel-centre (corners not aligned)
/// bilinear resampling from `input` to `output` samples.
pub fn bilinear_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

/// Statistics from a batch-normalization forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

impl<'t> Var<'t> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (mut data, rows, n) = rows_of(&x);
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = from_vec(&shape, data.clone());
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let (gd, _, _) = rows_of(g);
                let mut gx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let ys = &data[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(from_vec(&shape, gx))]
            })
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (mut data, rows, n) = rows_of(&x);
        let mut probs = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v -= lse;
                probs[r * n + j] = v.exp();
            }
        }
        let y = from_vec(&shape, data);
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let (gd, _, _) = rows_of(g);
                let mut gx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let gs = &gd[r * n..(r + 1) * n];
                    let total: f64 = gs.iter().sum();
                    for j in 0..n {
                        gx[r * n + j] = gs[j] - probs[r * n + j] * total;
                    }
                }
                vec![Some(from_vec(&shape, gx))]
            })
        })
    }

    /// Normalizes every vector along the last axis to zero mean and unit
    /// (biased) variance. No affine transform.
    pub fn normalize_last(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (mut data, rows, n) = rows_of(&x);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        let y = from_vec(&shape, data.clone());
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let (gd, _, _) = rows_of(g);
                let mut gx = vec![0.0; gd.len()];
                let nf = n as f64;
                for r in 0..rows {
                    let xh = &data[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let sg: f64 = gs.iter().sum();
                    let sgx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = inv_std[r] / nf * (nf * gs[j] - sg - xh[j] * sgx);
                    }
                }
                vec![Some(from_vec(&shape, gx))]
            })
        })
    }

    /// Normalizes each channel (axis 1) with statistics taken over every
    /// other axis. Works for `(B, C)` and `(B, C, ...)` inputs.
    pub fn normalize_channels(self, eps: f64) -> (Var<'t>, BatchStats) {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "normalize_channels needs (B, C, ...)");
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = b * inner;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let idx = move |bi: usize, ci: usize, k: usize| (bi * c + ci) * inner + k;

        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                for k in 0..inner {
                    s += xs[idx(bi, ci, k)];
                }
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for bi in 0..b {
                for k in 0..inner {
                    let d = xs[idx(bi, ci, k)] - m;
                    v += d * d;
                }
            }
            v /= count as f64;
            let is = 1.0 / (v + eps).sqrt();
            for bi in 0..b {
                for k in 0..inner {
                    let i = idx(bi, ci, k);
                    out[i] = (xs[i] - m) * is;
                }
            }
            mean[ci] = m;
            var[ci] = v;
            inv_std[ci] = is;
        }
        let stats = BatchStats { mean, var, count };
        let y = from_vec(&shape, out.clone());
        let var_out = self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let mut gx = vec![0.0; gs.len()];
                let nf = count as f64;
                for ci in 0..c {
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    for bi in 0..b {
                        for k in 0..inner {
                            let i = idx(bi, ci, k);
                            sg += gs[i];
                            sgx += gs[i] * out[i];
                        }
                    }
                    for bi in 0..b {
                        for k in 0..inner {
                            let i = idx(bi, ci, k);
                            gx[i] = inv_std[ci] / nf * (nf * gs[i] - sg - out[i] * sgx);
                        }
                    }
                }
                vec![Some(from_vec(&shape, gx))]
            })
        });
        (var_out, stats)
    }

    /// 2-D cross-correlation of `(B, C, H, W)` input with `(O, C, kh, kw)`
    /// weights. No bias.
    pub fn conv2d(self, weight: Var<'t>, geo: Conv2dGeometry) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let (kh, kw) = (ws[2], ws[3]);
        assert!(
            xs[2] + 2 * geo.padding.0 >= kh && xs[3] + 2 * geo.padding.1 >= kw,
            "kernel larger than padded input"
        );
        let (oh, ow) = geo.output_size(xs[2], xs[3], kh, kw);
        let dims = ConvDims {
            b: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh,
            kw,
            oh,
            ow,
            geo,
        };
        let o = ws[0];
        let xstd = x.as_standard_layout();
        let cols = dims.im2col(xstd.as_slice().unwrap());
        let wmat = w
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, dims.c * kh * kw))
            .unwrap();
        let ymat = wmat.dot(&cols);
        let y = mat_to_nchw(&ymat, dims.b, oh, ow);
        let w_shape = ws.to_vec();
        let x_shape = xs.to_vec();
        self.tape.op(y, &[self, weight], move || {
            Box::new(move |g| {
                let gmat = nchw_to_mat(g);
                // a product with a unit dimension may come back column-major
                let gw = gmat
                    .dot(&cols.t())
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&w_shape))
                    .unwrap();
                let gcols = wmat.t().dot(&gmat);
                let gx = from_vec(&x_shape, dims.col2im(&gcols));
                vec![Some(gx), Some(gw)]
            })
        })
    }

    /// Non-overlapping max pooling with window `(kh, kw)` and equal stride.
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2d(self, kh: usize, kw: usize) -> Var<'t> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "max_pool2d input must be NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / kh, w / kw);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + oy * kh * w + ox * kw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let xi = base + (oy * kh + i) * w + ox * kw + j;
                            if xs[xi] > best {
                                best = xs[xi];
                                best_i = xi;
                            }
                        }
                    }
                    let oi = (plane * oh + oy) * ow + ox;
                    out[oi] = best;
                    arg[oi] = best_i;
                }
            }
        }
        let y = from_vec(&[b, c, oh, ow], out);
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let gs = g.as_standard_layout();
                let mut gx = vec![0.0; b * c * h * w];
                for (oi, &gv) in gs.iter().enumerate() {
                    gx[arg[oi]] += gv;
                }
                vec![Some(from_vec(&s, gx))]
            })
        })
    }

    /// Bilinear resampling of `(B, C, H, W)` to `(B, C, oh, ow)` with
    /// half-pixel centres (corners not aligned).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'t> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "resize_bilinear input must be NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ah = bilinear_matrix(h, oh);
        let aw = bilinear_matrix(w, ow);
        let planes = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * c, h, w))
            .unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((b * c, oh, ow));
        for p in 0..b * c {
            let y = ah.dot(&planes.index_axis(ndarray::Axis(0), p)).dot(&aw.t());
            out.index_axis_mut(ndarray::Axis(0), p).assign(&y);
        }
        let y = out.into_shape_with_order(IxDyn(&[b, c, oh, ow])).unwrap();
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let gp = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((b * c, oh, ow))
                    .unwrap();
                let mut gx = ndarray::Array3::<f64>::zeros((b * c, h, w));
                for p in 0..b * c {
                    let v = ah.t().dot(&gp.index_axis(ndarray::Axis(0), p)).dot(&aw);
                    gx.index_axis_mut(ndarray::Axis(0), p).assign(&v);
                }
                vec![Some(gx.into_shape_with_order(IxDyn(&s)).unwrap())]
            })
        })
    }

    /// Pairwise Euclidean distances between the rows of a `(N, D)` matrix.
    /// The gradient of a zero distance is taken as zero.
    pub fn pairwise_euclidean(self) -> Var<'t> {
        let x = self.value();
        let xm = as_matrix(&x).to_owned();
        let (n, d) = xm.dim();
        let dist = pairwise_euclidean_plain(&xm);
        let y = dist.clone().into_dyn();
        self.tape.op(y, &[self], move || {
            Box::new(move |g| {
                let gm = as_matrix(g);
                let mut gx = Array2::<f64>::zeros((n, d));
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[[i, j]];
                        if i == j || dij == 0.0 {
                            continue;
                        }
                        let coef = gm[[i, j]] / dij;
                        if coef == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = xm[[i, k]] - xm[[j, k]];
                            gx[[i, k]] += coef * diff;
                            gx[[j, k]] -= coef * diff;
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            })
        })
    }
}

/// Euclidean distance matrix, summing squared differences in index order.
pub fn pairwise_euclidean_plain(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut dist = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut s = 0.0;
            for (a, b) in x.row(i).iter().zip(x.row(j).iter()) {
                let diff = a - b;
                s += diff * diff;
            }
            dist[[i, j]] = s.sqrt();
        }
    }
    dist
}
