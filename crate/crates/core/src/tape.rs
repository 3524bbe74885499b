//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` array. Spatial maps are stored as
//! `(H*W) x C` matrices with pixels in raster order, which turns 1x1
//! convolutions into plain matrix products and 3x3 convolutions into an
//! im2col gather followed by a product.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-mixing operator: `out[i] = sum_j w_ij * in[j]`.
///
/// Used for bilinear resizing, sub-pixel sampling and row gathers, all of
/// which are linear in the input and carry no parameters.
#[derive(Debug, Clone)]
pub struct RowMix {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(n_in: usize, idx: &[usize]) -> Self {
        RowMix {
            n_in,
            rows: idx.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn apply(&self, a: &Mat) -> Mat {
        let mut out = Mat::zeros((self.rows.len(), a.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &a.row(j));
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Mat) -> Mat {
        let mut out = Mat::zeros((self.n_in, g.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &g.row(i));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddConst(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    RowNorm(Var),
    NormalizeRows(Var, f64),
    LogSumExpRows(Var),
    PickCols(Var, Arc<Vec<usize>>),
    SliceCols(Var, usize),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Mix(Var, Arc<RowMix>),
    Im2Col {
        a: Var,
        h: usize,
        w: usize,
        stride: usize,
    },
    Upsample2 {
        a: Var,
        h: usize,
        w: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Identifies a parameter tensor across stores bound to one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u32,
    pub index: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(Mat::from_elem((1, 1), x), Op::Leaf)
    }

    /// Leaf for a parameter; repeated calls with the same key share one node.
    pub fn param(&mut self, key: ParamKey, value: &Mat) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(key, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamKey, Var)> + '_ {
        self.params.iter().map(|(k, v)| (*k, *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let v = self.value(a) + &r;
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` by the matching entry of the `N x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col).clone();
        let mut v = self.value(a).clone();
        for (mut r, &x) in v.rows_mut().into_iter().zip(c.column(0).iter()) {
            r *= x;
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// Multiplies `a` by the `1 x 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddConst(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Per-row `sqrt(|x|^2 + eps)`; `eps` keeps the gradient finite at zero.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self
            .value(a)
            .map_axis(Axis(1), |r| (r.dot(&r) + eps).sqrt())
            .insert_axis(Axis(1));
        self.push(v, Op::RowNorm(a))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut r in v.rows_mut() {
            let n = (r.dot(&r) + eps).sqrt();
            r /= n;
        }
        self.push(v, Op::NormalizeRows(a, eps))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map_axis(Axis(1), |r| {
                let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                m + r.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            })
            .insert_axis(Axis(1));
        self.push(v, Op::LogSumExpRows(a))
    }

    /// `out[i] = a[i, cols[i]]` as an `N x 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let av = self.value(a);
        let v = Mat::from_shape_fn((cols.len(), 1), |(i, _)| av[[i, cols[i]]]);
        self.push(v, Op::PickCols(a, Arc::new(cols)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = av.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn mix(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        assert_eq!(mix.n_in, self.value(a).nrows(), "row mix input size");
        let v = mix.apply(self.value(a));
        self.push(v, Op::Mix(a, mix))
    }

    /// 3x3 patch extraction with zero padding. Input is `(h*w) x c`; output
    /// is `(ho*wo) x 9c` with `ho = (h-1)/stride + 1`.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize, stride: usize) -> Var {
        let v = im2col3(self.value(a), h, w, stride);
        self.push(v, Op::Im2Col { a, h, w, stride })
    }

    /// Nearest-neighbour 2x upsampling of an `(h*w) x c` map.
    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let c = av.ncols();
        let (ho, wo) = (2 * h, 2 * w);
        let mut v = Mat::zeros((ho * wo, c));
        for y in 0..ho {
            for x in 0..wo {
                v.row_mut(y * wo + x).assign(&av.row((y / 2) * w + x / 2));
            }
        }
        self.push(v, Op::Upsample2 { a, h, w })
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.dot(val(*b)));
                acc(*b, g.t().dot(val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                let mut da = g.clone();
                for (mut r, &x) in da.rows_mut().into_iter().zip(cv.column(0).iter()) {
                    r *= x;
                }
                acc(*a, da);
                let dc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*c, dc);
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::ScaleBy(a, s) => {
                let k = val(*s)[[0, 0]];
                acc(*a, g * k);
                acc(*s, Mat::from_elem((1, 1), (g * val(*a)).sum()));
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Silu(a) => {
                let mut d = val(*a).mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                d *= g;
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.mapv(|y| y * (1.0 - y));
                d *= g;
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = val(*a).mapv(sigmoid);
                d *= g;
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Square(a) => acc(*a, g * &(val(*a) * 2.0)),
            Op::Sum(a) => {
                let k = g[[0, 0]];
                acc(*a, Mat::from_elem(val(*a).raw_dim(), k));
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.raw_dim());
                for (mut r, &x) in d.rows_mut().into_iter().zip(g.column(0).iter()) {
                    r.fill(x);
                }
                acc(*a, d);
            }
            Op::RowNorm(a) => {
                let mut d = val(*a).clone();
                for ((mut r, &n), &gi) in d
                    .rows_mut()
                    .into_iter()
                    .zip(node.value.column(0).iter())
                    .zip(g.column(0).iter())
                {
                    r *= gi / n;
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a, eps) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.raw_dim());
                for (((mut dr, xr), yr), gr) in d
                    .rows_mut()
                    .into_iter()
                    .zip(av.rows())
                    .zip(node.value.rows())
                    .zip(g.rows())
                {
                    let n = (xr.dot(&xr) + eps).sqrt();
                    let gy = gr.dot(&yr);
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|d, &gv, &y| *d = (gv - y * gy) / n);
                }
                acc(*a, d);
            }
            Op::LogSumExpRows(a) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.raw_dim());
                for (((mut dr, xr), &l), &gi) in d
                    .rows_mut()
                    .into_iter()
                    .zip(av.rows())
                    .zip(node.value.column(0).iter())
                    .zip(g.column(0).iter())
                {
                    Zip::from(&mut dr)
                        .and(&xr)
                        .for_each(|d, &x| *d = gi * (x - l).exp());
                }
                acc(*a, d);
            }
            Op::PickCols(a, cols) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                for (r, &c) in cols.iter().enumerate() {
                    d[[r, c]] += g[[r, 0]];
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                let end = start + g.ncols();
                d.slice_mut(s![.., *start..end]).assign(g);
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let shape = val(*a).raw_dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                acc(*a, Mat::from_shape_vec(shape, flat).expect("reshape grad"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    acc(p, g.slice(s![offset..offset + n, ..]).to_owned());
                    offset += n;
                }
            }
            Op::Mix(a, mix) => acc(*a, mix.apply_transpose(g)),
            Op::Im2Col { a, h, w, stride } => {
                acc(*a, col2im3(g, *h, *w, *stride, val(*a).ncols()));
            }
            Op::Upsample2 { a, h, w } => {
                let c = g.ncols();
                let wo = 2 * w;
                let mut d = Mat::zeros((h * w, c));
                for y in 0..2 * h {
                    for x in 0..wo {
                        d.row_mut((y / 2) * w + x / 2).scaled_add(1.0, &g.row(y * wo + x));
                    }
                }
                acc(*a, d);
            }
        }
    }
}

pub fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn im2col3(a: &Mat, h: usize, w: usize, stride: usize) -> Mat {
    let c = a.ncols();
    assert_eq!(a.nrows(), h * w, "im2col input rows");
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let src = a.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Mat::zeros((ho * wo, 9 * c));
    let dst = out.as_slice_mut().expect("fresh array");
    for oy in 0..ho {
        for ox in 0..wo {
            let (cy, cx) = (oy * stride, ox * stride);
            let base = (oy * wo + ox) * 9 * c;
            for ky in 0..3 {
                let Some(y) = (cy + ky).checked_sub(1).filter(|&y| y < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(x) = (cx + kx).checked_sub(1).filter(|&x| x < w) else {
                        continue;
                    };
                    let k = ky * 3 + kx;
                    let from = (y * w + x) * c;
                    dst[base + k * c..base + (k + 1) * c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    out
}

fn col2im3(g: &Mat, h: usize, w: usize, stride: usize, c: usize) -> Mat {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let g = g.as_standard_layout();
    let src = g.as_slice().expect("standard layout");
    let mut out = Mat::zeros((h * w, c));
    let dst = out.as_slice_mut().expect("fresh array");
    for oy in 0..ho {
        for ox in 0..wo {
            let (cy, cx) = (oy * stride, ox * stride);
            let base = (oy * wo + ox) * 9 * c;
            for ky in 0..3 {
                let Some(y) = (cy + ky).checked_sub(1).filter(|&y| y < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(x) = (cx + kx).checked_sub(1).filter(|&x| x < w) else {
                        continue;
                    };
                    let k = ky * 3 + kx;
                    let to = (y * w + x) * c;
                    for (d, s) in dst[to..to + c].iter_mut().zip(&src[base + k * c..base + (k + 1) * c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
