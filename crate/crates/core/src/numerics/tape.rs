use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use super::kernels;
use super::{Array, ParamStore, Real};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Rc<dyn Fn(&Array<T>) -> Vec<Array<T>>>;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    SliceCols(Var, usize),
    GatherElems(Var, Arc<[Option<usize>]>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        gain: Var,
        bias: Var,
        xhat: Array<T>,
        rstd: Vec<T>,
        x: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, CustomBackward<T>),
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
}

/// Single-threaded record of a forward computation.
///
/// Parameters are bound from one [`ParamStore`]; binding the same name twice
/// returns the same [`Var`], so two forward passes over one tape share
/// parameter leaves and their gradients add up.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, Var>>,
    macs: Cell<u64>,
    norm_elems: Cell<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            macs: Cell::new(0),
            norm_elems: Cell::new(0),
        }
    }

    /// Multiply-accumulates executed by forward matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Elements passed through softmax and layer normalisation so far.
    pub fn norm_elems(&self) -> u64 {
        self.norm_elems.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array<T>, op: Op<T>) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Array<T>>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Array<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Records a value that receives no gradient contribution upstream.
    pub fn constant(&self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same value as `v`, cut off from the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_arc(value, Op::Leaf)
    }

    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::arg("param", format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.params.borrow().get(&idx) {
            return Ok(v);
        }
        let v = self.push_arc(store.value_arc(idx), Op::Param);
        self.params.borrow_mut().insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n);
        self.macs.set(self.macs.get() + (m * k * n) as u64);
        Ok(self.push(Array::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(av.data(), bv.data(), &mut out, m, k, n);
        self.macs.set(self.macs.get() + (m * k * n) as u64);
        Ok(self.push(Array::new(&[m, n], out)?, Op::MatMulNT(a, b)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Array<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(av.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = av.dims2("add_row")?;
        if rv.shape() != [1, n] {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.data().to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        Ok(self.push(Array::new(&[m, n], out)?, Op::AddRow(a, row)))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_rows", "no inputs"))?;
        let cols = self.value(*first).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], pv.shape()));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        Ok(self.push(Array::new(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_cols", "no inputs"))?;
        let rows = self.value(*first).dims2("concat_cols")?.0;
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let mut cols = 0;
        for v in &values {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows, cols], v.shape()));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        Ok(self.push(Array::new(&[rows, cols], data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::arg(
                    "gather_rows",
                    format!("row {i} out of range for {r} rows"),
                ));
            }
            data.extend_from_slice(av.row(i));
        }
        Ok(self.push(
            Array::new(&[indices.len(), c], data)?,
            Op::GatherRows(a, indices.into()),
        ))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("slice_cols")?;
        if start + width > c {
            return Err(Error::arg(
                "slice_cols",
                format!("columns {start}..{} out of range for {c}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..start + width]);
        }
        Ok(self.push(Array::new(&[r, width], data)?, Op::SliceCols(a, start)))
    }

    /// Output element `i` is input element `indices[i]` (flat), or zero for
    /// `None`. Covers patch extraction and im2col.
    pub fn gather_elems(
        &self,
        a: Var,
        indices: Arc<[Option<usize>]>,
        shape: &[usize],
    ) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather_elems", shape, &[indices.len()]));
        }
        let mut data = Vec::with_capacity(indices.len());
        for idx in indices.iter() {
            data.push(match *idx {
                Some(i) if i < av.len() => av.data()[i],
                Some(i) => {
                    return Err(Error::arg(
                        "gather_elems",
                        format!("element {i} out of range for {}", av.len()),
                    ))
                }
                None => T::zero(),
            });
        }
        Ok(self.push(Array::new(shape, data)?, Op::GatherElems(a, indices)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("softmax_rows")?;
        let mut out = av.data().to_vec();
        for i in 0..r {
            super::softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        self.norm_elems.set(self.norm_elems.get() + (r * c) as u64);
        Ok(self.push(Array::new(&[r, c], out)?, Op::Softmax(a)))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("log_softmax_rows")?;
        let mut out = av.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(Array::new(&[r, c], out)?, Op::LogSoftmax(a)))
    }

    /// Row-wise layer normalisation with `1×n` gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = xv.dims2("layer_norm")?;
        if gv.shape() != [1, c] || bv.shape() != [1, c] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let n = T::lit(c as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        self.norm_elems.set(self.norm_elems.get() + (r * c) as u64);
        let xhat = Array::new(&[r, c], xhat)?;
        Ok(self.push(
            Array::new(&[r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / T::lit(av.len().max(1) as f64);
        self.push(Array::scalar(s), Op::Mean(a))
    }

    /// Records an externally computed value whose backward rule maps the
    /// output gradient to one gradient per input.
    pub fn custom(
        &self,
        inputs: &[Var],
        value: Array<T>,
        backward: Rc<dyn Fn(&Array<T>) -> Vec<Array<T>>>,
    ) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse sweep from a scalar. Only leaf and parameter gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));
        let mut kept: HashMap<usize, Array<T>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| -> &Array<T> { &nodes[v.0].value };
            match &node.op {
                Op::Leaf | Op::Param => {
                    kept.insert(i, g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let mut tmp = vec![T::zero(); m * k];
                    kernels::matmul_nt(g.data(), bv.data(), &mut tmp, m, n, k);
                    add_into(slot(&mut grads, *a, av.shape()), &tmp);
                    let gb = slot(&mut grads, *b, bv.shape());
                    kernels::matmul_tn_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[0];
                    let mut tmp = vec![T::zero(); m * k];
                    kernels::matmul(g.data(), bv.data(), &mut tmp, m, n, k);
                    add_into(slot(&mut grads, *a, av.shape()), &tmp);
                    let gb = slot(&mut grads, *b, bv.shape());
                    kernels::matmul_tn_acc(g.data(), av.data(), gb.data_mut(), m, n, k);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.shape()), g.data());
                    add_into(slot(&mut grads, *b, g.shape()), g.data());
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.shape()), g.data());
                    let gb = slot(&mut grads, *b, g.shape());
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga: Vec<T> = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    let gb: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    add_into(slot(&mut grads, *a, g.shape()), &ga);
                    add_into(slot(&mut grads, *b, g.shape()), &gb);
                }
                Op::AddRow(a, row) => {
                    add_into(slot(&mut grads, *a, g.shape()), g.data());
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let gr = slot(&mut grads, *row, &[1, n]);
                    for r in 0..m {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.shape());
                    for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += x * *s;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let len = shape[0] * shape[1];
                        add_into(slot(&mut grads, p, &shape), &g.data()[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.shape()[0];
                    let mut start = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let w = shape[1];
                        let gp = slot(&mut grads, p, &shape);
                        for r in 0..rows {
                            let src = &g.row(r)[start..start + w];
                            for (o, &x) in gp.row_mut(r).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                        start += w;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let ga = slot(&mut grads, *a, val(*a).shape());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let w = g.shape()[1];
                    let ga = slot(&mut grads, *a, val(*a).shape());
                    for r in 0..g.shape()[0] {
                        for (o, &x) in ga.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::GatherElems(a, idx) => {
                    let ga = slot(&mut grads, *a, val(*a).shape());
                    let gd = ga.data_mut();
                    for (k, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            gd[*s] += g.data()[k];
                        }
                    }
                }
                Op::Reshape(a) => {
                    add_into(slot(&mut grads, *a, val(*a).shape()), g.data());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let d = kernels::dot(yr, gr);
                        for j in 0..c {
                            ga[r * c + j] = yr[j] * (gr[j] - d);
                        }
                    }
                    add_into(slot(&mut grads, *a, y.shape()), &ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s: T = gr.iter().copied().sum();
                        for j in 0..c {
                            ga[r * c + j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    add_into(slot(&mut grads, *a, y.shape()), &ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gain);
                    let (r, c) = (xhat.shape()[0], xhat.shape()[1]);
                    let n = T::lit(c as f64);
                    let mut gx = vec![T::zero(); r * c];
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let (hr, gr) = (xhat.row(i), g.row(i));
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data()[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            gx[i * c + j] = rstd[i] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    add_into(slot(&mut grads, *x, &[r, c]), &gx);
                    add_into(slot(&mut grads, *gain, &[1, c]), &gg);
                    add_into(slot(&mut grads, *bias, &[1, c]), &gb);
                }
                Op::Gelu(a) => {
                    let xv = val(*a);
                    let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let ga: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let d = half * (T::one() + t)
                                + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            gy * d
                        })
                        .collect();
                    add_into(slot(&mut grads, *a, xv.shape()), &ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga: Vec<T> = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gy)| gy * s * (T::one() - s))
                        .collect();
                    add_into(slot(&mut grads, *a, y.shape()), &ga);
                }
                Op::Sum(a) => {
                    let g0 = g.data()[0];
                    for o in slot(&mut grads, *a, val(*a).shape()).data_mut() {
                        *o += g0;
                    }
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let g0 = g.data()[0] / T::lit(av.len().max(1) as f64);
                    for o in slot(&mut grads, *a, av.shape()).data_mut() {
                        *o += g0;
                    }
                }
                Op::Custom(inputs, f) => {
                    let parts = f(&g);
                    if parts.len() != inputs.len() {
                        return Err(Error::arg("backward", "custom op returned wrong arity"));
                    }
                    for (&inp, part) in inputs.iter().zip(parts) {
                        let shape = val(inp).shape().to_vec();
                        if part.shape() != shape.as_slice() {
                            return Err(Error::shape("backward", &shape, part.shape()));
                        }
                        add_into(slot(&mut grads, inp, &shape), part.data());
                    }
                }
            }
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&idx, &v)| (idx, v))
            .collect();
        Ok(Gradients { kept, params })
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Array<T>>], v: Var, shape: &[usize]) -> &'a mut Array<T> {
    grads[v.0].get_or_insert_with(|| Array::zeros(shape))
}

fn add_into<T: Real>(dst: &mut Array<T>, src: &[T]) {
    for (o, &x) in dst.data_mut().iter_mut().zip(src) {
        *o += x;
    }
}

/// Gradients of leaf values after [`Tape::backward`].
pub struct Gradients<T> {
    kept: HashMap<usize, Array<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or parameter; `None` if the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.kept.get(&v.0)
    }

    /// One gradient per store entry, in store order; zero where unreachable.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Array<T>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&i)
                    .and_then(|v| self.kept.get(&v.0))
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(store.value_at(i).shape()))
            })
            .collect()
    }
}
