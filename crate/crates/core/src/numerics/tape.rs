//! Reverse-mode differentiation over a linear record of primitives.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every primitive appends a node holding its output value and enough
//! context to compute input gradients; [`Tape::backward`] walks the nodes
//! once, newest first.

use std::borrow::Cow;

use super::{NumericsError, ParamGrads, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Constant,
    Param,
    Gather { table: Var, ids: Vec<usize> },
    Row { input: Var, row: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Conv1d {
        input: Var,
        pad: Var,
        filters: Var,
        bias: Var,
        width: usize,
        padded: Vec<R>,
    },
    MaxPool { input: Var, argmax: Vec<usize> },
    MeanPool { input: Var },
    Concat(Vec<Var>),
    MatVec { weight: Var, x: Var },
    Affine { weight: Var, bias: Var, x: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Slice { input: Var, start: usize },
    Pick { input: Var, index: usize },
    Huber(Var),
    SumAll(Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node<'p, R: Real> {
    value: Cow<'p, Tensor<R>>,
    op: Op<R>,
}

/// Linear record of a forward computation.
#[derive(Debug)]
pub struct Tape<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<'p, R>>,
    param_vars: Vec<Option<Var>>,
    conv_filter_grad_fault: Option<R>,
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch(msg.into())
}

/// Smooth L1 with the transition at `|x| = 1`.
pub fn huber<R: Real>(x: R) -> R {
    let half = R::from_f64_lossy(0.5);
    if x.abs() <= R::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// Derivative of [`huber`].
pub fn huber_grad<R: Real>(x: R) -> R {
    x.max(-R::one()).min(R::one())
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            conv_filter_grad_fault: None,
        }
    }

    /// Scale every convolution filter gradient by `factor`.
    ///
    /// Only useful for checking that the gradient checker catches a broken
    /// backward pass.
    #[doc(hidden)]
    pub fn inject_conv_filter_grad_fault(&mut self, factor: R) {
        self.conv_filter_grad_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Parameter as a tape value. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let params = self.params;
        self.nodes.push(Node {
            value: Cow::Borrowed(params.get(id)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Constant)
    }

    /// Rows `ids` of a `V x D` table, stacked into `L x D`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err(format!("gather needs a matrix, got {:?}", t.shape())));
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, len: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row `row` of a matrix, as a vector.
    pub fn row(&mut self, input: Var, row: usize) -> Result<Var, NumericsError> {
        let t = self.value(input);
        if t.rank() != 2 {
            return Err(shape_err(format!("row needs a matrix, got {:?}", t.shape())));
        }
        if row >= t.shape()[0] {
            return Err(NumericsError::IndexOutOfRange {
                index: row,
                len: t.shape()[0],
            });
        }
        let value = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(value, Op::Row { input, row }))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var, NumericsError> {
        self.zip_same(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: R) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    fn unary(&mut self, a: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(R::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn huber(&mut self, a: Var) -> Var {
        self.unary(a, huber, Op::Huber(a))
    }

    /// One-dimensional convolution over the token axis.
    ///
    /// `input` is `L x D`, `filters` is `K x k x D`, `bias` is `K`. The input
    /// is left-padded with `k - 1` copies of the `pad` row so the `K x L`
    /// output has one column per token; column `t` sees tokens `t-k+1..=t`.
    pub fn conv1d(&mut self, input: Var, pad: Var, filters: Var, bias: Var) -> Result<Var, NumericsError> {
        let x = self.value(input);
        let s = self.value(pad);
        let w = self.value(filters);
        let b = self.value(bias);
        if x.rank() != 2 {
            return Err(shape_err(format!("conv1d input must be L x D, got {:?}", x.shape())));
        }
        let (len, dim) = (x.shape()[0], x.shape()[1]);
        if len == 0 {
            return Err(NumericsError::EmptyInput);
        }
        if w.rank() != 3 || w.shape()[2] != dim {
            return Err(shape_err(format!(
                "conv1d filters must be K x k x {dim}, got {:?}",
                w.shape()
            )));
        }
        let (nf, width) = (w.shape()[0], w.shape()[1]);
        if width == 0 || nf == 0 {
            return Err(shape_err("conv1d needs at least one filter of width >= 1"));
        }
        if s.len() != dim || s.rank() != 1 {
            return Err(shape_err(format!("conv1d pad row must have {dim} entries")));
        }
        if b.shape() != [nf] {
            return Err(shape_err(format!("conv1d bias must be [{nf}], got {:?}", b.shape())));
        }

        let padded_len = len + width - 1;
        let mut padded = Vec::with_capacity(padded_len * dim);
        for _ in 0..width - 1 {
            padded.extend_from_slice(s.data());
        }
        padded.extend_from_slice(x.data());

        let cols = nf * width;
        let mut z = vec![R::zero(); padded_len * cols];
        R::gemm(
            padded_len,
            dim,
            cols,
            R::one(),
            (&padded, dim as isize, 1),
            (w.data(), 1, dim as isize),
            R::zero(),
            (&mut z, cols as isize, 1),
        );
        let mut out = vec![R::zero(); nf * len];
        for f in 0..nf {
            let bf = b.data()[f];
            let row = &mut out[f * len..(f + 1) * len];
            for (t, o) in row.iter_mut().enumerate() {
                let mut acc = bf;
                for j in 0..width {
                    acc += z[(t + j) * cols + f * width + j];
                }
                *o = acc;
            }
        }
        let value = Tensor::new(vec![nf, len], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                pad,
                filters,
                bias,
                width,
                padded,
            },
        ))
    }

    /// Max over the last axis of a `K x L` matrix; ties go to the earliest column.
    pub fn max_pool(&mut self, input: Var) -> Result<Var, NumericsError> {
        let x = self.value(input);
        if x.rank() != 2 || x.shape()[1] == 0 {
            return Err(shape_err(format!("max_pool needs K x L with L >= 1, got {:?}", x.shape())));
        }
        let (rows, len) = (x.shape()[0], x.shape()[1]);
        let mut vals = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * len..(r + 1) * len];
            let mut best = 0;
            for (t, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = t;
                }
            }
            vals.push(row[best]);
            argmax.push(best);
        }
        Ok(self.push(Tensor::vector(vals), Op::MaxPool { input, argmax }))
    }

    /// Argmax columns recorded by a [`Tape::max_pool`] node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn mean_pool(&mut self, input: Var) -> Result<Var, NumericsError> {
        let x = self.value(input);
        if x.rank() != 2 || x.shape()[1] == 0 {
            return Err(shape_err(format!("mean_pool needs K x L with L >= 1, got {:?}", x.shape())));
        }
        let (rows, len) = (x.shape()[0], x.shape()[1]);
        let n = R::from_usize(len).unwrap();
        let vals = (0..rows)
            .map(|r| x.data()[r * len..(r + 1) * len].iter().copied().sum::<R>() / n)
            .collect();
        Ok(self.push(Tensor::vector(vals), Op::MeanPool { input }))
    }

    /// Flattened concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    fn check_matvec(&self, weight: Var, x: Var) -> Result<(usize, usize), NumericsError> {
        let w = self.value(weight);
        let v = self.value(x);
        if w.rank() != 2 || w.shape()[1] != v.len() {
            return Err(shape_err(format!(
                "matvec: weight {:?} vs input of {} entries",
                w.shape(),
                v.len()
            )));
        }
        Ok((w.shape()[0], w.shape()[1]))
    }

    fn matvec_value(&self, weight: Var, x: Var, rows: usize, cols: usize) -> Vec<R> {
        let w = self.value(weight).data();
        let v = self.value(x).data();
        (0..rows)
            .map(|r| {
                w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn matvec(&mut self, weight: Var, x: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.check_matvec(weight, x)?;
        let out = self.matvec_value(weight, x, rows, cols);
        Ok(self.push(Tensor::vector(out), Op::MatVec { weight, x }))
    }

    /// `weight * x + bias`.
    pub fn affine(&mut self, weight: Var, bias: Var, x: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.check_matvec(weight, x)?;
        if self.value(bias).len() != rows {
            return Err(shape_err(format!(
                "affine: bias has {} entries, expected {rows}",
                self.value(bias).len()
            )));
        }
        let mut out = self.matvec_value(weight, x, rows, cols);
        for (o, &b) in out.iter_mut().zip(self.value(bias).data()) {
            *o += b;
        }
        Ok(self.push(Tensor::vector(out), Op::Affine { weight, bias, x }))
    }

    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let x = self.value(input);
        if start + len > x.len() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: x.len(),
            });
        }
        let value = Tensor::vector(x.data()[start..start + len].to_vec());
        Ok(self.push(value, Op::Slice { input, start }))
    }

    /// Single element, as a scalar.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var, NumericsError> {
        let x = self.value(input);
        if index >= x.len() {
            return Err(NumericsError::IndexOutOfRange { index, len: x.len() });
        }
        let value = Tensor::scalar(x.data()[index]);
        Ok(self.push(value, Op::Pick { input, index }))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(input))
    }

    /// Element-wise sum of equally shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput)?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            self.zip_same(first, p, "sum")?;
            acc.add_assign(self.value(p));
        }
        Ok(self.push(acc, Op::Sum(parts.to_vec())))
    }

    /// Gradients of the scalar `output` with respect to every recorded value.
    pub fn backward(&self, output: Var) -> Result<Gradients<R>, NumericsError> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(NumericsError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros(out.shape());
        seed.data_mut()[0] = R::one();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Gather { table, ids } => {
                let dim = self.value(*table).shape()[1];
                let acc = slot(grads, *table, self.value(*table).shape());
                let data = acc.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut data[id * dim..(id + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(&gd[r * dim..(r + 1) * dim]) {
                        *d += s;
                    }
                }
            }
            Op::Row { input, row } => {
                let dim = self.value(*input).shape()[1];
                let acc = slot(grads, *input, self.value(*input).shape());
                for (d, &s) in acc.data_mut()[row * dim..(row + 1) * dim].iter_mut().zip(gd) {
                    *d += s;
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, &g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(g.shape().to_vec(), gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect())?;
                let gb = Tensor::new(g.shape().to_vec(), gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect())?;
                add_into(grads, *a, &ga);
                add_into(grads, *b, &gb);
            }
            Op::Scale(a, k) => add_into(grads, *a, &g.map(|x| x * *k)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(x.data()).map(|(&d, &v)| if v > R::zero() { d } else { R::zero() }).collect(),
                )?;
                add_into(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(y.data()).map(|(&d, &s)| d * s * (R::one() - s)).collect(),
                )?;
                add_into(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(y.data()).map(|(&d, &t)| d * (R::one() - t * t)).collect(),
                )?;
                add_into(grads, *a, &ga);
            }
            Op::Huber(a) => {
                let x = self.value(*a);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(x.data()).map(|(&d, &v)| d * huber_grad(v)).collect(),
                )?;
                add_into(grads, *a, &ga);
            }
            Op::Conv1d {
                input,
                pad,
                filters,
                bias,
                width,
                padded,
            } => self.conv1d_backward(gd, *input, *pad, *filters, *bias, *width, padded, grads),
            Op::MaxPool { input, argmax } => {
                let len = self.value(*input).shape()[1];
                let acc = slot(grads, *input, self.value(*input).shape());
                for (r, (&t, &d)) in argmax.iter().zip(gd).enumerate() {
                    acc.data_mut()[r * len + t] += d;
                }
            }
            Op::MeanPool { input } => {
                let len = self.value(*input).shape()[1];
                let n = R::from_usize(len).unwrap();
                let acc = slot(grads, *input, self.value(*input).shape());
                for (r, &d) in gd.iter().enumerate() {
                    for v in &mut acc.data_mut()[r * len..(r + 1) * len] {
                        *v += d / n;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    let piece = Tensor::new(shape, gd[off..off + n].to_vec())?;
                    add_into(grads, p, &piece);
                    off += n;
                }
            }
            Op::MatVec { weight, x } | Op::Affine { weight, x, .. } => {
                let (w, v) = (self.value(*weight), self.value(*x));
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                {
                    let acc = slot(grads, *weight, w.shape());
                    let data = acc.data_mut();
                    for r in 0..rows {
                        let gr = gd[r];
                        if gr == R::zero() {
                            continue;
                        }
                        for (d, &xv) in data[r * cols..(r + 1) * cols].iter_mut().zip(v.data()) {
                            *d += gr * xv;
                        }
                    }
                }
                let acc = slot(grads, *x, v.shape());
                let data = acc.data_mut();
                for (wrow, &gr) in w.data().chunks_exact(cols.max(1)).zip(&gd[..rows]) {
                    if gr == R::zero() {
                        continue;
                    }
                    for (d, &wv) in data.iter_mut().zip(wrow) {
                        *d += gr * wv;
                    }
                }
                if let Op::Affine { bias, .. } = &node.op {
                    add_into(grads, *bias, g);
                }
            }
            Op::Slice { input, start } => {
                let acc = slot(grads, *input, self.value(*input).shape());
                for (d, &s) in acc.data_mut()[*start..*start + gd.len()].iter_mut().zip(gd) {
                    *d += s;
                }
            }
            Op::Pick { input, index } => {
                let acc = slot(grads, *input, self.value(*input).shape());
                acc.data_mut()[*index] += gd[0];
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let acc = slot(grads, *a, x.shape());
                for d in acc.data_mut() {
                    *d += gd[0];
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    add_into(grads, p, g);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        gd: &[R],
        input: Var,
        pad: Var,
        filters: Var,
        bias: Var,
        width: usize,
        padded: &[R],
        grads: &mut [Option<Tensor<R>>],
    ) {
        let w = self.value(filters);
        let (nf, dim) = (w.shape()[0], w.shape()[2]);
        let len = self.value(input).shape()[0];
        let padded_len = len + width - 1;
        let cols = nf * width;

        let mut dbias = vec![R::zero(); nf];
        let mut nonzero = 0usize;
        for f in 0..nf {
            for &d in &gd[f * len..(f + 1) * len] {
                dbias[f] += d;
                if d != R::zero() {
                    nonzero += 1;
                }
            }
        }

        let mut dfilters = vec![R::zero(); nf * width * dim];
        let mut dpadded = vec![R::zero(); padded_len * dim];
        if nonzero * 4 <= nf * len {
            // Max pooling leaves one nonzero per filter; skip the dense products.
            let wd = w.data();
            for f in 0..nf {
                for t in 0..len {
                    let g = gd[f * len + t];
                    if g == R::zero() {
                        continue;
                    }
                    for j in 0..width {
                        let r = t + j;
                        let c = f * width + j;
                        let xrow = &padded[r * dim..(r + 1) * dim];
                        let wrow = &wd[c * dim..(c + 1) * dim];
                        for ((df, dx), (&x, &wv)) in dfilters[c * dim..(c + 1) * dim]
                            .iter_mut()
                            .zip(&mut dpadded[r * dim..(r + 1) * dim])
                            .zip(xrow.iter().zip(wrow))
                        {
                            *df += g * x;
                            *dx += g * wv;
                        }
                    }
                }
            }
        } else {
            let mut dz = vec![R::zero(); padded_len * cols];
            for f in 0..nf {
                for t in 0..len {
                    let g = gd[f * len + t];
                    for j in 0..width {
                        dz[(t + j) * cols + f * width + j] = g;
                    }
                }
            }
            R::gemm(
                cols,
                padded_len,
                dim,
                R::one(),
                (&dz, 1, cols as isize),
                (padded, dim as isize, 1),
                R::zero(),
                (&mut dfilters, dim as isize, 1),
            );
            R::gemm(
                padded_len,
                cols,
                dim,
                R::one(),
                (&dz, cols as isize, 1),
                (w.data(), dim as isize, 1),
                R::zero(),
                (&mut dpadded, dim as isize, 1),
            );
        }
        if let Some(k) = self.conv_filter_grad_fault {
            for d in &mut dfilters {
                *d *= k;
            }
        }

        let dpad: Vec<R> = (0..dim)
            .map(|d| (0..width - 1).map(|r| dpadded[r * dim + d]).sum())
            .collect();
        let dinput = dpadded[(width - 1) * dim..].to_vec();

        add_into(grads, bias, &Tensor::vector(dbias));
        add_into(grads, pad, &Tensor::vector(dpad));
        add_slice_into(grads, filters, w.shape(), &dfilters);
        add_slice_into(grads, input, self.value(input).shape(), &dinput);
    }
}

fn slot<'g, R: Real>(grads: &'g mut [Option<Tensor<R>>], v: Var, shape: &[usize]) -> &'g mut Tensor<R> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: &Tensor<R>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        none => *none = Some(g.clone()),
    }
}

fn add_slice_into<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, shape: &[usize], g: &[R]) {
    let acc = slot(grads, v, shape);
    for (a, &b) in acc.data_mut().iter_mut().zip(g) {
        *a += b;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    param_vars: Vec<Option<Var>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient with respect to a recorded value; `None` if it did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.param_vars[id.0].and_then(|v| self.wrt(v))
    }

    pub fn into_param_grads(mut self) -> ParamGrads<R> {
        let grads = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| self.grads[v.0].take()))
            .collect();
        ParamGrads::from_vec(grads)
    }
}
