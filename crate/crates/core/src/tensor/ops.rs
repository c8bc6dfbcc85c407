use super::{add_into, gemm, numel, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Unary elementwise functions with a registered derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Neg,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Square,
    /// `0.5 d²` for `|d| < 1`, `|d| − 0.5` otherwise.
    SmoothL1,
    /// `x^p`; requires `x > 0` unless `p` is a non-negative integer.
    Powf(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
}

impl Elementwise {
    fn name(self) -> &'static str {
        match self {
            Elementwise::Neg => "neg",
            Elementwise::Relu => "relu",
            Elementwise::LeakyRelu(_) => "leaky_relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::Square => "square",
            Elementwise::SmoothL1 => "smooth_l1",
            Elementwise::Powf(_) => "powf",
            Elementwise::Clamp(..) => "clamp",
            Elementwise::Scale(_) => "scale",
            Elementwise::AddScalar(_) => "add_scalar",
        }
    }

    fn check_domain<T: Real>(self, xs: &[T]) -> Result<()> {
        let bad = match self {
            Elementwise::Log => xs.iter().position(|&x| !(x > T::zero())),
            Elementwise::Powf(p) if !(p >= 0.0 && p.fract() == 0.0) => {
                xs.iter().position(|&x| !(x > T::zero()))
            }
            _ => None,
        };
        match bad {
            Some(i) => Err(Error::Domain {
                op: self.name(),
                detail: format!("input[{i}] = {} outside the domain", xs[i]),
            }),
            None => Ok(()),
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Elementwise::Neg => -x,
            Elementwise::Relu => {
                if x < T::zero() {
                    T::zero()
                } else {
                    x
                }
            }
            Elementwise::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(s)
                }
            }
            Elementwise::Sigmoid => sigmoid(x),
            Elementwise::Exp => x.exp(),
            Elementwise::Log => x.ln(),
            Elementwise::Square => x * x,
            Elementwise::SmoothL1 => {
                let a = x.abs();
                if a < T::one() {
                    T::of(0.5) * x * x
                } else {
                    a - T::of(0.5)
                }
            }
            Elementwise::Powf(p) => x.powf(T::of(p)),
            Elementwise::Clamp(lo, hi) => {
                if x < T::of(lo) {
                    T::of(lo)
                } else if x > T::of(hi) {
                    T::of(hi)
                } else {
                    x
                }
            }
            Elementwise::Scale(s) => x * T::of(s),
            Elementwise::AddScalar(s) => x + T::of(s),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Elementwise::Neg => -T::one(),
            Elementwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(s)
                }
            }
            Elementwise::Sigmoid => y * (T::one() - y),
            Elementwise::Exp => y,
            Elementwise::Log => T::one() / x,
            Elementwise::Square => T::of(2.0) * x,
            Elementwise::SmoothL1 => {
                if x.abs() < T::one() {
                    x
                } else {
                    x.signum()
                }
            }
            Elementwise::Powf(p) => {
                if p == 0.0 {
                    T::zero()
                } else {
                    T::of(p) * x.powf(T::of(p - 1.0))
                }
            }
            Elementwise::Clamp(lo, hi) => {
                if x >= T::of(lo) && x <= T::of(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::Scale(s) => T::of(s),
            Elementwise::AddScalar(_) => T::one(),
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// `(outer, dim, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn map(&self, f: Elementwise) -> Result<Self> {
        f.check_domain(self.values())?;
        let data: Vec<T> = self.values().iter().map(|&x| f.apply(x)).collect();
        Ok(Tensor::from_op(
            f.name(),
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out, g, parents| {
                let x = parents[0].values();
                let gx = x
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&x, &y), &g)| g * f.derivative(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    pub fn relu(&self) -> Self {
        self.map(Elementwise::Relu).expect("relu is total")
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        self.map(Elementwise::LeakyRelu(slope)).expect("leaky relu is total")
    }

    pub fn sigmoid(&self) -> Self {
        self.map(Elementwise::Sigmoid).expect("sigmoid is total")
    }

    pub fn exp(&self) -> Self {
        self.map(Elementwise::Exp).expect("exp is total")
    }

    pub fn log(&self) -> Result<Self> {
        self.map(Elementwise::Log)
    }

    pub fn square(&self) -> Self {
        self.map(Elementwise::Square).expect("square is total")
    }

    pub fn neg(&self) -> Self {
        self.map(Elementwise::Neg).expect("neg is total")
    }

    pub fn smooth_l1(&self) -> Self {
        self.map(Elementwise::SmoothL1).expect("smooth l1 is total")
    }

    pub fn powf(&self, p: f64) -> Result<Self> {
        self.map(Elementwise::Powf(p))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(Elementwise::Clamp(lo, hi)).expect("clamp is total")
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(Elementwise::Scale(s)).expect("scale is total")
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(Elementwise::AddScalar(s)).expect("add_scalar is total")
    }

    fn binary(&self, other: &Self, kind: Binary, name: &'static str) -> Result<Self> {
        let (a, b) = (self, other);
        let shape = if a.shape() == b.shape() || b.numel() == 1 {
            a.shape().to_vec()
        } else if a.numel() == 1 {
            b.shape().to_vec()
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        };
        let n = numel(&shape);
        let av = |i: usize| if a.numel() == 1 { a.values()[0] } else { a.values()[i] };
        let bv = |i: usize| if b.numel() == 1 { b.values()[0] } else { b.values()[i] };
        let data: Vec<T> = (0..n)
            .map(|i| match kind {
                Binary::Add => av(i) + bv(i),
                Binary::Sub => av(i) - bv(i),
                Binary::Mul => av(i) * bv(i),
            })
            .collect();
        Ok(Tensor::from_op(
            name,
            shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |_, g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let reduce = |full: Vec<T>, target: &Tensor<T>| -> Vec<T> {
                    if target.numel() == 1 && full.len() != 1 {
                        vec![full.iter().copied().sum()]
                    } else {
                        full
                    }
                };
                let at = |t: &Tensor<T>, i: usize| {
                    if t.numel() == 1 {
                        t.values()[0]
                    } else {
                        t.values()[i]
                    }
                };
                let ga = a.requires_grad().then(|| {
                    let full: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &g)| g * at(b, i)).collect(),
                    };
                    reduce(full, a)
                });
                let gb = b.requires_grad().then(|| {
                    let full: Vec<T> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&g| -g).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &g)| g * at(a, i)).collect(),
                    };
                    reduce(full, b)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Mul, "mul")
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self, other);
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(a.values(), m, k),
            MatRef::new(b.values(), k, n),
            &mut out,
            false,
        );
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |_, g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        MatRef::new(g, m, n),
                        MatRef::transposed(b.values(), n, k),
                        &mut ga,
                        false,
                    );
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        MatRef::transposed(a.values(), k, m),
                        MatRef::new(g, m, n),
                        &mut gb,
                        false,
                    );
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Softmax over the last axis of a 2-D tensor, with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::shape("softmax_rows", format!("{:?} is not 2-D", self.shape())));
        }
        if let Some(i) = self.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "softmax_rows",
                detail: format!("non-finite input at {i}"),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let mut out = Vec::with_capacity(r * c);
        for row in self.values().chunks(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - m).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        Ok(Tensor::from_op(
            "softmax_rows",
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut gx = vec![T::zero(); r * c];
                for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((o, &y), &g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(|_, g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.ndim() {
            return Err(Error::shape("concat", format!("axis {axis} for {:?}", first.shape())));
        }
        for p in parts {
            let compatible = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, total, inner) = split_axis(&shape, axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.values()[o * w..(o + 1) * w]);
            }
        }
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |_, g, parents| {
                let row = total * inner;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parents.len());
                for (p, &w) in parents.iter().zip(&widths) {
                    grads.push(p.requires_grad().then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + w]);
                        }
                        gp
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.values()[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows of a 2-D tensor picked by index; repeated indices are allowed.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let (r, c) = match self.shape() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("select_rows", format!("expected a matrix, got {s:?}"))),
        };
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("select_rows", format!("indices {rows:?} for {r} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&self.values()[i * c..(i + 1) * c]);
        }
        let rows = rows.to_vec();
        Ok(Tensor::from_op(
            "select_rows",
            vec![rows.len(), c],
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); r * c];
                for (o, &i) in rows.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &g[o * c..(o + 1) * c]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{axes:?} for {:?}", self.shape())));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let index_map = permutation_index(&in_shape, axes);
        let data: Vec<T> = index_map.iter().map(|&i| self.values()[i]).collect();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); g.len()];
                for (o, &i) in index_map.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Self {
        let total: T = self.values().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Self {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sum over one axis (removed from the shape; a 1-D input gives shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {:?}", self.shape())));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut data = vec![T::zero(); outer * inner];
        let x = self.values();
        for o in 0..outer {
            for d in 0..dim {
                let src = &x[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                add_slice(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        gx[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let dim = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} for {:?}", self.shape())))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / dim as f64))
    }
}

fn add_slice<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// For every output position of a permutation, the flat input index it reads.
fn permutation_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = in_shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(in_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}
