//! Dense row-major `f64` tensors and the handful of differentiable operations
//! the pipeline is built from.
//!
//! Every operation comes as a forward function plus an explicit `*_backward`
//! companion. There is no tape: callers keep whatever forward values the
//! backward pass needs and chain the companions by hand.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches, zero-sized axes and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized axis in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    /// Row vector `[1 x n]`.
    pub fn row(values: &[f64]) -> Result<Self> {
        Self::new(vec![1, values.len()], values.to_vec())
    }

    /// Stacks equal-length rows into an `[n x d]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![n, d], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Finiteness is re-checked by the next operation
    /// that consumes the tensor.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().expect("row_slice on a scalar");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// `self += other`, shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign {:?} += {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn checked(self, context: &str) -> Result<Self> {
        self.ensure_finite(context)?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

/// Per-axis strides into `b` when it is broadcast against `a_shape`; a zero
/// stride marks a broadcast axis.
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if b_shape.is_empty() {
        return Ok(vec![0; a_shape.len()]);
    }
    if a_shape.len() != b_shape.len() {
        return Err(Error::Shape(format!(
            "cannot broadcast {b_shape:?} to {a_shape:?} (ranks differ)"
        )));
    }
    let mut strides = vec![0; b_shape.len()];
    let mut acc = 1;
    for axis in (0..b_shape.len()).rev() {
        if b_shape[axis] == a_shape[axis] {
            strides[axis] = acc;
        } else if b_shape[axis] != 1 {
            return Err(Error::Shape(format!(
                "cannot broadcast {b_shape:?} to {a_shape:?}"
            )));
        }
        acc *= b_shape[axis];
    }
    Ok(strides)
}

/// For every flat index of `a_shape`, the flat index into the broadcast operand.
fn broadcast_index_map(a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    let strides = broadcast_strides(a_shape, b_shape)?;
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for axis in (0..a_shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < a_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Ok(map)
}

/// `a op b` where `b` has the shape of `a`, size-1 axes, or is a rank-0 scalar.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let map = broadcast_index_map(&a.shape, &b.shape)?;
    let data = a
        .data
        .iter()
        .zip(&map)
        .map(|(&x, &j)| {
            let y = b.data[j];
            match op {
                ElementwiseOp::Add => x + y,
                ElementwiseOp::Sub => x - y,
                ElementwiseOp::Mul => x * y,
            }
        })
        .collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
    .checked("elementwise")
}

/// Gradients of `elementwise` w.r.t. both operands; the `b` gradient is summed
/// over its broadcast axes.
pub fn elementwise_backward(
    op: ElementwiseOp,
    a: &Tensor,
    b: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if grad_out.shape != a.shape {
        return Err(Error::Shape("elementwise_backward: grad shape".into()));
    }
    let map = broadcast_index_map(&a.shape, &b.shape)?;
    let mut ga = grad_out.clone();
    let mut gb = Tensor::zeros_like(b);
    for (i, &j) in map.iter().enumerate() {
        let g = grad_out.data[i];
        match op {
            ElementwiseOp::Add => gb.data[j] += g,
            ElementwiseOp::Sub => gb.data[j] -= g,
            ElementwiseOp::Mul => {
                ga.data[i] = g * b.data[j];
                gb.data[j] += g * a.data[i];
            }
        }
    }
    Ok((ga, gb))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(ElementwiseOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(ElementwiseOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(ElementwiseOp::Mul, a, b)
}

/// `[m x k] . [k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
    .checked("matmul")
}

/// `a^T . b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_tn {:?}^T x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
    .checked("matmul_tn")
}

/// `a . b^T` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt {:?} x {:?}^T",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
    .checked("matmul_nt")
}

/// Returns `(dA, dB) = (dC . B^T, A^T . dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(grad_out, b)?, matmul_tn(a, grad_out)?))
}

/// Max-subtracted softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    let d = *x
        .shape
        .last()
        .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Takes the softmax *output*.
pub fn softmax_lastdim_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if y.shape != grad_out.shape {
        return Err(Error::Shape("softmax_backward".into()));
    }
    let d = *y.shape.last().expect("softmax of a scalar");
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out
        .chunks_mut(d)
        .zip(y.data.chunks(d))
        .zip(grad_out.data.chunks(d))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Ok(Tensor {
        shape: y.shape.clone(),
        data: out,
    })
}

/// Largest value strictly below 1.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the open interval in floating point too
    y.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("sigmoid input")?;
    Ok(x.map(sigmoid_scalar))
}

/// Takes the sigmoid *output*.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if y.shape != grad_out.shape {
        return Err(Error::Shape("sigmoid_backward".into()));
    }
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Ok(Tensor {
        shape: y.shape.clone(),
        data,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Takes the relu *input*; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape != grad_out.shape {
        return Err(Error::Shape("relu_backward".into()));
    }
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Loss together with its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let probs = softmax_lastdim(logits)?;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.data[r * k + label] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    for g in &mut grad.data {
        *g *= scale;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok((loss, grad))
}
