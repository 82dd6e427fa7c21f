//! Fully connected building blocks over [`ParamSet`] storage.
//!
//! Inputs are row-batched: `[n x in] -> [n x out]`. Backward passes accumulate
//! into the parameter gradients and return the input gradient.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamSet};
use crate::synth::rng_for;
use crate::tensor::{self, Tensor};

/// FNV-1a, used to give every parameter its own initialization stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// `uniform(-s, s)` with `s = 1 / sqrt(fan_in)`, seeded by `(seed, name)` so a
/// parameter's initial value does not depend on which other parameters exist.
pub fn init_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng_for(seed, name_hash(name));
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-s..s)).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weight `[in x out]`, bias `[1 x out]`.
    pub fn new(params: &mut ParamSet, seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let weight = params.insert(&wname, init_uniform(seed, &wname, &[fan_in, fan_out], fan_in)?)?;
        let bias = params.insert(&bname, init_uniform(seed, &bname, &[1, fan_out], fan_in)?)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        tensor::add(&tensor::matmul(x, params.value(self.weight))?, params.value(self.bias))
    }

    pub fn backward(&self, params: &mut ParamSet, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (dx, dw) = tensor::matmul_backward(x, params.value(self.weight), grad_out)?;
        let db = column_sums(grad_out)?;
        params.accumulate(self.weight, &dw)?;
        params.accumulate(self.bias, &db)?;
        Ok(dx)
    }
}

fn column_sums(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::new(vec![1, d], out)
}

/// `Linear -> relu -> Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

/// Forward intermediates of an [`Mlp2`].
#[derive(Clone, Debug)]
pub struct Mlp2Cache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl Mlp2 {
    pub fn new(params: &mut ParamSet, seed: u64, name: &str, fan_in: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Mlp2 {
            first: Linear::new(params, seed, &format!("{name}.0"), fan_in, hidden)?,
            second: Linear::new(params, seed, &format!("{name}.1"), hidden, out)?,
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Mlp2Cache)> {
        let pre = self.first.forward(params, x)?;
        let hidden = tensor::relu(&pre);
        let out = self.second.forward(params, &hidden)?;
        Ok((
            out,
            Mlp2Cache {
                input: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, params: &mut ParamSet, cache: &Mlp2Cache, grad_out: &Tensor) -> Result<Tensor> {
        let dh = self.second.backward(params, &cache.hidden, grad_out)?;
        let dpre = tensor::relu_backward(&cache.pre, &dh)?;
        self.first.backward(params, &cache.input, &dpre)
    }
}

/// Copies column block `[start, start + width)` out of a row-major matrix.
pub(crate) fn column_block(x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let rows: Vec<f64> = (0..n)
        .flat_map(|r| x.row_slice(r)[start..start + width].iter().copied())
        .collect();
    Tensor::new(vec![n, width], rows)
}

/// Concatenates matrices with equal row counts along the columns.
pub(crate) fn concat_columns(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts[0].dims2()?.0;
    let mut width = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != n {
            return Err(crate::error::Error::Shape("concat_columns row mismatch".into()));
        }
        width += c;
    }
    let mut data = Vec::with_capacity(n * width);
    for r in 0..n {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    Tensor::new(vec![n, width], data)
}
