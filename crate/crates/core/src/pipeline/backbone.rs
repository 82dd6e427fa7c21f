//! Three stride-2 3x3 convolutions: `[3, H, W] -> [C, H/8, W/8]`.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::layers::init_uniform;
use crate::tensor::{self, Tensor};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Output side of one convolution.
fn out_side(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Unfolds `x` into `[C*9, Ho*Wo]` patch columns.
fn im2col(x: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (c, h, w) = dims3(x)?;
    let (ho, wo) = (out_side(h), out_side(w));
    let cols = ho * wo;
    let mut out = vec![0.0; c * KERNEL * KERNEL * cols];
    let data = x.data();
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = data[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![c * KERNEL * KERNEL, cols], out)?, ho, wo))
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (ho, wo) = (out_side(h), out_side(w));
    let n = ho * wo;
    let mut out = vec![0.0; c * h * w];
    let src = cols.data();
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let s = &src[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < w as isize {
                            out[(ch * h + iy as usize) * w + ix as usize] += s[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    /// `[out, in * 9]`
    pub weight: ParamId,
    /// `[out, 1]`
    pub bias: ParamId,
    pub relu: bool,
}

#[derive(Clone, Debug)]
struct ConvCache {
    input_shape: (usize, usize, usize),
    cols: Tensor,
    pre: Tensor,
}

impl Conv {
    fn new(params: &mut ParamSet, seed: u64, name: &str, cin: usize, cout: usize, relu: bool) -> Result<Self> {
        let fan_in = cin * KERNEL * KERNEL;
        let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
        let weight = params.insert(&wn, init_uniform(seed, &wn, &[cout, fan_in], fan_in)?)?;
        let bias = params.insert(&bn, init_uniform(seed, &bn, &[cout, 1], fan_in)?)?;
        Ok(Conv { weight, bias, relu })
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let input_shape = dims3(x)?;
        let (cols, ho, wo) = im2col(x)?;
        let pre = tensor::add(&tensor::matmul(params.value(self.weight), &cols)?, params.value(self.bias))?;
        let out = if self.relu { tensor::relu(&pre) } else { pre.clone() };
        let cout = pre.dims2()?.0;
        Ok((out.reshape(vec![cout, ho, wo])?, ConvCache { input_shape, cols, pre }))
    }

    fn backward(&self, params: &mut ParamSet, cache: &ConvCache, grad_out: &Tensor) -> Result<Tensor> {
        let g = grad_out.clone().reshape(cache.pre.shape().to_vec())?;
        let g = if self.relu { tensor::relu_backward(&cache.pre, &g)? } else { g };
        let (cout, n) = g.dims2()?;
        let db: Vec<f64> = (0..cout).map(|r| g.data()[r * n..(r + 1) * n].iter().sum()).collect();
        params.accumulate(self.weight, &tensor::matmul_nt(&g, &cache.cols)?)?;
        params.accumulate(self.bias, &Tensor::new(vec![cout, 1], db)?)?;
        let dcols = tensor::matmul_tn(params.value(self.weight), &g)?;
        let (c, h, w) = cache.input_shape;
        col2im(&dcols, c, h, w)
    }
}

/// Convolution stack; every layer but the last is followed by a ReLU.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub layers: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    layers: Vec<ConvCache>,
}

impl Backbone {
    pub fn new(params: &mut ParamSet, seed: u64, channels: &[usize]) -> Result<Self> {
        let mut cin = 3;
        let mut layers = Vec::with_capacity(channels.len());
        for (k, &cout) in channels.iter().enumerate() {
            let relu = k + 1 < channels.len();
            layers.push(Conv::new(params, seed, &format!("backbone.conv{}", k + 1), cin, cout, relu)?);
            cin = cout;
        }
        Ok(Backbone { layers })
    }

    /// Total downsampling factor.
    pub fn stride(&self) -> usize {
        STRIDE.pow(self.layers.len() as u32)
    }

    pub fn forward(&self, params: &ParamSet, image: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let (c, h, w) = dims3(image)?;
        let s = self.stride();
        if c != 3 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "backbone input must be [3, H, W] with H, W divisible by {s}, got {:?}",
                image.shape()
            )));
        }
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(params, &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, BackboneCache { layers: caches }))
    }

    /// Returns the gradient on the image.
    pub fn backward(&self, params: &mut ParamSet, cache: &BackboneCache, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            g = layer.backward(params, c, &g)?;
        }
        Ok(g)
    }
}
