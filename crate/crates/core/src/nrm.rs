//! Layout-oriented normalization and restitution.
//!
//! The backbone feature map is instance-normalized per channel, which strips
//! channel-wise affine shifts (the bulk of what a corruption does to
//! low-level statistics). The removed residual is then partially added back,
//! weighted by a spatial mask derived from where the objects are: each grid
//! cell attends over the objects with weights `softmax_j(-|p - e_j|^2)`, and
//! the mask is the per-cell maximum of those weights.
//!
//! The layout is a non-differentiable input; gradients flow only to the
//! feature map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SceneRecord;
use crate::tensor::{self, Tensor};

/// `C x H x W` tensor.
pub type FeatureMap = Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Distance to the object's centroid.
    #[default]
    Centroid,
    /// Distance to the nearest point of the object's box (zero inside).
    Bbox,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(AttentionMode::Centroid),
            "bbox" => Ok(AttentionMode::Bbox),
            _ => Err(Error::Parse(format!("unknown attention mode `{s}`"))),
        }
    }
}

/// Object boxes and centroids in normalized `[0, 1]` image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    boxes: Vec<[f64; 4]>,
    centroids: Vec<[f64; 2]>,
}

impl Layout {
    pub fn new(boxes: Vec<[f64; 4]>) -> Result<Self> {
        for b in &boxes {
            let in_unit = b.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || b[0] >= b[2] || b[1] >= b[3] {
                return Err(Error::InvalidConfig(format!("layout box {b:?} is not a valid normalized box")));
            }
        }
        let centroids = boxes
            .iter()
            .map(|b| [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0])
            .collect();
        Ok(Layout { boxes, centroids })
    }

    pub fn from_scene(scene: &SceneRecord) -> Result<Self> {
        Self::new(scene.normalized_boxes())
    }

    pub fn boxes(&self) -> &[[f64; 4]] {
        &self.boxes
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `(H*W) x N`, row `m*W + l` is grid cell `(m, l)`.
    pub weights: Tensor,
    /// `H x W`, per-cell maximum of `weights`.
    pub mask: Tensor,
}

/// Result of instance normalization; keeps what the backward pass needs.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub normalized: FeatureMap,
    pub residual: FeatureMap,
    inv_std: Vec<f64>,
}

fn dims3(f: &Tensor) -> Result<(usize, usize, usize)> {
    match f.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Shape(format!("expected C x H x W feature map, got {s:?}"))),
    }
}

/// Per-channel spatial standardization `b = (a - mu) / sqrt(var + eps)` with the
/// biased variance, plus the residual `f - b`.
pub fn instance_normalize(f: &FeatureMap, eps: f64) -> Result<InstanceNorm> {
    let (c, h, w) = dims3(f)?;
    f.ensure_finite("instance_normalize input")?;
    let hw = h * w;
    let mut normalized = vec![0.0; f.len()];
    let mut inv_std = Vec::with_capacity(c);
    for (ch, (src, dst)) in f.data().chunks(hw).zip(normalized.chunks_mut(hw)).enumerate() {
        let mean = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / hw as f64;
        let s = 1.0 / (var + eps).sqrt();
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("channel {ch} inverse std")));
        }
        inv_std.push(s);
        for (d, a) in dst.iter_mut().zip(src) {
            *d = (a - mean) * s;
        }
    }
    let normalized = Tensor::new(vec![c, h, w], normalized)?;
    let residual = tensor::sub(f, &normalized)?;
    Ok(InstanceNorm {
        normalized,
        residual,
        inv_std,
    })
}

impl InstanceNorm {
    /// Gradient w.r.t. the input given a gradient on `normalized`.
    pub fn backward(&self, grad_normalized: &Tensor) -> Result<Tensor> {
        let (_, h, w) = dims3(&self.normalized)?;
        if grad_normalized.shape() != self.normalized.shape() {
            return Err(Error::Shape("instance norm backward".into()));
        }
        let hw = h * w;
        let n = hw as f64;
        let mut out = vec![0.0; self.normalized.len()];
        let chunks = self
            .normalized
            .data()
            .chunks(hw)
            .zip(grad_normalized.data().chunks(hw))
            .zip(out.chunks_mut(hw));
        for (((y, g), dx), &s) in chunks.zip(&self.inv_std) {
            let mean_g = g.iter().sum::<f64>() / n;
            let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
            for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                *d = s * (gi - mean_g - yi * mean_gy);
            }
        }
        Tensor::new(self.normalized.shape().to_vec(), out)
    }
}

fn squared_distance_to_box(x: f64, y: f64, b: &[f64; 4]) -> f64 {
    let dx = (b[0] - x).max(0.0).max(x - b[2]);
    let dy = (b[1] - y).max(0.0).max(y - b[3]);
    dx * dx + dy * dy
}

/// Attention of every grid-cell centre `((l + 0.5) / W, (m + 0.5) / H)` over
/// the layout's objects, and the per-cell max mask.
pub fn layout_attention(layout: &Layout, grid: (usize, usize), mode: AttentionMode) -> Result<AttentionMap> {
    let (h, w) = grid;
    let n = layout.len();
    if n == 0 {
        return Err(Error::EmptyLayout);
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty attention grid".into()));
    }
    let mut logits = Vec::with_capacity(h * w * n);
    for m in 0..h {
        let y = (m as f64 + 0.5) / h as f64;
        for l in 0..w {
            let x = (l as f64 + 0.5) / w as f64;
            for j in 0..n {
                let d2 = match mode {
                    AttentionMode::Centroid => {
                        let [cx, cy] = layout.centroids[j];
                        (x - cx) * (x - cx) + (y - cy) * (y - cy)
                    }
                    AttentionMode::Bbox => squared_distance_to_box(x, y, &layout.boxes[j]),
                };
                logits.push(-d2);
            }
        }
    }
    let weights = tensor::softmax_lastdim(&Tensor::new(vec![h * w, n], logits)?)?;
    let mask = weights
        .data()
        .chunks(n)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(AttentionMap {
        weights,
        mask: Tensor::new(vec![h, w], mask)?,
    })
}

/// `normalized + residual * mask`, the mask broadcast across channels.
pub fn restitute(normalized: &FeatureMap, residual: &FeatureMap, mask: &Tensor) -> Result<FeatureMap> {
    let (_, h, w) = dims3(normalized)?;
    if residual.shape() != normalized.shape() || mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "restitute: normalized {:?}, residual {:?}, mask {:?}",
            normalized.shape(),
            residual.shape(),
            mask.shape()
        )));
    }
    let mask = mask.clone().reshape(vec![1, h, w])?;
    tensor::add(normalized, &tensor::mul(residual, &mask)?)
}

/// Forward values of [`nrm_forward`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NrmOutput {
    pub output: FeatureMap,
    pub norm: InstanceNorm,
    pub attention: AttentionMap,
}

/// Instance normalization, layout attention and restitution in one step.
///
/// The output is evaluated as `mask * f + (1 - mask) * normalized`, which is
/// algebraically `normalized + residual * mask` but reproduces `f` bit-for-bit
/// where the mask is exactly 1 (always the case for a single object).
pub fn nrm_forward(f: &FeatureMap, layout: &Layout, eps: f64, mode: AttentionMode) -> Result<NrmOutput> {
    let (c, h, w) = dims3(f)?;
    let norm = instance_normalize(f, eps)?;
    let attention = layout_attention(layout, (h, w), mode)?;
    let hw = h * w;
    let mask = attention.mask.data();
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            let i = ch * hw + p;
            out[i] = mask[p] * f.data()[i] + (1.0 - mask[p]) * norm.normalized.data()[i];
        }
    }
    Ok(NrmOutput {
        output: Tensor::new(vec![c, h, w], out)?,
        norm,
        attention,
    })
}

impl NrmOutput {
    /// Gradient w.r.t. the input feature map.
    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(&self.output)?;
        let hw = h * w;
        let mask = self.attention.mask.data();
        let mut direct = vec![0.0; c * hw];
        let mut through_norm = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                direct[i] = grad_out.data()[i] * mask[p];
                through_norm[i] = grad_out.data()[i] * (1.0 - mask[p]);
            }
        }
        let mut grad = self.norm.backward(&Tensor::new(vec![c, h, w], through_norm)?)?;
        grad.add_assign(&Tensor::new(vec![c, h, w], direct)?)?;
        Ok(grad)
    }
}
