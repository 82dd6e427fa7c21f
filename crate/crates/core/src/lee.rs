//! Layout-embedded encoding: coordinate embeddings for objects and object
//! pairs, fused into the encoded features through a sigmoid gate (or, for
//! ablations, plain addition or a concatenate-and-project layer).
//!
//! Also hosts the object/predicate encoders and decoders that the fusion
//! plugs into.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{column_block, concat_columns, init_uniform, Linear, Mlp2, Mlp2Cache};
use crate::param::{ParamId, ParamSet};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `z = sigmoid(W f)`, `f' = (1 - z) * f_c + z * f`.
    #[default]
    Gate,
    /// `f' = P [f; f_c]` with a learned `d x 2d` projection.
    #[serde(rename = "concat", alias = "concat_proj")]
    ConcatProj,
    /// `f' = f + f_c`.
    Add,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Gate => "gate",
            FusionMode::ConcatProj => "concat",
            FusionMode::Add => "add",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(FusionMode::Gate),
            "concat" | "concat_proj" => Ok(FusionMode::ConcatProj),
            "add" => Ok(FusionMode::Add),
            _ => Err(Error::Parse(format!("unknown fusion mode `{s}`"))),
        }
    }
}

/// Length of [`pair_geometry`].
pub const PAIR_GEOMETRY_DIM: usize = 11;

/// `[b_i, b_j, e_i - e_j, |b_i - b_j|_2]` for normalized boxes, where `e` is
/// the box centre and the norm is over the 4-d box vectors.
pub fn pair_geometry(bi: &[f64; 4], bj: &[f64; 4]) -> [f64; PAIR_GEOMETRY_DIM] {
    let ei = [(bi[0] + bi[2]) / 2.0, (bi[1] + bi[3]) / 2.0];
    let ej = [(bj[0] + bj[2]) / 2.0, (bj[1] + bj[3]) / 2.0];
    let dist = bi.iter().zip(bj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut out = [0.0; PAIR_GEOMETRY_DIM];
    out[..4].copy_from_slice(bi);
    out[4..8].copy_from_slice(bj);
    out[8] = ei[0] - ej[0];
    out[9] = ei[1] - ej[1];
    out[10] = dist;
    out
}

fn boxes_tensor(boxes: &[[f64; 4]]) -> Result<Tensor> {
    Tensor::new(vec![boxes.len(), 4], boxes.concat())
}

/// Output of [`gate_fuse`].
#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub out: Tensor,
    /// Gate coefficients, present in gate mode only.
    pub z: Option<Tensor>,
}

/// Gradients of [`gate_fuse`].
#[derive(Clone, Debug)]
pub struct FuseGrads {
    pub f: Tensor,
    pub f_c: Tensor,
    pub weight: Option<Tensor>,
}

fn check_weight(mode: FusionMode, weight: Option<&Tensor>, d: usize) -> Result<Option<&Tensor>> {
    let want = match mode {
        FusionMode::Gate => Some([d, d]),
        FusionMode::ConcatProj => Some([d, 2 * d]),
        FusionMode::Add => None,
    };
    match (want, weight) {
        (None, _) => Ok(None),
        (Some(shape), Some(w)) if w.shape() == shape => Ok(Some(w)),
        (Some(shape), w) => Err(Error::Shape(format!(
            "{} fusion needs a {shape:?} weight, got {:?}",
            mode.name(),
            w.map(|w| w.shape().to_vec())
        ))),
    }
}

/// Fuses row-batched features `f` with coordinate embeddings `f_c` (both
/// `[n x d]`).
///
/// `weight` is the `d x d` gate matrix `W` in gate mode, the `d x 2d`
/// projection in concat mode, and unused for add.
pub fn gate_fuse(f: &Tensor, f_c: &Tensor, mode: FusionMode, weight: Option<&Tensor>) -> Result<Fused> {
    let (_, d) = f.dims2()?;
    if f.shape() != f_c.shape() {
        return Err(Error::Shape(format!("fuse {:?} with {:?}", f.shape(), f_c.shape())));
    }
    let weight = check_weight(mode, weight, d)?;
    match mode {
        FusionMode::Gate => {
            let z = tensor::sigmoid(&tensor::matmul_nt(f, weight.expect("checked"))?)?;
            let out: Vec<f64> = f
                .data()
                .iter()
                .zip(f_c.data())
                .zip(z.data())
                .map(|((&a, &c), &g)| (1.0 - g) * c + g * a)
                .collect();
            Ok(Fused {
                out: Tensor::new(f.shape().to_vec(), out)?,
                z: Some(z),
            })
        }
        FusionMode::ConcatProj => Ok(Fused {
            out: tensor::matmul_nt(&concat_columns(&[f, f_c])?, weight.expect("checked"))?,
            z: None,
        }),
        FusionMode::Add => Ok(Fused {
            out: tensor::add(f, f_c)?,
            z: None,
        }),
    }
}

pub fn gate_fuse_backward(
    f: &Tensor,
    f_c: &Tensor,
    mode: FusionMode,
    weight: Option<&Tensor>,
    fused: &Fused,
    grad_out: &Tensor,
) -> Result<FuseGrads> {
    let (_, d) = f.dims2()?;
    let weight = check_weight(mode, weight, d)?;
    match mode {
        FusionMode::Gate => {
            let w = weight.expect("checked");
            let z = fused.z.as_ref().ok_or(Error::GateModeAbsent)?;
            let n = f.len();
            let (mut df, mut dfc, mut da) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (g, zi) = (grad_out.data()[i], z.data()[i]);
                df[i] = g * zi;
                dfc[i] = g * (1.0 - zi);
                da[i] = g * (f.data()[i] - f_c.data()[i]) * zi * (1.0 - zi);
            }
            let da = Tensor::new(f.shape().to_vec(), da)?;
            let mut df = Tensor::new(f.shape().to_vec(), df)?;
            // a = F W^T  =>  dF = dA W,  dW = dA^T F
            df.add_assign(&tensor::matmul(&da, w)?)?;
            Ok(FuseGrads {
                f: df,
                f_c: Tensor::new(f.shape().to_vec(), dfc)?,
                weight: Some(tensor::matmul_tn(&da, f)?),
            })
        }
        FusionMode::ConcatProj => {
            let w = weight.expect("checked");
            let x = concat_columns(&[f, f_c])?;
            let dx = tensor::matmul(grad_out, w)?;
            Ok(FuseGrads {
                f: column_block(&dx, 0, d)?,
                f_c: column_block(&dx, d, d)?,
                weight: Some(tensor::matmul_tn(grad_out, &x)?),
            })
        }
        FusionMode::Add => Ok(FuseGrads {
            f: grad_out.clone(),
            f_c: grad_out.clone(),
            weight: None,
        }),
    }
}

/// Coordinate embedding plus the fusion weights for one branch (object or predicate).
#[derive(Clone, Copy, Debug)]
pub struct LeeBranch {
    pub embed: Mlp2,
    pub mode: FusionMode,
    pub weight: Option<ParamId>,
}

impl LeeBranch {
    pub fn new(params: &mut ParamSet, seed: u64, name: &str, input_dim: usize, d: usize, mode: FusionMode) -> Result<Self> {
        let embed = Mlp2::new(params, seed, &format!("{name}.embed"), input_dim, d, d)?;
        let weight = match mode {
            FusionMode::Gate => {
                let n = format!("{name}.gate");
                Some(params.insert(&n, init_uniform(seed, &n, &[d, d], d)?)?)
            }
            FusionMode::ConcatProj => {
                let n = format!("{name}.proj");
                Some(params.insert(&n, init_uniform(seed, &n, &[d, 2 * d], 2 * d)?)?)
            }
            FusionMode::Add => None,
        };
        Ok(LeeBranch { embed, mode, weight })
    }

    fn forward(&self, params: &ParamSet, f: &Tensor, geometry: &Tensor) -> Result<(Fused, Tensor, LeeCache)> {
        let (f_c, embed_cache) = self.embed.forward(params, geometry)?;
        let fused = gate_fuse(f, &f_c, self.mode, self.weight.map(|w| params.value(w)))?;
        Ok((
            fused.clone(),
            f_c.clone(),
            LeeCache {
                f: f.clone(),
                f_c,
                fused,
                embed_cache,
            },
        ))
    }

    /// Returns the gradient w.r.t. `f`.
    fn backward(&self, params: &mut ParamSet, cache: &LeeCache, grad_out: &Tensor) -> Result<Tensor> {
        let grads = gate_fuse_backward(
            &cache.f,
            &cache.f_c,
            self.mode,
            self.weight.map(|w| params.value(w)),
            &cache.fused,
            grad_out,
        )?;
        if let (Some(id), Some(gw)) = (self.weight, &grads.weight) {
            params.accumulate(id, gw)?;
        }
        self.embed.backward(params, &cache.embed_cache, &grads.f_c)?;
        Ok(grads.f)
    }
}

#[derive(Clone, Debug)]
struct LeeCache {
    f: Tensor,
    f_c: Tensor,
    fused: Fused,
    embed_cache: Mlp2Cache,
}

/// One object's encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedObject {
    pub f: Vec<f64>,
    pub f_c: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub f_prime: Vec<f64>,
}

/// One ordered pair's encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub subject: usize,
    pub object: usize,
    pub f: Vec<f64>,
    pub f_c: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub f_prime: Vec<f64>,
}

/// Row-batched encodings (`[n x d]` each).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub f: Tensor,
    pub f_c: Option<Tensor>,
    pub z: Option<Tensor>,
    pub f_prime: Tensor,
}

impl EncodedBatch {
    fn row(t: &Option<Tensor>, i: usize) -> Option<Vec<f64>> {
        t.as_ref().map(|t| t.row_slice(i).to_vec())
    }

    pub fn object(&self, i: usize) -> EncodedObject {
        EncodedObject {
            f: self.f.row_slice(i).to_vec(),
            f_c: Self::row(&self.f_c, i),
            z: Self::row(&self.z, i),
            f_prime: self.f_prime.row_slice(i).to_vec(),
        }
    }

    pub fn pair(&self, i: usize, subject: usize, object: usize) -> EncodedPair {
        EncodedPair {
            subject,
            object,
            f: self.f.row_slice(i).to_vec(),
            f_c: Self::row(&self.f_c, i),
            z: Self::row(&self.z, i),
            f_prime: self.f_prime.row_slice(i).to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean gate value over the batch, if gated.
    pub fn mean_gate(&self) -> Option<f64> {
        self.z.as_ref().map(|z| z.sum() / z.len() as f64)
    }
}

fn finish(f: Tensor, lee: Option<(Fused, Tensor)>) -> EncodedBatch {
    match lee {
        Some((fused, f_c)) => EncodedBatch {
            f,
            f_c: Some(f_c),
            z: fused.z,
            f_prime: fused.out,
        },
        None => EncodedBatch {
            f_prime: f.clone(),
            f,
            f_c: None,
            z: None,
        },
    }
}

/// Object encoder: `f = MLP([v, category embedding, small box embedding])`,
/// optionally fused with the object coordinate embedding.
#[derive(Clone, Copy, Debug)]
pub struct ObjectEncoder {
    /// `(n_categories + 1) x category_dim`; the last row stands for "label unknown".
    pub categories: ParamId,
    pub n_categories: usize,
    pub box_embed: Linear,
    pub mlp: Mlp2,
    pub lee: Option<LeeBranch>,
}

#[derive(Clone, Debug)]
pub struct ObjectCache {
    ids: Vec<usize>,
    visual_dim: usize,
    category_dim: usize,
    boxes: Tensor,
    box_pre: Tensor,
    mlp: Mlp2Cache,
    lee: Option<LeeCache>,
}

/// Layer sizes shared by the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub visual: usize,
    pub category: usize,
    pub bbox: usize,
    pub hidden: usize,
}

impl ObjectEncoder {
    pub fn new(
        params: &mut ParamSet,
        seed: u64,
        n_categories: usize,
        dims: EncoderDims,
        lee: Option<FusionMode>,
    ) -> Result<Self> {
        let categories = params.insert(
            "obj.category_table",
            init_uniform(seed, "obj.category_table", &[n_categories + 1, dims.category], dims.category)?,
        )?;
        let box_embed = Linear::new(params, seed, "obj.box_embed", 4, dims.bbox)?;
        let input = dims.visual + dims.category + dims.bbox;
        let mlp = Mlp2::new(params, seed, "obj.encoder", input, dims.hidden, dims.hidden)?;
        let lee = lee
            .map(|mode| LeeBranch::new(params, seed, "obj.lee", 4, dims.hidden, mode))
            .transpose()?;
        Ok(ObjectEncoder {
            categories,
            n_categories,
            box_embed,
            mlp,
            lee,
        })
    }

    /// The same encoder with the layout branch switched off.
    pub fn without_lee(&self) -> Self {
        ObjectEncoder { lee: None, ..*self }
    }

    /// `visual` is `[n x visual_dim]`; `None` labels use the "unknown" row.
    pub fn forward(
        &self,
        params: &ParamSet,
        visual: &Tensor,
        labels: &[Option<usize>],
        boxes: &[[f64; 4]],
    ) -> Result<(EncodedBatch, ObjectCache)> {
        let (n, visual_dim) = visual.dims2()?;
        if labels.len() != n || boxes.len() != n {
            return Err(Error::Shape(format!(
                "{n} visual rows, {} labels, {} boxes",
                labels.len(),
                boxes.len()
            )));
        }
        let table = params.value(self.categories);
        let (_, category_dim) = table.dims2()?;
        let ids = labels
            .iter()
            .map(|l| match *l {
                Some(c) if c < self.n_categories => Ok(c),
                Some(c) => Err(Error::UnknownCategory(c)),
                None => Ok(self.n_categories),
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = Tensor::new(
            vec![n, category_dim],
            ids.iter().flat_map(|&c| table.row_slice(c).iter().copied()).collect(),
        )?;
        let boxes = boxes_tensor(boxes)?;
        let box_pre = self.box_embed.forward(params, &boxes)?;
        let box_feat = tensor::relu(&box_pre);
        let input = concat_columns(&[visual, &emb, &box_feat])?;
        let (f, mlp_cache) = self.mlp.forward(params, &input)?;
        let (lee_out, lee_cache) = match &self.lee {
            Some(branch) => {
                let (fused, f_c, cache) = branch.forward(params, &f, &boxes)?;
                (Some((fused, f_c)), Some(cache))
            }
            None => (None, None),
        };
        Ok((
            finish(f, lee_out),
            ObjectCache {
                ids,
                visual_dim,
                category_dim,
                boxes,
                box_pre,
                mlp: mlp_cache,
                lee: lee_cache,
            },
        ))
    }

    /// Backpropagates a gradient on `f_prime`; returns the gradient on `visual`.
    pub fn backward(&self, params: &mut ParamSet, cache: &ObjectCache, grad_fprime: &Tensor) -> Result<Tensor> {
        let grad_f = match (&self.lee, &cache.lee) {
            (Some(branch), Some(lc)) => branch.backward(params, lc, grad_fprime)?,
            _ => grad_fprime.clone(),
        };
        let dinput = self.mlp.backward(params, &cache.mlp, &grad_f)?;
        let (vd, cd) = (cache.visual_dim, cache.category_dim);
        let dvisual = column_block(&dinput, 0, vd)?;
        let demb = column_block(&dinput, vd, cd)?;
        let dbox = column_block(&dinput, vd + cd, dinput.dims2()?.1 - vd - cd)?;

        let table_shape = params.value(self.categories).shape().to_vec();
        let mut dtable = Tensor::zeros(&table_shape);
        for (r, &c) in cache.ids.iter().enumerate() {
            for (t, g) in dtable.data_mut()[c * cd..(c + 1) * cd].iter_mut().zip(demb.row_slice(r)) {
                *t += g;
            }
        }
        params.accumulate(self.categories, &dtable)?;
        let dpre = tensor::relu_backward(&cache.box_pre, &dbox)?;
        self.box_embed.backward(params, &cache.boxes, &dpre)?;
        Ok(dvisual)
    }
}

/// Predicate encoder: `f = MLP([f'_subject, v_union, f'_object])`, optionally
/// fused with the pair coordinate embedding. The gate reads the pair feature.
#[derive(Clone, Copy, Debug)]
pub struct PredicateEncoder {
    pub mlp: Mlp2,
    pub lee: Option<LeeBranch>,
}

#[derive(Clone, Debug)]
pub struct PredicateCache {
    pairs: Vec<(usize, usize)>,
    n_objects: usize,
    object_dim: usize,
    union_dim: usize,
    mlp: Mlp2Cache,
    lee: Option<LeeCache>,
}

impl PredicateEncoder {
    pub fn new(params: &mut ParamSet, seed: u64, dims: EncoderDims, lee: Option<FusionMode>) -> Result<Self> {
        let input = 2 * dims.hidden + dims.visual;
        let mlp = Mlp2::new(params, seed, "pred.encoder", input, dims.hidden, dims.hidden)?;
        let lee = lee
            .map(|mode| LeeBranch::new(params, seed, "pred.lee", PAIR_GEOMETRY_DIM, dims.hidden, mode))
            .transpose()?;
        Ok(PredicateEncoder { mlp, lee })
    }

    pub fn without_lee(&self) -> Self {
        PredicateEncoder { lee: None, ..*self }
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        objects: &Tensor,
        union_visual: &Tensor,
        pairs: &[(usize, usize)],
        boxes: &[[f64; 4]],
    ) -> Result<(EncodedBatch, PredicateCache)> {
        let (n_objects, object_dim) = objects.dims2()?;
        let (p, union_dim) = union_visual.dims2()?;
        if pairs.len() != p || boxes.len() != n_objects {
            return Err(Error::Shape("predicate encoder input sizes".into()));
        }
        let mut rows = Vec::with_capacity(p * (2 * object_dim + union_dim));
        let mut geometry = Vec::with_capacity(p * PAIR_GEOMETRY_DIM);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if i == j || i >= n_objects || j >= n_objects {
                return Err(Error::Shape(format!("invalid pair ({i}, {j})")));
            }
            rows.extend_from_slice(objects.row_slice(i));
            rows.extend_from_slice(union_visual.row_slice(k));
            rows.extend_from_slice(objects.row_slice(j));
            geometry.extend_from_slice(&pair_geometry(&boxes[i], &boxes[j]));
        }
        let input = Tensor::new(vec![p, 2 * object_dim + union_dim], rows)?;
        let (f, mlp_cache) = self.mlp.forward(params, &input)?;
        let (lee_out, lee_cache) = match &self.lee {
            Some(branch) => {
                let geometry = Tensor::new(vec![p, PAIR_GEOMETRY_DIM], geometry)?;
                let (fused, f_c, cache) = branch.forward(params, &f, &geometry)?;
                (Some((fused, f_c)), Some(cache))
            }
            None => (None, None),
        };
        Ok((
            finish(f, lee_out),
            PredicateCache {
                pairs: pairs.to_vec(),
                n_objects,
                object_dim,
                union_dim,
                mlp: mlp_cache,
                lee: lee_cache,
            },
        ))
    }

    /// Returns gradients on `(objects, union_visual)`.
    pub fn backward(&self, params: &mut ParamSet, cache: &PredicateCache, grad_fprime: &Tensor) -> Result<(Tensor, Tensor)> {
        let grad_f = match (&self.lee, &cache.lee) {
            (Some(branch), Some(lc)) => branch.backward(params, lc, grad_fprime)?,
            _ => grad_fprime.clone(),
        };
        let dinput = self.mlp.backward(params, &cache.mlp, &grad_f)?;
        let (od, ud) = (cache.object_dim, cache.union_dim);
        let mut dobjects = Tensor::zeros(&[cache.n_objects, od]);
        let mut dunion = Vec::with_capacity(cache.pairs.len() * ud);
        for (k, &(i, j)) in cache.pairs.iter().enumerate() {
            let row = dinput.row_slice(k);
            let d = dobjects.data_mut();
            for (t, g) in d[i * od..(i + 1) * od].iter_mut().zip(&row[..od]) {
                *t += g;
            }
            for (t, g) in d[j * od..(j + 1) * od].iter_mut().zip(&row[od + ud..]) {
                *t += g;
            }
            dunion.extend_from_slice(&row[od..od + ud]);
        }
        Ok((dobjects, Tensor::new(vec![cache.pairs.len(), ud], dunion)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Object,
    Predicate,
}

/// A single fully connected layer producing class logits.
#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub linear: Linear,
}

impl Decoder {
    pub fn new(params: &mut ParamSet, seed: u64, kind: DecoderKind, d: usize, classes: usize) -> Result<Self> {
        let name = match kind {
            DecoderKind::Object => "obj.decoder",
            DecoderKind::Predicate => "pred.decoder",
        };
        Ok(Decoder {
            kind,
            linear: Linear::new(params, seed, name, d, classes)?,
        })
    }

    pub fn logits(&self, params: &ParamSet, features: &Tensor) -> Result<Tensor> {
        self.linear.forward(params, features)
    }

    pub fn backward(&self, params: &mut ParamSet, features: &Tensor, grad_logits: &Tensor) -> Result<Tensor> {
        self.linear.backward(params, features, grad_logits)
    }

    /// Label and class probabilities for a single feature vector.
    pub fn decode(&self, params: &ParamSet, f: &[f64]) -> Result<(usize, Vec<f64>)> {
        let probs = tensor::softmax_lastdim(&self.logits(params, &Tensor::row(f)?)?)?.into_data();
        Ok((argmax(&probs), probs))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
