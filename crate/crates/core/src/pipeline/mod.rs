//! The two-stage scene graph model: backbone, optional feature normalization
//! and restitution, box pooling, object/predicate encoders (with optional
//! layout embeddings) and linear decoders.

mod backbone;
mod io;
mod roi;
mod train;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lee::{
    argmax, Decoder, DecoderKind, EncodedBatch, EncoderDims, FusionMode, ObjectCache, ObjectEncoder,
    PredicateCache, PredicateEncoder,
};
use crate::nrm::{self, AttentionMode, Layout, NrmOutput};
use crate::param::ParamSet;
use crate::synth::SceneRecord;
use crate::tensor::{self, Tensor};

pub use backbone::{Backbone, BackboneCache, Conv};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use roi::{roi_cells, roi_pool, roi_pool_batch, roi_pool_batch_backward, union_box};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Boxes and object labels given; predicates predicted.
    #[default]
    PredCls,
    /// Boxes given; object labels and predicates predicted.
    SgCls,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            _ => Err(Error::Parse(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub n_categories: usize,
    /// Foreground predicate classes; the predicate head has one more output
    /// for "no relation".
    pub n_predicates: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub category_dim: usize,
    pub box_dim: usize,
    pub enable_nrm: bool,
    pub enable_lee: bool,
    pub fusion: FusionMode,
    pub attention: AttentionMode,
    pub nrm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            n_categories: 8,
            n_predicates: 6,
            channels: vec![16, 32, 32],
            hidden: 128,
            category_dim: 32,
            box_dim: 16,
            enable_nrm: false,
            enable_lee: false,
            fusion: FusionMode::Gate,
            attention: AttentionMode::Centroid,
            nrm_eps: nrm::DEFAULT_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_categories == 0 || self.n_predicates == 0 {
            return bad("need at least one category and one predicate");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("backbone channels must be non-empty and positive");
        }
        if self.hidden == 0 || self.category_dim == 0 || self.box_dim == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.nrm_eps > 0.0 && self.nrm_eps.is_finite()) {
            return bad("nrm_eps must be positive");
        }
        Ok(())
    }

    /// Short method label used in reports.
    pub fn method_label(&self) -> String {
        let mut s = String::from("baseline");
        if self.enable_nrm {
            s.push_str("+nrm");
            if self.attention == AttentionMode::Bbox {
                s.push_str("_bbox");
            }
        }
        if self.enable_lee {
            s.push_str("+lee");
            if self.fusion != FusionMode::Gate {
                s.push('_');
                s.push_str(self.fusion.name());
            }
        }
        s
    }
}

/// One ranked `<subject, predicate, object>` candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    /// Index into [`Prediction::pairs`].
    pub pair: usize,
    pub subject: usize,
    pub object: usize,
    pub subject_label: usize,
    pub object_label: usize,
    pub predicate: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub task: Task,
    pub object_logits: Tensor,
    /// Row-normalized; one-hot ground truth in PredCls.
    pub object_probs: Tensor,
    pub object_labels: Vec<usize>,
    /// All ordered pairs `(i, j)`, `i != j`, subject-major.
    pub pairs: Vec<(usize, usize)>,
    pub predicate_logits: Tensor,
    /// `[pairs x (n_predicates + 1)]`; the last column is "no relation".
    pub predicate_probs: Tensor,
    /// Foreground triplets, best first.
    pub triplets: Vec<Triplet>,
    /// Mean gate value of every object and pair (gate fusion only).
    pub gate_values: Vec<f64>,
}

impl Prediction {
    pub fn n_objects(&self) -> usize {
        self.object_labels.len()
    }
}

/// `(score desc, pair asc, predicate asc)`.
pub fn triplet_order(a: &Triplet, b: &Triplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.pair.cmp(&b.pair))
        .then(a.predicate.cmp(&b.predicate))
}

pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Intermediate values of a forward pass, needed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    backbone: BackboneCache,
    feature_shape: Vec<usize>,
    nrm: Option<NrmOutput>,
    boxes: Vec<[f64; 4]>,
    union_boxes: Vec<[f64; 4]>,
    objects: ObjectCache,
    encoded_objects: EncodedBatch,
    predicates: PredicateCache,
    encoded_pairs: EncodedBatch,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamSet,
    backbone: Backbone,
    objects: ObjectEncoder,
    predicates: PredicateEncoder,
    object_decoder: Decoder,
    predicate_decoder: Decoder,
}

impl Model {
    /// Fresh model. Every parameter is initialized from `(config.seed, name)`,
    /// so the shared parameters of two configs that differ only in their
    /// flags start out identical.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, seed, &config.channels)?;
        let dims = EncoderDims {
            visual: *config.channels.last().expect("validated"),
            category: config.category_dim,
            bbox: config.box_dim,
            hidden: config.hidden,
        };
        let lee = config.enable_lee.then_some(config.fusion);
        let objects = ObjectEncoder::new(&mut params, seed, config.n_categories, dims, lee)?;
        let predicates = PredicateEncoder::new(&mut params, seed, dims, lee)?;
        let object_decoder = Decoder::new(&mut params, seed, DecoderKind::Object, config.hidden, config.n_categories)?;
        let predicate_decoder = Decoder::new(
            &mut params,
            seed,
            DecoderKind::Predicate,
            config.hidden,
            config.n_predicates + 1,
        )?;
        Ok(Model {
            config,
            params,
            backbone,
            objects,
            predicates,
            object_decoder,
            predicate_decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// A copy that runs the plain pipeline on the same weights.
    pub fn without_extensions(&self) -> Model {
        let mut m = self.clone();
        m.config.enable_nrm = false;
        m.config.enable_lee = false;
        m.objects = m.objects.without_lee();
        m.predicates = m.predicates.without_lee();
        m
    }

    pub fn background_class(&self) -> usize {
        self.config.n_predicates
    }

    /// Runs the model on `image` with ground-truth `boxes` (normalized).
    /// `labels` are required in PredCls and ignored in SGCls.
    pub fn forward_with_cache(
        &self,
        image: &Tensor,
        boxes: &[[f64; 4]],
        labels: Option<&[usize]>,
        task: Task,
    ) -> Result<(Prediction, ForwardCache)> {
        let n = boxes.len();
        if n < 2 {
            return Err(Error::Shape(format!("a scene needs at least two objects, got {n}")));
        }
        let gt = match (task, labels) {
            (Task::PredCls, None) => {
                return Err(Error::InvalidConfig("predcls needs ground-truth object labels".into()))
            }
            (_, Some(l)) if l.len() != n => {
                return Err(Error::Misaligned(format!("{} labels for {n} boxes", l.len())))
            }
            (_, l) => l,
        };
        let (features, backbone_cache) = self.backbone.forward(&self.params, image)?;
        let feature_shape = features.shape().to_vec();
        let (features, nrm_out) = if self.config.enable_nrm {
            let layout = Layout::new(boxes.to_vec())?;
            let out = nrm::nrm_forward(&features, &layout, self.config.nrm_eps, self.config.attention)?;
            (out.output.clone(), Some(out))
        } else {
            (features, None)
        };

        let pairs = ordered_pairs(n);
        let union_boxes: Vec<[f64; 4]> = pairs.iter().map(|&(i, j)| union_box(&boxes[i], &boxes[j])).collect();
        let visual = roi_pool_batch(&features, boxes)?;
        let union_visual = roi_pool_batch(&features, &union_boxes)?;

        let label_inputs: Vec<Option<usize>> = match task {
            Task::PredCls => gt.expect("checked").iter().map(|&l| Some(l)).collect(),
            Task::SgCls => vec![None; n],
        };
        let (encoded_objects, object_cache) = self.objects.forward(&self.params, &visual, &label_inputs, boxes)?;
        let object_logits = self.object_decoder.logits(&self.params, &encoded_objects.f_prime)?;
        let (encoded_pairs, predicate_cache) =
            self.predicates
                .forward(&self.params, &encoded_objects.f_prime, &union_visual, &pairs, boxes)?;
        let predicate_logits = self.predicate_decoder.logits(&self.params, &encoded_pairs.f_prime)?;
        let predicate_probs = tensor::softmax_lastdim(&predicate_logits)?;

        let (object_probs, object_labels) = match task {
            Task::PredCls => {
                let gt = gt.expect("checked");
                let k = self.config.n_categories;
                let mut onehot = vec![0.0; n * k];
                for (i, &l) in gt.iter().enumerate() {
                    if l >= k {
                        return Err(Error::UnknownCategory(l));
                    }
                    onehot[i * k + l] = 1.0;
                }
                (Tensor::new(vec![n, k], onehot)?, gt.to_vec())
            }
            Task::SgCls => {
                let probs = tensor::softmax_lastdim(&object_logits)?;
                let labels = (0..n).map(|i| argmax(probs.row_slice(i))).collect();
                (probs, labels)
            }
        };

        let triplets = rank_triplets(&object_probs, &object_labels, &pairs, &predicate_probs, self.background_class());
        let mut gate_values = Vec::new();
        for batch in [&encoded_objects, &encoded_pairs] {
            if let Some(z) = &batch.z {
                let (rows, d) = z.dims2()?;
                gate_values.extend((0..rows).map(|r| z.row_slice(r).iter().sum::<f64>() / d as f64));
            }
        }

        Ok((
            Prediction {
                task,
                object_logits,
                object_probs,
                object_labels,
                pairs,
                predicate_logits,
                predicate_probs,
                triplets,
                gate_values,
            },
            ForwardCache {
                backbone: backbone_cache,
                feature_shape,
                nrm: nrm_out,
                boxes: boxes.to_vec(),
                union_boxes,
                objects: object_cache,
                encoded_objects,
                predicates: predicate_cache,
                encoded_pairs,
            },
        ))
    }

    /// Prediction for a scene, using its own boxes and labels.
    pub fn forward(&self, image: &Tensor, scene: &SceneRecord, task: Task) -> Result<Prediction> {
        let labels = scene.object_labels();
        Ok(self
            .forward_with_cache(image, &scene.normalized_boxes(), Some(&labels), task)?
            .0)
    }

    /// Accumulates parameter gradients given gradients on the two logit
    /// matrices; returns the gradient on the input image.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        grad_object_logits: Option<&Tensor>,
        grad_predicate_logits: &Tensor,
    ) -> Result<Tensor> {
        let params = &mut self.params;
        let dpairs = self
            .predicate_decoder
            .backward(params, &cache.encoded_pairs.f_prime, grad_predicate_logits)?;
        let (mut dobjects, dunion) = self.predicates.backward(params, &cache.predicates, &dpairs)?;
        if let Some(g) = grad_object_logits {
            let d = self.object_decoder.backward(params, &cache.encoded_objects.f_prime, g)?;
            dobjects.add_assign(&d)?;
        }
        let dvisual = self.objects.backward(params, &cache.objects, &dobjects)?;
        let mut dfeatures = Tensor::zeros(&cache.feature_shape);
        roi_pool_batch_backward(&cache.feature_shape, &cache.boxes, &dvisual, &mut dfeatures)?;
        roi_pool_batch_backward(&cache.feature_shape, &cache.union_boxes, &dunion, &mut dfeatures)?;
        let dfeatures = match &cache.nrm {
            Some(out) => out.backward(&dfeatures)?,
            None => dfeatures,
        };
        self.backbone.backward(params, &cache.backbone, &dfeatures)
    }

    /// Forward, loss and backward for one scene. Gradients are accumulated,
    /// not applied.
    pub fn accumulate_gradients(&mut self, image: &Tensor, scene: &SceneRecord, task: Task) -> Result<f64> {
        let labels = scene.object_labels();
        let (pred, cache) = self.forward_with_cache(image, &scene.normalized_boxes(), Some(&labels), task)?;
        let grads = loss_with_grad(&pred, scene)?;
        self.backward(&cache, grads.object_logits.as_ref(), &grads.predicate_logits)?;
        Ok(grads.loss)
    }
}

/// Scores every foreground `(pair, predicate)` and sorts with [`triplet_order`].
fn rank_triplets(
    object_probs: &Tensor,
    labels: &[usize],
    pairs: &[(usize, usize)],
    predicate_probs: &Tensor,
    background: usize,
) -> Vec<Triplet> {
    let mut out = Vec::with_capacity(pairs.len() * background);
    for (p, &(s, o)) in pairs.iter().enumerate() {
        let ps = object_probs.row_slice(s)[labels[s]];
        let po = object_probs.row_slice(o)[labels[o]];
        for (k, &pp) in predicate_probs.row_slice(p)[..background].iter().enumerate() {
            out.push(Triplet {
                pair: p,
                subject: s,
                object: o,
                subject_label: labels[s],
                object_label: labels[o],
                predicate: k,
                score: ps * po * pp,
            });
        }
    }
    out.sort_by(triplet_order);
    out
}

/// Predicate class of every pair: the annotated predicate, or `background`
/// for unrelated pairs. If a pair carries several relations the first wins.
pub fn predicate_targets(scene: &SceneRecord, pairs: &[(usize, usize)], background: usize) -> Result<Vec<usize>> {
    let n = scene.objects.len();
    let mut table = vec![None; n * n];
    for r in &scene.relations {
        if r.subject >= n || r.object >= n || r.subject == r.object {
            return Err(Error::Misaligned(format!(
                "relation ({}, {}) in a scene with {n} objects",
                r.subject, r.object
            )));
        }
        if r.predicate >= background {
            return Err(Error::LabelOutOfRange {
                label: r.predicate,
                classes: background,
            });
        }
        table[r.subject * n + r.object].get_or_insert(r.predicate);
    }
    Ok(pairs.iter().map(|&(i, j)| table[i * n + j].unwrap_or(background)).collect())
}

/// Loss value and its gradients on the logits.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    /// Absent in PredCls, where the object term is dropped.
    pub object_logits: Option<Tensor>,
    pub predicate_logits: Tensor,
}

/// Mean cross-entropy over pairs (ground-truth predicate or "no relation"),
/// plus mean cross-entropy over objects in SGCls.
pub fn compute_loss(pred: &Prediction, scene: &SceneRecord) -> Result<f64> {
    Ok(loss_with_grad(pred, scene)?.loss)
}

pub fn loss_with_grad(pred: &Prediction, scene: &SceneRecord) -> Result<LossGrads> {
    if pred.n_objects() != scene.objects.len() {
        return Err(Error::Misaligned(format!(
            "prediction has {} objects, scene {} has {}",
            pred.n_objects(),
            scene.id,
            scene.objects.len()
        )));
    }
    let background = pred.predicate_logits.dims2()?.1 - 1;
    let targets = predicate_targets(scene, &pred.pairs, background)?;
    let (pred_loss, dpred) = tensor::cross_entropy_with_grad(&pred.predicate_logits, &targets)?;
    match pred.task {
        Task::PredCls => Ok(LossGrads {
            loss: pred_loss,
            object_logits: None,
            predicate_logits: dpred,
        }),
        Task::SgCls => {
            let (obj_loss, dobj) = tensor::cross_entropy_with_grad(&pred.object_logits, &scene.object_labels())?;
            Ok(LossGrads {
                loss: pred_loss + obj_loss,
                object_logits: Some(dobj),
                predicate_logits: dpred,
            })
        }
    }
}
