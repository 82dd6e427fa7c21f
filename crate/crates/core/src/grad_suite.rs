//! The finite-difference suite: every differentiable operation and the full
//! model-to-loss composition, checked at seeded random points.

use rand::seq::index::sample;

use crate::error::Result;
use crate::grad_check::{finite_diff_check, finite_diff_check_at, relative_error};
use crate::layers::{init_uniform, Mlp2};
use crate::lee::{gate_fuse, gate_fuse_backward, EncoderDims, FusionMode, ObjectEncoder, PredicateEncoder};
use crate::nrm::{instance_normalize, nrm_forward, AttentionMode, Layout, DEFAULT_EPS};
use crate::param::ParamSet;
use crate::pipeline::{loss_with_grad, roi_pool_batch, roi_pool_batch_backward, Backbone, Model, ModelConfig, Task};
use crate::synth::{generate_dataset, rasterize, rng_for, GeneratorConfig, SceneRecord};
use crate::tensor::{self, ElementwiseOp, Tensor};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the whole model-to-loss composition.
pub const MODEL_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
const SUITE_STREAM: u64 = 0x6C_0000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(seed: u64, name: &str, shape: &[usize], scale: f64) -> Result<Tensor> {
    Ok(init_uniform(seed, name, shape, 1)?.map(|v| v * scale))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Random layout of `n` valid normalized boxes.
fn random_boxes(seed: u64, n: usize) -> Result<Vec<[f64; 4]>> {
    let raw = rand_tensor(seed, "boxes", &[n, 4], 1.0)?;
    Ok((0..n)
        .map(|i| {
            let r = raw.row_slice(i);
            let (x, y) = (0.5 + 0.2 * r[0], 0.5 + 0.2 * r[1]);
            let (w, h) = (0.1 + 0.08 * r[2], 0.1 + 0.08 * r[3]);
            [x - w, y - h, x + w, y + h]
        })
        .collect())
}

struct Suite {
    seed: u64,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, err: f64, tolerance: f64) {
        self.out.push(CheckOutcome {
            name: name.into(),
            max_rel_err: err,
            tolerance,
        });
    }

    fn t(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        rand_tensor(self.seed, name, shape, 1.0)
    }

    fn elementwise(&mut self) -> Result<()> {
        let a = self.t("ew.a", &[3, 4])?;
        let probe = self.t("ew.probe", &[3, 4])?;
        for (op, opname) in [(ElementwiseOp::Add, "add"), (ElementwiseOp::Sub, "sub"), (ElementwiseOp::Mul, "mul")] {
            for (bname, bshape) in [("same", vec![3, 4]), ("row", vec![1, 4]), ("column", vec![3, 1]), ("scalar", vec![])] {
                let b = if bshape.is_empty() {
                    Tensor::scalar(0.7)
                } else {
                    self.t("ew.b", &bshape)?
                };
                let ea = finite_diff_check(
                    |x| {
                        let y = tensor::elementwise(op, x, &b)?;
                        Ok((dot(&y, &probe), tensor::elementwise_backward(op, x, &b, &probe)?.0))
                    },
                    &a,
                    STEP,
                )?;
                let eb = finite_diff_check(
                    |x| {
                        let y = tensor::elementwise(op, &a, x)?;
                        Ok((dot(&y, &probe), tensor::elementwise_backward(op, &a, x, &probe)?.1))
                    },
                    &b,
                    STEP,
                )?;
                self.record(format!("elementwise {opname} ({bname})"), ea.max(eb), OP_TOLERANCE);
            }
        }
        Ok(())
    }

    fn matmul(&mut self) -> Result<()> {
        let a = self.t("mm.a", &[3, 5])?;
        let b = self.t("mm.b", &[5, 4])?;
        let probe = self.t("mm.probe", &[3, 4])?;
        let ea = finite_diff_check(
            |x| Ok((dot(&tensor::matmul(x, &b)?, &probe), tensor::matmul_backward(x, &b, &probe)?.0)),
            &a,
            STEP,
        )?;
        let eb = finite_diff_check(
            |x| Ok((dot(&tensor::matmul(&a, x)?, &probe), tensor::matmul_backward(&a, x, &probe)?.1)),
            &b,
            STEP,
        )?;
        self.record("matmul", ea.max(eb), OP_TOLERANCE);
        Ok(())
    }

    fn activations(&mut self) -> Result<()> {
        let x = rand_tensor(self.seed, "act.x", &[4, 6], 3.0)?;
        let probe = self.t("act.probe", &[4, 6])?;
        let e = finite_diff_check(
            |x| {
                let y = tensor::softmax_lastdim(x)?;
                Ok((dot(&y, &probe), tensor::softmax_lastdim_backward(&y, &probe)?))
            },
            &x,
            STEP,
        )?;
        self.record("softmax", e, OP_TOLERANCE);
        let e = finite_diff_check(
            |x| {
                let y = tensor::sigmoid(x)?;
                Ok((dot(&y, &probe), tensor::sigmoid_backward(&y, &probe)?))
            },
            &x,
            STEP,
        )?;
        self.record("sigmoid", e, OP_TOLERANCE);
        // keep every entry clear of the kink at 0
        let x = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let e = finite_diff_check(
            |x| Ok((dot(&tensor::relu(x), &probe), tensor::relu_backward(x, &probe)?)),
            &x,
            STEP,
        )?;
        self.record("relu", e, OP_TOLERANCE);
        let labels: Vec<usize> = (0..4).map(|i| (i * 5 + self.seed as usize) % 6).collect();
        let e = finite_diff_check(|x| tensor::cross_entropy_with_grad(x, &labels), &x, STEP)?;
        self.record("cross_entropy", e, OP_TOLERANCE);
        Ok(())
    }

    fn normalization(&mut self) -> Result<()> {
        let f = rand_tensor(self.seed, "nrm.f", &[3, 4, 5], 2.0)?;
        let probe = self.t("nrm.probe", &[3, 4, 5])?;
        let e = finite_diff_check(
            |x| {
                let n = instance_normalize(x, DEFAULT_EPS)?;
                Ok((dot(&n.normalized, &probe), n.backward(&probe)?))
            },
            &f,
            STEP,
        )?;
        self.record("instance_normalize", e, OP_TOLERANCE);
        let layout = Layout::new(random_boxes(self.seed, 3)?)?;
        for (mode, name) in [(AttentionMode::Centroid, "centroid"), (AttentionMode::Bbox, "bbox")] {
            let e = finite_diff_check(
                |x| {
                    let out = nrm_forward(x, &layout, DEFAULT_EPS, mode)?;
                    Ok((dot(&out.output, &probe), out.backward(&probe)?))
                },
                &f,
                STEP,
            )?;
            self.record(format!("nrm_forward ({name})"), e, OP_TOLERANCE);
        }
        Ok(())
    }

    fn fusion(&mut self) -> Result<()> {
        let f = self.t("fuse.f", &[3, 5])?;
        let fc = self.t("fuse.fc", &[3, 5])?;
        let probe = self.t("fuse.probe", &[3, 5])?;
        for (mode, shape) in [(FusionMode::Gate, vec![5, 5]), (FusionMode::ConcatProj, vec![5, 10]), (FusionMode::Add, vec![])] {
            let w = if shape.is_empty() { None } else { Some(self.t("fuse.w", &shape)?) };
            let w = w.as_ref();
            let mut err = finite_diff_check(
                |x| {
                    let y = gate_fuse(x, &fc, mode, w)?;
                    Ok((dot(&y.out, &probe), gate_fuse_backward(x, &fc, mode, w, &y, &probe)?.f))
                },
                &f,
                STEP,
            )?;
            err = err.max(finite_diff_check(
                |x| {
                    let y = gate_fuse(&f, x, mode, w)?;
                    Ok((dot(&y.out, &probe), gate_fuse_backward(&f, x, mode, w, &y, &probe)?.f_c))
                },
                &fc,
                STEP,
            )?);
            if let Some(w0) = w {
                err = err.max(finite_diff_check(
                    |x| {
                        let y = gate_fuse(&f, &fc, mode, Some(x))?;
                        let g = gate_fuse_backward(&f, &fc, mode, Some(x), &y, &probe)?;
                        Ok((dot(&y.out, &probe), g.weight.expect("weighted mode")))
                    },
                    w0,
                    STEP,
                )?);
            }
            self.record(format!("gate_fuse ({})", mode.name()), err, OP_TOLERANCE);
        }
        Ok(())
    }

    /// Gradient of `dot(forward(params), probe)` w.r.t. every array in `params`.
    fn params_check<F, B>(&mut self, name: &str, params: &ParamSet, forward: F, backward: B) -> Result<()>
    where
        F: Fn(&ParamSet) -> Result<f64>,
        B: Fn(&mut ParamSet) -> Result<()>,
    {
        let mut analytic = params.clone();
        analytic.zero_grad();
        backward(&mut analytic)?;
        let mut probe = params.clone();
        let mut worst = 0.0f64;
        let ids: Vec<_> = params.iter().map(|p| probe.id(&p.name).expect("same set")).collect();
        for id in ids {
            for i in 0..params.get(id).value.len() {
                let orig = params.get(id).value.data()[i];
                probe.get_mut(id).value.data_mut()[i] = orig + STEP;
                let plus = forward(&probe)?;
                probe.get_mut(id).value.data_mut()[i] = orig - STEP;
                let minus = forward(&probe)?;
                probe.get_mut(id).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic.get(id).grad.data()[i], numeric));
            }
        }
        self.record(name, worst, OP_TOLERANCE);
        Ok(())
    }

    fn layers(&mut self) -> Result<()> {
        let mut params = ParamSet::new();
        let mlp = Mlp2::new(&mut params, self.seed, "mlp", 4, 6, 3)?;
        let x = self.t("mlp.x", &[5, 4])?;
        let probe = self.t("mlp.probe", &[5, 3])?;
        self.params_check(
            "mlp2 (weights)",
            &params,
            |p| Ok(dot(&mlp.forward(p, &x)?.0, &probe)),
            |p| {
                let (_, cache) = mlp.forward(p, &x)?;
                mlp.backward(p, &cache, &probe).map(|_| ())
            },
        )?;
        let e = finite_diff_check(
            |x| {
                let mut p = params.clone();
                let (y, cache) = mlp.forward(&p, x)?;
                Ok((dot(&y, &probe), mlp.backward(&mut p, &cache, &probe)?))
            },
            &x,
            STEP,
        )?;
        self.record("mlp2 (input)", e, OP_TOLERANCE);
        Ok(())
    }

    fn pooling_and_backbone(&mut self) -> Result<()> {
        let f = self.t("roi.f", &[3, 8, 8])?;
        let boxes = random_boxes(self.seed, 4)?;
        let probe = self.t("roi.probe", &[4, 3])?;
        let e = finite_diff_check(
            |x| {
                let y = roi_pool_batch(x, &boxes)?;
                let mut g = Tensor::zeros(&[3, 8, 8]);
                roi_pool_batch_backward(&[3, 8, 8], &boxes, &probe, &mut g)?;
                Ok((dot(&y, &probe), g))
            },
            &f,
            STEP,
        )?;
        self.record("roi_pool", e, OP_TOLERANCE);

        let mut params = ParamSet::new();
        let bb = Backbone::new(&mut params, self.seed, &[3, 4, 4])?;
        let image = rand_tensor(self.seed, "bb.image", &[3, 16, 16], 0.5)?.map(|v| v + 0.5);
        let probe = self.t("bb.probe", &[4, 2, 2])?;
        self.params_check(
            "backbone (weights)",
            &params,
            |p| Ok(dot(&bb.forward(p, &image)?.0, &probe)),
            |p| {
                let (_, cache) = bb.forward(p, &image)?;
                bb.backward(p, &cache, &probe).map(|_| ())
            },
        )?;
        let idx: Vec<usize> = (0..image.len()).step_by(5).collect();
        let e = finite_diff_check_at(
            |x| {
                let mut p = params.clone();
                let (y, cache) = bb.forward(&p, x)?;
                Ok((dot(&y, &probe), bb.backward(&mut p, &cache, &probe)?))
            },
            &image,
            STEP,
            &idx,
        )?;
        self.record("backbone (input)", e, OP_TOLERANCE);
        Ok(())
    }

    fn encoders(&mut self) -> Result<()> {
        let dims = EncoderDims {
            visual: 4,
            category: 3,
            bbox: 2,
            hidden: 5,
        };
        let n = 3;
        let boxes = random_boxes(self.seed, n)?;
        let labels = [Some(0), None, Some(2)];
        let pairs = [(0, 1), (1, 0), (2, 0), (1, 2)];
        for mode in [FusionMode::Gate, FusionMode::ConcatProj, FusionMode::Add] {
            let mut params = ParamSet::new();
            let obj = ObjectEncoder::new(&mut params, self.seed, 3, dims, Some(mode))?;
            let pred = PredicateEncoder::new(&mut params, self.seed, dims, Some(mode))?;
            let v = self.t("enc.v", &[n, 4])?;
            let u = self.t("enc.u", &[pairs.len(), 4])?;
            let probe = self.t("enc.probe", &[pairs.len(), 5])?;
            let forward = |p: &ParamSet, v: &Tensor, u: &Tensor| -> Result<f64> {
                let (o, _) = obj.forward(p, v, &labels, &boxes)?;
                let (r, _) = pred.forward(p, &o.f_prime, u, &pairs, &boxes)?;
                Ok(dot(&r.f_prime, &probe))
            };
            let backward = |p: &mut ParamSet, v: &Tensor, u: &Tensor| -> Result<(Tensor, Tensor)> {
                let (o, oc) = obj.forward(p, v, &labels, &boxes)?;
                let (_, rc) = pred.forward(p, &o.f_prime, u, &pairs, &boxes)?;
                let (dobj, du) = pred.backward(p, &rc, &probe)?;
                Ok((obj.backward(p, &oc, &dobj)?, du))
            };
            self.params_check(
                &format!("encoders + layout embedding ({}, weights)", mode.name()),
                &params,
                |p| forward(p, &v, &u),
                |p| backward(p, &v, &u).map(|_| ()),
            )?;
            let ev = finite_diff_check(
                |x| Ok((forward(&params, x, &u)?, backward(&mut params.clone(), x, &u)?.0)),
                &v,
                STEP,
            )?;
            let eu = finite_diff_check(
                |x| Ok((forward(&params, &v, x)?, backward(&mut params.clone(), &v, x)?.1)),
                &u,
                STEP,
            )?;
            self.record(format!("encoders + layout embedding ({}, inputs)", mode.name()), ev.max(eu), OP_TOLERANCE);
        }
        Ok(())
    }

    fn full_model(&mut self, model: &Model, scene: &SceneRecord, task: Task, samples: usize) -> Result<()> {
        let err = model_loss_check(model, scene, task, self.seed, samples)?;
        self.record(format!("model to loss ({task}, {})", model.config().method_label()), err, MODEL_TOLERANCE);
        Ok(())
    }
}

/// A reduced-width configuration with every extension switched on, small
/// enough to check by finite differences.
pub fn check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        channels: vec![4, 6, 8],
        hidden: 10,
        category_dim: 4,
        box_dim: 3,
        enable_nrm: true,
        enable_lee: true,
        ..ModelConfig::default()
    }
}

/// Largest relative error between the analytic loss gradient and central
/// differences, over up to `samples` entries of every parameter array and of
/// the input image.
pub fn model_loss_check(model: &Model, scene: &SceneRecord, task: Task, seed: u64, samples: usize) -> Result<f64> {
    let image = rasterize(scene);
    let boxes = scene.normalized_boxes();
    let labels = scene.object_labels();
    let loss_of = |m: &Model, img: &Tensor| -> Result<f64> {
        let (pred, _) = m.forward_with_cache(img, &boxes, Some(&labels), task)?;
        Ok(loss_with_grad(&pred, scene)?.loss)
    };
    let mut analytic = model.clone();
    analytic.params.zero_grad();
    let (pred, cache) = analytic.forward_with_cache(&image, &boxes, Some(&labels), task)?;
    let grads = loss_with_grad(&pred, scene)?;
    let dimage = analytic.backward(&cache, grads.object_logits.as_ref(), &grads.predicate_logits)?;

    let mut rng = rng_for(seed, SUITE_STREAM);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let id = model.params.id(name).expect("own name");
        let len = model.params.get(id).value.len();
        for i in sample(&mut rng, len, samples.min(len)) {
            let orig = model.params.get(id).value.data()[i];
            probe.params.get_mut(id).value.data_mut()[i] = orig + STEP;
            let plus = loss_of(&probe, &image)?;
            probe.params.get_mut(id).value.data_mut()[i] = orig - STEP;
            let minus = loss_of(&probe, &image)?;
            probe.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.params.get(id).grad.data()[i], numeric));
        }
    }
    let mut img = image.clone();
    for i in sample(&mut rng, image.len(), samples.min(image.len())) {
        let orig = image.data()[i];
        img.data_mut()[i] = orig + STEP;
        let plus = loss_of(model, &img)?;
        img.data_mut()[i] = orig - STEP;
        let minus = loss_of(model, &img)?;
        img.data_mut()[i] = orig;
        worst = worst.max(relative_error(dimage.data()[i], (plus - minus) / (2.0 * STEP)));
    }
    Ok(worst)
}

/// Runs every check for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut suite = Suite { seed, out: Vec::new() };
    suite.elementwise()?;
    suite.matmul()?;
    suite.activations()?;
    suite.normalization()?;
    suite.fusion()?;
    suite.layers()?;
    suite.pooling_and_backbone()?;
    suite.encoders()?;
    let scene = generate_dataset(seed, 1, &GeneratorConfig::default())?.remove(0);
    for config in [
        check_config(seed),
        ModelConfig {
            attention: AttentionMode::Bbox,
            fusion: FusionMode::ConcatProj,
            ..check_config(seed)
        },
    ] {
        let model = Model::new(config)?;
        suite.full_model(&model, &scene, Task::SgCls, 12)?;
        suite.full_model(&model, &scene, Task::PredCls, 12)?;
    }
    Ok(suite.out)
}
