use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitsearch::{build_bit_plan, BitPlan, SearchSettings};
use crate::cost::{evaluate, EvalReport, GroundTruth};
use crate::error::{invalid, Error, Result};
use crate::io::Checkpoint;
use crate::net::NetworkSpec;
use crate::quant::BitWidth;
use crate::scm::{
    diagonal_logits_graph, feature_distill_loss_graph, sample_gumbel, soft_gate_graph, GateParams, GateVars,
    DEFAULT_OFF_LOGIT,
};
use crate::tensor::{Graph, Tensor};

use super::data::{stack_images, Dataset, GridTargets, Scene};
use super::loss::{detection_loss_graph, LossParts};
use super::model::{decode, forward_graph, infer, DecodeSettings, ModelParams, ParamVars};
use super::sgd::{Sgd, SgdSettings};
use super::{EpochRecord, GateEpoch, GateTelemetry, TrainConfig};

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const GATE_INIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EVAL_BATCH: usize = 64;
const EVAL_IOU: f64 = 0.5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sgd_settings(c: &TrainConfig) -> SgdSettings {
    SgdSettings {
        lr: c.lr,
        momentum: c.momentum,
        weight_decay: c.weight_decay,
    }
}

fn targets_for(batch: &[&Scene], grid: usize) -> Vec<GridTargets> {
    batch.iter().map(|s| GridTargets::encode(&s.boxes, grid)).collect()
}

fn check_dataset(spec: &NetworkSpec, dataset: &Dataset) -> Result<()> {
    if dataset.train().is_empty() {
        return invalid("training set is empty");
    }
    if dataset.params.classes != spec.num_classes {
        return invalid(format!(
            "dataset has {} classes, network predicts {}",
            dataset.params.classes, spec.num_classes
        ));
    }
    if dataset.params.image_size != spec.input_size || dataset.params.grid != spec.grid_size()? {
        return invalid("dataset image size or grid does not match the network");
    }
    Ok(())
}

fn check_finite(what: &str, epoch: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} became {value} in epoch {epoch}")))
    }
}

/// Shuffled mini-batches of the training split for one epoch.
fn epoch_batches<'d>(train: &'d [Scene], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'d Scene>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &train[i]).collect())
        .collect()
}

fn wants_eval(c: &TrainConfig, epoch: usize) -> bool {
    epoch + 1 == c.epochs || (c.eval_every > 0 && (epoch + 1) % c.eval_every == 0)
}

/// mAP50 of a network on `scenes` (image indices are positions in `scenes`).
pub fn evaluate_model(spec: &NetworkSpec, params: &ModelParams, bits: &[BitWidth], scenes: &[Scene]) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (chunk_idx, chunk) in scenes.chunks(EVAL_BATCH).enumerate() {
        let first = chunk_idx * EVAL_BATCH;
        let refs: Vec<&Scene> = chunk.iter().collect();
        let (head, _) = infer(spec, params, bits, &stack_images(&refs)?)?;
        dets.extend(decode(&head, first, DecodeSettings::default())?);
        for (k, s) in chunk.iter().enumerate() {
            gts.extend(s.boxes.iter().map(|b| GroundTruth {
                image: first + k,
                class: b.class,
                bbox: b.bbox(),
            }));
        }
    }
    evaluate(&dets, &gts, spec.num_classes, EVAL_IOU)
}

fn val_map(spec: &NetworkSpec, params: &ModelParams, bits: &[BitWidth], dataset: &Dataset) -> Result<Option<f64>> {
    if dataset.val().is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate_model(spec, params, bits, dataset.val())?.map50))
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains the full-precision network from a seeded initialization.
pub fn train_teacher(spec: &NetworkSpec, config: &TrainConfig, dataset: &Dataset) -> Result<TeacherOutcome> {
    config.validate()?;
    spec.validate()?;
    check_dataset(spec, dataset)?;
    let grid = spec.grid_size()?;
    let bits = BitPlan::full_precision(spec).bits();
    let mut params = ModelParams::init(spec, config.seed)?;
    let sizes = params.weights.iter().chain(&params.biases).map(Tensor::numel);
    let mut opt = Sgd::new(sgd_settings(config), sizes.collect::<Vec<_>>());
    let mut rng = stream(config.seed, SHUFFLE_STREAM);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(dataset.train(), config.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let mut g = Graph::new();
            let vars = ParamVars::trainable(&mut g, &params);
            let x = g.constant(stack_images(batch)?);
            let out = forward_graph(&mut g, spec, &vars, &bits, x)?;
            let (loss, parts) = detection_loss_graph(&mut g, out.head, &targets_for(batch, grid))?;
            check_finite("teacher loss", epoch, parts.total())?;
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .weights
                .iter()
                .chain(&vars.biases)
                .map(|&v| g.grad(v).expect("trainable leaf").to_vec())
                .collect();
            let ModelParams { weights, biases } = &mut params;
            opt.step(
                weights
                    .iter_mut()
                    .chain(biases.iter_mut())
                    .map(Tensor::data_mut)
                    .zip(grads.iter().map(Vec::as_slice)),
            )?;
            loss_sum += parts.total();
        }
        if !params.all_finite() {
            return Err(Error::Divergence(format!("teacher weights non-finite after epoch {epoch}")));
        }
        let loss = loss_sum / batches.len() as f64;
        let val_map50 = if wants_eval(config, epoch) {
            val_map(spec, &params, &bits, dataset)?
        } else {
            None
        };
        log::info!("teacher epoch {epoch}: loss {loss:.5} val mAP50 {val_map50:?}");
        history.push(EpochRecord {
            epoch,
            loss,
            l_f: 0.0,
            l_dec: loss,
            val_map50,
            alpha_hard: vec![],
            alpha_soft: vec![],
        });
    }
    Ok(TeacherOutcome {
        checkpoint: Checkpoint::teacher(spec.clone(), params),
        history,
    })
}

/// Gradients and statistics of one student batch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub detection: LossParts,
    pub l_f: f64,
    pub loss: f64,
    /// Soft gate values per scale, per sample.
    pub gates: Vec<Vec<f64>>,
    /// Gradients of model weights, model biases, teacher-side then student-side
    /// gate projections, in that order.
    pub grads: Vec<Vec<f32>>,
}

/// Quantization-aware student training against a frozen teacher.
#[derive(Debug)]
pub struct StudentTrainer<'t> {
    teacher: &'t Checkpoint,
    config: TrainConfig,
    plan: BitPlan,
    bits: Vec<BitWidth>,
    params: ModelParams,
    gate: GateParams,
    opt: Sgd,
    noise: ChaCha8Rng,
}

impl<'t> StudentTrainer<'t> {
    /// Student latent weights start as an exact copy of the teacher's.
    pub fn new(teacher: &'t Checkpoint, config: &TrainConfig, plan: BitPlan) -> Result<Self> {
        config.validate()?;
        let spec = &teacher.spec;
        spec.validate()?;
        teacher.params.check_against(spec)?;
        plan.check_against(spec)?;
        if spec.scale_taps.is_empty() {
            return invalid("student training needs at least one distillation tap");
        }
        let gate = GateParams::init(
            &spec.tap_channels(),
            config.d_embed,
            config.tau,
            DEFAULT_OFF_LOGIT,
            config.seed ^ GATE_INIT_SALT,
        )?;
        let params = teacher.params.clone();
        let sizes: Vec<usize> = params
            .weights
            .iter()
            .chain(&params.biases)
            .chain(&gate.proj_teacher)
            .chain(&gate.proj_student)
            .map(Tensor::numel)
            .collect();
        Ok(Self {
            teacher,
            bits: plan.bits(),
            plan,
            params,
            gate,
            opt: Sgd::new(sgd_settings(config), sizes),
            noise: stream(config.seed, NOISE_STREAM),
            config: config.clone(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn plan(&self) -> &BitPlan {
        &self.plan
    }

    pub fn gate(&self) -> &GateParams {
        &self.gate
    }

    /// One `(G_on, G_off)` Gumbel pair per scale and sample.
    pub fn draw_noise(&mut self, batch: usize) -> Vec<Vec<(f64, f64)>> {
        (0..self.gate.scales())
            .map(|_| {
                (0..batch)
                    .map(|_| (sample_gumbel(&mut self.noise), sample_gumbel(&mut self.noise)))
                    .collect()
            })
            .collect()
    }

    /// Loss `β·L_F + L_dec` and its gradients for one batch; parameters are not touched.
    pub fn gradients(&self, batch: &[&Scene], noise: &[Vec<(f64, f64)>]) -> Result<StepOutcome> {
        let spec = &self.teacher.spec;
        let images = stack_images(batch)?;
        let (_, teacher_taps) = infer(
            spec,
            &self.teacher.params,
            &BitPlan::full_precision(spec).bits(),
            &images,
        )?;

        let mut g = Graph::new();
        let vars = ParamVars::trainable(&mut g, &self.params);
        let gate_vars = GateVars::register(&mut g, &self.gate);
        let x = g.constant(images);
        let out = forward_graph(&mut g, spec, &vars, &self.bits, x)?;
        let t_taps: Vec<_> = teacher_taps.into_iter().map(|t| g.constant(t)).collect();
        let logits = diagonal_logits_graph(&mut g, &out.taps, &t_taps, &gate_vars, self.gate.d_embed)?;
        if noise.len() != logits.len() {
            return invalid("one noise vector per scale is required");
        }
        let alphas = logits
            .iter()
            .zip(noise)
            .map(|(&a, n)| soft_gate_graph(&mut g, a, n, self.gate.off_logit, self.gate.tau))
            .collect::<Result<Vec<_>>>()?;
        let l_f = feature_distill_loss_graph(&mut g, &t_taps, &out.taps, &alphas)?;
        let (l_dec, detection) = detection_loss_graph(&mut g, out.head, &targets_for(batch, spec.grid_size()?))?;
        let weighted = g.scale(l_f, self.config.beta);
        let total = g.add(weighted, l_dec)?;
        g.backward(total)?;

        let gates = alphas
            .iter()
            .map(|&a| g.value(a).data().iter().map(|&v| f64::from(v)).collect())
            .collect();
        let grads = vars
            .weights
            .iter()
            .chain(&vars.biases)
            .chain(&gate_vars.proj_teacher)
            .chain(&gate_vars.proj_student)
            .map(|&v| g.grad(v).expect("trainable leaf").to_vec())
            .collect();
        let l_f = f64::from(g.value(l_f).item());
        Ok(StepOutcome {
            detection,
            l_f,
            loss: self.config.beta * l_f + detection.total(),
            gates,
            grads,
        })
    }

    /// Draws gate noise, computes gradients and applies one SGD update.
    pub fn step(&mut self, batch: &[&Scene]) -> Result<StepOutcome> {
        let noise = self.draw_noise(batch.len());
        let out = self.gradients(batch, &noise)?;
        let ModelParams { weights, biases } = &mut self.params;
        let GateParams {
            proj_teacher,
            proj_student,
            ..
        } = &mut self.gate;
        self.opt.step(
            weights
                .iter_mut()
                .chain(biases.iter_mut())
                .chain(proj_teacher.iter_mut())
                .chain(proj_student.iter_mut())
                .map(Tensor::data_mut)
                .zip(out.grads.iter().map(Vec::as_slice)),
        )?;
        Ok(out)
    }

    pub fn into_checkpoint(self, telemetry: GateTelemetry) -> Checkpoint {
        Checkpoint {
            spec: self.teacher.spec.clone(),
            params: self.params,
            bitplan: Some(self.plan),
            gate: Some(self.gate),
            telemetry: Some(telemetry),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudentOutcome {
    pub checkpoint: Checkpoint,
    pub plan: BitPlan,
    pub history: Vec<EpochRecord>,
}

/// Derives the plan from the teacher's weights, then trains the student.
pub fn train_student_ghost(teacher: &Checkpoint, config: &TrainConfig, dataset: &Dataset) -> Result<StudentOutcome> {
    config.validate()?;
    let plan = build_bit_plan(
        &teacher.spec,
        &teacher.params.weights,
        config.threshold,
        SearchSettings {
            b_min: config.b_min,
            restarts: config.restarts,
            seed: config.seed,
            exempt_first_layer: config.exempt_first_layer,
        },
    )?;
    train_student_with_plan(teacher, config, dataset, plan)
}

/// Student training under a given plan. The teacher is only read; its digest is
/// compared before and after as a guard.
pub fn train_student_with_plan(
    teacher: &Checkpoint,
    config: &TrainConfig,
    dataset: &Dataset,
    plan: BitPlan,
) -> Result<StudentOutcome> {
    check_dataset(&teacher.spec, dataset)?;
    let before = teacher.digest()?;
    let mut trainer = StudentTrainer::new(teacher, config, plan)?;
    let mut rng = stream(config.seed, SHUFFLE_STREAM);
    let mut history = Vec::with_capacity(config.epochs);
    let mut telemetry = GateTelemetry::default();
    let scales = trainer.gate.scales();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(dataset.train(), config.batch_size, &mut rng);
        let (mut loss, mut l_f, mut l_dec) = (0.0, 0.0, 0.0);
        let mut soft = vec![0.0; scales];
        let mut hard = vec![0.0; scales];
        let mut samples = 0usize;
        for batch in &batches {
            let out = trainer.step(batch)?;
            check_finite("student loss", epoch, out.loss)?;
            loss += out.loss;
            l_f += out.l_f;
            l_dec += out.detection.total();
            for (i, gates) in out.gates.iter().enumerate() {
                soft[i] += gates.iter().sum::<f64>();
                hard[i] += gates.iter().filter(|&&v| v >= 0.5).count() as f64;
            }
            samples += batch.len();
        }
        if !trainer.params.all_finite() {
            return Err(Error::Divergence(format!("student weights non-finite after epoch {epoch}")));
        }
        let n = batches.len() as f64;
        soft.iter_mut().chain(hard.iter_mut()).for_each(|v| *v /= samples as f64);
        let val_map50 = if wants_eval(config, epoch) {
            val_map(&teacher.spec, &trainer.params, &trainer.bits, dataset)?
        } else {
            None
        };
        log::info!(
            "student epoch {epoch}: loss {:.5} L_F {:.5} L_dec {:.5} val mAP50 {val_map50:?} gates {soft:.3?}",
            loss / n,
            l_f / n,
            l_dec / n
        );
        telemetry.epochs.push(GateEpoch {
            epoch,
            alpha_soft: soft.clone(),
            alpha_hard: hard.clone(),
        });
        history.push(EpochRecord {
            epoch,
            loss: loss / n,
            l_f: l_f / n,
            l_dec: l_dec / n,
            val_map50,
            alpha_hard: hard,
            alpha_soft: soft,
        });
    }
    if teacher.digest()? != before {
        return Err(Error::TeacherModified);
    }
    let plan = trainer.plan.clone();
    Ok(StudentOutcome {
        checkpoint: trainer.into_checkpoint(telemetry),
        plan,
        history,
    })
}
