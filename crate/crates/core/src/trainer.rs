//! Continual training loop.
//!
//! Each task runs a fixed number of SGD steps on
//! `L = L_CE + λ·L_CD + β·L_MAP`, with the per-layer weight gradient projected
//! into the null space of all previously absorbed tasks before the update.
//! After a task finishes, its training activations are folded into the gram
//! accumulator and the projector is rebuilt.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{backward, forward, DualEncoder, EncoderStack, Gradients};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::{self, CombinedLoss, LossOutput, LossWeights};
use crate::metrics::{evaluate_accuracy, track_gap, AccuracyMatrix, GapSeries, Probe};
use crate::projection::{build_projector, project_update, GramAccumulator, Projector, StreamingGram};
use crate::tasks::{ReferenceSet, Split, TaskDataset};

/// Which components of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Projection plus distillation plus alignment.
    GnspFull,
    /// Projection with the plain classification loss.
    GnspOnly,
    /// Distillation without projection.
    CdOnly,
    /// Unconstrained fine-tuning on the classification loss.
    PlainFinetune,
}

impl Method {
    pub fn uses_projection(self) -> bool {
        matches!(self, Method::GnspFull | Method::GnspOnly)
    }

    /// Effective loss weights given the configured ones.
    pub fn weights(self, configured: LossWeights) -> LossWeights {
        match self {
            Method::GnspFull => configured,
            Method::CdOnly => LossWeights {
                lambda_cd: configured.lambda_cd,
                beta_map: 0.0,
            },
            Method::GnspOnly | Method::PlainFinetune => LossWeights {
                lambda_cd: 0.0,
                beta_map: 0.0,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::GnspFull => "GNSP_FULL",
            Method::GnspOnly => "GNSP_ONLY",
            Method::CdOnly => "CD_ONLY",
            Method::PlainFinetune => "PLAIN_FINETUNE",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GNSP_FULL" => Ok(Method::GnspFull),
            "GNSP_ONLY" => Ok(Method::GnspOnly),
            "CD_ONLY" => Ok(Method::CdOnly),
            "PLAIN_FINETUNE" => Ok(Method::PlainFinetune),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// Experimental: the projector is applied to the final Adam step, not to
    /// the raw gradient, so the null-space constraint still holds exactly.
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub iterations_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub lambda_cd: f64,
    pub beta_map: f64,
    pub method: Method,
    pub include_reference_gram: bool,
    pub seed: u64,
    /// Maximum number of training rows streamed into each task's gram.
    pub capture_cap: usize,
    pub optimizer: Optimizer,
    pub cd_temperature: f64,
    pub map_temperature: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            iterations_per_task: 500,
            batch_size: 64,
            learning_rate: 0.05,
            rho: crate::projection::DEFAULT_RHO,
            lambda_cd: losses::DEFAULT_LAMBDA_CD,
            beta_map: losses::DEFAULT_BETA_MAP,
            method: Method::GnspFull,
            include_reference_gram: false,
            seed: 0,
            capture_cap: 10_000,
            optimizer: Optimizer::Sgd,
            cd_temperature: 0.07,
            map_temperature: 0.07,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.capture_cap == 0 {
            return bad("capture_cap must be positive");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        LossWeights::new(self.lambda_cd, self.beta_map)?;
        if !(self.cd_temperature > 0.0 && self.map_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.method.weights(LossWeights {
            lambda_cd: self.lambda_cd,
            beta_map: self.beta_map,
        })
    }
}

/// Everything that evolves across the task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualState {
    pub model: DualEncoder,
    /// Frozen copy of the initial model, used as distillation teacher.
    pub teacher: DualEncoder,
    pub gram: GramAccumulator,
    pub projector: Option<Projector>,
    /// Number of tasks trained so far.
    pub task_index: usize,
    pub rng: ChaCha8Rng,
}

impl ContinualState {
    pub fn new(model: DualEncoder, reference: &ReferenceSet, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let gram = GramAccumulator::new(&model.image_encoder.layer_input_dims());
        let mut state = Self {
            teacher: model.clone(),
            model,
            gram,
            projector: None,
            task_index: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        if cfg.include_reference_gram {
            state.absorb(&reference.images, cfg)?;
        }
        Ok(state)
    }

    /// Streams `images` through the image encoder, folds the resulting grams
    /// into the accumulator and rebuilds the projector.
    pub fn absorb(&mut self, images: &Matrix, cfg: &TrainerConfig) -> Result<()> {
        let grams = capture_grams(&self.model.image_encoder, images, cfg.batch_size, cfg.capture_cap)?;
        self.gram.accumulate(&grams)?;
        self.projector = Some(build_projector(&self.gram, cfg.rho)?);
        Ok(())
    }
}

/// Per-layer normalized grams of the first `cap` rows of `images`.
pub fn capture_grams(encoder: &EncoderStack, images: &Matrix, chunk: usize, cap: usize) -> Result<Vec<Matrix>> {
    let mut stream = StreamingGram::new(&encoder.layer_input_dims(), cap);
    let mut start = 0;
    while start < images.rows() && !stream.is_full() {
        let end = (start + chunk).min(images.rows());
        let (_, trace) = forward(encoder, &images.row_range(start, end), true)?;
        stream.absorb(trace.as_ref().expect("capture requested"))?;
        start = end;
    }
    stream.finish()
}

/// Draws batches without replacement, reshuffling at every epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Inputs for one evaluation of the combined objective. Text-side embeddings
/// come from the frozen text tower and are passed in precomputed.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveBatch<'a> {
    pub task_images: &'a Matrix,
    pub labels: &'a [usize],
    pub class_text_emb: &'a Matrix,
    pub ref_images: &'a Matrix,
    pub ref_text_emb: &'a Matrix,
    /// Teacher logits `S⁰/τ` for the reference batch.
    pub teacher_logits: &'a Matrix,
}

/// The combined training objective and its temperatures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub ce_temperature: f64,
    pub cd_temperature: f64,
    pub map_temperature: f64,
}

impl Objective {
    pub fn new(cfg: &TrainerConfig, model: &DualEncoder) -> Self {
        Self {
            weights: cfg.loss_weights(),
            ce_temperature: model.temperature(),
            cd_temperature: cfg.cd_temperature,
            map_temperature: cfg.map_temperature,
        }
    }

    fn uses_reference(&self) -> bool {
        self.weights.lambda_cd > 0.0 || self.weights.beta_map > 0.0
    }

    /// Loss value and weight gradients of the image encoder.
    pub fn evaluate(
        &self,
        image_encoder: &EncoderStack,
        batch: &ObjectiveBatch<'_>,
    ) -> Result<(CombinedLoss, Gradients)> {
        let (task_emb, task_trace) = forward(image_encoder, batch.task_images, true)?;
        let ce = losses::classification_loss(&task_emb, batch.class_text_emb, batch.labels, self.ce_temperature)?;
        let mut grads = backward(
            image_encoder,
            task_trace.as_ref().expect("captured"),
            &ce.d_image_embeddings,
        )?;

        let (cd, map) = if self.uses_reference() {
            let (ref_emb, ref_trace) = forward(image_encoder, batch.ref_images, true)?;
            let cd = losses::cd_loss_from_teacher_logits(
                batch.teacher_logits,
                &ref_emb,
                batch.ref_text_emb,
                self.cd_temperature,
            )?;
            let map = losses::map_loss(&ref_emb, batch.ref_text_emb, self.map_temperature)?;
            let mut upstream = cd.d_image_embeddings.scale(self.weights.lambda_cd);
            upstream.axpy(self.weights.beta_map, &map.d_image_embeddings)?;
            let ref_grads = backward(image_encoder, ref_trace.as_ref().expect("captured"), &upstream)?;
            grads.axpy(1.0, &ref_grads)?;
            (cd, map)
        } else {
            let zero = LossOutput {
                value: 0.0,
                d_image_embeddings: Matrix::zeros(0, 0),
                d_text_embeddings: Matrix::zeros(0, 0),
            };
            (zero.clone(), zero)
        };
        Ok((losses::total_loss(&ce, &cd, &map, self.weights), grads))
    }

    /// Loss value only.
    pub fn value(&self, image_encoder: &EncoderStack, batch: &ObjectiveBatch<'_>) -> Result<f64> {
        let task_emb = image_encoder.embed(batch.task_images)?;
        let mut v =
            losses::classification_loss(&task_emb, batch.class_text_emb, batch.labels, self.ce_temperature)?.value;
        if self.uses_reference() {
            let ref_emb = image_encoder.embed(batch.ref_images)?;
            let cd = losses::cd_loss_from_teacher_logits(
                batch.teacher_logits,
                &ref_emb,
                batch.ref_text_emb,
                self.cd_temperature,
            )?;
            let map = losses::map_loss(&ref_emb, batch.ref_text_emb, self.map_temperature)?;
            v += self.weights.lambda_cd * cd.value + self.weights.beta_map * map.value;
        }
        Ok(v)
    }
}

/// First and second moment estimates for the experimental Adam mode.
struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(grads: &Gradients) -> Self {
        let zeros: Vec<Matrix> = grads.layers.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Converts a raw gradient into an (unscaled by lr) Adam step.
    fn direction(&mut self, grads: &Gradients) -> Gradients {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let layers = grads
            .layers
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for (((o, &gi), mi), vi) in out
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                    *o = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                }
                out
            })
            .collect();
        Gradients { layers }
    }
}

/// Trains the current model on one task, then absorbs the task's gram.
pub fn train_task(
    state: &mut ContinualState,
    task: &TaskDataset,
    reference: &ReferenceSet,
    cfg: &TrainerConfig,
) -> Result<()> {
    cfg.validate()?;
    if task.is_empty() {
        return Err(Error::Empty("train_task"));
    }
    if task.split != Split::Train {
        return Err(Error::InvalidArgument(format!("{} is not a training split", task.name)));
    }
    let objective = Objective::new(cfg, &state.model);
    let class_text_emb = state.model.embed_texts(&task.class_prototypes)?;

    // The teacher and the text tower are frozen, so their reference embeddings
    // are fixed for the whole task.
    let uses_reference = objective.uses_reference() && !reference.is_empty();
    let (ref_text_emb, teacher_img_emb) = if uses_reference {
        (
            state.model.embed_texts(&reference.texts)?,
            state.teacher.embed_images(&reference.images)?,
        )
    } else {
        (Matrix::zeros(0, 0), Matrix::zeros(0, 0))
    };
    let objective = if uses_reference {
        objective
    } else {
        Objective {
            weights: LossWeights {
                lambda_cd: 0.0,
                beta_map: 0.0,
            },
            ..objective
        }
    };

    let project = cfg.method.uses_projection();
    let mut task_sampler = BatchSampler::new(task.len());
    let mut ref_sampler = BatchSampler::new(reference.len());
    let mut adam = None;

    for iteration in 0..cfg.iterations_per_task {
        let idx = task_sampler.next_batch(cfg.batch_size, &mut state.rng);
        let task_images = task.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| task.labels[i]).collect();

        let (ref_images, ref_text, teacher_logits) = if uses_reference {
            let ridx = ref_sampler.next_batch(cfg.batch_size, &mut state.rng);
            let ref_text = ref_text_emb.select_rows(&ridx);
            let teacher = linalg::cosine_sim_matrix(&teacher_img_emb.select_rows(&ridx), &ref_text)?
                .scale(1.0 / objective.cd_temperature);
            (reference.images.select_rows(&ridx), ref_text, teacher)
        } else {
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0), Matrix::zeros(0, 0))
        };

        let batch = ObjectiveBatch {
            task_images: &task_images,
            labels: &labels,
            class_text_emb: &class_text_emb,
            ref_images: &ref_images,
            ref_text_emb: &ref_text,
            teacher_logits: &teacher_logits,
        };
        let (loss, grads) = objective.evaluate(&state.model.image_encoder, &batch)?;
        if !loss.value.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite { iteration });
        }

        let direction = match cfg.optimizer {
            Optimizer::Sgd => grads,
            Optimizer::Adam => adam.get_or_insert_with(|| AdamState::new(&grads)).direction(&grads),
        };
        let delta = match (&state.projector, project) {
            (Some(p), true) => project_update(p, &direction)?,
            _ => direction,
        };
        apply_update(&mut state.model.image_encoder, &delta, cfg.learning_rate);
        if !state.model.image_encoder.layers.iter().all(|l| l.weight.is_finite()) {
            return Err(Error::NonFinite { iteration });
        }
    }

    state.absorb(&task.images, cfg)?;
    state.task_index += 1;
    Ok(())
}

/// `W ← W − lr·ΔW` on trainable layers. Biases are never touched.
fn apply_update(encoder: &mut EncoderStack, delta: &Gradients, lr: f64) {
    for (layer, d) in encoder.layers.iter_mut().zip(&delta.layers) {
        if layer.trainable {
            for (w, &g) in layer.weight.data_mut().iter_mut().zip(d.data()) {
                *w -= lr * g;
            }
        }
    }
}

/// Contrastive alignment of the image tower to the (frozen) text tower on
/// paired data, used to build an aligned initial model before any task.
pub fn pretrain_alignment(
    model: &mut DualEncoder,
    corpus: &ReferenceSet,
    iterations: usize,
    learning_rate: f64,
    batch_size: usize,
    temperature: f64,
    seed: u64,
) -> Result<()> {
    if iterations == 0 {
        return Ok(());
    }
    if corpus.is_empty() || batch_size == 0 {
        return Err(Error::Empty("pretrain_alignment"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_emb = model.embed_texts(&corpus.texts)?;
    let mut sampler = BatchSampler::new(corpus.len());
    for iteration in 0..iterations {
        let idx = sampler.next_batch(batch_size, &mut rng);
        let (emb, trace) = forward(&model.image_encoder, &corpus.images.select_rows(&idx), true)?;
        let loss = losses::map_loss(&emb, &text_emb.select_rows(&idx), temperature)?;
        let grads = backward(
            &model.image_encoder,
            trace.as_ref().expect("captured"),
            &loss.d_image_embeddings,
        )?;
        if !grads.is_finite() {
            return Err(Error::NonFinite { iteration });
        }
        apply_update(&mut model.image_encoder, &grads, learning_rate);
    }
    Ok(())
}

/// Result of a full task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: ContinualState,
    pub accuracy: AccuracyMatrix,
    pub gaps: GapSeries,
}

/// Evaluates every test split with the current model.
pub fn evaluate_all(model: &DualEncoder, tasks: &[(TaskDataset, TaskDataset)]) -> Result<Vec<f64>> {
    tasks.iter().map(|(_, test)| evaluate_accuracy(model, test)).collect()
}

/// Trains on each task in turn, evaluating all test splits and every probe's
/// modality gap before the first task and after each one.
pub fn run_sequence(
    initial: DualEncoder,
    tasks: &[(TaskDataset, TaskDataset)],
    reference: &ReferenceSet,
    probes: &[Probe],
    cfg: &TrainerConfig,
) -> Result<RunOutcome> {
    if tasks.is_empty() {
        return Err(Error::Empty("run_sequence"));
    }
    let mut state = ContinualState::new(initial, reference, cfg)?;
    let mut accuracy = AccuracyMatrix::new(tasks.iter().map(|(t, _)| t.name.clone()).collect());
    let mut gaps = GapSeries::default();

    let record =
        |state: &ContinualState, row: usize, accuracy: &mut AccuracyMatrix, gaps: &mut GapSeries| -> Result<()> {
            for (j, a) in evaluate_all(&state.model, tasks)?.into_iter().enumerate() {
                accuracy.grid.set(row, j, a);
            }
            track_gap(&state.model, probes, row, gaps)
        };

    record(&state, 0, &mut accuracy, &mut gaps)?;
    for (t, (train, _)) in tasks.iter().enumerate() {
        train_task(&mut state, train, reference, cfg)?;
        record(&state, t + 1, &mut accuracy, &mut gaps)?;
    }
    Ok(RunOutcome { state, accuracy, gaps })
}
