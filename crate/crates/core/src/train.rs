//! Two-stage optimization: supervised contrastive training of the feature
//! extractor + projection head, then binary cross-entropy training of the
//! classifier on frozen features.
//!
//! All randomness flows from the config seed through a counter-based RNG, so
//! a (seed, data, config) triple fully determines both checkpoints.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureTensor;
use crate::model::{
    encode_batch, extract_features_batch, extractor_checksum, BnMode, GraphBinding, MagLiveModel,
    ModelError,
};
use crate::nn::{Graph, NnError, Parameter};
use crate::trace::Label;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("batch composition: {0}")]
    BatchComposition(String),
    #[error("training diverged at stage {stage} step {step}: {msg}")]
    Diverged { stage: u8, step: usize, msg: String },
    #[error("frozen extractor changed during classifier training")]
    ExtractorThawed,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl TrainError {
    fn from_nn(stage: u8, step: usize, e: NnError) -> Self {
        match e {
            NnError::BatchComposition(msg) => TrainError::BatchComposition(msg),
            NnError::NonFinite(msg) => TrainError::Diverged { stage, step, msg },
            other => TrainError::Model(ModelError::Nn(other)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Total batch size; halves are class-balanced.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs_stage1: 60,
            epochs_stage2: 60,
            seed: 0,
        }
    }
}

/// One preprocessed segment with its label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureTensor,
    pub label: Label,
}

fn label_bit(label: Label) -> u8 {
    match label {
        Label::Human => 1,
        Label::Loudspeaker => 0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Wall-clock milliseconds since the stage started.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Supervised contrastive loss (production entry point)
// ---------------------------------------------------------------------------

/// Eq-style supervised contrastive loss over unit-norm embeddings, computed
/// through the same graph op the training loop differentiates.
pub fn supcon_loss(z: &[Vec<f64>], labels: &[u8], tau: f64) -> Result<f64, TrainError> {
    if z.is_empty() || z.len() != labels.len() {
        return Err(TrainError::BatchComposition(format!(
            "batch of {} embeddings with {} labels",
            z.len(),
            labels.len()
        )));
    }
    if tau <= 0.0 {
        return Err(TrainError::Dataset(format!("temperature must be positive, got {tau}")));
    }
    let d = z[0].len();
    let flat: Vec<f64> = z.iter().flat_map(|row| row.iter().copied()).collect();
    let mut g = Graph::new();
    let zc = g.constant(
        crate::nn::Tensor::new(vec![z.len(), d], flat).map_err(|e| TrainError::from_nn(1, 0, e))?,
    );
    let loss = g
        .supcon_loss(zc, tau, labels.to_vec())
        .map_err(|e| TrainError::from_nn(1, 0, e))?;
    Ok(g.value(loss).item())
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Shuffled class-balanced batches of sample indices. Every batch carries at
/// least two samples of each class so every anchor has a positive; a final
/// partial batch is kept only when it still satisfies that constraint.
pub fn make_batches(
    labels: &[Label],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let half = cfg.batch_size / 2;
    if half < 2 {
        return Err(TrainError::Dataset(format!(
            "batch size {} cannot hold two samples per class",
            cfg.batch_size
        )));
    }
    let mut humans: Vec<usize> = Vec::new();
    let mut speakers: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Label::Human => humans.push(i),
            Label::Loudspeaker => speakers.push(i),
        }
    }
    if humans.len() < 2 || speakers.len() < 2 {
        return Err(TrainError::Dataset(format!(
            "each class needs at least 2 samples, got {} human / {} loudspeaker",
            humans.len(),
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    humans.shuffle(&mut rng);
    speakers.shuffle(&mut rng);

    let mut batches = Vec::new();
    let full = humans.len().min(speakers.len()) / half;
    for b in 0..full {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        batch.extend_from_slice(&humans[b * half..(b + 1) * half]);
        batch.extend_from_slice(&speakers[b * half..(b + 1) * half]);
        batches.push(batch);
    }
    let rem = humans.len().min(speakers.len()) - full * half;
    let rem = rem.min(humans.len() - full * half).min(speakers.len() - full * half);
    if rem >= 2 {
        let mut batch = Vec::with_capacity(2 * rem);
        batch.extend_from_slice(&humans[full * half..full * half + rem]);
        batch.extend_from_slice(&speakers[full * half..full * half + rem]);
        batches.push(batch);
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, param: &mut Parameter, grad: &[f64]) {
        let (m, v) = self
            .moments
            .entry(param.name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for ((p, &g), (m, v)) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Stage 1: contrastive training of extractor + projection
// ---------------------------------------------------------------------------

fn apply_gradients(
    model: &mut MagLiveModel,
    graph: &Graph,
    binding: &GraphBinding,
    adam: &mut Adam,
) {
    adam.begin_step();
    // Canonical parameter order keeps accumulation deterministic.
    model.for_each_param_mut(|p| {
        if !p.trainable {
            return;
        }
        let Some(node) = binding.node(&p.name) else { return };
        let Some(grad) = graph.grad(node) else { return };
        let grad = grad.data().to_vec();
        adam.update(p, &grad);
    });
}

/// Minimizes the supervised contrastive loss over the extractor and
/// projection head. Epoch losses are monitored: an increase across any
/// 5-epoch window is recorded as a warning, not an error.
pub fn train_extractor(
    model: &mut MagLiveModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut epoch_hook: impl FnMut(&EpochRecord, &MagLiveModel),
) -> Result<TrainLog, TrainError> {
    let labels: Vec<Label> = data.iter().map(|s| s.label).collect();
    let mut adam = Adam::new(cfg);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;
    let stage_start = std::time::Instant::now();

    for epoch in 0..cfg.epochs_stage1 {
        let batches = make_batches(&labels, cfg, cfg.seed.wrapping_add(epoch as u64))?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let tensors: Vec<&FeatureTensor> = batch.iter().map(|&i| &data[i].features).collect();
            let batch_labels: Vec<u8> = batch.iter().map(|&i| label_bit(data[i].label)).collect();
            let (env, spec) = encode_batch(&tensors)?;

            let mut g = Graph::new();
            let mut binding = GraphBinding::default();
            let env = g.constant(env);
            let spec = g.constant(spec);
            let wrap = |e: NnError| TrainError::from_nn(1, global_step, e);
            let h = model
                .extractor
                .forward(&mut g, &mut binding, env, spec, BnMode::Train)
                .map_err(wrap)?;
            let z = model.projection.forward(&mut g, &mut binding, h).map_err(wrap)?;
            let loss = g.supcon_loss(z, cfg.tau, batch_labels).map_err(wrap)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    stage: 1,
                    step: global_step,
                    msg: format!("loss = {loss_value}"),
                });
            }
            g.backward(loss).map_err(wrap)?;
            apply_gradients(model, &g, &binding, &mut adam);
            model.extractor.update_running_stats(&g, &binding);

            log.steps.push(StepRecord {
                stage: 1,
                epoch,
                step: global_step,
                loss: loss_value,
                learning_rate: cfg.learning_rate,
                wall_ms: stage_start.elapsed().as_secs_f64() * 1e3,
            });
            epoch_loss += loss_value;
            global_step += 1;
        }
        let record = EpochRecord {
            stage: 1,
            epoch,
            mean_loss: epoch_loss / batches.len().max(1) as f64,
            steps: batches.len(),
        };
        epoch_hook(&record, model);
        log.epochs.push(record);
    }

    let losses: Vec<f64> = log
        .epochs
        .iter()
        .filter(|e| e.stage == 1)
        .map(|e| e.mean_loss)
        .collect();
    for w in losses.windows(5) {
        if w[4] > w[0] {
            log.warnings.push(format!(
                "stage-1 loss increased over a 5-epoch window: {:.6} -> {:.6}",
                w[0], w[4]
            ));
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Stage 2: classifier on frozen features
// ---------------------------------------------------------------------------

/// Minimizes mean binary cross-entropy of the classifier head over frozen
/// 128-float features.
pub fn train_classifier(
    model: &mut MagLiveModel,
    features: &[(Vec<f64>, Label)],
    cfg: &TrainConfig,
    mut epoch_hook: impl FnMut(&EpochRecord, &MagLiveModel),
) -> Result<TrainLog, TrainError> {
    let labels: Vec<Label> = features.iter().map(|(_, l)| *l).collect();
    let mut adam = Adam::new(cfg);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;
    let dim = crate::model::FEATURE_DIM;
    let stage_start = std::time::Instant::now();

    for epoch in 0..cfg.epochs_stage2 {
        let batches = make_batches(&labels, cfg, cfg.seed.wrapping_add(0x5eed).wrapping_add(epoch as u64))?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut flat = Vec::with_capacity(batch.len() * dim);
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in batch {
                flat.extend_from_slice(&features[i].0);
                batch_labels.push(label_bit(features[i].1) as f64);
            }
            let wrap = |e: NnError| TrainError::from_nn(2, global_step, e);
            let mut g = Graph::new();
            let mut binding = GraphBinding::default();
            let x = g.constant(
                crate::nn::Tensor::new(vec![batch.len(), dim], flat).map_err(wrap)?,
            );
            let p = model.classifier.forward(&mut g, &mut binding, x).map_err(wrap)?;
            let loss = g.bce_loss(p, batch_labels).map_err(wrap)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    stage: 2,
                    step: global_step,
                    msg: format!("loss = {loss_value}"),
                });
            }
            g.backward(loss).map_err(wrap)?;
            apply_gradients(model, &g, &binding, &mut adam);

            log.steps.push(StepRecord {
                stage: 2,
                epoch,
                step: global_step,
                loss: loss_value,
                learning_rate: cfg.learning_rate,
                wall_ms: stage_start.elapsed().as_secs_f64() * 1e3,
            });
            epoch_loss += loss_value;
            global_step += 1;
        }
        let record = EpochRecord {
            stage: 2,
            epoch,
            mean_loss: epoch_loss / batches.len().max(1) as f64,
            steps: batches.len(),
        };
        epoch_hook(&record, model);
        log.epochs.push(record);
    }
    Ok(log)
}

/// Runs both stages: contrastive training, then classifier training on the
/// frozen extractor's features. The extractor checksum is asserted unchanged
/// through stage 2.
pub fn train_pipeline(
    model: &mut MagLiveModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut epoch_hook: impl FnMut(&EpochRecord, &MagLiveModel),
) -> Result<TrainLog, TrainError> {
    let mut log = train_extractor(model, data, cfg, &mut epoch_hook)?;

    let checksum_before = extractor_checksum(&model.extractor);
    let tensors: Vec<&FeatureTensor> = data.iter().map(|s| &s.features).collect();
    let feature_vecs = extract_features_batch(&model.extractor, &tensors)?;
    let features: Vec<(Vec<f64>, Label)> = feature_vecs
        .into_iter()
        .zip(data.iter().map(|s| s.label))
        .collect();

    let stage2 = train_classifier(model, &features, cfg, &mut epoch_hook)?;
    if extractor_checksum(&model.extractor) != checksum_before {
        return Err(TrainError::ExtractorThawed);
    }
    log.steps.extend(stage2.steps);
    log.epochs.extend(stage2.epochs);
    log.warnings.extend(stage2.warnings);
    Ok(log)
}
