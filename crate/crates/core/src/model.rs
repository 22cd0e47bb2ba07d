//! The liveness feature extractor and classifier.
//!
//! Two convolutional branches (a 1-D branch over the segment envelope and a
//! 2-D branch over the magnitude/phase spectrograms) are fused by a
//! squeeze-and-excitation block into a 128-dimensional feature. A projection
//! head produces unit-norm embeddings for contrastive training; a small
//! classifier head maps features to a human-vs-loudspeaker probability.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dsp::{FeatureTensor, SEGMENT_LEN, SPEC_BINS, SPEC_FRAMES};
use crate::nn::{self, Graph, NnError, NodeId, Parameter, Tensor};

pub const FEATURE_DIM: usize = 128;
pub const BRANCH_DIM: usize = 64;
pub const PROJECTION_DIM: usize = 64;
pub const CLASSIFIER_HIDDEN: usize = 32;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Verdict threshold on the classifier probability.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Inference,
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

impl Conv1dLayer {
    fn init(rng: &mut ChaCha8Rng, prefix: &str, k: usize, ci: usize, co: usize) -> Self {
        Self {
            w: Parameter::new(format!("{prefix}.w"), xavier(rng, vec![k, ci, co], k * ci, k * co), true),
            b: Parameter::new(format!("{prefix}.b"), Tensor::zeros(vec![co]), true),
        }
    }
}

impl Conv2dLayer {
    fn init(rng: &mut ChaCha8Rng, prefix: &str, ci: usize, co: usize) -> Self {
        Self {
            w: Parameter::new(
                format!("{prefix}.w"),
                xavier(rng, vec![3, 3, ci, co], 9 * ci, 9 * co),
                true,
            ),
            b: Parameter::new(format!("{prefix}.b"), Tensor::zeros(vec![co]), true),
        }
    }
}

impl DenseLayer {
    fn init(rng: &mut ChaCha8Rng, prefix: &str, fin: usize, fout: usize) -> Self {
        Self {
            w: Parameter::new(format!("{prefix}.w"), xavier(rng, vec![fin, fout], fin, fout), true),
            b: Parameter::new(format!("{prefix}.b"), Tensor::zeros(vec![fout]), true),
        }
    }
}

impl BatchNormLayer {
    fn init(prefix: &str, c: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::new(vec![c], vec![1.0; c]).unwrap(), true),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(vec![c]), true),
            running_mean: Parameter::new(format!("{prefix}.running_mean"), Tensor::zeros(vec![c]), false),
            running_var: Parameter::new(
                format!("{prefix}.running_var"),
                Tensor::new(vec![c], vec![1.0; c]).unwrap(),
                false,
            ),
        }
    }

    /// Folds batch statistics into the running statistics (momentum update).
    pub fn absorb_batch_stats(&mut self, mean: &[f64], var: &[f64]) {
        for (r, &m) in self.running_mean.value.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

// ---------------------------------------------------------------------------
// Graph binding
// ---------------------------------------------------------------------------

/// Node ids created for one forward build: parameters by name, plus the
/// outputs of train-mode batchnorm ops for running-stat updates.
#[derive(Debug, Default)]
pub struct GraphBinding {
    params: Vec<(String, NodeId)>,
    bn_outputs: Vec<(String, NodeId)>,
}

impl GraphBinding {
    fn bind(&mut self, g: &mut Graph, p: &Parameter) -> NodeId {
        let id = if p.trainable {
            g.param(p.value.clone(), p.name.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.params.push((p.name.clone(), id));
        id
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find_map(|(n, id)| (n == name).then_some(*id))
    }

    pub fn bn_output(&self, prefix: &str) -> Option<NodeId> {
        self.bn_outputs
            .iter()
            .find_map(|(n, id)| (n == prefix).then_some(*id))
    }
}

fn bn_forward(
    g: &mut Graph,
    binding: &mut GraphBinding,
    layer: &BatchNormLayer,
    x: NodeId,
    mode: BnMode,
) -> Result<NodeId, NnError> {
    let gamma = binding.bind(g, &layer.gamma);
    let beta = binding.bind(g, &layer.beta);
    match mode {
        BnMode::Train => {
            let y = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
            let prefix = layer
                .gamma
                .name
                .strip_suffix(".gamma")
                .unwrap_or(&layer.gamma.name)
                .to_string();
            binding.bn_outputs.push((prefix, y));
            Ok(y)
        }
        BnMode::Inference => {
            let rm = binding.bind(g, &layer.running_mean);
            let rv = binding.bind(g, &layer.running_var);
            g.batchnorm_infer(x, gamma, beta, rm, rv, BN_EPS)
        }
    }
}

fn dense_forward(
    g: &mut Graph,
    binding: &mut GraphBinding,
    layer: &DenseLayer,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let w = binding.bind(g, &layer.w);
    let b = binding.bind(g, &layer.b);
    g.dense(x, w, b)
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// SE-style fusion block: squeeze each branch to its mean, expand 2 -> 8 -> 2,
/// and scale the branches by the resulting sigmoid weights.
#[derive(Debug, Clone)]
pub struct SafBlock {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    // 1-D branch over the envelope
    pub conv1: Conv1dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv1dLayer,
    pub bn2: BatchNormLayer,
    pub conv3: Conv1dLayer,
    pub bn3: BatchNormLayer,
    pub fc1d: DenseLayer,
    // 2-D branch over the spectrograms
    pub conv2d_1: Conv2dLayer,
    pub bn2d_1: BatchNormLayer,
    pub conv2d_2: Conv2dLayer,
    pub bn2d_2: BatchNormLayer,
    pub fc2d: DenseLayer,
    pub saf: SafBlock,
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

/// Extractor, projection head, and classifier bundled for checkpointing.
#[derive(Debug, Clone)]
pub struct MagLiveModel {
    pub extractor: FeatureExtractor,
    pub projection: ProjectionHead,
    pub classifier: ClassifierHead,
}

impl FeatureExtractor {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv1dLayer::init(rng, "sub1.conv1", 3, 1, 16),
            bn1: BatchNormLayer::init("sub1.bn1", 16),
            conv2: Conv1dLayer::init(rng, "sub1.conv2", 3, 16, 32),
            bn2: BatchNormLayer::init("sub1.bn2", 32),
            conv3: Conv1dLayer::init(rng, "sub1.conv3", 3, 32, 16),
            bn3: BatchNormLayer::init("sub1.bn3", 16),
            fc1d: DenseLayer::init(rng, "sub1.fc", 752, BRANCH_DIM),
            conv2d_1: Conv2dLayer::init(rng, "sub2.conv1", 2, 16),
            bn2d_1: BatchNormLayer::init("sub2.bn1", 16),
            conv2d_2: Conv2dLayer::init(rng, "sub2.conv2", 16, 32),
            bn2d_2: BatchNormLayer::init("sub2.bn2", 32),
            fc2d: DenseLayer::init(rng, "sub2.fc", 960, BRANCH_DIM),
            saf: SafBlock {
                fc1: DenseLayer::init(rng, "saf.fc1", 2, 8),
                fc2: DenseLayer::init(rng, "saf.fc2", 8, 2),
            },
        }
    }

    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(&'a Parameter)) {
        fn bn<'a>(b: &'a BatchNormLayer, f: &mut dyn FnMut(&'a Parameter)) {
            f(&b.gamma);
            f(&b.beta);
            f(&b.running_mean);
            f(&b.running_var);
        }
        f(&self.conv1.w);
        f(&self.conv1.b);
        bn(&self.bn1, &mut f);
        f(&self.conv2.w);
        f(&self.conv2.b);
        bn(&self.bn2, &mut f);
        f(&self.conv3.w);
        f(&self.conv3.b);
        bn(&self.bn3, &mut f);
        f(&self.fc1d.w);
        f(&self.fc1d.b);
        f(&self.conv2d_1.w);
        f(&self.conv2d_1.b);
        bn(&self.bn2d_1, &mut f);
        f(&self.conv2d_2.w);
        f(&self.conv2d_2.b);
        bn(&self.bn2d_2, &mut f);
        f(&self.fc2d.w);
        f(&self.fc2d.b);
        f(&self.saf.fc1.w);
        f(&self.saf.fc1.b);
        f(&self.saf.fc2.w);
        f(&self.saf.fc2.b);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Parameter)) {
        let bn = |b: &mut BatchNormLayer, f: &mut dyn FnMut(&mut Parameter)| {
            f(&mut b.gamma);
            f(&mut b.beta);
            f(&mut b.running_mean);
            f(&mut b.running_var);
        };
        f(&mut self.conv1.w);
        f(&mut self.conv1.b);
        bn(&mut self.bn1, &mut f);
        f(&mut self.conv2.w);
        f(&mut self.conv2.b);
        bn(&mut self.bn2, &mut f);
        f(&mut self.conv3.w);
        f(&mut self.conv3.b);
        bn(&mut self.bn3, &mut f);
        f(&mut self.fc1d.w);
        f(&mut self.fc1d.b);
        f(&mut self.conv2d_1.w);
        f(&mut self.conv2d_1.b);
        bn(&mut self.bn2d_1, &mut f);
        f(&mut self.conv2d_2.w);
        f(&mut self.conv2d_2.b);
        bn(&mut self.bn2d_2, &mut f);
        f(&mut self.fc2d.w);
        f(&mut self.fc2d.b);
        f(&mut self.saf.fc1.w);
        f(&mut self.saf.fc1.b);
        f(&mut self.saf.fc2.w);
        f(&mut self.saf.fc2.b);
    }

    /// Builds the extractor forward pass; returns the (N, 128) fused feature.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &mut GraphBinding,
        env: NodeId,
        spec: NodeId,
        mode: BnMode,
    ) -> Result<NodeId, NnError> {
        // Branch 1: envelope (N, 100, 1)
        let w = binding.bind(g, &self.conv1.w);
        let b = binding.bind(g, &self.conv1.b);
        let x = g.conv1d(env, w, b)?;
        let x = bn_forward(g, binding, &self.bn1, x, mode)?;
        let x = g.relu(x)?;
        let w = binding.bind(g, &self.conv2.w);
        let b = binding.bind(g, &self.conv2.b);
        let x = g.conv1d(x, w, b)?;
        let x = bn_forward(g, binding, &self.bn2, x, mode)?;
        let x = g.relu(x)?;
        let w = binding.bind(g, &self.conv3.w);
        let b = binding.bind(g, &self.conv3.b);
        let x = g.conv1d(x, w, b)?;
        let x = bn_forward(g, binding, &self.bn3, x, mode)?;
        let x = g.relu(x)?;
        let x = g.avgpool1d(x)?;
        let x = g.flatten(x)?;
        let x = dense_forward(g, binding, &self.fc1d, x)?;
        let branch1 = g.relu(x)?;

        // Branch 2: spectrograms (N, 17, 69, 2)
        let w = binding.bind(g, &self.conv2d_1.w);
        let b = binding.bind(g, &self.conv2d_1.b);
        let y = g.conv2d(spec, w, b)?;
        let y = g.relu(y)?;
        let y = g.maxpool2d(y)?;
        let y = bn_forward(g, binding, &self.bn2d_1, y, mode)?;
        let w = binding.bind(g, &self.conv2d_2.w);
        let b = binding.bind(g, &self.conv2d_2.b);
        let y = g.conv2d(y, w, b)?;
        let y = g.relu(y)?;
        let y = g.maxpool2d(y)?;
        let y = bn_forward(g, binding, &self.bn2d_2, y, mode)?;
        let y = g.flatten(y)?;
        let y = dense_forward(g, binding, &self.fc2d, y)?;
        let branch2 = g.relu(y)?;

        self.fuse(g, binding, branch1, branch2)
    }

    /// SAF fusion: squeeze both branches, derive (w1, w2) via the SE block,
    /// and concatenate the scaled branches.
    fn fuse(
        &self,
        g: &mut Graph,
        binding: &mut GraphBinding,
        branch1: NodeId,
        branch2: NodeId,
    ) -> Result<NodeId, NnError> {
        let s1 = g.row_mean(branch1)?;
        let s2 = g.row_mean(branch2)?;
        let squeezed = g.concat_cols(s1, s2)?;
        let e = dense_forward(g, binding, &self.saf.fc1, squeezed)?;
        let e = g.relu(e)?;
        let e = dense_forward(g, binding, &self.saf.fc2, e)?;
        let weights = g.sigmoid(e)?;
        let w1 = g.slice_col(weights, 0)?;
        let w2 = g.slice_col(weights, 1)?;
        let scaled1 = g.row_scale(branch1, w1)?;
        let scaled2 = g.row_scale(branch2, w2)?;
        g.concat_cols(scaled1, scaled2)
    }

    /// Running-statistics update after a train-mode forward.
    pub fn update_running_stats(&mut self, g: &Graph, binding: &GraphBinding) {
        let layers: [(&str, &mut BatchNormLayer); 5] = [
            ("sub1.bn1", &mut self.bn1),
            ("sub1.bn2", &mut self.bn2),
            ("sub1.bn3", &mut self.bn3),
            ("sub2.bn1", &mut self.bn2d_1),
            ("sub2.bn2", &mut self.bn2d_2),
        ];
        for (prefix, layer) in layers {
            if let Some(node) = binding.bn_output(prefix) {
                if let Some((mean, var)) = g.batch_stats(node) {
                    let (mean, var) = (mean.to_vec(), var.to_vec());
                    layer.absorb_batch_stats(&mean, &var);
                }
            }
        }
    }
}

impl ProjectionHead {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc: DenseLayer::init(rng, "proj.fc", FEATURE_DIM, PROJECTION_DIM),
        }
    }

    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(&'a Parameter)) {
        f(&self.fc.w);
        f(&self.fc.b);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Parameter)) {
        f(&mut self.fc.w);
        f(&mut self.fc.b);
    }

    /// z = normalize(relu(fc(h))): unit-norm rows, with all-zero rows mapped
    /// to a fixed basis vector by the normalization op.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &mut GraphBinding,
        h: NodeId,
    ) -> Result<NodeId, NnError> {
        let x = dense_forward(g, binding, &self.fc, h)?;
        let x = g.relu(x)?;
        g.l2norm_rows(x)
    }
}

impl ClassifierHead {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: DenseLayer::init(rng, "clf.fc1", FEATURE_DIM, CLASSIFIER_HIDDEN),
            fc2: DenseLayer::init(rng, "clf.fc2", CLASSIFIER_HIDDEN, 1),
        }
    }

    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(&'a Parameter)) {
        f(&self.fc1.w);
        f(&self.fc1.b);
        f(&self.fc2.w);
        f(&self.fc2.b);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Parameter)) {
        f(&mut self.fc1.w);
        f(&mut self.fc1.b);
        f(&mut self.fc2.w);
        f(&mut self.fc2.b);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &mut GraphBinding,
        h: NodeId,
    ) -> Result<NodeId, NnError> {
        let x = dense_forward(g, binding, &self.fc1, h)?;
        let x = g.relu(x)?;
        let x = dense_forward(g, binding, &self.fc2, x)?;
        g.sigmoid(x)
    }
}

impl MagLiveModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            extractor: FeatureExtractor::init(&mut rng),
            projection: ProjectionHead::init(&mut rng),
            classifier: ClassifierHead::init(&mut rng),
        }
    }

    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(&'a Parameter)) {
        self.extractor.for_each_param(&mut f);
        self.projection.for_each_param(&mut f);
        self.classifier.for_each_param(&mut f);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Parameter)) {
        self.extractor.for_each_param_mut(&mut f);
        self.projection.for_each_param_mut(&mut f);
        self.classifier.for_each_param_mut(&mut f);
    }

    /// Parameters in canonical (checkpoint) order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut params = Vec::new();
        self.for_each_param(|p| params.push(p));
        params
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        nn::save_checkpoint(path, &self.parameters()).map_err(ModelError::from)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self, ModelError> {
        let loaded = nn::load_checkpoint(path)?;
        let mut model = MagLiveModel::init(seed);
        let mut missing = Vec::new();
        model.for_each_param_mut(|p| {
            match loaded.iter().find(|l| l.name == p.name) {
                Some(l) if l.value.shape() == p.value.shape() => {
                    p.value = l.value.clone();
                }
                Some(l) => missing.push(format!(
                    "{}: shape {:?} != expected {:?}",
                    p.name,
                    l.value.shape(),
                    p.value.shape()
                )),
                None => missing.push(format!("{}: absent from checkpoint", p.name)),
            }
        });
        if !missing.is_empty() {
            return Err(ModelError::Checkpoint(missing.join("; ")));
        }
        Ok(model)
    }
}

/// SHA-256 over the extractor's parameter bytes; used to assert the extractor
/// stays frozen through classifier training.
pub fn extractor_checksum(extractor: &FeatureExtractor) -> String {
    let mut hasher = Sha256::new();
    extractor.for_each_param(|p| {
        hasher.update(p.name.as_bytes());
        for &v in p.value.data() {
            hasher.update(v.to_le_bytes());
        }
    });
    format!("{:x}", hasher.finalize())
}

// ---------------------------------------------------------------------------
// Inference helpers (single-sample graphs)
// ---------------------------------------------------------------------------

/// Encodes feature tensors as the batched graph inputs (N,100,1) and
/// (N,17,69,2).
pub fn encode_batch(inputs: &[&FeatureTensor]) -> Result<(Tensor, Tensor), ModelError> {
    let n = inputs.len();
    if n == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let mut env = Vec::with_capacity(n * SEGMENT_LEN);
    let mut spec = Vec::with_capacity(n * SPEC_BINS * SPEC_FRAMES * 2);
    for t in inputs {
        if t.envelope.len() != SEGMENT_LEN || t.spectrogram.len() != SPEC_BINS * SPEC_FRAMES * 2 {
            return Err(ModelError::Shape(format!(
                "feature tensor has envelope {} / spectrogram {}",
                t.envelope.len(),
                t.spectrogram.len()
            )));
        }
        env.extend_from_slice(&t.envelope);
        spec.extend_from_slice(&t.spectrogram);
    }
    Ok((
        Tensor::new(vec![n, SEGMENT_LEN, 1], env)?,
        Tensor::new(vec![n, SPEC_BINS, SPEC_FRAMES, 2], spec)?,
    ))
}

/// Runs the frozen extractor on a batch; rows of the result are 128-float
/// feature vectors.
pub fn extract_features_batch(
    extractor: &FeatureExtractor,
    inputs: &[&FeatureTensor],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let (env, spec) = encode_batch(inputs)?;
    let mut g = Graph::new();
    let mut binding = GraphBinding::default();
    let env = g.constant(env);
    let spec = g.constant(spec);
    let h = extractor.forward(&mut g, &mut binding, env, spec, BnMode::Inference)?;
    let value = g.value(h);
    Ok(value
        .data()
        .chunks(FEATURE_DIM)
        .map(|c| c.to_vec())
        .collect())
}

/// Extracts the 128-float feature for one segment.
pub fn extract_features(
    extractor: &FeatureExtractor,
    input: &FeatureTensor,
) -> Result<Vec<f64>, ModelError> {
    Ok(extract_features_batch(extractor, &[input])?.remove(0))
}

/// Applies the SE fusion outside a training graph. Returns the two weights
/// and the fused 128-vector.
pub fn saf_fuse(
    branch1: &[f64],
    branch2: &[f64],
    saf: &SafBlock,
) -> Result<(f64, f64, Vec<f64>), ModelError> {
    if branch1.len() != BRANCH_DIM || branch2.len() != BRANCH_DIM {
        return Err(ModelError::Shape(format!(
            "branch lengths {} / {} (expected {BRANCH_DIM})",
            branch1.len(),
            branch2.len()
        )));
    }
    let mut g = Graph::new();
    let mut binding = GraphBinding::default();
    let b1 = g.constant(Tensor::new(vec![1, BRANCH_DIM], branch1.to_vec())?);
    let b2 = g.constant(Tensor::new(vec![1, BRANCH_DIM], branch2.to_vec())?);
    let s1 = g.row_mean(b1)?;
    let s2 = g.row_mean(b2)?;
    let s = g.concat_cols(s1, s2)?;
    let e = dense_forward(&mut g, &mut binding, &saf.fc1, s)?;
    let e = g.relu(e)?;
    let e = dense_forward(&mut g, &mut binding, &saf.fc2, e)?;
    let w = g.sigmoid(e)?;
    let w1s = g.slice_col(w, 0)?;
    let w2s = g.slice_col(w, 1)?;
    let f1 = g.row_scale(b1, w1s)?;
    let f2 = g.row_scale(b2, w2s)?;
    let fused = g.concat_cols(f1, f2)?;
    Ok((
        g.value(w).data()[0],
        g.value(w).data()[1],
        g.value(fused).data().to_vec(),
    ))
}

/// Projects a feature vector to the unit sphere. The flag reports the
/// degenerate all-zero case (mapped to a fixed basis vector).
pub fn project(h: &[f64], head: &ProjectionHead) -> Result<(Vec<f64>, bool), ModelError> {
    if h.len() != FEATURE_DIM {
        return Err(ModelError::Shape(format!(
            "feature length {} (expected {FEATURE_DIM})",
            h.len()
        )));
    }
    let mut g = Graph::new();
    let mut binding = GraphBinding::default();
    let x = g.constant(Tensor::new(vec![1, FEATURE_DIM], h.to_vec())?);
    let z = head.forward(&mut g, &mut binding, x)?;
    let degenerate = g.degenerate_rows(z) > 0;
    Ok((g.value(z).data().to_vec(), degenerate))
}

/// Probability that the feature comes from a human speaker.
pub fn classify(h: &[f64], head: &ClassifierHead) -> Result<f64, ModelError> {
    if h.len() != FEATURE_DIM {
        return Err(ModelError::Shape(format!(
            "feature length {} (expected {FEATURE_DIM})",
            h.len()
        )));
    }
    let mut g = Graph::new();
    let mut binding = GraphBinding::default();
    let x = g.constant(Tensor::new(vec![1, FEATURE_DIM], h.to_vec())?);
    let p = head.forward(&mut g, &mut binding, x)?;
    Ok(g.value(p).item())
}

/// Classifier probabilities for a batch of features.
pub fn classify_batch(features: &[Vec<f64>], head: &ClassifierHead) -> Result<Vec<f64>, ModelError> {
    if features.is_empty() {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let n = features.len();
    let mut flat = Vec::with_capacity(n * FEATURE_DIM);
    for f in features {
        if f.len() != FEATURE_DIM {
            return Err(ModelError::Shape(format!(
                "feature length {} (expected {FEATURE_DIM})",
                f.len()
            )));
        }
        flat.extend_from_slice(f);
    }
    let mut g = Graph::new();
    let mut binding = GraphBinding::default();
    let x = g.constant(Tensor::new(vec![n, FEATURE_DIM], flat)?);
    let p = head.forward(&mut g, &mut binding, x)?;
    Ok(g.value(p).data().to_vec())
}

// ---------------------------------------------------------------------------
// Structure report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LayerReport {
    pub model: String,
    pub layer: usize,
    pub kind: String,
    pub output_shape: String,
    pub params: usize,
}

/// Per-layer layout and parameter counts of the assembled network.
/// Batchnorm contributes 4 values per channel (gamma, beta, and the two
/// running statistics).
pub fn param_report(model: &MagLiveModel) -> Vec<LayerReport> {
    let count = |ps: &[&Parameter]| ps.iter().map(|p| p.count()).sum::<usize>();
    let bn = |b: &BatchNormLayer| {
        count(&[&b.gamma, &b.beta, &b.running_mean, &b.running_var])
    };
    let e = &model.extractor;

    let mut rows = Vec::new();
    let mut push = |model: &str, layer: usize, kind: &str, shape: String, params: usize| {
        rows.push(LayerReport {
            model: model.into(),
            layer,
            kind: kind.into(),
            output_shape: shape,
            params,
        });
    };

    // Submodel1 over the (100, 1) envelope.
    let l1 = SEGMENT_LEN - 2;
    let l2 = l1 - 2;
    let l3 = l2 - 2;
    let l4 = l3 / 2;
    push("Submodel1", 1, "Conv1D + BN + ReLU", format!("({l1},16)"), count(&[&e.conv1.w, &e.conv1.b]) + bn(&e.bn1));
    push("Submodel1", 2, "Conv1D + BN + ReLU", format!("({l2},32)"), count(&[&e.conv2.w, &e.conv2.b]) + bn(&e.bn2));
    push("Submodel1", 3, "Conv1D + BN + ReLU", format!("({l3},16)"), count(&[&e.conv3.w, &e.conv3.b]) + bn(&e.bn3));
    push("Submodel1", 4, "Pooling", format!("({l4},16)"), 0);
    push("Submodel1", 5, "Flatten + FC + ReLU", format!("({BRANCH_DIM})"), count(&[&e.fc1d.w, &e.fc1d.b]));

    // Submodel2 over the (17, 69, 2) spectrogram stack.
    let (h1, w1) = (SPEC_BINS - 2, SPEC_FRAMES - 2);
    let (h2, w2) = (h1 / 2, w1 / 2);
    let (h3, w3) = (h2 - 2, w2 - 2);
    let (h4, w4) = (h3 / 2, w3 / 2);
    push("Submodel2", 1, "Conv2D + ReLU", format!("({h1},{w1},16)"), count(&[&e.conv2d_1.w, &e.conv2d_1.b]));
    push("Submodel2", 2, "Pooling + BN", format!("({h2},{w2},16)"), bn(&e.bn2d_1));
    push("Submodel2", 3, "Conv2D + ReLU", format!("({h3},{w3},32)"), count(&[&e.conv2d_2.w, &e.conv2d_2.b]));
    push("Submodel2", 4, "Pooling + BN", format!("({h4},{w4},32)"), bn(&e.bn2d_2));
    push("Submodel2", 5, "Flatten + FC + ReLU", format!("({BRANCH_DIM})"), count(&[&e.fc2d.w, &e.fc2d.b]));

    push("SAF", 1, "GlobalAvg + FC + ReLU + FC + Sigmoid", "(2)".into(),
        count(&[&e.saf.fc1.w, &e.saf.fc1.b, &e.saf.fc2.w, &e.saf.fc2.b]));
    push("Fusion", 1, "Scale + Concat", format!("({FEATURE_DIM})"), 0);
    push("Projection", 1, "FC + ReLU + L2Norm", format!("({PROJECTION_DIM})"),
        count(&[&model.projection.fc.w, &model.projection.fc.b]));
    push("Classifier", 1, "FC + ReLU", format!("({CLASSIFIER_HIDDEN})"),
        count(&[&model.classifier.fc1.w, &model.classifier.fc1.b]));
    push("Classifier", 2, "FC + Sigmoid", "(1)".into(),
        count(&[&model.classifier.fc2.w, &model.classifier.fc2.b]));
    rows
}

/// Reference layout the assembled TF-CNN must reproduce row by row.
pub const EXPECTED_STRUCTURE: [(&str, usize, &str, usize); 10] = [
    ("Submodel1", 1, "(98,16)", 128),
    ("Submodel1", 2, "(96,32)", 1_696),
    ("Submodel1", 3, "(94,16)", 1_616),
    ("Submodel1", 4, "(47,16)", 0),
    ("Submodel1", 5, "(64)", 48_192),
    ("Submodel2", 1, "(15,67,16)", 304),
    ("Submodel2", 2, "(7,33,16)", 64),
    ("Submodel2", 3, "(5,31,32)", 4_640),
    ("Submodel2", 4, "(2,15,32)", 128),
    ("Submodel2", 5, "(64)", 61_504),
];

/// Asserts the ten TF-CNN rows match the reference layout exactly, naming the
/// first divergent layer otherwise.
pub fn verify_structure(model: &MagLiveModel) -> Result<(), ModelError> {
    let rows = param_report(model);
    for (exp_model, exp_layer, exp_shape, exp_params) in EXPECTED_STRUCTURE {
        let row = rows
            .iter()
            .find(|r| r.model == exp_model && r.layer == exp_layer)
            .ok_or_else(|| {
                ModelError::Assembly(format!("missing layer {exp_model} #{exp_layer}"))
            })?;
        if row.output_shape != exp_shape || row.params != exp_params {
            return Err(ModelError::Assembly(format!(
                "{exp_model} layer {exp_layer}: got shape {} with {} params, expected {exp_shape} with {exp_params}",
                row.output_shape, row.params
            )));
        }
    }
    Ok(())
}

/// Renders the report as an aligned text table.
pub fn format_report(rows: &[LayerReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<11} {:<6} {:<36} {:<13} {:>8}\n",
        "Model", "Layer", "Layer type", "Output shape", "# Param"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<11} {:<6} {:<36} {:<13} {:>8}\n",
            r.model, r.layer, r.kind, r.output_shape, r.params
        ));
    }
    out
}
