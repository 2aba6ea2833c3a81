//! Siamese trajectory encoder and its training loop.
//!
//! Both temporal branches run through the same backbone parameters; the
//! backbone difference is projected by an MLP head and L2-normalized into
//! the trajectory vector. Training optimizes an equal-weight sum of a
//! supervised contrastive term over trajectories and a focal term over a
//! training-only classification head that is discarded at inference.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{
    load_checkpoint, optimizer_step, save_checkpoint, BnState, NamedTensor, NodeId, OptimizerConfig,
    ParamId, ParamSet, Tape,
};
use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use crate::synthdata::{crop_or_pad, zscore_normalize, SubjectRecord, Volume};

/// Unit-norm embedding of the longitudinal change for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVector {
    pub subject_id: String,
    pub values: Vec<f64>,
}

impl TrajectoryVector {
    pub fn new(subject_id: String, values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::Numeric(format!(
                "trajectory for '{subject_id}' has norm {norm}, expected 1"
            )));
        }
        Ok(Self { subject_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Training-time augmentation draws; one draw per pair, applied to both
/// volumes simultaneously.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub noise_sigma_range: (f64, f64),
    pub intensity_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            noise_sigma_range: (0.02, 0.08),
            intensity_scale_range: (0.85, 1.15),
            seed: 42,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::Config(format!(
                "flip_prob: must be in [0,1], got {}",
                self.flip_prob
            )));
        }
        for (name, (lo, hi)) in [
            ("noise_sigma_range", self.noise_sigma_range),
            ("intensity_scale_range", self.intensity_scale_range),
        ] {
            if lo > hi {
                return Err(CoreError::Config(format!("{name}: range must be ordered")));
            }
        }
        if self.noise_sigma_range.0 < 0.0 {
            return Err(CoreError::Config("noise_sigma_range: must be >= 0".into()));
        }
        Ok(())
    }
}

/// Encoder architecture, objective, and training schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub volume_dim: usize,
    /// Hidden widths of the shared backbone; input is the flattened
    /// volume, output is the backbone feature (last entry).
    pub backbone_widths: Vec<usize>,
    pub projection_hidden: usize,
    pub trajectory_dim: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub positive_class_weight: f64,
    pub epochs: usize,
    /// When false, batch normalization in the head is skipped (tiny-batch
    /// stability knob).
    pub batchnorm: bool,
    /// When true, effective batch 16 = 8 micro-batches of 2 on one graph;
    /// when false, a direct physical batch of 16.
    pub accumulate: bool,
    pub validation_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            volume_dim: 16,
            backbone_widths: vec![256, 2048],
            projection_hidden: 512,
            trajectory_dim: 512,
            dropout: 0.3,
            temperature: 0.07,
            focal_gamma: 2.0,
            focal_alpha: 0.75,
            positive_class_weight: 4.0,
            epochs: 50,
            batchnorm: true,
            accumulate: true,
            validation_fraction: 0.2,
            seed: 42,
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CoreError::Config(format!(
                "temperature: must be > 0, got {}",
                self.temperature
            )));
        }
        if self.focal_gamma < 0.0 {
            return Err(CoreError::Config("focal_gamma: must be >= 0".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(CoreError::Config(format!(
                "focal_alpha: must lie in (0,1), got {}",
                self.focal_alpha
            )));
        }
        if self.trajectory_dim < 2 {
            return Err(CoreError::Config("trajectory_dim: must be >= 2".into()));
        }
        if self.backbone_widths.is_empty() {
            return Err(CoreError::Config("backbone_widths: need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(CoreError::Config("validation_fraction: must be in [0,1)".into()));
        }
        self.optimizer.validate()?;
        self.augmentation.validate()
    }

    fn input_dim(&self) -> usize {
        self.volume_dim.pow(3)
    }

    fn feature_dim(&self) -> usize {
        *self.backbone_widths.last().unwrap()
    }
}

struct DenseIds {
    w: ParamId,
    b: ParamId,
}

struct Layout {
    backbone: Vec<DenseIds>,
    head0: DenseIds,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    head1: DenseIds,
    cls: Vec<DenseIds>,
}

/// Frozen or in-training encoder: parameters plus BN running statistics.
pub struct EncoderModel {
    pub config: EncoderConfig,
    params: ParamSet,
    bn: BnState,
    layout: Layout,
}

fn he_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..fan_in * fan_out).map(|_| std * gauss(rng)).collect()
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl EncoderModel {
    /// Fresh Gaussian-initialized model. Biases start at a small nonzero
    /// value so the projection of a zero backbone difference is nonzero.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, &[3]);
        let mut params = ParamSet::new();
        let dense = |params: &mut ParamSet, name: &str, fin: usize, fout: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<DenseIds> {
            let w = params.add(&format!("{name}.w"), (fin, fout), he_init(rng, fin, fout))?;
            let b = params.add(&format!("{name}.b"), (1, fout), vec![0.01; fout])?;
            Ok(DenseIds { w, b })
        };
        let mut backbone = Vec::new();
        let mut fin = config.input_dim();
        for (i, &width) in config.backbone_widths.iter().enumerate() {
            backbone.push(dense(&mut params, &format!("backbone.{i}"), fin, width, &mut rng)?);
            fin = width;
        }
        let head0 = dense(&mut params, "head.0", config.feature_dim(), config.projection_hidden, &mut rng)?;
        let bn_gamma = params.add("head.bn.gamma", (1, config.projection_hidden), vec![1.0; config.projection_hidden])?;
        let bn_beta = params.add("head.bn.beta", (1, config.projection_hidden), vec![0.01; config.projection_hidden])?;
        let head1 = dense(&mut params, "head.1", config.projection_hidden, config.trajectory_dim, &mut rng)?;
        let mut cls = Vec::new();
        let mut cin = config.trajectory_dim;
        for (i, width) in [256usize, 128, 1].into_iter().enumerate() {
            cls.push(dense(&mut params, &format!("cls.{i}"), cin, width, &mut rng)?);
            cin = width;
        }
        let bn = BnState::new(config.projection_hidden);
        Ok(Self {
            config,
            params,
            bn,
            layout: Layout { backbone, head0, bn_gamma, bn_beta, head1, cls },
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn make_leaves(&self, tape: &mut Tape) -> Result<ForwardLeaves> {
        let p = &self.params;
        let pair = |tape: &mut Tape, ids: &DenseIds| -> Result<(NodeId, NodeId)> {
            Ok((tape.param(p, ids.w)?, tape.param(p, ids.b)?))
        };
        Ok(ForwardLeaves {
            backbone: self
                .layout
                .backbone
                .iter()
                .map(|ids| pair(tape, ids))
                .collect::<Result<Vec<_>>>()?,
            head0: pair(tape, &self.layout.head0)?,
            bn_gamma: tape.param(p, self.layout.bn_gamma)?,
            bn_beta: tape.param(p, self.layout.bn_beta)?,
            head1: pair(tape, &self.layout.head1)?,
            cls: self
                .layout
                .cls
                .iter()
                .map(|ids| pair(tape, ids))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Inference-mode encoding of one preprocessed pair: dropout disabled,
    /// BN on frozen running statistics.
    pub fn encode_pair(&self, pre: &Volume, post: &Volume, subject_id: &str) -> Result<TrajectoryVector> {
        let (trajs, _) = self.encode_batch(&[(pre, post)])?;
        TrajectoryVector::new(subject_id.to_string(), trajs.into_iter().next().unwrap())
    }

    /// Batched inference encoding; returns (trajectories, logits).
    pub fn encode_batch(&self, pairs: &[(&Volume, &Volume)]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let d3 = self.config.input_dim();
        let n = pairs.len();
        let mut pre_flat = Vec::with_capacity(n * d3);
        let mut post_flat = Vec::with_capacity(n * d3);
        for (pre, post) in pairs {
            if pre.dim() != self.config.volume_dim || post.dim() != self.config.volume_dim {
                return Err(CoreError::Shape(format!(
                    "encode_pair: volumes must be {0}x{0}x{0}",
                    self.config.volume_dim
                )));
            }
            pre_flat.extend_from_slice(pre.voxels());
            post_flat.extend_from_slice(post.voxels());
        }
        let mut tape = Tape::new();
        let leaves = self.make_leaves(&mut tape)?;
        let pre_n = tape.input((n, d3), pre_flat)?;
        let post_n = tape.input((n, d3), post_flat)?;
        // inference path is deterministic: rng is never consulted
        let mut rng = derive_rng(0, &[]);
        // BN state is frozen: eval mode never mutates it
        let mut this = SharedForward(self);
        let (traj, logits) = this.forward(&mut tape, &leaves, pre_n, post_n, false, &mut rng)?;
        let dim = self.config.trajectory_dim;
        let tv = tape.values(traj);
        let out = (0..n).map(|i| tv[i * dim..(i + 1) * dim].to_vec()).collect();
        Ok((out, tape.values(logits).to_vec()))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape,
                values: p.values.clone(),
            })
            .collect();
        tensors.push(NamedTensor {
            name: "head.bn.running_mean".into(),
            shape: (1, self.bn.running_mean.len()),
            values: self.bn.running_mean.clone(),
        });
        tensors.push(NamedTensor {
            name: "head.bn.running_var".into(),
            shape: (1, self.bn.running_var.len()),
            values: self.bn.running_var.clone(),
        });
        tensors
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let echo = serde_json::to_value(&self.config).map_err(|e| CoreError::Parse(e.to_string()))?;
        save_checkpoint(path, &self.to_tensors(), &echo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, echo) = load_checkpoint(path)?;
        let config: EncoderConfig =
            serde_json::from_value(echo).map_err(|e| CoreError::Parse(format!("checkpoint config: {e}")))?;
        let mut model = Self::init(config)?;
        for t in tensors {
            if t.name == "head.bn.running_mean" {
                model.bn.running_mean = t.values;
            } else if t.name == "head.bn.running_var" {
                model.bn.running_var = t.values;
            } else {
                let pid = (0..model.params.len())
                    .find(|&i| model.params.get(i).name == t.name)
                    .ok_or_else(|| CoreError::Parse(format!("checkpoint: unknown tensor '{}'", t.name)))?;
                if model.params.get(pid).shape != t.shape {
                    return Err(CoreError::Parse(format!(
                        "checkpoint: tensor '{}' shape mismatch",
                        t.name
                    )));
                }
                model.params.get_mut(pid).values = t.values;
            }
        }
        Ok(model)
    }
}

// Param leaf node ids for one tape; created once so both Siamese branches
// read the identical parameter storage.
struct ForwardLeaves {
    backbone: Vec<(NodeId, NodeId)>,
    head0: (NodeId, NodeId),
    bn_gamma: NodeId,
    bn_beta: NodeId,
    head1: (NodeId, NodeId),
    cls: Vec<(NodeId, NodeId)>,
}

// Thin shim so inference (shared &self) can reuse the training forward,
// which needs &mut for BN state it will not touch in eval mode.
struct SharedForward<'a>(&'a EncoderModel);

impl SharedForward<'_> {
    fn forward(
        &mut self,
        tape: &mut Tape,
        leaves: &ForwardLeaves,
        pre: NodeId,
        post: NodeId,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(NodeId, NodeId)> {
        assert!(!training);
        let mut bn = self.0.bn.clone();
        forward_block_impl(&self.0.config, &mut bn, tape, leaves, pre, post, false, rng)
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_block_impl(
    config: &EncoderConfig,
    bn: &mut BnState,
    tape: &mut Tape,
    leaves: &ForwardLeaves,
    pre: NodeId,
    post: NodeId,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(NodeId, NodeId)> {
    let branch = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
        let mut h = x;
        for (i, ids) in leaves.backbone.iter().enumerate() {
            h = tape.dense(h, ids.0, ids.1)?;
            if i + 1 < leaves.backbone.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    };
    let v0 = branch(tape, pre)?;
    let v1 = branch(tape, post)?;
    let diff = tape.sub(v1, v0)?;
    let mut h = tape.dense(diff, leaves.head0.0, leaves.head0.1)?;
    if config.batchnorm {
        h = tape.batchnorm(h, leaves.bn_gamma, leaves.bn_beta, bn, training)?;
    }
    h = tape.relu(h)?;
    h = tape.dropout(h, config.dropout, training, rng)?;
    h = tape.dense(h, leaves.head1.0, leaves.head1.1)?;
    let traj = tape.l2_normalize(h)?;
    let mut z = traj;
    for (i, ids) in leaves.cls.iter().enumerate() {
        z = tape.dense(z, ids.0, ids.1)?;
        if i + 1 < leaves.cls.len() {
            z = tape.relu(z)?;
        }
    }
    Ok((traj, z))
}

/// Supervised contrastive loss on the tape; `labels` define the positive
/// sets. Samples with no in-batch positive partner are dropped from the
/// outer sum; errors if the batch is smaller than 2 or every sample lacks
/// a partner.
pub fn supcon_loss_on_tape(tape: &mut Tape, traj: NodeId, labels: &[u8], temperature: f64) -> Result<NodeId> {
    let (n, _) = tape.shape(traj);
    if n != labels.len() {
        return Err(CoreError::Shape(format!(
            "supcon: {n} trajectories vs {} labels",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::Config("supcon: batch must hold at least 2 samples".into()));
    }
    if !(temperature > 0.0) {
        return Err(CoreError::Config("supcon: temperature must be > 0".into()));
    }
    let mut weights = vec![0.0f64; n * n];
    let mut any_active = false;
    for i in 0..n {
        let positives = (0..n).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        any_active = true;
        let w = -1.0 / positives as f64;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                weights[i * n + p] = w;
            }
        }
    }
    if !any_active {
        return Err(CoreError::Config(
            "supcon: every sample lacks a positive partner".into(),
        ));
    }
    let mut diag_mask = vec![0.0f64; n * n];
    for i in 0..n {
        diag_mask[i * n + i] = -1e9;
    }
    let sims = tape.matmul_nt(traj, traj)?;
    let sims = tape.scale(sims, 1.0 / temperature)?;
    let masked = tape.add_const(sims, &diag_mask)?;
    let lse = tape.row_logsumexp(masked)?;
    let log_prob = tape.sub_col(sims, lse)?;
    let weighted = tape.mul_const(log_prob, &weights)?;
    tape.sum(weighted)
}

/// Forward-only supervised contrastive loss over unit vectors.
pub fn supcon_loss(trajectories: &[Vec<f64>], labels: &[u8], temperature: f64) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(CoreError::Config("supcon: empty batch".into()));
    }
    let d = trajectories[0].len();
    let flat: Vec<f64> = trajectories.iter().flat_map(|t| t.iter().copied()).collect();
    let mut tape = Tape::new();
    let x = tape.input((trajectories.len(), d), flat)?;
    let loss = supcon_loss_on_tape(&mut tape, x, labels, temperature)?;
    Ok(tape.scalar(loss))
}

/// Focal loss on the tape over one-logit binary outputs.
/// FL = mean_i alpha_t w_t (1 - p_t)^gamma * (-log p_t), sigmoid parameterization.
pub fn focal_loss_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[u8],
    gamma: f64,
    alpha: f64,
    class_weight: f64,
) -> Result<NodeId> {
    let (n, c) = tape.shape(logits);
    if c != 1 || n != labels.len() {
        return Err(CoreError::Shape(format!(
            "focal: logits {n}x{c} vs {} labels",
            labels.len()
        )));
    }
    // z' = -s*z with s = +1 for positives, -1 for negatives:
    // 1 - p_t = sigmoid(z'), -log p_t = softplus(z')
    let neg_sign: Vec<f64> = labels.iter().map(|&y| if y == 1 { -1.0 } else { 1.0 }).collect();
    let weights: Vec<f64> = labels
        .iter()
        .map(|&y| {
            if y == 1 {
                alpha * class_weight
            } else {
                1.0 - alpha
            }
        })
        .collect();
    let zp = tape.mul_const(logits, &neg_sign)?;
    let one_minus_pt = tape.sigmoid(zp)?;
    let modulating = tape.pow_const(one_minus_pt, gamma)?;
    let ce = tape.softplus(zp)?;
    let per_sample = tape.mul(modulating, ce)?;
    let weighted = tape.mul_const(per_sample, &weights)?;
    tape.mean(weighted)
}

/// Forward-only focal loss.
pub fn focal_loss(logits: &[f64], labels: &[u8], gamma: f64, alpha: f64, class_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.input((logits.len(), 1), logits.to_vec())?;
    let loss = focal_loss_on_tape(&mut tape, z, labels, gamma, alpha, class_weight)?;
    Ok(tape.scalar(loss))
}

/// L = (supcon + focal) / 2, the two terms in equal weight.
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    traj: NodeId,
    logits: NodeId,
    labels: &[u8],
    config: &EncoderConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    let supcon = supcon_loss_on_tape(tape, traj, labels, config.temperature)?;
    let focal = focal_loss_on_tape(
        tape,
        logits,
        labels,
        config.focal_gamma,
        config.focal_alpha,
        config.positive_class_weight,
    )?;
    let s = tape.scale(supcon, 0.5)?;
    let f = tape.scale(focal, 0.5)?;
    let joint = tape.add(s, f)?;
    Ok((joint, supcon, focal))
}

fn flip_volume(v: &Volume, axes: [bool; 3]) -> Volume {
    let d = v.dim();
    let mut out = vec![0.0; d * d * d];
    for x in 0..d {
        let sx = if axes[0] { d - 1 - x } else { x };
        for y in 0..d {
            let sy = if axes[1] { d - 1 - y } else { y };
            for z in 0..d {
                let sz = if axes[2] { d - 1 - z } else { z };
                out[(x * d + y) * d + z] = v.at(sx, sy, sz);
            }
        }
    }
    Volume::new(d, out).expect("flip preserves shape and finiteness")
}

fn uniform_in(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// One augmentation draw applied identically to both volumes: shared axis
/// flips and intensity scale; Gaussian noise is drawn per volume at the
/// shared sigma.
pub fn augment_pair(
    pre: &Volume,
    post: &Volume,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(Volume, Volume)> {
    config.validate()?;
    let axes = [
        rng.gen_bool(config.flip_prob),
        rng.gen_bool(config.flip_prob),
        rng.gen_bool(config.flip_prob),
    ];
    let sigma = uniform_in(rng, config.noise_sigma_range);
    let scale = uniform_in(rng, config.intensity_scale_range);
    let mut apply = |v: &Volume| -> Result<Volume> {
        let flipped = if axes.iter().any(|&a| a) {
            flip_volume(v, axes)
        } else {
            v.clone()
        };
        let voxels: Vec<f64> = flipped
            .voxels()
            .iter()
            .map(|x| {
                let noise = if sigma > 0.0 { sigma * gauss(rng) } else { 0.0 };
                x * scale + noise
            })
            .collect();
        Volume::new(v.dim(), voxels)
    };
    Ok((apply(pre)?, apply(post)?))
}

/// Per-epoch training log entry, serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub supcon: f64,
    pub focal: f64,
}

pub fn write_training_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for entry in history {
        serde_json::to_writer(&mut w, entry).map_err(|e| CoreError::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// z-score normalize then center-crop/pad to the encoder's input grid.
pub fn preprocess(v: &Volume, target_dim: usize) -> Result<Volume> {
    crop_or_pad(&zscore_normalize(v)?, target_dim)
}

struct PreparedSubject {
    label: u8,
    pre: Volume,
    post: Volume,
}

/// Trains the encoder on `subjects`. `holdout_ids` is the leakage guard:
/// any overlap is a hard error. Returns the best checkpoint by minimum
/// validation loss plus the full loss history.
pub fn train_encoder(
    subjects: &[SubjectRecord],
    holdout_ids: &HashSet<String>,
    config: &EncoderConfig,
) -> Result<(EncoderModel, Vec<EpochLog>)> {
    config.validate()?;
    for s in subjects {
        if holdout_ids.contains(&s.subject_id) {
            return Err(CoreError::Leakage(s.subject_id.clone()));
        }
    }
    let n_pos = subjects.iter().filter(|s| s.label == 1).count();
    if n_pos == 0 || n_pos == subjects.len() {
        return Err(CoreError::Config(
            "train_encoder: training data must contain both classes".into(),
        ));
    }

    let prepared: Vec<PreparedSubject> = subjects
        .iter()
        .map(|s| {
            Ok(PreparedSubject {
                label: s.label,
                pre: preprocess(&s.pre_volume, config.volume_dim)?,
                post: preprocess(&s.post_volume, config.volume_dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // stratified validation split for checkpoint selection
    let mut split_rng = derive_rng(config.seed, &[2]);
    let mut val_idx: HashSet<usize> = HashSet::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = prepared
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut split_rng);
        let n_val = ((members.len() as f64) * config.validation_fraction).round() as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        val_idx.extend(members.into_iter().take(n_val));
    }
    let train_idx: Vec<usize> = (0..prepared.len()).filter(|i| !val_idx.contains(i)).collect();
    let val_idx: Vec<usize> = {
        let mut v: Vec<usize> = val_idx.into_iter().collect();
        v.sort_unstable();
        v
    };
    let train_pos: Vec<usize> = train_idx.iter().copied().filter(|&i| prepared[i].label == 1).collect();
    let train_neg: Vec<usize> = train_idx.iter().copied().filter(|&i| prepared[i].label == 0).collect();
    if train_pos.is_empty() || train_neg.is_empty() {
        return Err(CoreError::Config(
            "train_encoder: validation split exhausted one class".into(),
        ));
    }

    let mut model = EncoderModel::init(config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ParamSet, BnState)> = None;

    let effective_batch = 16usize;
    let micro = if config.accumulate { 2usize } else { effective_batch };
    let n_batches = train_idx.len().div_ceil(effective_batch).max(1);
    let d3 = config.input_dim();

    for epoch in 0..config.epochs {
        let mut sampler_rng = derive_rng(config.seed, &[4, epoch as u64]);
        let mut pos_pool = train_pos.clone();
        let mut neg_pool = train_neg.clone();
        pos_pool.shuffle(&mut sampler_rng);
        neg_pool.shuffle(&mut sampler_rng);
        let mut pos_cursor = 0usize;
        let mut neg_cursor = 0usize;
        let draw = |pool: &mut Vec<usize>, cursor: &mut usize, rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            if *cursor >= pool.len() {
                pool.shuffle(rng);
                *cursor = 0;
            }
            let v = pool[*cursor];
            *cursor += 1;
            v
        };

        let mut epoch_train = 0.0;
        let mut epoch_supcon = 0.0;
        let mut epoch_focal = 0.0;
        for batch in 0..n_batches {
            // class-balanced effective batch: 8 positives + 8 negatives
            let mut members = Vec::with_capacity(effective_batch);
            for _ in 0..effective_batch / 2 {
                members.push(draw(&mut pos_pool, &mut pos_cursor, &mut sampler_rng));
                members.push(draw(&mut neg_pool, &mut neg_cursor, &mut sampler_rng));
            }
            members.shuffle(&mut sampler_rng);

            let mut aug_rng = derive_rng(config.augmentation.seed, &[epoch as u64, batch as u64]);
            let mut drop_rng = derive_rng(config.seed, &[6, epoch as u64, batch as u64]);
            let mut tape = Tape::new();
            let leaves = model.make_leaves(&mut tape)?;
            let mut traj_blocks = Vec::new();
            let mut logit_blocks = Vec::new();
            let mut labels = Vec::with_capacity(effective_batch);
            for chunk in members.chunks(micro) {
                let mut pre_flat = Vec::with_capacity(chunk.len() * d3);
                let mut post_flat = Vec::with_capacity(chunk.len() * d3);
                for &i in chunk {
                    let s = &prepared[i];
                    let (pre, post) = augment_pair(&s.pre, &s.post, &config.augmentation, &mut aug_rng)?;
                    pre_flat.extend_from_slice(pre.voxels());
                    post_flat.extend_from_slice(post.voxels());
                    labels.push(s.label);
                }
                let pre_n = tape.input((chunk.len(), d3), pre_flat)?;
                let post_n = tape.input((chunk.len(), d3), post_flat)?;
                let (traj, logits) = forward_block_impl(
                    &model.config,
                    &mut model.bn,
                    &mut tape,
                    &leaves,
                    pre_n,
                    post_n,
                    true,
                    &mut drop_rng,
                )?;
                traj_blocks.push(traj);
                logit_blocks.push(logits);
            }
            let traj = tape.concat_rows(&traj_blocks)?;
            let logits = tape.concat_rows(&logit_blocks)?;
            let (joint, supcon, focal) = joint_loss_on_tape(&mut tape, traj, logits, &labels, config)?;
            tape.backward(joint)?;
            tape.export_grads(&mut model.params);
            optimizer_step(&mut model.params, &config.optimizer, epoch)?;
            model.params.zero_grad();
            epoch_train += tape.scalar(joint);
            epoch_supcon += tape.scalar(supcon);
            epoch_focal += tape.scalar(focal);
        }
        epoch_train /= n_batches as f64;
        epoch_supcon /= n_batches as f64;
        epoch_focal /= n_batches as f64;

        let val_loss = if val_idx.is_empty() {
            epoch_train
        } else {
            validation_loss(&model, &prepared, &val_idx, config)?
        };

        if best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true) {
            best = Some((val_loss, model.params.clone(), model.bn.clone()));
        }
        history.push(EpochLog {
            epoch,
            lr: config.optimizer.lr_at_epoch(epoch),
            train_loss: epoch_train,
            val_loss,
            supcon: epoch_supcon,
            focal: epoch_focal,
        });
    }

    if let Some((_, params, bn)) = best {
        model.params = params;
        model.bn = bn;
    }
    Ok((model, history))
}

fn validation_loss(
    model: &EncoderModel,
    prepared: &[PreparedSubject],
    val_idx: &[usize],
    config: &EncoderConfig,
) -> Result<f64> {
    let pairs: Vec<(&Volume, &Volume)> = val_idx.iter().map(|&i| (&prepared[i].pre, &prepared[i].post)).collect();
    let labels: Vec<u8> = val_idx.iter().map(|&i| prepared[i].label).collect();
    let (trajs, logits) = model.encode_batch(&pairs)?;
    // tiny validation splits may leave a class without a partner; the
    // contrastive term is skipped there rather than failing selection
    let supcon = supcon_loss(&trajs, &labels, config.temperature).unwrap_or(0.0);
    let focal = focal_loss(
        &logits,
        &labels,
        config.focal_gamma,
        config.focal_alpha,
        config.positive_class_weight,
    )?;
    Ok(0.5 * supcon + 0.5 * focal)
}

/// Encodes every subject with a frozen model (inference mode), applying
/// the standard preprocessing. No augmentation on this path.
pub fn encode_cohort(model: &EncoderModel, subjects: &[SubjectRecord]) -> Result<Vec<TrajectoryVector>> {
    let prepared: Vec<(Volume, Volume)> = subjects
        .iter()
        .map(|s| {
            Ok((
                preprocess(&s.pre_volume, model.config.volume_dim)?,
                preprocess(&s.post_volume, model.config.volume_dim)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Volume, &Volume)> = prepared.iter().map(|(a, b)| (a, b)).collect();
    let (trajs, _) = model.encode_batch(&pairs)?;
    subjects
        .iter()
        .zip(trajs)
        .map(|(s, v)| TrajectoryVector::new(s.subject_id.clone(), v))
        .collect()
}
