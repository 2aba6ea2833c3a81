//! Baseline classifiers over frozen trajectory vectors: cosine k-NN,
//! balanced logistic regression, a small MLP, and an equal-weight
//! soft-vote ensemble combining them.
//!
//! All models consume unit-norm trajectories and emit p(y=1) in [0,1].
//! Fitting never reads a query's label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffkernel::{
    load_checkpoint, optimizer_step, save_checkpoint, NamedTensor, OptimizerConfig, ParamSet, Tape,
};
use crate::encoder::TrajectoryVector;
use crate::error::{CoreError, Result};
use crate::rng::derive_rng;

/// One training point: a frozen trajectory plus its outcome label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub subject_id: String,
    pub trajectory: Vec<f64>,
    pub label: u8,
}

impl LabeledEmbedding {
    pub fn new(trajectory: TrajectoryVector, label: u8) -> Self {
        Self {
            subject_id: trajectory.subject_id,
            trajectory: trajectory.values,
            label,
        }
    }
}

/// A fitted model that scores queries. Implementations are immutable after
/// fit and safe to share across threads.
pub trait ClassifierModel: Send + Sync {
    /// p(y=1) for each query trajectory, each in [0,1].
    fn predict_proba(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>>;
    fn name(&self) -> &str;
}

fn validate_train(train: &[LabeledEmbedding]) -> Result<usize> {
    if train.is_empty() {
        return Err(CoreError::Config("fit: empty training set".into()));
    }
    let dim = train[0].trajectory.len();
    for t in train {
        if t.trajectory.len() != dim {
            return Err(CoreError::Shape(format!(
                "fit: '{}' has dimension {}, expected {dim}",
                t.subject_id,
                t.trajectory.len()
            )));
        }
        let norm = t.trajectory.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::Numeric(format!(
                "fit: trajectory '{}' has norm {norm}, expected 1",
                t.subject_id
            )));
        }
        if t.label > 1 {
            return Err(CoreError::Config(format!(
                "fit: '{}' has label {}, expected 0 or 1",
                t.subject_id, t.label
            )));
        }
    }
    Ok(dim)
}

fn require_both_classes(train: &[LabeledEmbedding]) -> Result<()> {
    let positives = train.iter().filter(|t| t.label == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(CoreError::Config(
            "fit: training data must contain both classes".into(),
        ));
    }
    Ok(())
}

fn check_queries(queries: &[Vec<f64>], dim: usize) -> Result<()> {
    for q in queries {
        if q.len() != dim {
            return Err(CoreError::Shape(format!(
                "predict: query has dimension {}, model expects {dim}",
                q.len()
            )));
        }
    }
    Ok(())
}

// Balanced class weight n / (2 n_c), per class.
fn balanced_weights(train: &[LabeledEmbedding]) -> [f64; 2] {
    let n = train.len() as f64;
    let n1 = train.iter().filter(|t| t.label == 1).count() as f64;
    let n0 = n - n1;
    [n / (2.0 * n0), n / (2.0 * n1)]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The M4 rule: k = min(5, floor(n_train / 2)), never below 1.
pub fn knn_k_rule(n_train: usize) -> usize {
    (n_train / 2).min(5).max(1)
}

/// Cosine k-NN with the archive's tie rule (equal similarity → earlier
/// training point wins).
#[derive(Debug)]
pub struct KnnClassifier {
    dim: usize,
    k: usize,
    points: Vec<(Vec<f64>, u8)>,
}

impl KnnClassifier {
    pub fn fit(train: &[LabeledEmbedding]) -> Result<Self> {
        let dim = validate_train(train)?;
        Ok(Self {
            dim,
            k: knn_k_rule(train.len()),
            points: train.iter().map(|t| (t.trajectory.clone(), t.label)).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl ClassifierModel for KnnClassifier {
    fn predict_proba(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_queries(queries, self.dim)?;
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            let mut ranked: Vec<(usize, f64)> = self
                .points
                .iter()
                .enumerate()
                .map(|(i, (x, _))| (i, x.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()))
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("similarities are finite"));
            ranked.truncate(self.k);
            let positives = ranked.iter().filter(|(i, _)| self.points[*i].1 == 1).count();
            out.push(positives as f64 / self.k as f64);
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "knn"
    }
}

/// Hyperparameters for [`LogisticRegression::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticConfig {
    pub c: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iters: 1000,
            tolerance: 1e-6,
        }
    }
}

/// Balanced-class logistic regression: minimizes
/// sum_i nll_i / (2 n_{c(i)}) + ||w||^2 / (2C) with an unregularized bias,
/// by gradient descent with Armijo backtracking. The per-class 1/(2 n_c)
/// weighting makes the objective invariant to duplicating the data.
pub struct LogisticRegression {
    weights: Vec<f64>,
    bias: f64,
}

struct LogisticProblem<'a> {
    train: &'a [LabeledEmbedding],
    sample_weights: Vec<f64>,
    c: f64,
    dim: usize,
}

impl LogisticProblem<'_> {
    fn objective(&self, w: &[f64], b: f64) -> f64 {
        let mut loss = 0.0;
        for (t, &sw) in self.train.iter().zip(&self.sample_weights) {
            let z = t.trajectory.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let zp = if t.label == 1 { -z } else { z };
            loss += sw * (zp.max(0.0) + (-zp.abs()).exp().ln_1p());
        }
        loss + w.iter().map(|wi| wi * wi).sum::<f64>() / (2.0 * self.c)
    }

    // returns (grad_w, grad_b)
    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; self.dim];
        let mut gb = 0.0;
        for (t, &sw) in self.train.iter().zip(&self.sample_weights) {
            let z = t.trajectory.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let residual = sw * (sigmoid(z) - t.label as f64);
            for (g, x) in gw.iter_mut().zip(&t.trajectory) {
                *g += residual * x;
            }
            gb += residual;
        }
        for (g, wi) in gw.iter_mut().zip(w) {
            *g += wi / self.c;
        }
        (gw, gb)
    }
}

impl LogisticRegression {
    pub fn fit(train: &[LabeledEmbedding], config: &LogisticConfig) -> Result<Self> {
        let dim = validate_train(train)?;
        require_both_classes(train)?;
        if config.c <= 0.0 {
            return Err(CoreError::Config("logistic: C must be > 0".into()));
        }
        let n1 = train.iter().filter(|t| t.label == 1).count() as f64;
        let n0 = train.len() as f64 - n1;
        // 1/(2 n_c): the balanced weight n/(2 n_c) divided by n
        let sample_weights: Vec<f64> = train
            .iter()
            .map(|t| 1.0 / (2.0 * if t.label == 1 { n1 } else { n0 }))
            .collect();
        let problem = LogisticProblem {
            train,
            sample_weights,
            c: config.c,
            dim,
        };

        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut value = problem.objective(&w, b);
        for _ in 0..config.max_iters {
            let (gw, gb) = problem.gradient(&w, b);
            let grad_sq: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
            if grad_sq.sqrt() < config.tolerance {
                break;
            }
            // Armijo backtracking from a unit step
            let mut step = 1.0;
            loop {
                let wt: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
                let bt = b - step * gb;
                let candidate = problem.objective(&wt, bt);
                if candidate <= value - 1e-4 * step * grad_sq {
                    w = wt;
                    b = bt;
                    value = candidate;
                    break;
                }
                step *= 0.5;
                if step < 1e-16 {
                    // no descent possible at machine precision; accept w
                    break;
                }
            }
        }
        let (gw, gb) = problem.gradient(&w, b);
        let grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if grad_norm >= 1e-5 {
            return Err(CoreError::Numeric(format!(
                "logistic: optimizer stalled at gradient norm {grad_norm:e}"
            )));
        }
        Ok(Self { weights: w, bias: b })
    }

    pub fn coefficients(&self) -> (&[f64], f64) {
        (&self.weights, self.bias)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = vec![
            NamedTensor {
                name: "w".into(),
                shape: (1, self.weights.len()),
                values: self.weights.clone(),
            },
            NamedTensor {
                name: "b".into(),
                shape: (1, 1),
                values: vec![self.bias],
            },
        ];
        save_checkpoint(path, &tensors, &serde_json::json!({"model_type": "logistic_regression"}))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, echo) = load_checkpoint(path)?;
        if echo["model_type"] != "logistic_regression" {
            return Err(CoreError::Parse("snapshot is not a logistic regression".into()));
        }
        let mut weights = None;
        let mut bias = None;
        for t in tensors {
            match t.name.as_str() {
                "w" => weights = Some(t.values),
                "b" => bias = t.values.first().copied(),
                other => return Err(CoreError::Parse(format!("unexpected tensor '{other}'"))),
            }
        }
        match (weights, bias) {
            (Some(weights), Some(bias)) => Ok(Self { weights, bias }),
            _ => Err(CoreError::Parse("snapshot is missing coefficients".into())),
        }
    }
}

impl ClassifierModel for LogisticRegression {
    fn predict_proba(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_queries(queries, self.weights.len())?;
        Ok(queries
            .iter()
            .map(|q| sigmoid(q.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>() + self.bias))
            .collect())
    }

    fn name(&self) -> &str {
        "logistic_regression"
    }
}

/// Hyperparameters for [`MlpClassifier::fit`]. The paper-style defaults
/// are hidden layers [256, 128] with l2 strength 1e-3 and early stopping;
/// the epoch budget and patience are our declared defaults.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            alpha: 1e-3,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.2,
            seed: 99,
        }
    }
}

impl MlpConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(CoreError::Config("mlp: need at least one hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(CoreError::Config("mlp: validation_fraction must be in [0,1)".into()));
        }
        if !(self.learning_rate > 0.0) || self.alpha < 0.0 {
            return Err(CoreError::Config("mlp: bad learning_rate or alpha".into()));
        }
        Ok(())
    }
}

/// Feed-forward classifier trained with balanced-weight cross-entropy and
/// early stopping on a stratified validation split.
pub struct MlpClassifier {
    config: MlpConfig,
    dim: usize,
    params: ParamSet,
}

fn mlp_layer_names(hidden: &[usize]) -> Vec<String> {
    (0..=hidden.len()).map(|i| format!("layer.{i}")).collect()
}

fn mlp_init(dim: usize, config: &MlpConfig) -> Result<ParamSet> {
    let mut rng = derive_rng(config.seed, &[7]);
    let mut params = ParamSet::new();
    let mut fan_in = dim;
    let widths: Vec<usize> = config.hidden.iter().copied().chain([1]).collect();
    for (name, width) in mlp_layer_names(&config.hidden).iter().zip(widths) {
        let std = (2.0 / fan_in as f64).sqrt();
        let values: Vec<f64> = (0..fan_in * width)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        params.add(&format!("{name}.w"), (fan_in, width), values)?;
        params.add(&format!("{name}.b"), (1, width), vec![0.0; width])?;
        fan_in = width;
    }
    Ok(params)
}

fn mlp_forward(
    tape: &mut Tape,
    params: &ParamSet,
    x: crate::diffkernel::NodeId,
    n_layers: usize,
) -> Result<crate::diffkernel::NodeId> {
    let mut h = x;
    for l in 0..n_layers {
        let w = tape.param(params, 2 * l)?;
        let b = tape.param(params, 2 * l + 1)?;
        h = tape.dense(h, w, b)?;
        if l + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

fn weighted_ce_loss(
    tape: &mut Tape,
    logits: crate::diffkernel::NodeId,
    labels: &[u8],
    class_weights: [f64; 2],
) -> Result<crate::diffkernel::NodeId> {
    let neg_sign: Vec<f64> = labels.iter().map(|&y| if y == 1 { -1.0 } else { 1.0 }).collect();
    let weights: Vec<f64> = labels.iter().map(|&y| class_weights[y as usize]).collect();
    let zp = tape.mul_const(logits, &neg_sign)?;
    let ce = tape.softplus(zp)?;
    let weighted = tape.mul_const(ce, &weights)?;
    tape.mean(weighted)
}

impl MlpClassifier {
    pub fn fit(train: &[LabeledEmbedding], config: &MlpConfig) -> Result<Self> {
        let dim = validate_train(train)?;
        require_both_classes(train)?;
        config.validate()?;

        // stratified validation split for early stopping
        let mut split_rng = derive_rng(config.seed, &[8]);
        let mut val_idx: Vec<usize> = Vec::new();
        for class in [0u8, 1u8] {
            let mut members: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == class).collect();
            members.shuffle(&mut split_rng);
            let n_val = ((members.len() as f64) * config.validation_fraction).round() as usize;
            let n_val = n_val.min(members.len().saturating_sub(1));
            val_idx.extend(members.into_iter().take(n_val));
        }
        val_idx.sort_unstable();
        let train_idx: Vec<usize> = (0..train.len()).filter(|i| !val_idx.contains(i)).collect();

        let class_weights = balanced_weights(
            &train_idx.iter().map(|&i| train[i].clone()).collect::<Vec<_>>(),
        );

        let flat = |idx: &[usize]| -> (Vec<f64>, Vec<u8>) {
            let mut xs = Vec::with_capacity(idx.len() * dim);
            let mut ys = Vec::with_capacity(idx.len());
            for &i in idx {
                xs.extend_from_slice(&train[i].trajectory);
                ys.push(train[i].label);
            }
            (xs, ys)
        };
        let (train_x, train_y) = flat(&train_idx);
        let (val_x, val_y) = flat(&val_idx);

        let mut params = mlp_init(dim, config)?;
        let n_layers = config.hidden.len() + 1;
        let optimizer = OptimizerConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.alpha,
            cosine_t_max: config.max_epochs.max(1),
            ..OptimizerConfig::default()
        };

        let mut best: Option<(f64, ParamSet)> = None;
        let mut since_best = 0usize;
        for epoch in 0..config.max_epochs {
            let mut tape = Tape::new();
            let x = tape.input((train_idx.len(), dim), train_x.clone())?;
            let logits = mlp_forward(&mut tape, &params, x, n_layers)?;
            let loss = weighted_ce_loss(&mut tape, logits, &train_y, class_weights)?;
            tape.backward(loss)?;
            tape.export_grads(&mut params);
            optimizer_step(&mut params, &optimizer, epoch)?;
            params.zero_grad();

            let monitored = if val_idx.is_empty() {
                tape.scalar(loss)
            } else {
                let mut vt = Tape::new();
                let xv = vt.input((val_idx.len(), dim), val_x.clone())?;
                let lv = mlp_forward(&mut vt, &params, xv, n_layers)?;
                let vl = weighted_ce_loss(&mut vt, lv, &val_y, class_weights)?;
                vt.scalar(vl)
            };
            if best.as_ref().map(|(b, _)| monitored < *b).unwrap_or(true) {
                best = Some((monitored, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
        if let Some((_, p)) = best {
            params = p;
        }
        Ok(Self {
            config: config.clone(),
            dim,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape,
                values: p.values.clone(),
            })
            .collect();
        let echo = serde_json::json!({
            "model_type": "mlp_classifier",
            "dim": self.dim,
            "config": self.config,
        });
        save_checkpoint(path, &tensors, &echo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, echo) = load_checkpoint(path)?;
        if echo["model_type"] != "mlp_classifier" {
            return Err(CoreError::Parse("snapshot is not an mlp classifier".into()));
        }
        let config: MlpConfig = serde_json::from_value(echo["config"].clone())
            .map_err(|e| CoreError::Parse(format!("snapshot config: {e}")))?;
        let dim = echo["dim"]
            .as_u64()
            .ok_or_else(|| CoreError::Parse("snapshot is missing dim".into()))? as usize;
        let mut params = mlp_init(dim, &config)?;
        for t in tensors {
            let pid = (0..params.len())
                .find(|&i| params.get(i).name == t.name)
                .ok_or_else(|| CoreError::Parse(format!("unexpected tensor '{}'", t.name)))?;
            if params.get(pid).shape != t.shape {
                return Err(CoreError::Parse(format!("tensor '{}' shape mismatch", t.name)));
            }
            params.get_mut(pid).values = t.values;
        }
        Ok(Self { config, dim, params })
    }
}

impl ClassifierModel for MlpClassifier {
    fn predict_proba(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_queries(queries, self.dim)?;
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let flat: Vec<f64> = queries.iter().flat_map(|q| q.iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.input((queries.len(), self.dim), flat)?;
        let logits = mlp_forward(&mut tape, &self.params, x, self.config.hidden.len() + 1)?;
        Ok(tape.values(logits).iter().map(|&z| sigmoid(z)).collect())
    }

    fn name(&self) -> &str {
        "mlp"
    }
}

/// Equal-weight soft vote: the mean of member probabilities.
pub struct SoftVoteEnsemble {
    members: Vec<Box<dyn ClassifierModel>>,
}

impl SoftVoteEnsemble {
    pub fn new(members: Vec<Box<dyn ClassifierModel>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(CoreError::Config(format!(
                "ensemble: need at least 2 members, got {}",
                members.len()
            )));
        }
        Ok(Self { members })
    }

    /// The default diversity set: k-NN, logistic regression, and two MLPs
    /// with distinct seeds.
    pub fn fit_default(train: &[LabeledEmbedding]) -> Result<Self> {
        let members: Vec<Box<dyn ClassifierModel>> = vec![
            Box::new(KnnClassifier::fit(train)?),
            Box::new(LogisticRegression::fit(train, &LogisticConfig::default())?),
            Box::new(MlpClassifier::fit(train, &MlpConfig::with_seed(99))?),
            Box::new(MlpClassifier::fit(train, &MlpConfig::with_seed(123))?),
        ];
        Self::new(members)
    }

    pub fn members(&self) -> &[Box<dyn ClassifierModel>] {
        &self.members
    }
}

impl ClassifierModel for SoftVoteEnsemble {
    fn predict_proba(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; queries.len()];
        for member in &self.members {
            let probs = member.predict_proba(queries)?;
            for (a, p) in acc.iter_mut().zip(probs) {
                *a += p;
            }
        }
        let m = self.members.len() as f64;
        Ok(acc.into_iter().map(|a| a / m).collect())
    }

    fn name(&self) -> &str {
        "soft_vote_ensemble"
    }
}
