//! Leakage-free stratified cross-validation over the full pipeline, the
//! metric suite, threshold/weight sweeps, ablations, and report emission.
//!
//! The protocol: for every fold, an encoder is trained only on that fold's
//! training subjects, frozen, used to embed both partitions; the archive
//! holds only non-augmented training subjects. A held-out subject entering
//! any training path is a hard error. Headline metrics pool the union of
//! held-out predictions; per-fold values are also emitted.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::{build_archive, ArchiveEntry, Neighbor};
use crate::classifiers::{
    ClassifierModel, KnnClassifier, LabeledEmbedding, LogisticConfig, LogisticRegression,
    MlpClassifier, MlpConfig, SoftVoteEnsemble,
};
use crate::encoder::{encode_cohort, train_encoder, EncoderConfig, EncoderModel};
use crate::error::{CoreError, Result};
use crate::oracle::{
    audit_justification, predict, OracleConfig, OracleVerdict, QueryMeta, RuleBasedProvider,
};
use crate::rng::derive_rng;
use crate::synthdata::SubjectRecord;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One train/test split; ids, not indices, so leakage checks are explicit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// The full cross-validation plan.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Stratified shuffled k-fold: within each class, subjects are shuffled
/// and dealt into folds whose sizes differ by at most one, remainders
/// going to the lowest-index folds.
pub fn stratified_kfold(subjects: &[(String, u8)], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(CoreError::Config("stratified_kfold: need at least 2 folds".into()));
    }
    {
        let mut seen = HashSet::new();
        for (id, label) in subjects {
            if *label > 1 {
                return Err(CoreError::Config(format!(
                    "stratified_kfold: '{id}' has label {label}"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(CoreError::Config(format!(
                    "stratified_kfold: duplicate subject id '{id}'"
                )));
            }
        }
    }
    let mut test_sets: Vec<Vec<String>> = vec![Vec::new(); n_folds];
    for class in [0u8, 1u8] {
        let mut members: Vec<&String> = subjects
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id)
            .collect();
        if members.len() < n_folds {
            return Err(CoreError::Config(format!(
                "stratified_kfold: class {class} has {} members, fewer than {n_folds} folds",
                members.len()
            )));
        }
        let mut rng = derive_rng(seed, &[10, class as u64]);
        members.shuffle(&mut rng);
        let base = members.len() / n_folds;
        let extra = members.len() % n_folds;
        let mut cursor = 0;
        for (f, set) in test_sets.iter_mut().enumerate() {
            let take = base + usize::from(f < extra);
            set.extend(members[cursor..cursor + take].iter().map(|s| s.to_string()));
            cursor += take;
        }
    }
    let folds = test_sets
        .into_iter()
        .map(|test_ids| {
            let test: HashSet<&str> = test_ids.iter().map(|s| s.as_str()).collect();
            let train_ids = subjects
                .iter()
                .map(|(id, _)| id.clone())
                .filter(|id| !test.contains(id.as_str()))
                .collect();
            Fold { train_ids, test_ids }
        })
        .collect();
    Ok(FoldPlan { n_folds, seed, folds })
}

/// Threshold-dependent classification metrics plus AUC.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSet {
    pub auc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::Shape(format!(
            "metrics: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Numeric("metrics: non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(CoreError::Config(
            "metrics: both classes must be present".into(),
        ));
    }
    Ok(())
}

/// AUC-ROC as the Mann–Whitney statistic, computed from tie-averaged
/// ranks: P(score_pos > score_neg) + P(equal)/2.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scored(scores, labels)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // tie group [i, j] gets the average of ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = n as f64 - n_pos;
    let rank_sum: f64 = (0..n).filter(|&i| labels[i] == 1).map(|i| ranks[i]).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Confusion matrix at `threshold` (prediction = score > threshold,
/// strict) and the derived metric set, F1 on the positive class.
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricSet> {
    check_scored(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let sensitivity = tp as f64 / (tp + fneg) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    let f1_denom = 2 * tp + fp + fneg;
    let f1 = if f1_denom == 0 { 0.0 } else { 2.0 * tp as f64 / f1_denom as f64 };
    Ok(MetricSet {
        auc: auc_roc(scores, labels)?,
        f1,
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
    })
}

/// One threshold-grid row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThresholdSweep {
    pub rows: Vec<ThresholdRow>,
    pub best_threshold: f64,
}

/// Grid candidates over [0.30, 0.50] in steps of 0.02, both ends included.
pub fn threshold_grid() -> Vec<f64> {
    (0..=10).map(|i| (30 + 2 * i) as f64 / 100.0).collect()
}

/// Evaluates every grid threshold and selects the balanced-accuracy
/// argmax; ties resolve to the largest (most conservative) threshold.
pub fn threshold_sweep(scores: &[f64], labels: &[u8]) -> Result<ThresholdSweep> {
    let mut rows = Vec::with_capacity(11);
    let mut best_threshold = f64::NAN;
    let mut best_value = f64::NEG_INFINITY;
    for t in threshold_grid() {
        let metrics = classification_metrics(scores, labels, t)?;
        if metrics.balanced_accuracy >= best_value {
            best_value = metrics.balanced_accuracy;
            best_threshold = t;
        }
        rows.push(ThresholdRow { threshold: t, metrics });
    }
    Ok(ThresholdSweep { rows, best_threshold })
}

/// Archive-quality diagnostics over held-out queries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalQuality {
    /// Fraction of queries whose retrieved set contains at least one
    /// neighbor sharing the query's label.
    pub top_k_fidelity: f64,
    /// Mean similarity over all retrieved (query, neighbor) pairs.
    pub mean_cosine: f64,
    /// Mean |p_q − y| over held-out predictions.
    pub calibration_mae: f64,
}

pub fn retrieval_quality(
    retrievals: &[Vec<Neighbor>],
    query_labels: &[u8],
    fused_probabilities: &[f64],
) -> Result<RetrievalQuality> {
    if retrievals.len() != query_labels.len() || retrievals.len() != fused_probabilities.len() {
        return Err(CoreError::Shape("retrieval_quality: length mismatch".into()));
    }
    if retrievals.is_empty() {
        return Err(CoreError::Config("retrieval_quality: no queries".into()));
    }
    let mut hits = 0usize;
    let mut sim_total = 0.0;
    let mut sim_count = 0usize;
    for (ns, &y) in retrievals.iter().zip(query_labels) {
        if ns.iter().any(|n| n.label == y) {
            hits += 1;
        }
        sim_total += ns.iter().map(|n| n.similarity).sum::<f64>();
        sim_count += ns.len();
    }
    let mae = fused_probabilities
        .iter()
        .zip(query_labels)
        .map(|(&p, &y)| (p - y as f64).abs())
        .sum::<f64>()
        / query_labels.len() as f64;
    Ok(RetrievalQuality {
        top_k_fidelity: hits as f64 / retrievals.len() as f64,
        mean_cosine: sim_total / sim_count as f64,
        calibration_mae: mae,
    })
}

/// Evaluable method: three static baselines, the full oracle pipeline,
/// the ensemble, and three pipeline ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    M3,
    M3b,
    M4,
    M5,
    M6Style,
    RandomEncoder,
    K1Retrieval,
    NoAgeFilter,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::M3,
        Method::M3b,
        Method::M4,
        Method::M5,
        Method::M6Style,
        Method::RandomEncoder,
        Method::K1Retrieval,
        Method::NoAgeFilter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::M3 => "M3",
            Method::M3b => "M3b",
            Method::M4 => "M4",
            Method::M5 => "M5",
            Method::M6Style => "M6-style",
            Method::RandomEncoder => "random-encoder",
            Method::K1Retrieval => "k1-retrieval",
            Method::NoAgeFilter => "no-age-filter",
        }
    }

    /// Methods that score through the retrieval + verdict pipeline.
    fn uses_oracle(&self) -> bool {
        matches!(
            self,
            Method::M5 | Method::RandomEncoder | Method::K1Retrieval | Method::NoAgeFilter
        )
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown method '{s}'; expected one of {}",
                    Method::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

/// Full evaluation configuration, echoed verbatim into every report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_folds: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub oracle: OracleConfig,
    pub mlp_seeds: (u64, u64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            seed: 42,
            encoder: EncoderConfig::default(),
            oracle: OracleConfig::default(),
            mlp_seeds: (99, 123),
        }
    }
}

/// One held-out prediction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRow {
    pub subject_id: String,
    pub fold: usize,
    pub label: u8,
    pub score: f64,
}

/// ROC curve point at a given score threshold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RocPoint {
    /// `None` marks the (0, 0) origin, i.e. a threshold above every score.
    pub threshold: Option<f64>,
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
}

/// Aggregate audit over a method's verdicts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuditSummary {
    pub n_verdicts: usize,
    pub hallucination_rate: f64,
    pub age_filter_adherence: f64,
}

pub fn summarize_audit(verdicts: &[OracleVerdict]) -> Result<AuditSummary> {
    if verdicts.is_empty() {
        return Err(CoreError::Config("audit: no verdicts".into()));
    }
    let mut hallucinated = 0usize;
    let mut adherent = 0usize;
    for v in verdicts {
        let flags = audit_justification(v, &v.prompt);
        hallucinated += usize::from(flags.hallucination);
        adherent += usize::from(flags.age_filter_adherent);
    }
    Ok(AuditSummary {
        n_verdicts: verdicts.len(),
        hallucination_rate: hallucinated as f64 / verdicts.len() as f64,
        age_filter_adherence: adherent as f64 / verdicts.len() as f64,
    })
}

/// The report document: schema-versioned, self-describing via the config
/// echo, deterministic byte-for-byte under a fixed config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub config: EvalConfig,
    pub fold_plan: FoldPlan,
    pub predictions: Vec<PredictionRow>,
    pub fold_metrics: Vec<MetricSet>,
    /// Pooled over the union of held-out predictions at threshold 0.50.
    pub aggregate_default: MetricSet,
    pub threshold_sweep: ThresholdSweep,
    /// Pooled metrics at the sweep's best threshold.
    pub aggregate_optimized: MetricSet,
    pub roc_points: Vec<RocPoint>,
    pub retrieval: Option<RetrievalQuality>,
    pub audit: Option<AuditSummary>,
}

/// Everything a CV run produces: the serializable report plus the raw
/// verdicts (for logs and audits) when the method uses the oracle.
pub struct EvalOutcome {
    pub report: EvalReport,
    pub verdicts: Vec<OracleVerdict>,
}

pub const DEFAULT_THRESHOLD: f64 = 0.50;

struct FoldOutput {
    predictions: Vec<PredictionRow>,
    verdicts: Vec<OracleVerdict>,
    retrievals: Vec<Vec<Neighbor>>,
    retrieval_labels: Vec<u8>,
    retrieval_probs: Vec<f64>,
}

fn subjects_by_id<'a>(
    subjects: &'a [SubjectRecord],
    ids: &[String],
    what: &str,
) -> Result<Vec<&'a SubjectRecord>> {
    ids.iter()
        .map(|id| {
            subjects
                .iter()
                .find(|s| &s.subject_id == id)
                .ok_or_else(|| CoreError::Config(format!("{what}: unknown subject id '{id}'")))
        })
        .collect()
}

fn run_fold(
    subjects: &[SubjectRecord],
    fold_index: usize,
    fold: &Fold,
    method: Method,
    config: &EvalConfig,
) -> Result<FoldOutput> {
    let test_set: HashSet<String> = fold.test_ids.iter().cloned().collect();
    for id in &fold.train_ids {
        if test_set.contains(id) {
            return Err(CoreError::Leakage(id.clone()));
        }
    }
    let train: Vec<SubjectRecord> = subjects_by_id(subjects, &fold.train_ids, "fold train")?
        .into_iter()
        .cloned()
        .collect();
    let test: Vec<SubjectRecord> = subjects_by_id(subjects, &fold.test_ids, "fold test")?
        .into_iter()
        .cloned()
        .collect();

    // per-fold encoder seed so folds are not identical replicas
    let encoder_config = EncoderConfig {
        seed: config.encoder.seed.wrapping_add(fold_index as u64),
        ..config.encoder.clone()
    };
    let model = if method == Method::RandomEncoder {
        // frozen Gaussian initialization, no training
        EncoderModel::init(encoder_config)?
    } else {
        train_encoder(&train, &test_set, &encoder_config)?.0
    };

    let train_trajs = encode_cohort(&model, &train)?;
    let test_trajs = encode_cohort(&model, &test)?;

    let labels_test: Vec<u8> = test.iter().map(|s| s.label).collect();
    let mut predictions = Vec::with_capacity(test.len());
    let mut verdicts = Vec::new();
    let mut retrievals = Vec::new();
    let mut retrieval_probs = Vec::new();

    if method.uses_oracle() {
        let entries: Vec<ArchiveEntry> = train_trajs
            .iter()
            .zip(&train)
            .map(|(t, s)| {
                if test_set.contains(&t.subject_id) {
                    return Err(CoreError::Leakage(t.subject_id.clone()));
                }
                Ok(ArchiveEntry::new(t.clone(), s.label, s.age, s.sex))
            })
            .collect::<Result<Vec<_>>>()?;
        let archive = build_archive(entries)?;
        let oracle_config = match method {
            Method::K1Retrieval => OracleConfig { k: 1, ..config.oracle.clone() },
            Method::NoAgeFilter => OracleConfig {
                age_gap: f64::INFINITY,
                ..config.oracle.clone()
            },
            _ => config.oracle.clone(),
        };
        let provider = RuleBasedProvider;
        for (traj, subject) in test_trajs.iter().zip(&test) {
            let query = QueryMeta {
                subject_id: subject.subject_id.clone(),
                age: subject.age,
                sex: subject.sex,
            };
            let verdict = predict(&query, &traj.values, &archive, &provider, &oracle_config)?;
            predictions.push(PredictionRow {
                subject_id: subject.subject_id.clone(),
                fold: fold_index,
                label: subject.label,
                score: verdict.p_q,
            });
            retrievals.push(verdict.prompt.neighbors.clone());
            retrieval_probs.push(verdict.p_q);
            verdicts.push(verdict);
        }
    } else {
        let train_embeddings: Vec<LabeledEmbedding> = train_trajs
            .iter()
            .zip(&train)
            .map(|(t, s)| LabeledEmbedding::new(t.clone(), s.label))
            .collect();
        let queries: Vec<Vec<f64>> = test_trajs.iter().map(|t| t.values.clone()).collect();
        let scores = match method {
            Method::M3 => LogisticRegression::fit(&train_embeddings, &LogisticConfig::default())?
                .predict_proba(&queries)?,
            Method::M3b => MlpClassifier::fit(&train_embeddings, &MlpConfig::with_seed(config.mlp_seeds.0))?
                .predict_proba(&queries)?,
            Method::M4 => KnnClassifier::fit(&train_embeddings)?.predict_proba(&queries)?,
            Method::M6Style => {
                let members: Vec<Box<dyn ClassifierModel>> = vec![
                    Box::new(KnnClassifier::fit(&train_embeddings)?),
                    Box::new(LogisticRegression::fit(&train_embeddings, &LogisticConfig::default())?),
                    Box::new(MlpClassifier::fit(
                        &train_embeddings,
                        &MlpConfig::with_seed(config.mlp_seeds.0),
                    )?),
                    Box::new(MlpClassifier::fit(
                        &train_embeddings,
                        &MlpConfig::with_seed(config.mlp_seeds.1),
                    )?),
                ];
                SoftVoteEnsemble::new(members)?.predict_proba(&queries)?
            }
            _ => unreachable!("oracle methods handled above"),
        };
        for ((subject, score), _) in test.iter().zip(scores).zip(&labels_test) {
            predictions.push(PredictionRow {
                subject_id: subject.subject_id.clone(),
                fold: fold_index,
                label: subject.label,
                score,
            });
        }
    }

    Ok(FoldOutput {
        predictions,
        verdicts,
        retrievals,
        retrieval_labels: labels_test,
        retrieval_probs,
    })
}

fn roc_points(scores: &[f64], labels: &[u8]) -> Vec<RocPoint> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![RocPoint {
        threshold: None,
        false_positive_rate: 0.0,
        true_positive_rate: 0.0,
    }];
    for t in thresholds {
        // prediction rule score >= t here so every point is attained
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|&(&s, &y)| s >= t && y == 1)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|&(&s, &y)| s >= t && y == 0)
            .count() as f64;
        points.push(RocPoint {
            threshold: Some(t),
            false_positive_rate: fp / n_neg,
            true_positive_rate: tp / n_pos,
        });
    }
    points
}

/// Runs the cross-validated protocol for `method`, building the fold plan
/// from the cohort.
pub fn run_cv(subjects: &[SubjectRecord], method: Method, config: &EvalConfig) -> Result<EvalOutcome> {
    let ids: Vec<(String, u8)> = subjects.iter().map(|s| (s.subject_id.clone(), s.label)).collect();
    let plan = stratified_kfold(&ids, config.n_folds, config.seed)?;
    run_cv_with_plan(subjects, &plan, method, config)
}

/// As [`run_cv`] but with an explicit plan; validates the plan's partition
/// and leakage properties before any training starts.
pub fn run_cv_with_plan(
    subjects: &[SubjectRecord],
    plan: &FoldPlan,
    method: Method,
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    config.encoder.validate()?;
    config.oracle.validate()?;
    // partition check: every subject in exactly one test fold
    let mut seen: HashSet<&str> = HashSet::new();
    for fold in &plan.folds {
        for id in &fold.test_ids {
            if !seen.insert(id) {
                return Err(CoreError::Leakage(id.clone()));
            }
        }
    }
    if seen.len() != subjects.len() {
        return Err(CoreError::Config(format!(
            "fold plan covers {} subjects, cohort has {}",
            seen.len(),
            subjects.len()
        )));
    }
    drop(seen);

    // folds are independent; ordered collection keeps the report
    // deterministic regardless of thread count
    use rayon::prelude::*;
    let outputs: Vec<FoldOutput> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| run_fold(subjects, i, fold, method, config))
        .collect::<Result<Vec<_>>>()?;

    let mut predictions = Vec::new();
    let mut verdicts = Vec::new();
    let mut retrievals = Vec::new();
    let mut retrieval_labels = Vec::new();
    let mut retrieval_probs = Vec::new();
    let mut fold_metrics = Vec::new();
    for out in outputs {
        let scores: Vec<f64> = out.predictions.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = out.predictions.iter().map(|p| p.label).collect();
        fold_metrics.push(classification_metrics(&scores, &labels, DEFAULT_THRESHOLD)?);
        predictions.extend(out.predictions);
        verdicts.extend(out.verdicts);
        retrievals.extend(out.retrievals);
        retrieval_labels.extend(out.retrieval_labels);
        retrieval_probs.extend(out.retrieval_probs);
    }

    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let aggregate_default = classification_metrics(&scores, &labels, DEFAULT_THRESHOLD)?;
    let sweep = threshold_sweep(&scores, &labels)?;
    let aggregate_optimized = classification_metrics(&scores, &labels, sweep.best_threshold)?;
    let retrieval = if method.uses_oracle() {
        Some(retrieval_quality(&retrievals, &retrieval_labels, &retrieval_probs)?)
    } else {
        None
    };
    let audit = if method.uses_oracle() {
        Some(summarize_audit(&verdicts)?)
    } else {
        None
    };

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: method.as_str().to_string(),
        config: config.clone(),
        fold_plan: plan.clone(),
        roc_points: roc_points(&scores, &labels),
        predictions,
        fold_metrics,
        aggregate_default,
        threshold_sweep: sweep,
        aggregate_optimized,
        retrieval,
        audit,
    };
    Ok(EvalOutcome { report, verdicts })
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub aggregate: MetricSet,
    pub best_threshold: f64,
    pub balanced_accuracy_optimized: f64,
    pub retrieval: Option<RetrievalQuality>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub rows: Vec<AblationRow>,
}

/// Runs the pipeline ablations (full M5, untrained encoder, k=1
/// retrieval, disabled age filter) under one config.
pub fn run_ablations(subjects: &[SubjectRecord], config: &EvalConfig) -> Result<AblationReport> {
    let methods = [
        Method::M5,
        Method::RandomEncoder,
        Method::K1Retrieval,
        Method::NoAgeFilter,
    ];
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let outcome = run_cv(subjects, method, config)?;
        rows.push(AblationRow {
            method: method.as_str().to_string(),
            aggregate: outcome.report.aggregate_default.clone(),
            best_threshold: outcome.report.threshold_sweep.best_threshold,
            balanced_accuracy_optimized: outcome.report.aggregate_optimized.balanced_accuracy,
            retrieval: outcome.report.retrieval.clone(),
        });
    }
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        rows,
    })
}

/// Calibration-MAE curve over the fusion weight grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WeightSweepRow {
    pub neighbor_weight: f64,
    pub calibration_mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WeightSweepReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub rows: Vec<WeightSweepRow>,
}

/// Sweeps the fusion weight by rerunning only the (cached) fusion
/// arithmetic: retrieval results and verdicts do not depend on w_n, so the
/// expensive CV pass happens once.
pub fn weight_sweep(
    subjects: &[SubjectRecord],
    weights: &[f64],
    config: &EvalConfig,
) -> Result<WeightSweepReport> {
    for &w in weights {
        if !(0.0..=1.0).contains(&w) {
            return Err(CoreError::Config(format!("weight_sweep: weight {w} outside [0,1]")));
        }
    }
    let outcome = run_cv(subjects, Method::M5, config)?;
    let cached: Vec<(f64, f64, u8)> = outcome
        .report
        .predictions
        .iter()
        .zip(&outcome.verdicts)
        .map(|(p, v)| {
            debug_assert_eq!(p.subject_id, v.subject_id);
            (v.p_neighbor, v.p_llm, p.label)
        })
        .collect();
    let rows = weights
        .iter()
        .map(|&w| {
            let mae = cached
                .iter()
                .map(|&(p_n, p_llm, y)| {
                    let p_q = w * p_n + (1.0 - w) * p_llm;
                    (p_q - y as f64).abs()
                })
                .sum::<f64>()
                / cached.len() as f64;
            WeightSweepRow {
                neighbor_weight: w,
                calibration_mae: mae,
            }
        })
        .collect();
    Ok(WeightSweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        rows,
    })
}

/// Serializes any report value as pretty JSON with a trailing newline.
pub fn write_json_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report).map_err(|e| CoreError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// CSV analogs for external plotting: ROC points, the threshold table,
/// and the ablation grid.
pub fn write_roc_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "threshold,false_positive_rate,true_positive_rate")?;
    for p in &report.roc_points {
        let t = p.threshold.map(|t| t.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{}", t, p.false_positive_rate, p.true_positive_rate)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_threshold_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "threshold,balanced_accuracy,sensitivity,specificity,f1")?;
    for row in &report.threshold_sweep.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.threshold,
            row.metrics.balanced_accuracy,
            row.metrics.sensitivity,
            row.metrics.specificity,
            row.metrics.f1
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "method,auc,balanced_accuracy,best_threshold,top_k_fidelity,calibration_mae")?;
    for row in &report.rows {
        let (fidelity, mae) = row
            .retrieval
            .as_ref()
            .map(|r| (r.top_k_fidelity.to_string(), r.calibration_mae.to_string()))
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.method, row.aggregate.auc, row.aggregate.balanced_accuracy, row.best_threshold, fidelity, mae
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AugmentationConfig;
    use crate::synthdata::{generate_cohort, CohortSpec};
    use rand::Rng;

    fn synthetic_ids(n0: usize, n1: usize) -> Vec<(String, u8)> {
        (0..n0)
            .map(|i| (format!("n{i:04}"), 0u8))
            .chain((0..n1).map(|i| (format!("p{i:04}"), 1u8)))
            .collect()
    }

    #[test]
    fn fold_plan_matches_the_published_cohort_counts() {
        let plan = stratified_kfold(&synthetic_ids(215, 53), 5, 42).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(|f| f.test_ids.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![53, 53, 54, 54, 54]);
        for fold in &plan.folds {
            let positives = fold.test_ids.iter().filter(|id| id.starts_with('p')).count();
            assert!(positives == 10 || positives == 11, "{positives}");
            assert_eq!(fold.train_ids.len() + fold.test_ids.len(), 268);
        }
    }

    #[test]
    fn fold_plan_partitions_and_is_deterministic() {
        let ids = synthetic_ids(23, 11);
        let plan = stratified_kfold(&ids, 5, 7).unwrap();
        let again = stratified_kfold(&ids, 5, 7).unwrap();
        assert_eq!(plan, again);
        let mut all: Vec<&String> = plan.folds.iter().flat_map(|f| f.test_ids.iter()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 34);
        let other = stratified_kfold(&ids, 5, 8).unwrap();
        assert_ne!(plan, other, "different seeds should shuffle differently");
    }

    #[test]
    fn fold_plan_exact_divisibility_and_small_class_error() {
        let plan = stratified_kfold(&synthetic_ids(5, 5), 5, 1).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test_ids.len(), 2);
            assert_eq!(fold.test_ids.iter().filter(|id| id.starts_with('p')).count(), 1);
        }
        assert!(stratified_kfold(&synthetic_ids(10, 4), 5, 1).is_err());
    }

    #[test]
    fn auc_matches_hand_example_and_edge_cases() {
        let auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12, "{auc}");
        let perfect = auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(perfect, 1.0);
        let ties = auc_roc(&[0.5; 6], &[0, 1, 0, 1, 0, 1]).unwrap();
        assert!((ties - 0.5).abs() < 1e-12);
        assert!(auc_roc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_equals_exhaustive_pair_counting() {
        let mut rng = derive_rng(40, &[0]);
        for _ in 0..300 {
            let n = rng.gen_range(2..=50);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // coarse grid to force plenty of ties
                    (rng.gen_range(0..10) as f64) / 10.0
                })
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let got = auc_roc(&scores, &labels).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                            std::cmp::Ordering::Greater => 1.0,
                            std::cmp::Ordering::Equal => 0.5,
                            std::cmp::Ordering::Less => 0.0,
                        };
                    }
                }
            }
            let expected = num / den;
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn balanced_accuracy_reproduces_the_published_arithmetic() {
        // sensitivity 0.566, specificity 0.921: (0.566 + 0.921)/2
        let ba: f64 = (0.566 + 0.921) / 2.0;
        assert!((ba - 0.7435).abs() < 1e-12);
        assert_eq!(format!("{:.3}", ba), "0.744");
    }

    #[test]
    fn metrics_match_a_hand_confusion_matrix() {
        // threshold 0.5: predictions [1,0,1,0,0,1,0,0]
        let scores = [0.9, 0.2, 0.7, 0.4, 0.1, 0.6, 0.3, 0.45];
        let labels = [1, 1, 1, 0, 0, 0, 0, 1];
        let m = classification_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(
            (m.true_positives, m.false_positives, m.true_negatives, m.false_negatives),
            (2, 1, 3, 2)
        );
        assert!((m.sensitivity - 0.5).abs() < 1e-12);
        assert!((m.specificity - 0.75).abs() < 1e-12);
        assert!((m.balanced_accuracy - (m.sensitivity + m.specificity) / 2.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 * 2.0 / (2.0 * 2.0 + 1.0 + 2.0)).abs() < 1e-12);

        // all correct
        let m = classification_metrics(&[0.1, 0.9], &[0, 1], 0.5).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.f1), (1.0, 1.0, 1.0));

        // f1 0/0 convention: no positive predictions and no true positives
        let m = classification_metrics(&[0.1, 0.2], &[0, 1], 0.9).unwrap();
        assert_eq!(m.true_positives, 0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn threshold_grid_has_eleven_inclusive_candidates() {
        let grid = threshold_grid();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid[0], 0.30);
        assert_eq!(grid[10], 0.50);
        for pair in grid.windows(2) {
            assert!((pair[1] - pair[0] - 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_sweep_ties_resolve_to_the_largest() {
        // constant scores: every threshold gives identical metrics
        let sweep = threshold_sweep(&[0.7, 0.7, 0.7, 0.7], &[0, 1, 0, 1]).unwrap();
        assert_eq!(sweep.best_threshold, 0.50);
        assert_eq!(sweep.rows.len(), 11);
    }

    #[test]
    fn threshold_sweep_matches_a_brute_force_argmax() {
        let mut rng = derive_rng(41, &[0]);
        for _ in 0..30 {
            let n = rng.gen_range(6..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4).min(1) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let sweep = threshold_sweep(&scores, &labels).unwrap();
            let mut best = f64::NEG_INFINITY;
            let mut best_t = f64::NAN;
            for t in threshold_grid() {
                let ba = classification_metrics(&scores, &labels, t).unwrap().balanced_accuracy;
                if ba >= best {
                    best = ba;
                    best_t = t;
                }
            }
            assert_eq!(sweep.best_threshold, best_t);
        }
    }

    fn neighbor(label: u8, sim: f64) -> Neighbor {
        Neighbor {
            archive_index: 0,
            subject_id: "x".into(),
            similarity: sim,
            label,
            age: 40.0,
            sex: crate::synthdata::Sex::F,
        }
    }

    #[test]
    fn retrieval_quality_matches_hand_enumeration() {
        let retrievals = vec![
            vec![neighbor(1, 0.9), neighbor(0, 0.8)],
            vec![neighbor(0, 0.7)],
            vec![neighbor(0, 0.6), neighbor(0, 0.5)],
            vec![neighbor(1, 1.0)],
        ];
        let labels = [1, 1, 0, 1];
        let p_q = [0.9, 0.3, 0.1, 0.8];
        let q = retrieval_quality(&retrievals, &labels, &p_q).unwrap();
        // queries 0, 2, 3 find a same-label neighbor; query 1 does not
        assert!((q.top_k_fidelity - 0.75).abs() < 1e-12);
        let mean = (0.9 + 0.8 + 0.7 + 0.6 + 0.5 + 1.0) / 6.0;
        assert!((q.mean_cosine - mean).abs() < 1e-12);
        let mae = ((1.0f64 - 0.9).abs() + (1.0f64 - 0.3).abs() + 0.1 + (1.0f64 - 0.8).abs()) / 4.0;
        assert!((q.calibration_mae - mae).abs() < 1e-12);

        // perfect calibration
        let q = retrieval_quality(&retrievals, &labels, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(q.calibration_mae, 0.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_str(m.as_str()).unwrap(), m);
        }
        assert!(Method::from_str("M99").is_err());
    }

    // a tiny but trainable configuration for end-to-end CV tests
    fn tiny_eval_config() -> EvalConfig {
        EvalConfig {
            n_folds: 3,
            seed: 42,
            encoder: EncoderConfig {
                volume_dim: 8,
                backbone_widths: vec![8, 12],
                projection_hidden: 6,
                trajectory_dim: 4,
                epochs: 1,
                augmentation: AugmentationConfig::default(),
                ..EncoderConfig::default()
            },
            oracle: OracleConfig::default(),
            mlp_seeds: (99, 123),
        }
    }

    fn tiny_cohort(n: usize, seed: u64) -> Vec<SubjectRecord> {
        generate_cohort(&CohortSpec {
            n_subjects: n,
            positive_fraction: 0.33,
            volume_dim: 8,
            class_separation: 1.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn cv_report_covers_every_subject_exactly_once() {
        let cohort = tiny_cohort(24, 50);
        let outcome = run_cv(&cohort, Method::M4, &tiny_eval_config()).unwrap();
        let report = &outcome.report;
        let mut ids: Vec<&String> = report.predictions.iter().map(|p| &p.subject_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 24);
        assert_eq!(report.fold_metrics.len(), 3);
        assert!(report.retrieval.is_none());
        assert!(report.audit.is_none());
        // balanced-accuracy identity on every emitted metric set
        for m in report.fold_metrics.iter().chain([&report.aggregate_default]) {
            assert!((m.balanced_accuracy - (m.sensitivity + m.specificity) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_m5_produces_verdicts_and_clean_audit() {
        let cohort = tiny_cohort(24, 51);
        let outcome = run_cv(&cohort, Method::M5, &tiny_eval_config()).unwrap();
        assert_eq!(outcome.verdicts.len(), 24);
        let audit = outcome.report.audit.unwrap();
        assert_eq!(audit.hallucination_rate, 0.0);
        assert_eq!(audit.age_filter_adherence, 1.0);
        assert!(outcome.report.retrieval.is_some());
        // fused scores live strictly inside (0,1) by construction
        for p in &outcome.report.predictions {
            assert!(p.score > 0.0 && p.score < 1.0);
        }
    }

    #[test]
    fn leakage_sentinel_aborts_a_corrupted_plan() {
        let cohort = tiny_cohort(24, 52);
        let ids: Vec<(String, u8)> = cohort.iter().map(|s| (s.subject_id.clone(), s.label)).collect();
        let mut plan = stratified_kfold(&ids, 3, 42).unwrap();
        // inject a test subject of fold 0 into its own training list
        let smuggled = plan.folds[0].test_ids[0].clone();
        plan.folds[0].train_ids.push(smuggled.clone());
        match run_cv_with_plan(&cohort, &plan, Method::M4, &tiny_eval_config()) {
            Err(CoreError::Leakage(id)) => assert_eq!(id, smuggled),
            other => panic!("expected leakage abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn m5_with_full_neighbor_weight_equals_knn_majority() {
        let cohort = tiny_cohort(27, 53);
        let mut config = tiny_eval_config();
        config.oracle.neighbor_weight = 1.0;
        let m5 = run_cv(&cohort, Method::M5, &config).unwrap();
        let m4 = run_cv(&cohort, Method::M4, &config).unwrap();
        // identical k (18 train subjects per fold ⇒ k = 5 both ways) and
        // identical tie rules ⇒ identical predicted labels at 0.5
        for (a, b) in m5.report.predictions.iter().zip(&m4.report.predictions) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(
                a.score > DEFAULT_THRESHOLD,
                b.score > DEFAULT_THRESHOLD,
                "{}: {} vs {}",
                a.subject_id,
                a.score,
                b.score
            );
        }
    }

    #[test]
    fn reports_are_deterministic_across_runs_and_thread_counts() {
        let cohort = tiny_cohort(24, 54);
        let config = tiny_eval_config();
        let a = run_cv(&cohort, Method::M5, &config).unwrap();
        let b = run_cv(&cohort, Method::M5, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| run_cv(&cohort, Method::M5, &config)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&c.report).unwrap()
        );
    }

    #[test]
    fn weight_sweep_cache_matches_full_reruns() {
        let cohort = tiny_cohort(24, 55);
        let config = tiny_eval_config();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let sweep = weight_sweep(&cohort, &grid, &config).unwrap();
        assert_eq!(sweep.rows.len(), 11);
        for &w in &[0.0, 0.6, 1.0] {
            let mut rerun_config = config.clone();
            rerun_config.oracle.neighbor_weight = w;
            let rerun = run_cv(&cohort, Method::M5, &rerun_config).unwrap();
            let expected = rerun.report.retrieval.unwrap().calibration_mae;
            let row = sweep.rows.iter().find(|r| r.neighbor_weight == w).unwrap();
            assert_eq!(
                row.calibration_mae.to_bits(),
                expected.to_bits(),
                "w = {w}: cached {} vs rerun {expected}",
                row.calibration_mae
            );
        }
        // w = 1.0 degenerates to the pure neighbor-vote MAE
        let pure = sweep.rows.iter().find(|r| r.neighbor_weight == 1.0).unwrap();
        let rerun = {
            let mut c = config.clone();
            c.oracle.neighbor_weight = 1.0;
            run_cv(&cohort, Method::M5, &c).unwrap()
        };
        let mae_from_votes = rerun
            .verdicts
            .iter()
            .zip(&rerun.report.predictions)
            .map(|(v, p)| (v.p_neighbor - p.label as f64).abs())
            .sum::<f64>()
            / rerun.verdicts.len() as f64;
        assert!((pure.calibration_mae - mae_from_votes).abs() < 1e-12);
    }

    #[test]
    fn report_json_round_trips() {
        let cohort = tiny_cohort(24, 56);
        let outcome = run_cv(&cohort, Method::M5, &tiny_eval_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_json_report(&path, &outcome.report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, outcome.report);

        write_roc_csv(&dir.path().join("roc.csv"), &outcome.report).unwrap();
        write_threshold_csv(&dir.path().join("thresholds.csv"), &outcome.report).unwrap();
        let roc = std::fs::read_to_string(dir.path().join("roc.csv")).unwrap();
        assert!(roc.lines().count() > 2);
    }

    #[test]
    fn roc_points_span_the_unit_square() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.6];
        let labels = [0, 0, 1, 1, 0];
        let points = roc_points(&scores, &labels);
        let first = points.first().unwrap();
        assert_eq!((first.false_positive_rate, first.true_positive_rate), (0.0, 0.0));
        let last = points.last().unwrap();
        assert_eq!((last.false_positive_rate, last.true_positive_rate), (1.0, 1.0));
        // monotone non-decreasing in both coordinates
        for pair in points.windows(2) {
            assert!(pair[1].false_positive_rate >= pair[0].false_positive_rate);
            assert!(pair[1].true_positive_rate >= pair[0].true_positive_rate);
        }
    }
}
