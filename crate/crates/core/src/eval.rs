//! Clustering and prediction metrics, k-fold planning and the persistence
//! baseline.

use std::collections::HashMap;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ggnn::codec::{CodecError, GridCodec};
use crate::ggnn::{predict_next_vector, train_on_vectors, GgnnError, TrainConfig};
use crate::graph::{GraphSequence, StationGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("AUC is undefined: every pair falls in one class")]
    UndefinedAuc,
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("{subsets} subsets cannot fill {k} folds")]
    TooFewSubsets { subsets: usize, k: usize },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("fold {fold} does not exist in a {k}-fold plan")]
    NoSuchFold { fold: usize, k: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] GgnnError),
}

/// Area under the ROC curve of `scores` against binary `labels`
/// (Mann–Whitney statistic, ties counted as one half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Confidence of predicted co-membership for a pair of points.
#[derive(Debug, Clone, Copy)]
pub enum PairScores<'a> {
    /// 1 when both points share a predicted cluster, else 0.
    Hard,
    /// `c_i · c_j` when both share a predicted cluster, else 0, with
    /// per-point confidences `c` (e.g. from [`rho_confidence`]).
    Soft(&'a [f64]),
}

/// `ρ_i / ρ_max` per point (all 1 when every ρ is 0).
pub fn rho_confidence(rho: &[u32]) -> Vec<f64> {
    let max = rho.iter().copied().max().unwrap_or(0);
    rho.iter().map(|&r| if max == 0 { 1.0 } else { r as f64 / max as f64 }).collect()
}

/// Upper bound on scored pairs before sampling kicks in.
pub const MAX_AUC_PAIRS: usize = 100_000;

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pairwise co-membership AUC: every unordered pair of points is an
/// instance, positive when both share a true label, scored by predicted
/// co-membership. Unlabelled points (`None`) share a cluster with nobody.
///
/// Hard scores are evaluated exactly from cluster-overlap counts. Soft
/// scores enumerate all pairs, or a seeded sample of [`MAX_AUC_PAIRS`]
/// pairs when there are more.
pub fn pairwise_comembership_auc(
    predicted: &[Option<usize>],
    truth: &[usize],
    scores: PairScores<'_>,
    seed: u64,
) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    let n = truth.len();
    match scores {
        PairScores::Hard => {
            let mut true_sizes: HashMap<usize, u64> = HashMap::new();
            let mut pred_sizes: HashMap<usize, u64> = HashMap::new();
            let mut both: HashMap<(usize, usize), u64> = HashMap::new();
            for (p, &t) in predicted.iter().zip(truth) {
                *true_sizes.entry(t).or_default() += 1;
                if let Some(p) = *p {
                    *pred_sizes.entry(p).or_default() += 1;
                    *both.entry((p, t)).or_default() += 1;
                }
            }
            let pairs = choose2(n as u64);
            let positives: u64 = true_sizes.values().map(|&s| choose2(s)).sum();
            let negatives = pairs - positives;
            if positives == 0 || negatives == 0 {
                return Err(EvalError::UndefinedAuc);
            }
            let same_pred: u64 = pred_sizes.values().map(|&s| choose2(s)).sum();
            let tp: u64 = both.values().map(|&s| choose2(s)).sum();
            let fp = same_pred - tp;
            let tpr = tp as f64 / positives as f64;
            let fpr = fp as f64 / negatives as f64;
            Ok(0.5 * (1.0 + tpr - fpr))
        }
        PairScores::Soft(conf) => {
            if conf.len() != n {
                return Err(EvalError::LengthMismatch(conf.len(), n));
            }
            let score = |i: usize, j: usize| match (predicted[i], predicted[j]) {
                (Some(a), Some(b)) if a == b => conf[i] * conf[j],
                _ => 0.0,
            };
            let total = choose2(n as u64) as usize;
            let mut s = Vec::new();
            let mut l = Vec::new();
            if total <= MAX_AUC_PAIRS {
                for i in 0..n {
                    for j in i + 1..n {
                        s.push(score(i, j));
                        l.push(truth[i] == truth[j]);
                    }
                }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                while s.len() < MAX_AUC_PAIRS {
                    let i = rng.random_range(0..n);
                    let j = rng.random_range(0..n);
                    if i != j {
                        s.push(score(i, j));
                        l.push(truth[i] == truth[j]);
                    }
                }
            }
            roc_auc(&s, &l)
        }
    }
}

/// Root mean square difference of two encoded grids.
pub fn rmse_encoded(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// RMSE between two graphs after encoding both with `codec`.
pub fn graph_rmse(predicted: &StationGraph, actual: &StationGraph, codec: &GridCodec) -> Result<f64, EvalError> {
    rmse_encoded(&codec.encode(predicted)?, &codec.encode(actual)?)
}

/// Returns the last graph of the sequence as the next-period prediction.
pub fn persistence_baseline(gs: &GraphSequence) -> Result<StationGraph, EvalError> {
    gs.graphs.last().cloned().ok_or(EvalError::EmptySequence)
}

/// Assignment of subsets `0..n` to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold of each subset.
    pub assignment: Vec<usize>,
}

/// Shuffles `n` subsets with `seed` and deals them into `k` contiguous
/// groups; the first `n mod k` groups get one extra subset.
pub fn kfold_splits(n: usize, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    if n < k {
        return Err(EvalError::TooFewSubsets { subsets: n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut assignment = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &s in &order[pos..pos + size] {
            assignment[s] = fold;
        }
        pos += size;
    }
    Ok(FoldPlan { k, assignment })
}

impl FoldPlan {
    /// Subsets of each fold, ascending.
    pub fn folds(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (s, &f) in self.assignment.iter().enumerate() {
            out[f].push(s);
        }
        out
    }

    /// `(train, test)` subsets for each of the `k` rounds.
    pub fn rounds(&self) -> impl Iterator<Item = (Vec<usize>, Vec<usize>)> + '_ {
        (0..self.k).map(move |f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..self.assignment.len()).partition(|&s| self.assignment[s] == f);
            (train, test)
        })
    }
}

/// Mean of the recorded scores (NaN for none).
pub fn mean_score(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    /// Periods (sequence offsets) scored in this fold.
    pub test_periods: Vec<usize>,
    /// Mean over the scored periods; `None` when the fold scored none.
    pub rmse_model: Option<f64>,
    pub rmse_persistence: Option<f64>,
}

/// Clustering AUC plus cross-validated prediction scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    /// Mean of the per-fold scores over folds that scored a period.
    pub rmse_model: Option<f64>,
    pub rmse_persistence: Option<f64>,
    pub per_fold: Vec<FoldScore>,
}

impl MetricsReport {
    pub fn from_folds(auc: Option<f64>, per_fold: Vec<FoldScore>) -> Self {
        let mean = |f: fn(&FoldScore) -> Option<f64>| {
            let v: Vec<f64> = per_fold.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| mean_score(&v))
        };
        MetricsReport { auc, rmse_model: mean(|s| s.rmse_model), rmse_persistence: mean(|s| s.rmse_persistence), per_fold }
    }
}

/// Cross-validated next-period RMSE over the periods of one sequence.
///
/// Periods are the subsets. In each round the model is trained with the
/// test periods masked out as targets (they still feed the recurrence as
/// inputs), then every test period `t ≥ 1` is predicted from periods
/// `0..t` and compared with its encoding; persistence predicts period
/// `t − 1`. Period 0 has no history and is never scored.
pub fn kfold_prediction_scores(xs: &[Array1<f64>], plan: &FoldPlan, config: &TrainConfig) -> Result<Vec<FoldScore>, EvalError> {
    (0..plan.k).map(|fold| fold_prediction_score(xs, plan, fold, config)).collect()
}

/// Scores a single round of [`kfold_prediction_scores`].
pub fn fold_prediction_score(xs: &[Array1<f64>], plan: &FoldPlan, fold: usize, config: &TrainConfig) -> Result<FoldScore, EvalError> {
    if plan.assignment.len() != xs.len() {
        return Err(EvalError::LengthMismatch(plan.assignment.len(), xs.len()));
    }
    if fold >= plan.k {
        return Err(EvalError::NoSuchFold { fold, k: plan.k });
    }
    let mask: Vec<bool> = plan.assignment.iter().map(|&f| f != fold).collect();
    let model = train_on_vectors(xs, config, Some(&mask))?.model;
    let scored: Vec<usize> = (1..xs.len()).filter(|&t| !mask[t]).collect();
    let mut model_err = Vec::with_capacity(scored.len());
    let mut persist_err = Vec::with_capacity(scored.len());
    for &t in &scored {
        let y = predict_next_vector(&model, &xs[..t])?;
        model_err.push(rmse_encoded(y.as_slice().expect("contiguous"), xs[t].as_slice().expect("contiguous"))?);
        persist_err.push(rmse_encoded(xs[t - 1].as_slice().expect("contiguous"), xs[t].as_slice().expect("contiguous"))?);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| mean_score(v));
    Ok(FoldScore { fold, test_periods: scored, rmse_model: mean(&model_err), rmse_persistence: mean(&persist_err) })
}
