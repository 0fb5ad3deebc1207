//! Pair classification: squared feature differences, rebalancing, feature
//! selection, a random forest, cross-validation and the cross-correlation
//! baseline.

mod baseline;
mod forest;

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baseline::{baseline_xcorr, verdict as baseline_verdict, xcorr_similarities, xcorr_similarity, BASELINE_THRESHOLD};
pub use forest::{
    feature_importance, predict, select_features, select_features_with, train_forest, ForestModel,
    Hyperparameters, Node, MODEL_FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::simulator::{mix_seed, Label, PairRecord};

/// Where a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairMeta {
    pub pair_id: usize,
    pub room_a: usize,
    pub room_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub diff: Vec<f64>,
    pub label: Label,
    pub meta: PairMeta,
}

impl PairSample {
    pub fn new(diff: Vec<f64>, label: Label, meta: PairMeta) -> Result<Self> {
        if diff.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("diff", "entries must be finite and non-negative"));
        }
        Ok(Self { diff, label, meta })
    }
}

/// Component-wise squared differences of two feature vectors.
pub fn pair_features(fa: &[f64], fb: &[f64]) -> Result<Vec<f64>> {
    if fa.len() != fb.len() {
        return Err(Error::param(
            "features",
            format!("length mismatch: {} vs {}", fa.len(), fb.len()),
        ));
    }
    Ok(fa.iter().zip(fb).map(|(a, b)| (a - b) * (a - b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub verdict: Label,
    pub score: f64,
}

impl Prediction {
    /// Copresent iff `score >= 0.5`.
    pub fn from_score(score: f64) -> Self {
        let verdict = if score >= 0.5 { Label::Copresent } else { Label::NonCopresent };
        Self { verdict, score }
    }
}

/// Non-empty, both classes present, equal widths.
pub(crate) fn check_samples(samples: &[PairSample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::Class("no samples".into()));
    };
    if first.diff.is_empty() || samples.iter().any(|s| s.diff.len() != first.diff.len()) {
        return Err(Error::param("samples", "difference vectors must share a non-zero length"));
    }
    let pos = samples.iter().filter(|s| s.label.is_copresent()).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::Class("both classes must be present".into()));
    }
    Ok(())
}

/// Samples for `pairs`, where `features[i]` belongs to recording `i`.
pub fn pair_samples(features: &[FeatureVector], pairs: &[PairRecord]) -> Result<Vec<PairSample>> {
    pairs
        .iter()
        .map(|p| {
            let (Some(a), Some(b)) = (features.get(p.a), features.get(p.b)) else {
                return Err(Error::param("pairs", format!("pair {} refers to a missing recording", p.id)));
            };
            let meta = PairMeta {
                pair_id: p.id,
                room_a: p.room_a,
                room_b: p.room_b,
            };
            PairSample::new(pair_features(a.values(), b.values())?, p.label, meta)
        })
        .collect()
}

/// Confusion counts of a trained model over `samples`.
pub fn evaluate_model(model: &ForestModel, samples: &[PairSample]) -> Result<ConfusionReport> {
    let verdicts = samples
        .par_iter()
        .map(|s| Ok(model.predict(&s.diff)?.verdict))
        .collect::<Result<Vec<_>>>()?;
    let mut report = ConfusionReport::default();
    for (s, v) in samples.iter().zip(verdicts) {
        report.record(s.label, v);
    }
    Ok(report)
}

/// Keeps the minority class whole and draws an equally large subset of the
/// majority class without replacement. Input order is preserved.
pub fn undersample(samples: &[PairSample], seed: u64) -> Result<Vec<PairSample>> {
    let pos: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label.is_copresent()).collect();
    let neg: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].label.is_copresent()).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Class("undersampling needs both classes".into()));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = sample_indices(&mut rng, majority.len(), minority.len())
        .into_iter()
        .map(|i| majority[i])
        .chain(minority)
        .collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}

/// Confusion counts with copresent as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionReport {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Copresent, Label::Copresent) => self.tp += 1,
            (Label::Copresent, Label::NonCopresent) => self.fn_ += 1,
            (Label::NonCopresent, Label::Copresent) => self.fp += 1,
            (Label::NonCopresent, Label::NonCopresent) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionReport) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tn += other.tn;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// fn / (tp + fn), or 0 without positives.
    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.tp + self.fn_)
    }

    /// fp / (fp + tn), or 0 without negatives.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub const CSV_HEADER: &str = "dataset,fold,tp,fn,fp,tn,fnr,fpr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub aggregate: ConfusionReport,
    pub folds: Vec<ConfusionReport>,
}

impl CvReport {
    /// One row per fold plus an `all` row.
    pub fn to_csv(&self, dataset: &str) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let rows = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, r)| ((i + 1).to_string(), r))
            .chain(std::iter::once(("all".to_string(), &self.aggregate)));
        for (fold, r) in rows {
            let _ = writeln!(
                out,
                "{dataset},{fold},{},{},{},{},{:.6},{:.6}",
                r.tp,
                r.fn_,
                r.fp,
                r.tn,
                r.fnr(),
                r.fpr()
            );
        }
        out
    }
}

/// Anything cross-validation can train and query.
pub trait Learner: Sync {
    type Model: Send;
    fn fit(&self, train: &[PairSample], seed: u64) -> Result<Self::Model>;
    fn predict(&self, model: &Self::Model, sample: &PairSample) -> Result<Label>;
}

/// Undersampling, top-k selection and forest training, all on the training
/// data it is given.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForestLearner {
    pub hp: Hyperparameters,
}

const STAGE_UNDERSAMPLE: u64 = 1;
const STAGE_SELECT: u64 = 2;
const STAGE_TRAIN: u64 = 3;

impl Learner for ForestLearner {
    type Model = ForestModel;

    fn fit(&self, train: &[PairSample], seed: u64) -> Result<ForestModel> {
        let balanced = undersample(train, mix_seed(&[seed, STAGE_UNDERSAMPLE]))?;
        let k = self.hp.top_k.min(balanced[0].diff.len());
        let selected = select_features_with(&balanced, k, &self.hp, mix_seed(&[seed, STAGE_SELECT]))?;
        train_forest(&balanced, &selected, &self.hp, mix_seed(&[seed, STAGE_TRAIN]))
    }

    fn predict(&self, model: &ForestModel, sample: &PairSample) -> Result<Label> {
        Ok(model.predict(&sample.diff)?.verdict)
    }
}

/// The full model-building recipe applied to a whole training set.
pub fn fit_model(train: &[PairSample], hp: &Hyperparameters, seed: u64) -> Result<ForestModel> {
    ForestLearner { hp: *hp }.fit(train, seed)
}

/// Seeded stratified fold assignment: each class is shuffled and dealt
/// round-robin into `folds` folds.
pub fn stratified_folds(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::param("folds", "need at least 2 folds"));
    }
    let mut assignment = vec![0; labels.len()];
    for (c, class) in [Label::Copresent, Label::NonCopresent].into_iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < folds {
            return Err(Error::param(
                "samples",
                format!("{class:?} has {} samples, fewer than {folds} folds", members.len()),
            ));
        }
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, c as u64])));
        for (pos, i) in members.into_iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    Ok(assignment)
}

/// A finished cross-validation: the report and the model of every fold.
pub struct CvRun<M> {
    pub report: CvReport,
    pub models: Vec<M>,
}

/// Cross-validation over a fixed fold assignment. Fold `k` trains on every
/// sample outside fold `k` and is evaluated on fold `k` only.
pub fn cross_validate_with<L: Learner>(
    samples: &[PairSample],
    assignment: &[usize],
    learner: &L,
    seed: u64,
) -> Result<CvRun<L::Model>> {
    if assignment.len() != samples.len() {
        return Err(Error::param("assignment", "one fold index per sample"));
    }
    let folds = assignment.iter().max().map_or(0, |m| m + 1);
    let results: Vec<(ConfusionReport, L::Model)> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<PairSample> = samples
                .iter()
                .zip(assignment)
                .filter(|(_, &f)| f != k)
                .map(|(s, _)| s.clone())
                .collect();
            let model = learner.fit(&train, mix_seed(&[seed, k as u64]))?;
            let mut report = ConfusionReport::default();
            for (s, _) in samples.iter().zip(assignment).filter(|(_, &f)| f == k) {
                report.record(s.label, learner.predict(&model, s)?);
            }
            Ok((report, model))
        })
        .collect::<Result<_>>()?;
    let mut aggregate = ConfusionReport::default();
    let mut reports = Vec::with_capacity(folds);
    let mut models = Vec::with_capacity(folds);
    for (r, m) in results {
        aggregate.merge(&r);
        reports.push(r);
        models.push(m);
    }
    Ok(CvRun {
        report: CvReport { aggregate, folds: reports },
        models,
    })
}

/// Stratified k-fold evaluation of the forest recipe.
pub fn cross_validate(samples: &[PairSample], folds: usize, hp: &Hyperparameters, seed: u64) -> Result<CvReport> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let assignment = stratified_folds(&labels, folds, mix_seed(&[seed, 0xF01D]))?;
    Ok(cross_validate_with(samples, &assignment, &ForestLearner { hp: *hp }, seed)?.report)
}
