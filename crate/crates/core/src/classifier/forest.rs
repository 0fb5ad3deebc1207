use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_samples, PairSample, Prediction};
use crate::error::{Error, Result};
use crate::simulator::{mix_seed, Label};

/// Bumped whenever the serialized model layout changes.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Smallest impurity decrease that counts as a useful split.
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tree_count: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried at each split.
    pub mtry: usize,
    /// Features kept by selection.
    pub top_k: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            tree_count: 100,
            max_depth: 12,
            min_leaf: 2,
            mtry: 8,
            top_k: 50,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tree_count", self.tree_count),
            ("min_leaf", self.min_leaf),
            ("mtry", self.mtry),
            ("top_k", self.top_k),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        copresent: f64,
        non_copresent: f64,
    },
}

impl Node {
    fn leaf(pos: usize, n: usize) -> Self {
        let p = pos as f64 / n as f64;
        Node::Leaf {
            copresent: p,
            non_copresent: 1.0 - p,
        }
    }

    /// Copresent probability of the leaf reached by `x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
                Node::Leaf { copresent, .. } => return *copresent,
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
            Node::Leaf { .. } => 0,
        }
    }

    fn check(&self, allowed: &[usize]) -> Result<()> {
        match self {
            Node::Split { feature, threshold, left, right } => {
                if allowed.binary_search(feature).is_err() {
                    return Err(Error::Format(format!("split on unselected feature {feature}")));
                }
                if !threshold.is_finite() {
                    return Err(Error::Format("non-finite split threshold".into()));
                }
                left.check(allowed)?;
                right.check(allowed)
            }
            Node::Leaf { copresent, non_copresent } => {
                let ok = (0.0..=1.0).contains(copresent)
                    && (0.0..=1.0).contains(non_copresent)
                    && (copresent + non_copresent - 1.0).abs() < 1e-9;
                if ok {
                    Ok(())
                } else {
                    Err(Error::Format("leaf probabilities must lie in [0, 1] and sum to 1".into()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    /// Length of the difference vectors the model accepts.
    pub feature_count: usize,
    /// Ascending feature indices the trees may split on.
    pub selected_features: Vec<usize>,
    pub seed: u64,
    pub hyperparameters: Hyperparameters,
    pub trees: Vec<Node>,
}

impl ForestModel {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.trees.is_empty() {
            return Err(Error::Format("model has no trees".into()));
        }
        if !self.selected_features.windows(2).all(|w| w[0] < w[1])
            || self.selected_features.iter().any(|&f| f >= self.feature_count)
        {
            return Err(Error::Format("selected features must be ascending and in range".into()));
        }
        self.trees.iter().try_for_each(|t| t.check(&self.selected_features))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ForestModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    /// Mean copresent probability over trees; copresent iff the score is at
    /// least 0.5.
    pub fn predict(&self, diff: &[f64]) -> Result<Prediction> {
        if diff.len() != self.feature_count {
            return Err(Error::param(
                "diff",
                format!("expected {} values, got {}", self.feature_count, diff.len()),
            ));
        }
        let total: f64 = self.trees.iter().map(|t| t.evaluate(diff)).sum();
        Ok(Prediction::from_score(total / self.trees.len() as f64))
    }
}

pub fn predict(model: &ForestModel, diff: &[f64]) -> Result<Prediction> {
    model.predict(diff)
}

/// Training matrix view shared by all trees.
struct Data<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<bool>,
}

impl<'a> Data<'a> {
    fn new(samples: &'a [PairSample]) -> Result<Self> {
        check_samples(samples)?;
        Ok(Self {
            rows: samples.iter().map(|s| s.diff.as_slice()).collect(),
            labels: samples.iter().map(|s| s.label == Label::Copresent).collect(),
        })
    }

    fn positives(&self, idx: &[usize]) -> usize {
        idx.iter().filter(|&&i| self.labels[i]).count()
    }
}

struct Grower<'a> {
    data: &'a Data<'a>,
    candidates: &'a [usize],
    hp: Hyperparameters,
    mtry: usize,
    rng: ChaCha8Rng,
    /// Gini decrease per feature, weighted by node sample fraction.
    importance: Vec<f64>,
    total: f64,
    scratch: Vec<(f64, bool)>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> Node {
        let n = idx.len();
        let pos = self.data.positives(idx);
        if depth >= self.hp.max_depth || pos == 0 || pos == n || n < 2 * self.hp.min_leaf {
            return Node::leaf(pos, n);
        }
        let Some(best) = self.best_split(idx, pos) else {
            return Node::leaf(pos, n);
        };
        self.importance[best.feature] += best.gain / self.total;
        let data = self.data;
        let mut split = 0;
        for i in 0..n {
            if data.rows[idx[i]][best.feature] <= best.threshold {
                idx.swap(i, split);
                split += 1;
            }
        }
        let (left_idx, right_idx) = idx.split_at_mut(split);
        let left = self.grow(left_idx, depth + 1);
        let right = self.grow(right_idx, depth + 1);
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    fn best_split(&mut self, idx: &[usize], pos: usize) -> Option<BestSplit> {
        let n = idx.len();
        let parent = n as f64 * gini(pos, n);
        let mut tried: Vec<usize> = sample_indices(&mut self.rng, self.candidates.len(), self.mtry)
            .into_iter()
            .map(|i| self.candidates[i])
            .collect();
        tried.sort_unstable();
        let min_leaf = self.hp.min_leaf;
        let mut best: Option<BestSplit> = None;
        for feature in tried {
            self.scratch.clear();
            self.scratch
                .extend(idx.iter().map(|&i| (self.data.rows[i][feature], self.data.labels[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for cut in 1..n {
                left_pos += self.scratch[cut - 1].1 as usize;
                let (lo, hi) = (self.scratch[cut - 1].0, self.scratch[cut].0);
                if cut < min_leaf || n - cut < min_leaf || lo == hi {
                    continue;
                }
                let gain = parent
                    - cut as f64 * gini(left_pos, cut)
                    - (n - cut) as f64 * gini(pos - left_pos, n - cut);
                if gain > MIN_GAIN && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit { feature, threshold, gain });
                }
            }
        }
        best
    }
}

/// Grows `hp.tree_count` trees on bootstrap resamples. Returns the trees and
/// the per-feature impurity importance averaged over trees.
fn grow_forest(
    data: &Data<'_>,
    candidates: &[usize],
    hp: Hyperparameters,
    mtry: usize,
    seed: u64,
) -> (Vec<Node>, Vec<f64>) {
    let width = data.rows[0].len();
    let n = data.rows.len();
    let grown: Vec<(Node, Vec<f64>)> = (0..hp.tree_count)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, t as u64]));
            let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let mut grower = Grower {
                data,
                candidates,
                hp,
                mtry,
                rng,
                importance: vec![0.0; width],
                total: n as f64,
                scratch: Vec::with_capacity(n),
            };
            let root = grower.grow(&mut idx, 0);
            (root, grower.importance)
        })
        .collect();
    let mut importance = vec![0.0; width];
    let mut trees = Vec::with_capacity(grown.len());
    for (tree, imp) in grown {
        for (acc, v) in importance.iter_mut().zip(imp) {
            *acc += v;
        }
        trees.push(tree);
    }
    importance.iter_mut().for_each(|v| *v /= hp.tree_count as f64);
    (trees, importance)
}

/// Gini importance of every feature from an auxiliary forest that may split
/// on all features (⌈√width⌉ tried per split).
pub fn feature_importance(train: &[PairSample], hp: &Hyperparameters, seed: u64) -> Result<Vec<f64>> {
    hp.validate()?;
    let data = Data::new(train)?;
    let width = data.rows[0].len();
    let all: Vec<usize> = (0..width).collect();
    let mtry = (width as f64).sqrt().ceil() as usize;
    Ok(grow_forest(&data, &all, *hp, mtry.min(width), seed).1)
}

/// The `k` most important features in ascending index order. Ranking ties
/// go to the lower index.
pub fn select_features(train: &[PairSample], k: usize, seed: u64) -> Result<Vec<usize>> {
    select_features_with(train, k, &Hyperparameters::default(), seed)
}

pub fn select_features_with(
    train: &[PairSample],
    k: usize,
    hp: &Hyperparameters,
    seed: u64,
) -> Result<Vec<usize>> {
    check_samples(train)?;
    let width = train[0].diff.len();
    if k == 0 || k > width {
        return Err(Error::param("k", format!("must lie in 1..={width}")));
    }
    let importance = feature_importance(train, hp, seed)?;
    Ok(top_k(&importance, k))
}

pub(crate) fn top_k(importance: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn train_forest(
    train: &[PairSample],
    selected: &[usize],
    hp: &Hyperparameters,
    seed: u64,
) -> Result<ForestModel> {
    hp.validate()?;
    let data = Data::new(train)?;
    let width = data.rows[0].len();
    let mut selected = selected.to_vec();
    selected.sort_unstable();
    selected.dedup();
    if selected.is_empty() || selected.iter().any(|&f| f >= width) {
        return Err(Error::param("selected", format!("need at least one index below {width}")));
    }
    let mtry = hp.mtry.min(selected.len());
    let (trees, _) = grow_forest(&data, &selected, *hp, mtry, seed);
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_count: width,
        selected_features: selected,
        seed,
        hyperparameters: *hp,
        trees,
    })
}
