//! Linear structural probes over label embeddings.
//!
//! A probe is a `k × m` matrix `B` inducing `d_B(h_i, h_j) = ‖B(h_i − h_j)‖²`.
//! The shortest-path probe regresses `d_B` onto hierarchy distances; the
//! common-ancestors probe turns `sigmoid(c − d_B)` into the probability that
//! two descriptors share at least `k` ancestor positions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, RngState};
use crate::embed_io::EmbeddingTable;
use crate::eval::Confusion;
use crate::hierarchy::{common_ancestor_count, descriptor_distance, DistanceOracle, HierarchyError, HierarchyGraph};
use crate::optim::{AdamConfig, Optimizer};
use crate::tape::{Group, Mat, Params, Tape, Var};
use crate::thesaurus::Thesaurus;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("vector width {found} does not match probe width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{} descriptors have no embedding: {}", .0.len(), .0.join(", "))]
    MissingEmbedding(Vec<String>),
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("the {0} split has no pairs")]
    EmptySplit(Split),
    #[error("invalid probe setting: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "task")]
pub enum ProbeTask {
    ShortestPath,
    /// At least `k` shared ancestor positions.
    CommonAncestors { k: usize },
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeTask::ShortestPath => f.write_str("shortest-path"),
            ProbeTask::CommonAncestors { k } => write!(f, "common-ancestors(k={k})"),
        }
    }
}

/// How the shortest-path loss compares `d_B` with the gold length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `|gold − d_B²|`.
    #[default]
    Squared,
    /// `|gold − d_B|`.
    Reference,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Squared => "squared",
            LossMode::Reference => "reference",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared" => Ok(LossMode::Squared),
            "reference" => Ok(LossMode::Reference),
            other => Err(format!("unknown loss mode {other:?} (expected squared or reference)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    /// `k × m`.
    pub b: Mat,
    /// Sigmoid center, binary probes only.
    pub c: Option<f64>,
}

impl ProbeParams {
    pub fn identity(m: usize) -> Self {
        ProbeParams { b: Mat::eye(m), c: None }
    }

    /// Entries drawn from `N(0, 1/k)`, so `E‖Bx‖² = ‖x‖²`.
    pub fn random(k: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("positive std");
        ProbeParams {
            b: Mat::from_shape_simple_fn((k, m), || normal.sample(&mut rng)),
            c: None,
        }
    }

    pub fn rank(&self) -> usize {
        self.b.nrows()
    }

    pub fn width(&self) -> usize {
        self.b.ncols()
    }

    fn to_params(&self) -> Params {
        let mut p = Params::default();
        p.add("probe.b", Group::Probe, self.b.clone());
        if let Some(c) = self.c {
            p.add("probe.c", Group::Probe, Mat::from_elem((1, 1), c));
        }
        p
    }

    fn from_params(p: &Params) -> Self {
        let b = p.get(p.id("probe.b").expect("probe.b")).clone();
        let c = p.id("probe.c").map(|id| p.get(id)[[0, 0]]);
        ProbeParams { b, c }
    }
}

/// `‖B(h_i − h_j)‖²`.
pub fn probe_distance(p: &ProbeParams, hi: &[f64], hj: &[f64]) -> Result<f64, ProbeError> {
    let m = p.width();
    for h in [hi, hj] {
        if h.len() != m {
            return Err(ProbeError::DimensionMismatch { expected: m, found: h.len() });
        }
    }
    let diff: Vec<f64> = hi.iter().zip(hj).map(|(a, b)| a - b).collect();
    Ok(p.b
        .rows()
        .into_iter()
        .map(|row| {
            let y: f64 = row.iter().zip(&diff).map(|(w, d)| w * d).sum();
            y * y
        })
        .sum())
}

pub fn shortest_path_loss(d_b: f64, gold: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::Squared => (gold - d_b * d_b).abs(),
        LossMode::Reference => (gold - d_b).abs(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(c − d_B)`.
pub fn common_ancestor_prob(p: &ProbeParams, hi: &[f64], hj: &[f64]) -> Result<f64, ProbeError> {
    let c = p
        .c
        .ok_or_else(|| ProbeError::BadConfig("probe has no sigmoid center".into()))?;
    Ok(sigmoid(c - probe_distance(p, hi, hj)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    /// Row indices into [`ProbeDataset::vectors`].
    pub i: usize,
    pub j: usize,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub task: ProbeTask,
    pub descriptors: Vec<String>,
    /// One row per descriptor.
    pub vectors: Mat,
    pub split_of: Vec<Split>,
    pub train: Vec<ProbePair>,
    pub val: Vec<ProbePair>,
    pub eval: Vec<ProbePair>,
}

impl ProbeDataset {
    pub fn pairs(&self, split: Split) -> &[ProbePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Eval => &self.eval,
        }
    }

    pub fn width(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn descriptor_pair(&self, pair: &ProbePair) -> (&str, &str) {
        (&self.descriptors[pair.i], &self.descriptors[pair.j])
    }
}

/// Serializable form of a [`ProbeDataset`]; vectors are re-read from the
/// embedding table it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task: ProbeTask,
    pub sample_fraction: f64,
    pub seed: u64,
    /// Content hash of the embedding file.
    pub embeddings_sha256: String,
    pub descriptors: Vec<(String, Split)>,
    /// `(split, descriptor a, descriptor b, gold)`.
    pub pairs: Vec<(Split, usize, usize, f64)>,
}

impl ProbeDataset {
    pub fn to_record(&self, sample_fraction: f64, seed: u64, embeddings_sha256: &str) -> DatasetRecord {
        let pairs = [Split::Train, Split::Val, Split::Eval]
            .into_iter()
            .flat_map(|s| self.pairs(s).iter().map(move |p| (s, p.i, p.j, p.gold)))
            .collect();
        DatasetRecord {
            task: self.task,
            sample_fraction,
            seed,
            embeddings_sha256: embeddings_sha256.to_string(),
            descriptors: self.descriptors.iter().cloned().zip(self.split_of.iter().copied()).collect(),
            pairs,
        }
    }

    pub fn from_record(rec: &DatasetRecord, embeddings: &EmbeddingTable) -> Result<Self, ProbeError> {
        let missing: Vec<String> = rec
            .descriptors
            .iter()
            .filter(|(d, _)| embeddings.get(d).is_none())
            .map(|(d, _)| d.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ProbeError::MissingEmbedding(missing));
        }
        let n = rec.descriptors.len();
        let mut vectors = Mat::zeros((n, embeddings.dim()));
        for (mut row, (d, _)) in vectors.rows_mut().into_iter().zip(&rec.descriptors) {
            for (dst, &src) in row.iter_mut().zip(embeddings.get(d).expect("checked")) {
                *dst = f64::from(src);
            }
        }
        let mut ds = ProbeDataset {
            task: rec.task,
            descriptors: rec.descriptors.iter().map(|(d, _)| d.clone()).collect(),
            vectors,
            split_of: rec.descriptors.iter().map(|(_, s)| *s).collect(),
            train: Vec::new(),
            val: Vec::new(),
            eval: Vec::new(),
        };
        for &(split, i, j, gold) in &rec.pairs {
            if i >= n || j >= n {
                return Err(ProbeError::BadConfig(format!("pair index ({i}, {j}) out of range")));
            }
            let pair = ProbePair { i, j, gold };
            match split {
                Split::Train => ds.train.push(pair),
                Split::Val => ds.val.push(pair),
                Split::Eval => ds.eval.push(pair),
            }
        }
        Ok(ds)
    }
}

/// Share of descriptors used for training; the rest is held out and split
/// into validation and evaluation descriptors.
pub const TRAIN_SHARE: f64 = 0.7;
pub const VAL_SHARE: f64 = 0.1;

/// Splits the graph's descriptors 70/10/20 and samples a fraction of all
/// unordered within-split pairs. Disconnected pairs are dropped from the
/// shortest-path task.
pub fn build_probe_dataset(
    th: &Thesaurus,
    g: &HierarchyGraph,
    oracle: &DistanceOracle,
    embeddings: &EmbeddingTable,
    task: ProbeTask,
    sample_fraction: f64,
    seed: u64,
) -> Result<ProbeDataset, ProbeError> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(ProbeError::BadConfig(format!("sample fraction {sample_fraction} not in (0, 1]")));
    }
    if let ProbeTask::CommonAncestors { k } = task {
        if k == 0 {
            return Err(ProbeError::BadConfig("common-ancestors k must be at least 1".into()));
        }
    }
    let mut descriptors: Vec<String> = g.descriptors().into_iter().map(str::to_string).collect();
    descriptors.sort();
    let missing: Vec<String> = descriptors
        .iter()
        .filter(|d| embeddings.get(d).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(ProbeError::MissingEmbedding(missing));
    }
    let m = embeddings.dim();
    let mut vectors = Mat::zeros((descriptors.len(), m));
    for (mut row, d) in vectors.rows_mut().into_iter().zip(&descriptors) {
        for (dst, &src) in row.iter_mut().zip(embeddings.get(d).expect("checked")) {
            *dst = f64::from(src);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..descriptors.len()).collect();
    order.shuffle(&mut rng);
    let n = descriptors.len();
    let n_train = (TRAIN_SHARE * n as f64).round() as usize;
    let n_val = ((VAL_SHARE * n as f64).round() as usize).min(n - n_train);
    let mut split_of = vec![Split::Eval; n];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Eval
        };
    }

    let mut out = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Eval] {
        let members: Vec<usize> = (0..n).filter(|&i| split_of[i] == split).collect();
        let mut candidates = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                if let Some(gold) = gold_value(th, g, oracle, &descriptors[i], &descriptors[j], task)? {
                    candidates.push(ProbePair { i, j, gold });
                }
            }
        }
        let keep = (sample_fraction * candidates.len() as f64).round() as usize;
        let pairs = if keep >= candidates.len() {
            candidates
        } else {
            let mut chosen: Vec<usize> = (0..candidates.len()).collect::<Vec<_>>().choose_multiple(&mut rng, keep).copied().collect();
            chosen.sort_unstable();
            chosen.into_iter().map(|c| candidates[c].clone()).collect()
        };
        out.insert(split, pairs);
    }
    Ok(ProbeDataset {
        task,
        descriptors,
        vectors,
        split_of,
        train: out.remove(&Split::Train).unwrap_or_default(),
        val: out.remove(&Split::Val).unwrap_or_default(),
        eval: out.remove(&Split::Eval).unwrap_or_default(),
    })
}

/// Gold target of one pair; `None` for disconnected shortest-path pairs.
pub fn gold_value(
    th: &Thesaurus,
    g: &HierarchyGraph,
    oracle: &DistanceOracle,
    a: &str,
    b: &str,
    task: ProbeTask,
) -> Result<Option<f64>, ProbeError> {
    Ok(match task {
        ProbeTask::ShortestPath => descriptor_distance(g, oracle, a, b)?.map(f64::from),
        ProbeTask::CommonAncestors { k } => {
            Some(if common_ancestor_count(th, a, b)? >= k { 1.0 } else { 0.0 })
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub rank: usize,
    pub loss_mode: LossMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement of at least `min_delta`
    /// before training stops.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            rank: 512,
            loss_mode: LossMode::Squared,
            lr: 2.5e-5,
            weight_decay: 0.01,
            max_epochs: 100,
            batch_size: 64,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub params: ProbeParams,
    pub history: Vec<ProbeEpoch>,
    pub best_epoch: usize,
    pub steps: u64,
    pub rng: RngState,
}

fn pair_differences(ds: &ProbeDataset, pairs: &[ProbePair]) -> Mat {
    let mut out = Mat::zeros((pairs.len(), ds.width()));
    for (mut row, p) in out.rows_mut().into_iter().zip(pairs) {
        let (a, b) = (ds.vectors.row(p.i), ds.vectors.row(p.j));
        for ((dst, x), y) in row.iter_mut().zip(a).zip(b) {
            *dst = x - y;
        }
    }
    out
}

/// `d_B` for every pair as an `n × 1` column.
fn tape_distances(tape: &mut Tape, params: &Params, diffs: Mat) -> Var {
    let k = params.get(params.id("probe.b").expect("probe.b")).nrows();
    let b = tape.param(params.id("probe.b").expect("probe.b"));
    let bt = tape.transpose(b);
    let x = tape.constant(diffs);
    let y = tape.matmul(x, bt);
    let sq = tape.square(y);
    let ones = tape.constant(Mat::ones((k, 1)));
    tape.matmul(sq, ones)
}

/// Mean task loss over `pairs` recorded on the tape.
fn tape_loss(tape: &mut Tape, params: &Params, ds: &ProbeDataset, pairs: &[ProbePair], mode: LossMode) -> Var {
    let n = pairs.len();
    let d = tape_distances(tape, params, pair_differences(ds, pairs));
    let per_pair = match ds.task {
        ProbeTask::ShortestPath => {
            let pred = match mode {
                LossMode::Squared => tape.square(d),
                LossMode::Reference => d,
            };
            let gold = tape.constant(Mat::from_shape_fn((n, 1), |(r, _)| pairs[r].gold));
            let diff = tape.sub(gold, pred);
            tape.abs(diff)
        }
        ProbeTask::CommonAncestors { .. } => {
            let c = tape.param(params.id("probe.c").expect("probe.c"));
            let neg = tape.scale(d, -1.0);
            let z = tape.add_row(neg, c);
            // BCE as softplus(−z) for positives and softplus(z) for negatives
            let sign = tape.constant(Mat::from_shape_fn((n, 1), |(r, _)| {
                if pairs[r].gold > 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }));
            let signed = tape.mul(z, sign);
            tape.softplus(signed)
        }
    };
    let total = tape.sum(per_pair);
    tape.scale(total, 1.0 / n as f64)
}

/// Mean task loss of `p` on `pairs` outside any tape.
pub fn probe_loss(p: &ProbeParams, ds: &ProbeDataset, pairs: &[ProbePair], mode: LossMode) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let preds = distances(p, ds, pairs);
    let total: f64 = match ds.task {
        ProbeTask::ShortestPath => preds.iter().zip(pairs).map(|(&d, q)| shortest_path_loss(d, q.gold, mode)).sum(),
        ProbeTask::CommonAncestors { .. } => {
            let c = p.c.unwrap_or(0.0);
            preds
                .iter()
                .zip(pairs)
                .map(|(&d, q)| {
                    let z = c - d;
                    let signed = if q.gold > 0.5 { -z } else { z };
                    softplus(signed)
                })
                .sum()
        }
    };
    total / pairs.len() as f64
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `d_B` for each pair.
pub fn distances(p: &ProbeParams, ds: &ProbeDataset, pairs: &[ProbePair]) -> Vec<f64> {
    let y = pair_differences(ds, pairs).dot(&p.b.t());
    y.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
}

/// Per-pair model outputs: predicted distance for the shortest-path task
/// (`d_B²` in squared mode), probability for common ancestors.
pub fn predictions(p: &ProbeParams, ds: &ProbeDataset, pairs: &[ProbePair], mode: LossMode) -> Vec<f64> {
    let d = distances(p, ds, pairs);
    match ds.task {
        ProbeTask::ShortestPath => match mode {
            LossMode::Squared => d.iter().map(|v| v * v).collect(),
            LossMode::Reference => d,
        },
        ProbeTask::CommonAncestors { .. } => {
            let c = p.c.unwrap_or(0.0);
            d.iter().map(|&v| sigmoid(c - v)).collect()
        }
    }
}

/// AdamW on minibatches with early stopping on the validation loss; the
/// parameters of the best validation epoch are returned.
pub fn train_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeOutcome, ProbeError> {
    if cfg.rank == 0 {
        return Err(ProbeError::BadConfig("rank must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ProbeError::BadConfig("batch size must be at least 1".into()));
    }
    if ds.train.is_empty() {
        return Err(ProbeError::EmptySplit(Split::Train));
    }
    let mut init = ProbeParams::random(cfg.rank, ds.width(), cfg.seed);
    if let ProbeTask::CommonAncestors { .. } = ds.task {
        let d = distances(&init, ds, &ds.train);
        init.c = Some(d.iter().sum::<f64>() / d.len() as f64);
    }
    train_probe_from(ds, init, cfg)
}

/// Same as [`train_probe`] from given starting parameters.
pub fn train_probe_from(ds: &ProbeDataset, init: ProbeParams, cfg: &ProbeConfig) -> Result<ProbeOutcome, ProbeError> {
    if init.width() != ds.width() {
        return Err(ProbeError::DimensionMismatch {
            expected: ds.width(),
            found: init.width(),
        });
    }
    let mut params = init.to_params();
    let mut opt = Optimizer::new(&params, HashMap::from([(Group::Probe, AdamConfig::adamw(cfg.lr, cfg.weight_decay))]));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_pairs = if ds.val.is_empty() { &ds.train } else { &ds.val };
    let mut best = (probe_loss(&init, ds, val_pairs, cfg.loss_mode), init.clone(), 0);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ProbePair> = chunk.iter().map(|&i| ds.train[i].clone()).collect();
            let mut grads = params.zero_grads();
            {
                let mut tape = Tape::new(&params);
                let loss = tape_loss(&mut tape, &params, ds, &batch, cfg.loss_mode);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(ProbeError::DivergedLoss { epoch });
                }
                epoch_loss += value * batch.len() as f64;
                tape.backward(loss, 1.0, &mut grads);
            }
            opt.step(&mut params, &grads);
        }
        let current = ProbeParams::from_params(&params);
        let val_loss = probe_loss(&current, ds, val_pairs, cfg.loss_mode);
        if !val_loss.is_finite() || !params.all_finite() {
            return Err(ProbeError::DivergedLoss { epoch });
        }
        history.push(ProbeEpoch {
            epoch,
            train_loss: epoch_loss / ds.train.len() as f64,
            val_loss,
        });
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, current, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(ProbeOutcome {
        params: best.1,
        history,
        best_epoch: best.2,
        steps: opt.step_count(),
        rng: RngState::capture(cfg.seed, &rng),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub task: ProbeTask,
    pub loss_mode: LossMode,
    pub rank: usize,
    pub split: Split,
    pub pairs: usize,
    pub gold_mean: f64,
    pub gold_std: f64,
    /// Mean `|gold − predicted|`, shortest-path task.
    pub distance_error: Option<f64>,
    /// F1 at probability 0.5, common-ancestors task.
    pub f1: Option<f64>,
    pub confusion: Option<Confusion>,
}

pub fn eval_probe(p: &ProbeParams, ds: &ProbeDataset, split: Split, mode: LossMode) -> ProbeMetrics {
    let pairs = ds.pairs(split);
    let preds = predictions(p, ds, pairs, mode);
    metrics_from_predictions(ds.task, mode, p.rank(), split, pairs, &preds)
}

/// Metrics from dumped per-pair predictions.
pub fn metrics_from_predictions(
    task: ProbeTask,
    mode: LossMode,
    rank: usize,
    split: Split,
    pairs: &[ProbePair],
    preds: &[f64],
) -> ProbeMetrics {
    let n = pairs.len();
    let (gold_mean, gold_std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = pairs.iter().map(|p| p.gold).sum::<f64>() / n as f64;
        let var = pairs.iter().map(|p| (p.gold - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    let mut out = ProbeMetrics {
        task,
        loss_mode: mode,
        rank,
        split,
        pairs: n,
        gold_mean,
        gold_std,
        distance_error: None,
        f1: None,
        confusion: None,
    };
    match task {
        ProbeTask::ShortestPath => {
            let err = pairs.iter().zip(preds).map(|(p, &y)| (p.gold - y).abs()).sum::<f64>();
            out.distance_error = Some(if n == 0 { 0.0 } else { err / n as f64 });
        }
        ProbeTask::CommonAncestors { .. } => {
            let mut c = Confusion::default();
            for (p, &y) in pairs.iter().zip(preds) {
                c.add(y >= 0.5, p.gold > 0.5);
            }
            out.f1 = Some(c.f1());
            out.confusion = Some(c);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    task: ProbeTask,
    loss_mode: LossMode,
    config: ProbeConfig,
}

/// Probe checkpoint in the tensor container format.
pub fn save_probe(
    path: &Path,
    p: &ProbeParams,
    task: ProbeTask,
    cfg: &ProbeConfig,
    rng: RngState,
    step: u64,
) -> Result<(), ProbeError> {
    let meta = CheckpointMeta {
        task,
        loss_mode: cfg.loss_mode,
        config: cfg.clone(),
    };
    let c = Container::from_params(serde_json::to_string(&meta)?, &p.to_params(), rng, step);
    let mut buf = Vec::new();
    c.write(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_probe(path: &Path) -> Result<(ProbeParams, ProbeTask, ProbeConfig), ProbeError> {
    let bytes = std::fs::read(path)?;
    let c = Container::read(bytes.as_slice())?;
    let meta: CheckpointMeta = serde_json::from_str(&c.config_json)?;
    let b = c
        .tensors
        .iter()
        .find(|t| t.name == "probe.b")
        .ok_or_else(|| ContainerError::MissingTensor("probe.b".into()))?;
    let shape = (b.shape[0], *b.shape.get(1).unwrap_or(&1));
    let mut init = ProbeParams {
        b: Mat::zeros(shape),
        c: matches!(meta.task, ProbeTask::CommonAncestors { .. }).then_some(0.0),
    };
    let mut params = init.to_params();
    c.load_into(&mut params)?;
    init = ProbeParams::from_params(&params);
    Ok((init, meta.task, meta.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_graph, shortest_path_matrix, GraphOptions, DEFAULT_NODE_CAP};
    use crate::synth::{planted_embeddings, synthetic_thesaurus, SynthConfig};

    fn tree(descriptors: usize) -> (Thesaurus, HierarchyGraph, DistanceOracle) {
        let th = synthetic_thesaurus(&SynthConfig {
            descriptors,
            multi_position_fraction: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let g = build_graph(&th, &GraphOptions::with_branches("CD").unwrap()).unwrap();
        let o = shortest_path_matrix(&g, DEFAULT_NODE_CAP).unwrap();
        (th, g, o)
    }

    #[test]
    fn distance_basics() {
        let p = ProbeParams::identity(3);
        assert_eq!(probe_distance(&p, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(probe_distance(&p, &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            probe_distance(&p, &[1.0], &[0.0, 0.0, 0.0]),
            Err(ProbeError::DimensionMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn distance_matches_quadratic_form() {
        let p = ProbeParams::random(4, 5, 9);
        let a = p.b.t().dot(&p.b);
        let hi = [0.3, -1.0, 2.0, 0.5, 0.0];
        let hj = [1.1, 0.2, -0.7, 0.5, 3.0];
        let dh: Vec<f64> = hi.iter().zip(&hj).map(|(x, y)| x - y).collect();
        let mut want = 0.0;
        for r in 0..5 {
            for c in 0..5 {
                want += dh[r] * a[[r, c]] * dh[c];
            }
        }
        let got = probe_distance(&p, &hi, &hj).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(got, probe_distance(&p, &hj, &hi).unwrap());
    }

    #[test]
    fn loss_and_probability_values() {
        assert_eq!(shortest_path_loss(2.0, 4.0, LossMode::Squared), 0.0);
        assert_eq!(shortest_path_loss(0.0, 7.0, LossMode::Squared), 7.0);
        assert_eq!(shortest_path_loss(2.0, 4.0, LossMode::Reference), 2.0);
        let mut p = ProbeParams::identity(2);
        p.c = Some(2.0);
        assert!((common_ancestor_prob(&p, &[0.0, 0.0], &[0.0, 0.0]).unwrap() - 0.880797077977882).abs() < 1e-12);
        p.c = Some(1.0);
        assert_eq!(common_ancestor_prob(&p, &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(common_ancestor_prob(&p, &[1e3, 0.0], &[0.0, 0.0]).unwrap() < 1e-300);
    }

    #[test]
    fn dataset_split_and_gold_values() {
        let (th, g, o) = tree(60);
        let emb = planted_embeddings(&th).unwrap();
        let ds = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::ShortestPath, 1.0, 4).unwrap();
        let again = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::ShortestPath, 1.0, 4).unwrap();
        assert_eq!(ds, again);
        let count = |s| ds.split_of.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 42);
        assert_eq!(count(Split::Val), 6);
        assert_eq!(count(Split::Eval), 12);
        for split in [Split::Train, Split::Val, Split::Eval] {
            let members: Vec<usize> = (0..60).filter(|&i| ds.split_of[i] == split).collect();
            let mut connected = 0;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    connected += descriptor_distance(&g, &o, &ds.descriptors[i], &ds.descriptors[j])
                        .unwrap()
                        .is_some() as usize;
                }
            }
            assert_eq!(ds.pairs(split).len(), connected);
            for p in ds.pairs(split) {
                assert_eq!(ds.split_of[p.i], split);
                assert_eq!(ds.split_of[p.j], split);
                let (a, b) = ds.descriptor_pair(p);
                assert_eq!(p.gold, f64::from(g.bfs(g.descriptor_nodes(a)[0])[g.descriptor_nodes(b)[0]]));
            }
        }
        let sampled = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::ShortestPath, 0.1, 4).unwrap();
        assert_eq!(sampled.train.len(), (0.1 * ds.train.len() as f64).round() as usize);
        assert!(sampled.train.iter().all(|p| ds.train.contains(p)));
    }

    #[test]
    fn record_round_trip() {
        let (th, g, o) = tree(30);
        let emb = planted_embeddings(&th).unwrap();
        let ds = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::CommonAncestors { k: 2 }, 0.5, 8).unwrap();
        let rec = ds.to_record(0.5, 8, "abc");
        let json = serde_json::to_string(&rec).unwrap();
        let back: DatasetRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(ProbeDataset::from_record(&back, &emb).unwrap(), ds);
    }

    #[test]
    fn missing_embeddings_are_listed() {
        let (th, g, o) = tree(20);
        let mut emb = EmbeddingTable::new(2, crate::embed_io::PoolingTag::Mean);
        let first = th.descriptors().next().unwrap().id.clone();
        emb.insert(&first, vec![1.0, 0.0]).unwrap();
        match build_probe_dataset(&th, &g, &o, &emb, ProbeTask::ShortestPath, 1.0, 0) {
            Err(ProbeError::MissingEmbedding(list)) => {
                assert_eq!(list.len(), 19);
                assert!(!list.contains(&first));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_on_planted_tree_is_exact() {
        let (th, g, o) = tree(60);
        let emb = planted_embeddings(&th).unwrap();
        let ds = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::ShortestPath, 1.0, 0).unwrap();
        let p = ProbeParams::identity(ds.width());
        assert_eq!(probe_loss(&p, &ds, &ds.train, LossMode::Reference), 0.0);
        assert_eq!(eval_probe(&p, &ds, Split::Eval, LossMode::Reference).distance_error, Some(0.0));
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let (th, g, o) = tree(30);
        let emb = planted_embeddings(&th).unwrap();
        for task in [ProbeTask::ShortestPath, ProbeTask::CommonAncestors { k: 2 }] {
            let ds = build_probe_dataset(&th, &g, &o, &emb, task, 1.0, 1).unwrap();
            let mut p = ProbeParams::random(3, ds.width(), 5);
            if matches!(task, ProbeTask::CommonAncestors { .. }) {
                p.c = Some(1.5);
            }
            let params = p.to_params();
            let pairs = &ds.train[..20];
            for mode in [LossMode::Squared, LossMode::Reference] {
                let mut grads = params.zero_grads();
                let mut tape = Tape::new(&params);
                let loss = tape_loss(&mut tape, &params, &ds, pairs, mode);
                assert!((tape.scalar(loss) - probe_loss(&p, &ds, pairs, mode)).abs() < 1e-12);
                tape.backward(loss, 1.0, &mut grads);
                let gb = grads.get(params.id("probe.b").unwrap());
                let h = 1e-6;
                for (r, col) in [(0, 0), (1, 3), (2, 7)] {
                    let mut plus = p.clone();
                    plus.b[[r, col]] += h;
                    let mut minus = p.clone();
                    minus.b[[r, col]] -= h;
                    let num = (probe_loss(&plus, &ds, pairs, mode) - probe_loss(&minus, &ds, pairs, mode)) / (2.0 * h);
                    assert!((num - gb[[r, col]]).abs() < 1e-6 * num.abs().max(1.0), "{task} {mode}");
                }
                if let Some(c) = p.c {
                    let gc = grads.get(params.id("probe.c").unwrap())[[0, 0]];
                    let f = |c| probe_loss(&ProbeParams { c: Some(c), ..p.clone() }, &ds, pairs, mode);
                    let num = (f(c + h) - f(c - h)) / (2.0 * h);
                    assert!((num - gc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn eval_metrics_recompute_from_predictions() {
        let (th, g, o) = tree(40);
        let emb = planted_embeddings(&th).unwrap();
        let ds = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::ShortestPath, 1.0, 2).unwrap();
        let pairs = ds.pairs(Split::Eval);
        let mean = pairs.iter().map(|p| p.gold).sum::<f64>() / pairs.len() as f64;
        let constant = vec![mean; pairs.len()];
        let m = metrics_from_predictions(ds.task, LossMode::Reference, 1, Split::Eval, pairs, &constant);
        let mad = pairs.iter().map(|p| (p.gold - mean).abs()).sum::<f64>() / pairs.len() as f64;
        assert!((m.distance_error.unwrap() - mad).abs() < 1e-12);
        assert!((m.gold_mean - mean).abs() < 1e-12);

        let ca = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::CommonAncestors { k: 1 }, 1.0, 2).unwrap();
        let perfect: Vec<f64> = ca.eval.iter().map(|p| p.gold).collect();
        let m = metrics_from_predictions(ca.task, LossMode::Reference, 1, Split::Eval, &ca.eval, &perfect);
        assert_eq!(m.f1, Some(1.0));
    }

    #[test]
    fn probability_is_monotone_in_distance() {
        let mut p = ProbeParams::identity(1);
        p.c = Some(1.7);
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let prob = common_ancestor_prob(&p, &[i as f64 * 0.2], &[0.0]).unwrap();
            assert!(prob <= last);
            last = prob;
        }
    }

    #[test]
    fn training_reduces_loss_and_checkpoint_round_trips() {
        let (th, g, o) = tree(40);
        let emb = planted_embeddings(&th).unwrap();
        let ds = build_probe_dataset(&th, &g, &o, &emb, ProbeTask::CommonAncestors { k: 1 }, 1.0, 3).unwrap();
        let cfg = ProbeConfig {
            rank: 8,
            lr: 1e-2,
            max_epochs: 20,
            ..ProbeConfig::default()
        };
        let out = train_probe(&ds, &cfg).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.bin");
        save_probe(&path, &out.params, ds.task, &cfg, out.rng, out.steps).unwrap();
        let (back, task, cfg2) = load_probe(&path).unwrap();
        assert_eq!(task, ds.task);
        assert_eq!(cfg2, cfg);
        assert_eq!(back.b.dim(), out.params.b.dim());
        assert!((back.c.unwrap() - out.params.c.unwrap()).abs() < 1e-5);
    }
}
