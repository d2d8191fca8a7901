use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::RngState;
use crate::optim::{AdamConfig, Optimizer};
use crate::pairs::{decoder_targets, Corpus, Pair};
use crate::tape::{Group, Tape, Var};
use crate::thesaurus::Thesaurus;

use super::loss::{bce_from_logit, multi_task_loss, MultiTaskLoss};
use super::{Model, ModelError, ModelInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Matching head only.
    Stl,
    /// Matching head plus Tree Number decoder under learned task weights.
    Mtl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stl => "stl",
            Mode::Mtl => "mtl",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stl" => Ok(Mode::Stl),
            "mtl" => Ok(Mode::Mtl),
            other => Err(format!("unknown mode {other:?} (expected stl or mtl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoints_per_epoch: usize,
    pub teacher_forcing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Mtl,
            epochs: 4,
            batch_size: 16,
            lr_main: 2e-5,
            lr_decoder: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoints_per_epoch: 4,
            teacher_forcing: 1.0,
            seed: 0,
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub input: ModelInput,
    pub positive: bool,
    /// Decoder target, present on positives in multi-task mode.
    pub target: Option<Vec<u32>>,
    /// Index of the source pair.
    pub pair: usize,
}

/// Turns pairs into model inputs. In multi-task mode a positive pair whose
/// descriptor has several Tree Numbers yields one instance per Tree Number.
pub fn build_instances(
    model: &Model,
    pairs: &[Pair],
    corpus: &Corpus,
    th: &Thesaurus,
    mode: Mode,
) -> Result<Vec<Instance>, ModelError> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let doc = corpus
            .get(&p.doc_id)
            .ok_or_else(|| ModelError::UnknownDocument(p.doc_id.clone()))?;
        let d = th.require(&p.descriptor)?;
        let input = model.input(&d.label, &d.description, &doc.abstract_text)?;
        if mode == Mode::Mtl && p.positive {
            for target in decoder_targets(th, &p.descriptor)? {
                out.push(Instance {
                    input: input.clone(),
                    positive: true,
                    target: Some(target),
                    pair: i,
                });
            }
        } else {
            out.push(Instance {
                input,
                positive: p.positive,
                target: None,
                pair: i,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    /// Mean binary cross-entropy.
    pub loss1: f64,
    /// Mean per-sequence decoder NLL, when the batch had targets.
    pub loss2: Option<f64>,
}

fn mean(tape: &mut Tape, parts: &[Var]) -> Var {
    let all = tape.concat_cols(parts);
    let s = tape.sum(all);
    tape.scale(s, 1.0 / parts.len() as f64)
}

/// Records the batch objective on `tape`.
pub(crate) fn batch_objective<R: Rng>(
    model: &Model,
    tape: &mut Tape,
    batch: &[&Instance],
    mode: Mode,
    teacher_forcing: f64,
    rng: &mut R,
) -> Result<(Var, BatchLoss), ModelError> {
    let mut bces = Vec::with_capacity(batch.len());
    let mut nlls = Vec::new();
    for inst in batch {
        let enc = model.encode(tape, &inst.input)?;
        let logit = model.head_logit(tape, &enc);
        bces.push(bce_from_logit(tape, logit, inst.positive));
        if mode == Mode::Mtl {
            if let Some(target) = &inst.target {
                let dec = model.decode_tree_number(tape, &enc, Some(target), teacher_forcing, rng)?;
                if let Some(nll) = dec.nll {
                    nlls.push(nll);
                }
            }
        }
    }
    if bces.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let l1 = mean(tape, &bces);
    let l2 = (!nlls.is_empty()).then(|| mean(tape, &nlls));
    let total = match mode {
        Mode::Stl => l1,
        Mode::Mtl => {
            let s1 = tape.param(model.ids().log_s1);
            let s2 = tape.param(model.ids().log_s2);
            multi_task_loss(tape, l1, l2, s1, s2)
        }
    };
    let loss = BatchLoss {
        total: tape.scalar(total),
        loss1: tape.scalar(l1),
        loss2: l2.map(|v| tape.scalar(v)),
    };
    Ok((total, loss))
}

/// Objective over a whole instance set: dataset-mean losses combined with the
/// current task weights.
pub fn evaluate_loss(model: &Model, instances: &[Instance], mode: Mode) -> Result<BatchLoss, ModelError> {
    if instances.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut sum1, mut sum2, mut n2) = (0.0, 0.0, 0usize);
    for inst in instances {
        let mut tape = Tape::new(model.params());
        let (_, loss) = batch_objective(model, &mut tape, &[inst], mode, 1.0, &mut rng)?;
        sum1 += loss.loss1;
        if let Some(l2) = loss.loss2 {
            sum2 += l2;
            n2 += 1;
        }
    }
    let loss1 = sum1 / instances.len() as f64;
    let loss2 = (n2 > 0).then(|| sum2 / n2 as f64);
    let total = match mode {
        Mode::Stl => loss1,
        Mode::Mtl => {
            let p = model.params();
            let s1 = p.get(model.ids().log_s1)[[0, 0]];
            let s2 = p.get(model.ids().log_s2)[[0, 0]];
            match loss2 {
                Some(l2) => MultiTaskLoss {
                    log_sigma1_sq: s1,
                    log_sigma2_sq: s2,
                    loss1,
                    loss2: l2,
                }
                .total(),
                None => 0.5 * (-s1).exp() * loss1 + 0.5 * s1,
            }
        }
    };
    Ok(BatchLoss { total, loss1, loss2 })
}

/// Matching probabilities, one per instance.
pub fn predict(model: &Model, instances: &[Instance]) -> Result<Vec<f64>, ModelError> {
    instances.iter().map(|i| model.classify(&i.input)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub epoch: f64,
    /// Mean batch objective since the previous checkpoint.
    pub train_loss: f64,
    pub val_loss: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryEntry>,
    pub best_step: u64,
    pub best_val_loss: f64,
    pub steps: u64,
    pub rng: RngState,
}

/// Trains in place and leaves the best checkpoint (lowest validation loss)
/// in `model`.
pub fn train(
    model: &mut Model,
    train_set: &[Instance],
    val_set: &[Instance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if cfg.batch_size == 0 || cfg.checkpoints_per_epoch == 0 {
        return Err(ModelError::BadConfig("batch size and checkpoint rate must be positive".into()));
    }
    let groups = HashMap::from([
        (
            Group::Main,
            AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                ..AdamConfig::adamw(cfg.lr_main, cfg.weight_decay)
            },
        ),
        (
            Group::Decoder,
            AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                ..AdamConfig::adam(cfg.lr_decoder)
            },
        ),
    ]);
    let mut opt = Optimizer::new(model.params(), groups);
    if model.config().freeze_token_embeddings {
        opt.freeze(model.token_embedding_id());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0u64, model.params().clone());
    let mut window = (0.0, 0usize);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let batch: Vec<&Instance> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut grads = model.params().zero_grads();
            let loss = {
                let mut tape = Tape::new(model.params());
                let (root, loss) = batch_objective(model, &mut tape, &batch, cfg.mode, cfg.teacher_forcing, &mut rng)?;
                tape.backward(root, 1.0, &mut grads);
                loss
            };
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(ModelError::DivergedLoss { step: opt.step_count() + 1 });
            }
            opt.step(model.params_mut(), &grads);
            window.0 += loss.total;
            window.1 += 1;

            let cp = cfg.checkpoints_per_epoch;
            if ((b + 1) * cp) / batches > (b * cp) / batches {
                let val = evaluate_loss(model, val_set, cfg.mode)?;
                let (sigma1, sigma2) = model.sigmas();
                history.push(HistoryEntry {
                    step: opt.step_count(),
                    epoch: epoch as f64 + (b + 1) as f64 / batches as f64,
                    train_loss: window.0 / window.1 as f64,
                    val_loss: val.total,
                    sigma1,
                    sigma2,
                });
                window = (0.0, 0);
                if val.total < best.0 {
                    best = (val.total, opt.step_count(), model.params().clone());
                }
            }
        }
    }
    let steps = opt.step_count();
    *model.params_mut() = best.2;
    Ok(TrainOutcome {
        history,
        best_step: best.1,
        best_val_loss: best.0,
        steps,
        rng: RngState::capture(cfg.seed, &rng),
    })
}
