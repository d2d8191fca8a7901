//! Toy-scale matching model with an attention-GRU Tree Number decoder.
//!
//! Every forward pass is recorded on a [`Tape`], so gradients come from the
//! same code that produces predictions. The encoder is a stand-in for a
//! pretrained transformer: either a bag of embeddings whose first state mixes
//! term, description and abstract means with their products, or a small
//! self-attention stack.

mod decoder;
mod encoder;
mod gradcheck;
mod loss;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, RngState};
use crate::embed_io::EmbeddingTable;
use crate::pairs::{assemble_input, AssembledInput, PairsError};
use crate::tape::{Group, Mat, ParamId, Params};
use crate::text::HashedVocab;
use crate::thesaurus::{ThesaurusError, VOCAB_SIZE};

pub use decoder::{DecodeOutput, DecoderState, StepOutput, MAX_TARGET_LEN};
pub use encoder::EncoderOutput;
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{bce_from_logit, multi_task_loss, MultiTaskLoss};
pub use train::{
    build_instances, evaluate_loss, predict, train, BatchLoss, HistoryEntry, Instance, Mode, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite activation at decoder step {step}")]
    NonFiniteActivation { step: usize },
    #[error("training loss diverged at step {step}")]
    DivergedLoss { step: u64 },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("no training instances")]
    EmptyTrainingSet,
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("embedding width {found} does not match model width {expected}")]
    EmbeddingWidth { expected: usize, found: usize },
    #[error(transparent)]
    Pairs(#[from] PairsError),
    #[error(transparent)]
    Thesaurus(#[from] ThesaurusError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    BagOfEmbeddings,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hashed input vocabulary size.
    pub vocab_size: usize,
    pub width: usize,
    pub max_len: usize,
    pub kind: EncoderKind,
    pub layers: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 4096,
            width: 64,
            max_len: 128,
            kind: EncoderKind::BagOfEmbeddings,
            layers: 1,
            heads: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.width == 0 {
            return bad("width must be positive");
        }
        if self.max_len < 8 {
            return bad("max length must be at least 8");
        }
        if self.vocab_size <= 5 {
            return bad("vocabulary must exceed the reserved ids");
        }
        if self.kind == EncoderKind::SelfAttention {
            if self.layers == 0 || self.heads == 0 {
                return bad("attention stack needs layers and heads");
            }
            if !self.width.is_multiple_of(self.heads) {
                return bad("width must be divisible by heads");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Std of the token, segment and tree-vocabulary embedding initialisation.
    pub embedding_init_std: f64,
    /// Keeps externally supplied token embeddings fixed during training.
    pub freeze_token_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            embedding_init_std: 0.1,
            freeze_token_embeddings: false,
            seed: 0,
        }
    }
}

/// Handles of the decoder and head parameters.
#[derive(Debug, Clone)]
pub(crate) struct Ids {
    pub tok_emb: ParamId,
    pub seg_emb: ParamId,
    pub bag: Option<BagIds>,
    pub layers: Vec<LayerIds>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub dec_emb: ParamId,
    pub gru_wi: ParamId,
    pub gru_bi: ParamId,
    pub gru_wh: ParamId,
    pub gru_bh: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub log_s1: ParamId,
    pub log_s2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct BagIds {
    pub w_tok: ParamId,
    pub b_tok: ParamId,
    pub w_pool: ParamId,
    pub b_pool: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Token ids of one assembled classifier input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub desc_mask: Vec<bool>,
    /// Positions of the term and description (between `[CLS]` and `[SEP]`).
    pub label_positions: Vec<usize>,
    /// Positions of the term words only.
    pub term_positions: Vec<usize>,
    pub abstract_positions: Vec<usize>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_assembled(vocab: &HashedVocab, a: &AssembledInput) -> Self {
        let sep = a.tokens.iter().position(|t| t == crate::text::SEP).unwrap_or(a.len());
        let colon = a.tokens.iter().position(|t| t == crate::text::COLON).unwrap_or(sep);
        ModelInput {
            term_positions: (1..colon).collect(),
            ids: vocab.ids(&a.tokens),
            segments: a.segments.clone(),
            desc_mask: a.desc_mask.clone(),
            label_positions: (1..sep).collect(),
            abstract_positions: (0..a.len()).filter(|&i| a.segments[i] == 1).collect(),
        }
    }
}

/// How a label vector is read off the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    FirstPosition,
    Mean,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: HashedVocab,
    params: Params,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.encoder.validate()?;
        let e = &config.encoder;
        let m = e.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::default();
        let emb_std = config.embedding_init_std;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let d = Normal::new(0.0, std).expect("finite std");
            Mat::from_shape_fn((rows, cols), |_| d.sample(&mut rng))
        };
        let glorot = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let tok_emb = p.add("enc.tok_emb", Group::Main, normal(e.vocab_size, m, emb_std));
        let seg_emb = p.add("enc.seg_emb", Group::Main, normal(2, m, emb_std));
        let mut bag = None;
        let mut layers = Vec::new();
        match e.kind {
            EncoderKind::BagOfEmbeddings => {
                bag = Some(BagIds {
                    w_tok: p.add("enc.w_tok", Group::Main, normal(m, m, glorot(m))),
                    b_tok: p.add("enc.b_tok", Group::Main, Mat::zeros((1, m))),
                    w_pool: p.add("enc.w_pool", Group::Main, normal(5 * m, m, glorot(5 * m))),
                    b_pool: p.add("enc.b_pool", Group::Main, Mat::zeros((1, m))),
                });
            }
            EncoderKind::SelfAttention => {
                for l in 0..e.layers {
                    let mut add = |name: &str, value: Mat| p.add(&format!("enc.{l}.{name}"), Group::Main, value);
                    layers.push(LayerIds {
                        wq: add("wq", normal(m, m, glorot(m))),
                        wk: add("wk", normal(m, m, glorot(m))),
                        wv: add("wv", normal(m, m, glorot(m))),
                        wo: add("wo", normal(m, m, glorot(m))),
                        w1: add("w1", normal(m, m, glorot(m))),
                        b1: add("b1", Mat::zeros((1, m))),
                        w2: add("w2", normal(m, m, glorot(m))),
                        b2: add("b2", Mat::zeros((1, m))),
                    });
                }
            }
        }
        let head_w = p.add("head.w", Group::Main, normal(m, 1, glorot(m)));
        let head_b = p.add("head.b", Group::Main, Mat::zeros((1, 1)));
        let dec_emb = p.add("dec.emb", Group::Decoder, normal(VOCAB_SIZE, m, emb_std));
        let gru_wi = p.add("dec.gru_wi", Group::Decoder, normal(m, 3 * m, glorot(m)));
        let gru_bi = p.add("dec.gru_bi", Group::Decoder, Mat::zeros((1, 3 * m)));
        let gru_wh = p.add("dec.gru_wh", Group::Decoder, normal(m, 3 * m, glorot(m)));
        let gru_bh = p.add("dec.gru_bh", Group::Decoder, Mat::zeros((1, 3 * m)));
        let out_w = p.add("dec.out_w", Group::Decoder, normal(m, VOCAB_SIZE, glorot(m)));
        let out_b = p.add("dec.out_b", Group::Decoder, Mat::zeros((1, VOCAB_SIZE)));
        let log_s1 = p.add("mtl.log_sigma1_sq", Group::Decoder, Mat::zeros((1, 1)));
        let log_s2 = p.add("mtl.log_sigma2_sq", Group::Decoder, Mat::zeros((1, 1)));

        let ids = Ids {
            tok_emb,
            seg_emb,
            bag,
            layers,
            head_w,
            head_b,
            dec_emb,
            gru_wi,
            gru_bi,
            gru_wh,
            gru_bh,
            out_w,
            out_b,
            log_s1,
            log_s2,
        };
        Ok(Model {
            vocab: HashedVocab::new(config.encoder.vocab_size),
            config,
            params: p,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &HashedVocab {
        &self.vocab
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub(crate) fn ids(&self) -> &Ids {
        &self.ids
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.ids.tok_emb
    }

    /// Current `(σ₁, σ₂)`.
    pub fn sigmas(&self) -> (f64, f64) {
        let s1 = self.params.get(self.ids.log_s1)[[0, 0]];
        let s2 = self.params.get(self.ids.log_s2)[[0, 0]];
        ((s1 / 2.0).exp(), (s2 / 2.0).exp())
    }

    pub fn input(&self, term: &str, description: &str, abstract_text: &str) -> Result<ModelInput, ModelError> {
        let a = assemble_input(term, description, abstract_text, self.config.encoder.max_len)?;
        Ok(ModelInput::from_assembled(&self.vocab, &a))
    }

    /// Copies frozen external vectors into the token table; entries are keyed
    /// by word and land in that word's hashed row.
    pub fn load_token_embeddings(&mut self, table: &EmbeddingTable) -> Result<usize, ModelError> {
        if table.dim() != self.config.encoder.width {
            return Err(ModelError::EmbeddingWidth {
                expected: self.config.encoder.width,
                found: table.dim(),
            });
        }
        let id = self.ids.tok_emb;
        let mut n = 0;
        for (word, vector) in table.entries() {
            let row = self.vocab.id(word) as usize;
            let target = self.params.get_mut(id);
            for (dst, &src) in target.row_mut(row).iter_mut().zip(vector) {
                *dst = f64::from(src);
            }
            n += 1;
        }
        self.config.freeze_token_embeddings = true;
        Ok(n)
    }

    pub fn to_container(&self, rng: RngState, step: u64) -> Result<Container, ModelError> {
        Ok(Container::from_params(serde_json::to_string(&self.config)?, &self.params, rng, step))
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_str(&c.config_json)?;
        let mut model = Model::new(config)?;
        c.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, rng: RngState, step: u64) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        self.to_container(rng, step)?.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Container), ModelError> {
        let bytes = std::fs::read(path)?;
        let c = Container::read(bytes.as_slice())?;
        Ok((Model::from_container(&c)?, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(kind: EncoderKind) -> Model {
        Model::new(ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 48,
                width: 8,
                max_len: 12,
                kind,
                layers: 1,
                heads: 2,
            },
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.max_len = 7;
        assert!(c.validate().is_err());
        c.max_len = 8;
        c.kind = EncoderKind::SelfAttention;
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn initialisation_is_seeded_and_sigmas_start_at_one() {
        let a = tiny(EncoderKind::BagOfEmbeddings);
        let b = tiny(EncoderKind::BagOfEmbeddings);
        assert_eq!(a.params(), b.params());
        assert_eq!(a.sigmas(), (1.0, 1.0));
        assert!(a.params().all_finite());
    }

    #[test]
    fn container_round_trip_preserves_f32_values() {
        let mut a = tiny(EncoderKind::SelfAttention);
        crate::container::round_to_f32(a.params_mut());
        let c = a.to_container(RngState::default(), 5).unwrap();
        let b = Model::from_container(&c).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.config(), b.config());
    }

    #[test]
    fn input_positions() {
        let m = tiny(EncoderKind::BagOfEmbeddings);
        let x = m.input("Virus", "an agent", "virus found").unwrap();
        // [CLS] Virus : an agent [SEP] virus found
        assert_eq!(x.label_positions, vec![1, 2, 3, 4]);
        assert_eq!(x.abstract_positions, vec![6, 7]);
        assert_eq!(x.ids[1], x.ids[6]);
    }
}
