//! Full question generator: side-information encoders, conditioning, decoder.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conditioning::{self, ConditioningMode};
use crate::decoder::{self, DecoderDims};
use crate::encoders;
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideInfoUse {
    None,
    Category,
    Answer,
    #[default]
    Both,
}

impl SideInfoUse {
    pub fn category(self) -> bool {
        matches!(self, SideInfoUse::Category | SideInfoUse::Both)
    }

    pub fn answer(self) -> bool {
        matches!(self, SideInfoUse::Answer | SideInfoUse::Both)
    }
}

/// Where answer-token embeddings come from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnswerEmbedding {
    /// Trained jointly, sharing the decoder's word table.
    #[default]
    Scratch,
    /// Frozen table loaded from a TNSR file with its own vocabulary file.
    Pretrained { table: String, vocab: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ConditioningMode,
    pub side_info: SideInfoUse,
    pub answer_embedding: AnswerEmbedding,
    pub d_c: usize,
    pub d_a: usize,
    pub film_hidden: usize,
    pub d_h: usize,
    pub d_att: usize,
    pub d_p: usize,
    pub d_w: usize,
    pub max_len: usize,
    pub max_answer_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ConditioningMode::ScaleShift,
            side_info: SideInfoUse::Both,
            answer_embedding: AnswerEmbedding::Scratch,
            d_c: 32,
            d_a: 32,
            film_hidden: 64,
            d_h: 64,
            d_att: 64,
            d_p: 64,
            d_w: 32,
            max_len: 20,
            max_answer_len: 8,
        }
    }
}

/// One training or evaluation instance with tokenised text.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_id: String,
    /// Frozen feature map `[h, w, c]` or raw image `[3, H, W]`, depending on the caller.
    pub image: Arc<Tensor>,
    pub category: usize,
    /// Answer token ids, in the answer-embedding vocabulary.
    pub answer: Vec<usize>,
    /// `<bos> … <eos>` in the decoder vocabulary.
    pub question: Vec<usize>,
}

/// A configured model with its data-dependent sizes resolved.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: usize,
    pub n_categories: usize,
    pub channels: usize,
    /// Frozen answer embeddings, present only for pretrained answer embeddings.
    pub answer_table: Option<Arc<Tensor>>,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: usize, n_categories: usize, channels: usize) -> Result<Self> {
        if vocab < 5 || channels == 0 {
            return Err(Error::Config(format!(
                "vocab {vocab} and channels {channels} must be positive"
            )));
        }
        if cfg.side_info.category() && n_categories == 0 {
            return Err(Error::Config("category side information needs categories".into()));
        }
        if cfg.max_len == 0 || cfg.max_answer_len == 0 {
            return Err(Error::Config("max_len and max_answer_len must be positive".into()));
        }
        for (name, v) in [
            ("d_c", cfg.d_c),
            ("d_a", cfg.d_a),
            ("film_hidden", cfg.film_hidden),
            ("d_h", cfg.d_h),
            ("d_att", cfg.d_att),
            ("d_p", cfg.d_p),
            ("d_w", cfg.d_w),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(Model {
            cfg,
            vocab,
            n_categories,
            channels,
            answer_table: None,
        })
    }

    pub fn with_answer_table(mut self, table: Tensor) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Config(format!(
                "answer embedding table has shape {:?}, want [V, d]",
                table.shape()
            )));
        }
        self.answer_table = Some(Arc::new(table));
        Ok(self)
    }

    /// Width of the combined side-information embedding (0 without side info).
    pub fn side_width(&self) -> usize {
        let s = self.cfg.side_info;
        s.category() as usize * self.cfg.d_c + s.answer() as usize * self.cfg.d_a
    }

    fn uses_film(&self) -> bool {
        self.cfg.mode == ConditioningMode::ScaleShift && self.side_width() > 0
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.vocab,
            channels: self.channels,
            d_h: self.cfg.d_h,
            d_att: self.cfg.d_att,
            d_p: self.cfg.d_p,
            d_w: self.cfg.d_w,
            d_side: match self.cfg.mode {
                ConditioningMode::NoScaleShift => self.side_width(),
                ConditioningMode::ScaleShift => 0,
            },
        }
    }

    fn answer_input_width(&self) -> Result<usize> {
        match (&self.cfg.answer_embedding, &self.answer_table) {
            (AnswerEmbedding::Scratch, _) => Ok(self.cfg.d_w),
            (AnswerEmbedding::Pretrained { .. }, Some(t)) => Ok(t.shape()[1]),
            (AnswerEmbedding::Pretrained { table, .. }, None) => Err(Error::Config(format!(
                "pretrained answer embeddings {table} not loaded"
            ))),
        }
    }

    /// Fresh trainable parameters; the image encoder is not included.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Params> {
        let mut params = Params::new();
        decoder::init_decoder(&mut params, &self.decoder_dims(), rng);
        if self.cfg.side_info.category() {
            encoders::init_category_encoder(&mut params, self.n_categories, self.cfg.d_c, rng);
        }
        if self.cfg.side_info.answer() {
            encoders::init_answer_encoder(&mut params, self.answer_input_width()?, self.cfg.d_a, rng);
        }
        if self.uses_film() {
            conditioning::init_film(
                &mut params,
                self.side_width(),
                self.cfg.film_hidden,
                self.channels,
                rng,
            );
        }
        Ok(params)
    }

    fn side_embedding<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &[&Example],
    ) -> Result<Option<Var<'t>>> {
        if self.side_width() == 0 {
            return Ok(None);
        }
        let cat = if self.cfg.side_info.category() {
            let cats: Vec<usize> = batch.iter().map(|e| e.category).collect();
            Some(encoders::encode_category(tape, p, &cats)?)
        } else {
            None
        };
        let ans = if self.cfg.side_info.answer() {
            let table = match &self.answer_table {
                Some(t) if matches!(self.cfg.answer_embedding, AnswerEmbedding::Pretrained { .. }) => {
                    tape.constant(t.as_ref().clone())
                }
                _ => p.get("embed.words")?,
            };
            let rows = table.shape()[0];
            let mut seqs = Vec::with_capacity(batch.len());
            for e in batch {
                let mut s = e.answer.clone();
                s.truncate(self.cfg.max_answer_len);
                if let Some(&bad) = s.iter().find(|&&t| t >= rows) {
                    return Err(Error::Index {
                        op: "encode_answer",
                        index: bad,
                        extent: rows,
                    });
                }
                seqs.push(s);
            }
            Some(encoders::encode_answer(tape, p, &table, &seqs)?)
        } else {
            None
        };
        Ok(Some(encoders::combine_side_info(cat, ans)?.e))
    }

    /// Conditioned map `G[B, hw, c]` and the side vector routed to the decoder.
    pub fn condition<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        features: &Var<'t>,
        batch: &[&Example],
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let s = features.shape();
        if s.len() != 3 || s[0] != batch.len() || s[2] != self.channels {
            return Err(Error::shape(
                "condition",
                format!(
                    "features {s:?} for batch {} with {} channels",
                    batch.len(),
                    self.channels
                ),
            ));
        }
        let side = self.side_embedding(tape, p, batch)?;
        match (self.cfg.mode, side) {
            (ConditioningMode::ScaleShift, Some(e)) => {
                let ss = conditioning::compute_gamma_beta(&e, p)?;
                Ok((conditioning::apply_film(features, &ss)?, None))
            }
            (ConditioningMode::ScaleShift, None) => Ok((*features, None)),
            (ConditioningMode::NoScaleShift, side) => Ok((*features, side)),
        }
    }

    /// Teacher-forced loss given features `[B, hw, c]` already on the tape.
    pub fn loss_with_features<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        features: &Var<'t>,
        batch: &[&Example],
    ) -> Result<Var<'t>> {
        let (g, side) = self.condition(tape, p, features, batch)?;
        let gold: Vec<Vec<usize>> = batch.iter().map(|e| e.question.clone()).collect();
        decoder::teacher_forced_loss(tape, p, &g, side.as_ref(), &gold, self.cfg.max_len)
    }

    /// Teacher-forced loss where each example's `image` is a frozen `[h, w, c]` map.
    pub fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &[&Example]) -> Result<Var<'t>> {
        let f = stack_feature_maps(batch)?;
        self.loss_with_features(tape, p, &tape.constant(f), batch)
    }

    /// Greedy question for one example with a frozen feature map.
    pub fn generate(&self, params: &Params, ex: &Example) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let f = tape.constant(stack_feature_maps(&[ex])?);
        let (g, side) = self.condition(&tape, &p, &f, &[ex])?;
        decoder::decode_greedy(
            params,
            &g.value(),
            side.map(|s| s.value().as_ref().clone()).as_ref(),
            self.cfg.max_len,
        )
    }
}

/// Stacks `[h, w, c]` maps into `[B, h·w, c]`.
pub fn stack_feature_maps(batch: &[&Example]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let s = first.image.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "stack_feature_maps",
            format!("feature map {s:?} for {}, want [h, w, c]", first.image_id),
        ));
    }
    let refs: Vec<&Tensor> = batch.iter().map(|e| e.image.as_ref()).collect();
    Tensor::stack(&refs)?.reshape(&[batch.len(), s[0] * s[1], s[2]])
}
