//! Image, category, and answer encoders.
//!
//! Image features come either from a frozen directory of precomputed `TNSR`
//! feature maps or from a small convolutional stack. Category and answer
//! encodings are concatenated (category first) into the side-information
//! embedding that drives conditioning.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, LstmState};
use crate::params::{init_relu_weight, init_weight, Bound, Params};
use crate::tensor::{io, Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Precomputed,
    TinyCnn,
}

/// Spatial feature map `F[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    pub f: Arc<Tensor>,
    pub source: FeatureSource,
}

impl ImageFeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.f.shape();
        (s[0], s[1], s[2])
    }
}

pub const FEATURE_INDEX: &str = "index.json";

/// Directory of `<image_id>.tnsr` feature maps plus an `index.json` id→file map.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    dir: PathBuf,
    index: BTreeMap<String, String>,
    dims: Option<[usize; 3]>,
}

impl FeatureStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(FEATURE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(FeatureStore {
            dir,
            index,
            dims: None,
        })
    }

    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FeatureStore {
            dir,
            index: BTreeMap::new(),
            dims: None,
        })
    }

    /// Requires every loaded map to have exactly these `(h, w, c)` extents.
    pub fn with_dims(mut self, dims: [usize; 3]) -> Self {
        self.dims = Some(dims);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn put(&mut self, image_id: &str, f: &Tensor) -> Result<()> {
        if f.rank() != 3 {
            return Err(Error::shape("feature_store", format!("rank {} map", f.rank())));
        }
        let file = format!("{image_id}.tnsr");
        io::write(self.dir.join(&file), f)?;
        self.index.insert(image_id.to_string(), file);
        self.save_index()
    }

    fn save_index(&self) -> Result<()> {
        let path = self.dir.join(FEATURE_INDEX);
        let text = serde_json::to_string_pretty(&self.index).expect("string map");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads the frozen feature map for `image_id`.
    pub fn encode_image_precomputed(&self, image_id: &str) -> Result<ImageFeatureMap> {
        let file = self
            .index
            .get(image_id)
            .ok_or_else(|| Error::Data(format!("no precomputed features for image `{image_id}`")))?;
        let path = self.dir.join(file);
        let f = io::read(&path)?;
        if f.rank() != 3 {
            return Err(Error::Format {
                path,
                msg: format!("feature map for `{image_id}` has rank {}", f.rank()),
            });
        }
        if let Some(d) = self.dims {
            if f.shape() != d {
                return Err(Error::Format {
                    path,
                    msg: format!("feature map {:?} does not match configured {d:?}", f.shape()),
                });
            }
        }
        Ok(ImageFeatureMap {
            f: Arc::new(f),
            source: FeatureSource::Precomputed,
        })
    }
}

/// Convolution widths of the tiny image encoder: three pooled blocks, then the output conv.
pub const CNN_LAYERS: usize = 4;

pub fn init_cnn<R: Rng + ?Sized>(params: &mut Params, widths: [usize; 3], channels: usize, rng: &mut R) {
    let chans = [3, widths[0], widths[1], widths[2], channels];
    for l in 0..CNN_LAYERS {
        let (ci, co) = (chans[l], chans[l + 1]);
        let shape = [co, ci, 3, 3];
        let w = if l + 1 < CNN_LAYERS {
            init_relu_weight(&shape, ci * 9, rng)
        } else {
            init_weight(&shape, ci * 9, rng)
        };
        params.insert(format!("cnn.conv{}.w", l + 1), w);
        params.insert(format!("cnn.conv{}.b", l + 1), Tensor::zeros(&[co]));
    }
}

/// Spatial extent of the CNN output for an `h × w` image.
pub fn cnn_output_hw(h: usize, w: usize) -> (usize, usize) {
    (h / 8 - 2, w / 8 - 2)
}

/// Adds a per-channel bias to `x[c, h, w]`.
pub(crate) fn add_channel_bias<'t>(x: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let field = b.expand_axis(1, s[1] * s[2])?.reshape(&s)?;
    x.add(&field)
}

/// `[conv3x3 → relu → maxpool2x2] × 3` then a valid conv3x3, returning `F[h, w, c]`.
pub fn encode_image_cnn<'t>(p: &Bound<'t>, img: &Var<'t>) -> Result<Var<'t>> {
    channels_last(&cnn_forward(p, img)?)
}

/// The same stack as [`encode_image_cnn`] with channel-first output `[c, h, w]`.
pub fn cnn_forward<'t>(p: &Bound<'t>, img: &Var<'t>) -> Result<Var<'t>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_image_cnn", format!("image {s:?}, want [3, H, W]")));
    }
    if s[1] / 8 < 3 || s[2] / 8 < 3 {
        return Err(Error::shape(
            "encode_image_cnn",
            format!("image {}x{} too small for three poolings and the output conv", s[1], s[2]),
        ));
    }
    let mut x = *img;
    for l in 1..CNN_LAYERS {
        let w = p.get(&format!("cnn.conv{l}.w"))?;
        let b = p.get(&format!("cnn.conv{l}.b"))?;
        x = add_channel_bias(&x.conv2d(&w, 1, Padding::Same)?, &b)?
            .relu()?
            .max_pool2x2()?;
    }
    let w = p.get(&format!("cnn.conv{CNN_LAYERS}.w"))?;
    let b = p.get(&format!("cnn.conv{CNN_LAYERS}.b"))?;
    add_channel_bias(&x.conv2d(&w, 1, Padding::Valid)?, &b)
}

/// `[c, h, w]` → `[h, w, c]`.
pub fn channels_last<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]])?.t()?.reshape(&[s[1], s[2], s[0]])
}

/// Runs the CNN without recording and wraps the result as a frozen feature map.
pub fn frozen_cnn_features(cnn: &Params, img: &Tensor) -> Result<ImageFeatureMap> {
    let tape = Tape::new();
    let bound = cnn.bind(&tape, false);
    let x = tape.constant(img.clone());
    let f = encode_image_cnn(&bound, &x)?;
    Ok(ImageFeatureMap {
        f: Arc::new(f.value().as_ref().clone()),
        source: FeatureSource::TinyCnn,
    })
}

pub fn init_category_encoder<R: Rng + ?Sized>(
    params: &mut Params,
    n_categories: usize,
    d_c: usize,
    rng: &mut R,
) {
    nn::init_linear(params, "cat.l1", n_categories, d_c, rng);
    nn::init_linear(params, "cat.l2", d_c, d_c, rng);
}

/// Two-layer MLP over the one-hot category: linear → tanh → linear. Returns `[B, d_c]`.
pub fn encode_category<'t>(tape: &'t Tape, p: &Bound<'t>, categories: &[usize]) -> Result<Var<'t>> {
    let n = p.get("cat.l1.w")?.shape()[1];
    let mut onehot = Tensor::zeros(&[categories.len(), n]);
    for (row, &c) in categories.iter().enumerate() {
        if c >= n {
            return Err(Error::Index {
                op: "encode_category",
                index: c,
                extent: n,
            });
        }
        onehot.data_mut()[row * n + c] = 1.0;
    }
    let x = tape.constant(onehot);
    let hidden = nn::linear_named(&x, p, "cat.l1")?.tanh()?;
    nn::linear_named(&hidden, p, "cat.l2")
}

pub fn init_answer_encoder<R: Rng + ?Sized>(params: &mut Params, d_in: usize, d_a: usize, rng: &mut R) {
    nn::init_lstm(params, "ans.lstm", d_in, d_a, rng);
}

/// Final hidden state of a single-layer LSTM run over each token sequence.
///
/// Sequences of different lengths share a batch; a row's state freezes once
/// its sequence is exhausted. Returns `[B, d_a]`.
pub fn encode_answer<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    table: &Var<'t>,
    sequences: &[Vec<usize>],
) -> Result<Var<'t>> {
    if sequences.iter().any(Vec::is_empty) {
        return Err(Error::Data("encode_answer: empty answer sequence".into()));
    }
    let hidden = p.get("ans.lstm.w_hh")?.shape()[1];
    let batch = sequences.len();
    let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
    let mut state = LstmState::zeros(tape, batch, hidden);
    for t in 0..max_len {
        let ids: Vec<usize> = sequences
            .iter()
            .map(|s| s.get(t).copied().unwrap_or(s[0]))
            .collect();
        let x = table.embed_rows(&ids)?;
        let next = nn::lstm_step(&x, &state, p, "ans.lstm")?;
        if sequences.iter().all(|s| t < s.len()) {
            state = next;
            continue;
        }
        let mut keep = Tensor::zeros(&[batch, hidden]);
        for (b, s) in sequences.iter().enumerate() {
            if t < s.len() {
                keep.data_mut()[b * hidden..(b + 1) * hidden].fill(1.0);
            }
        }
        let hold = tape.constant(keep.map(|v| 1.0 - v));
        let keep = tape.constant(keep);
        state = LstmState {
            h: next.h.mul(&keep)?.add(&state.h.mul(&hold)?)?,
            c: next.c.mul(&keep)?.add(&state.c.mul(&hold)?)?,
        };
    }
    Ok(state.h)
}

/// Which inputs contributed to a side-information embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SideParts {
    pub category: bool,
    pub answer: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SideInfoEmbedding<'t> {
    pub e: Var<'t>,
    pub parts: SideParts,
}

/// Concatenates `[category, answer]` along the feature axis; absent parts are skipped.
pub fn combine_side_info<'t>(
    category: Option<Var<'t>>,
    answer: Option<Var<'t>>,
) -> Result<SideInfoEmbedding<'t>> {
    let parts = SideParts {
        category: category.is_some(),
        answer: answer.is_some(),
    };
    let e = match (category, answer) {
        (Some(c), Some(a)) => c.tape().concat(&[c, a], 1)?,
        (Some(c), None) => c,
        (None, Some(a)) => a,
        (None, None) => {
            return Err(Error::Data(
                "side information required but neither category nor answer given".into(),
            ))
        }
    };
    Ok(SideInfoEmbedding { e, parts })
}
