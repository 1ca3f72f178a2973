//! Rotation-prediction pretext task and joint pretraining of the image encoder
//! with the question generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{self, cnn_forward, channels_last};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::nn;
use crate::params::{init_relu_weight, Bound, GradMap, Params};
use crate::tensor::{Padding, Tensor};

pub const ROTATIONS: usize = 4;
pub const HEAD_PREFIX: &str = "rot.";

/// `rot90_ccw(M)[i][j] = M[j][n − 1 − i]` applied `label` times to every channel.
pub fn rotate_image(img: &Tensor, label: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("rotate_image", format!("image {s:?} is not square [c, n, n]")));
    }
    if label >= ROTATIONS {
        return Err(Error::Index {
            op: "rotate_image",
            index: label,
            extent: ROTATIONS,
        });
    }
    let (c, n) = (s[0], s[1]);
    let mut cur = img.clone();
    for _ in 0..label {
        let src = cur.data();
        let mut out = vec![0f32; src.len()];
        for ch in 0..c {
            let base = ch * n * n;
            for i in 0..n {
                for j in 0..n {
                    out[base + i * n + j] = src[base + j * n + (n - 1 - i)];
                }
            }
        }
        cur = Tensor::new(s, out)?;
    }
    Ok(cur)
}

/// Conv3x3 (same) → relu → flatten → linear to 4 logits, on top of the CNN output.
pub fn init_rotation_head<R: Rng + ?Sized>(
    params: &mut Params,
    channels: usize,
    head_channels: usize,
    out_hw: (usize, usize),
    rng: &mut R,
) {
    params.insert(
        "rot.conv.w",
        init_relu_weight(&[head_channels, channels, 3, 3], channels * 9, rng),
    );
    params.insert("rot.conv.b", Tensor::zeros(&[head_channels]));
    nn::init_linear(
        params,
        "rot.linear",
        head_channels * out_hw.0 * out_hw.1,
        ROTATIONS,
        rng,
    );
}

/// Rotation logits `[1, 4]` for a channel-first feature map `[c, h, w]`.
pub fn rotation_logits<'t>(p: &Bound<'t>, features: &Var<'t>) -> Result<Var<'t>> {
    let conv = features.conv2d(&p.get("rot.conv.w")?, 1, Padding::Same)?;
    let hidden = encoders::add_channel_bias(&conv, &p.get("rot.conv.b")?)?.relu()?;
    let flat = hidden.reshape(&[1, hidden.value().numel()])?;
    nn::linear_named(&flat, p, "rot.linear")
}

/// Cross-entropy of the head's prediction on the image rotated by `label`.
pub fn rotation_loss<'t>(tape: &'t Tape, p: &Bound<'t>, img: &Tensor, label: usize) -> Result<Var<'t>> {
    if !p.contains("cnn.conv1.w") {
        return Err(Error::Config(
            "rotation loss needs the trainable CNN encoder, not precomputed features".into(),
        ));
    }
    let rotated = tape.constant(rotate_image(img, label)?);
    let logits = rotation_logits(p, &cnn_forward(p, &rotated)?)?;
    logits.reshape(&[ROTATIONS])?.cross_entropy(label)
}

/// Removes the rotation head, leaving every other name untouched.
pub fn strip_rotation_head(params: &Params) -> Result<Params> {
    let mut rest = params.clone();
    let head = rest.take_prefix(HEAD_PREFIX);
    if head.is_empty() {
        return Err(Error::MissingParam(format!("{HEAD_PREFIX}* (rotation head)")));
    }
    Ok(rest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// `false` drops the rotation branch, same as `lambda = 0`.
    pub selfsup: bool,
    /// Weight of the rotation loss; 0 gives plain supervised pretraining.
    pub lambda: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub iters: u64,
    pub seed: u64,
    pub head_channels: usize,
    /// Gradient-norm clip; `null` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            selfsup: true,
            lambda: 1.0,
            lr: 0.05,
            batch_size: 16,
            iters: 300,
            seed: 0,
            head_channels: 8,
            clip_norm: Some(10.0),
        }
    }
}

impl PretrainConfig {
    /// Effective rotation-loss weight.
    pub fn rotation_weight(&self) -> f32 {
        if self.selfsup {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("pretraining needs lr > 0 and batch_size ≥ 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub iter: u64,
    pub vqg_loss: f64,
    /// Absent when the rotation branch is disabled.
    pub rot_loss: Option<f64>,
    pub total_loss: f64,
}

/// Stacks per-image CNN maps into `[B, h·w, c]` on the tape.
pub fn cnn_feature_batch<'t>(tape: &'t Tape, p: &Bound<'t>, batch: &[&Example]) -> Result<Var<'t>> {
    let mut maps = Vec::with_capacity(batch.len());
    for e in batch {
        let f = channels_last(&cnn_forward(p, &tape.constant(e.image.as_ref().clone()))?)?;
        let s = f.shape();
        maps.push(f.reshape(&[1, s[0] * s[1], s[2]])?);
    }
    tape.concat(&maps, 0)
}

/// Mini-batch indices and rotation labels for iteration `iter`.
pub fn pretrain_batch(cfg: &PretrainConfig, n: usize, iter: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iter);
    let idx = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
    let mut rot = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0107);
    rot.set_stream(iter);
    let labels = (0..cfg.batch_size).map(|_| rot.gen_range(0..ROTATIONS)).collect();
    (idx, labels)
}

/// One step of `L_vqg + λ·L_rot`, where each batch image also appears once
/// under a random rotation for the rotation loss.
pub fn pretrain_step(
    model: &Model,
    params: &mut Params,
    data: &[Example],
    cfg: &PretrainConfig,
    iter: u64,
) -> Result<PretrainLogRow> {
    let (idx, labels) = pretrain_batch(cfg, data.len(), iter);
    let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let features = cnn_feature_batch(&tape, &p, &batch)?;
    let vqg = model.loss_with_features(&tape, &p, &features, &batch)?;
    let (total, rot_value) = if cfg.rotation_weight() > 0.0 {
        let mut rot: Option<Var<'_>> = None;
        for (e, &l) in batch.iter().zip(&labels) {
            let term = rotation_loss(&tape, &p, &e.image, l)?;
            rot = Some(match rot {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let rot = rot.expect("nonempty batch").scale(1.0 / batch.len() as f32)?;
        let value = rot.value().item() as f64;
        (vqg.add(&rot.scale(cfg.rotation_weight())?)?, Some(value))
    } else {
        (vqg, None)
    };
    let row = PretrainLogRow {
        iter,
        vqg_loss: vqg.value().item() as f64,
        rot_loss: rot_value,
        total_loss: total.value().item() as f64,
    };
    let mut grads = GradMap::from_backward(&tape, total, &p)?;
    if let Some(c) = cfg.clip_norm {
        grads.clip_global_norm(c);
    }
    params.sgd_step(&grads, cfg.lr)?;
    if !params.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite parameters after pretraining iteration {iter}"
        )));
    }
    Ok(row)
}

/// Joint pretraining on merged training data whose `image` fields are raw
/// `[3, H, W]` images. `params` holds the CNN, the generator, and (for
/// `lambda > 0`) the rotation head.
pub fn pretrain_joint(
    model: &Model,
    mut params: Params,
    data: &[Example],
    cfg: &PretrainConfig,
    start: u64,
    mut on_iter: impl FnMut(&PretrainLogRow, &Params) -> Result<()>,
) -> Result<Params> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pretraining set is empty".into()));
    }
    if cfg.rotation_weight() > 0.0 && !params.contains("rot.conv.w") {
        return Err(Error::MissingParam("rot.conv.w (rotation head)".into()));
    }
    for iter in start..cfg.iters {
        let row = pretrain_step(model, &mut params, data, cfg, iter)?;
        on_iter(&row, &params)?;
    }
    Ok(params)
}

/// Fraction of (image, rotation) pairs classified correctly, over all four
/// rotations of every image.
pub fn rotation_accuracy(params: &Params, images: &[&Tensor]) -> Result<f64> {
    let mut correct = 0usize;
    for img in images {
        for label in 0..ROTATIONS {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let rotated = tape.constant(rotate_image(img, label)?);
            let logits = rotation_logits(&p, &cnn_forward(&p, &rotated)?)?;
            correct += usize::from(logits.value().argmax() == label);
        }
    }
    Ok(correct as f64 / (images.len() * ROTATIONS) as f64)
}
