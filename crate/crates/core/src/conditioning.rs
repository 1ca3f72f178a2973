//! Feature-wise scale-and-shift conditioning of the image feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Params};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Side information modulates the features channel-wise.
    #[default]
    ScaleShift,
    /// Features pass through unchanged; side information feeds the decoder.
    NoScaleShift,
}

/// Per-sample `gamma[B, c]` and `beta[B, c]`.
#[derive(Clone, Copy, Debug)]
pub struct ScaleShift<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

pub fn init_film<R: Rng + ?Sized>(
    params: &mut Params,
    d_side: usize,
    hidden: usize,
    channels: usize,
    rng: &mut R,
) {
    nn::init_linear(params, "film.trunk", d_side, hidden, rng);
    nn::init_linear(params, "film.gamma", hidden, channels, rng);
    nn::init_linear(params, "film.beta", hidden, channels, rng);
}

/// Shared tanh trunk with two linear heads; gamma carries a +1 offset so that
/// zero heads give identity conditioning.
pub fn compute_gamma_beta<'t>(side: &Var<'t>, p: &Bound<'t>) -> Result<ScaleShift<'t>> {
    let expected = p.get("film.trunk.w")?.shape()[1];
    let s = side.shape();
    if s.len() != 2 || s[1] != expected {
        return Err(Error::shape(
            "compute_gamma_beta",
            format!("side embedding {s:?}, trunk expects width {expected}"),
        ));
    }
    let trunk = nn::linear_named(side, p, "film.trunk")?.tanh()?;
    let gamma = nn::linear_named(&trunk, p, "film.gamma")?.add_scalar(1.0)?;
    let beta = nn::linear_named(&trunk, p, "film.beta")?;
    Ok(ScaleShift { gamma, beta })
}

/// `G^i = gamma_i F^i + beta_i` for every channel `i` and location, on
/// `F[B, hw, c]` (spatial positions flattened).
pub fn apply_film<'t>(features: &Var<'t>, ss: &ScaleShift<'t>) -> Result<Var<'t>> {
    let f = features.shape();
    let g = ss.gamma.shape();
    if f.len() != 3 || g != [f[0], f[2]] || ss.beta.shape() != g {
        return Err(Error::shape(
            "apply_film",
            format!(
                "features {f:?}, gamma {g:?}, beta {:?}",
                ss.beta.shape()
            ),
        ));
    }
    let hw = f[1];
    let gamma = ss.gamma.expand_axis(1, hw)?;
    let beta = ss.beta.expand_axis(1, hw)?;
    features.mul(&gamma)?.add(&beta)
}
