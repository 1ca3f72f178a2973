//! Named parameter collections, their tape bindings, and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

/// Flat, name-ordered collection of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Splits off every entry whose name starts with `prefix`.
    pub fn take_prefix(&mut self, prefix: &str) -> Params {
        let names: Vec<String> = self
            .map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = Params::new();
        for n in names {
            let t = self.map.remove(&n).expect("listed");
            out.map.insert(n, t);
        }
        out
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// `self -= lr * grads` for every name present in `grads`.
    pub fn sgd_step(&mut self, grads: &GradMap, lr: f32) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self.get_mut(name)?;
            *p = p.axpy(-lr, g)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Parameters bound to a tape as differentiable handles.
#[derive(Clone)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    /// Current values, detached from the tape.
    pub fn snapshot(&self) -> Params {
        Params {
            map: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), v.value().as_ref().clone()))
                .collect(),
        }
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    map: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.map.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Accumulates `other` into `self`, adding entry by entry.
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => *acc = acc.axpy(1.0, g)?,
                None => {
                    self.map.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            for g in self.map.values_mut() {
                *g = g.map(|v| v * s);
            }
        }
        norm
    }

    /// Collects gradient values of `loss` for every bound parameter.
    pub fn from_backward<'t>(tape: &'t Tape, loss: Var<'t>, bound: &Bound<'t>) -> Result<Self> {
        let grads = tape.backward(loss, false)?;
        Ok(GradMap {
            map: bound
                .iter()
                .map(|(k, v)| (k.to_string(), grads.wrt(v).value().as_ref().clone()))
                .collect(),
        })
    }
}

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f32).sqrt(), rng)
}

/// He-uniform initialisation for layers followed by a relu,
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn init_relu_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in.max(1) as f32).sqrt(), rng)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub params: Vec<ParamEntry>,
    pub step: u64,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Writes `<name>.tnsr` per parameter plus `manifest.json`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &Params,
    step: u64,
    seed: u64,
    config: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        io::write(dir.join(format!("{name}.tnsr")), t)?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        params: entries,
        step,
        seed,
        config,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Params, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut params = Params::new();
    for entry in &manifest.params {
        let file = dir.join(format!("{}.tnsr", entry.name));
        let t = io::read(&file)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path: file,
                msg: format!("shape {:?} does not match manifest {:?}", t.shape(), entry.shape),
            });
        }
        params.insert(entry.name.clone(), t);
    }
    Ok((params, manifest))
}
