//! Turning a manifest on disk into model-ready examples.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::{self, Manifest, Record, SplitSpec};
use crate::encoders::{frozen_cnn_features, FeatureStore};
use crate::error::{Error, Result};
use crate::model::Example;
use crate::params::Params;
use crate::tensor::{io, Tensor};
use crate::text::Vocabulary;

/// Where an example's `image` tensor comes from.
#[derive(Clone, Debug)]
pub enum FeatureBackend {
    /// The raw `[3, H, W]` image, for trainable encoders.
    Raw,
    /// Feature map from a frozen CNN.
    TinyCnn(Params),
    /// Feature map from a precomputed store.
    Precomputed(FeatureStore),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Train,
    Test,
}

/// A manifest with its split, vocabulary and category indexing.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub train: Manifest,
    pub test: Manifest,
    pub vocab: Vocabulary,
    /// Train categories (sorted) followed by test categories (sorted).
    pub categories: Vec<String>,
}

impl Corpus {
    /// Splits `manifest` so that no image is shared across sides. The
    /// vocabulary covers questions and answers of both sides.
    pub fn new(root: impl AsRef<Path>, manifest: &Manifest, spec: &SplitSpec) -> Result<Self> {
        let (train, test, report) = dataset::split(manifest, spec)?;
        if !report.dropped.is_empty() {
            log::warn!(
                "split dropped {} records of {} straddling images",
                report.dropped.len(),
                report.straddling_images
            );
        }
        let vocab = Vocabulary::build(
            manifest
                .records
                .iter()
                .flat_map(|r| [r.question.as_str(), r.answer.as_str()]),
        );
        let categories = spec
            .train_categories
            .iter()
            .chain(&spec.test_categories)
            .cloned()
            .collect();
        Ok(Corpus {
            root: root.as_ref().to_path_buf(),
            train,
            test,
            vocab,
            categories,
        })
    }

    /// Loads `manifest.jsonl` and `splitspec.json` from a corpus directory.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let (manifest, _) = Manifest::load(root.join(crate::toyset::MANIFEST_FILE))?;
        let spec = SplitSpec::load(root.join(crate::toyset::SPLIT_FILE))?;
        Self::new(root, &manifest, &spec)
    }

    pub fn manifest(&self, side: Side) -> &Manifest {
        match side {
            Side::Train => &self.train,
            Side::Test => &self.test,
        }
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("unknown category {name}")))
    }

    pub fn load_image(&self, r: &Record) -> Result<Tensor> {
        io::read(self.root.join(&r.image_ref))
    }

    fn image_for(&self, r: &Record, backend: &FeatureBackend) -> Result<Arc<Tensor>> {
        Ok(Arc::new(match backend {
            FeatureBackend::Raw => self.load_image(r)?,
            FeatureBackend::TinyCnn(cnn) => {
                Arc::unwrap_or_clone(frozen_cnn_features(cnn, &self.load_image(r)?)?.f)
            }
            FeatureBackend::Precomputed(store) => {
                Arc::unwrap_or_clone(store.encode_image_precomputed(&r.image_id)?.f)
            }
        }))
    }

    /// Tokenised examples for one side. Questions keep at most `max_len - 1`
    /// words so that `<eos>` fits within `max_len` decoding steps.
    pub fn examples(
        &self,
        side: Side,
        backend: &FeatureBackend,
        max_len: usize,
        answer_vocab: Option<&Vocabulary>,
    ) -> Result<Vec<Example>> {
        if max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        let answers = answer_vocab.unwrap_or(&self.vocab);
        self.manifest(side)
            .records
            .par_iter()
            .map(|r| {
                let answer = answers.encode(&r.answer);
                if answer.is_empty() {
                    return Err(Error::Data(format!("record for {} has an empty answer", r.image_id)));
                }
                Ok(Example {
                    image_id: r.image_id.clone(),
                    image: self.image_for(r, backend)?,
                    category: self.category_index(&r.answer_category)?,
                    answer,
                    question: self.vocab.encode_question(&r.question, max_len - 1),
                })
            })
            .collect()
    }
}
