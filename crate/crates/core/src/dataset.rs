//! Manifests of image/question/answer records and the curation steps applied
//! to them: category remapping, cross-source deduplication, overlap-free
//! splitting and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[default]
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub answer_category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_category: Option<String>,
    pub source: Source,
}

impl Record {
    fn key(&self) -> (&str, &str, &str) {
        (&self.image_id, &self.question, &self.answer)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("image_id", &self.image_id),
            ("question", &self.question),
            ("answer", &self.answer),
            ("answer_category", &self.answer_category),
        ] {
            if v.trim().is_empty() {
                return Err(format!("empty {name}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicates: usize,
}

impl Manifest {
    pub fn new(records: Vec<Record>) -> Self {
        Manifest { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.answer_category.as_str()).collect()
    }

    pub fn image_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.image_id.as_str()).collect()
    }

    /// Parses JSONL, collapsing repeated (image_id, question, answer) records.
    pub fn load(path: impl AsRef<Path>) -> Result<(Manifest, LoadReport)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<(Manifest, LoadReport)> {
        let mut records = Vec::new();
        let mut seen: HashSet<(String, String, String)> = HashSet::new();
        let mut refs: HashMap<String, String> = HashMap::new();
        let mut report = LoadReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let r: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            r.validate().map_err(parse_err)?;
            match refs.get(&r.image_id) {
                Some(prev) if *prev != r.image_ref => {
                    return Err(parse_err(format!(
                        "image {} has conflicting refs {prev} and {}",
                        r.image_id, r.image_ref
                    )))
                }
                Some(_) => {}
                None => {
                    refs.insert(r.image_id.clone(), r.image_ref.clone());
                }
            }
            let (a, b, c) = r.key();
            if !seen.insert((a.to_string(), b.to_string(), c.to_string())) {
                report.duplicates += 1;
                continue;
            }
            records.push(r);
        }
        if report.duplicates > 0 {
            warn!(
                "{}: collapsed {} duplicate records",
                path.display(),
                report.duplicates
            );
        }
        Ok((Manifest { records }, report))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// One remapping rule. Present conditions must all hold; a rule without
/// conditions always matches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRule {
    /// Answer contains one of these words or word sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_any: Option<Vec<String>>,
    /// Current category is one of these.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_in: Option<Vec<String>>,
    /// Question contains one of these words or word sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_any: Option<Vec<String>>,
    /// New category; absent means keep the current one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let p = tokenize(phrase);
    !p.is_empty() && tokens.windows(p.len()).any(|w| w == p.as_slice())
}

impl CategoryRule {
    pub fn is_fallback(&self) -> bool {
        self.answer_any.is_none() && self.category_in.is_none() && self.question_any.is_none()
    }

    pub fn matches(&self, r: &Record) -> bool {
        if let Some(cats) = &self.category_in {
            if !cats.iter().any(|c| *c == r.answer_category) {
                return false;
            }
        }
        if let Some(words) = &self.answer_any {
            let toks = tokenize(&r.answer);
            if !words.iter().any(|w| contains_phrase(&toks, w)) {
                return false;
            }
        }
        if let Some(words) = &self.question_any {
            let toks = tokenize(&r.question);
            if !words.iter().any(|w| contains_phrase(&toks, w)) {
                return false;
            }
        }
        true
    }
}

/// Ordered first-match-wins rules; the last rule must be a fallback.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryMap {
    pub rules: Vec<CategoryRule>,
}

pub const VQG23_CATEGORY_MAP: &str = include_str!("../data/vqg23_category_map.json");
pub const VQG23_SPLIT: &str = include_str!("../data/vqg23_splitspec.json");

impl CategoryMap {
    pub fn identity() -> Self {
        CategoryMap {
            rules: vec![CategoryRule::default()],
        }
    }

    pub fn vqg23() -> Self {
        serde_json::from_str(VQG23_CATEGORY_MAP).expect("bundled category map parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: CategoryMap = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        map.check_total()?;
        Ok(map)
    }

    pub fn check_total(&self) -> Result<()> {
        match self.rules.last() {
            Some(r) if r.is_fallback() => Ok(()),
            _ => Err(Error::Config(
                "category map is not total: the last rule must have no conditions".into(),
            )),
        }
    }

    pub fn apply(&self, r: &Record) -> String {
        let rule = self
            .rules
            .iter()
            .find(|rule| rule.matches(r))
            .expect("total map always matches");
        rule.category.clone().unwrap_or_else(|| r.answer_category.clone())
    }
}

/// Rewrites each record's answer category by the first matching rule.
pub fn recategorize(m: &Manifest, map: &CategoryMap) -> Result<Manifest> {
    map.check_total()?;
    Ok(Manifest {
        records: m
            .records
            .iter()
            .map(|r| Record {
                answer_category: map.apply(r),
                ..r.clone()
            })
            .collect(),
    })
}

/// Union of two manifests keyed on image id; each image keeps a single
/// `image_ref` (the first seen) and all distinct QA pairs. Conflicting refs
/// are an error unless `override_conflicts` is set.
pub fn merge_dedup(a: &Manifest, b: &Manifest, override_conflicts: bool) -> Result<Manifest> {
    let mut refs: HashMap<&str, &str> = HashMap::new();
    let mut seen: HashSet<(&str, &str, &str)> = HashSet::new();
    let mut out = Vec::new();
    for r in a.records.iter().chain(&b.records) {
        let image_ref = match refs.get(r.image_id.as_str()) {
            Some(&kept) if kept != r.image_ref && !override_conflicts => {
                return Err(Error::Data(format!(
                    "image {} has conflicting refs {kept} and {}",
                    r.image_id, r.image_ref
                )))
            }
            Some(&kept) => kept,
            None => {
                refs.insert(&r.image_id, &r.image_ref);
                &r.image_ref
            }
        };
        if seen.insert(r.key()) {
            out.push(Record {
                image_ref: image_ref.to_string(),
                ..r.clone()
            });
        }
    }
    Ok(Manifest { records: out })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_categories: BTreeSet<String>,
    pub test_categories: BTreeSet<String>,
}

impl SplitSpec {
    pub fn vqg23() -> Self {
        serde_json::from_str(VQG23_SPLIT).expect("bundled split parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SplitSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.train_categories.intersection(&self.test_categories).next() {
            return Err(Error::Config(format!("category {c} is on both sides of the split")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    /// Images whose records fell on both sides.
    pub straddling_images: usize,
    pub dropped: Vec<Record>,
}

/// Routes records by category so that no image id lands on both sides. An
/// image with records on both sides goes wholly to the side holding most of
/// them (ties go to train); its other records are dropped.
pub fn split(m: &Manifest, spec: &SplitSpec) -> Result<(Manifest, Manifest, SplitReport)> {
    spec.validate()?;
    let mut votes: HashMap<&str, (usize, usize)> = HashMap::new();
    for r in &m.records {
        let c = r.answer_category.as_str();
        let v = votes.entry(&r.image_id).or_insert((0, 0));
        if spec.train_categories.contains(c) {
            v.0 += 1;
        } else if spec.test_categories.contains(c) {
            v.1 += 1;
        } else {
            return Err(Error::Data(format!("category {c} is not covered by the split")));
        }
    }
    let mut report = SplitReport {
        straddling_images: votes.values().filter(|v| v.0 > 0 && v.1 > 0).count(),
        ..Default::default()
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in &m.records {
        let (n_train, n_test) = votes[r.image_id.as_str()];
        let to_train = n_train >= n_test;
        let is_train = spec.train_categories.contains(&r.answer_category);
        match (to_train, is_train) {
            (true, true) => train.push(r.clone()),
            (false, false) => test.push(r.clone()),
            _ => report.dropped.push(r.clone()),
        }
    }
    Ok((Manifest::new(train), Manifest::new(test), report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub images: usize,
    pub questions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub categories: BTreeMap<String, CategoryStats>,
    pub total_questions: usize,
    pub unique_images: usize,
    pub unique_questions: usize,
    pub unique_answers: usize,
    pub unique_qa_pairs: usize,
    /// Unique QA pairs per unique answer, rounded to two decimals.
    pub variety_ratio: Option<f64>,
}

fn normalized(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Per-category image and question counts plus global uniqueness counts.
/// Questions and answers are compared after tokenisation.
pub fn stats(m: &Manifest) -> Stats {
    let mut images: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut questions: BTreeMap<&str, usize> = BTreeMap::new();
    let mut uq = HashSet::new();
    let mut ua = HashSet::new();
    let mut uqa = HashSet::new();
    for r in &m.records {
        images
            .entry(&r.answer_category)
            .or_default()
            .insert(&r.image_id);
        *questions.entry(&r.answer_category).or_insert(0) += 1;
        let (q, a) = (normalized(&r.question), normalized(&r.answer));
        uq.insert(q.clone());
        ua.insert(a.clone());
        uqa.insert((q, a));
    }
    let categories = images
        .into_iter()
        .map(|(c, imgs)| {
            (
                c.to_string(),
                CategoryStats {
                    images: imgs.len(),
                    questions: questions[c],
                },
            )
        })
        .collect();
    Stats {
        categories,
        total_questions: m.records.len(),
        unique_images: m.image_ids().len(),
        unique_questions: uq.len(),
        unique_answers: ua.len(),
        unique_qa_pairs: uqa.len(),
        variety_ratio: variety_ratio(uqa.len(), ua.len()).ok().map(round2),
    }
}

/// Unique QA pairs divided by unique answers.
pub fn variety_ratio(unique_qa_pairs: usize, unique_answers: usize) -> Result<f64> {
    if unique_answers == 0 {
        return Err(Error::Data("variety ratio undefined with zero answers".into()));
    }
    Ok(unique_qa_pairs as f64 / unique_answers as f64)
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
