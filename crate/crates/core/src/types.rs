//! Domain types shared across the crate: identities, bags, bag priors and datasets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity index in `[0, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub usize);

impl LabelId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bag-level annotation: the distinct identities present somewhere in a bag.
///
/// Ids are kept sorted ascending, which makes "lowest index wins" tie-breaking
/// a matter of iteration order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSet {
    ids: Vec<LabelId>,
}

impl LabelSet {
    /// Builds a label set, rejecting empty input and duplicates.
    pub fn new(ids: impl IntoIterator<Item = LabelId>) -> Result<Self> {
        let raw: Vec<LabelId> = ids.into_iter().collect();
        let set: BTreeSet<LabelId> = raw.iter().copied().collect();
        if set.is_empty() {
            return Err(Error::InvalidBag("empty label set".into()));
        }
        if set.len() != raw.len() {
            return Err(Error::InvalidBag(format!("duplicate ids in label set {raw:?}")));
        }
        Ok(Self { ids: set.into_iter().collect() })
    }

    /// Summarizes per-image labels into a bag label, e.g. `{3, 1, 3, 7}` becomes `{1, 3, 7}`.
    pub fn summarize(ids: impl IntoIterator<Item = LabelId>) -> Result<Self> {
        let set: BTreeSet<LabelId> = ids.into_iter().collect();
        Self::new(set)
    }

    pub fn ids(&self) -> &[LabelId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: LabelId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn max_id(&self) -> LabelId {
        *self.ids.last().expect("label sets are non-empty")
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.ids.iter().any(|id| other.contains(*id))
    }
}

impl Serialize for LabelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.ids.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ids = Vec::<LabelId>::deserialize(d)?;
        LabelSet::new(ids).map_err(serde::de::Error::custom)
    }
}

/// One image: network input features `x`, the appearance descriptor used by
/// the pairwise kernel, and an identity that only generators and evaluators read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    #[serde(rename = "i")]
    pub appearance: Vec<f64>,
    pub true_id: Option<LabelId>,
}

impl Sample {
    /// Sample whose appearance descriptor is the feature vector itself.
    pub fn new(x: Vec<f64>, true_id: Option<LabelId>) -> Self {
        Self { appearance: x.clone(), x, true_id }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.appearance).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: u64,
    pub samples: Vec<Sample>,
    pub label: LabelSet,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-image categorical prior induced by a bag label: `1/n` on each of the
/// bag's `n` ids and zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDistribution {
    y: Vec<f64>,
}

impl PriorDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }

    pub fn get(&self, id: LabelId) -> f64 {
        self.y[id.0]
    }

    pub fn num_classes(&self) -> usize {
        self.y.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.y.iter().zip(&other.y).map(|(a, b)| a * b).sum()
    }
}

pub fn prior_from_bag(label: &LabelSet, m: usize) -> Result<PriorDistribution> {
    if label.is_empty() {
        return Err(Error::InvalidBag("empty label set".into()));
    }
    if let Some(bad) = label.ids().iter().find(|id| id.0 >= m) {
        return Err(Error::LabelOutOfRange { id: bad.0, m });
    }
    let mass = 1.0 / label.len() as f64;
    let mut y = vec![0.0; m];
    for id in label.ids() {
        y[id.0] = mass;
    }
    Ok(PriorDistribution { y })
}

/// Training split: bags with bag-level labels only.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakDataset {
    pub m: usize,
    pub d: usize,
    pub d_app: usize,
    pub bags: Vec<Bag>,
}

impl WeakDataset {
    pub fn num_samples(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }
}

/// Retrieval split: each query has exactly one gallery sample with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub d: usize,
    pub d_app: usize,
    pub queries: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyDataset,
    EmptyBag { bag_id: u64 },
    LabelOutOfRange { bag_id: u64, id: usize, m: usize },
    FeatureDim { bag_id: u64, sample: usize, expected: usize, found: usize },
    AppearanceDim { bag_id: u64, sample: usize, expected: usize, found: usize },
    NonFinite { bag_id: u64, sample: usize },
    MissingTrueId { role: &'static str, index: usize },
    MatchCount { query: usize, matches: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDataset => write!(f, "dataset has no bags"),
            Violation::EmptyBag { bag_id } => write!(f, "bag {bag_id} has no samples"),
            Violation::LabelOutOfRange { bag_id, id, m } => {
                write!(f, "bag {bag_id}: label id {id} >= m = {m}")
            }
            Violation::FeatureDim { bag_id, sample, expected, found } => write!(
                f,
                "bag {bag_id} sample {sample}: feature length {found}, expected {expected}"
            ),
            Violation::AppearanceDim { bag_id, sample, expected, found } => write!(
                f,
                "bag {bag_id} sample {sample}: appearance length {found}, expected {expected}"
            ),
            Violation::NonFinite { bag_id, sample } => {
                write!(f, "bag {bag_id} sample {sample}: non-finite entry")
            }
            Violation::MissingTrueId { role, index } => {
                write!(f, "{role} {index} has no true id")
            }
            Violation::MatchCount { query, matches } => {
                write!(f, "query {query} has {matches} gallery matches, expected exactly 1")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(self.violations.iter().map(ToString::to_string).collect()))
        }
    }
}

fn check_sample(
    out: &mut Vec<Violation>,
    bag_id: u64,
    index: usize,
    s: &Sample,
    d: usize,
    d_app: usize,
) {
    if s.x.len() != d {
        out.push(Violation::FeatureDim { bag_id, sample: index, expected: d, found: s.x.len() });
    }
    if s.appearance.len() != d_app {
        out.push(Violation::AppearanceDim {
            bag_id,
            sample: index,
            expected: d_app,
            found: s.appearance.len(),
        });
    }
    if !s.is_finite() {
        out.push(Violation::NonFinite { bag_id, sample: index });
    }
}

pub fn validate_dataset(ds: &WeakDataset) -> ValidationReport {
    let mut violations = Vec::new();
    if ds.bags.is_empty() {
        violations.push(Violation::EmptyDataset);
    }
    for bag in &ds.bags {
        if bag.samples.is_empty() {
            violations.push(Violation::EmptyBag { bag_id: bag.bag_id });
        }
        for id in bag.label.ids() {
            if id.0 >= ds.m {
                violations.push(Violation::LabelOutOfRange { bag_id: bag.bag_id, id: id.0, m: ds.m });
            }
        }
        for (i, s) in bag.samples.iter().enumerate() {
            check_sample(&mut violations, bag.bag_id, i, s, ds.d, ds.d_app);
        }
    }
    ValidationReport { violations }
}

pub fn validate_eval_set(es: &EvalSet) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, s) in es.queries.iter().enumerate() {
        check_sample(&mut violations, 0, i, s, es.d, es.d_app);
        if s.true_id.is_none() {
            violations.push(Violation::MissingTrueId { role: "query", index: i });
        }
    }
    for (i, s) in es.gallery.iter().enumerate() {
        check_sample(&mut violations, 1, i, s, es.d, es.d_app);
        if s.true_id.is_none() {
            violations.push(Violation::MissingTrueId { role: "gallery", index: i });
        }
    }
    for (qi, q) in es.queries.iter().enumerate() {
        let Some(id) = q.true_id else { continue };
        let matches = es.gallery.iter().filter(|g| g.true_id == Some(id)).count();
        if matches != 1 {
            violations.push(Violation::MatchCount { query: qi, matches });
        }
    }
    ValidationReport { violations }
}
