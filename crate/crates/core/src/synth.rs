//! Seeded synthetic bag datasets.
//!
//! Identities are Gaussian clusters. Each image is its identity's center plus
//! isotropic noise plus one of a few per-view offsets. Training images are
//! packed into bags whose label is the set of identities inside; every
//! identity also contributes one query (view 0) and one gallery match (another
//! view), and the gallery is padded with single-image distractor identities.
//!
//! Feature values and bag structure come from separate generator streams,
//! and noise is drawn at unit scale then multiplied by `noise_sigma`, so
//! changing the noise level never changes which image lands in which bag.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Bag, EvalSet, LabelId, LabelSet, Sample, WeakDataset};

const FEATURE_STREAM: u64 = 1;
const STRUCTURE_STREAM: u64 = 2;

/// Number of identities per training bag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BagPolicy {
    Fixed { k: usize },
    /// Uniform in `[1, k_max]`, drawn per bag.
    Random { k_max: usize },
}

impl BagPolicy {
    pub fn max_ids(self) -> usize {
        match self {
            BagPolicy::Fixed { k } => k,
            BagPolicy::Random { k_max } => k_max,
        }
    }
}

impl fmt::Display for BagPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BagPolicy::Fixed { k } => write!(f, "{k}"),
            BagPolicy::Random { k_max } => write!(f, "random:{k_max}"),
        }
    }
}

/// Accepts `3`, `fixed:3`, `random` (k_max 10) or `random:8`.
impl FromStr for BagPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid ids-per-bag policy '{s}'"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        if s == "random" {
            return Ok(BagPolicy::Random { k_max: 10 });
        }
        if let Some(rest) = s.strip_prefix("random:") {
            return Ok(BagPolicy::Random { k_max: num(rest)? });
        }
        let k = num(s.strip_prefix("fixed:").unwrap_or(s))?;
        Ok(BagPolicy::Fixed { k })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub m: usize,
    pub d: usize,
    /// Images per identity: one query, one gallery match, the rest training.
    pub images_per_id: usize,
    pub ids_per_bag: BagPolicy,
    pub noise_sigma: f64,
    pub view_count: usize,
    pub view_shift_scale: f64,
    pub seed: u64,
    /// Single-image gallery identities that match no query.
    pub gallery_distractors: usize,
    /// Center norm in units of `noise_sigma` (absolute when `noise_sigma` is 0).
    pub center_scale: f64,
    /// Training images of one identity placed together in a bag.
    pub images_per_bag_id: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            m: 50,
            d: 16,
            images_per_id: 20,
            ids_per_bag: BagPolicy::Fixed { k: 2 },
            noise_sigma: 1.0,
            view_count: 4,
            view_shift_scale: 1.0,
            seed: 0,
            gallery_distractors: 100,
            center_scale: 3.0,
            images_per_bag_id: 3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.m < 2 {
            errs.push(format!("m = {} must be >= 2", self.m));
        }
        if self.d == 0 {
            errs.push("d must be >= 1".to_string());
        }
        if self.images_per_id < 3 {
            errs.push(format!(
                "images_per_id = {} must be >= 3 (query, gallery match, one training image)",
                self.images_per_id
            ));
        }
        let k = self.ids_per_bag.max_ids();
        if k == 0 {
            errs.push("ids_per_bag must be >= 1".to_string());
        }
        if k > self.m {
            errs.push(format!("ids_per_bag = {k} exceeds m = {}", self.m));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            errs.push(format!("noise_sigma = {} must be finite and >= 0", self.noise_sigma));
        }
        if self.view_count == 0 {
            errs.push("view_count must be >= 1".to_string());
        }
        if !(self.view_shift_scale.is_finite() && self.view_shift_scale >= 0.0) {
            errs.push(format!("view_shift_scale = {} must be finite and >= 0", self.view_shift_scale));
        }
        if !(self.center_scale.is_finite() && self.center_scale > 0.0) {
            errs.push(format!("center_scale = {} must be finite and > 0", self.center_scale));
        }
        if self.images_per_bag_id == 0 {
            errs.push("images_per_bag_id must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit-scale draws; the image is `center + sigma * noise + shift[view]`.
struct FeatureBank {
    centers: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
    noise: Vec<Vec<Vec<f64>>>,
    distractor_noise: Vec<Vec<f64>>,
    sigma: f64,
}

impl FeatureBank {
    fn draw(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(FEATURE_STREAM);
        let radius = cfg.center_scale * if cfg.noise_sigma > 0.0 { cfg.noise_sigma } else { 1.0 };
        let ids = cfg.m + cfg.gallery_distractors;
        let centers = (0..ids)
            .map(|_| unit_vec(&mut rng, cfg.d).into_iter().map(|x| x * radius).collect())
            .collect();
        let shifts = (0..cfg.view_count)
            .map(|_| unit_vec(&mut rng, cfg.d).into_iter().map(|x| x * cfg.view_shift_scale).collect())
            .collect();
        let noise = (0..cfg.m)
            .map(|_| (0..cfg.images_per_id).map(|_| normal_vec(&mut rng, cfg.d)).collect())
            .collect();
        let distractor_noise = (0..cfg.gallery_distractors).map(|_| normal_vec(&mut rng, cfg.d)).collect();
        Self { centers, shifts, noise, distractor_noise, sigma: cfg.noise_sigma }
    }

    fn image(&self, id: usize, noise: &[f64], view: usize) -> Sample {
        let x = self.centers[id]
            .iter()
            .zip(noise)
            .zip(&self.shifts[view])
            .map(|((c, n), s)| c + self.sigma * n + s)
            .collect();
        Sample::new(x, Some(LabelId(id)))
    }
}

/// Where every image goes; depends only on the seed and the counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// `(id, image index, view)` per training sample, grouped by bag.
    pub bags: Vec<Vec<(usize, usize, usize)>>,
    pub queries: Vec<(usize, usize, usize)>,
    /// `(id, image index, view)`; distractors use image index 0 of their own noise bank.
    pub gallery: Vec<(usize, usize, usize)>,
}

fn layout(cfg: &GenConfig) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STRUCTURE_STREAM);
    let other_view = |rng: &mut ChaCha8Rng| {
        if cfg.view_count > 1 {
            rng.random_range(1..cfg.view_count)
        } else {
            0
        }
    };

    let mut queries = Vec::with_capacity(cfg.m);
    let mut gallery = Vec::with_capacity(cfg.m + cfg.gallery_distractors);
    let mut chunks: Vec<Vec<Vec<(usize, usize, usize)>>> = Vec::with_capacity(cfg.m);
    for id in 0..cfg.m {
        let mut order: Vec<usize> = (0..cfg.images_per_id).collect();
        order.shuffle(&mut rng);
        queries.push((id, order[0], 0));
        gallery.push((id, order[1], other_view(&mut rng)));
        let train: Vec<(usize, usize, usize)> = order[2..]
            .iter()
            .map(|&j| (id, j, rng.random_range(0..cfg.view_count)))
            .collect();
        let mut id_chunks: Vec<Vec<_>> = train.chunks(cfg.images_per_bag_id).map(|c| c.to_vec()).collect();
        id_chunks.reverse(); // pop from the back in original order
        chunks.push(id_chunks);
    }
    for k in 0..cfg.gallery_distractors {
        gallery.push((cfg.m + k, 0, other_view(&mut rng)));
    }
    gallery.shuffle(&mut rng);

    let mut bags = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..cfg.m).filter(|&id| !chunks[id].is_empty()).collect();
        if open.is_empty() {
            break;
        }
        let k = match cfg.ids_per_bag {
            BagPolicy::Fixed { k } => k,
            BagPolicy::Random { k_max } => rng.random_range(1..=k_max),
        };
        // shuffle first so equal remaining counts break ties at random, then
        // favour identities with the most material left
        open.shuffle(&mut rng);
        open.sort_by_key(|&id| std::cmp::Reverse(chunks[id].len()));
        let mut bag = Vec::new();
        for &id in open.iter().take(k) {
            bag.extend(chunks[id].pop().expect("open ids have chunks"));
        }
        bag.shuffle(&mut rng);
        bags.push(bag);
    }
    Layout { bags, queries, gallery }
}

/// Builds the training bags and the evaluation set. Deterministic in `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<(WeakDataset, EvalSet)> {
    cfg.validate()?;
    let bank = FeatureBank::draw(cfg);
    let lay = layout(cfg);
    let image = |&(id, j, view): &(usize, usize, usize)| {
        if id < cfg.m {
            bank.image(id, &bank.noise[id][j], view)
        } else {
            bank.image(id, &bank.distractor_noise[id - cfg.m], view)
        }
    };
    let bags = lay
        .bags
        .iter()
        .enumerate()
        .map(|(b, members)| {
            let samples: Vec<Sample> = members.iter().map(image).collect();
            let label = LabelSet::summarize(members.iter().map(|m| LabelId(m.0)))?;
            Ok(Bag { bag_id: b as u64, samples, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let train = WeakDataset { m: cfg.m, d: cfg.d, d_app: cfg.d, bags };
    let eval = EvalSet {
        d: cfg.d,
        d_app: cfg.d,
        queries: lay.queries.iter().map(image).collect(),
        gallery: lay.gallery.iter().map(image).collect(),
    };
    Ok((train, eval))
}

/// Image placement without feature values, for structural checks.
pub fn generate_layout(cfg: &GenConfig) -> Result<Layout> {
    cfg.validate()?;
    Ok(layout(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{validate_dataset, validate_eval_set};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn small(policy: BagPolicy) -> GenConfig {
        GenConfig {
            m: 10,
            d: 4,
            images_per_id: 8,
            ids_per_bag: policy,
            gallery_distractors: 12,
            ..Default::default()
        }
    }

    #[test]
    fn singleton_policy_gives_single_id_bags() {
        let (train, _) = generate(&small(BagPolicy::Fixed { k: 1 })).unwrap();
        assert!(train.bags.iter().all(|b| b.label.len() == 1));
    }

    #[test]
    fn fixed_policy_is_respected_while_ids_remain() {
        let (train, _) = generate(&small(BagPolicy::Fixed { k: 3 })).unwrap();
        assert!(train.bags.iter().all(|b| b.label.len() <= 3));
        let full = train.bags.iter().filter(|b| b.label.len() == 3).count();
        assert!(full * 2 >= train.bags.len(), "{full} of {}", train.bags.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(BagPolicy::Random { k_max: 4 });
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GenConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn eval_protocol() {
        let cfg = GenConfig { m: 20, gallery_distractors: 50, ..small(BagPolicy::Fixed { k: 2 }) };
        let (_, eval) = generate(&cfg).unwrap();
        assert!(validate_eval_set(&eval).is_valid());
        assert_eq!(eval.queries.len(), 20);
        for q in &eval.queries {
            let matches = eval.gallery.iter().filter(|g| g.true_id == q.true_id).count();
            assert_eq!(matches, 1);
            assert!(eval.gallery.len() - matches >= 50);
        }
        let query_ids: BTreeSet<_> = eval.queries.iter().map(|q| q.true_id.unwrap()).collect();
        let match_ids: BTreeSet<_> = eval
            .gallery
            .iter()
            .filter_map(|g| g.true_id)
            .filter(|id| query_ids.contains(id))
            .collect();
        assert_eq!(query_ids, match_ids);
    }

    #[test]
    fn every_training_image_is_used_once() {
        let cfg = small(BagPolicy::Fixed { k: 2 });
        let lay = generate_layout(&cfg).unwrap();
        let mut seen = BTreeSet::new();
        for item in lay.bags.iter().flatten().chain(&lay.queries).chain(lay.gallery.iter().filter(|g| g.0 < cfg.m)) {
            assert!(seen.insert((item.0, item.1)), "{item:?} used twice");
        }
        assert_eq!(seen.len(), cfg.m * cfg.images_per_id);
    }

    #[test]
    fn zero_noise_images_sit_on_shifted_centers() {
        let cfg = GenConfig { noise_sigma: 0.0, view_count: 1, view_shift_scale: 0.0, ..small(BagPolicy::Fixed { k: 1 }) };
        let (train, _) = generate(&cfg).unwrap();
        for bag in &train.bags {
            let first = &bag.samples[0].x;
            assert!(bag.samples.iter().all(|s| &s.x == first));
            let norm = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - cfg.center_scale).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&GenConfig { ids_per_bag: BagPolicy::Fixed { k: 11 }, ..small(BagPolicy::Fixed { k: 1 }) }).is_err());
        assert!(generate(&GenConfig { m: 1, ..Default::default() }).is_err());
        assert!(generate(&GenConfig { images_per_id: 2, ..Default::default() }).is_err());
        assert!(generate(&GenConfig { noise_sigma: -1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("3".parse::<BagPolicy>().unwrap(), BagPolicy::Fixed { k: 3 });
        assert_eq!("fixed:2".parse::<BagPolicy>().unwrap(), BagPolicy::Fixed { k: 2 });
        assert_eq!("random".parse::<BagPolicy>().unwrap(), BagPolicy::Random { k_max: 10 });
        assert_eq!("random:4".parse::<BagPolicy>().unwrap(), BagPolicy::Random { k_max: 4 });
        assert!("many".parse::<BagPolicy>().is_err());
        for p in [BagPolicy::Fixed { k: 5 }, BagPolicy::Random { k_max: 7 }] {
            assert_eq!(p.to_string().parse::<BagPolicy>().unwrap(), p);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bag_labels_are_summaries_of_true_ids(seed in any::<u64>(), k_max in 1usize..6) {
            let cfg = GenConfig { seed, ..small(BagPolicy::Random { k_max }) };
            let (train, _) = generate(&cfg).unwrap();
            prop_assert!(validate_dataset(&train).is_valid());
            for bag in &train.bags {
                let truth = LabelSet::summarize(bag.samples.iter().map(|s| s.true_id.unwrap())).unwrap();
                prop_assert_eq!(&bag.label, &truth);
                prop_assert!(bag.label.len() <= k_max);
            }
        }

        #[test]
        fn noise_level_leaves_structure_unchanged(seed in any::<u64>(), s1 in 0.1f64..3.0, s2 in 0.1f64..3.0) {
            let a = GenConfig { seed, noise_sigma: s1, ..small(BagPolicy::Random { k_max: 3 }) };
            let b = GenConfig { noise_sigma: s2, ..a.clone() };
            let (ta, ea) = generate(&a).unwrap();
            let (tb, eb) = generate(&b).unwrap();
            prop_assert_eq!(ta.bags.len(), tb.bags.len());
            for (x, y) in ta.bags.iter().zip(&tb.bags) {
                prop_assert_eq!(&x.label, &y.label);
                let ix: Vec<_> = x.samples.iter().map(|s| s.true_id).collect();
                let iy: Vec<_> = y.samples.iter().map(|s| s.true_id).collect();
                prop_assert_eq!(ix, iy);
            }
            let gx: Vec<_> = ea.gallery.iter().map(|s| s.true_id).collect();
            let gy: Vec<_> = eb.gallery.iter().map(|s| s.true_id).collect();
            prop_assert_eq!(gx, gy);
            prop_assert_eq!(generate_layout(&a).unwrap(), generate_layout(&b).unwrap());
        }
    }
}
