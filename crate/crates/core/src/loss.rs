//! Differentiable training objectives over a batch of whole bags.
//!
//! Every loss takes the softmax outputs `P` (or the embeddings `z`) of the
//! full batch and returns its value together with the gradient with respect
//! to the logits (or to `z`). Pseudo labels are treated as constants.
//!
//! - unary: `-log P_i^{ŷ_i}` with `ŷ_i = argmax_k Y^k P_i^k` over the bag's ids
//! - pairwise: `-k_ij sum_c (Y^c P_i^c) log(Y^c P_j^c + eps)` over ordered in-bag pairs
//! - graph: unary + pairwise
//! - cls: cross-entropy against supplied pseudo labels
//! - weak triplet: hinge on margin + median positive-proxy distance − min negative-proxy distance

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bag_kernel, masked_argmax, KernelConfig, LOG_EPS};
use crate::linalg::{softmax_backward, squared_distance, Matrix};
use crate::types::{LabelId, LabelSet, PriorDistribution};

/// A bag as laid out inside a batch: rows `range` of every batch matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchBag {
    pub range: Range<usize>,
    pub label: LabelSet,
    pub prior: PriorDistribution,
}

impl BatchBag {
    pub fn new(range: Range<usize>, label: LabelSet, m: usize) -> Result<Self> {
        let prior = crate::types::prior_from_bag(&label, m)?;
        Ok(Self { range, label, prior })
    }
}

/// Per-sample priors in batch order.
pub fn sample_priors(bags: &[BatchBag]) -> Vec<&PriorDistribution> {
    let mut out = Vec::new();
    for bag in bags {
        out.extend(bag.range.clone().map(|_| &bag.prior));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<LabelId>,
}

impl PseudoLabels {
    pub fn one_hot(&self, i: usize, m: usize) -> Vec<f64> {
        let mut v = vec![0.0; m];
        v[self.labels[i].0] = 1.0;
        v
    }

    /// Number of labels that fall outside their bag's label set.
    pub fn violations(&self, bags: &[BatchBag]) -> usize {
        bags.iter()
            .flat_map(|b| b.range.clone().map(move |i| (b, i)))
            .filter(|(b, i)| !b.label.contains(self.labels[*i]))
            .count()
    }
}

pub fn pseudo_labels(bags: &[BatchBag], probs: &Matrix) -> PseudoLabels {
    let mut labels = vec![LabelId(0); probs.rows()];
    for bag in bags {
        for i in bag.range.clone() {
            labels[i] = masked_argmax(&bag.label, &bag.prior, probs.row(i));
        }
    }
    PseudoLabels { labels }
}

fn hard_cross_entropy(probs: &Matrix, rows: impl Iterator<Item = (usize, LabelId)>) -> LossGrad {
    let mut value = 0.0;
    let mut grad_p = Matrix::zeros(probs.rows(), probs.cols());
    for (i, y) in rows {
        let p = probs.get(i, y.0);
        value -= (p + LOG_EPS).ln();
        grad_p.set(i, y.0, -1.0 / (p + LOG_EPS));
    }
    LossGrad { value, grad: softmax_backward(probs, &grad_p) }
}

fn bag_rows(bags: &[BatchBag]) -> impl Iterator<Item = usize> + '_ {
    bags.iter().flat_map(|b| b.range.clone())
}

pub fn unary_loss(bags: &[BatchBag], probs: &Matrix) -> LossGrad {
    let pseudo = pseudo_labels(bags, probs);
    hard_cross_entropy(probs, bag_rows(bags).map(|i| (i, pseudo.labels[i])))
}

pub fn cls_loss(bags: &[BatchBag], probs: &Matrix, pseudo: &PseudoLabels) -> Result<LossGrad> {
    if pseudo.labels.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} pseudo labels for {} samples",
            pseudo.labels.len(),
            probs.rows()
        )));
    }
    let bad = pseudo.violations(bags);
    if bad > 0 {
        return Err(Error::Invariant(format!("{bad} pseudo labels outside their bag")));
    }
    Ok(hard_cross_entropy(probs, bag_rows(bags).map(|i| (i, pseudo.labels[i]))))
}

/// Cross-entropy against caller-provided labels (the fully supervised baseline).
pub fn supervised_cls_loss(probs: &Matrix, labels: &[LabelId]) -> Result<LossGrad> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), probs.rows())));
    }
    if let Some(bad) = labels.iter().find(|l| l.0 >= probs.cols()) {
        return Err(Error::LabelOutOfRange { id: bad.0, m: probs.cols() });
    }
    Ok(hard_cross_entropy(probs, labels.iter().copied().enumerate()))
}

/// Soft cross-entropy against the bag prior, `-sum_c Y^c log(P^c + eps)`.
/// Stands in for pseudo labels when the graphical module is disabled.
pub fn prior_target_loss(bags: &[BatchBag], probs: &Matrix) -> LossGrad {
    let mut value = 0.0;
    let mut grad_p = Matrix::zeros(probs.rows(), probs.cols());
    for bag in bags {
        for i in bag.range.clone() {
            for id in bag.label.ids() {
                let y = bag.prior.get(*id);
                let p = probs.get(i, id.0);
                value -= y * (p + LOG_EPS).ln();
                grad_p.set(i, id.0, -y / (p + LOG_EPS));
            }
        }
    }
    LossGrad { value, grad: softmax_backward(probs, &grad_p) }
}

/// One directed pairwise term `-k sum_c (Y^c P_i^c) log(Y^c P_j^c + eps)`,
/// with classes outside the bag contributing exactly zero.
pub fn pairwise_term(prior: &PriorDistribution, p_i: &[f64], p_j: &[f64], k: f64) -> f64 {
    let mut s = 0.0;
    for (c, &y) in prior.as_slice().iter().enumerate() {
        if y == 0.0 {
            continue;
        }
        s += y * p_i[c] * (y * p_j[c] + LOG_EPS).ln();
    }
    -k * s
}

pub fn pairwise_loss(
    bags: &[BatchBag],
    probs: &Matrix,
    appearance: &Matrix,
    kernel: &KernelConfig,
) -> Result<LossGrad> {
    if appearance.rows() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} appearance rows for {} samples",
            appearance.rows(),
            probs.rows()
        )));
    }
    let mut value = 0.0;
    let mut grad_p = Matrix::zeros(probs.rows(), probs.cols());
    for bag in bags {
        if bag.range.len() < 2 {
            continue;
        }
        let app: Vec<&[f64]> = bag.range.clone().map(|i| appearance.row(i)).collect();
        let k = bag_kernel(&app, &kernel.sigma)?;
        let start = bag.range.start;
        for a in 0..bag.range.len() {
            for b in 0..bag.range.len() {
                if a == b {
                    continue;
                }
                let kab = k.get(a, b);
                if kab == 0.0 {
                    continue;
                }
                let (i, j) = (start + a, start + b);
                for id in bag.label.ids() {
                    let c = id.0;
                    let y = bag.prior.get(*id);
                    let pi = probs.get(i, c);
                    let inner = y * probs.get(j, c) + LOG_EPS;
                    let log_inner = inner.ln();
                    value -= kab * y * pi * log_inner;
                    let gi = grad_p.get(i, c) - kab * y * log_inner;
                    grad_p.set(i, c, gi);
                    let gj = grad_p.get(j, c) - kab * y * pi * y / inner;
                    grad_p.set(j, c, gj);
                }
            }
        }
    }
    Ok(LossGrad { value, grad: softmax_backward(probs, &grad_p) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphLoss {
    pub unary: LossGrad,
    pub pairwise: LossGrad,
    pub total: LossGrad,
}

pub fn graph_loss(
    bags: &[BatchBag],
    probs: &Matrix,
    appearance: &Matrix,
    kernel: &KernelConfig,
) -> Result<GraphLoss> {
    let unary = unary_loss(bags, probs);
    let pairwise = pairwise_loss(bags, probs, appearance, kernel)?;
    let mut grad = unary.grad.clone();
    grad.add_scaled(1.0, &pairwise.grad);
    let total = LossGrad { value: unary.value + pairwise.value, grad };
    Ok(GraphLoss { unary, pairwise, total })
}

fn default_margin() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Clamp each anchor's term at zero.
    #[serde(default = "default_true")]
    pub hinge: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: default_margin(), hinge: true }
    }
}

/// Partners chosen for one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletPick {
    pub positive: usize,
    pub negative: usize,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput {
    pub value: f64,
    /// Gradient with respect to the embeddings.
    pub grad: Matrix,
    /// `None` for anchors without a positive or without a negative.
    pub picks: Vec<Option<TripletPick>>,
    pub skipped: usize,
}

fn triplet_from_picks(
    z: &Matrix,
    config: &TripletConfig,
    select: impl Fn(usize, &[(f64, usize)], &[(f64, usize)]) -> Option<(usize, usize)>,
    partition: impl Fn(usize, usize) -> Option<bool>,
) -> TripletOutput {
    let n = z.rows();
    let mut grad = Matrix::zeros(n, z.cols());
    let mut picks = Vec::with_capacity(n);
    let mut value = 0.0;
    let mut skipped = 0;
    for k in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == k {
                continue;
            }
            match partition(k, j) {
                Some(true) => pos.push((squared_distance(z.row(k), z.row(j)), j)),
                Some(false) => neg.push((squared_distance(z.row(k), z.row(j)), j)),
                None => {}
            }
        }
        let Some((p, q)) = select(k, &pos, &neg) else {
            skipped += 1;
            picks.push(None);
            continue;
        };
        let dp = squared_distance(z.row(k), z.row(p));
        let dq = squared_distance(z.row(k), z.row(q));
        let arg = config.margin + dp - dq;
        let active = !config.hinge || arg > 0.0;
        picks.push(Some(TripletPick { positive: p, negative: q, active }));
        if !active {
            continue;
        }
        value += arg;
        for c in 0..z.cols() {
            let to_pos = 2.0 * (z.get(k, c) - z.get(p, c));
            let to_neg = 2.0 * (z.get(k, c) - z.get(q, c));
            grad.set(k, c, grad.get(k, c) + to_pos - to_neg);
            grad.set(p, c, grad.get(p, c) - to_pos);
            grad.set(q, c, grad.get(q, c) + to_neg);
        }
    }
    TripletOutput { value, grad, picks, skipped }
}

fn closest(list: &[(f64, usize)]) -> Option<usize> {
    list.iter().min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).map(|x| x.1)
}

fn farthest(list: &[(f64, usize)]) -> Option<usize> {
    // lowest index among equal maxima
    list.iter().max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1))).map(|x| x.1)
}

/// Lower median by `(distance, index)`.
pub fn lower_median(list: &[(f64, usize)]) -> Option<usize> {
    if list.is_empty() {
        return None;
    }
    let mut sorted = list.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Some(sorted[(sorted.len() - 1) / 2].1)
}

/// Batch-hard triplet loss with known labels.
pub fn full_triplet_loss(z: &Matrix, labels: &[LabelId], config: &TripletConfig) -> Result<TripletOutput> {
    if labels.len() != z.rows() {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), z.rows())));
    }
    Ok(triplet_from_picks(
        z,
        config,
        |_, pos, neg| Some((farthest(pos)?, closest(neg)?)),
        |k, j| Some(labels[k] == labels[j]),
    ))
}

/// Triplet loss with bag-overlap proxies: `Y_k · Y_j > 0` marks a positive,
/// `Y_k · Y_j = 0` a negative. The hardest positive is relaxed to the lower median.
pub fn weak_triplet_loss(
    z: &Matrix,
    priors: &[&PriorDistribution],
    config: &TripletConfig,
) -> Result<TripletOutput> {
    if priors.len() != z.rows() {
        return Err(Error::Shape(format!("{} priors for {} embeddings", priors.len(), z.rows())));
    }
    Ok(triplet_from_picks(
        z,
        config,
        |_, pos, neg| Some((lower_median(pos)?, closest(neg)?)),
        |k, j| Some(priors[k].dot(priors[j]) > 0.0),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_graph: f64,
    pub w_triplet: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_cls: 1.0, w_graph: 0.5, w_triplet: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_cls, self.w_graph, self.w_triplet];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Target of the classification term.
#[derive(Clone, Copy, Debug)]
pub enum ClsTarget<'a> {
    /// Hard pseudo labels, from the masked argmax or from the stepwise solver.
    Pseudo(&'a PseudoLabels),
    /// The bag prior itself; used when the graphical module is switched off.
    Prior,
}

#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub bags: &'a [BatchBag],
    pub probs: &'a Matrix,
    pub embeddings: &'a Matrix,
    pub appearance: &'a Matrix,
    pub kernel: &'a KernelConfig,
    pub triplet: &'a TripletConfig,
    pub cls_target: ClsTarget<'a>,
    /// Include the pairwise term in the graph loss.
    pub pairwise: bool,
}

/// Discrete choices made while evaluating the loss. Two evaluations with equal
/// selections lie on the same smooth piece of the objective.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Selections {
    pub pseudo: Vec<LabelId>,
    pub triplet: Vec<Option<TripletPick>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub cls: f64,
    pub graph: f64,
    pub unary: f64,
    pub pairwise: f64,
    pub triplet: f64,
    pub triplet_skipped: usize,
    pub grad_logits: Matrix,
    pub grad_embeddings: Matrix,
    pub selections: Selections,
}

impl TotalLoss {
    pub fn is_finite(&self) -> bool {
        [self.value, self.cls, self.graph, self.unary, self.pairwise, self.triplet]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `w_cls L_cls + w_graph L_graph + w_triplet L_weak_triplet`. Components with
/// zero weight are not evaluated and report 0.
pub fn total_loss(inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<TotalLoss> {
    weights.validate()?;
    let probs = inputs.probs;
    let mut grad_logits = Matrix::zeros(probs.rows(), probs.cols());
    let mut grad_embeddings = Matrix::zeros(inputs.embeddings.rows(), inputs.embeddings.cols());
    let mut out = TotalLoss {
        value: 0.0,
        cls: 0.0,
        graph: 0.0,
        unary: 0.0,
        pairwise: 0.0,
        triplet: 0.0,
        triplet_skipped: 0,
        grad_logits: Matrix::zeros(0, 0),
        grad_embeddings: Matrix::zeros(0, 0),
        selections: Selections::default(),
    };

    if weights.w_cls > 0.0 {
        let cls = match inputs.cls_target {
            ClsTarget::Pseudo(p) => {
                out.selections.pseudo = p.labels.clone();
                cls_loss(inputs.bags, probs, p)?
            }
            ClsTarget::Prior => prior_target_loss(inputs.bags, probs),
        };
        out.cls = cls.value;
        out.value += weights.w_cls * cls.value;
        grad_logits.add_scaled(weights.w_cls, &cls.grad);
    }

    if weights.w_graph > 0.0 {
        let unary = unary_loss(inputs.bags, probs);
        out.unary = unary.value;
        grad_logits.add_scaled(weights.w_graph, &unary.grad);
        if inputs.pairwise {
            let pair = pairwise_loss(inputs.bags, probs, inputs.appearance, inputs.kernel)?;
            out.pairwise = pair.value;
            grad_logits.add_scaled(weights.w_graph, &pair.grad);
        }
        out.graph = out.unary + out.pairwise;
        out.value += weights.w_graph * out.graph;
        let masked = pseudo_labels(inputs.bags, probs);
        if out.selections.pseudo.is_empty() {
            out.selections.pseudo = masked.labels;
        } else {
            out.selections.pseudo.extend(masked.labels);
        }
    }

    if weights.w_triplet > 0.0 {
        let priors = sample_priors(inputs.bags);
        let tri = weak_triplet_loss(inputs.embeddings, &priors, inputs.triplet)?;
        out.triplet = tri.value;
        out.triplet_skipped = tri.skipped;
        out.value += weights.w_triplet * tri.value;
        grad_embeddings.add_scaled(weights.w_triplet, &tri.grad);
        out.selections.triplet = tri.picks;
    }

    out.grad_logits = grad_logits;
    out.grad_embeddings = grad_embeddings;
    Ok(out)
}
