//! End-to-end finite-difference verification of every loss through the network.
//!
//! Each instance is a small random net plus a batch of random bags. The
//! analytic parameter gradient (loss backward, then net backward) is compared
//! elementwise against central differences. Instances where a probe changes a
//! discrete choice (leaky-ReLU sign, pseudo label, triplet partner or hinge
//! state) are not smooth there; they are discarded and resampled.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::KernelConfig;
use crate::linalg::Matrix;
use crate::loss::{
    cls_loss, full_triplet_loss, graph_loss, pairwise_loss, pseudo_labels, total_loss, unary_loss,
    weak_triplet_loss, sample_priors, BatchBag, ClsTarget, LossInputs, LossWeights, PseudoLabels,
    Selections, TripletConfig,
};
use crate::net::{activation_pattern, backward, forward, init_params, NetConfig, Params};
use crate::types::{LabelId, LabelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cls,
    Unary,
    Pairwise,
    Graph,
    FullTriplet,
    WeakTriplet,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Cls,
        LossKind::Unary,
        LossKind::Pairwise,
        LossKind::Graph,
        LossKind::FullTriplet,
        LossKind::WeakTriplet,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cls => "cls_loss",
            LossKind::Unary => "unary_loss",
            LossKind::Pairwise => "pairwise_loss",
            LossKind::Graph => "graph_loss",
            LossKind::FullTriplet => "full_triplet_loss",
            LossKind::WeakTriplet => "weak_triplet_loss",
            LossKind::Total => "total_loss",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().trim_end_matches("_loss") == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, scaled by `max(1, |loss|)`.
    /// Central differences cannot resolve gradient entries below about
    /// `ulp(loss) / h`, so exact zeros are compared against this floor.
    pub floor: f64,
    pub seed: u64,
    /// Give up after this many discarded instances per loss.
    pub max_resamples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { instances: 20, h: 1e-5, tolerance: 1e-4, floor: 1e-6, seed: 0, max_resamples: 200 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub instances: usize,
    pub resampled: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} instances={} resampled={} max_rel_err={:.3e} {}",
            self.kind.name(),
            self.instances,
            self.resampled,
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

struct Instance {
    config: NetConfig,
    params: Params,
    input: Matrix,
    appearance: Matrix,
    bags: Vec<BatchBag>,
    true_labels: Vec<LabelId>,
}

fn random_instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 6;
    let config = NetConfig::new(5, vec![7, 6], 4, m);
    let params = init_params(&config, rng.random())?;
    let n_bags = 4;
    let mut bags = Vec::new();
    let mut true_labels = Vec::new();
    let mut start = 0;
    for b in 0..n_bags {
        // bags 0..2 draw from ids {0,1,2}, bags 2..4 from {3,4,5}, so every batch
        // has both overlapping and disjoint bag pairs
        let pool: Vec<usize> = if b < 2 { vec![0, 1, 2] } else { vec![3, 4, 5] };
        let n_ids = rng.random_range(1..=3);
        let ids: Vec<usize> = rand::seq::index::sample(&mut rng, 3, n_ids).iter().map(|i| pool[i]).collect();
        let size = rng.random_range(2..=4).max(n_ids);
        let mut members: Vec<LabelId> = ids.iter().map(|&i| LabelId(i)).collect();
        while members.len() < size {
            members.push(LabelId(ids[rng.random_range(0..ids.len())]));
        }
        let label = LabelSet::summarize(members.iter().copied())?;
        bags.push(BatchBag::new(start..start + size, label, m)?);
        true_labels.extend(members);
        start += size;
    }
    let mut normal = |rows, cols| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let input = normal(start, config.d_in)?;
    let appearance = normal(start, 3)?;
    Ok(Instance { config, params, input, appearance, bags, true_labels })
}

struct Evaluation {
    value: f64,
    grads: Params,
    pattern: Vec<bool>,
    selections: Selections,
}

fn evaluate(
    kind: LossKind,
    inst: &Instance,
    params: &Params,
    fixed_pseudo: &PseudoLabels,
) -> Result<Evaluation> {
    let out = forward(params, &inst.input)?;
    let kernel = KernelConfig::default();
    let triplet = TripletConfig::default();
    let n = out.probs.rows();
    let zero_logits = Matrix::zeros(n, out.probs.cols());
    let zero_embed = Matrix::zeros(n, out.embeddings.cols());
    let mut selections = Selections::default();
    let (value, gl, ge) = match kind {
        LossKind::Cls => {
            let l = cls_loss(&inst.bags, &out.probs, fixed_pseudo)?;
            (l.value, l.grad, zero_embed)
        }
        LossKind::Unary => {
            selections.pseudo = pseudo_labels(&inst.bags, &out.probs).labels;
            let l = unary_loss(&inst.bags, &out.probs);
            (l.value, l.grad, zero_embed)
        }
        LossKind::Pairwise => {
            let l = pairwise_loss(&inst.bags, &out.probs, &inst.appearance, &kernel)?;
            (l.value, l.grad, zero_embed)
        }
        LossKind::Graph => {
            selections.pseudo = pseudo_labels(&inst.bags, &out.probs).labels;
            let l = graph_loss(&inst.bags, &out.probs, &inst.appearance, &kernel)?.total;
            (l.value, l.grad, zero_embed)
        }
        LossKind::FullTriplet => {
            let t = full_triplet_loss(&out.embeddings, &inst.true_labels, &triplet)?;
            selections.triplet = t.picks;
            (t.value, zero_logits, t.grad)
        }
        LossKind::WeakTriplet => {
            let t = weak_triplet_loss(&out.embeddings, &sample_priors(&inst.bags), &triplet)?;
            selections.triplet = t.picks;
            (t.value, zero_logits, t.grad)
        }
        LossKind::Total => {
            let inputs = LossInputs {
                bags: &inst.bags,
                probs: &out.probs,
                embeddings: &out.embeddings,
                appearance: &inst.appearance,
                kernel: &kernel,
                triplet: &triplet,
                cls_target: ClsTarget::Pseudo(fixed_pseudo),
                pairwise: true,
            };
            let t = total_loss(&inputs, &LossWeights { w_cls: 1.0, w_graph: 0.5, w_triplet: 0.5 })?;
            selections = t.selections;
            (t.value, t.grad_logits, t.grad_embeddings)
        }
    };
    let grads = backward(params, &out.trace, &ge, &gl)?;
    Ok(Evaluation { value, grads, pattern: activation_pattern(&out.trace), selections })
}

/// Max relative error over all parameters, or `None` if a probe left the
/// smooth piece containing the base point.
fn check_instance(kind: LossKind, inst: &Instance, cfg: &GradCheckConfig) -> Result<Option<f64>> {
    let base_out = forward(&inst.params, &inst.input)?;
    let pseudo = pseudo_labels(&inst.bags, &base_out.probs);
    let base = evaluate(kind, inst, &inst.params, &pseudo)?;
    if kind == LossKind::FullTriplet || kind == LossKind::WeakTriplet || kind == LossKind::Total {
        // an all-inactive hinge has zero gradient and checks nothing
        if base.selections.triplet.iter().flatten().all(|p| !p.active) {
            return Ok(None);
        }
    }
    let analytic: Vec<f64> = base.grads.tensors().into_iter().flatten().copied().collect();
    let mut worst: f64 = 0.0;
    let mut probe = inst.params.clone();
    let mut flat = 0;
    let lens: Vec<usize> = inst.params.tensors().iter().map(|t| t.len()).collect();
    for (t, &len) in lens.iter().enumerate() {
        for e in 0..len {
            let orig = probe.tensors()[t][e];
            probe.tensors_mut()[t][e] = orig + cfg.h;
            let plus = evaluate(kind, inst, &probe, &pseudo)?;
            probe.tensors_mut()[t][e] = orig - cfg.h;
            let minus = evaluate(kind, inst, &probe, &pseudo)?;
            probe.tensors_mut()[t][e] = orig;
            for side in [&plus, &minus] {
                if side.pattern != base.pattern || side.selections != base.selections {
                    return Ok(None);
                }
            }
            let numeric = (plus.value - minus.value) / (2.0 * cfg.h);
            let a = analytic[flat];
            let floor = cfg.floor * base.value.abs().max(1.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("{kind}: relative error at parameter {flat}")));
            }
            worst = worst.max(rel);
            flat += 1;
        }
    }
    Ok(Some(worst))
}

pub fn grad_check(kind: LossKind, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut resampled = 0;
    let mut seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ kind as u64;
    while done < cfg.instances {
        if resampled > cfg.max_resamples {
            return Err(Error::Invariant(format!(
                "{kind}: more than {} instances hit a selection boundary",
                cfg.max_resamples
            )));
        }
        let inst = random_instance(seed)?;
        seed = seed.wrapping_add(1);
        debug_assert!(inst.config.validate().is_ok());
        match check_instance(kind, &inst, cfg)? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => resampled += 1,
        }
    }
    Ok(GradCheckReport {
        kind,
        instances: done,
        resampled,
        max_rel_error: worst,
        passed: worst < cfg.tolerance,
    })
}

pub fn grad_check_all(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    LossKind::ALL.iter().map(|k| grad_check(*k, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert_eq!("weak_triplet".parse::<LossKind>().unwrap(), LossKind::WeakTriplet);
        assert!("focal".parse::<LossKind>().is_err());
    }

    #[test]
    fn instances_have_overlapping_and_disjoint_bags() {
        let inst = random_instance(3).unwrap();
        assert!(inst.bags[0].label.intersects(&inst.bags[1].label));
        assert!(!inst.bags[0].label.intersects(&inst.bags[3].label));
        for (bag, i) in inst.bags.iter().flat_map(|b| b.range.clone().map(move |i| (b, i))) {
            assert!(bag.label.contains(inst.true_labels[i]));
        }
    }

    #[test]
    fn every_loss_passes_on_a_few_instances() {
        let cfg = GradCheckConfig { instances: 3, ..Default::default() };
        for r in grad_check_all(&cfg).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // flipping the sign of the analytic result must blow the tolerance
        let inst = random_instance(1).unwrap();
        let out = forward(&inst.params, &inst.input).unwrap();
        let pseudo = pseudo_labels(&inst.bags, &out.probs);
        let base = evaluate(LossKind::Cls, &inst, &inst.params, &pseudo).unwrap();
        let mut probe = inst.params.clone();
        let h = 1e-5;
        let g = base.grads.classifier.get(0, 0);
        let orig = probe.classifier.get(0, 0);
        probe.classifier.set(0, 0, orig + h);
        let p = evaluate(LossKind::Cls, &inst, &probe, &pseudo).unwrap().value;
        probe.classifier.set(0, 0, orig - h);
        let q = evaluate(LossKind::Cls, &inst, &probe, &pseudo).unwrap().value;
        let numeric = (p - q) / (2.0 * h);
        assert!((g - numeric).abs() < 1e-6);
        assert!((-g - numeric).abs() > 1e-4 * numeric.abs());
    }
}
