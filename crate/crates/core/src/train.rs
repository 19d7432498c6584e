//! Deterministic bag-batched SGD training.
//!
//! One step: forward the batch, pick pseudo labels, evaluate the weighted
//! objective, backpropagate, take an SGD step. Batches are whole bags; the
//! bag order is reshuffled every epoch from `(seed, epoch)` alone, so a run
//! resumed from an epoch checkpoint replays the remaining epochs exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainingCheckpoint;
use crate::error::{Error, Result};
use crate::graph::{icm_solve, BagProblem, KernelConfig};
use crate::linalg::Matrix;
use crate::loss::{
    full_triplet_loss, pseudo_labels, supervised_cls_loss, total_loss, BatchBag, ClsTarget,
    LossInputs, LossWeights, PseudoLabels, TripletConfig,
};
use crate::net::{backward, forward, init_params, sgd_step, NetConfig, OptimizerState, Params};
use crate::types::{validate_dataset, Bag, LabelId, WeakDataset};

/// Source of the classification targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PseudoMode {
    /// `argmax_k Y^k P^k` per image (end-to-end mode).
    MaskedArgmax,
    /// Stepwise mode: per-bag ICM on the score `J`.
    Icm { max_sweeps: usize },
    /// No graphical module: the bag prior itself is the soft target.
    Prior,
}

/// Where labels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Weak,
    /// Reads every sample's `true_id`: cross-entropy plus the batch-hard
    /// triplet loss. Only for baselines on synthetic data.
    Full,
}

/// How per-sample loss gradients are combined into one step.
///
/// The losses are sums over samples. `Mean` divides the step gradient by the
/// batch's sample count so that the learning rate does not have to track
/// batch size; logged loss values stay sums either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    /// The rate is multiplied by `decay` at the start of each listed epoch.
    pub decay_epochs: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.01, decay: 0.1, decay_epochs: Vec::new() }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.decay.powi(n as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub bags_per_batch: usize,
    /// Bags larger than this are subsampled (seeded) when batched.
    pub max_bag_samples: usize,
    pub lr: LrSchedule,
    /// Learning-rate multiplier of the classifier relative to the embedder.
    pub classifier_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub kernel: KernelConfig,
    pub pseudo_mode: PseudoMode,
    pub pairwise: bool,
    pub supervision: Supervision,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            bags_per_batch: 8,
            max_bag_samples: 64,
            lr: LrSchedule::default(),
            classifier_lr_mult: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            kernel: KernelConfig::default(),
            pseudo_mode: PseudoMode::MaskedArgmax,
            pairwise: true,
            supervision: Supervision::Weak,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be >= 1".to_string());
        }
        if self.bags_per_batch == 0 {
            errs.push("bags_per_batch must be >= 1".to_string());
        }
        if self.weights.w_triplet > 0.0 && self.bags_per_batch < 2 {
            errs.push("bags_per_batch must be >= 2 when w_triplet > 0".to_string());
        }
        if self.max_bag_samples == 0 {
            errs.push("max_bag_samples must be >= 1".to_string());
        }
        let lr = &self.lr;
        if !(lr.initial.is_finite() && lr.initial >= 0.0 && lr.decay.is_finite() && lr.decay > 0.0) {
            errs.push(format!("invalid learning-rate schedule {lr:?}"));
        }
        if !(self.classifier_lr_mult.is_finite() && self.classifier_lr_mult >= 0.0) {
            errs.push("classifier_lr_mult must be finite and >= 0".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push("weight_decay must be finite and >= 0".to_string());
        }
        if !self.triplet.margin.is_finite() || self.triplet.margin < 0.0 {
            errs.push("triplet margin must be finite and >= 0".to_string());
        }
        if let PseudoMode::Icm { max_sweeps: 0 } = self.pseudo_mode {
            errs.push("icm max_sweeps must be >= 1".to_string());
        }
        for r in [self.weights.validate(), self.kernel.validate()] {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// A forward-ready batch of whole bags.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Matrix,
    pub appearance: Matrix,
    pub bags: Vec<BatchBag>,
    /// True ids, present only when every sample carries one.
    pub true_ids: Option<Vec<LabelId>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.input.rows() == 0
    }

    /// Stacks bags, subsampling any bag longer than `max_bag_samples`
    /// (the kept samples stay in their original order).
    pub fn from_bags(bags: &[&Bag], m: usize, max_bag_samples: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut x = Vec::new();
        let mut app = Vec::new();
        let mut out = Vec::with_capacity(bags.len());
        let mut ids = Vec::new();
        let mut start = 0;
        let (mut d, mut d_app) = (0, 0);
        for bag in bags {
            let mut keep: Vec<usize> = (0..bag.samples.len()).collect();
            if keep.len() > max_bag_samples {
                keep.shuffle(rng);
                keep.truncate(max_bag_samples);
                keep.sort_unstable();
            }
            for &i in &keep {
                let s = &bag.samples[i];
                d = s.x.len();
                d_app = s.appearance.len();
                x.extend_from_slice(&s.x);
                app.extend_from_slice(&s.appearance);
                ids.push(s.true_id);
            }
            out.push(BatchBag::new(start..start + keep.len(), bag.label.clone(), m)?);
            start += keep.len();
        }
        if start == 0 {
            return Err(Error::InvalidBag("empty batch".into()));
        }
        Ok(Self {
            input: Matrix::from_vec(start, d, x)?,
            appearance: Matrix::from_vec(start, d_app, app)?,
            bags: out,
            true_ids: ids.into_iter().collect(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub l_total: f64,
    pub l_cls: f64,
    pub l_graph: f64,
    pub l_unary: f64,
    pub l_pair: f64,
    pub l_tri: f64,
    pub grad_norm: f64,
    pub violations: usize,
}

pub const METRICS_HEADER: &str = "epoch,step,l_total,l_cls,l_graph,l_unary,l_pair,l_tri,grad_norm,violations";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.l_total,
            self.l_cls,
            self.l_graph,
            self.l_unary,
            self.l_pair,
            self.l_tri,
            self.grad_norm,
            self.violations
        )
    }
}

pub fn write_metrics_csv<W: Write>(w: &mut W, metrics: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(w, "{}", m.csv_row())?;
    }
    Ok(())
}

fn icm_pseudo_labels(batch: &Batch, probs: &Matrix, kernel: &KernelConfig, max_sweeps: usize) -> Result<PseudoLabels> {
    let mut labels = vec![LabelId(0); probs.rows()];
    for bag in &batch.bags {
        let rows: Vec<&[f64]> = bag.range.clone().map(|i| probs.row(i)).collect();
        let app: Vec<&[f64]> = bag.range.clone().map(|i| batch.appearance.row(i)).collect();
        let problem = BagProblem::new(&bag.label, &bag.prior, rows, &app, kernel)?;
        let result = icm_solve(&problem, max_sweeps)?;
        for (i, y) in bag.range.clone().zip(result.assignment.labels) {
            labels[i] = y;
        }
    }
    Ok(PseudoLabels { labels })
}

/// Loss value and parameter gradient for one batch, without updating anything.
pub fn batch_gradient(params: &Params, batch: &Batch, config: &TrainConfig) -> Result<(StepMetrics, Params)> {
    let out = forward(params, &batch.input)?;
    let mut metrics = StepMetrics::default();
    let (grad_logits, grad_embeddings) = match config.supervision {
        Supervision::Full => {
            let ids = batch
                .true_ids
                .as_ref()
                .ok_or_else(|| Error::Config("full supervision needs true ids on every sample".into()))?;
            let w = &config.weights;
            let mut gl = Matrix::zeros(out.probs.rows(), out.probs.cols());
            let mut ge = Matrix::zeros(out.embeddings.rows(), out.embeddings.cols());
            if w.w_cls > 0.0 {
                let cls = supervised_cls_loss(&out.probs, ids)?;
                metrics.l_cls = cls.value;
                metrics.l_total += w.w_cls * cls.value;
                gl.add_scaled(w.w_cls, &cls.grad);
            }
            if w.w_triplet > 0.0 {
                let tri = full_triplet_loss(&out.embeddings, ids, &config.triplet)?;
                metrics.l_tri = tri.value;
                metrics.l_total += w.w_triplet * tri.value;
                ge.add_scaled(w.w_triplet, &tri.grad);
            }
            (gl, ge)
        }
        Supervision::Weak => {
            let pseudo = match config.pseudo_mode {
                PseudoMode::MaskedArgmax => Some(pseudo_labels(&batch.bags, &out.probs)),
                PseudoMode::Icm { max_sweeps } => {
                    Some(icm_pseudo_labels(batch, &out.probs, &config.kernel, max_sweeps)?)
                }
                PseudoMode::Prior => None,
            };
            let cls_target = match &pseudo {
                Some(p) => ClsTarget::Pseudo(p),
                None => ClsTarget::Prior,
            };
            if let Some(p) = &pseudo {
                metrics.violations += p.violations(&batch.bags);
            }
            let inputs = LossInputs {
                bags: &batch.bags,
                probs: &out.probs,
                embeddings: &out.embeddings,
                appearance: &batch.appearance,
                kernel: &config.kernel,
                triplet: &config.triplet,
                cls_target,
                pairwise: config.pairwise,
            };
            let t = total_loss(&inputs, &config.weights)?;
            if config.weights.w_graph > 0.0 {
                metrics.violations += pseudo_labels(&batch.bags, &out.probs).violations(&batch.bags);
            }
            metrics.l_total = t.value;
            metrics.l_cls = t.cls;
            metrics.l_graph = t.graph;
            metrics.l_unary = t.unary;
            metrics.l_pair = t.pairwise;
            metrics.l_tri = t.triplet;
            (t.grad_logits, t.grad_embeddings)
        }
    };
    let mut grads = backward(params, &out.trace, &grad_embeddings, &grad_logits)?;
    if config.reduction == Reduction::Mean && !batch.is_empty() {
        grads.scale(1.0 / batch.len() as f64);
    }
    metrics.grad_norm = grads.norm();
    if !metrics.l_total.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "loss became non-finite: total={} cls={} graph={} unary={} pair={} tri={} grad_norm={} param_norm={} batch_size={}",
            metrics.l_total,
            metrics.l_cls,
            metrics.l_graph,
            metrics.l_unary,
            metrics.l_pair,
            metrics.l_tri,
            metrics.grad_norm,
            params.norm(),
            batch.len()
        )));
    }
    Ok((metrics, grads))
}

pub fn train_step(
    params: &mut Params,
    state: &mut OptimizerState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let (metrics, grads) = batch_gradient(params, batch, config)?;
    if metrics.violations > 0 {
        return Err(Error::Invariant(format!(
            "{} pseudo labels fell outside their bag",
            metrics.violations
        )));
    }
    sgd_step(params, &grads, state)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_cls: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub config: NetConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> TrainingCheckpoint {
        TrainingCheckpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epochs.last().map_or(0, |e| e.epoch as u64 + 1),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write `epoch_{e}.ckpt` and `last.ckpt` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved state instead of a fresh initialization.
    pub resume: Option<TrainingCheckpoint>,
    /// Stop after this many epochs in total, even if `config.epochs` is larger.
    pub stop_after: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.ckpt"))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch as u64);
    rng
}

pub fn train_run(
    data: &WeakDataset,
    net: &NetConfig,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    validate_dataset(data).into_result()?;
    if net.d_in != data.d || net.m != data.m {
        return Err(Error::Config(format!(
            "network (d_in={}, m={}) does not match dataset (d={}, m={})",
            net.d_in, net.m, data.d, data.m
        )));
    }
    let (mut params, mut state, first_epoch) = match &options.resume {
        Some(ck) => {
            if &ck.config != net {
                return Err(Error::Config("checkpoint network differs from the requested one".into()));
            }
            (ck.params.clone(), ck.optimizer.clone(), ck.epoch as usize)
        }
        None => {
            let params = init_params(net, config.seed)?;
            let mut state = OptimizerState::new(&params, config.lr.initial, config.momentum, config.weight_decay);
            *state.lr_multipliers.last_mut().expect("classifier group") = config.classifier_lr_mult;
            (params, state, 0)
        }
    };
    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let last_epoch = options.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    let steps_per_epoch = data.bags.len().div_ceil(config.bags_per_batch);
    for epoch in first_epoch..last_epoch {
        state.lr = config.lr.lr_at(epoch);
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..data.bags.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_cls, mut steps) = (0.0, 0.0, 0);
        for (b, chunk) in order.chunks(config.bags_per_batch).enumerate() {
            let bags: Vec<&Bag> = chunk.iter().map(|&i| &data.bags[i]).collect();
            let batch = Batch::from_bags(&bags, data.m, config.max_bag_samples, &mut rng)?;
            let mut m = train_step(&mut params, &mut state, &batch, config)?;
            m.epoch = epoch;
            m.step = epoch * steps_per_epoch + b;
            sum_total += m.l_total;
            sum_cls += m.l_cls;
            steps += 1;
            metrics.push(m);
        }
        epochs.push(EpochSummary {
            epoch,
            lr: state.lr,
            steps,
            mean_total: sum_total / steps as f64,
            mean_cls: sum_cls / steps as f64,
        });
        if let Some(dir) = &options.checkpoint_dir {
            let ck = TrainingCheckpoint {
                config: net.clone(),
                params: params.clone(),
                optimizer: state.clone(),
                epoch: epoch as u64 + 1,
            };
            ck.save(&checkpoint_path(dir, epoch))?;
            ck.save(&dir.join("last.ckpt"))?;
        }
    }
    Ok(TrainOutcome { config: net.clone(), params, optimizer: state, metrics, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, BagPolicy, GenConfig};

    fn data(k: usize) -> WeakDataset {
        generate(&GenConfig {
            m: 8,
            d: 6,
            images_per_id: 8,
            ids_per_bag: BagPolicy::Fixed { k },
            gallery_distractors: 0,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    fn net() -> NetConfig {
        NetConfig::new(6, vec![12], 5, 8)
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 2, bags_per_batch: 4, ..Default::default() }
    }

    #[test]
    fn lr_schedule_steps_down() {
        let s = LrSchedule { initial: 0.1, decay: 0.1, decay_epochs: vec![3, 6] };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(2), 0.1);
        assert!((s.lr_at(3) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { bags_per_batch: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            bags_per_batch: 1,
            weights: LossWeights { w_cls: 1.0, w_graph: 0.5, w_triplet: 0.0 },
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let ds = data(2);
        let params0 = init_params(&net(), 1).unwrap();
        let mut params = params0.clone();
        let mut state = OptimizerState::new(&params, 0.0, 0.9, 5e-4);
        let bags: Vec<&Bag> = ds.bags.iter().take(4).collect();
        let mut rng = epoch_rng(0, 0);
        let batch = Batch::from_bags(&bags, ds.m, 64, &mut rng).unwrap();
        let m = train_step(&mut params, &mut state, &batch, &quick()).unwrap();
        assert_eq!(params, params0);
        assert!(m.l_total > 0.0 && m.grad_norm > 0.0);
    }

    #[test]
    fn mean_reduction_divides_the_summed_gradient() {
        let ds = data(2);
        let params = init_params(&net(), 2).unwrap();
        let bags: Vec<&Bag> = ds.bags.iter().take(4).collect();
        let batch = Batch::from_bags(&bags, ds.m, 64, &mut epoch_rng(0, 0)).unwrap();
        let (ms, gs) = batch_gradient(&params, &batch, &TrainConfig { reduction: Reduction::Sum, ..quick() }).unwrap();
        let (mm, gm) = batch_gradient(&params, &batch, &TrainConfig { reduction: Reduction::Mean, ..quick() }).unwrap();
        assert_eq!(ms.l_total, mm.l_total);
        let mut scaled = gs.clone();
        scaled.scale(1.0 / batch.len() as f64);
        for (a, b) in scaled.tensors().iter().zip(gm.tensors()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn oversized_bags_are_subsampled_in_order() {
        let ds = data(3);
        let bag = &ds.bags[0];
        let mut rng = epoch_rng(0, 0);
        let batch = Batch::from_bags(&[bag], ds.m, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.bags[0].label, bag.label);
        let rows: Vec<usize> = (0..2)
            .map(|r| bag.samples.iter().position(|s| s.x.as_slice() == batch.input.row(r)).unwrap())
            .collect();
        assert!(rows[0] < rows[1]);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let ds = data(2);
        let cfg = TrainConfig { epochs: 3, ..quick() };
        let a = train_run(&ds, &net(), &cfg, &RunOptions::default()).unwrap();
        let b = train_run(&ds, &net(), &cfg, &RunOptions::default()).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { checkpoint_dir: Some(dir.path().into()), stop_after: Some(1), ..Default::default() };
        let first = train_run(&ds, &net(), &cfg, &opts).unwrap();
        assert_eq!(first.epochs.len(), 1);
        let ck = TrainingCheckpoint::load(&checkpoint_path(dir.path(), 0)).unwrap();
        assert_eq!(ck.epoch, 1);
        let resumed = train_run(&ds, &net(), &cfg, &RunOptions { resume: Some(ck), ..Default::default() }).unwrap();
        assert_eq!(resumed.params, a.params);
        assert_eq!(resumed.optimizer, a.optimizer);
        assert_eq!(&a.metrics[first.metrics.len()..], resumed.metrics.as_slice());
    }

    #[test]
    fn every_pseudo_mode_trains_without_violations() {
        let ds = data(3);
        for mode in [PseudoMode::MaskedArgmax, PseudoMode::Icm { max_sweeps: 5 }, PseudoMode::Prior] {
            let cfg = TrainConfig { pseudo_mode: mode, ..quick() };
            let out = train_run(&ds, &net(), &cfg, &RunOptions::default()).unwrap();
            assert!(out.metrics.iter().all(|m| m.violations == 0 && m.l_total.is_finite()), "{mode:?}");
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let ds = data(2);
        let out = train_run(&ds, &net(), &quick(), &RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &out.metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.count(), out.metrics.len());
    }

    #[test]
    fn full_supervision_requires_true_ids() {
        let mut ds = data(1);
        ds.bags[0].samples[0].true_id = None;
        let cfg = TrainConfig { supervision: Supervision::Full, ..quick() };
        assert!(train_run(&ds, &net(), &cfg, &RunOptions::default()).is_err());
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let ds = data(2);
        let wrong = NetConfig::new(5, vec![], 4, 8);
        assert!(matches!(train_run(&ds, &wrong, &quick(), &RunOptions::default()), Err(Error::Config(_))));
    }
}
