//! `bagreid`: generate synthetic bag data, train, evaluate, check gradients
//! and run ablation sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bagreid::graph::SigmaPolicy;
use bagreid::gradcheck::LossKind;
use bagreid::synth::BagPolicy;
use bagreid::train::{PseudoMode, Reduction, Supervision};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "bagreid", version, about = "Weakly supervised bag-labeled re-identification")]
struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic training set and eval set.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Write an untrained checkpoint sized for a training set.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        net: NetFlags,
    },
    /// Train on a bag-labeled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Rank the gallery for every query and write CMC and ranking CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10])]
        ranks: Vec<usize>,
        /// Gallery entries kept per query in rankings.csv.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Per-bag pseudo labels (masked argmax, ICM, exhaustive) and the
    /// block confusion matrix for a trained model.
    Solve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Classes per confusion block.
        #[arg(long, default_value_t = 5)]
        block_size: usize,
        #[arg(long, default_value_t = 50)]
        max_sweeps: usize,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_parser = parse_sigma)]
        sigma: Option<SigmaPolicy>,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        /// Losses to check (default: all).
        #[arg(long, value_delimiter = ',')]
        loss: Vec<LossKind>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Sweep bag sizes and component switches over several seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<u64>,
        /// Bag-size policies, e.g. `1,2,3,10,random:10`.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<BagPolicy>,
        /// Only all-on plus one component off at a time, instead of all eight.
        #[arg(long)]
        axes_only: bool,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        gen: GenFlags,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Args, Debug, Default)]
struct GenFlags {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    images_per_id: Option<usize>,
    /// `k`, `fixed:k`, `random` or `random:k_max`.
    #[arg(long)]
    ids_per_bag: Option<BagPolicy>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    view_count: Option<usize>,
    #[arg(long)]
    view_shift_scale: Option<f64>,
    #[arg(long)]
    gallery_distractors: Option<usize>,
    #[arg(long)]
    images_per_bag_id: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct NetFlags {
    /// Hidden widths, e.g. `64` or `64,32`; `none` for a linear embedder.
    #[arg(long, value_parser = parse_widths)]
    hidden: Option<Widths>,
    #[arg(long)]
    d_embed: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SupervisionArg {
    Weak,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs at which the learning rate is multiplied by the decay factor.
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    bags_per_batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    w_cls: Option<f64>,
    #[arg(long)]
    w_graph: Option<f64>,
    #[arg(long)]
    w_triplet: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// `median` or a fixed bandwidth.
    #[arg(long, value_parser = parse_sigma)]
    sigma: Option<SigmaPolicy>,
    /// `argmax`, `icm`, `icm:<sweeps>` or `prior`.
    #[arg(long, value_parser = parse_pseudo)]
    pseudo_mode: Option<PseudoMode>,
    #[arg(long)]
    no_pairwise: bool,
    #[arg(long, value_enum)]
    supervision: Option<SupervisionArg>,
    #[arg(long, value_enum)]
    reduction: Option<ReductionArg>,
}

#[derive(Clone, Debug)]
struct Widths(Vec<usize>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    if s == "none" || s.is_empty() {
        return Ok(Widths(Vec::new()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("invalid width '{t}'")))
        .collect::<Result<_, _>>()
        .map(Widths)
}

fn parse_sigma(s: &str) -> Result<SigmaPolicy, String> {
    if s == "median" {
        return Ok(SigmaPolicy::Median);
    }
    s.parse::<f64>().map(SigmaPolicy::Fixed).map_err(|_| format!("expected 'median' or a number, got '{s}'"))
}

fn parse_pseudo(s: &str) -> Result<PseudoMode, String> {
    match s {
        "argmax" | "masked_argmax" => Ok(PseudoMode::MaskedArgmax),
        "prior" => Ok(PseudoMode::Prior),
        "icm" => Ok(PseudoMode::Icm { max_sweeps: 50 }),
        _ => s
            .strip_prefix("icm:")
            .and_then(|n| n.parse().ok())
            .map(|max_sweeps| PseudoMode::Icm { max_sweeps })
            .ok_or_else(|| format!("invalid pseudo mode '{s}'")),
    }
}

impl GenFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.gen;
        set(&mut g.m, self.m);
        set(&mut g.d, self.d);
        set(&mut g.images_per_id, self.images_per_id);
        set(&mut g.ids_per_bag, self.ids_per_bag);
        set(&mut g.noise_sigma, self.noise_sigma);
        set(&mut g.center_scale, self.center_scale);
        set(&mut g.view_count, self.view_count);
        set(&mut g.view_shift_scale, self.view_shift_scale);
        set(&mut g.gallery_distractors, self.gallery_distractors);
        set(&mut g.images_per_bag_id, self.images_per_bag_id);
    }
}

impl NetFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.net.hidden, self.hidden.clone().map(|w| w.0));
        set(&mut cfg.net.d_embed, self.d_embed);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.lr.initial, self.lr);
        set(&mut t.lr.decay_epochs, self.lr_decay_epochs.clone());
        set(&mut t.bags_per_batch, self.bags_per_batch);
        set(&mut t.momentum, self.momentum);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.weights.w_cls, self.w_cls);
        set(&mut t.weights.w_graph, self.w_graph);
        set(&mut t.weights.w_triplet, self.w_triplet);
        set(&mut t.triplet.margin, self.margin);
        set(&mut t.kernel.lambda, self.lambda);
        set(&mut t.kernel.sigma, self.sigma.clone());
        set(&mut t.pseudo_mode, self.pseudo_mode);
        if self.no_pairwise {
            t.pairwise = false;
        }
        set(
            &mut t.supervision,
            self.supervision.map(|s| match s {
                SupervisionArg::Weak => Supervision::Weak,
                SupervisionArg::Full => Supervision::Full,
            }),
        );
        set(
            &mut t.reduction,
            self.reduction.map(|r| match r {
                ReductionArg::Sum => Reduction::Sum,
                ReductionArg::Mean => Reduction::Mean,
            }),
        );
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// The work itself failed (exit 2).
    Runtime(String),
    /// A check ran and did not pass (exit 3).
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl From<bagreid::Error> for Failure {
    fn from(e: bagreid::Error) -> Self {
        match e {
            bagreid::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    match cli.command {
        Command::Gen { out, gen } => {
            gen.apply(&mut cfg);
            cfg.validate().map_err(Failure::Usage)?;
            commands::gen(&cfg, &out)
        }
        Command::Init { data, out, net } => {
            net.apply(&mut cfg);
            cfg.validate().map_err(Failure::Usage)?;
            commands::init(&cfg, &data, &out)
        }
        Command::Train { data, out, resume, net, train } => {
            net.apply(&mut cfg);
            train.apply(&mut cfg);
            cfg.validate().map_err(Failure::Usage)?;
            commands::train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Eval { checkpoint, eval, out, ranks, top_k } => {
            commands::eval(&checkpoint, &eval, &out, &ranks, top_k)
        }
        Command::Solve { data, checkpoint, out, block_size, max_sweeps, lambda, sigma } => {
            set(&mut cfg.train.kernel.lambda, lambda);
            set(&mut cfg.train.kernel.sigma, sigma);
            cfg.train.kernel.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            if max_sweeps == 0 || block_size == 0 {
                return Err(Failure::Usage("max-sweeps and block-size must be >= 1".into()));
            }
            commands::solve(&cfg, &data, &checkpoint, &out, block_size, max_sweeps)
        }
        Command::Gradcheck { loss, instances, h, tolerance } => {
            let g = &mut cfg.gradcheck;
            set(&mut g.instances, instances);
            set(&mut g.h, h);
            set(&mut g.tolerance, tolerance);
            let kinds = if loss.is_empty() { LossKind::ALL.to_vec() } else { loss };
            commands::gradcheck(&cfg, &kinds)
        }
        Command::Ablate { out, seeds, policies, axes_only, jobs, gen, net, train } => {
            gen.apply(&mut cfg);
            net.apply(&mut cfg);
            train.apply(&mut cfg);
            set(&mut cfg.ablate.seeds, seeds);
            if !policies.is_empty() {
                cfg.ablate.policies = policies;
            }
            cfg.validate().map_err(Failure::Usage)?;
            commands::ablate(&cfg, &out, axes_only, jobs)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("run failed: {m}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
