use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use bagreid::checkpoint::{load_network, save_network, TrainingCheckpoint};
use bagreid::dataset_io::{load_dataset, load_eval_set, save_dataset, save_eval_set};
use bagreid::eval::{
    confusion_export, confusion_matrix, contiguous_grouping, embed_all, evaluate, export_rankings, rankings,
    write_cmc_csv, write_positions_csv,
};
use bagreid::experiment::{component_grid, run_cell, CellResult, Components};
use bagreid::gradcheck::{grad_check, LossKind};
use bagreid::graph::{brute_force_solve, icm_solve, masked_argmax, BagProblem};
use bagreid::net::{forward, init_params};
use bagreid::synth::{generate, BagPolicy};
use bagreid::train::{train_run, write_metrics_csv, Batch, RunOptions};
use bagreid::{Bag, LabelId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::Failure;

/// Tags load failures with the file they came from.
fn at(path: &Path) -> impl Fn(bagreid::Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
        f => f,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (train, eval) = generate(&cfg.gen)?;
    out_dir(out)?;
    save_dataset(&out.join("train.jsonl"), &train)?;
    save_eval_set(&out.join("eval.jsonl"), &eval)?;
    write_config(cfg, out)?;
    println!(
        "wrote {} bags ({} samples), {} queries, {} gallery items to {}",
        train.bags.len(),
        train.num_samples(),
        eval.queries.len(),
        eval.gallery.len(),
        out.display()
    );
    Ok(())
}

pub fn init(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), Failure> {
    let ds = load_dataset(data).map_err(at(data))?;
    let net = cfg.net.config(ds.d, ds.m);
    let params = init_params(&net, cfg.seed)?;
    out_dir(out)?;
    save_network(&out.join("model.ckpt"), &net, &params)?;
    println!("wrote untrained model ({} parameters) to {}", params.num_params(), out.join("model.ckpt").display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let ds = load_dataset(data).map_err(at(data))?;
    let net = cfg.net.config(ds.d, ds.m);
    let resume = resume.map(|p| TrainingCheckpoint::load(p).map_err(at(p))).transpose()?;
    out_dir(out)?;
    let opts = RunOptions { checkpoint_dir: Some(out.join("checkpoints")), resume, stop_after: None };
    let outcome = train_run(&ds, &net, &cfg.train, &opts)?;
    let mut w = create(&out.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &outcome.metrics)?;
    w.flush()?;
    outcome.checkpoint().save(&out.join("model.ckpt"))?;
    write_config(cfg, out)?;
    let violations: usize = outcome.metrics.iter().map(|m| m.violations).sum();
    for e in &outcome.epochs {
        println!("epoch {:>3}  lr {:<8}  steps {:>4}  mean loss {:.6}", e.epoch, e.lr, e.steps, e.mean_total);
    }
    println!("{} steps, {violations} bag-constraint violations", outcome.metrics.len());
    Ok(())
}

pub fn eval(checkpoint: &Path, eval_path: &Path, out: &Path, ranks: &[usize], top_k: usize) -> Result<(), Failure> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Failure::Usage("ranks must be >= 1".into()));
    }
    let (_, params) = load_network(checkpoint).map_err(at(checkpoint))?;
    let es = load_eval_set(eval_path).map_err(at(eval_path))?;
    let cmc = evaluate(&params, &es, ranks)?;
    let ids = |s: &[bagreid::Sample]| -> Vec<LabelId> { s.iter().map(|x| x.true_id.expect("validated")).collect() };
    let ranked = rankings(
        &embed_all(&params, &es.queries)?,
        &ids(&es.queries),
        &embed_all(&params, &es.gallery)?,
        &ids(&es.gallery),
        top_k,
    )?;
    out_dir(out)?;
    let mut w = create(&out.join("cmc.csv"))?;
    write_cmc_csv(&mut w, &cmc)?;
    w.flush()?;
    let mut w = create(&out.join("positions.csv"))?;
    write_positions_csv(&mut w, &cmc)?;
    w.flush()?;
    let mut w = create(&out.join("rankings.csv"))?;
    export_rankings(&mut w, &ranked)?;
    w.flush()?;
    for (r, h) in cmc.ranks.iter().zip(&cmc.hit_rates) {
        println!("rank-{r:<3} {h:.4}");
    }
    let g = es.gallery.len() as f64;
    println!("{} queries, gallery of {} (chance rank-1 {:.4})", es.queries.len(), es.gallery.len(), 1.0 / g);
    Ok(())
}

pub fn solve(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    block_size: usize,
    max_sweeps: usize,
) -> Result<(), Failure> {
    let ds = load_dataset(data).map_err(at(data))?;
    let (net, params) = load_network(checkpoint).map_err(at(checkpoint))?;
    if net.d_in != ds.d || net.m != ds.m {
        return Err(Failure::Usage(format!(
            "model (d_in={}, m={}) does not fit the dataset (d={}, m={})",
            net.d_in, net.m, ds.d, ds.m
        )));
    }
    let bags: Vec<&Bag> = ds.bags.iter().collect();
    // Nothing is subsampled, so the generator is never drawn from.
    let batch = Batch::from_bags(&bags, ds.m, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0))?;
    let probs = forward(&params, &batch.input)?.probs;
    let kernel = &cfg.train.kernel;

    out_dir(out)?;
    let mut w = create(&out.join("pseudo_labels.csv"))?;
    writeln!(w, "bag_id,sample,true_id,masked_argmax,icm,exhaustive")?;
    let (mut n, mut icm_hits, mut argmax_hits, mut with_truth) = (0usize, 0usize, 0usize, 0usize);
    for (bag, bb) in ds.bags.iter().zip(&batch.bags) {
        let rows: Vec<&[f64]> = bb.range.clone().map(|i| probs.row(i)).collect();
        let app: Vec<&[f64]> = bb.range.clone().map(|i| batch.appearance.row(i)).collect();
        let problem = BagProblem::new(&bb.label, &bb.prior, rows.clone(), &app, kernel)?;
        let icm = icm_solve(&problem, max_sweeps)?;
        // Large bags exceed the enumeration limit; their column stays empty.
        let exact = brute_force_solve(&problem).ok().map(|(a, _)| a.labels);
        for (j, s) in bag.samples.iter().enumerate() {
            let am = masked_argmax(&bb.label, &bb.prior, rows[j]);
            let iy = icm.assignment.labels[j];
            let truth = s.true_id.map_or(String::new(), |t| t.to_string());
            let ex = exact.as_ref().map_or(String::new(), |e| e[j].to_string());
            writeln!(w, "{},{j},{truth},{am},{iy},{ex}", bag.bag_id)?;
            n += 1;
            if let Some(t) = s.true_id {
                with_truth += 1;
                argmax_hits += usize::from(am == t);
                icm_hits += usize::from(iy == t);
            }
        }
    }
    w.flush()?;
    let matrix = confusion_matrix(&batch.bags, &probs, &contiguous_grouping(ds.m, block_size))?;
    let mut w = create(&out.join("confusion.csv"))?;
    confusion_export(&mut w, &matrix)?;
    w.flush()?;
    println!("{n} samples in {} bags", ds.bags.len());
    if with_truth > 0 {
        let pct = |h: usize| 100.0 * h as f64 / with_truth as f64;
        println!("pseudo-label accuracy: masked argmax {:.2}%, icm {:.2}%", pct(argmax_hits), pct(icm_hits));
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, kinds: &[LossKind]) -> Result<(), Failure> {
    let mut failed = Vec::new();
    for &kind in kinds {
        let report = grad_check(kind, &cfg.gradcheck)?;
        println!("{report}");
        if !report.passed {
            failed.push(kind.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

struct Cell {
    policy: BagPolicy,
    components: Components,
    seed: u64,
}

fn onoff(b: bool) -> u8 {
    u8::from(b)
}

pub fn ablate(cfg: &RunConfig, out: &Path, axes_only: bool, jobs: Option<usize>) -> Result<(), Failure> {
    let grid: Vec<Components> = if axes_only {
        let on = Components::ALL_ON;
        vec![
            on,
            Components { graph: false, ..on },
            Components { pairwise: false, ..on },
            Components { triplet: false, ..on },
        ]
    } else {
        component_grid()
    };
    let mut cells = Vec::new();
    for &policy in &cfg.ablate.policies {
        for &components in &grid {
            for seed in cfg.seed..cfg.seed + cfg.ablate.seeds {
                cells.push(Cell { policy, components, seed });
            }
        }
    }
    let run = |c: &Cell| -> bagreid::Result<CellResult> {
        let gen = bagreid::synth::GenConfig { ids_per_bag: c.policy, seed: c.seed, ..cfg.gen.clone() };
        let mut train = cfg.train.clone();
        train.seed = c.seed;
        run_cell(&gen, &cfg.net, &c.components.apply(&train))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let results: Vec<bagreid::Result<CellResult>> = pool.install(|| cells.par_iter().map(run).collect());

    out_dir(out)?;
    let mut w = create(&out.join("ablation.csv"))?;
    writeln!(w, "ids_per_bag,graph,pairwise,triplet,seed,rank1,rank5,rank10,steps,violations,final_loss")?;
    let mut rows = Vec::with_capacity(cells.len());
    for (c, r) in cells.iter().zip(results) {
        let r = r?;
        let k = &c.components;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.policy,
            onoff(k.graph),
            onoff(k.pairwise),
            onoff(k.triplet),
            c.seed,
            r.rank1,
            r.rank5,
            r.rank10,
            r.steps,
            r.violations,
            r.final_loss
        )?;
        rows.push(r);
    }
    w.flush()?;
    if let Some(bad) = rows.iter().find(|r| r.violations > 0) {
        return Err(Failure::Runtime(format!("{} bag-constraint violations during the sweep", bad.violations)));
    }

    let mut w = create(&out.join("summary.csv"))?;
    writeln!(w, "ids_per_bag,graph,pairwise,triplet,seeds,mean_rank1,mean_rank5,mean_rank10")?;
    let per = cfg.ablate.seeds as usize;
    for (chunk_cells, chunk) in cells.chunks(per).zip(rows.chunks(per)) {
        let c = &chunk_cells[0];
        let mean = |f: fn(&CellResult) -> f64| chunk.iter().map(f).sum::<f64>() / per as f64;
        let (r1, r5, r10) = (mean(|r| r.rank1), mean(|r| r.rank5), mean(|r| r.rank10));
        writeln!(
            w,
            "{},{},{},{},{per},{r1},{r5},{r10}",
            c.policy,
            onoff(c.components.graph),
            onoff(c.components.pairwise),
            onoff(c.components.triplet)
        )?;
        println!("ids/bag {:<10} {:<40} rank-1 {r1:.4}", c.policy.to_string(), c.components.to_string());
    }
    w.flush()?;
    write_config(cfg, out)?;
    Ok(())
}
