//! Line-delimited JSON dataset files.
//!
//! The first line is a header `{"m", "d", "d_app", "split"}`. Training files
//! follow with one bag per line, `{"bag_id", "label_ids", "samples"}`; eval
//! files with one sample per line, `{"role": "query" | "gallery", "x", "i", "true_id"}`.
//! Floats are written in shortest round-trip form, so finite values
//! survive a save/load cycle bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_dataset, validate_eval_set, Bag, EvalSet, LabelId, LabelSet, Sample, WeakDataset};

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub d: usize,
    pub d_app: usize,
    pub split: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    bag_id: u64,
    label_ids: Vec<LabelId>,
    samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Query,
    Gallery,
}

#[derive(Serialize, Deserialize)]
struct EvalRecord {
    role: Role,
    #[serde(flatten)]
    sample: Sample,
}

fn json_line<T: Serialize, W: Write>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &WeakDataset) -> Result<()> {
    let header = Header { m: Some(ds.m), d: ds.d, d_app: ds.d_app, split: TRAIN_SPLIT.into() };
    json_line(w, &header)?;
    for bag in &ds.bags {
        let rec = BagRecord {
            bag_id: bag.bag_id,
            label_ids: bag.label.ids().to_vec(),
            samples: bag.samples.clone(),
        };
        json_line(w, &rec)?;
    }
    Ok(())
}

pub fn write_eval_set<W: Write>(w: &mut W, es: &EvalSet) -> Result<()> {
    let header = Header { m: None, d: es.d, d_app: es.d_app, split: EVAL_SPLIT.into() };
    json_line(w, &header)?;
    for (role, list) in [(Role::Query, &es.queries), (Role::Gallery, &es.gallery)] {
        for s in list {
            json_line(w, &EvalRecord { role, sample: s.clone() })?;
        }
    }
    Ok(())
}

/// Non-empty lines with their 1-based line numbers.
fn records<R: BufRead>(r: R) -> impl Iterator<Item = Result<(usize, String)>> {
    r.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(Error::Io(e))),
    })
}

fn parse<'a, T: Deserialize<'a>>(line: usize, text: &'a str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse { line, msg: e.to_string() })
}

fn read_header(
    lines: &mut impl Iterator<Item = Result<(usize, String)>>,
    split: &str,
) -> Result<Header> {
    let (line, text) = lines.next().transpose()?.ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
    let header: Header = parse(line, &text)?;
    if header.split != split {
        return Err(Error::Parse {
            line,
            msg: format!("expected a '{split}' file, header says '{}'", header.split),
        });
    }
    Ok(header)
}

/// Reads a training file and validates it against its header.
pub fn read_dataset<R: BufRead>(r: R) -> Result<WeakDataset> {
    let mut lines = records(r);
    let header = read_header(&mut lines, TRAIN_SPLIT)?;
    let m = header.m.ok_or(Error::Parse { line: 1, msg: "training header lacks m".into() })?;
    let mut bags = Vec::new();
    for item in lines {
        let (line, text) = item?;
        let rec: BagRecord = parse(line, &text)?;
        let label = LabelSet::new(rec.label_ids).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        bags.push(Bag { bag_id: rec.bag_id, samples: rec.samples, label });
    }
    let ds = WeakDataset { m, d: header.d, d_app: header.d_app, bags };
    validate_dataset(&ds).into_result()?;
    Ok(ds)
}

pub fn read_eval_set<R: BufRead>(r: R) -> Result<EvalSet> {
    let mut lines = records(r);
    let header = read_header(&mut lines, EVAL_SPLIT)?;
    let mut es = EvalSet { d: header.d, d_app: header.d_app, queries: Vec::new(), gallery: Vec::new() };
    for item in lines {
        let (line, text) = item?;
        let rec: EvalRecord = parse(line, &text)?;
        match rec.role {
            Role::Query => es.queries.push(rec.sample),
            Role::Gallery => es.gallery.push(rec.sample),
        }
    }
    validate_eval_set(&es).into_result()?;
    Ok(es)
}

pub fn save_dataset(path: &Path, ds: &WeakDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<WeakDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_eval_set(path: &Path, es: &EvalSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_eval_set(&mut w, es)?;
    w.flush()?;
    Ok(())
}

pub fn load_eval_set(path: &Path) -> Result<EvalSet> {
    read_eval_set(BufReader::new(File::open(path)?))
}
