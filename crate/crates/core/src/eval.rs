//! Retrieval evaluation: embed, rank the gallery by squared L2 distance, and
//! report CMC hit rates. No bag information is used here.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::loss::BatchBag;
use crate::net::{batch_matrix, forward, Params};
use crate::types::{EvalSet, LabelId, Sample};

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

pub fn embed_all(params: &Params, samples: &[Sample]) -> Result<Matrix> {
    if samples.is_empty() {
        return Ok(Matrix::zeros(0, params.layers.last().map_or(0, |l| l.weight.rows())));
    }
    Ok(forward(params, &batch_matrix(samples)?)?.embeddings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    pub ranks: Vec<usize>,
    pub hit_rates: Vec<f64>,
    /// 1-based position of each query's true match.
    pub positions: Vec<usize>,
}

impl CmcResult {
    pub fn rank1(&self) -> f64 {
        self.hit_rate(1)
    }

    /// Hit rate at any `k`, computed from the stored positions.
    pub fn hit_rate(&self, k: usize) -> f64 {
        if self.positions.is_empty() {
            return 0.0;
        }
        self.positions.iter().filter(|&&p| p <= k).count() as f64 / self.positions.len() as f64
    }
}

fn the_match(qi: usize, id: LabelId, gallery_ids: &[LabelId]) -> Result<usize> {
    let mut found = gallery_ids.iter().enumerate().filter(|(_, g)| **g == id).map(|(i, _)| i);
    match (found.next(), found.next()) {
        (Some(i), None) => Ok(i),
        (None, _) => Err(Error::Protocol(format!("query {qi} (id {id}) has no gallery match"))),
        (Some(_), Some(_)) => Err(Error::Protocol(format!("query {qi} (id {id}) has several gallery matches"))),
    }
}

/// Ranks the gallery for every query. A distractor at exactly the match's
/// distance is placed ahead of the match.
pub fn cmc_curve(
    query: &Matrix,
    query_ids: &[LabelId],
    gallery: &Matrix,
    gallery_ids: &[LabelId],
    ranks: &[usize],
) -> Result<CmcResult> {
    if query.rows() != query_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::Shape("embedding and id counts differ".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Config("ranks are 1-based".into()));
    }
    let mut positions = Vec::with_capacity(query.rows());
    for (qi, &id) in query_ids.iter().enumerate() {
        let target = the_match(qi, id, gallery_ids)?;
        let q = query.row(qi);
        let d_match = squared_distance(q, gallery.row(target));
        let ahead = (0..gallery.rows())
            .filter(|&g| g != target && squared_distance(q, gallery.row(g)) <= d_match)
            .count();
        positions.push(ahead + 1);
    }
    let mut result = CmcResult { ranks: ranks.to_vec(), hit_rates: Vec::new(), positions };
    result.hit_rates = ranks.iter().map(|&k| result.hit_rate(k)).collect();
    Ok(result)
}

fn ids_of(samples: &[Sample], role: &str) -> Result<Vec<LabelId>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.true_id.ok_or_else(|| Error::Protocol(format!("{role} {i} has no true id"))))
        .collect()
}

/// Embeds an eval set and computes its CMC curve.
pub fn evaluate(params: &Params, eval: &EvalSet, ranks: &[usize]) -> Result<CmcResult> {
    let qz = embed_all(params, &eval.queries)?;
    let gz = embed_all(params, &eval.gallery)?;
    cmc_curve(&qz, &ids_of(&eval.queries, "query")?, &gz, &ids_of(&eval.gallery, "gallery")?, ranks)
}

pub fn write_cmc_csv<W: Write>(w: &mut W, cmc: &CmcResult) -> Result<()> {
    writeln!(w, "rank,hit_rate")?;
    for (k, h) in cmc.ranks.iter().zip(&cmc.hit_rates) {
        writeln!(w, "{k},{h}")?;
    }
    Ok(())
}

pub fn write_positions_csv<W: Write>(w: &mut W, cmc: &CmcResult) -> Result<()> {
    writeln!(w, "query_id,match_position")?;
    for (q, p) in cmc.positions.iter().enumerate() {
        writeln!(w, "{q},{p}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub gallery_index: usize,
    pub distance: f64,
    pub is_match: bool,
}

/// Top `top_k` gallery entries per query, ordered as in [`cmc_curve`]:
/// ascending distance, non-matches before the match on ties, then by index.
pub fn rankings(
    query: &Matrix,
    query_ids: &[LabelId],
    gallery: &Matrix,
    gallery_ids: &[LabelId],
    top_k: usize,
) -> Result<Vec<Vec<RankedEntry>>> {
    if query.rows() != query_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::Shape("embedding and id counts differ".into()));
    }
    Ok((0..query.rows())
        .map(|qi| {
            let q = query.row(qi);
            let mut entries: Vec<RankedEntry> = (0..gallery.rows())
                .map(|g| RankedEntry {
                    gallery_index: g,
                    distance: squared_distance(q, gallery.row(g)),
                    is_match: gallery_ids[g] == query_ids[qi],
                })
                .collect();
            entries.sort_by(|a, b| {
                a.distance
                    .total_cmp(&b.distance)
                    .then(a.is_match.cmp(&b.is_match))
                    .then(a.gallery_index.cmp(&b.gallery_index))
            });
            entries.truncate(top_k);
            entries
        })
        .collect())
}

pub fn export_rankings<W: Write>(w: &mut W, ranked: &[Vec<RankedEntry>]) -> Result<()> {
    writeln!(w, "query_id,rank,gallery_index,distance,is_match")?;
    for (q, row) in ranked.iter().enumerate() {
        for (r, e) in row.iter().enumerate() {
            writeln!(w, "{q},{},{},{},{}", r + 1, e.gallery_index, e.distance, u8::from(e.is_match))?;
        }
    }
    Ok(())
}

/// Consecutive class blocks of `block_size` (the last block may be shorter).
pub fn contiguous_grouping(m: usize, block_size: usize) -> Vec<Vec<LabelId>> {
    let size = block_size.max(1);
    (0..m).step_by(size).map(|s| (s..(s + size).min(m)).map(LabelId).collect()).collect()
}

/// Block-level comparison of predictions with the weak annotation.
///
/// Entry `(r, c)` is the predicted probability mass on block `c`, averaged
/// over samples weighted by their bag prior's mass on block `r`. Rows receiving
/// no prior mass are all zero; every other row sums to one.
pub fn confusion_matrix(bags: &[BatchBag], probs: &Matrix, grouping: &[Vec<LabelId>]) -> Result<Matrix> {
    let m = probs.cols();
    let mut block_of = vec![usize::MAX; m];
    for (b, block) in grouping.iter().enumerate() {
        for id in block {
            if id.0 >= m || block_of[id.0] != usize::MAX {
                return Err(Error::Config(format!("grouping is not a partition of 0..{m} (at id {id})")));
            }
            block_of[id.0] = b;
        }
    }
    if block_of.contains(&usize::MAX) {
        return Err(Error::Config(format!("grouping does not cover all {m} classes")));
    }
    let nb = grouping.len();
    let mut out = Matrix::zeros(nb, nb);
    let mut weight = vec![0.0; nb];
    for bag in bags {
        let mut y_block = vec![0.0; nb];
        for (c, y) in bag.prior.as_slice().iter().enumerate() {
            y_block[block_of[c]] += y;
        }
        for i in bag.range.clone() {
            let mut p_block = vec![0.0; nb];
            for (c, p) in probs.row(i).iter().enumerate() {
                p_block[block_of[c]] += p;
            }
            for r in 0..nb {
                if y_block[r] == 0.0 {
                    continue;
                }
                weight[r] += y_block[r];
                for (c, p) in p_block.iter().enumerate() {
                    out.set(r, c, out.get(r, c) + y_block[r] * p);
                }
            }
        }
    }
    for (r, w) in weight.iter().enumerate() {
        if *w > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= w);
        }
    }
    Ok(out)
}

pub fn confusion_export<W: Write>(w: &mut W, matrix: &Matrix) -> Result<()> {
    let header: Vec<String> = (0..matrix.cols()).map(|c| format!("b{c}")).collect();
    writeln!(w, "block,{}", header.join(","))?;
    for r in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{r},{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, NetConfig};
    use crate::types::LabelSet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[usize]) -> Vec<LabelId> {
        v.iter().map(|&i| LabelId(i)).collect()
    }

    fn points(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn unique_nearest_match_scores_one() {
        let q = points(&[0.0, 10.0]);
        let g = points(&[10.1, 0.1, 5.0]);
        let r = cmc_curve(&q, &ids(&[0, 1]), &g, &ids(&[1, 0, 7]), &DEFAULT_RANKS).unwrap();
        assert_eq!(r.positions, vec![1, 1]);
        assert_eq!(r.hit_rates, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn third_position_counts_for_rank_five_only() {
        let q = points(&[0.0]);
        let g = points(&[0.1, 0.2, 0.3, 5.0]);
        let r = cmc_curve(&q, &ids(&[0]), &g, &ids(&[8, 9, 0, 7]), &DEFAULT_RANKS).unwrap();
        assert_eq!(r.positions, vec![3]);
        assert_eq!(r.hit_rates, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn identical_embeddings_rank_match_last() {
        let q = points(&[1.0, 1.0]);
        let g = points(&[1.0; 5]);
        let r = cmc_curve(&q, &ids(&[0, 1]), &g, &ids(&[0, 1, 2, 3, 4]), &DEFAULT_RANKS).unwrap();
        assert_eq!(r.positions, vec![5, 5]);
        assert_eq!(r.rank1(), 0.0);
    }

    #[test]
    fn match_count_is_enforced() {
        let q = points(&[0.0]);
        let g = points(&[0.0, 1.0]);
        assert!(matches!(cmc_curve(&q, &ids(&[3]), &g, &ids(&[1, 2]), &[1]), Err(Error::Protocol(_))));
        assert!(matches!(cmc_curve(&q, &ids(&[1]), &g, &ids(&[1, 1]), &[1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn embed_all_is_per_sample() {
        let cfg = NetConfig::new(3, vec![4], 2, 5);
        let p = init_params(&cfg, 2).unwrap();
        let s = |v: [f64; 3]| Sample::new(v.to_vec(), None);
        let a = embed_all(&p, &[s([1.0, 2.0, 3.0]), s([0.5, -1.0, 2.0]), s([1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(a.row(0), a.row(2));
        let b = embed_all(&p, &[s([0.5, -1.0, 2.0]), s([1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(0), b.row(1));
        assert!(a.all_finite());
    }

    #[test]
    fn rankings_flag_matches_and_sort() {
        let q = points(&[0.0, 3.0]);
        let g = points(&[2.9, 0.2, 1.0]);
        let r = rankings(&q, &ids(&[1, 0]), &g, &ids(&[0, 1, 5]), 1).unwrap();
        assert!(r.iter().all(|row| row.len() == 1 && row[0].is_match));
        let all = rankings(&q, &ids(&[1, 0]), &g, &ids(&[0, 1, 5]), 3).unwrap();
        for row in &all {
            assert!(row.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        export_rankings(&mut a, &all).unwrap();
        export_rankings(&mut b, &rankings(&q, &ids(&[1, 0]), &g, &ids(&[0, 1, 5]), 3).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    fn two_bags() -> Vec<BatchBag> {
        let set = |v: &[usize]| LabelSet::new(ids(v)).unwrap();
        vec![BatchBag::new(0..2, set(&[0, 1]), 4).unwrap(), BatchBag::new(2..4, set(&[2, 3]), 4).unwrap()]
    }

    #[test]
    fn confusion_block_diagonal_for_in_bag_predictions() {
        let p = Matrix::from_vec(4, 4, vec![
            1.0, 0.0, 0.0, 0.0, //
            0.3, 0.7, 0.0, 0.0, //
            0.0, 0.0, 0.5, 0.5, //
            0.0, 0.0, 0.0, 1.0,
        ])
        .unwrap();
        let c = confusion_matrix(&two_bags(), &p, &contiguous_grouping(4, 2)).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn confusion_uniform_predictions() {
        let p = Matrix::from_vec(4, 4, vec![0.25; 16]).unwrap();
        let c = confusion_matrix(&two_bags(), &p, &contiguous_grouping(4, 2)).unwrap();
        assert!(c.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let mut buf = Vec::new();
        confusion_export(&mut buf, &c).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("block,b0,b1\n"));
    }

    #[test]
    fn confusion_rejects_bad_grouping() {
        let p = Matrix::from_vec(4, 4, vec![0.25; 16]).unwrap();
        assert!(confusion_matrix(&two_bags(), &p, &[ids(&[0, 1]), ids(&[1, 2, 3])]).is_err());
        assert!(confusion_matrix(&two_bags(), &p, &[ids(&[0, 1])]).is_err());
    }

    proptest! {
        #[test]
        fn cmc_monotone_and_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nq = 12;
            let ng = 30;
            let q = Matrix::from_vec(nq, 3, (0..nq * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let g = Matrix::from_vec(ng, 3, (0..ng * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let qid: Vec<LabelId> = (0..nq).map(LabelId).collect();
            let gid: Vec<LabelId> = (0..ng).map(LabelId).collect();
            let ranks: Vec<usize> = (1..=ng).collect();
            let r = cmc_curve(&q, &qid, &g, &gid, &ranks).unwrap();
            prop_assert!(r.hit_rates.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*r.hit_rates.last().unwrap(), 1.0);
            let mut qs = q.clone();
            qs.scale(scale);
            let mut gs = g.clone();
            gs.scale(scale);
            let s = cmc_curve(&qs, &qid, &gs, &gid, &ranks).unwrap();
            prop_assert_eq!(r.positions, s.positions);
        }

        #[test]
        fn confusion_rows_normalized(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Matrix::from_vec(4, 4, (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let p = crate::linalg::softmax_rows(&logits);
            let c = confusion_matrix(&two_bags(), &p, &contiguous_grouping(4, 2)).unwrap();
            for r in 0..2 {
                prop_assert!((c.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
