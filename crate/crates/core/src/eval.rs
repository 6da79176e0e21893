//! Cross-modality retrieval metrics: CMC, mAP and mINP.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality, SynthImage};
use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::linalg::dot;

/// Gallery ranking for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankList {
    /// Gallery indices by descending similarity, ties to the smaller index.
    pub order: Vec<usize>,
    /// Relevance per gallery index.
    pub relevant: Vec<bool>,
}

impl RankList {
    pub fn from_scores(scores: &[f64], relevant: Vec<bool>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { order, relevant }
    }

    /// 1-based ranks of the relevant items, ascending.
    pub fn relevant_ranks(&self) -> Vec<usize> {
        self.order
            .iter()
            .enumerate()
            .filter(|(_, &g)| self.relevant[g])
            .map(|(r, _)| r + 1)
            .collect()
    }
}

/// Ranks every query against the gallery by cosine similarity of unit
/// features.
pub fn rank_all(query: &[Vec<f64>], query_ids: &[usize], gallery: &[Vec<f64>], gallery_ids: &[usize]) -> Vec<RankList> {
    query
        .iter()
        .zip(query_ids)
        .map(|(q, qid)| {
            let scores: Vec<f64> = gallery.iter().map(|g| dot(q, g)).collect();
            RankList::from_scores(&scores, gallery_ids.iter().map(|g| g == qid).collect())
        })
        .collect()
}

/// Applies `f` to every query with a relevant item and averages. Queries
/// without one are skipped with a warning.
fn mean_over(lists: &[RankList], f: impl Fn(&[usize]) -> f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for (q, l) in lists.iter().enumerate() {
        let ranks = l.relevant_ranks();
        if ranks.is_empty() {
            warn!("{}", Error::NoRelevant(q));
            continue;
        }
        sum += f(&ranks);
        used += 1;
    }
    if used == 0 {
        return Err(Error::NoRelevant(0));
    }
    Ok(sum / used as f64)
}

pub fn cmc(lists: &[RankList], k: usize) -> Result<f64> {
    mean_over(lists, |r| if r[0] <= k { 1.0 } else { 0.0 })
}

pub fn mean_ap(lists: &[RankList]) -> Result<f64> {
    mean_over(lists, |r| {
        r.iter().enumerate().map(|(i, &rank)| (i + 1) as f64 / rank as f64).sum::<f64>() / r.len() as f64
    })
}

/// Mean inverse negative penalty: relevant count over the rank of the last
/// relevant item.
pub fn minp(lists: &[RankList]) -> Result<f64> {
    mean_over(lists, |r| r.len() as f64 / *r.last().expect("non-empty") as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Infrared queries against a visible gallery.
    InfraredToVisible,
    VisibleToInfrared,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::InfraredToVisible => Modality::Infrared,
            Direction::VisibleToInfrared => Modality::Visible,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::InfraredToVisible => "i2v",
            Direction::VisibleToInfrared => "v2i",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
}

impl RetrievalMetrics {
    pub fn from_lists(lists: &[RankList]) -> Result<Self> {
        Ok(Self {
            rank1: cmc(lists, 1)?,
            rank5: cmc(lists, 5)?,
            rank10: cmc(lists, 10)?,
            map: mean_ap(lists)?,
            minp: minp(lists)?,
        })
    }
}

/// Anything that maps an image to a unit feature.
pub trait Embedder: Sync {
    fn embed_image(&self, img: &SynthImage) -> Result<Vec<f64>>;
}

impl Embedder for ParamSet {
    fn embed_image(&self, img: &SynthImage) -> Result<Vec<f64>> {
        self.embed(&img.flatten())
    }
}

/// Embeds images in parallel, preserving order.
pub fn embed_all<E: Embedder + ?Sized>(embedder: &E, images: &[&SynthImage]) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|img| embedder.embed_image(img)).collect()
}

/// Query and gallery of the test split for a direction: the query modality's
/// test images against the other modality's.
pub fn test_sets(dataset: &Dataset, direction: Direction) -> Result<(Vec<&SynthImage>, Vec<&SynthImage>)> {
    let qm = direction.query_modality();
    let gm = match qm {
        Modality::Visible => Modality::Infrared,
        Modality::Infrared => Modality::Visible,
    };
    let query: Vec<&SynthImage> = dataset.test_indices(qm).into_iter().map(|i| &dataset.images[i]).collect();
    let gallery: Vec<&SynthImage> = dataset.test_indices(gm).into_iter().map(|i| &dataset.images[i]).collect();
    if query.is_empty() {
        return Err(Error::EmptySplit("query"));
    }
    if gallery.is_empty() {
        return Err(Error::EmptySplit("gallery"));
    }
    Ok((query, gallery))
}

fn test_rank_lists<E: Embedder + ?Sized>(embedder: &E, dataset: &Dataset, direction: Direction) -> Result<(Vec<RankList>, Vec<usize>, Vec<usize>)> {
    let (query, gallery) = test_sets(dataset, direction)?;
    let qf = embed_all(embedder, &query)?;
    let gf = embed_all(embedder, &gallery)?;
    let qid: Vec<usize> = query.iter().map(|i| i.identity).collect();
    let gid: Vec<usize> = gallery.iter().map(|i| i.identity).collect();
    Ok((rank_all(&qf, &qid, &gf, &gid), qid, gid))
}

pub fn evaluate<E: Embedder + ?Sized>(embedder: &E, dataset: &Dataset, direction: Direction) -> Result<RetrievalMetrics> {
    let (lists, _, _) = test_rank_lists(embedder, dataset, direction)?;
    RetrievalMetrics::from_lists(&lists)
}

/// Rank-1 errors whose top match wears the query's palette.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaletteConfusion {
    pub queries: usize,
    pub errors: usize,
    pub palette_errors: usize,
}

impl PaletteConfusion {
    /// Share of rank-1 errors that are same-palette confusions; 0 without
    /// errors.
    pub fn fraction(&self) -> f64 {
        if self.errors == 0 {
            0.0
        } else {
            self.palette_errors as f64 / self.errors as f64
        }
    }
}

pub fn palette_confusion<E: Embedder + ?Sized>(
    embedder: &E,
    dataset: &Dataset,
    direction: Direction,
    palette_of: impl Fn(usize) -> usize,
) -> Result<PaletteConfusion> {
    let (lists, qid, gid) = test_rank_lists(embedder, dataset, direction)?;
    let mut out = PaletteConfusion {
        queries: lists.len(),
        errors: 0,
        palette_errors: 0,
    };
    for (l, &q) in lists.iter().zip(&qid) {
        let Some(&top) = l.order.first() else { continue };
        let g = gid[top];
        if g != q {
            out.errors += 1;
            if palette_of(g) == palette_of(q) {
                out.palette_errors += 1;
            }
        }
    }
    Ok(out)
}
