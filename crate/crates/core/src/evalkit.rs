//! Retrieval evaluation over image × text similarity matrices: R@K, Rsum,
//! image-to-text re-ranking, two-model ensembling, fold averaging and
//! node attention rankings.
//!
//! Rankings sort by descending score; equal scores keep the lower index first.

use std::cmp::Ordering;
use std::fmt;

use ndarray::{s, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image query, rank texts.
    I2T,
    /// Text query, rank images.
    T2I,
}

/// Scores of every image against every text. Text `j` is a ground-truth
/// caption of image `j / captions_per_image`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    scores: Tensor,
    captions_per_image: usize,
    /// Re-ordered top prefix of each image's text ranking, set by re-ranking.
    i2t_prefix: Option<Vec<Vec<usize>>>,
}

fn descending(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of `scores` in retrieval order.
pub fn rank_order(scores: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| descending((a, scores[a]), (b, scores[b])));
    idx
}

/// 0-based position of `target` in the retrieval order of `scores`.
fn rank_of(scores: ArrayView1<'_, f64>, target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count()
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor, captions_per_image: usize) -> Result<Self> {
        let (n_i, n_t) = scores.dim();
        if n_i == 0 || n_t == 0 {
            return Err(Error::EmptyMatrix);
        }
        if captions_per_image == 0 || n_t != n_i * captions_per_image {
            return Err(Error::ShapeMismatch(format!(
                "{n_i} images x {captions_per_image} captions each does not give {n_t} texts"
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity scores".into()));
        }
        Ok(Self {
            scores,
            captions_per_image,
            i2t_prefix: None,
        })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn captions_per_image(&self) -> usize {
        self.captions_per_image
    }

    pub fn n_images(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_texts(&self) -> usize {
        self.scores.ncols()
    }

    pub fn is_reranked(&self) -> bool {
        self.i2t_prefix.is_some()
    }

    pub fn image_of(&self, text: usize) -> usize {
        text / self.captions_per_image
    }

    pub fn texts_of(&self, image: usize) -> std::ops::Range<usize> {
        image * self.captions_per_image..(image + 1) * self.captions_per_image
    }

    /// Full text ranking for an image query (honours re-ranking).
    pub fn i2t_order(&self, image: usize) -> Vec<usize> {
        let base = rank_order(self.scores.row(image));
        match &self.i2t_prefix {
            Some(prefixes) => {
                let prefix = &prefixes[image];
                let mut order = prefix.clone();
                order.extend_from_slice(&base[prefix.len()..]);
                order
            }
            None => base,
        }
    }

    /// Full image ranking for a text query.
    pub fn t2i_order(&self, text: usize) -> Vec<usize> {
        rank_order(self.scores.column(text))
    }

    /// 0-based rank of `text` for image query `image`.
    fn i2t_rank(&self, image: usize, text: usize) -> usize {
        if let Some(prefixes) = &self.i2t_prefix {
            if let Some(pos) = prefixes[image].iter().position(|&t| t == text) {
                return pos;
            }
        }
        rank_of(self.scores.row(image), text)
    }

    fn t2i_rank(&self, text: usize, image: usize) -> usize {
        rank_of(self.scores.column(text), image)
    }

    /// Rows `images` and their captions as a standalone matrix.
    pub fn sub_matrix(&self, images: std::ops::Range<usize>) -> Result<Self> {
        if images.start >= images.end || images.end > self.n_images() {
            return Err(Error::EmptyMatrix);
        }
        let cpi = self.captions_per_image;
        let texts = images.start * cpi..images.end * cpi;
        let scores = self
            .scores
            .slice(s![images.clone(), texts.clone()])
            .to_owned();
        let i2t_prefix = self.i2t_prefix.as_ref().map(|p| {
            p[images]
                .iter()
                .map(|row| {
                    row.iter()
                        .filter(|t| texts.contains(t))
                        .map(|t| t - texts.start)
                        .collect()
                })
                .collect()
        });
        Ok(Self {
            scores,
            captions_per_image: cpi,
            i2t_prefix,
        })
    }
}

/// Percentage of queries whose ground truth appears in the top `k` results.
pub fn recall_at_k(sim: &SimilarityMatrix, direction: Direction, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall cutoff K must be ≥ 1".into()));
    }
    let hits = match direction {
        Direction::I2T => (0..sim.n_images())
            .filter(|&i| sim.texts_of(i).any(|t| sim.i2t_rank(i, t) < k))
            .count(),
        Direction::T2I => (0..sim.n_texts())
            .filter(|&t| sim.t2i_rank(t, sim.image_of(t)) < k)
            .count(),
    };
    let queries = match direction {
        Direction::I2T => sim.n_images(),
        Direction::T2I => sim.n_texts(),
    };
    Ok(100.0 * hits as f64 / queries as f64)
}

/// Sum of the six recall values, compensated so decimal inputs sum to the
/// nearest representable total.
pub fn rsum(recalls: [f64; 6]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in recalls {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn from_recalls(r: [f64; 6]) -> Self {
        Self {
            i2t_r1: r[0],
            i2t_r5: r[1],
            i2t_r10: r[2],
            t2i_r1: r[3],
            t2i_r5: r[4],
            t2i_r10: r[5],
            rsum: rsum(r),
        }
    }

    pub fn recalls(&self) -> [f64; 6] {
        [
            self.i2t_r1,
            self.i2t_r5,
            self.i2t_r10,
            self.t2i_r1,
            self.t2i_r5,
            self.t2i_r10,
        ]
    }

    /// Field-wise mean of several reports; Rsum recomputed from the means.
    pub fn mean(reports: &[RetrievalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyInput("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.recalls()) {
                *a += v;
            }
        }
        Ok(Self::from_recalls(acc.map(|a| a / n)))
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14}{:>8}{:>8}{:>8}",
            "direction", "R@1", "R@5", "R@10"
        )?;
        writeln!(
            f,
            "{:<14}{:>8.2}{:>8.2}{:>8.2}",
            "image-to-text", self.i2t_r1, self.i2t_r5, self.i2t_r10
        )?;
        writeln!(
            f,
            "{:<14}{:>8.2}{:>8.2}{:>8.2}",
            "text-to-image", self.t2i_r1, self.t2i_r5, self.t2i_r10
        )?;
        write!(f, "{:<14}{:>8.2}", "rsum", self.rsum)
    }
}

pub fn evaluate(sim: &SimilarityMatrix) -> Result<RetrievalReport> {
    let mut r = [0.0; 6];
    for (d, dir) in [Direction::I2T, Direction::T2I].into_iter().enumerate() {
        for (j, k) in [1, 5, 10].into_iter().enumerate() {
            r[d * 3 + j] = recall_at_k(sim, dir, k)?;
        }
    }
    Ok(RetrievalReport::from_recalls(r))
}

/// Splits the images into `folds` equal contiguous blocks (with their
/// captions), evaluates each block and averages.
pub fn fold_eval(
    sim: &SimilarityMatrix,
    folds: usize,
) -> Result<(RetrievalReport, Vec<RetrievalReport>)> {
    let n = sim.n_images();
    if folds == 0 || !n.is_multiple_of(folds) {
        return Err(Error::Config(format!(
            "{n} images cannot be split into {folds} equal folds"
        )));
    }
    let size = n / folds;
    let parts = (0..folds)
        .map(|f| evaluate(&sim.sub_matrix(f * size..(f + 1) * size)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((RetrievalReport::mean(&parts)?, parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub top_n: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            top_n: 15,
            lambda: 0.5,
        }
    }
}

/// Re-orders each image query's top `top_n` texts by
/// `λ·r_i2t + (1 − λ)·r_t2i`, where `r_i2t` is the text's 1-based rank for
/// the image and `r_t2i` the image's 1-based rank for the text. Ties keep
/// the higher original score first. Scores, and hence text-to-image
/// rankings, are untouched.
pub fn rerank_i2t(sim: &SimilarityMatrix, cfg: &RerankConfig) -> Result<SimilarityMatrix> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::BadLambda(cfg.lambda));
    }
    if cfg.top_n == 0 {
        return Err(Error::Config("re-ranking top_n must be ≥ 1".into()));
    }
    let top_n = cfg.top_n.min(sim.n_texts());
    let prefixes = (0..sim.n_images())
        .map(|i| {
            let order = sim.i2t_order(i);
            let mut cands: Vec<(usize, f64, f64)> = order[..top_n]
                .iter()
                .enumerate()
                .map(|(pos, &t)| {
                    let r1 = (pos + 1) as f64;
                    let r2 = (sim.t2i_rank(t, i) + 1) as f64;
                    (
                        t,
                        cfg.lambda * r1 + (1.0 - cfg.lambda) * r2,
                        sim.scores[[i, t]],
                    )
                })
                .collect();
            cands.sort_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then_with(|| descending((a.0, a.2), (b.0, b.2)))
            });
            cands.into_iter().map(|c| c.0).collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        scores: sim.scores.clone(),
        captions_per_image: sim.captions_per_image,
        i2t_prefix: Some(prefixes),
    })
}

/// Elementwise mean of two models' similarity scores.
pub fn ensemble(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    if a.scores.dim() != b.scores.dim() || a.captions_per_image != b.captions_per_image {
        return Err(Error::ShapeMismatch(format!(
            "ensemble of {:?} and {:?}",
            a.scores.dim(),
            b.scores.dim()
        )));
    }
    let scores = (&a.scores + &b.scores) / 2.0;
    SimilarityMatrix::new(scores, a.captions_per_image)
}

/// Node indices ordered by descending dot product with `rep`, truncated to `top`.
pub fn attention_ranking(
    rep: ArrayView1<'_, f64>,
    nodes: &Tensor,
    top: usize,
) -> Result<Vec<usize>> {
    if nodes.ncols() != rep.len() {
        return Err(Error::ShapeMismatch(format!(
            "representation of dim {} against nodes of dim {}",
            rep.len(),
            nodes.ncols()
        )));
    }
    if top > nodes.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "top {top} of only {} nodes",
            nodes.nrows()
        )));
    }
    let scores = nodes.dot(&rep);
    let mut order = rank_order(scores.view());
    order.truncate(top);
    Ok(order)
}
