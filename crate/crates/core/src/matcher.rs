//! Cosine similarity and the hinge triplet ranking loss with hardest in-batch negatives.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::Config(format!("margin {} must be ≥ 0", self.margin)));
        }
        Ok(())
    }
}

/// `S[i][j] = ⟨images[i]/‖images[i]‖, texts[j]/‖texts[j]‖⟩`, clamped to `[−1, 1]`
/// against rounding.
pub fn cosine_similarity_matrix(images: &Tensor, texts: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.leaf(images.clone());
    let b = tape.leaf(texts.clone());
    let s = cosine_similarity(&mut tape, a, b)?;
    Ok(tape.value(s).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Differentiable cosine similarity between the rows of `images` and `texts`.
pub fn cosine_similarity(tape: &mut Tape, images: Var, texts: Var) -> Result<Var> {
    let a = tape.l2_normalize_rows(images)?;
    let b = tape.l2_normalize_rows(texts)?;
    tape.scaled_dot(a, b, 1.0)
}

/// Hardest negatives of every query in a square batch similarity matrix:
/// `(image index for text i, text index for image i)`, ties to the lower index.
pub fn hardest_negatives(s: &Tensor) -> Vec<(usize, usize)> {
    let b = s.nrows();
    (0..b)
        .map(|i| {
            let mut best_img: Option<usize> = None;
            let mut best_txt: Option<usize> = None;
            for j in (0..b).filter(|&j| j != i) {
                if best_img.is_none_or(|k| s[[j, i]] > s[[k, i]]) {
                    best_img = Some(j);
                }
                if best_txt.is_none_or(|k| s[[i, j]] > s[[i, k]]) {
                    best_txt = Some(j);
                }
            }
            (best_img.expect("b ≥ 2"), best_txt.expect("b ≥ 2"))
        })
        .collect()
}

/// `Σ_i [α + S(I'_i, T_i) − S(I_i, T_i)]₊ + [α + S(I_i, T'_i) − S(I_i, T_i)]₊`
/// where `I'`, `T'` are the hardest in-batch negatives of pair `i`.
pub fn triplet_loss_hardest(tape: &mut Tape, s: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (rows, cols) = tape.shape(s);
    if rows != cols {
        return Err(Error::ShapeMismatch(format!(
            "triplet loss needs a square batch, got {rows}x{cols}"
        )));
    }
    if rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    let negatives = hardest_negatives(tape.value(s));
    let pos_at: Vec<_> = (0..rows).map(|i| (i, i)).collect();
    let img_at: Vec<_> = negatives
        .iter()
        .enumerate()
        .map(|(i, &(j, _))| (j, i))
        .collect();
    let txt_at: Vec<_> = negatives
        .iter()
        .enumerate()
        .map(|(i, &(_, j))| (i, j))
        .collect();
    let pos = tape.pick(s, &pos_at)?;
    let neg_img = tape.pick(s, &img_at)?;
    let neg_txt = tape.pick(s, &txt_at)?;

    let d_img = tape.sub(neg_img, pos)?;
    let d_img = tape.affine(d_img, 1.0, cfg.margin);
    let h_img = tape.relu(d_img);
    let d_txt = tape.sub(neg_txt, pos)?;
    let d_txt = tape.affine(d_txt, 1.0, cfg.margin);
    let h_txt = tape.relu(d_txt);
    let both = tape.add(h_img, h_txt)?;
    let total = tape.sum(both);
    Ok(match cfg.reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.affine(total, 1.0 / rows as f64, 0.0),
    })
}

/// Loss value of a plain similarity matrix.
pub fn triplet_loss_value(s: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(s.clone());
    let loss = triplet_loss_hardest(&mut tape, v, cfg)?;
    Ok(tape.scalar(loss))
}
