//! Caption encoder: trainable word embeddings, linear projection to the joint
//! space, a textual GAT over the words and mean pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::featurestore::strip_padding;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::relgraph::Gat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub gat_depth: usize,
    pub use_bn: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub embedding: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub gat: Gat,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: TextConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if c.vocab_size < 2 || c.word_dim == 0 {
            return Err(Error::Config(
                "text encoder needs vocab_size ≥ 2 and word_dim ≥ 1".into(),
            ));
        }
        // A lookup has a single active input, so fan-in is 1.
        let embedding =
            store.add_uniform_bounded("text.embedding", c.vocab_size, c.word_dim, 1.0, rng);
        let weight = store.add_uniform("text.proj.weight", c.word_dim, c.embed_dim, rng);
        let bias = store.add_zeros("text.proj.bias", 1, c.embed_dim);
        let gat = Gat::new(
            store,
            "text.gat",
            c.embed_dim,
            c.heads,
            c.gat_depth,
            c.use_bn,
            rng,
        )?;
        Ok(Self {
            config,
            embedding,
            weight,
            bias,
            gat,
        })
    }

    fn words<'t>(&self, tokens: &'t [u32]) -> Result<&'t [u32]> {
        let words = strip_padding(tokens);
        if words.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if let Some(&bad) = words
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::BadToken {
                id: bad,
                vocab_size: self.config.vocab_size,
                context: "caption".into(),
            });
        }
        Ok(words)
    }

    /// Projected word nodes `C* = C W_c + b` for one caption (padding dropped).
    pub fn word_nodes(&self, ctx: &mut Ctx<'_>, tokens: &[u32]) -> Result<Var> {
        let words = self.words(tokens)?;
        let ids: Vec<usize> = words.iter().map(|&t| t as usize).collect();
        let c = ctx.tape.gather_rows(ctx.p(self.embedding), &ids)?;
        ctx.tape
            .linear(c, ctx.p(self.weight), Some(ctx.p(self.bias)))
    }

    /// Encodes a batch of captions to `1 × D_e` rows. Batch norm statistics
    /// in training mode are pooled over every word in the batch.
    pub fn encode_batch(&self, ctx: &mut Ctx<'_>, captions: &[&[u32]]) -> Result<Vec<Var>> {
        let nodes: Vec<Var> = captions
            .iter()
            .map(|c| self.word_nodes(ctx, c))
            .collect::<Result<_>>()?;
        let enhanced = self.gat.forward_batch(ctx, &nodes)?;
        enhanced
            .into_iter()
            .map(|v| ctx.tape.mean_rows(v))
            .collect()
    }
}
