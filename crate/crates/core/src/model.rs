//! The full matching model: visual encoder, text encoder and their shared parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalkit::SimilarityMatrix;
use crate::featurestore::{Dataset, DatasetManifest, FeatureSet};
use crate::matcher::{
    cosine_similarity, cosine_similarity_matrix, triplet_loss_hardest, LossConfig,
};
use crate::params::{BnAccess, Ctx, ParamStore};
use crate::text::{TextConfig, TextEncoder};
use crate::visual::{VisualConfig, VisualEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub word_dim: usize,
    pub vocab_size: usize,
    pub heads: usize,
    pub jsr_k: usize,
    pub gat_depth: usize,
    pub use_bn: bool,
    pub use_global: bool,
    pub use_regional: bool,
    pub use_ssr: bool,
    pub use_jsr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            embed_dim: 32,
            word_dim: 32,
            vocab_size: 200,
            heads: 4,
            jsr_k: 2,
            gat_depth: 1,
            use_bn: true,
            use_global: true,
            use_regional: true,
            use_ssr: true,
            use_jsr: true,
        }
    }
}

impl ModelConfig {
    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            heads: self.heads,
            gat_depth: self.gat_depth,
            jsr_k: self.jsr_k,
            use_bn: self.use_bn,
            use_global: self.use_global,
            use_regional: self.use_regional,
            use_ssr: self.use_ssr,
            use_jsr: self.use_jsr,
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            vocab_size: self.vocab_size,
            word_dim: self.word_dim,
            embed_dim: self.embed_dim,
            heads: self.heads,
            gat_depth: self.gat_depth,
            use_bn: self.use_bn,
        }
    }

    pub fn check_dataset(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.feature_dim != self.feature_dim || manifest.vocab_size != self.vocab_size {
            return Err(Error::Config(format!(
                "model expects feature_dim {} / vocab {}, dataset has {} / {}",
                self.feature_dim, self.vocab_size, manifest.feature_dim, manifest.vocab_size
            )));
        }
        Ok(())
    }
}

/// Items encoded per tape in eval mode.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
}

/// Per-image eval-mode outputs used for attention rankings.
#[derive(Clone, Debug)]
pub struct ImageTrace {
    pub rep: Tensor,
    pub global_nodes: Option<Tensor>,
    pub regional_nodes: Option<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let visual = VisualEncoder::new(&mut store, config.visual(), &mut rng)?;
        let text = TextEncoder::new(&mut store, config.text(), &mut rng)?;
        Ok(Self {
            config,
            store,
            visual,
            text,
        })
    }

    /// Raw (unnormalized) image and caption representations for a batch.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        images: &[&FeatureSet],
        captions: &[&[u32]],
    ) -> Result<(Var, Var)> {
        let img: Vec<Var> = self
            .visual
            .encode_batch(ctx, images)?
            .into_iter()
            .map(|o| o.rep)
            .collect();
        let txt = self.text.encode_batch(ctx, captions)?;
        let img = ctx.tape.concat_rows(&img)?;
        let txt = ctx.tape.concat_rows(&txt)?;
        Ok((img, txt))
    }

    /// Triplet loss of a batch of matching pairs (image `i` ↔ caption `i`).
    pub fn batch_loss(
        &self,
        ctx: &mut Ctx<'_>,
        images: &[&FeatureSet],
        captions: &[&[u32]],
        loss: &LossConfig,
    ) -> Result<Var> {
        if images.len() != captions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} captions in a batch",
                images.len(),
                captions.len()
            )));
        }
        let (img, txt) = self.forward(ctx, images, captions)?;
        let s = cosine_similarity(ctx.tape, img, txt)?;
        triplet_loss_hardest(ctx.tape, s, loss)
    }

    fn eval_tape<T>(&self, f: impl FnOnce(&mut Ctx<'_>) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, BnAccess::Frozen(self.store.bn_states()));
        f(&mut ctx)
    }

    /// Eval-mode image representations, one row per image.
    pub fn encode_images(&self, images: &[&FeatureSet]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            self.eval_tape(|ctx| {
                for out in self.visual.encode_batch(ctx, chunk)? {
                    rows.push(ctx.tape.value(out.rep).row(0).to_owned());
                }
                Ok(())
            })?;
        }
        stack(rows, self.config.embed_dim)
    }

    /// Eval-mode caption representations, one row per caption.
    pub fn encode_captions(&self, captions: &[&[u32]]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(EVAL_CHUNK) {
            self.eval_tape(|ctx| {
                for v in self.text.encode_batch(ctx, chunk)? {
                    rows.push(ctx.tape.value(v).row(0).to_owned());
                }
                Ok(())
            })?;
        }
        stack(rows, self.config.embed_dim)
    }

    /// Eval-mode representation and post-relation node features of one image.
    pub fn trace_image(&self, image: &FeatureSet) -> Result<ImageTrace> {
        self.eval_tape(|ctx| {
            let out = self.visual.encode_batch(ctx, &[image])?.remove(0);
            let get = |v: Option<Var>| v.map(|v| ctx.tape.value(v).clone());
            Ok(ImageTrace {
                rep: ctx.tape.value(out.rep).clone(),
                global_nodes: get(out.global_nodes),
                regional_nodes: get(out.regional_nodes),
            })
        })
    }

    /// Cosine similarity of every image in `dataset` against every caption.
    pub fn similarity(&self, dataset: &Dataset) -> Result<SimilarityMatrix> {
        self.config.check_dataset(&dataset.manifest)?;
        let images: Vec<&FeatureSet> = dataset.items.iter().collect();
        let img = self.encode_images(&images)?;
        let txt = self.encode_captions(&dataset.all_captions())?;
        SimilarityMatrix::new(
            cosine_similarity_matrix(&img, &txt)?,
            dataset.manifest.captions_per_image,
        )
    }
}

fn stack(rows: Vec<ndarray::Array1<f64>>, dim: usize) -> Result<Tensor> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::from_shape_vec((n, dim), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))
}
