//! Image-side encoder: two-level feature projection, separate semantic
//! relations (one GAT per path), joint semantic relations (K GATs over the
//! concatenated node set) and the gated-fusion tree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::featurestore::FeatureSet;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::relgraph::Gat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub gat_depth: usize,
    /// Number of parallel joint-relation GATs, one of 1, 2, 4.
    pub jsr_k: usize,
    pub use_bn: bool,
    pub use_global: bool,
    pub use_regional: bool,
    pub use_ssr: bool,
    pub use_jsr: bool,
}

impl VisualConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_global && !self.use_regional {
            return Err(Error::Config(
                "at least one visual path must be enabled".into(),
            ));
        }
        if self.use_jsr && !(self.use_global && self.use_regional) {
            return Err(Error::Config(
                "joint semantic relations need both the global and regional paths".into(),
            ));
        }
        if self.use_jsr {
            fusion_layers_for(self.jsr_k)?;
        }
        Ok(())
    }
}

/// Gated-fusion layers needed to reduce `k` vectors to one.
pub fn fusion_layers_for(k: usize) -> Result<usize> {
    match k {
        1 => Ok(0),
        2 => Ok(1),
        4 => Ok(3),
        other => Err(Error::ArityMismatch {
            expected: 4,
            actual: other,
        }),
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameters of one gated-fusion layer. Inputs are rows, so `V₁ = a W₁`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FusionLayer {
    pub w1: ParamId,
    pub w2: ParamId,
    pub u1: ParamId,
    pub u2: ParamId,
}

impl FusionLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_uniform(format!("{name}.w1"), dim, dim, rng),
            w2: store.add_uniform(format!("{name}.w2"), dim, dim, rng),
            u1: store.add_uniform(format!("{name}.u1"), dim, dim, rng),
            u2: store.add_uniform(format!("{name}.u2"), dim, dim, rng),
        }
    }
}

/// Gate `t = σ(V₁U₁ + V₂U₂)` together with `V₁ = aW₁` and `V₂ = bW₂`.
pub fn fusion_gate(
    ctx: &mut Ctx<'_>,
    a: Var,
    b: Var,
    layer: &FusionLayer,
) -> Result<(Var, Var, Var)> {
    if ctx.tape.shape(a) != ctx.tape.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "gated fusion of {:?} and {:?}",
            ctx.tape.shape(a),
            ctx.tape.shape(b)
        )));
    }
    let v1 = ctx.tape.matmul(a, ctx.p(layer.w1))?;
    let v2 = ctx.tape.matmul(b, ctx.p(layer.w2))?;
    let g1 = ctx.tape.matmul(v1, ctx.p(layer.u1))?;
    let g2 = ctx.tape.matmul(v2, ctx.p(layer.u2))?;
    let logits = ctx.tape.add(g1, g2)?;
    Ok((ctx.tape.sigmoid(logits), v1, v2))
}

/// `t ⊙ V₁ + (1 − t) ⊙ V₂` with the gate of [`fusion_gate`].
pub fn gated_fuse(ctx: &mut Ctx<'_>, a: Var, b: Var, layer: &FusionLayer) -> Result<Var> {
    let (t, v1, v2) = fusion_gate(ctx, a, b, layer)?;
    let keep = ctx.tape.mul(t, v1)?;
    let one_minus_t = ctx.tape.affine(t, -1.0, 1.0);
    let rest = ctx.tape.mul(one_minus_t, v2)?;
    ctx.tape.add(keep, rest)
}

/// Reduces the JSR outputs to the image representation:
/// `K=1` identity, `K=2` one fusion, `K=4` `F₃(F₁(v₁,v₂), F₂(v₃,v₄))`.
pub fn fuse_tree(ctx: &mut Ctx<'_>, vectors: &[Var], layers: &[FusionLayer]) -> Result<Var> {
    let expected = fusion_layers_for(vectors.len())?;
    if layers.len() != expected {
        return Err(Error::ArityMismatch {
            expected: layers.len() + 1,
            actual: vectors.len(),
        });
    }
    match vectors {
        [v] => Ok(*v),
        [a, b] => gated_fuse(ctx, *a, *b, &layers[0]),
        [a, b, c, d] => {
            let left = gated_fuse(ctx, *a, *b, &layers[0])?;
            let right = gated_fuse(ctx, *c, *d, &layers[1])?;
            gated_fuse(ctx, left, right, &layers[2])
        }
        _ => unreachable!("arity checked above"),
    }
}

/// Per-image outputs of the visual encoder.
#[derive(Clone, Copy, Debug)]
pub struct VisualOutput {
    /// Final image representation, `1 × D_e`.
    pub rep: Var,
    /// Global node features after the separate-relations stage (or projection).
    pub global_nodes: Option<Var>,
    pub regional_nodes: Option<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    pub proj_global: Option<Projection>,
    pub proj_regional: Option<Projection>,
    pub ssr_global: Option<Gat>,
    pub ssr_regional: Option<Gat>,
    pub jsr: Vec<Gat>,
    pub fusion: Vec<FusionLayer>,
}

impl VisualEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: VisualConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d_o, d_e) = (c.feature_dim, c.embed_dim);
        let projection = |store: &mut ParamStore, name: &str, rng: &mut R| Projection {
            weight: store.add_uniform(format!("{name}.weight"), d_o, d_e, rng),
            bias: store.add_zeros(format!("{name}.bias"), 1, d_e),
        };
        let proj_global = c
            .use_global
            .then(|| projection(store, "visual.proj_global", rng));
        let proj_regional = c
            .use_regional
            .then(|| projection(store, "visual.proj_regional", rng));

        let gat = |store: &mut ParamStore, name: &str, rng: &mut R| {
            Gat::new(store, name, d_e, c.heads, c.gat_depth, c.use_bn, rng)
        };
        let ssr_global = if c.use_ssr && c.use_global {
            Some(gat(store, "visual.ssr_global", rng)?)
        } else {
            None
        };
        let ssr_regional = if c.use_ssr && c.use_regional {
            Some(gat(store, "visual.ssr_regional", rng)?)
        } else {
            None
        };
        let mut jsr = Vec::new();
        let n_fusion = if c.use_jsr {
            for k in 0..c.jsr_k {
                jsr.push(gat(store, &format!("visual.jsr{k}"), rng)?);
            }
            fusion_layers_for(c.jsr_k)?
        } else if c.use_global && c.use_regional {
            1
        } else {
            0
        };
        let fusion = (0..n_fusion)
            .map(|l| FusionLayer::new(store, &format!("visual.fusion{l}"), d_e, rng))
            .collect();
        Ok(Self {
            config,
            proj_global,
            proj_regional,
            ssr_global,
            ssr_regional,
            jsr,
            fusion,
        })
    }

    fn check_features(&self, fs: &FeatureSet) -> Result<()> {
        let d_o = self.config.feature_dim;
        if fs.global.ncols() != d_o || fs.regional.ncols() != d_o {
            return Err(Error::ShapeMismatch(format!(
                "features of dim {}/{} for a projection from {d_o}",
                fs.global.ncols(),
                fs.regional.ncols()
            )));
        }
        Ok(())
    }

    /// `V_F = F W_f + b_f`, `V_R = R W_r + b_r` for the enabled paths.
    pub fn project_features(
        &self,
        ctx: &mut Ctx<'_>,
        fs: &FeatureSet,
    ) -> Result<(Option<Var>, Option<Var>)> {
        self.check_features(fs)?;
        let mut project =
            |p: &Option<Projection>, x: &crate::diff::Tensor| -> Result<Option<Var>> {
                match p {
                    Some(p) => {
                        let x = ctx.tape.leaf(x.clone());
                        Ok(Some(ctx.tape.linear(
                            x,
                            ctx.p(p.weight),
                            Some(ctx.p(p.bias)),
                        )?))
                    }
                    None => Ok(None),
                }
            };
        let vf = project(&self.proj_global, &fs.global)?;
        let vr = project(&self.proj_regional, &fs.regional)?;
        Ok((vf, vr))
    }

    /// Separate semantic relations: independent GATs over the global and the
    /// regional graphs of every image in the batch.
    pub fn ssr_forward(
        &self,
        ctx: &mut Ctx<'_>,
        global: &[Var],
        regional: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let run = |ctx: &mut Ctx<'_>, gat: &Option<Gat>, nodes: &[Var]| match gat {
            Some(g) if !nodes.is_empty() => g.forward_batch(ctx, nodes),
            _ => Ok(nodes.to_vec()),
        };
        let g = run(ctx, &self.ssr_global, global)?;
        let r = run(ctx, &self.ssr_regional, regional)?;
        Ok((g, r))
    }

    /// Joint semantic relations: for each image, `V_U = [V_F*; V_R*]` and
    /// `V_C^k = mean(GAT_k(V_U))` for each of the K GATs.
    pub fn jsr_forward(
        &self,
        ctx: &mut Ctx<'_>,
        global: &[Var],
        regional: &[Var],
    ) -> Result<Vec<Vec<Var>>> {
        if global.len() != regional.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} global vs {} regional node sets",
                global.len(),
                regional.len()
            )));
        }
        let unified: Vec<Var> = global
            .iter()
            .zip(regional)
            .map(|(&g, &r)| ctx.tape.concat_rows(&[g, r]))
            .collect::<Result<_>>()?;
        let mut per_image = vec![Vec::with_capacity(self.jsr.len()); unified.len()];
        for gat in &self.jsr {
            let outs = gat.forward_batch(ctx, &unified)?;
            for (slot, out) in per_image.iter_mut().zip(outs) {
                slot.push(ctx.tape.mean_rows(out)?);
            }
        }
        Ok(per_image)
    }

    /// Encodes a batch of images. In training mode batch norm statistics are
    /// pooled over every node of every image in the batch.
    pub fn encode_batch(
        &self,
        ctx: &mut Ctx<'_>,
        images: &[&FeatureSet],
    ) -> Result<Vec<VisualOutput>> {
        let mut vf = Vec::with_capacity(images.len());
        let mut vr = Vec::with_capacity(images.len());
        for fs in images {
            let (g, r) = self.project_features(ctx, fs)?;
            vf.extend(g);
            vr.extend(r);
        }
        let (gf, gr) = self.ssr_forward(ctx, &vf, &vr)?;

        let c = &self.config;
        let reps: Vec<Var> = if c.use_jsr {
            let joint = self.jsr_forward(ctx, &gf, &gr)?;
            joint
                .iter()
                .map(|vs| fuse_tree(ctx, vs, &self.fusion))
                .collect::<Result<_>>()?
        } else if c.use_global && c.use_regional {
            gf.iter()
                .zip(&gr)
                .map(|(&g, &r)| {
                    let mg = ctx.tape.mean_rows(g)?;
                    let mr = ctx.tape.mean_rows(r)?;
                    gated_fuse(ctx, mg, mr, &self.fusion[0])
                })
                .collect::<Result<_>>()?
        } else {
            let single = if c.use_global { &gf } else { &gr };
            single
                .iter()
                .map(|&v| ctx.tape.mean_rows(v))
                .collect::<Result<_>>()?
        };

        Ok(reps
            .into_iter()
            .enumerate()
            .map(|(i, rep)| VisualOutput {
                rep,
                global_nodes: gf.get(i).copied(),
                regional_nodes: gr.get(i).copied(),
            })
            .collect())
    }
}
