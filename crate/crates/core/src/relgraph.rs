//! Graph attention over fully-connected node sets.
//!
//! A [`GatLayer`] computes, per head `h`,
//! `softmax_j((V W_q^h)(V W_k^h)ᵀ / √d) · V W_v^h`, concatenates the heads,
//! maps them through `W_o`, applies ReLU and (optionally) batch norm.
//! Every node attends to every node including itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{BnAccess, BnLayer, Ctx, ParamId, ParamStore};

/// Fully-connected graph with its affinity edge matrix `E = V Vᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelGraph {
    pub nodes: Tensor,
    pub edges: Tensor,
}

pub fn build_graph(nodes: &Tensor) -> Result<RelGraph> {
    if nodes.nrows() == 0 {
        return Err(Error::EmptyInput("graph with no nodes".into()));
    }
    if nodes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graph node features".into()));
    }
    let edges = nodes.dot(&nodes.t());
    Ok(RelGraph {
        nodes: nodes.clone(),
        edges,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatLayer {
    pub dim: usize,
    pub head_dim: usize,
    pub heads: Vec<HeadParams>,
    pub output: ParamId,
    pub bn: Option<BnLayer>,
}

impl GatLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        use_bn: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "head count {heads} must divide embedding dim {dim}"
            )));
        }
        let head_dim = dim / heads;
        let heads = (0..heads)
            .map(|h| HeadParams {
                query: store.add_uniform(format!("{name}.head{h}.w_q"), dim, head_dim, rng),
                key: store.add_uniform(format!("{name}.head{h}.w_k"), dim, head_dim, rng),
                value: store.add_uniform(format!("{name}.head{h}.w_v"), dim, head_dim, rng),
            })
            .collect();
        let output = store.add_uniform(format!("{name}.w_o"), dim, dim, rng);
        let bn = use_bn.then(|| store.add_batchnorm(&format!("{name}.bn"), dim));
        Ok(Self {
            dim,
            head_dim,
            heads,
            output,
            bn,
        })
    }

    fn check_nodes(&self, tape: &Tape, nodes: Var) -> Result<()> {
        let (n, d) = tape.shape(nodes);
        if d != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "graph attention over dim {}, nodes have dim {d}",
                self.dim
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("graph with no nodes".into()));
        }
        Ok(())
    }

    /// Row-stochastic `N × N` attention of head `head`.
    pub fn attention(&self, ctx: &mut Ctx<'_>, nodes: Var, head: usize) -> Result<Var> {
        self.check_nodes(ctx.tape, nodes)?;
        let hp = self
            .heads
            .get(head)
            .ok_or_else(|| Error::ShapeMismatch(format!("head {head} of {}", self.heads.len())))?;
        let q = ctx.tape.matmul(nodes, ctx.p(hp.query))?;
        let k = ctx.tape.matmul(nodes, ctx.p(hp.key))?;
        let logits = ctx
            .tape
            .scaled_dot(q, k, 1.0 / (self.head_dim as f64).sqrt())?;
        ctx.tape.softmax_rows(logits)
    }

    /// `ReLU(W_o · concat_h(head_h))` for one graph, before batch norm.
    fn aggregate(&self, ctx: &mut Ctx<'_>, nodes: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for (h, hp) in self.heads.iter().enumerate() {
            let alpha = self.attention(ctx, nodes, h)?;
            let v = ctx.tape.matmul(nodes, ctx.p(hp.value))?;
            outs.push(ctx.tape.matmul(alpha, v)?);
        }
        let joined = ctx.tape.concat_cols(&outs)?;
        let mixed = ctx.tape.matmul(joined, ctx.p(self.output))?;
        Ok(ctx.tape.relu(mixed))
    }

    /// Runs the layer over several graphs at once. Batch norm statistics are
    /// pooled over every node of every graph.
    pub fn forward_batch(&self, ctx: &mut Ctx<'_>, graphs: &[Var]) -> Result<Vec<Var>> {
        let pre: Vec<Var> = graphs
            .iter()
            .map(|&g| self.aggregate(ctx, g))
            .collect::<Result<_>>()?;
        let Some(bn) = &self.bn else {
            return Ok(pre);
        };
        if pre.len() == 1 {
            return Ok(vec![ctx.batchnorm(pre[0], bn)?]);
        }
        let sizes: Vec<usize> = pre.iter().map(|&v| ctx.tape.shape(v).0).collect();
        let stacked = ctx.tape.concat_rows(&pre)?;
        let normed = ctx.batchnorm(stacked, bn)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for n in sizes {
            out.push(ctx.tape.slice_rows(normed, start, start + n)?);
            start += n;
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, nodes: Var) -> Result<Var> {
        Ok(self.forward_batch(ctx, &[nodes])?.remove(0))
    }
}

/// Stack of graph attention layers applied in sequence (depth 1 by default).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gat {
    pub layers: Vec<GatLayer>,
}

impl Gat {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        use_bn: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("graph attention depth must be ≥ 1".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                let layer_name = if depth == 1 {
                    name.to_string()
                } else {
                    format!("{name}.layer{l}")
                };
                GatLayer::new(store, &layer_name, dim, heads, use_bn, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward_batch(&self, ctx: &mut Ctx<'_>, graphs: &[Var]) -> Result<Vec<Var>> {
        let mut cur = graphs.to_vec();
        for layer in &self.layers {
            cur = layer.forward_batch(ctx, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, nodes: Var) -> Result<Var> {
        Ok(self.forward_batch(ctx, &[nodes])?.remove(0))
    }

    /// Eval-mode output for a standalone graph.
    pub fn forward_eval(&self, store: &ParamStore, graph: &RelGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, BnAccess::Frozen(store.bn_states()));
        let nodes = ctx.tape.leaf(graph.nodes.clone());
        let out = self.forward(&mut ctx, nodes)?;
        Ok(tape.value(out).clone())
    }

    /// Attention coefficients of `head` in the first layer for a standalone graph.
    pub fn attention_coefficients(
        &self,
        store: &ParamStore,
        graph: &RelGraph,
        head: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, BnAccess::Frozen(store.bn_states()));
        let nodes = ctx.tape.leaf(graph.nodes.clone());
        let alpha = self.layers[0].attention(&mut ctx, nodes, head)?;
        Ok(tape.value(alpha).clone())
    }
}
