#![allow(dead_code)]

use dsran::diff::{Tape, Tensor};
use dsran::params::{BnAccess, Ctx, ParamStore};
use dsran::relgraph::Gat;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

/// Runs `f` on a fresh tape with frozen batch-norm statistics.
pub fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Ctx<'_>) -> T) -> T {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &vars, BnAccess::Frozen(store.bn_states()));
    f(&mut ctx)
}

pub fn matmul_loops(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut out = Tensor::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Straight-line eval-mode graph attention: per head
/// `softmax(Q Kᵀ/√d) V`, concatenated, `W_o`, ReLU, frozen batch norm.
pub fn gat_oracle(store: &ParamStore, gat: &Gat, nodes: &Tensor) -> Tensor {
    let mut x = nodes.clone();
    for layer in &gat.layers {
        let n = x.nrows();
        let d = layer.head_dim;
        let mut joined = Tensor::zeros((n, layer.dim));
        for (h, head) in layer.heads.iter().enumerate() {
            let q = matmul_loops(&x, store.get(head.query));
            let k = matmul_loops(&x, store.get(head.key));
            let v = matmul_loops(&x, store.get(head.value));
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..d {
                    joined[[i, h * d + c]] = (0..n).map(|j| e[j] / z * v[[j, c]]).sum();
                }
            }
        }
        let mut out = matmul_loops(&joined, store.get(layer.output)).mapv(|v| v.max(0.0));
        if let Some(bn) = &layer.bn {
            let state = &store.bn_states()[bn.state.0];
            let gamma = store.get(bn.gamma);
            let beta = store.get(bn.beta);
            for i in 0..n {
                for c in 0..layer.dim {
                    let norm = (out[[i, c]] - state.running_mean[c])
                        / (state.running_var[c] + state.epsilon).sqrt();
                    out[[i, c]] = gamma[[0, c]] * norm + beta[[0, c]];
                }
            }
        }
        x = out;
    }
    x
}

pub mod oracles;
pub mod props;
