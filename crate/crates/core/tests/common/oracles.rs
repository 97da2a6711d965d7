//! Brute-force reference implementations compared against the library.

use dsran::diff::Tensor;
use dsran::evalkit::{ensemble, recall_at_k, Direction, SimilarityMatrix};
use dsran::matcher::{cosine_similarity_matrix, triplet_loss_value, LossConfig, Reduction};
use dsran::relgraph::build_graph;
use rand::Rng;

use super::rng;

/// Largest discrepancy seen for one function over every instance.
#[derive(Debug)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn scores<R: Rng>(r: &mut R, rows: usize, cols: usize, quantized: bool) -> Tensor {
    Tensor::from_shape_simple_fn((rows, cols), || {
        let v: f64 = r.random_range(-1.0..1.0);
        if quantized {
            (v * 5.0).round() / 5.0
        } else {
            v
        }
    })
}

fn beats(s: f64, i: usize, best: f64, j: usize) -> bool {
    s > best || (s == best && i < j)
}

/// Hits counted by comparing every candidate against the ground truth.
fn recall_hits(s: &Tensor, cpi: usize, dir: Direction, k: usize) -> usize {
    let (n, m) = s.dim();
    match dir {
        Direction::I2T => (0..n)
            .filter(|&i| {
                (i * cpi..(i + 1) * cpi).any(|t| {
                    let ahead = (0..m)
                        .filter(|&j| beats(s[[i, j]], j, s[[i, t]], t))
                        .count();
                    ahead < k
                })
            })
            .count(),
        Direction::T2I => (0..m)
            .filter(|&t| {
                let g = t / cpi;
                let ahead = (0..n)
                    .filter(|&j| beats(s[[j, t]], j, s[[g, t]], g))
                    .count();
                ahead < k
            })
            .count(),
    }
}

fn cosine_loops(a: &Tensor, b: &Tensor) -> Tensor {
    let norm = |t: &Tensor, i: usize| {
        (0..t.ncols())
            .map(|c| t[[i, c]] * t[[i, c]])
            .sum::<f64>()
            .sqrt()
    };
    let mut out = Tensor::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let dot: f64 = (0..a.ncols()).map(|c| a[[i, c]] * b[[j, c]]).sum();
            out[[i, j]] = dot / (norm(a, i) * norm(b, j));
        }
    }
    out
}

fn triplet_loops(s: &Tensor, margin: f64) -> f64 {
    let b = s.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let mut neg_img = None::<usize>;
        let mut neg_txt = None::<usize>;
        for j in 0..b {
            if j == i {
                continue;
            }
            if neg_img.is_none_or(|k| s[[j, i]] > s[[k, i]]) {
                neg_img = Some(j);
            }
            if neg_txt.is_none_or(|k| s[[i, j]] > s[[i, k]]) {
                neg_txt = Some(j);
            }
        }
        let pos = s[[i, i]];
        total += (margin + s[[neg_img.unwrap(), i]] - pos).max(0.0);
        total += (margin + s[[i, neg_txt.unwrap()]] - pos).max(0.0);
    }
    total
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs every oracle on `instances` seeded random inputs of up to 50 images × 250 texts.
pub fn run_all(instances: usize, seed: u64) -> Vec<OracleResult> {
    let mut r = rng(seed);
    let mut recall_err = 0.0f64;
    let mut cos_err = 0.0f64;
    let mut loss_err = 0.0f64;
    let mut graph_err = 0.0f64;
    let mut ens_err = 0.0f64;
    for inst in 0..instances {
        let n = r.random_range(1..=50);
        let cpi = r.random_range(1..=5);
        let quantized = inst % 3 == 0;

        let s = scores(&mut r, n, n * cpi, quantized);
        let sim = SimilarityMatrix::new(s.clone(), cpi).unwrap();
        for dir in [Direction::I2T, Direction::T2I] {
            let queries = match dir {
                Direction::I2T => n,
                Direction::T2I => n * cpi,
            };
            for k in [1, 5, 10, r.random_range(1..=queries.max(1))] {
                let got = recall_at_k(&sim, dir, k).unwrap();
                let hits = recall_hits(&s, cpi, dir, k);
                if got != 100.0 * hits as f64 / queries as f64 {
                    recall_err =
                        recall_err.max((got * queries as f64 / 100.0 - hits as f64).abs().max(1.0));
                }
            }
        }

        let dim = r.random_range(1..=16);
        let a = scores(&mut r, n, dim, false) + 1e-3;
        let b = scores(&mut r, n * cpi, dim, false) - 1e-3;
        let cos = cosine_similarity_matrix(&a, &b).unwrap();
        cos_err = cos_err.max(max_diff(&cos, &cosine_loops(&a, &b)));

        if n >= 2 {
            let batch = scores(&mut r, n, n, quantized);
            let margin = r.random_range(0.0..0.5);
            let cfg = LossConfig {
                margin,
                reduction: Reduction::Sum,
            };
            let got = triplet_loss_value(&batch, &cfg).unwrap();
            loss_err = loss_err.max((got - triplet_loops(&batch, margin)).abs());
        }

        let nodes = scores(&mut r, n, dim, false);
        let g = build_graph(&nodes).unwrap();
        let mut e = Tensor::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                e[[i, j]] = (0..dim).map(|c| nodes[[i, c]] * nodes[[j, c]]).sum();
            }
        }
        graph_err = graph_err.max(max_diff(&g.edges, &e));

        let other = SimilarityMatrix::new(scores(&mut r, n, n * cpi, false), cpi).unwrap();
        let ens = ensemble(&sim, &other).unwrap();
        let mut mean = Tensor::zeros(s.dim());
        for ((i, j), v) in mean.indexed_iter_mut() {
            *v = (s[[i, j]] + other.scores()[[i, j]]) / 2.0;
        }
        ens_err = ens_err.max(max_diff(ens.scores(), &mean));
    }
    let res = |name, max_error, tolerance| OracleResult {
        name,
        instances,
        max_error,
        tolerance,
    };
    vec![
        res("recall_at_k", recall_err, 0.0),
        res("cosine_similarity_matrix", cos_err, 1e-12),
        res("triplet_loss_hardest", loss_err, 1e-12),
        res("build_graph", graph_err, 1e-12),
        res("ensemble", ens_err, 1e-12),
    ]
}
