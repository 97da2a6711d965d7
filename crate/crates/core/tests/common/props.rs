//! Attention-level property checks shared by the property suite and the
//! acceptance run.

use dsran::diff::{Tape, Tensor};
use dsran::params::ParamStore;
use dsran::relgraph::Gat;
use dsran::visual::{fusion_gate, gated_fuse, FusionLayer};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{eval, random, rng};

pub fn matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(-scale..scale, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

pub fn check_softmax(x: &Tensor) -> Result<(), TestCaseError> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.softmax_rows(v).unwrap();
    for row in tape.value(s).rows() {
        let sum: f64 = row.sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "row sums to {sum}");
        prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    Ok(())
}

/// `(seed, nodes, heads, head_dim, permutation)`.
pub type GatCase = (u64, usize, usize, usize, Vec<usize>);

pub fn gat_case() -> impl Strategy<Value = GatCase> {
    (
        any::<u64>(),
        1usize..10,
        prop_oneof![Just(1usize), Just(2), Just(4)],
        1usize..4,
    )
        .prop_flat_map(|(seed, n, heads, hd)| {
            let perm = Just((0..n).collect::<Vec<_>>()).prop_shuffle();
            (Just(seed), Just(n), Just(heads), Just(hd), perm)
        })
}

fn perturbed_gat(seed: u64, dim: usize, heads: usize) -> (ParamStore, Gat) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let gat = Gat::new(&mut store, "g", dim, heads, 1, true, &mut r).unwrap();
    for st in store.bn_states_mut() {
        for v in st.running_mean.iter_mut() {
            *v = rand::Rng::random_range(&mut r, -0.5..0.5);
        }
        for v in st.running_var.iter_mut() {
            *v = rand::Rng::random_range(&mut r, 0.25..4.0);
        }
    }
    (store, gat)
}

/// `GAT(P V) = P GAT(V)` in eval mode.
pub fn check_gat_equivariance(case: &GatCase) -> Result<(), TestCaseError> {
    let (seed, n, heads, hd, perm) = case;
    let dim = heads * hd;
    let (store, gat) = perturbed_gat(*seed, dim, *heads);
    let nodes = random(*n, dim, seed.wrapping_add(1)) * 2.0;
    let run = |x: &Tensor| {
        eval(&store, |ctx| {
            let v = ctx.tape.leaf(x.clone());
            let out = gat.forward(ctx, v).unwrap();
            ctx.tape.value(out).clone()
        })
    };
    let out = run(&nodes);
    let permuted = run(&nodes.select(Axis(0), perm));
    let expected = out.select(Axis(0), perm);
    let worst = permuted
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    prop_assert!(worst <= 1e-9, "equivariance error {worst}");
    Ok(())
}

/// `(seed, dim, input scale)`.
pub type FusionCase = (u64, usize, f64);

pub fn fusion_case() -> impl Strategy<Value = FusionCase> {
    (any::<u64>(), 1usize..9, 0.1f64..4.0)
}

/// Gate strictly inside (0, 1) and every fused coordinate between the
/// corresponding coordinates of the two projected inputs.
pub fn check_fusion(case: &FusionCase) -> Result<(), TestCaseError> {
    let (seed, dim, scale) = *case;
    let mut store = ParamStore::new();
    let layer = FusionLayer::new(&mut store, "f", dim, &mut rng(seed));
    let a = random(1, dim, seed.wrapping_add(1)) * scale;
    let b = random(1, dim, seed.wrapping_add(2)) * scale;
    let (t, v1, v2, out) = eval(&store, |ctx| {
        let av = ctx.tape.leaf(a.clone());
        let bv = ctx.tape.leaf(b.clone());
        let (t, v1, v2) = fusion_gate(ctx, av, bv, &layer).unwrap();
        let out = gated_fuse(ctx, av, bv, &layer).unwrap();
        let val = |v| ctx.tape.value(v).clone();
        (val(t), val(v1), val(v2), val(out))
    });
    for &g in &t {
        prop_assert!(g > 0.0 && g < 1.0, "gate {g}");
    }
    for j in 0..dim {
        let (x, y, o) = (v1[[0, j]], v2[[0, j]], out[[0, j]]);
        // t·x + (1 − t)·y rounds at most a few ulps past the endpoints.
        let slack = 4.0 * f64::EPSILON * x.abs().max(y.abs());
        prop_assert!(
            o >= x.min(y) - slack && o <= x.max(y) + slack,
            "{o} outside [{x}, {y}]"
        );
    }
    Ok(())
}
