use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor, so gradients near zero are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many seeded-random coordinates per parameter tensor.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-4,
            abs_floor: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub coords_checked: usize,
    /// `(param index, row, col)` of the largest discrepancy.
    pub worst: Option<(usize, usize, usize)>,
    pub params: Vec<ParamCheck>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::ShapeMismatch(format!(
            "gradcheck function must return a scalar, got {:?}",
            tape.shape(out)
        )));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck function value".into()));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// finite differences at `params`.
pub fn gradcheck<F>(f: F, params: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, params)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        tol: opts.tol,
        passed: false,
        coords_checked: 0,
        worst: None,
        params: Vec::with_capacity(params.len()),
    };

    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(vars[pi], p.dim());
        let cols = p.ncols();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(max) if max < p.len() => {
                let mut picked = sample(&mut rng, p.len(), max).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..p.len()).collect(),
        };
        let mut worst_here = 0.0f64;
        for &flat in &coords {
            let idx = (flat / cols, flat % cols);
            let orig = work[pi][idx];
            work[pi][idx] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            let f_plus = plus.0.scalar(plus.2);
            work[pi][idx] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            let f_minus = minus.0.scalar(minus.2);
            work[pi][idx] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * opts.step);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::NonFinite("gradcheck comparison".into()));
            }
            if rel > worst_here {
                worst_here = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((pi, idx.0, idx.1));
                }
            }
        }
        report.coords_checked += coords.len();
        report.params.push(ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            max_rel_error: worst_here,
        });
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
