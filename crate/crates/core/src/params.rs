//! Flat parameter storage shared by the encoders, the optimizer and checkpoints.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{batchnorm_eval, batchnorm_train, BatchNormState, Mode, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BnId(pub usize);

/// A batch-norm layer: trainable affine plus its running statistics slot.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Weight matrix with entries uniform in `±1/√rows` (rows = fan-in).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add_uniform_bounded(name, rows, cols, 1.0 / (rows as f64).sqrt(), rng)
    }

    pub fn add_uniform_bounded<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros((rows, cols)))
    }

    pub fn add_batchnorm(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.add(format!("{name}.gamma"), Tensor::ones((1, channels)));
        let beta = self.add_zeros(format!("{name}.beta"), 1, channels);
        self.bn_names.push(name.to_string());
        self.bn.push(BatchNormState::new(channels));
        BnLayer {
            gamma,
            beta,
            state: BnId(self.bn.len() - 1),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`, indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }
}

/// Batch-norm statistics access for one forward pass; the variant decides the mode.
pub enum BnAccess<'a> {
    Update(&'a mut [BatchNormState]),
    Frozen(&'a [BatchNormState]),
}

/// Everything a forward pass needs: the tape, the bound parameter leaves and
/// batch-norm statistics.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    vars: &'a [Var],
    bn: BnAccess<'a>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, vars: &'a [Var], bn: BnAccess<'a>) -> Self {
        Self { tape, vars, bn }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn mode(&self) -> Mode {
        match self.bn {
            BnAccess::Update(_) => Mode::Training,
            BnAccess::Frozen(_) => Mode::Eval,
        }
    }

    pub fn batchnorm(&mut self, x: Var, layer: &BnLayer) -> Result<Var> {
        let (gamma, beta) = (self.p(layer.gamma), self.p(layer.beta));
        match &mut self.bn {
            BnAccess::Update(states) => {
                batchnorm_train(self.tape, x, gamma, beta, &mut states[layer.state.0])
            }
            BnAccess::Frozen(states) => {
                batchnorm_eval(self.tape, x, gamma, beta, &states[layer.state.0])
            }
        }
    }
}
