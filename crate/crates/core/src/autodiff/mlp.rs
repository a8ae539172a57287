use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fully connected network: tanh on hidden layers, identity on the output.
///
/// Weights live in a [`ParameterStore`] under `{prefix}.w{k}` / `{prefix}.b{k}`.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths[1..].contains(&0) {
            return Err(Error::invalid(format!("bad mlp widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (k, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<S> = (0..fan_in * fan_out)
                .map(|_| S::of(rng.random_range(-bound..=bound)))
                .collect();
            let w = store.add(format!("{prefix}.w{k}"), Tensor::from_vec(fan_in, fan_out, w)?)?;
            let b = store.add(format!("{prefix}.b{k}"), Tensor::zeros(1, fan_out))?;
            layers.push((w, b));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Sets the last layer's weights and bias to zero, so the output is
    /// identically zero.
    pub fn zero_output_layer<S: Scalar>(&self, store: &mut ParameterStore<S>) {
        let &(w, b) = self.layers.last().expect("non-empty");
        store.value_mut(w).fill(S::zero());
        store.value_mut(b).fill(S::zero());
    }

    /// Applies the network row-wise to `input` (`batch×in`), giving `batch×out`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        input: Var,
    ) -> Result<Var> {
        let (rows, cols) = tape.shape(input);
        if cols != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                lhs: (rows, self.input_width()),
                rhs: (rows, cols),
            });
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.linear(h, w, b)?;
            if k < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}
