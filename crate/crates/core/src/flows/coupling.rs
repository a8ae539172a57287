use rand::Rng;

use crate::autodiff::{Mlp, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine coupling layer.
///
/// The `kept` coordinates pass through unchanged and, together with the
/// conditioner, feed a scale net `s` and a shift net `t`. The `transformed`
/// coordinates become `x·exp(s) + t`, so `log|det J| = Σ s`. Scale outputs are
/// clamped to `[-clamp, clamp]` before exponentiation.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    dim: usize,
    cond_dim: usize,
    kept: Vec<usize>,
    transformed: Vec<usize>,
    /// Column order that maps `[kept | transformed]` back to `0..dim`.
    restore: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
    clamp: f64,
}

impl AffineCoupling {
    /// Builds a layer that transforms `transformed` given the remaining
    /// coordinates. Both nets have one tanh hidden layer of width `hidden` and
    /// start with a zeroed output layer, i.e. as the identity map.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        dim: usize,
        transformed: &[usize],
        cond_dim: usize,
        hidden: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if transformed.is_empty() || transformed.iter().any(|&i| i >= dim) {
            return Err(Error::invalid(format!(
                "coupling mask {transformed:?} invalid for dimension {dim}"
            )));
        }
        let kept: Vec<usize> = (0..dim).filter(|i| !transformed.contains(i)).collect();
        let input = kept.len() + cond_dim;
        if input == 0 {
            return Err(Error::invalid(
                "coupling layer needs kept coordinates or a conditioner",
            ));
        }
        let order: Vec<usize> = kept.iter().chain(transformed).copied().collect();
        let mut restore = vec![0; dim];
        for (pos, &orig) in order.iter().enumerate() {
            restore[orig] = pos;
        }
        let widths = [input, hidden, transformed.len()];
        let scale_net = Mlp::new(store, &format!("{prefix}.scale"), &widths, rng)?;
        let shift_net = Mlp::new(store, &format!("{prefix}.shift"), &widths, rng)?;
        scale_net.zero_output_layer(store);
        shift_net.zero_output_layer(store);
        Ok(AffineCoupling {
            dim,
            cond_dim,
            kept,
            transformed: transformed.to_vec(),
            restore,
            scale_net,
            shift_net,
            clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.scale_net
            .param_ids()
            .chain(self.shift_net.param_ids())
            .collect()
    }

    fn check_inputs<S: Scalar>(
        &self,
        tape: &Tape<S>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<()> {
        let (rows, cols) = tape.shape(x);
        if cols != self.dim {
            return Err(Error::ShapeMismatch {
                op: "coupling input",
                lhs: (rows, self.dim),
                rhs: (rows, cols),
            });
        }
        if let Some(i) = tape.value(x).first_non_finite() {
            return Err(Error::NonFinite {
                context: "coupling input",
                index: i,
            });
        }
        match cond {
            Some(c) => {
                let sc = tape.shape(c);
                if sc != (rows, self.cond_dim) {
                    return Err(Error::ShapeMismatch {
                        op: "coupling conditioner",
                        lhs: (rows, self.cond_dim),
                        rhs: sc,
                    });
                }
                if let Some(i) = tape.value(c).first_non_finite() {
                    return Err(Error::NonFinite {
                        context: "coupling conditioner",
                        index: i,
                    });
                }
            }
            None if self.cond_dim > 0 => {
                return Err(Error::invalid("conditional coupling called without conditioner"))
            }
            None => {}
        }
        Ok(())
    }

    /// `(scale, shift)` from the kept coordinates and conditioner.
    fn scale_shift<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        kept: Option<Var>,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let input = match (kept, cond) {
            (Some(k), Some(c)) => tape.concat_cols(&[k, c])?,
            (Some(k), None) => k,
            (None, Some(c)) => c,
            (None, None) => unreachable!("checked at construction"),
        };
        let raw = self.scale_net.forward(tape, store, input)?;
        let c = S::of(self.clamp);
        let s = tape.clamp(raw, -c, c);
        let t = self.shift_net.forward(tape, store, input)?;
        Ok((s, t))
    }

    /// Returns `(y, log|det ∂y/∂x|)` with the log-determinant as a `rows×1` column.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.check_inputs(tape, x, cond)?;
        let kept = if self.kept.is_empty() {
            None
        } else {
            Some(tape.select_cols(x, &self.kept)?)
        };
        let xt = tape.select_cols(x, &self.transformed)?;
        let (s, t) = self.scale_shift(tape, store, kept, cond)?;
        let es = tape.exp(s);
        let scaled = tape.mul(xt, es)?;
        let yt = tape.add(scaled, t)?;
        let y = self.assemble(tape, kept, yt)?;
        let logdet = tape.sum_cols(s);
        Ok((y, logdet))
    }

    /// Returns `(x, log|det ∂x/∂y|)`; the log-determinant is the negated
    /// forward log-determinant at the matched point.
    pub fn inverse<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        y: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.check_inputs(tape, y, cond)?;
        let kept = if self.kept.is_empty() {
            None
        } else {
            Some(tape.select_cols(y, &self.kept)?)
        };
        let yt = tape.select_cols(y, &self.transformed)?;
        let (s, t) = self.scale_shift(tape, store, kept, cond)?;
        let centred = tape.sub(yt, t)?;
        let neg_s = tape.neg(s);
        let inv_scale = tape.exp(neg_s);
        let xt = tape.mul(centred, inv_scale)?;
        let x = self.assemble(tape, kept, xt)?;
        let sum = tape.sum_cols(s);
        let logdet = tape.neg(sum);
        Ok((x, logdet))
    }

    fn assemble<S: Scalar>(&self, tape: &mut Tape<S>, kept: Option<Var>, moved: Var) -> Result<Var> {
        match kept {
            None => Ok(moved),
            Some(k) => {
                let joined = tape.concat_cols(&[k, moved])?;
                tape.select_cols(joined, &self.restore)
            }
        }
    }
}

/// Elementwise affine map `y = x·exp(log_scale) + shift` with learnable
/// per-coordinate parameters. Used for one-dimensional unconditioned flows,
/// where a coupling split has nothing to condition on.
#[derive(Clone, Debug)]
pub struct ElementwiseAffine {
    dim: usize,
    log_scale: ParamId,
    shift: ParamId,
}

impl ElementwiseAffine {
    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, prefix: &str, dim: usize) -> Result<Self> {
        let log_scale = store.add(format!("{prefix}.log_scale"), Tensor::zeros(1, dim))?;
        let shift = store.add(format!("{prefix}.shift"), Tensor::zeros(1, dim))?;
        Ok(ElementwiseAffine {
            dim,
            log_scale,
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_scale_id(&self) -> ParamId {
        self.log_scale
    }

    pub fn shift_id(&self) -> ParamId {
        self.shift
    }

    fn check<S: Scalar>(&self, tape: &Tape<S>, x: Var) -> Result<()> {
        let (rows, cols) = tape.shape(x);
        if cols != self.dim {
            return Err(Error::ShapeMismatch {
                op: "elementwise affine input",
                lhs: (rows, self.dim),
                rhs: (rows, cols),
            });
        }
        if let Some(i) = tape.value(x).first_non_finite() {
            return Err(Error::NonFinite {
                context: "elementwise affine input",
                index: i,
            });
        }
        Ok(())
    }

    fn logdet_column<S: Scalar>(&self, tape: &mut Tape<S>, ls: Var, rows: usize, sign: S) -> Result<Var> {
        let total = tape.sum(ls);
        let total = tape.scale(total, sign);
        let zeros = tape.constant(Tensor::zeros(rows, 1));
        tape.add(zeros, total)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: Var,
    ) -> Result<(Var, Var)> {
        self.check(tape, x)?;
        let ls = tape.param(store, self.log_scale);
        let sh = tape.param(store, self.shift);
        let e = tape.exp(ls);
        let scaled = tape.mul(x, e)?;
        let y = tape.add(scaled, sh)?;
        let rows = tape.shape(x).0;
        let logdet = self.logdet_column(tape, ls, rows, S::one())?;
        Ok((y, logdet))
    }

    pub fn inverse<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        y: Var,
    ) -> Result<(Var, Var)> {
        self.check(tape, y)?;
        let ls = tape.param(store, self.log_scale);
        let sh = tape.param(store, self.shift);
        let centred = tape.sub(y, sh)?;
        let neg = tape.neg(ls);
        let e = tape.exp(neg);
        let x = tape.mul(centred, e)?;
        let rows = tape.shape(y).0;
        let logdet = self.logdet_column(tape, ls, rows, -S::one())?;
        Ok((x, logdet))
    }
}
