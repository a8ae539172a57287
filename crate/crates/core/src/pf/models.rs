use super::{FilterModel, Proposal, WeightTerm};
use crate::autodiff::{ParameterStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::flows::{FlowModel, ProposalMode};
use crate::scalar::Scalar;
use crate::ssm::LgssmParams;

fn repeat<S: Scalar>(tape: &mut Tape<S>, y: Var, n: usize) -> Var {
    let row = tape.value(y).data().to_vec();
    tape.constant(Tensor::repeat_row(&row, n))
}

impl<S: Scalar> FilterModel<S> for FlowModel {
    fn state_dim(&self) -> usize {
        FlowModel::state_dim(self)
    }

    fn obs_dim(&self) -> usize {
        FlowModel::obs_dim(self)
    }

    fn propose(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        prev: Var,
        y: Var,
        noise: Var,
    ) -> Result<Proposal> {
        let n = tape.shape(prev).0;
        let ys = repeat(tape, y, n);
        match self.mode {
            ProposalMode::Bootstrap => {
                let x = self.dynamic.sample(tape, store, prev, noise)?.value;
                let obs = self.measurement.log_likelihood(tape, store, ys, x)?;
                Ok(Proposal {
                    states: x,
                    terms: vec![
                        (WeightTerm::ObservationBase, obs.base),
                        (WeightTerm::ObservationLogDet, obs.logdet),
                    ],
                })
            }
            ProposalMode::Learned => {
                let q = self.proposal.sample(tape, store, prev, ys, noise)?;
                let x = q.value;
                let trans = self.dynamic.log_density(tape, store, x, prev)?;
                let obs = self.measurement.log_likelihood(tape, store, ys, x)?;
                Ok(Proposal {
                    states: x,
                    terms: vec![
                        (WeightTerm::ObservationBase, obs.base),
                        (WeightTerm::ObservationLogDet, obs.logdet),
                        (WeightTerm::TransitionBase, trans.base),
                        (WeightTerm::TransitionLogDet, trans.logdet),
                        (WeightTerm::ProposalBase, q.density.base),
                        (WeightTerm::ProposalLogDet, q.density.logdet),
                    ],
                })
            }
        }
    }
}

/// Bootstrap filter for the linear Gaussian model with known parameters.
/// The weight is the full Gaussian observation log-density.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel<S> {
    /// `θ₁ᵀ`, so that `x_t = x_{t−1}·θ₁ᵀ` row-wise.
    transition_t: Tensor<S>,
    observation_t: Tensor<S>,
    obs_log_std: S,
}

impl<S: Scalar> LinearGaussianModel<S> {
    pub fn new(params: &LgssmParams) -> Self {
        let to_tensor = |m: &nalgebra::DMatrix<f64>| {
            let data: Vec<f64> = (0..m.ncols())
                .flat_map(|r| (0..m.nrows()).map(move |c| m[(c, r)]))
                .collect();
            Tensor::from_f64(m.ncols(), m.nrows(), &data).expect("sized")
        };
        LinearGaussianModel {
            transition_t: to_tensor(&params.theta1),
            observation_t: to_tensor(&params.theta2),
            obs_log_std: S::of(0.5 * params.obs_var.ln()),
        }
    }
}

impl<S: Scalar> FilterModel<S> for LinearGaussianModel<S> {
    fn state_dim(&self) -> usize {
        self.transition_t.rows()
    }

    fn obs_dim(&self) -> usize {
        self.observation_t.cols()
    }

    fn propose(
        &self,
        tape: &mut Tape<S>,
        _store: &ParameterStore<S>,
        prev: Var,
        y: Var,
        noise: Var,
    ) -> Result<Proposal> {
        let a = tape.constant(self.transition_t.clone());
        let mean = tape.matmul(prev, a)?;
        let x = tape.add(mean, noise)?;
        let h = tape.constant(self.observation_t.clone());
        let y_mean = tape.matmul(x, h)?;
        let ls = tape.constant(Tensor::filled(1, self.obs_dim(), self.obs_log_std));
        let obs = tape.gaussian_log_density(y, y_mean, ls)?;
        Ok(Proposal {
            states: x,
            terms: vec![(WeightTerm::ObservationBase, obs)],
        })
    }
}
