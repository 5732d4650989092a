//! Per-agent forward dynamics models `(o_i, a_i) -> o'_i`.
//!
//! The model input is the observation followed by a one-hot action. Gaussian
//! noise (for the degraded-model ablation) is only added on the prediction
//! paths used for rewards; training always regresses clean outputs.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{self, Mlp, MlpSpec, OptimState, OutputActivation};
use crate::sac::Transition;
use crate::tasks::{apply_mask, observe, TaskSpec, Visibility};
use crate::world::{apply_actions, DiscreteAction, Physics, WorldState};

/// One next-observation query: an observation already restricted to `mask`.
#[derive(Debug, Clone)]
pub struct PredictionQuery<'a> {
    pub obs: Vec<f64>,
    pub mask: &'a Visibility,
    pub action: DiscreteAction,
}

/// Anything that can predict an agent's next observation.
pub trait NextObsPredictor {
    fn obs_dim(&self) -> usize;

    fn predict_batch(
        &self,
        queries: &[PredictionQuery<'_>],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<f64>>>;

    fn predict_masked(
        &self,
        masked_obs: &[f64],
        mask: &Visibility,
        action: DiscreteAction,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        let q = PredictionQuery {
            obs: masked_obs.to_vec(),
            mask,
            action,
        };
        Ok(self
            .predict_batch(std::slice::from_ref(&q), rng)?
            .pop()
            .expect("one query in, one prediction out"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub owner: usize,
    pub noise_sigma: f64,
}

impl DynamicsModel {
    pub fn new(obs_dim: usize, hidden: &[usize], owner: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::with_hidden(
            obs_dim + DiscreteAction::COUNT,
            hidden,
            obs_dim,
            OutputActivation::Identity,
        )?;
        Ok(Self {
            net: Mlp::new(spec, seed),
            owner,
            noise_sigma: 0.0,
        })
    }

    pub fn with_noise(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be non-negative, got {sigma}"
            )));
        }
        self.noise_sigma = sigma;
        Ok(self)
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec.output_dim()
    }

    fn input_row(&self, obs: &[f64], action: DiscreteAction, row: &mut [f64]) -> Result<()> {
        if obs.len() != self.obs_dim() {
            return Err(Error::dim("dynamics observation", self.obs_dim(), obs.len()));
        }
        row[..obs.len()].copy_from_slice(obs);
        row[obs.len()..].copy_from_slice(&action.one_hot());
        Ok(())
    }

    fn inputs<'a>(
        &self,
        rows: impl ExactSizeIterator<Item = (&'a [f64], DiscreteAction)>,
    ) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((rows.len(), self.net.spec.input_dim()));
        for (mut row, (obs, action)) in x.rows_mut().into_iter().zip(rows) {
            self.input_row(obs, action, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }

    /// Noise-free predictions for a batch of `(obs, action)` rows.
    pub fn predict_clean_batch<'a>(
        &self,
        rows: impl ExactSizeIterator<Item = (&'a [f64], DiscreteAction)>,
    ) -> Result<Array2<f64>> {
        let x = self.inputs(rows)?;
        self.net.forward_batch(x.view())
    }

    pub fn predict_clean(&self, obs: &[f64], action: DiscreteAction) -> Result<Vec<f64>> {
        let out = self.predict_clean_batch(std::iter::once((obs, action)))?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    fn add_noise(&self, out: &mut Array2<f64>, rng: &mut dyn RngCore) {
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            out.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }

    /// Forward pass on `[obs, one_hot(action)]`, plus configured noise.
    pub fn predict(
        &self,
        obs: &[f64],
        action: DiscreteAction,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        let mut out = self.predict_clean_batch(std::iter::once((obs, action)))?;
        self.add_noise(&mut out, rng);
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Prediction from an observation with masked-out entities zeroed.
    /// Masking acts only through the input.
    pub fn masked_predict(
        &self,
        obs_masked: &[f64],
        action: DiscreteAction,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        self.predict(obs_masked, action, rng)
    }

    /// Mean over the sample of `||o' - f(o, a)||^2`, noise-free.
    pub fn mse(&self, sample: &[&Transition]) -> Result<f64> {
        if sample.is_empty() {
            return Err(Error::EmptySample);
        }
        let pred = self.predict_clean_batch(sample.iter().map(|t| (t.obs.as_slice(), t.action)))?;
        let targets = self.targets(sample)?;
        Ok((&pred - &targets).mapv(|v| v * v).sum() / sample.len() as f64)
    }

    fn targets(&self, sample: &[&Transition]) -> Result<Array2<f64>> {
        let d = self.obs_dim();
        let mut y = Array2::zeros((sample.len(), d));
        for (mut row, t) in y.rows_mut().into_iter().zip(sample) {
            if t.next_obs.len() != d {
                return Err(Error::dim("dynamics target", d, t.next_obs.len()));
            }
            row.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&t.next_obs);
        }
        Ok(y)
    }

    /// Loss `mean_b ||y_b - f(x_b)||^2` and its parameter gradient.
    pub fn loss_and_grad(&self, sample: &[&Transition]) -> Result<(f64, nn::Gradients)> {
        if sample.is_empty() {
            return Err(Error::EmptySample);
        }
        let x = self.inputs(sample.iter().map(|t| (t.obs.as_slice(), t.action)))?;
        let y = self.targets(sample)?;
        loss_and_grad(&self.net, x.view(), y.view())
    }

    /// One shuffled pass of minibatch Adam steps over `sample`. Returns the
    /// sample MSE measured with the parameters from before the pass.
    pub fn train_epoch(
        &mut self,
        sample: &[&Transition],
        batch_size: usize,
        opt: &mut OptimState,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        if sample.is_empty() {
            return Err(Error::EmptySample);
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let before = self.mse(sample)?;
        let mut order: Vec<usize> = (0..sample.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| sample[i]).collect();
            let (_, grads) = self.loss_and_grad(&batch)?;
            nn::step(&mut self.net.params, &grads, opt)?;
        }
        Ok(before)
    }
}

/// Squared-error regression loss `mean_b ||y_b - f(x_b)||^2` and gradient.
pub fn loss_and_grad(
    net: &Mlp,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(f64, nn::Gradients)> {
    let tape = net.forward_tape(inputs)?;
    if tape.output().dim() != targets.dim() {
        return Err(Error::dim(
            "dynamics targets",
            tape.output().len(),
            targets.len(),
        ));
    }
    let n = inputs.nrows() as f64;
    let diff = tape.output() - &targets;
    let loss = diff.mapv(|v| v * v).sum() / n;
    let upstream = diff * (2.0 / n);
    let (grads, _) = net.backward_batch(&tape, upstream.view())?;
    Ok((loss, grads))
}

impl NextObsPredictor for DynamicsModel {
    fn obs_dim(&self) -> usize {
        DynamicsModel::obs_dim(self)
    }

    fn predict_batch(
        &self,
        queries: &[PredictionQuery<'_>],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = self.predict_clean_batch(queries.iter().map(|q| (q.obs.as_slice(), q.action)))?;
        self.add_noise(&mut out, rng);
        Ok(out.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// The environment's own transition map for one agent of one recorded step:
/// steps the world under the recorded joint action, observes, and restricts
/// to the query's mask. Exact by construction; used to validate reward code.
#[derive(Debug, Clone)]
pub struct TrueDynamics<'a> {
    pub spec: &'a TaskSpec,
    pub physics: Physics,
    pub before: &'a WorldState,
    pub joint_action: &'a [DiscreteAction],
    pub agent: usize,
}

impl NextObsPredictor for TrueDynamics<'_> {
    fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    fn predict_batch(
        &self,
        queries: &[PredictionQuery<'_>],
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<f64>>> {
        let after = apply_actions(self.before, self.joint_action, &self.physics)?;
        let next = observe(&after, self.agent, self.spec)?;
        let layout = self.spec.layout();
        queries
            .iter()
            .map(|q| {
                if q.action != self.joint_action[self.agent] {
                    return Err(Error::InvalidConfig(
                        "true dynamics queried with an action that was not taken".into(),
                    ));
                }
                let mut values = next.values.clone();
                apply_mask(&mut values, q.mask, &layout)?;
                Ok(values)
            })
            .collect()
    }
}
