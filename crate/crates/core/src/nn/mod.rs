//! Dense multilayer perceptrons with exact reverse-mode gradients.
//!
//! Everything is `f64`. Batched passes take row-major `(batch, features)`
//! matrices; the single-sample helpers wrap them with a batch of one.
//! Parameter gradients produced by the batched backward pass are summed over
//! the rows, so callers fold any `1/batch` factor into the upstream gradient.

mod adam;
mod checkpoint;

pub use adam::{step, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// Row-wise softmax; used by policy heads.
    Softmax,
}

/// Network topology: `[input, hidden.., output]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive: {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        })
    }

    /// `input -> hidden.. -> output` with ReLU hidden layers.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, output_activation)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer. `weights` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Weights and biases of every layer. Gradients share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

pub type Gradients = MlpParams;

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_sizes
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// Flat iteration order: per layer, weights row-major then bias.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        self.layers.len() == spec.num_layers()
            && self
                .layers
                .iter()
                .zip(spec.layer_sizes.windows(2))
                .all(|(l, w)| l.weights.dim() == (w[1], w[0]) && l.bias.len() == w[1])
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(spec);
    for layer in &mut params.layers {
        let bound = 1.0 / (layer.in_dim() as f64).sqrt();
        layer
            .weights
            .mapv_inplace(|_| rng.random_range(-bound..=bound));
    }
    params
}

fn check_params(params: &MlpParams, spec: &MlpSpec) -> Result<()> {
    if params.matches(spec) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(
            "parameter shapes do not match the network spec".into(),
        ))
    }
}

fn affine(layer: &Dense, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise `log softmax`, computed stably from logits.
pub fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

/// Activations recorded by a forward pass, consumed by [`backward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of the final layer.
    logits: Array2<f64>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

pub fn forward_tape(params: &MlpParams, spec: &MlpSpec, input: ArrayView2<f64>) -> Result<Tape> {
    check_params(params, spec)?;
    if input.ncols() != spec.input_dim() {
        return Err(Error::dim("mlp input", spec.input_dim(), input.ncols()));
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    inputs.push(input.to_owned());
    for layer in &params.layers[..n - 1] {
        let mut z = affine(layer, &inputs.last().expect("non-empty").view());
        z.mapv_inplace(|v| v.max(0.0));
        inputs.push(z);
    }
    let logits = affine(&params.layers[n - 1], &inputs[n - 1].view());
    let output = match spec.output_activation {
        OutputActivation::Identity => logits.clone(),
        OutputActivation::Softmax => softmax_rows(&logits),
    };
    Ok(Tape {
        inputs,
        logits,
        output,
    })
}

pub fn forward_batch(
    params: &MlpParams,
    spec: &MlpSpec,
    input: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(forward_tape(params, spec, input)?.into_output())
}

pub fn forward(params: &MlpParams, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
    Ok(forward_batch(params, spec, x)?.into_raw_vec_and_offset().0)
}

/// Backpropagate `upstream` (gradient w.r.t. the network output) through a
/// recorded pass. Returns parameter gradients summed over the batch and the
/// gradient w.r.t. the input rows.
pub fn backward_batch(
    params: &MlpParams,
    spec: &MlpSpec,
    tape: &Tape,
    upstream: ArrayView2<f64>,
) -> Result<(Gradients, Array2<f64>)> {
    check_params(params, spec)?;
    if upstream.dim() != tape.output.dim() {
        return Err(Error::dim(
            "mlp upstream gradient",
            tape.output.len(),
            upstream.len(),
        ));
    }
    let mut delta = match spec.output_activation {
        OutputActivation::Identity => upstream.to_owned(),
        OutputActivation::Softmax => {
            // dz = p * (g - <g, p>)
            let mut d = upstream.to_owned();
            Zip::from(d.rows_mut())
                .and(tape.output.rows())
                .for_each(|mut g, p| {
                    let dot = g.dot(&p);
                    g.zip_mut_with(&p, |gv, &pv| *gv = pv * (*gv - dot));
                });
            d
        }
    };

    let mut grads = params.zeros_like();
    for idx in (0..params.layers.len()).rev() {
        let x = &tape.inputs[idx];
        grads.layers[idx].weights = delta.t().dot(x);
        grads.layers[idx].bias = delta.sum_axis(Axis(0));
        let mut dx = delta.dot(&params.layers[idx].weights);
        if idx > 0 {
            // ReLU mask from the layer's own output (stored as next input).
            dx.zip_mut_with(x, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        delta = dx;
    }
    Ok((grads, delta))
}

pub fn backward(
    params: &MlpParams,
    spec: &MlpSpec,
    input: &[f64],
    upstream_grad: &[f64],
) -> Result<(Gradients, Vec<f64>)> {
    if upstream_grad.len() != spec.output_dim() {
        return Err(Error::dim(
            "mlp upstream gradient",
            spec.output_dim(),
            upstream_grad.len(),
        ));
    }
    let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
    let g = ArrayView2::from_shape((1, upstream_grad.len()), upstream_grad)
        .expect("contiguous slice");
    let tape = forward_tape(params, spec, x)?;
    let (grads, dx) = backward_batch(params, spec, &tape, g)?;
    Ok((grads, dx.into_raw_vec_and_offset().0))
}

/// Polyak averaging: `target <- (1 - coeff) * target + coeff * online`.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, coeff: f64) -> Result<()> {
    if !(coeff > 0.0 && coeff <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "soft update coefficient must be in (0, 1], got {coeff}"
        )));
    }
    if !target.same_shape(online) {
        return Err(Error::InvalidSpec(
            "soft update between differently shaped networks".into(),
        ));
    }
    if coeff == 1.0 {
        target.clone_from(online);
        return Ok(());
    }
    for (t, o) in target.iter_mut().zip(online.iter()) {
        *t = (1.0 - coeff) * *t + coeff * o;
    }
    Ok(())
}

/// A spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.params, &self.spec, input)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        forward_batch(&self.params, &self.spec, input)
    }

    pub fn forward_tape(&self, input: ArrayView2<f64>) -> Result<Tape> {
        forward_tape(&self.params, &self.spec, input)
    }

    pub fn backward_batch(
        &self,
        tape: &Tape,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        backward_batch(&self.params, &self.spec, tape, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn linear_1x1(w: f64, b: f64) -> (MlpSpec, MlpParams) {
        let spec = MlpSpec::new(vec![1, 1], OutputActivation::Identity).unwrap();
        let mut params = MlpParams::zeros(&spec);
        params.layers[0].weights[[0, 0]] = w;
        params.layers[0].bias[0] = b;
        (spec, params)
    }

    #[test]
    fn init_shapes() {
        let spec = MlpSpec::new(vec![2, 3, 1], OutputActivation::Identity).unwrap();
        let p = init_params(&spec, 7);
        assert_eq!(p.layers[0].weights.dim(), (3, 2));
        assert_eq!(p.layers[0].bias.len(), 3);
        assert_eq!(p.layers[1].weights.dim(), (1, 3));
        assert_eq!(p.layers[1].bias.len(), 1);
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(p, init_params(&spec, 7));
        assert_ne!(p, init_params(&spec, 8));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let spec = MlpSpec::new(vec![16, 4], OutputActivation::Identity).unwrap();
        let p = init_params(&spec, 1);
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= 0.25));
    }

    #[test]
    fn param_count_of_policy_sized_net() {
        let spec = MlpSpec::new(vec![4, 128, 128, 5], OutputActivation::Softmax).unwrap();
        assert_eq!(spec.param_count(), 17797);
        assert_eq!(init_params(&spec, 0).param_count(), 17797);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(MlpSpec::new(vec![3], OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], OutputActivation::Identity).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 4, 2], OutputActivation::Identity).unwrap();
        let p = MlpParams::zeros(&spec);
        assert_eq!(forward(&p, &spec, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_map() {
        let (spec, p) = linear_1x1(2.0, 1.0);
        assert_eq!(forward(&p, &spec, &[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let spec = MlpSpec::new(vec![1, 2], OutputActivation::Softmax).unwrap();
        let p = MlpParams::zeros(&spec);
        assert_eq!(forward(&p, &spec, &[0.3]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn forward_rejects_wrong_input_len() {
        let spec = MlpSpec::new(vec![3, 2], OutputActivation::Identity).unwrap();
        let p = MlpParams::zeros(&spec);
        assert!(matches!(
            forward(&p, &spec, &[1.0]),
            Err(Error::Dimension { expected: 3, actual: 1, .. })
        ));
    }

    #[test]
    fn backward_linear_case() {
        let (spec, p) = linear_1x1(2.0, 0.0);
        let (g, dx) = backward(&p, &spec, &[3.0], &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, array![[3.0]]);
        assert_eq!(g.layers[0].bias, array![1.0]);
        assert_eq!(dx, vec![2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = MlpSpec::new(vec![3, 5, 2], OutputActivation::Softmax).unwrap();
        let p = init_params(&spec, 3);
        let (g, dx) = backward(&p, &spec, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_upstream_len() {
        let spec = MlpSpec::new(vec![3, 2], OutputActivation::Identity).unwrap();
        let p = MlpParams::zeros(&spec);
        assert!(backward(&p, &spec, &[0.0; 3], &[1.0]).is_err());
    }

    #[test]
    fn soft_update_cases() {
        let (_, mut target) = linear_1x1(0.0, 0.0);
        let (_, online) = linear_1x1(1.0, 1.0);
        soft_update(&mut target, &online, 0.01).unwrap();
        assert!((target.layers[0].weights[[0, 0]] - 0.01).abs() < 1e-15);

        let mut t2 = target.clone();
        soft_update(&mut t2, &online, 1.0).unwrap();
        assert_eq!(t2, online);

        let mut same = online.clone();
        soft_update(&mut same, &online, 0.3).unwrap();
        assert_eq!(same, online);

        let spec = MlpSpec::new(vec![2, 1], OutputActivation::Identity).unwrap();
        let other = MlpParams::zeros(&spec);
        assert!(soft_update(&mut same, &other, 0.5).is_err());
        assert!(soft_update(&mut same, &online, 0.0).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let spec = MlpSpec::new(vec![4, 8, 8, 3], OutputActivation::Softmax).unwrap();
        let p = init_params(&spec, 11);
        let x = [0.3, -0.2, 0.9, 0.0];
        let a = forward(&p, &spec, &x).unwrap();
        let b = forward(&p, &spec, &x).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            logits in proptest::collection::vec(-30.0f64..30.0, 5),
            seed in 0u64..1000,
        ) {
            let spec = MlpSpec::new(vec![5, 6, 5], OutputActivation::Softmax).unwrap();
            let p = init_params(&spec, seed);
            let out = forward(&p, &spec, &logits).unwrap();
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
