//! Small dense networks with explicit forward caches and hand-rolled
//! reverse-mode gradients. Only the fixed topologies this crate needs are
//! supported: stacks of dense layers with tanh/relu hidden activations and an
//! identity, sigmoid or masked-softmax output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed in terms of the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    MaskedSoftmax,
}

/// Layer widths plus activation choices; `widths` includes input and output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(Self { widths, hidden, output })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

/// Forward cache: everything `backward` needs to reproduce exact gradients.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `layer_inputs[0]` is the network input and
    /// `layer_inputs[i]` is the activated output of layer `i - 1`.
    layer_inputs: Vec<Vec<f64>>,
    /// Final-layer pre-activation.
    pub logits: Vec<f64>,
    /// Output after the configured output activation.
    pub output: Vec<f64>,
}

impl MlpCache {
    pub fn scalar_output(&self) -> f64 {
        self.output[0]
    }

    pub fn scalar_logit(&self) -> f64 {
        self.logits[0]
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Initialize with scaled-uniform weights: gain sqrt(2) on hidden layers
    /// and `out_gain` on the output head. Biases start at zero.
    pub fn init(spec: MlpSpec, out_gain: f64, rng: &mut impl rand::Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for i in 0..spec.num_layers() {
            let (fan_out, fan_in) = (spec.widths[i + 1], spec.widths[i]);
            let mut w = ParamTensor::zeros(fan_out, fan_in);
            let gain = if i + 1 == spec.num_layers() { out_gain } else { std::f64::consts::SQRT_2 };
            w.init_scaled_uniform(gain, rng);
            let b = ParamTensor::zeros(fan_out, 1);
            layers.push(Dense { w, b });
        }
        Self { spec, layers }
    }

    pub fn from_parts(spec: MlpSpec, layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::Shape(format!(
                "spec declares {} layers, got {}",
                spec.num_layers(),
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.w.rows() != spec.widths[i + 1] || l.w.cols() != spec.widths[i] {
                return Err(Error::Shape(format!(
                    "layer {} weight is {}x{}, spec wants {}x{}",
                    i,
                    l.w.rows(),
                    l.w.cols(),
                    spec.widths[i + 1],
                    spec.widths[i]
                )));
            }
            if l.b.rows() != spec.widths[i + 1] || l.b.cols() != 1 {
                return Err(Error::Shape(format!("layer {} bias has wrong shape", i)));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, input: &[f64]) -> Result<MlpCache> {
        self.forward_impl(input, None)
    }

    /// Forward pass for masked-softmax outputs; the mask selects which output
    /// entries may receive probability.
    pub fn forward_masked(&self, input: &[f64], mask: &[bool]) -> Result<MlpCache> {
        self.forward_impl(input, Some(mask))
    }

    fn forward_impl(&self, input: &[f64], mask: Option<&[bool]>) -> Result<MlpCache> {
        if input.len() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match network input width {}",
                input.len(),
                self.spec.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        let mut logits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.w.rows()];
            layer.w.matvec(&x, &mut z);
            for (zi, bi) in z.iter_mut().zip(layer.b.values()) {
                *zi += bi;
            }
            layer_inputs.push(x);
            if i + 1 == self.layers.len() {
                logits = z;
                x = Vec::new();
            } else {
                x = z.iter().map(|&v| self.spec.hidden.apply(v)).collect();
            }
        }
        let output = match self.spec.output {
            OutputActivation::Identity => logits.clone(),
            OutputActivation::Sigmoid => logits.iter().map(|&z| sigmoid(z)).collect(),
            OutputActivation::MaskedSoftmax => {
                let mask = mask.ok_or_else(|| {
                    Error::Contract("masked-softmax output requires a mask".into())
                })?;
                masked_softmax(&logits, mask)?
            }
        };
        Ok(MlpCache { layer_inputs, logits, output })
    }

    /// Backpropagate a gradient given with respect to the final-layer
    /// pre-activation (`cache.logits`). Accumulates into each parameter's
    /// gradient and returns the gradient with respect to the network input.
    pub fn backward(&mut self, cache: &MlpCache, d_logits: &[f64]) -> Result<Vec<f64>> {
        if d_logits.len() != self.spec.output_dim() {
            return Err(Error::Shape("gradient length does not match output width".into()));
        }
        if cache.layer_inputs.len() != self.layers.len() {
            return Err(Error::Contract("forward cache does not match network depth".into()));
        }
        let mut g = d_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = &cache.layer_inputs[i];
            let layer = &mut self.layers[i];
            layer.w.add_outer_to_grad(&g, x);
            layer.b.add_to_grad(&g);
            let mut g_prev = vec![0.0; x.len()];
            layer.w.matvec_transpose_add(&g, &mut g_prev);
            if i > 0 {
                // x is the post-activation of layer i-1.
                for (gp, &h) in g_prev.iter_mut().zip(x) {
                    *gp *= self.spec.hidden.derivative_from_output(h);
                }
            }
            g = g_prev;
        }
        Ok(g)
    }

    /// Convert a gradient w.r.t. the activated output into one w.r.t. the
    /// final pre-activation, using the cached forward values.
    pub fn d_logits_from_output_grad(&self, cache: &MlpCache, d_output: &[f64]) -> Vec<f64> {
        match self.spec.output {
            OutputActivation::Identity => d_output.to_vec(),
            OutputActivation::Sigmoid => cache
                .output
                .iter()
                .zip(d_output)
                .map(|(&y, &dy)| dy * y * (1.0 - y))
                .collect(),
            OutputActivation::MaskedSoftmax => {
                let p = &cache.output;
                let dot: f64 = p.iter().zip(d_output).map(|(&pi, &di)| pi * di).sum();
                p.iter().zip(d_output).map(|(&pj, &dj)| pj * (dj - dot)).collect()
            }
        }
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stabilized softmax restricted to unmasked entries.
///
/// Masked entries get probability exactly 0. Errors if the mask admits no
/// entry at all.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape("mask length does not match logits".into()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Contract("masked softmax over an all-false mask".into()));
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if mask[i] {
            let e = (logits[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Log-probabilities matching [`masked_softmax`]; masked entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape("mask length does not match logits".into()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Contract("masked log-softmax over an all-false mask".into()));
    }
    let log_sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| (z - max).exp())
        .sum::<f64>()
        .ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { z - max - log_sum } else { f64::NEG_INFINITY })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn identity_net(dim: usize) -> Mlp {
        let spec =
            MlpSpec::new(vec![dim, dim], Activation::Tanh, OutputActivation::Identity).unwrap();
        let mut layers = Vec::new();
        let mut w = ParamTensor::zeros(dim, dim);
        for i in 0..dim {
            w.values_mut()[i * dim + i] = 1.0;
        }
        layers.push(Dense { w, b: ParamTensor::zeros(dim, 1) });
        Mlp::from_parts(spec, layers).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec =
            MlpSpec::new(vec![3, 4, 2], Activation::Tanh, OutputActivation::Identity).unwrap();
        let layers = vec![
            Dense { w: ParamTensor::zeros(4, 3), b: ParamTensor::zeros(4, 1) },
            Dense { w: ParamTensor::zeros(2, 4), b: ParamTensor::zeros(2, 1) },
        ];
        let net = Mlp::from_parts(spec, layers).unwrap();
        let cache = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(cache.output, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_net(2);
        let cache = net.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(cache.output, vec![1.0, 2.0]);
    }

    #[test]
    fn fixed_weights_hand_case() {
        // W = [[1,0],[0,2]], b = [0.5,-0.5], tanh output on a single layer.
        let spec =
            MlpSpec::new(vec![2, 2, 2], Activation::Tanh, OutputActivation::Identity).unwrap();
        let w0 = ParamTensor::from_values(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b0 = ParamTensor::from_values(2, 1, vec![0.5, -0.5]).unwrap();
        let w1 = {
            let mut t = ParamTensor::zeros(2, 2);
            t.values_mut()[0] = 1.0;
            t.values_mut()[3] = 1.0;
            t
        };
        let net = Mlp::from_parts(
            spec,
            vec![
                Dense { w: w0, b: b0 },
                Dense { w: w1, b: ParamTensor::zeros(2, 1) },
            ],
        )
        .unwrap();
        let cache = net.forward(&[1.0, 1.0]).unwrap();
        // Hidden pre-activations are [1.5, 1.5]; identity second layer reads tanh.
        assert_abs_diff_eq!(cache.output[0], 1.5f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(cache.output[1], 1.5f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(cache.output[0], 0.90515, epsilon = 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let net = identity_net(2);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut rng = derive_rng(1, 0);
        let spec =
            MlpSpec::new(vec![3, 5, 2], Activation::Tanh, OutputActivation::Identity).unwrap();
        let mut net = Mlp::init(spec, 1.0, &mut rng);
        let cache = net.forward(&[0.3, -0.1, 0.9]).unwrap();
        net.backward(&cache, &[0.0, 0.0]).unwrap();
        for p in net.params() {
            assert!(p.grad().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn linear_network_matches_closed_form_gradient() {
        // Squared error through a single linear layer: dL/dW = 2 (Wx + b - y) x^T.
        let spec =
            MlpSpec::new(vec![2, 2], Activation::Tanh, OutputActivation::Identity).unwrap();
        let w = ParamTensor::from_values(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let b = ParamTensor::from_values(2, 1, vec![0.1, -0.2]).unwrap();
        let mut net = Mlp::from_parts(spec, vec![Dense { w, b }]).unwrap();
        let x = [1.5, -0.5];
        let y = [1.0, 0.0];
        let cache = net.forward(&x).unwrap();
        let residual: Vec<f64> = cache.output.iter().zip(&y).map(|(o, t)| 2.0 * (o - t)).collect();
        net.backward(&cache, &residual).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expected = residual[r] * x[c];
                assert_abs_diff_eq!(net.layers[0].w.grad()[r * 2 + c], expected, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(net.layers[0].b.grad()[0], residual[0], epsilon = 1e-12);
    }

    /// Central finite differences over every parameter of a random network.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = derive_rng(42, 7);
        for trial in 0..20 {
            let widths = vec![3, 4 + trial % 3, 2];
            let spec =
                MlpSpec::new(widths, Activation::Tanh, OutputActivation::Identity).unwrap();
            let mut net = Mlp::init(spec, 1.0, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let probe: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();

            let cache = net.forward(&x).unwrap();
            net.clear_grads();
            net.backward(&cache, &probe).unwrap();
            let analytic: Vec<Vec<f64>> =
                net.params().iter().map(|p| p.grad().to_vec()).collect();

            let h = 1e-5;
            let loss = |net: &Mlp| -> f64 {
                let c = net.forward(&x).unwrap();
                c.output.iter().zip(&probe).map(|(o, p)| o * p).sum()
            };
            let n_params = net.params().len();
            for pi in 0..n_params {
                for k in 0..net.params()[pi].len() {
                    let orig = net.params()[pi].values()[k];
                    net.params_mut()[pi].values_mut()[k] = orig + h;
                    let up = loss(&net);
                    net.params_mut()[pi].values_mut()[k] = orig - h;
                    let down = loss(&net);
                    net.params_mut()[pi].values_mut()[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic[pi][k];
                    let rel = (a - fd).abs() / f64::max(1e-4, a.abs().max(fd.abs()));
                    assert!(rel < 1e-4, "param {pi}[{k}]: analytic {a} vs fd {fd}");
                }
            }
        }
    }

    #[test]
    fn masked_softmax_uniform_case() {
        let p = masked_softmax(&[0.0; 4], &[true; 4]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn masked_softmax_excludes_masked_entries() {
        let p = masked_softmax(&[5.0, 1.0, 1.0, 1.0], &[false, true, true, true]).unwrap();
        assert_eq!(p[0], 0.0);
        for &v in &p[1..] {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn masked_softmax_two_to_one() {
        let p = masked_softmax(&[2.0f64.ln(), 0.0], &[true, true]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn masked_softmax_rejects_all_false() {
        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let logits = [0.3, -2.0, 1.7, 0.0];
        let mask = [true, false, true, true];
        let p = masked_softmax(&logits, &mask).unwrap();
        let lp = masked_log_softmax(&logits, &mask).unwrap();
        for i in 0..4 {
            if mask[i] {
                assert_abs_diff_eq!(lp[i].exp(), p[i], epsilon = 1e-12);
            } else {
                assert_eq!(lp[i], f64::NEG_INFINITY);
            }
        }
    }
}
