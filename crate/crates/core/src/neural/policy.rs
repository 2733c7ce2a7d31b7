//! Gaussian policy network and reparameterized action sampling.
//!
//! The trunk maps a state to features; two affine heads produce the mean and
//! the log standard deviation. A raw action `u = mu + kappa * sigma` is mapped
//! into the rate bounds either by clipping (log-density of the unsquashed
//! Gaussian) or by a tanh squash (with the change-of-variables correction).

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mlp::{build_stack, init_layers, stack_backward, stack_forward, Activation, Dense};
use super::params::{ParamVector, TensorSpec};
use super::NeuralError;
use crate::rng::{standard_normal, SeededRng};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    Clip,
    Tanh,
}

impl Squash {
    pub fn as_str(self) -> &'static str {
        match self {
            Squash::Clip => "clip",
            Squash::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clip" => Some(Squash::Clip),
            "tanh" => Some(Squash::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: f64,
    pub high: f64,
}

impl ActionBounds {
    fn mid(&self) -> f64 {
        0.5 * (self.high + self.low)
    }

    fn half(&self) -> f64 {
        0.5 * (self.high - self.low)
    }

    /// Maps a raw Gaussian sample into the bounds. Returns the action and its
    /// derivative with respect to `raw`.
    pub fn squash(&self, raw: f64, squash: Squash) -> (f64, f64) {
        match squash {
            Squash::Clip => {
                if raw < self.low || raw > self.high {
                    (raw.clamp(self.low, self.high), 0.0)
                } else {
                    (raw, 1.0)
                }
            }
            Squash::Tanh => {
                let t = raw.tanh();
                (self.mid() + self.half() * t, self.half() * (1.0 - t * t))
            }
        }
    }
}

/// log N(raw; mu, sigma) written in terms of kappa = (raw - mu) / sigma.
pub fn gaussian_log_prob(kappa: f64, log_std: f64) -> f64 {
    -0.5 * kappa * kappa - log_std - 0.5 * (2.0 * PI).ln()
}

/// `log(1 - tanh(u)^2)` without cancellation.
fn log1m_tanh2(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

/// Log-density of the emitted action and its derivative with respect to the
/// raw sample (holding kappa fixed, only the squash correction depends on it).
pub fn action_log_prob(kappa: f64, log_std: f64, raw: f64, bounds: &ActionBounds, squash: Squash) -> (f64, f64) {
    let base = gaussian_log_prob(kappa, log_std);
    match squash {
        Squash::Clip => (base, 0.0),
        Squash::Tanh => (base - bounds.half().ln() - log1m_tanh2(raw), 2.0 * raw.tanh()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub action: f64,
    pub raw: f64,
    pub log_prob: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyTape {
    trunk: Vec<Array2<f64>>,
    pub mu: Array1<f64>,
    pub log_std_raw: Array1<f64>,
    pub log_std: Array1<f64>,
}

impl PolicyTape {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.trunk[1..]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .chain(self.log_std_raw.iter().map(|&v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyNet {
    input_dim: usize,
    hidden: Vec<usize>,
    trunk: Vec<Dense>,
    mu_head: Dense,
    log_std_head: Dense,
    params: ParamVector,
}

impl GaussianPolicyNet {
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        assert!(!hidden.is_empty(), "policy trunk needs at least one hidden layer");
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        let (trunk, mut specs) = build_stack("trunk.", &sizes, Activation::Relu, 0);
        let feat = *hidden.last().expect("non-empty");
        let mut offset: usize = specs.iter().map(TensorSpec::numel).sum();
        let mut head = |name: &str| {
            specs.push(TensorSpec::new(format!("{name}.weight"), &[feat, 1]));
            specs.push(TensorSpec::new(format!("{name}.bias"), &[1]));
            let d = Dense { inp: feat, out: 1, w: offset, b: offset + feat, act: Activation::Identity };
            offset += feat + 1;
            d
        };
        let mu_head = head("mu");
        let log_std_head = head("log_std");
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            trunk,
            mu_head,
            log_std_head,
            params: ParamVector::zeros(specs),
        }
    }

    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Self {
        let mut net = Self::zeros(input_dim, hidden);
        let layers: Vec<Dense> =
            net.trunk.iter().cloned().chain([net.mu_head.clone(), net.log_std_head.clone()]).collect();
        init_layers(&layers, net.params.values_mut(), rng);
        net
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<(), NeuralError> {
        self.params.copy_from(params)
    }

    pub fn zero_grad(&self) -> ParamVector {
        self.params.zeros_like()
    }

    pub fn forward_batch(&self, x: Array2<f64>) -> Result<PolicyTape, NeuralError> {
        if x.ncols() != self.input_dim {
            return Err(NeuralError::ShapeMismatch { expected: self.input_dim, actual: x.ncols() });
        }
        let p = self.params.values();
        let trunk = stack_forward(&self.trunk, p, x);
        let feat = trunk.last().expect("trunk output").view();
        let mu = self.mu_head.forward(p, feat).index_axis_move(Axis(1), 0);
        let log_std_raw = self.log_std_head.forward(p, feat).index_axis_move(Axis(1), 0);
        let log_std = log_std_raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok(PolicyTape { trunk, mu, log_std_raw, log_std })
    }

    /// `(mu, log_std)` for one state.
    pub fn head(&self, state: &[f64]) -> Result<(f64, f64), NeuralError> {
        let x = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|_| NeuralError::ShapeMismatch { expected: self.input_dim, actual: state.len() })?;
        let tape = self.forward_batch(x.to_owned())?;
        Ok((tape.mu[0], tape.log_std[0]))
    }

    /// Adds the gradient of `sum(d_mu ⊙ mu + d_log_std ⊙ log_std)` to `grads`;
    /// the log-std clamp passes no gradient outside its range.
    pub fn backward(
        &self,
        tape: &PolicyTape,
        d_mu: ArrayView1<f64>,
        d_log_std: ArrayView1<f64>,
        grads: &mut ParamVector,
    ) -> Result<Array2<f64>, NeuralError> {
        let n = tape.mu.len();
        if d_mu.len() != n || d_log_std.len() != n {
            return Err(NeuralError::ShapeMismatch { expected: n, actual: d_mu.len().min(d_log_std.len()) });
        }
        self.params.check_layout(grads)?;
        let p = self.params.values();
        let g = grads.values_mut();
        let feat = tape.trunk.last().expect("trunk output");
        let d_mu2 = d_mu.to_owned().insert_axis(Axis(1));
        let gated: Array1<f64> = ndarray::Zip::from(&d_log_std)
            .and(&tape.log_std_raw)
            .map_collect(|&d, &raw| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) { d } else { 0.0 });
        let d_ls2 = gated.insert_axis(Axis(1));
        let mu_out = tape.mu.view().insert_axis(Axis(1));
        let ls_out = tape.log_std_raw.view().insert_axis(Axis(1));
        let mut d_feat = self.mu_head.backward(p, feat.view(), mu_out, d_mu2, g);
        d_feat += &self.log_std_head.backward(p, feat.view(), ls_out, d_ls2, g);
        Ok(stack_backward(&self.trunk, p, &tape.trunk, d_feat, g))
    }
}

/// Draws `kappa ~ N(0, 1)` (or uses zero when deterministic), forms the raw
/// action `mu + kappa * sigma` and maps it into `bounds`.
pub fn sample_action(
    policy: &GaussianPolicyNet,
    state: &[f64],
    rng: &mut SeededRng,
    deterministic: bool,
    bounds: &ActionBounds,
    squash: Squash,
) -> Result<ActionSample, NeuralError> {
    let (mu, log_std) = policy.head(state)?;
    let kappa = if deterministic { 0.0 } else { standard_normal(rng) };
    Ok(action_from_head(mu, log_std, kappa, bounds, squash))
}

pub fn action_from_head(mu: f64, log_std: f64, kappa: f64, bounds: &ActionBounds, squash: Squash) -> ActionSample {
    let raw = mu + kappa * log_std.exp();
    let (action, _) = bounds.squash(raw, squash);
    let (log_prob, _) = action_log_prob(kappa, log_std, raw, bounds, squash);
    ActionSample { action, raw, log_prob, kappa }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    const BOUNDS: ActionBounds = ActionBounds { low: -0.2, high: 0.2 };

    fn set_head_bias(net: &mut GaussianPolicyNet, head: &str, value: f64) {
        let r = net.params().range_of(&format!("{head}.bias")).unwrap();
        net.params_mut().values_mut()[r.start] = value;
    }

    #[test]
    fn zero_kappa_is_clipped_mean() {
        let mut net = GaussianPolicyNet::zeros(5, &[8, 8]);
        set_head_bias(&mut net, "mu", 0.7);
        let s = action_from_head(0.7, -1.0, 0.0, &BOUNDS, Squash::Clip);
        assert_eq!(s.action, 0.2);
        let d = sample_action(&net, &[0.0; 5], &mut seeded(0), true, &BOUNDS, Squash::Clip).unwrap();
        assert_eq!(d.action, 0.2);
        assert_eq!(d.kappa, 0.0);
        set_head_bias(&mut net, "mu", 0.05);
        let d = sample_action(&net, &[0.0; 5], &mut seeded(0), true, &BOUNDS, Squash::Clip).unwrap();
        assert_eq!(d.action, 0.05);
    }

    #[test]
    fn log_prob_at_mean() {
        for log_std in [-3.0, -0.5, 0.0, 1.2] {
            let s = action_from_head(0.1, log_std, 0.0, &BOUNDS, Squash::Clip);
            let sigma = f64::exp(log_std);
            let expected = -(sigma * (2.0 * PI).sqrt()).ln();
            assert!((s.log_prob - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_is_stable() {
        let mut net = GaussianPolicyNet::zeros(3, &[4]);
        set_head_bias(&mut net, "log_std", -100.0);
        let mut rng = seeded(3);
        for squash in [Squash::Clip, Squash::Tanh] {
            for _ in 0..100 {
                let s = sample_action(&net, &[1.0, 2.0, 3.0], &mut rng, false, &BOUNDS, squash).unwrap();
                assert!(s.action.is_finite() && s.log_prob.is_finite() && s.raw.is_finite());
                assert!((BOUNDS.low..=BOUNDS.high).contains(&s.action));
            }
        }
        let (_, ls) = net.head(&[0.0; 3]).unwrap();
        assert_eq!(ls, LOG_STD_MIN);
    }

    #[test]
    fn tanh_log_prob_matches_change_of_variables() {
        // density of a = mid + half*tanh(u) by finite differences of the CDF map
        let (mu, log_std, kappa) = (0.3, -0.4, 0.8);
        let s = action_from_head(mu, log_std, kappa, &BOUNDS, Squash::Tanh);
        let u = s.raw;
        let h = 1e-6;
        let da_du = (BOUNDS.squash(u + h, Squash::Tanh).0 - BOUNDS.squash(u - h, Squash::Tanh).0) / (2.0 * h);
        let expected = gaussian_log_prob(kappa, log_std) - da_du.ln();
        assert!((s.log_prob - expected).abs() < 1e-8);
        assert!((log1m_tanh2(30.0) - (-60.0 + 2.0 * std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn raw_action_moments() {
        let mut net = GaussianPolicyNet::zeros(2, &[4]);
        set_head_bias(&mut net, "mu", 0.05);
        set_head_bias(&mut net, "log_std", (0.3f64).ln());
        let mut rng = seeded(17);
        let n = 100_000;
        let raws: Vec<f64> =
            (0..n).map(|_| sample_action(&net, &[0.5, 0.5], &mut rng, false, &BOUNDS, Squash::Clip).unwrap().raw).collect();
        let mean = raws.iter().sum::<f64>() / n as f64;
        let var = raws.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let se_mean = 0.3 / (n as f64).sqrt();
        let se_sd = 0.3 / (2.0 * n as f64).sqrt();
        assert!((mean - 0.05).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((sd - 0.3).abs() < 3.0 * se_sd, "sd {sd}");
    }

    #[test]
    fn layout_names() {
        let net = GaussianPolicyNet::zeros(30, &[128, 128, 128, 128]);
        let names: Vec<&str> = net.params().layout().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.first(), Some(&"trunk.l0.weight"));
        assert!(names.contains(&"mu.weight") && names.contains(&"log_std.bias"));
        assert_eq!(net.params().len(), 31 * 128 + 3 * 129 * 128 + 2 * 129);
    }
}
