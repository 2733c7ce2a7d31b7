//! Central finite-difference verification of the analytic gradients.
//!
//! Each network is probed with a random scalar loss `L = sum(c ⊙ output)` over a
//! small random batch. For a sampled subset of coordinates of every tensor the
//! analytic derivative is compared against `(L(p + h) - L(p - h)) / 2h`.
//! Coordinates whose perturbation flips a ReLU (or the log-std clamp) are
//! skipped: the loss is not differentiable across the kink.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use super::mlp::{Activation, Mlp};
use super::params::ParamVector;
use super::policy::GaussianPolicyNet;
use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Coordinates probed per tensor; tensors this small are checked in full.
    pub per_tensor: usize,
    pub batch: usize,
    /// Perturbs the analytic gradient, for exercising the failure path.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-6, per_tensor: 96, batch: 3, inject_fault: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub network: String,
    pub tensor: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.checks.iter().filter(|c| !(c.max_rel_err < self.tolerance)).collect()
    }

    /// Every tolerance met, and every network had at least one probe away from a kink.
    /// A single tensor can be all kinks, e.g. a bias whose input row is entirely dead.
    pub fn passed(&self) -> bool {
        let probed = |net: &str| self.checks.iter().filter(|c| c.network == net).map(|c| c.checked).sum::<usize>() > 0;
        !self.checks.is_empty() && self.failures().is_empty() && self.checks.iter().all(|c| probed(&c.network))
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.tolerance = other.tolerance;
        self.checks.extend(other.checks);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Shared driver: `eval` returns the loss and a kink signature for a parameter
/// vector; `analytic` is the gradient at the unperturbed point.
fn check_params<F>(
    network: &str,
    params: &ParamVector,
    analytic: &ParamVector,
    mut eval: F,
    rng: &mut SeededRng,
    opts: &GradCheckOptions,
) -> Vec<TensorCheck>
where
    F: FnMut(&ParamVector) -> (f64, Vec<bool>),
{
    let mut probe = params.clone();
    let mut out = Vec::new();
    for spec in params.layout() {
        let range = params.range_of(&spec.name).expect("layout entry");
        let n = range.len();
        let picks: Vec<usize> = if n <= opts.per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, opts.per_tensor).into_vec()
        };
        let mut check = TensorCheck {
            network: network.to_owned(),
            tensor: spec.name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for k in picks {
            let idx = range.start + k;
            let orig = params.values()[idx];
            probe.values_mut()[idx] = orig + opts.step;
            let (plus, sig_plus) = eval(&probe);
            probe.values_mut()[idx] = orig - opts.step;
            let (minus, sig_minus) = eval(&probe);
            probe.values_mut()[idx] = orig;
            if sig_plus != sig_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut a = analytic.values()[idx];
            if opts.inject_fault {
                a = a * 1.5 + 1e-3;
            }
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric, opts.abs_floor));
            check.checked += 1;
        }
        out.push(check);
    }
    out
}

fn random_batch(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

/// Checks parameter and input gradients of `net`.
pub fn check_mlp(name: &str, net: &Mlp, rng: &mut SeededRng, opts: &GradCheckOptions) -> Vec<TensorCheck> {
    let x = random_batch(opts.batch, net.input_dim(), rng);
    let c = random_batch(opts.batch, net.output_dim(), rng);
    let loss = |out: &Array2<f64>| (out * &c).sum();

    let tape = net.forward_batch(x.clone()).expect("input width matches");
    let mut grads = net.zero_grad();
    let dx = net.backward(&tape, c.clone(), &mut grads).expect("shapes match");

    let mut scratch = net.clone();
    let mut checks = check_params(
        name,
        net.params(),
        &grads,
        |p| {
            scratch.params_mut().values_mut().copy_from_slice(p.values());
            let t = scratch.forward_batch(x.clone()).expect("input width matches");
            (loss(t.output()), t.relu_pattern())
        },
        rng,
        opts,
    );

    // input gradient: the actor differentiates the critic through its action input
    let mut input_check = TensorCheck {
        network: name.to_owned(),
        tensor: "input".into(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    for r in 0..x.nrows() {
        for col in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[r, col]] += opts.step;
            let tp = net.forward_batch(xp).expect("width");
            let mut xm = x.clone();
            xm[[r, col]] -= opts.step;
            let tm = net.forward_batch(xm).expect("width");
            if tp.relu_pattern() != tm.relu_pattern() {
                input_check.skipped += 1;
                continue;
            }
            let numeric = (loss(tp.output()) - loss(tm.output())) / (2.0 * opts.step);
            let mut a = dx[[r, col]];
            if opts.inject_fault {
                a = a * 1.5 + 1e-3;
            }
            input_check.max_rel_err = input_check.max_rel_err.max(relative_error(a, numeric, opts.abs_floor));
            input_check.checked += 1;
        }
    }
    checks.push(input_check);
    checks
}

pub fn check_policy(
    name: &str,
    net: &GaussianPolicyNet,
    rng: &mut SeededRng,
    opts: &GradCheckOptions,
) -> Vec<TensorCheck> {
    let x = random_batch(opts.batch, net.input_dim(), rng);
    let c_mu: ndarray::Array1<f64> = (0..opts.batch).map(|_| rng.random_range(-1.5..1.5)).collect();
    let c_ls: ndarray::Array1<f64> = (0..opts.batch).map(|_| rng.random_range(-1.5..1.5)).collect();

    let tape = net.forward_batch(x.clone()).expect("width");
    let mut grads = net.zero_grad();
    net.backward(&tape, c_mu.view(), c_ls.view(), &mut grads).expect("shapes");

    let mut scratch = net.clone();
    check_params(
        name,
        net.params(),
        &grads,
        |p| {
            scratch.params_mut().values_mut().copy_from_slice(p.values());
            let t = scratch.forward_batch(x.clone()).expect("width");
            ((&t.mu * &c_mu).sum() + (&t.log_std * &c_ls).sum(), t.relu_pattern())
        },
        rng,
        opts,
    )
}

/// Network shapes used by a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShapes {
    pub state_dim: usize,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
}

impl NetworkShapes {
    pub fn critic_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.state_dim + 1];
        s.extend_from_slice(&self.critic_hidden);
        s.push(1);
        s
    }

    pub fn value_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.state_dim];
        s.extend_from_slice(&self.value_hidden);
        s.push(1);
        s
    }
}

/// Checks the policy, critic and value networks for one seed.
pub fn check_networks(shapes: &NetworkShapes, seed: u64, opts: &GradCheckOptions) -> GradCheckReport {
    let mut rng = seeded(seed);
    let policy = GaussianPolicyNet::new(shapes.state_dim, &shapes.policy_hidden, &mut rng);
    let critic = Mlp::new(&shapes.critic_sizes(), Activation::Identity, &mut rng);
    let value = Mlp::new(&shapes.value_sizes(), Activation::Identity, &mut rng);
    let mut checks = check_policy("policy", &policy, &mut rng, opts);
    checks.extend(check_mlp("critic", &critic, &mut rng, opts));
    checks.extend(check_mlp("value", &value, &mut rng, opts));
    GradCheckReport { checks, tolerance: opts.tolerance }
}
