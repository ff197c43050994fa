//! Independent reference checks: central finite differences, exhaustive
//! mainstay search and the self-check suites run by `oracle-check`.
//!
//! Everything here evaluates only forward passes or brute-force enumeration
//! so it stays independent of the analytic paths it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dmfl::{brute_force_mainstay, mainstay_code, psi, WeightedNeighborhood};
use crate::error::{Error, Result};
use crate::hashmodel::HashCode;
use crate::netcore::NetworkParams;

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `upstream · f(x)` in `x`.
pub fn fd_grad_input(net: &NetworkParams, x: &[f64], upstream: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = dot(upstream, &net.output(&probe).unwrap());
            probe[i] = x[i] - h;
            let minus = dot(upstream, &net.output(&probe).unwrap());
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central differences of an arbitrary scalar function of the parameters,
/// flattened layer by layer (weights then biases).
pub fn fd_scalar_params(
    net: &NetworkParams,
    h: f64,
    mut f: impl FnMut(&NetworkParams) -> f64,
) -> Vec<f64> {
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(net.num_params());
    for l in 0..net.layers().len() {
        for which in 0..2 {
            let n = if which == 0 {
                net.layers()[l].weights().len()
            } else {
                net.layers()[l].biases().len()
            };
            for i in 0..n {
                let orig = *param_slot(&mut probe, l, which, i);
                *param_slot(&mut probe, l, which, i) = orig + h;
                let plus = f(&probe);
                *param_slot(&mut probe, l, which, i) = orig - h;
                let minus = f(&probe);
                *param_slot(&mut probe, l, which, i) = orig;
                out.push((plus - minus) / (2.0 * h));
            }
        }
    }
    out
}

fn param_slot(p: &mut NetworkParams, layer: usize, which: usize, i: usize) -> &mut f64 {
    let layer = &mut p.layers_mut()[layer];
    if which == 0 {
        &mut layer.weights_mut()[i]
    } else {
        &mut layer.biases_mut()[i]
    }
}

/// Central differences of `sum_b upstream_b · f(x_b)` in the parameters.
pub fn fd_grad_params(
    net: &NetworkParams,
    xs: &[Vec<f64>],
    upstreams: &[Vec<f64>],
    h: f64,
) -> Vec<f64> {
    fd_scalar_params(net, h, |p| {
        xs.iter()
            .zip(upstreams)
            .map(|(x, u)| dot(u, &p.output(x).unwrap()))
            .sum()
    })
}

/// Random instance of the mainstay problem.
pub fn random_neighborhood<R: Rng>(
    rng: &mut R,
    k: usize,
    max_pos: usize,
    max_neg: usize,
) -> WeightedNeighborhood {
    let code = |rng: &mut R| {
        HashCode::new((0..k).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()).unwrap()
    };
    let np = rng.random_range(0..=max_pos);
    let nn = rng.random_range(if np == 0 { 1 } else { 0 }..=max_neg);
    let positives = (0..np).map(|_| (code(rng), rng.random_range(0.0..=1.0))).collect();
    let negatives = (0..nn).map(|_| (code(rng), rng.random_range(0.0..=1.0))).collect();
    WeightedNeighborhood::new(positives, negatives).unwrap()
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOutcome {
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn into_result(self, suite: &str) -> Result<usize> {
        if self.failures.is_empty() {
            Ok(self.cases)
        } else {
            Err(Error::OracleViolation(format!(
                "{suite}: {} of {} cases failed; first: {}",
                self.failures.len(),
                self.cases,
                self.failures[0]
            )))
        }
    }
}

/// Compares the closed-form mainstay code with exhaustive search over
/// `instances` random problems, requiring exact `f64` equality of ψ.
pub fn mainstay_optimality_suite(instances: usize, seed: u64) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteOutcome::default();
    let ks = [4usize, 8, 12];
    for case in 0..instances {
        let k = ks[case % ks.len()];
        let nbhd = random_neighborhood(&mut rng, k, 25, 25);
        out.cases += 1;
        let closed = mainstay_code(&nbhd).unwrap();
        let exhaustive = brute_force_mainstay(&nbhd).unwrap();
        if closed.psi_value != exhaustive.psi_value {
            out.failures.push(format!(
                "case {case} (K={k}): closed form ψ={} vs exhaustive ψ={}",
                closed.psi_value, exhaustive.psi_value
            ));
        }
        debug_assert_eq!(closed.psi_value, psi(&closed.code, &nbhd));
    }
    out
}

/// Checks analytic input and parameter gradients on `nets` random small
/// networks (≤ 3 layers, ≤ 16 units) against central differences.
pub fn gradient_suite(nets: usize, seed: u64, tolerance: f64) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteOutcome::default();
    for case in 0..nets {
        let depth = rng.random_range(0..=2usize);
        let input = rng.random_range(1..=16usize);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=16)).collect();
        let output = rng.random_range(1..=16usize);
        let net = NetworkParams::init(input, &hidden, output, &mut rng).unwrap();
        let batch = rng.random_range(1..=3usize);
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..input).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let ups: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..output).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        out.cases += 1;

        let trace = net.forward(&xs[0]).unwrap();
        let gi = net.grad_input(&trace, &ups[0]).unwrap();
        let fi = fd_grad_input(&net, &xs[0], &ups[0], 1e-5);
        let e_in = rel_err(&gi, &fi);

        let traces: Vec<_> = xs.iter().map(|x| net.forward(x).unwrap()).collect();
        let gp = net.grad_params(&traces, &ups).unwrap().flatten();
        let fp = fd_grad_params(&net, &xs, &ups, 1e-5);
        let e_p = rel_err(&gp, &fp);

        if !(e_in < tolerance && e_p < tolerance) {
            out.failures.push(format!(
                "net {case} ({input}->{hidden:?}->{output}): input rel err {e_in:.3e}, param rel err {e_p:.3e}"
            ));
        }
    }
    out
}
