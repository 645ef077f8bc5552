//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probe_count: usize,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>6} {:>12.3e} {:>12.3e}  {}",
            self.op_name,
            self.probe_count,
            self.max_rel_error,
            self.max_abs_error,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Step is `h_rel · max(1, |xᵢ|)`.
    pub h_rel: f64,
    pub tol: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            h_rel: 1e-4,
            tol: 1e-4,
            probes: 100,
            seed: 0x5eed,
        }
    }
}

impl CheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_probes(mut self, probes: usize) -> Self {
        self.probes = probes;
        self
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Builds a report from `(analytic, numeric)` pairs.
pub fn compare(op_name: &str, pairs: &[(f64, f64)], tol: f64) -> GradReport {
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for &(a, n) in pairs {
        max_rel = max_rel.max(relative_error(a, n));
        max_abs = max_abs.max((a - n).abs());
    }
    GradReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        probe_count: pairs.len(),
        pass: max_rel < tol,
    }
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of `inputs` on a random subset of probes.
///
/// Probes whose `±h` evaluations see a different relu sign pattern straddle
/// a kink and are replaced by fresh draws.
pub fn finite_diff_check<F>(op_name: &str, inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.relu_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<&Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("every input is a tracked leaf"))
        .collect();

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = index::sample(&mut rng, total, total.min(opts.probes.max(1) * 4)).into_vec();
    if total <= opts.probes {
        order = (0..total).collect();
    }

    let locate = |flat: usize| -> (usize, usize) {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        (which, flat - offsets[which])
    };

    let mut pairs = Vec::with_capacity(opts.probes);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut cursor = 0;
    while pairs.len() < opts.probes && cursor < order.len() {
        let (which, elem) = locate(order[cursor]);
        cursor += 1;
        let x0 = inputs[which].data()[elem];
        let h = opts.h_rel * x0.abs().max(1.0);

        work[which].data_mut()[elem] = x0 + h;
        let (plus, sig_plus) = eval(&work)?;
        work[which].data_mut()[elem] = x0 - h;
        let (minus, sig_minus) = eval(&work)?;
        work[which].data_mut()[elem] = x0;

        if sig_plus != sig_minus {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        pairs.push((analytic[which].data()[elem], numeric));
    }
    Ok(compare(op_name, &pairs, opts.tol))
}
